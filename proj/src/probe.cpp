#include "steerlab/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "binary_io.hpp"
#include "steerlab/error.hpp"
#include "steerlab/metrics.hpp"

namespace steerlab {

namespace {

std::string html_escape(std::string_view s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&#39;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos && s.find(' ') != 0) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fmt(const char* f, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

}  // namespace

std::vector<TokenScoreRow> probe_scores(const ReasoningTrace& trace, const ActivationMatrix& acts,
                                        const SteeringVector& direction, std::span<const float> center) {
  const std::size_t d = acts.d_model();
  if (acts.layer != direction.layer) {
    throw ValidationError("probe: activations are from layer " + std::to_string(acts.layer) +
                          " but the direction is from layer " + std::to_string(direction.layer));
  }
  if (direction.d_model() != d || center.size() != d) {
    throw ValidationError("probe: d_model mismatch between activations (" + std::to_string(d) + "), direction (" +
                          std::to_string(direction.d_model()) + ") and center (" + std::to_string(center.size()) +
                          ")");
  }
  if (acts.n_positions() != trace.token_ids.size()) {
    throw ValidationError("probe: trace '" + trace.trace_id + "' has " + std::to_string(trace.token_ids.size()) +
                          " tokens but " + std::to_string(acts.n_positions()) + " activation rows");
  }
  const double norm = l2_norm(direction.values);
  if (!(norm > 0.0)) throw ValidationError("probe: direction has zero norm");

  std::vector<TokenScoreRow> rows;
  rows.reserve(acts.n_positions());
  for (std::size_t t = 0; t < acts.n_positions(); ++t) {
    const auto a = acts.data.row(t);
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += static_cast<double>(direction.values[k]) * (double(a[k]) - center[k]);
    TokenScoreRow row;
    row.token_index = t;
    row.token_text = t < trace.token_texts.size() ? trace.token_texts[t] : std::string();
    row.score = static_cast<float>(s / norm);
    row.is_keyword = keyword_judge(row.token_text);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<float> default_probe_center(const ActivationSource& source, std::span<const ReasoningTrace> corpus,
                                        int layer) {
  return mean_act_over(
      source, corpus,
      [](const ReasoningTrace& trace) {
        std::vector<std::size_t> positions;
        for (const auto& s : trace.sentences) {
          for (std::size_t p = s.start; p < s.end; ++p) positions.push_back(p);
        }
        std::sort(positions.begin(), positions.end());
        positions.erase(std::unique(positions.begin(), positions.end()), positions.end());
        return positions;
      },
      layer);
}

double positive_p95(std::span<const TokenScoreRow> rows) {
  std::vector<float> pos;
  for (const auto& r : rows) {
    if (r.score > 0.0f) pos.push_back(r.score);
  }
  if (pos.empty()) return 0.0;
  std::sort(pos.begin(), pos.end());
  const auto rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(pos.size())));
  return pos[std::max<std::size_t>(rank, 1) - 1];
}

std::string heatmap_html(std::span<const TokenScoreRow> rows) {
  if (rows.empty()) throw ValidationError("heatmap needs at least one row");
  const double p95 = positive_p95(rows);
  std::string out =
      "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>token heatmap</title>\n<style>\n"
      "body { font-family: monospace; }\n"
      ".trace { white-space: pre-wrap; line-height: 1.9; }\n"
      ".tok { padding: 1px 0; }\n"
      ".kw { outline: 2px solid red; }\n"
      "</style>\n</head>\n<body>\n";
  out += "<p>p95 of positive scores: " + fmt("%.6g", p95) + "</p>\n<div class=\"trace\">";
  for (const auto& r : rows) {
    out += "<span class=\"tok";
    if (r.is_keyword) out += " kw";
    out += "\" title=\"" + std::to_string(r.token_index) + ": " + fmt("%.6g", r.score) + "\"";
    if (r.score > 0.0f && p95 > 0.0) {
      const double opacity = std::min(static_cast<double>(r.score) / p95, 1.0);
      out += " style=\"background-color: rgba(0, 128, 0, " + fmt("%.3f", opacity) + ")\"";
    }
    out += ">" + html_escape(r.token_text) + "</span>";
  }
  out += "</div>\n</body>\n</html>\n";
  return out;
}

void render_heatmap(std::span<const TokenScoreRow> rows, const std::filesystem::path& out) {
  detail::write_text_file(out, heatmap_html(rows));
}

std::string score_rows_to_csv(std::span<const TokenScoreRow> rows) {
  std::string out = "token_index,token_text,score,is_keyword\n";
  for (const auto& r : rows) {
    out += std::to_string(r.token_index) + "," + csv_field(r.token_text) + "," + fmt("%.6g", r.score) + "," +
           (r.is_keyword ? "1" : "0") + "\n";
  }
  return out;
}

void write_score_csv(std::span<const TokenScoreRow> rows, const std::filesystem::path& out) {
  detail::write_text_file(out, score_rows_to_csv(rows));
}

}  // namespace steerlab
