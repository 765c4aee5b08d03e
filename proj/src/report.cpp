#include "cprune/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>

#include "cprune/error.hpp"

namespace cprune {

namespace {

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(line);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!line.empty() && line.back() == sep) out.emplace_back();
  return out;
}

double parse_num(const std::string& s, std::size_t line) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError("results line " + std::to_string(line) + ": '" + s + "' is not a number");
  }
}

constexpr const char* kHeader =
    "config_id,k,R,threshold,criterion,accuracy,exit_ratio,avg_retention,mean_flops,score_ratio";

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace

std::vector<MetricsRow> parse_metrics_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != kHeader)
    throw FormatError("results file does not start with the expected CSV header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != 10)
      throw FormatError("results line " + std::to_string(lineno) + " has " +
                        std::to_string(f.size()) + " fields, expected 10");
    MetricsRow r;
    r.config_id = f[0];
    r.k = static_cast<std::size_t>(parse_num(f[1], lineno));
    r.R = parse_num(f[2], lineno);
    if (!f[3].empty()) r.threshold = parse_num(f[3], lineno);
    r.criterion = f[4];
    r.accuracy = parse_num(f[5], lineno);
    r.exit_ratio = parse_num(f[6], lineno);
    r.avg_retention = parse_num(f[7], lineno);
    r.mean_flops = parse_num(f[8], lineno);
    r.score_ratio = parse_num(f[9], lineno);
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path.string() + " (run `cprune run` first)");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_metrics_csv(ss.str());
}

std::string family_of(const std::string& config_id) {
  static const std::regex kr("_k[0-9]+_R[^_]+");
  return std::regex_replace(config_id, kr, "");
}

std::map<std::string, std::vector<MetricsRow>> group_families(const std::vector<MetricsRow>& rows) {
  std::map<std::string, std::vector<MetricsRow>> out;
  for (const auto& r : rows)
    if (r.config_id != "large_unpruned") out[family_of(r.config_id)].push_back(r);
  for (auto& [_, v] : out)
    std::stable_sort(v.begin(), v.end(),
                     [](const MetricsRow& a, const MetricsRow& b) { return a.mean_flops < b.mean_flops; });
  return out;
}

std::string curve_svg(const std::string& title, const std::vector<MetricsRow>& rows,
                      const MetricsRow* baseline) {
  const double W = 480, H = 320, ml = 60, mr = 20, mt = 30, mb = 45;
  double xmax = 0;
  for (const auto& r : rows) xmax = std::max(xmax, r.mean_flops);
  if (baseline) xmax = std::max(xmax, baseline->mean_flops);
  if (!(xmax > 0)) xmax = 1;
  auto X = [&](double f) { return ml + (W - ml - mr) * f / (xmax * 1.05); };
  auto Y = [&](double a) { return mt + (H - mt - mb) * (1.0 - a); };

  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << W / 2 << "\" y=\"18\" text-anchor=\"middle\">" << esc(title) << "</text>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << Y(0) << "\" x2=\"" << W - mr << "\" y2=\"" << Y(0)
    << "\" stroke=\"black\"/>\n";
  s << "<line x1=\"" << ml << "\" y1=\"" << Y(0) << "\" x2=\"" << ml << "\" y2=\"" << Y(1)
    << "\" stroke=\"black\"/>\n";
  for (double a : {0.0, 0.5, 1.0})
    s << "<text x=\"" << ml - 6 << "\" y=\"" << Y(a) + 4 << "\" text-anchor=\"end\">" << fmt(a)
      << "</text>\n";
  s << "<text x=\"" << X(xmax) << "\" y=\"" << H - mb + 15 << "\" text-anchor=\"end\">"
    << fmt(xmax / 1e6) << " MFLOPs</text>\n";
  s << "<text x=\"" << (ml + W - mr) / 2 << "\" y=\"" << H - 8
    << "\" text-anchor=\"middle\">mean FLOPs per instance</text>\n";
  s << "<text x=\"14\" y=\"" << (mt + H - mb) / 2 << "\" transform=\"rotate(-90 14 "
    << (mt + H - mb) / 2 << ")\" text-anchor=\"middle\">accuracy</text>\n";
  if (!rows.empty()) {
    s << "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < rows.size(); ++i)
      s << (i ? " " : "") << fmt(X(rows[i].mean_flops)) << "," << fmt(Y(rows[i].accuracy));
    s << "\"/>\n";
  }
  if (baseline)
    s << "<circle cx=\"" << fmt(X(baseline->mean_flops)) << "\" cy=\"" << fmt(Y(baseline->accuracy))
      << "\" r=\"4\" fill=\"#d62728\"><title>large_unpruned</title></circle>\n";
  s << "</svg>\n";
  return s.str();
}

std::string heatmap_svg(const Matrix& m, const std::vector<std::size_t>& kept,
                        const std::vector<std::size_t>& planted, const std::string& title) {
  const double cell = 32, top = 28;
  double lo = m.data.empty() ? 0 : *std::min_element(m.data.begin(), m.data.end());
  double hi = m.data.empty() ? 1 : *std::max_element(m.data.begin(), m.data.end());
  if (!(hi > lo)) hi = lo + 1;
  std::ostringstream s;
  const double W = std::max(200.0, cell * static_cast<double>(m.cols) + 8);
  const double H = cell * static_cast<double>(m.rows) + top + 6;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  s << "<text x=\"4\" y=\"16\">" << esc(title) << "</text>\n";
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) {
      const std::size_t idx = r * m.cols + c;
      const double t = (m(r, c) - lo) / (hi - lo);
      const int shade = static_cast<int>(std::lround(255 * (1 - t)));
      const bool is_kept = std::find(kept.begin(), kept.end(), idx) != kept.end();
      const double x = 4 + cell * static_cast<double>(c), y = top + cell * static_cast<double>(r);
      s << "<rect class=\"cell" << (is_kept ? " kept" : "") << "\" data-index=\"" << idx
        << "\" x=\"" << x << "\" y=\"" << y << "\" width=\"" << cell << "\" height=\"" << cell
        << "\" fill=\"rgb(255," << shade << "," << shade << ")\" stroke=\""
        << (is_kept ? "#2ca02c" : "#cccccc") << "\" stroke-width=\"" << (is_kept ? 3 : 1)
        << "\"/>\n";
      if (std::find(planted.begin(), planted.end(), idx) != planted.end())
        s << "<circle class=\"planted\" cx=\"" << x + cell / 2 << "\" cy=\"" << y + cell / 2
          << "\" r=\"4\" fill=\"black\"/>\n";
    }
  s << "</svg>\n";
  return s.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("failed writing " + path.string());
}

}  // namespace cprune
