#pragma once

// CSV tables and SVG plots. Plots are pure functions of a table and a plot
// spec; output contains no timestamps or environment-dependent data.

#include <cstdio>
#include <map>
#include <set>

#include "tcx/core.hpp"
#include "tcx/manifest.hpp"

namespace tcx::report {

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
      if (header[i] == name) return i;
    return std::nullopt;
  }
  std::size_t column(const std::string& name) const {
    if (auto i = find(name)) return *i;
    throw FormatError("CSV is missing column '" + name + "'");
  }
  void add(std::vector<std::string> row) {
    if (row.size() != header.size()) throw std::logic_error("Table::add: row width mismatch");
    rows.push_back(std::move(row));
  }
};

inline std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string to_csv(const Table& t) {
  auto line = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (cells[i].find_first_of(",\"\n") != std::string::npos)
        throw std::invalid_argument("CSV cell contains a separator: " + cells[i]);
      if (i) s += ',';
      s += cells[i];
    }
    return s + "\n";
  };
  std::string out = line(t.header);
  for (const auto& r : t.rows) out += line(r);
  return out;
}

inline Table parse_csv(const std::string& text) {
  Table t;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split(line, ',');
    if (t.header.empty()) {
      t.header = std::move(cells);
      continue;
    }
    if (cells.size() != t.header.size())
      throw FormatError("CSV row has " + std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(t.header.size()));
    t.rows.push_back(std::move(cells));
  }
  if (t.header.empty()) throw FormatError("empty CSV");
  return t;
}

inline void write_table(const Table& t, const std::string& path) {
  write_text_file(path, to_csv(t));
}

inline Table read_table(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open CSV: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_csv(ss.str());
}

/// Distinct values of the manifest_hash column (empty if absent).
inline std::set<std::string> manifest_hashes(const Table& t) {
  std::set<std::string> out;
  if (auto c = t.find("manifest_hash"))
    for (const auto& r : t.rows) out.insert(r[*c]);
  return out;
}

// ---------------------------------------------------------------------------
// SVG
// ---------------------------------------------------------------------------

enum class PlotKind { Curve, Scatter };

struct PlotSpec {
  PlotKind kind = PlotKind::Curve;
  std::string x = "epoch";
  std::string y = "value_nats";
  /// One polyline per distinct value; empty draws a single series.
  std::string group;
  /// Row filters: column == value.
  std::vector<std::pair<std::string, std::string>> where;
  std::string title;
};

namespace detail {

inline std::optional<double> number(const std::string& s) {
  if (s == "nan" || s.empty()) return std::nullopt;
  double v = 0.0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) return std::nullopt;
  return v;
}

inline std::string px(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

inline std::string label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

inline std::string escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline bool group_less(const std::string& a, const std::string& b) {
  auto na = number(a), nb = number(b);
  if (na && nb) return *na < *nb || (*na == *nb && a < b);
  if (na != nb) return static_cast<bool>(na);
  return a < b;
}

}  // namespace detail

inline constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
                                           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

/// Renders the table as an SVG line or scatter plot. Rows whose x or y is not
/// a finite number are skipped.
inline std::string render_svg(const Table& t, const PlotSpec& spec, const std::string& hash = "") {
  if (t.rows.empty()) throw FormatError("CSV has no data rows");
  const auto cx = t.column(spec.x), cy = t.column(spec.y);
  const auto cg = spec.group.empty() ? std::optional<std::size_t>{} : t.column(spec.group);
  std::vector<std::pair<std::size_t, std::string>> filters;
  for (const auto& [c, v] : spec.where) filters.emplace_back(t.column(c), v);

  using Points = std::vector<std::pair<double, double>>;
  std::map<std::string, Points, decltype(&detail::group_less)> series(&detail::group_less);
  for (const auto& r : t.rows) {
    bool keep = true;
    for (const auto& [c, v] : filters) keep = keep && r[c] == v;
    if (!keep) continue;
    auto x = detail::number(r[cx]), y = detail::number(r[cy]);
    if (!x || !y) continue;
    series[cg ? r[*cg] : std::string()].emplace_back(*x, *y);
  }
  if (series.empty()) throw FormatError("no plottable rows for " + spec.x + " vs " + spec.y);

  double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
  for (auto& [g, pts] : series) {
    std::stable_sort(pts.begin(), pts.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (auto [x, y] : pts) {
      x0 = std::min(x0, x), x1 = std::max(x1, x);
      y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
  }
  if (x1 == x0) x0 -= 0.5, x1 += 0.5;
  if (y1 == y0) y0 -= 0.5, y1 += 0.5;

  const double W = 640, H = 420, ml = 70, mr = 130, mt = 40, mb = 50;
  auto sx = [&](double x) { return ml + (x - x0) / (x1 - x0) * (W - ml - mr); };
  auto sy = [&](double y) { return H - mb - (y - y0) / (y1 - y0) * (H - mt - mb); };
  using detail::px;

  std::string s;
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(W) + "\" height=\"" + px(H) +
       "\" viewBox=\"0 0 " + px(W) + " " + px(H) + "\">\n";
  if (!hash.empty()) s += "<desc>manifest_hash=" + detail::escape(hash) + "</desc>\n";
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!spec.title.empty())
    s += "<text x=\"" + px(W / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" +
         detail::escape(spec.title) + "</text>\n";
  s += "<g stroke=\"black\" fill=\"none\"><line x1=\"" + px(ml) + "\" y1=\"" + px(H - mb) +
       "\" x2=\"" + px(W - mr) + "\" y2=\"" + px(H - mb) + "\"/><line x1=\"" + px(ml) +
       "\" y1=\"" + px(mt) + "\" x2=\"" + px(ml) + "\" y2=\"" + px(H - mb) + "\"/></g>\n";
  s += "<g font-size=\"11\">\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = x0 + (x1 - x0) * k / 4.0, yv = y0 + (y1 - y0) * k / 4.0;
    s += "<text x=\"" + px(sx(xv)) + "\" y=\"" + px(H - mb + 16) + "\" text-anchor=\"middle\">" +
         detail::label(xv) + "</text>\n";
    s += "<text x=\"" + px(ml - 6) + "\" y=\"" + px(sy(yv) + 4) + "\" text-anchor=\"end\">" +
         detail::label(yv) + "</text>\n";
  }
  s += "<text x=\"" + px((ml + W - mr) / 2) + "\" y=\"" + px(H - 12) +
       "\" text-anchor=\"middle\">" + detail::escape(spec.x) + "</text>\n";
  s += "<text x=\"16\" y=\"" + px((mt + H - mb) / 2) + "\" transform=\"rotate(-90 16 " +
       px((mt + H - mb) / 2) + ")\" text-anchor=\"middle\">" + detail::escape(spec.y) +
       "</text>\n</g>\n";

  std::size_t idx = 0;
  for (const auto& [g, pts] : series) {
    const char* color = kPalette[idx % std::size(kPalette)];
    if (spec.kind == PlotKind::Curve) {
      s += "<polyline fill=\"none\" stroke=\"" + std::string(color) +
           "\" stroke-width=\"1.5\" points=\"";
      for (std::size_t i = 0; i < pts.size(); ++i)
        s += (i ? " " : "") + px(sx(pts[i].first)) + "," + px(sy(pts[i].second));
      s += "\"/>\n";
    } else {
      for (auto [x, y] : pts)
        s += "<circle cx=\"" + px(sx(x)) + "\" cy=\"" + px(sy(y)) + "\" r=\"3\" fill=\"" + color +
             "\"/>\n";
    }
    if (cg) {
      const double ly = mt + 14.0 * static_cast<double>(idx);
      s += "<text x=\"" + px(W - mr + 10) + "\" y=\"" + px(ly + 4) + "\" font-size=\"11\" fill=\"" +
           color + "\">" + detail::escape(spec.group + "=" + g) + "</text>\n";
    }
    ++idx;
  }
  s += "</svg>\n";
  return s;
}

}  // namespace tcx::report
