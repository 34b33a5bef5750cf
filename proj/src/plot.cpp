#include "pcml/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "pcml/error.hpp"

namespace pcml {

std::size_t CsvTable::column(std::string_view name) const {
  const auto it = std::find(header.begin(), header.end(), name);
  if (it == header.end()) throw ValidationError("csv is missing column '" + std::string(name) + "'");
  return static_cast<std::size_t>(it - header.begin());
}

bool CsvTable::has(std::string_view name) const {
  return std::find(header.begin(), header.end(), name) != header.end();
}

double CsvTable::number(std::size_t row, std::size_t col) const {
  const std::string& s = rows.at(row).at(col);
  if (s.empty()) return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() ? v : std::numeric_limits<double>::quiet_NaN();
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else if (c != '\r') {
      out.back() += c;
    }
  }
  return out;
}

}  // namespace

CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line == "\r") continue;
    auto fields = split_line(line);
    if (t.header.empty()) {
      t.header = std::move(fields);
      continue;
    }
    if (fields.size() != t.header.size()) {
      throw ValidationError("csv row " + std::to_string(t.rows.size() + 1) + " has " +
                            std::to_string(fields.size()) + " fields, header has " +
                            std::to_string(t.header.size()));
    }
    t.rows.push_back(std::move(fields));
  }
  if (t.header.empty()) throw ValidationError("csv has no header");
  return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_csv(ss.str());
}

PlotKind plot_kind_from_string(std::string_view s) {
  if (s == "trajectory") return PlotKind::trajectory;
  if (s == "bands") return PlotKind::bands;
  if (s == "loss") return PlotKind::loss;
  throw ValidationError("unknown plot kind '" + std::string(s) + "' (expected trajectory, bands or loss)");
}

namespace {

constexpr double kWidth = 720.0;
constexpr double kPanel = 240.0;
constexpr double kLeft = 80.0;
constexpr double kRight = 20.0;
constexpr double kTop = 40.0;
constexpr double kBottom = 50.0;

std::string escape(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Series {
  std::vector<double> x;
  std::vector<double> y;
};

// Maps data coordinates of one panel to pixels.
struct Frame {
  double x0, x1, y0, y1;
  double top;
  bool log_y = false;

  double px(double x) const { return kLeft + (x - x0) / (x1 - x0) * (kWidth - kLeft - kRight); }
  double py(double y) const {
    const double v = log_y ? std::log10(y) : y;
    return top + kPanel - (v - y0) / (y1 - y0) * kPanel;
  }
};

void widen(double& lo, double& hi) {
  if (!(hi > lo)) {
    const double pad = std::max(1e-12, std::abs(lo) * 0.05 + 0.5 * (hi - lo));
    lo -= pad;
    hi += pad;
  } else {
    const double pad = 0.05 * (hi - lo);
    lo -= pad;
    hi += pad;
  }
}

Frame make_frame(const std::vector<const Series*>& all, double top, bool log_y) {
  Frame f{std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(),
          std::numeric_limits<double>::infinity(), -std::numeric_limits<double>::infinity(), top, log_y};
  for (const Series* s : all) {
    for (std::size_t i = 0; i < s->x.size(); ++i) {
      if (!std::isfinite(s->x[i]) || !std::isfinite(s->y[i])) continue;
      const double y = log_y ? std::log10(s->y[i]) : s->y[i];
      f.x0 = std::min(f.x0, s->x[i]);
      f.x1 = std::max(f.x1, s->x[i]);
      f.y0 = std::min(f.y0, y);
      f.y1 = std::max(f.y1, y);
    }
  }
  if (!std::isfinite(f.x0)) f.x0 = 0.0, f.x1 = 1.0;
  if (!std::isfinite(f.y0)) f.y0 = 0.0, f.y1 = 1.0;
  if (!(f.x1 > f.x0)) widen(f.x0, f.x1);
  widen(f.y0, f.y1);
  return f;
}

void axes(std::ostringstream& os, const Frame& f, const PlotLabels& labels, const std::string& title) {
  const double bottom = f.top + kPanel;
  os << "<rect x=\"" << num(kLeft) << "\" y=\"" << num(f.top) << "\" width=\"" << num(kWidth - kLeft - kRight)
     << "\" height=\"" << num(kPanel) << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = f.x0 + (f.x1 - f.x0) * k / 4.0;
    const double yv = f.y0 + (f.y1 - f.y0) * k / 4.0;
    const double x = f.px(xv);
    const double y = f.top + kPanel - kPanel * k / 4.0;
    os << "<line x1=\"" << num(x) << "\" y1=\"" << num(bottom) << "\" x2=\"" << num(x) << "\" y2=\""
       << num(bottom + 5) << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << num(x) << "\" y=\"" << num(bottom + 18) << "\" font-size=\"11\" text-anchor=\"middle\">"
       << tick(xv) << "</text>\n";
    os << "<line x1=\"" << num(kLeft - 5) << "\" y1=\"" << num(y) << "\" x2=\"" << num(kLeft) << "\" y2=\""
       << num(y) << "\" stroke=\"#444\"/>\n";
    os << "<text x=\"" << num(kLeft - 8) << "\" y=\"" << num(y + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
       << (f.log_y ? "1e" + tick(yv) : tick(yv)) << "</text>\n";
  }
  os << "<text x=\"" << num(kLeft + (kWidth - kLeft - kRight) / 2) << "\" y=\"" << num(bottom + 36)
     << "\" font-size=\"12\" text-anchor=\"middle\">" << escape(labels.x) << "</text>\n";
  os << "<text x=\"16\" y=\"" << num(f.top + kPanel / 2) << "\" font-size=\"12\" text-anchor=\"middle\" "
     << "transform=\"rotate(-90 16 " << num(f.top + kPanel / 2) << ")\">"
     << escape(f.log_y ? labels.y + " (log scale)" : labels.y) << "</text>\n";
  os << "<text x=\"" << num(kLeft) << "\" y=\"" << num(f.top - 8) << "\" font-size=\"13\">" << escape(title)
     << "</text>\n";
}

void polyline(std::ostringstream& os, const Frame& f, const Series& s, const std::string& color, bool dashed) {
  std::vector<std::size_t> order(s.x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s.x[a] < s.x[b]; });
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\"" << (dashed ? " stroke-dasharray=\"6 4\"" : "")
     << " points=\"";
  bool first = true;
  for (const std::size_t i : order) {
    if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
    os << (first ? "" : " ") << num(f.px(s.x[i])) << "," << num(f.py(s.y[i]));
    first = false;
  }
  os << "\"/>\n";
}

void scatter(std::ostringstream& os, const Frame& f, const Series& s, const std::string& color) {
  for (std::size_t i = 0; i < s.x.size(); ++i) {
    if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
    os << "<circle cx=\"" << num(f.px(s.x[i])) << "\" cy=\"" << num(f.py(s.y[i])) << "\" r=\"2.5\" fill=\"" << color
       << "\"/>\n";
  }
}

void band(std::ostringstream& os, const Frame& f, const Series& lo, const Series& hi, const std::string& color) {
  std::vector<std::size_t> order(lo.x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lo.x[a] < lo.x[b]; });
  os << "<polygon fill=\"" << color << "\" fill-opacity=\"0.25\" stroke=\"none\" points=\"";
  bool first = true;
  for (const std::size_t i : order) {
    if (!std::isfinite(hi.x[i]) || !std::isfinite(hi.y[i])) continue;
    os << (first ? "" : " ") << num(f.px(hi.x[i])) << "," << num(f.py(hi.y[i]));
    first = false;
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!std::isfinite(lo.x[*it]) || !std::isfinite(lo.y[*it])) continue;
    os << " " << num(f.px(lo.x[*it])) << "," << num(f.py(lo.y[*it]));
  }
  os << "\"/>\n";
}

std::string header(double height) {
  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << num(kWidth) << "\" height=\"" << num(height)
     << "\" viewBox=\"0 0 " << num(kWidth) << " " << num(height) << "\" font-family=\"sans-serif\">\n"
     << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  return os.str();
}

std::string legend(double y, const std::vector<std::pair<std::string, std::string>>& items) {
  std::ostringstream os;
  double x = kLeft;
  for (const auto& [label, color] : items) {
    os << "<rect x=\"" << num(x) << "\" y=\"" << num(y - 9) << "\" width=\"12\" height=\"10\" fill=\"" << color
       << "\"/>\n<text x=\"" << num(x + 16) << "\" y=\"" << num(y) << "\" font-size=\"11\">" << escape(label)
       << "</text>\n";
    x += 30.0 + 7.0 * static_cast<double>(label.size());
  }
  return os.str();
}

std::string render_series(const CsvTable& t, PlotKind kind, const PlotLabels& labels) {
  const std::size_t c_row = t.column("row");
  const std::size_t c_x = c_row + 1;
  if (c_x >= t.header.size()) throw ValidationError("csv has no input column after 'row'");
  const std::size_t c_out = t.column("output");
  const std::size_t c_truth = t.column("truth");
  const bool bands = kind == PlotKind::bands;
  const std::size_t c_mean = t.column(bands ? "mean" : "prediction");
  std::size_t c_lo = 0, c_hi = 0;
  if (bands) {
    c_lo = t.column("lower");
    c_hi = t.column("upper");
  }
  const bool has_obs = t.has("observed");
  const std::size_t c_obs = has_obs ? t.column("observed") : 0;

  struct Panel {
    Series truth, mean, lo, hi, obs;
  };
  std::map<long, Panel> panels;
  for (std::size_t r = 0; r < t.rows.size(); ++r) {
    const double out = t.number(r, c_out);
    if (!std::isfinite(out)) throw ValidationError("csv row " + std::to_string(r + 1) + " has no output index");
    Panel& p = panels[std::lround(out)];
    const double x = t.number(r, c_x);
    p.truth.x.push_back(x);
    p.truth.y.push_back(t.number(r, c_truth));
    p.mean.x.push_back(x);
    p.mean.y.push_back(t.number(r, c_mean));
    if (bands) {
      p.lo.x.push_back(x);
      p.lo.y.push_back(t.number(r, c_lo));
      p.hi.x.push_back(x);
      p.hi.y.push_back(t.number(r, c_hi));
    }
    if (has_obs) {
      p.obs.x.push_back(x);
      p.obs.y.push_back(t.number(r, c_obs));
    }
  }
  PlotLabels l = labels;
  if (l.x.empty()) l.x = t.header[c_x];
  if (l.y.empty()) l.y = "value";
  const double height = kTop + static_cast<double>(std::max<std::size_t>(panels.size(), 1)) * (kPanel + kBottom + 20) + 20;
  std::ostringstream os;
  os << header(height);
  if (!l.title.empty()) os << "<text x=\"" << num(kLeft) << "\" y=\"18\" font-size=\"14\">" << escape(l.title) << "</text>\n";
  os << legend(32, bands ? std::vector<std::pair<std::string, std::string>>{{"truth (dashed)", "#222"}, {"mean", "#1f77b4"},
                                                                            {"band", "#9ecae1"}, {"measured", "#d62728"}}
                         : std::vector<std::pair<std::string, std::string>>{{"truth (dashed)", "#222"},
                                                                            {"prediction", "#1f77b4"}, {"measured", "#d62728"}});
  double top = kTop + 20;
  for (const auto& [index, p] : panels) {
    std::vector<const Series*> all{&p.truth, &p.mean, &p.obs};
    if (bands) {
      all.push_back(&p.lo);
      all.push_back(&p.hi);
    }
    const Frame f = make_frame(all, top, false);
    const std::string title = index >= 0 && static_cast<std::size_t>(index) < l.outputs.size()
                                  ? l.outputs[static_cast<std::size_t>(index)]
                                  : "output " + std::to_string(index);
    axes(os, f, l, title);
    if (bands) band(os, f, p.lo, p.hi, "#9ecae1");
    polyline(os, f, p.truth, "#222", true);
    polyline(os, f, p.mean, "#1f77b4", false);
    scatter(os, f, p.obs, "#d62728");
    top += kPanel + kBottom + 20;
  }
  os << "</svg>\n";
  return os.str();
}

std::string render_loss(const CsvTable& t, const PlotLabels& labels) {
  const std::size_t c_epoch = t.column("epoch");
  std::vector<std::pair<std::string, Series>> curves;
  for (const char* name : {"total_loss", "data_loss", "physics_loss"}) {
    if (!t.has(name)) {
      if (std::string(name) == "total_loss") t.column(name);
      continue;
    }
    const std::size_t c = t.column(name);
    Series s;
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
      s.x.push_back(t.number(r, c_epoch));
      s.y.push_back(t.number(r, c));
    }
    curves.emplace_back(name, std::move(s));
  }
  bool positive = true;
  for (const auto& [name, s] : curves) {
    for (const double y : s.y) positive = positive && std::isfinite(y) && y > 0.0;
  }
  std::vector<const Series*> all;
  for (const auto& c : curves) all.push_back(&c.second);
  PlotLabels l = labels;
  if (l.x.empty()) l.x = "epoch";
  if (l.y.empty()) l.y = "loss";
  const double height = kTop + 20 + kPanel + kBottom + 20;
  std::ostringstream os;
  os << header(height);
  if (!l.title.empty()) os << "<text x=\"" << num(kLeft) << "\" y=\"18\" font-size=\"14\">" << escape(l.title) << "</text>\n";
  const char* colors[] = {"#1f77b4", "#2ca02c", "#d62728"};
  std::vector<std::pair<std::string, std::string>> items;
  for (std::size_t k = 0; k < curves.size(); ++k) items.emplace_back(curves[k].first, colors[k]);
  os << legend(32, items);
  const Frame f = make_frame(all, kTop + 20, positive);
  axes(os, f, l, "");
  for (std::size_t k = 0; k < curves.size(); ++k) polyline(os, f, curves[k].second, colors[k], false);
  os << "</svg>\n";
  return os.str();
}

}  // namespace

std::string render_svg(const CsvTable& table, PlotKind kind, const PlotLabels& labels) {
  return kind == PlotKind::loss ? render_loss(table, labels) : render_series(table, kind, labels);
}

void plot(const std::filesystem::path& csv, PlotKind kind, const std::filesystem::path& svg, const PlotLabels& labels) {
  const std::string text = render_svg(read_csv(csv), kind, labels);
  std::ofstream out(svg, std::ios::binary);
  if (!out) throw ValidationError("cannot write " + svg.string());
  out << text;
}

}  // namespace pcml
