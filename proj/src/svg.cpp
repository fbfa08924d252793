#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "errors.hpp"

namespace pbflow {
namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
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

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                          "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
constexpr int kPaletteSize = 8;

// Round limits outward to a tidy tick step: 1, 2, 2.5, 5 times a power of ten.
double nice_step(double span, int target_ticks) {
  if (span <= 0.0) return 1.0;
  double raw = span / target_ticks;
  double mag = std::pow(10.0, std::floor(std::log10(raw)));
  double frac = raw / mag;
  double step;
  if (frac <= 1.0)
    step = 1.0;
  else if (frac <= 2.0)
    step = 2.0;
  else if (frac <= 2.5)
    step = 2.5;
  else if (frac <= 5.0)
    step = 5.0;
  else
    step = 10.0;
  return step * mag;
}

}  // namespace

std::string render_line_plot(const PlotSpec& spec) {
  const double left = 64.0, right = 168.0, top = 40.0, bottom = 52.0;
  const double pw = spec.width - left - right;
  const double ph = spec.height - top - bottom;

  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin;
  double ymin = xmin, ymax = -xmin;
  for (const auto& s : spec.series) {
    for (const auto& p : s.points) {
      xmin = std::min(xmin, p.x);
      xmax = std::max(xmax, p.x);
      ymin = std::min(ymin, p.y - p.spread);
      ymax = std::max(ymax, p.y + p.spread);
    }
  }
  if (!(xmin <= xmax)) {
    xmin = 0.0;
    xmax = 1.0;
    ymin = 0.0;
    ymax = 1.0;
  }
  if (xmax - xmin < 1e-12) {
    xmin -= 0.5;
    xmax += 0.5;
  }
  double ypad = (ymax - ymin < 1e-12) ? 0.05 : 0.08 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return left + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  std::ostringstream os;
  os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
     << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << spec.width
     << "\" height=\"" << spec.height << "\" viewBox=\"0 0 " << spec.width
     << " " << spec.height << "\">\n"
     << "<rect width=\"" << spec.width << "\" height=\"" << spec.height
     << "\" fill=\"white\"/>\n"
     << "<text x=\"" << num(left + pw / 2) << "\" y=\"22\" font-family=\"sans-serif\""
     << " font-size=\"15\" text-anchor=\"middle\">" << xml_escape(spec.title)
     << "</text>\n";

  // Axes frame.
  os << "<rect x=\"" << num(left) << "\" y=\"" << num(top) << "\" width=\""
     << num(pw) << "\" height=\"" << num(ph)
     << "\" fill=\"none\" stroke=\"#333333\" stroke-width=\"1\"/>\n";

  // Ticks and grid lines.
  const double xstep = nice_step(xmax - xmin, 6);
  for (double t = std::ceil(xmin / xstep) * xstep; t <= xmax + 1e-9 * xstep; t += xstep) {
    double X = px(t);
    os << "<line x1=\"" << num(X) << "\" y1=\"" << num(top) << "\" x2=\"" << num(X)
       << "\" y2=\"" << num(top + ph)
       << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
       << "<text x=\"" << num(X) << "\" y=\"" << num(top + ph + 18)
       << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">"
       << num(t) << "</text>\n";
  }
  const double ystep = nice_step(ymax - ymin, 6);
  for (double t = std::ceil(ymin / ystep) * ystep; t <= ymax + 1e-9 * ystep; t += ystep) {
    double Y = py(t);
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(Y) << "\" x2=\""
       << num(left + pw) << "\" y2=\"" << num(Y)
       << "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n"
       << "<text x=\"" << num(left - 8) << "\" y=\"" << num(Y + 4)
       << "\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">"
       << num(t) << "</text>\n";
  }

  os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(top + ph + 38)
     << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">"
     << xml_escape(spec.x_label) << "</text>\n"
     << "<text x=\"18\" y=\"" << num(top + ph / 2)
     << "\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\""
     << " transform=\"rotate(-90 18 " << num(top + ph / 2) << ")\">"
     << xml_escape(spec.y_label) << "</text>\n";

  for (std::size_t si = 0; si < spec.series.size(); ++si) {
    const auto& s = spec.series[si];
    const char* color = kPalette[si % kPaletteSize];
    if (!s.points.empty()) {
      os << "<polyline fill=\"none\" stroke=\"" << color
         << "\" stroke-width=\"1.8\" points=\"";
      for (std::size_t i = 0; i < s.points.size(); ++i) {
        if (i) os << ' ';
        os << num(px(s.points[i].x)) << ',' << num(py(s.points[i].y));
      }
      os << "\"/>\n";
    }
    for (const auto& p : s.points) {
      double X = px(p.x);
      if (p.spread > 0.0) {
        double y0 = py(p.y - p.spread), y1 = py(p.y + p.spread);
        os << "<line x1=\"" << num(X) << "\" y1=\"" << num(y0) << "\" x2=\""
           << num(X) << "\" y2=\"" << num(y1) << "\" stroke=\"" << color
           << "\" stroke-width=\"1\"/>\n"
           << "<line x1=\"" << num(X - 3) << "\" y1=\"" << num(y0) << "\" x2=\""
           << num(X + 3) << "\" y2=\"" << num(y0) << "\" stroke=\"" << color
           << "\" stroke-width=\"1\"/>\n"
           << "<line x1=\"" << num(X - 3) << "\" y1=\"" << num(y1) << "\" x2=\""
           << num(X + 3) << "\" y2=\"" << num(y1) << "\" stroke=\"" << color
           << "\" stroke-width=\"1\"/>\n";
      }
      os << "<circle cx=\"" << num(X) << "\" cy=\"" << num(py(p.y))
         << "\" r=\"2.5\" fill=\"" << color << "\"/>\n";
    }
    // Legend entry.
    double ly = top + 14 + 18.0 * static_cast<double>(si);
    os << "<line x1=\"" << num(left + pw + 12) << "\" y1=\"" << num(ly)
       << "\" x2=\"" << num(left + pw + 34) << "\" y2=\"" << num(ly)
       << "\" stroke=\"" << color << "\" stroke-width=\"1.8\"/>\n"
       << "<text x=\"" << num(left + pw + 40) << "\" y=\"" << num(ly + 4)
       << "\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(s.name)
       << "</text>\n";
  }

  os << "</svg>\n";
  return os.str();
}

void write_line_plot(const std::string& path, const PlotSpec& spec) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("svg: cannot open " + path + " for writing");
  out << render_line_plot(spec);
  if (!out) throw IoError("svg: write failed for " + path);
}

}  // namespace pbflow
