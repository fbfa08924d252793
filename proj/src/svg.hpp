#pragma once

#include <string>
#include <vector>

namespace pbflow {

struct PlotPoint {
  double x = 0.0;
  double y = 0.0;
  double spread = 0.0;  // half-length of the vertical whisker, 0 = none
};

struct PlotSeries {
  std::string name;
  std::vector<PlotPoint> points;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
  int width = 720;
  int height = 480;
};

// Renders a line plot with per-point whiskers as a standalone SVG document.
// Output is a pure function of the spec, so reruns are byte-identical.
std::string render_line_plot(const PlotSpec& spec);

void write_line_plot(const std::string& path, const PlotSpec& spec);

}  // namespace pbflow
