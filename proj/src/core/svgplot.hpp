#pragma once

#include <string>
#include <vector>

#include "core/evalkit.hpp"

namespace mf {

struct PlotSeries {
    std::string name;
    Curve points;  // drawn as x/y polyline
};

// Minimal line-plot SVG writer: axes, ticks, legend, one polyline per series.
void write_svg_plot(const std::string& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<PlotSeries>& series,
                    double x_max = 1.0, double y_max = 1.0);

void write_curve_csv(const std::string& path, const Curve& curve);

}  // namespace mf
