#include "core/svgplot.hpp"

#include <algorithm>
#include <cmath>

#include "core/csv.hpp"
#include "core/strutil.hpp"

namespace mf {

namespace {

const char* kPalette[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728",
                          "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

}  // namespace

void write_svg_plot(const std::string& path, const std::string& title, const std::string& x_label,
                    const std::string& y_label, const std::vector<PlotSeries>& series, double x_max,
                    double y_max) {
    constexpr int kW = 640, kH = 480;
    constexpr int kLeft = 64, kRight = 24, kTop = 40, kBottom = 48;
    const double plot_w = kW - kLeft - kRight;
    const double plot_h = kH - kTop - kBottom;
    if (x_max <= 0) x_max = 1.0;
    if (y_max <= 0) y_max = 1.0;

    auto px = [&](double x) { return kLeft + x / x_max * plot_w; };
    auto py = [&](double y) { return kTop + (1.0 - y / y_max) * plot_h; };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kW) + "\" height=\"" +
           std::to_string(kH) + "\" viewBox=\"0 0 " + std::to_string(kW) + " " + std::to_string(kH) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    svg += "<text x=\"" + std::to_string(kW / 2) + "\" y=\"24\" text-anchor=\"middle\" font-size=\"16\" "
           "font-family=\"sans-serif\">" + title + "</text>\n";

    // Axes with 5 ticks each.
    svg += "<g stroke=\"#333\" stroke-width=\"1\">\n";
    svg += "<line x1=\"" + fmt(px(0)) + "\" y1=\"" + fmt(py(0)) + "\" x2=\"" + fmt(px(x_max)) +
           "\" y2=\"" + fmt(py(0)) + "\"/>\n";
    svg += "<line x1=\"" + fmt(px(0)) + "\" y1=\"" + fmt(py(0)) + "\" x2=\"" + fmt(px(0)) + "\" y2=\"" +
           fmt(py(y_max)) + "\"/>\n";
    svg += "</g>\n";
    for (int t = 0; t <= 5; ++t) {
        double fx = x_max * t / 5.0;
        double fy = y_max * t / 5.0;
        svg += "<line x1=\"" + fmt(px(fx)) + "\" y1=\"" + fmt(py(0)) + "\" x2=\"" + fmt(px(fx)) +
               "\" y2=\"" + fmt(py(0) + 4) + "\" stroke=\"#333\"/>\n";
        svg += "<text x=\"" + fmt(px(fx)) + "\" y=\"" + fmt(py(0) + 18) +
               "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" + fmt(fx) + "</text>\n";
        svg += "<line x1=\"" + fmt(px(0) - 4) + "\" y1=\"" + fmt(py(fy)) + "\" x2=\"" + fmt(px(0)) +
               "\" y2=\"" + fmt(py(fy)) + "\" stroke=\"#333\"/>\n";
        svg += "<text x=\"" + fmt(px(0) - 8) + "\" y=\"" + fmt(py(fy) + 4) +
               "\" text-anchor=\"end\" font-size=\"11\" font-family=\"sans-serif\">" + fmt(fy) + "</text>\n";
    }
    svg += "<text x=\"" + std::to_string(kLeft + static_cast<int>(plot_w) / 2) + "\" y=\"" +
           std::to_string(kH - 10) + "\" text-anchor=\"middle\" font-size=\"13\" "
           "font-family=\"sans-serif\">" + x_label + "</text>\n";
    svg += "<text x=\"16\" y=\"" + std::to_string(kTop + static_cast<int>(plot_h) / 2) +
           "\" text-anchor=\"middle\" font-size=\"13\" font-family=\"sans-serif\" transform=\"rotate(-90 16 " +
           std::to_string(kTop + static_cast<int>(plot_h) / 2) + ")\">" + y_label + "</text>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const char* color = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
        std::string pts;
        for (const CurvePoint& p : series[s].points) {
            double cx = std::clamp(p.x, 0.0, x_max);
            double cy = std::clamp(p.y, 0.0, y_max);
            pts += fmt(px(cx)) + "," + fmt(py(cy)) + " ";
        }
        svg += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.5\" points=\"" +
               pts + "\"/>\n";
        double ly = kTop + 14.0 * (static_cast<double>(s) + 1);
        svg += "<line x1=\"" + fmt(kLeft + plot_w - 150) + "\" y1=\"" + fmt(ly - 4) + "\" x2=\"" +
               fmt(kLeft + plot_w - 130) + "\" y2=\"" + fmt(ly - 4) + "\" stroke=\"" + color +
               "\" stroke-width=\"2\"/>\n";
        svg += "<text x=\"" + fmt(kLeft + plot_w - 124) + "\" y=\"" + fmt(ly) +
               "\" font-size=\"11\" font-family=\"sans-serif\">" + series[s].name + "</text>\n";
    }
    svg += "</svg>\n";
    write_text_file(path, svg);
}

void write_curve_csv(const std::string& path, const Curve& curve) {
    std::vector<CsvRow> rows;
    rows.push_back({"threshold", "x", "y"});
    for (const CurvePoint& p : curve) {
        rows.push_back({format_double(p.threshold), format_double(p.x), format_double(p.y)});
    }
    write_csv(path, rows);
}

}  // namespace mf
