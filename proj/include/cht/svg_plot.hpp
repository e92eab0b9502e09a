#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "cht/tensor.hpp"

namespace cht {

struct PlotSeries {
    std::string label;
    std::vector<double> x, y;
    bool extrapolated = false;  // diamond markers instead of bullets
};

/// Minimal SVG line chart: accuracy curves over task index, bullet markers
/// for trained tasks and diamonds for extrapolation.
inline void write_svg_chart(const std::string& path, const std::string& title, const std::string& xlabel,
                            const std::vector<std::string>& xticks, const std::vector<PlotSeries>& series) {
    const double W = 640, H = 420, ml = 60, mr = 150, mt = 40, mb = 50;
    const double pw = W - ml - mr, ph = H - mt - mb;
    double xmax = 1;
    for (const auto& s : series)
        for (double v : s.x) xmax = std::max(xmax, v);
    auto px = [&](double x) { return ml + (xmax > 0 ? x / xmax : 0.5) * pw; };
    auto py = [&](double y) { return mt + (1.0 - y) * ph; };
    const char* colors[] = {"#d95f02", "#1b9e77", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};

    std::ofstream f(path);
    require(f.good(), "write_svg_chart: cannot open " + path);
    f << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W
      << " " << H << "\">\n";
    f << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    f << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\" font-family=\"sans-serif\">" << title
      << "</text>\n";

    // axes and grid
    for (int i = 0; i <= 5; ++i) {
        const double yv = i / 5.0;
        f << "<line x1=\"" << ml << "\" y1=\"" << py(yv) << "\" x2=\"" << ml + pw << "\" y2=\"" << py(yv)
          << "\" stroke=\"#dddddd\"/>\n";
        f << "<text x=\"" << ml - 8 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\" font-size=\"11\" "
          << "font-family=\"sans-serif\">" << format_g(yv) << "</text>\n";
    }
    f << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    f << "<line x1=\"" << ml << "\" y1=\"" << mt + ph << "\" x2=\"" << ml + pw << "\" y2=\"" << mt + ph
      << "\" stroke=\"black\"/>\n";
    for (size_t i = 0; i < xticks.size(); ++i) {
        f << "<text x=\"" << px(static_cast<double>(i)) << "\" y=\"" << mt + ph + 18
          << "\" text-anchor=\"middle\" font-size=\"11\" font-family=\"sans-serif\">" << xticks[i] << "</text>\n";
    }
    f << "<text x=\"" << ml + pw / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\" font-size=\"12\" "
      << "font-family=\"sans-serif\">" << xlabel << "</text>\n";

    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        const std::string color = colors[si % 8];
        if (s.x.size() > 1) {
            f << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
            for (size_t i = 0; i < s.x.size(); ++i) f << px(s.x[i]) << "," << py(s.y[i]) << " ";
            f << "\"/>\n";
        }
        for (size_t i = 0; i < s.x.size(); ++i) {
            const double cx = px(s.x[i]), cy = py(s.y[i]);
            if (s.extrapolated) {
                f << "<path d=\"M " << cx << " " << cy - 5 << " L " << cx + 5 << " " << cy << " L " << cx << " " << cy + 5
                  << " L " << cx - 5 << " " << cy << " Z\" fill=\"white\" stroke=\"" << color << "\"/>\n";
            } else {
                f << "<circle cx=\"" << cx << "\" cy=\"" << cy << "\" r=\"4\" fill=\"" << color << "\"/>\n";
            }
        }
        const double ly = mt + 16 + 18 * static_cast<double>(si);
        f << "<circle cx=\"" << ml + pw + 14 << "\" cy=\"" << ly - 4 << "\" r=\"4\" fill=\"" << color << "\"/>\n";
        f << "<text x=\"" << ml + pw + 24 << "\" y=\"" << ly << "\" font-size=\"11\" font-family=\"sans-serif\">" << s.label
          << (s.extrapolated ? " (extrapolated)" : "") << "</text>\n";
    }
    f << "</svg>\n";
}

}  // namespace cht
