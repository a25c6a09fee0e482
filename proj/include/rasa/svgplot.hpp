#pragma once
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "rasa/survstats.hpp"

namespace rasa {

namespace detail {

inline std::string fmt_num(double v, const char* spec = "%.6g") {
    char buf[64];
    std::snprintf(buf, sizeof(buf), spec, v);
    return buf;
}

}  // namespace detail

// Self-contained SVG with two Kaplan-Meier step curves, axis ticks, and the
// log-rank p-value annotation. The CSV export is the precision-bearing
// artifact; this is the picture.
inline std::string km_plot_svg(const KmCurve& high_risk, const KmCurve& low_risk,
                               double max_time, double p_value) {
    const double width = 640, height = 480;
    const double left = 70, right = 20, top = 40, bottom = 60;
    const double plot_w = width - left - right;
    const double plot_h = height - top - bottom;
    if (max_time <= 0.0) max_time = 1.0;

    auto x_of = [&](double t) { return left + plot_w * (t / max_time); };
    auto y_of = [&](double s) { return top + plot_h * (1.0 - s); };

    auto step_path = [&](const KmCurve& curve) {
        std::string d = "M " + detail::fmt_num(x_of(0)) + " " + detail::fmt_num(y_of(1.0));
        double s = 1.0;
        for (std::size_t i = 0; i < curve.times.size(); ++i) {
            const double t = std::min(curve.times[i], max_time);
            d += " L " + detail::fmt_num(x_of(t)) + " " + detail::fmt_num(y_of(s));
            s = curve.survival[i];
            d += " L " + detail::fmt_num(x_of(t)) + " " + detail::fmt_num(y_of(s));
            if (curve.times[i] >= max_time) break;
        }
        d += " L " + detail::fmt_num(x_of(max_time)) + " " + detail::fmt_num(y_of(s));
        return d;
    };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" "
           "viewBox=\"0 0 640 480\">\n";
    svg += "<rect width=\"640\" height=\"480\" fill=\"white\"/>\n";
    svg += "<text x=\"320\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
           "font-size=\"16\">Kaplan-Meier survival by predicted risk group</text>\n";

    // axes
    svg += "<line x1=\"" + detail::fmt_num(left) + "\" y1=\"" + detail::fmt_num(top) +
           "\" x2=\"" + detail::fmt_num(left) + "\" y2=\"" + detail::fmt_num(top + plot_h) +
           "\" stroke=\"black\"/>\n";
    svg += "<line x1=\"" + detail::fmt_num(left) + "\" y1=\"" + detail::fmt_num(top + plot_h) +
           "\" x2=\"" + detail::fmt_num(left + plot_w) + "\" y2=\"" +
           detail::fmt_num(top + plot_h) + "\" stroke=\"black\"/>\n";

    for (int i = 0; i <= 4; ++i) {
        const double s = 0.25 * i;
        svg += "<line x1=\"" + detail::fmt_num(left - 4) + "\" y1=\"" + detail::fmt_num(y_of(s)) +
               "\" x2=\"" + detail::fmt_num(left) + "\" y2=\"" + detail::fmt_num(y_of(s)) +
               "\" stroke=\"black\"/>\n";
        svg += "<text x=\"" + detail::fmt_num(left - 8) + "\" y=\"" +
               detail::fmt_num(y_of(s) + 4) + "\" text-anchor=\"end\" font-family=\"sans-serif\" "
               "font-size=\"12\">" + detail::fmt_num(s, "%.2f") + "</text>\n";
    }
    for (int i = 0; i <= 5; ++i) {
        const double t = max_time * i / 5.0;
        svg += "<line x1=\"" + detail::fmt_num(x_of(t)) + "\" y1=\"" +
               detail::fmt_num(top + plot_h) + "\" x2=\"" + detail::fmt_num(x_of(t)) +
               "\" y2=\"" + detail::fmt_num(top + plot_h + 4) + "\" stroke=\"black\"/>\n";
        svg += "<text x=\"" + detail::fmt_num(x_of(t)) + "\" y=\"" +
               detail::fmt_num(top + plot_h + 20) +
               "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" +
               detail::fmt_num(t, "%.4g") + "</text>\n";
    }
    svg += "<text x=\"" + detail::fmt_num(left + plot_w / 2) + "\" y=\"" +
           detail::fmt_num(height - 16) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">time "
           "(days)</text>\n";
    svg += "<text x=\"18\" y=\"" + detail::fmt_num(top + plot_h / 2) +
           "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" "
           "transform=\"rotate(-90 18 " + detail::fmt_num(top + plot_h / 2) +
           ")\">survival probability</text>\n";

    svg += "<path d=\"" + step_path(high_risk) +
           "\" fill=\"none\" stroke=\"#cc2222\" stroke-width=\"2\"/>\n";
    svg += "<path d=\"" + step_path(low_risk) +
           "\" fill=\"none\" stroke=\"#22aa44\" stroke-width=\"2\"/>\n";

    svg += "<text x=\"" + detail::fmt_num(left + plot_w - 160) + "\" y=\"" +
           detail::fmt_num(top + 20) + "\" font-family=\"sans-serif\" font-size=\"13\" "
           "fill=\"#cc2222\">high risk</text>\n";
    svg += "<text x=\"" + detail::fmt_num(left + plot_w - 160) + "\" y=\"" +
           detail::fmt_num(top + 38) + "\" font-family=\"sans-serif\" font-size=\"13\" "
           "fill=\"#22aa44\">low risk</text>\n";

    char pbuf[64];
    if (p_value < 1e-4)
        std::snprintf(pbuf, sizeof(pbuf), "p = %.2e", p_value);
    else
        std::snprintf(pbuf, sizeof(pbuf), "p = %.4f", p_value);
    svg += "<text x=\"" + detail::fmt_num(left + plot_w - 160) + "\" y=\"" +
           detail::fmt_num(top + 60) + "\" font-family=\"sans-serif\" font-size=\"14\">" + pbuf +
           "</text>\n";
    svg += "</svg>\n";
    return svg;
}

}  // namespace rasa
