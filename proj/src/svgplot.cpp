#include "paleorec/svgplot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace paleorec::svgplot {

namespace {

constexpr int kMarginLeft = 64;
constexpr int kMarginRight = 18;
constexpr int kMarginTop = 36;
constexpr int kMarginBottom = 48;

std::string fmt(const char* pattern, double value) {
    char buf[64];
    std::snprintf(buf, sizeof buf, pattern, value);
    return buf;
}

std::string px(double v) { return fmt("%.2f", v); }
std::string tick_text(double v) { return fmt("%.6g", v == 0.0 ? 0.0 : v); }

std::string escape(const std::string& text) {
    std::string out;
    out.reserve(text.size());
    for (char c : text) {
        if (c == '&')
            out += "&amp;";
        else if (c == '<')
            out += "&lt;";
        else if (c == '>')
            out += "&gt;";
        else
            out += c;
    }
    return out;
}

struct Extent {
    double lo = std::numeric_limits<double>::infinity();
    double hi = -std::numeric_limits<double>::infinity();

    void add(double v) {
        if (!std::isfinite(v)) return;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    bool valid() const { return lo <= hi; }
    // Widen degenerate or empty ranges so the axis mapping stays finite.
    void finish(double pad_ratio) {
        if (!valid()) {
            lo = 0.0;
            hi = 1.0;
        }
        if (hi == lo) {
            const double pad = lo == 0.0 ? 1.0 : std::abs(lo) * 0.1;
            lo -= pad;
            hi += pad;
        }
        const double pad = (hi - lo) * pad_ratio;
        lo -= pad;
        hi += pad;
    }
};

// Round tick spacing covering the range with roughly `target` steps.
std::vector<double> nice_ticks(double lo, double hi, int target) {
    const double raw = (hi - lo) / target;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    double step = 10.0 * mag;
    for (double m : {1.0, 2.0, 2.5, 5.0}) {
        if (m * mag >= raw) {
            step = m * mag;
            break;
        }
    }
    std::vector<double> ticks;
    double first = std::ceil(lo / step) * step;
    for (double t = first; t <= hi + step * 1e-9; t += step) {
        double v = std::abs(t) < step * 1e-9 ? 0.0 : t;
        ticks.push_back(v);
    }
    return ticks;
}

}  // namespace

std::string Figure::render() const {
    if (series.empty() && bands.empty())
        throw std::invalid_argument("the figure has no data to plot");

    Extent ex, ey;
    for (const Band& b : bands) {
        if (b.x.size() != b.lower.size() || b.x.size() != b.upper.size())
            throw std::invalid_argument("band x, lower and upper lengths differ");
        for (std::size_t i = 0; i < b.x.size(); ++i) {
            ex.add(b.x[i]);
            ey.add(b.lower[i]);
            ey.add(b.upper[i]);
        }
    }
    for (const Series& s : series) {
        if (s.x.size() != s.y.size())
            throw std::invalid_argument("series x and y lengths differ");
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) continue;
            ex.add(s.x[i]);
            ey.add(s.y[i]);
        }
    }
    ex.finish(0.01);
    ey.finish(0.06);

    const double plot_w = width - kMarginLeft - kMarginRight;
    const double plot_h = height - kMarginTop - kMarginBottom;
    const auto to_x = [&](double v) { return kMarginLeft + (v - ex.lo) / (ex.hi - ex.lo) * plot_w; };
    const auto to_y = [&](double v) {
        return kMarginTop + plot_h - (v - ey.lo) / (ey.hi - ey.lo) * plot_h;
    };

    std::string svg;
    svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) +
           "\" height=\"" + std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) +
           " " + std::to_string(height) + "\">\n";
    svg += "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n";
    svg += "<g font-family=\"Helvetica,Arial,sans-serif\" font-size=\"12\" fill=\"#24292f\">\n";

    if (!title.empty())
        svg += "<text x=\"" + px(width / 2.0) + "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" +
               escape(title) + "</text>\n";

    for (double t : nice_ticks(ex.lo, ex.hi, 7)) {
        const std::string x = px(to_x(t));
        svg += "<line x1=\"" + x + "\" y1=\"" + px(kMarginTop) + "\" x2=\"" + x + "\" y2=\"" +
               px(kMarginTop + plot_h) + "\" stroke=\"#d8dee4\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + x + "\" y=\"" + px(kMarginTop + plot_h + 16) +
               "\" text-anchor=\"middle\">" + tick_text(t) + "</text>\n";
    }
    for (double t : nice_ticks(ey.lo, ey.hi, 6)) {
        const std::string y = px(to_y(t));
        svg += "<line x1=\"" + px(kMarginLeft) + "\" y1=\"" + y + "\" x2=\"" +
               px(kMarginLeft + plot_w) + "\" y2=\"" + y +
               "\" stroke=\"#d8dee4\" stroke-width=\"1\"/>\n";
        svg += "<text x=\"" + px(kMarginLeft - 6) + "\" y=\"" + px(to_y(t) + 4) +
               "\" text-anchor=\"end\">" + tick_text(t) + "</text>\n";
    }
    svg += "<rect x=\"" + px(kMarginLeft) + "\" y=\"" + px(kMarginTop) + "\" width=\"" +
           px(plot_w) + "\" height=\"" + px(plot_h) +
           "\" fill=\"none\" stroke=\"#57606a\" stroke-width=\"1\"/>\n";

    for (const Band& b : bands) {
        std::string path;
        for (std::size_t i = 0; i < b.x.size(); ++i) {
            if (!std::isfinite(b.lower[i]) || !std::isfinite(b.upper[i])) continue;
            path += (path.empty() ? "M" : " L") + px(to_x(b.x[i])) + "," + px(to_y(b.upper[i]));
        }
        for (std::size_t j = b.x.size(); j-- > 0;) {
            if (!std::isfinite(b.lower[j]) || !std::isfinite(b.upper[j])) continue;
            path += " L" + px(to_x(b.x[j])) + "," + px(to_y(b.lower[j]));
        }
        if (path.empty()) continue;
        svg += "<path d=\"" + path + " Z\" fill=\"" + b.color + "\" fill-opacity=\"" +
               fmt("%.2f", b.opacity) + "\" stroke=\"none\"/>\n";
    }

    for (const Series& s : series) {
        std::string attrs = " fill=\"none\" stroke=\"" + s.color + "\" stroke-width=\"" +
                            fmt("%.2f", s.width) + "\"";
        if (!s.dash.empty()) attrs += " stroke-dasharray=\"" + s.dash + "\"";
        std::string points;
        const auto flush = [&] {
            if (!points.empty())
                svg += "<polyline points=\"" + points + "\"" + attrs + "/>\n";
            points.clear();
        };
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (!std::isfinite(s.y[i])) {
                flush();
                continue;
            }
            if (!points.empty()) points += " ";
            points += px(to_x(s.x[i])) + "," + px(to_y(s.y[i]));
        }
        flush();
    }

    // Legend: a swatch per labelled band and series, stacked top-left.
    double legend_y = kMarginTop + 16.0;
    const double legend_x = kMarginLeft + 12.0;
    const auto legend_entry = [&](const std::string& color, const std::string& label, bool band) {
        if (band) {
            svg += "<rect x=\"" + px(legend_x) + "\" y=\"" + px(legend_y - 8) +
                   "\" width=\"18\" height=\"10\" fill=\"" + color + "\" fill-opacity=\"0.35\"/>\n";
        } else {
            svg += "<line x1=\"" + px(legend_x) + "\" y1=\"" + px(legend_y - 3) + "\" x2=\"" +
                   px(legend_x + 18) + "\" y2=\"" + px(legend_y - 3) + "\" stroke=\"" + color +
                   "\" stroke-width=\"2\"/>\n";
        }
        svg += "<text x=\"" + px(legend_x + 24) + "\" y=\"" + px(legend_y) + "\">" + escape(label) +
               "</text>\n";
        legend_y += 16.0;
    };
    for (const Band& b : bands)
        if (!b.label.empty()) legend_entry(b.color, b.label, true);
    for (const Series& s : series)
        if (!s.label.empty()) legend_entry(s.color, s.label, false);

    if (!x_label.empty())
        svg += "<text x=\"" + px(kMarginLeft + plot_w / 2.0) + "\" y=\"" + px(height - 10) +
               "\" text-anchor=\"middle\">" + escape(x_label) + "</text>\n";
    if (!y_label.empty())
        svg += "<text x=\"14\" y=\"" + px(kMarginTop + plot_h / 2.0) +
               "\" text-anchor=\"middle\" transform=\"rotate(-90 14 " +
               px(kMarginTop + plot_h / 2.0) + ")\">" + escape(y_label) + "</text>\n";

    svg += "</g>\n</svg>\n";
    return svg;
}

void Figure::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out << render();
}

}  // namespace paleorec::svgplot
