#pragma once

#include <string>
#include <vector>

// Minimal static-SVG line plots: polylines, shaded bands between two curves,
// axes with rounded tick labels and an inline legend. Output is plain text
// written with fixed number formats, so identical figures byte-match.
namespace paleorec::svgplot {

struct Series {
    std::vector<double> x;
    std::vector<double> y;  // NaN breaks the line
    std::string color = "#1f6feb";
    double width = 1.5;
    std::string label;  // empty -> no legend entry
    std::string dash;   // SVG dash pattern, e.g. "5,3"; empty -> solid
};

struct Band {
    std::vector<double> x;
    std::vector<double> lower;
    std::vector<double> upper;
    std::string color = "#1f6feb";
    double opacity = 0.22;
    std::string label;
};

struct Figure {
    std::string title;
    std::string x_label;
    std::string y_label;
    int width = 880;
    int height = 440;
    std::vector<Band> bands;
    std::vector<Series> series;

    std::string render() const;
    void save(const std::string& path) const;
};

}  // namespace paleorec::svgplot
