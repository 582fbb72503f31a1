#pragma once

#include <string>
#include <vector>

namespace maskdoor::plot {

// Minimal SVG emitters for the experiment artifacts. Output is plain text
// and byte-deterministic for identical inputs.

struct Series {
    std::string label;
    std::vector<double> values;
};

// Overlaid histograms of two populations (fixed bin count over the joint
// range).
std::string histogram_svg(const std::string& title, const std::vector<double>& a,
                          const std::string& label_a, const std::vector<double>& b,
                          const std::string& label_b, int bins = 20);

// Line chart, one polyline per series, x = index.
std::string line_chart_svg(const std::string& title, const std::vector<Series>& series);

void write_text_file(const std::string& path, const std::string& content);

}  // namespace maskdoor::plot
