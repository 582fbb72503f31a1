#include "maskdoor/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace maskdoor::plot {

namespace {

constexpr int kWidth = 640, kHeight = 400;
constexpr int kMarginLeft = 56, kMarginRight = 16, kMarginTop = 40, kMarginBottom = 36;

std::string fmt(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

std::string svg_header(const std::string& title) {
    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(kWidth) +
         "\" height=\"" + std::to_string(kHeight) + "\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + std::to_string(kWidth / 2) +
         "\" y=\"22\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"15\">" +
         title + "</text>\n";
    return s;
}

}  // namespace

std::string histogram_svg(const std::string& title, const std::vector<double>& a,
                          const std::string& label_a, const std::vector<double>& b,
                          const std::string& label_b, int bins) {
    if (a.empty() || b.empty()) throw std::invalid_argument("histogram_svg: empty data");
    double lo = a[0], hi = a[0];
    for (double v : a) { lo = std::min(lo, v); hi = std::max(hi, v); }
    for (double v : b) { lo = std::min(lo, v); hi = std::max(hi, v); }
    if (hi <= lo) hi = lo + 1.0;

    std::vector<int> ha(size_t(bins), 0), hb(size_t(bins), 0);
    auto bucket = [&](double v) {
        int k = int((v - lo) / (hi - lo) * bins);
        return std::clamp(k, 0, bins - 1);
    };
    for (double v : a) ++ha[size_t(bucket(v))];
    for (double v : b) ++hb[size_t(bucket(v))];
    int peak = 1;
    for (int k = 0; k < bins; ++k) peak = std::max({peak, ha[size_t(k)], hb[size_t(k)]});

    const double plot_w = kWidth - kMarginLeft - kMarginRight;
    const double plot_h = kHeight - kMarginTop - kMarginBottom;
    std::string s = svg_header(title);
    double bw = plot_w / bins;
    for (int k = 0; k < bins; ++k) {
        double xa = kMarginLeft + k * bw;
        double hha = plot_h * ha[size_t(k)] / peak;
        double hhb = plot_h * hb[size_t(k)] / peak;
        s += "<rect x=\"" + fmt(xa) + "\" y=\"" + fmt(kMarginTop + plot_h - hha) +
             "\" width=\"" + fmt(bw * 0.45) + "\" height=\"" + fmt(hha) +
             "\" fill=\"#4477cc\" fill-opacity=\"0.8\"/>\n";
        s += "<rect x=\"" + fmt(xa + bw * 0.45) + "\" y=\"" + fmt(kMarginTop + plot_h - hhb) +
             "\" width=\"" + fmt(bw * 0.45) + "\" height=\"" + fmt(hhb) +
             "\" fill=\"#cc5544\" fill-opacity=\"0.8\"/>\n";
    }
    s += "<text x=\"" + std::to_string(kMarginLeft) +
         "\" y=\"36\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#4477cc\">" +
         label_a + "</text>\n";
    s += "<text x=\"" + std::to_string(kMarginLeft + 140) +
         "\" y=\"36\" font-family=\"sans-serif\" font-size=\"12\" fill=\"#cc5544\">" +
         label_b + "</text>\n";
    s += "<text x=\"" + std::to_string(kMarginLeft) + "\" y=\"" +
         std::to_string(kHeight - 12) + "\" font-family=\"sans-serif\" font-size=\"11\">" +
         fmt(lo) + "</text>\n";
    s += "<text x=\"" + std::to_string(kWidth - kMarginRight) + "\" y=\"" +
         std::to_string(kHeight - 12) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" + fmt(hi) +
         "</text>\n";
    s += "</svg>\n";
    return s;
}

std::string line_chart_svg(const std::string& title, const std::vector<Series>& series) {
    if (series.empty()) throw std::invalid_argument("line_chart_svg: no series");
    size_t n = 0;
    double lo = 0.0, hi = 1e-9;
    for (const auto& s : series) {
        n = std::max(n, s.values.size());
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    if (n < 2) n = 2;
    const char* colors[] = {"#4477cc", "#cc5544", "#44aa66", "#aa7722", "#8855cc"};
    const double plot_w = kWidth - kMarginLeft - kMarginRight;
    const double plot_h = kHeight - kMarginTop - kMarginBottom;
    std::string s = svg_header(title);
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& sr = series[si];
        if (sr.values.empty()) continue;
        std::string pts;
        for (size_t i = 0; i < sr.values.size(); ++i) {
            double x = kMarginLeft + plot_w * double(i) / double(n - 1);
            double y = kMarginTop + plot_h * (1.0 - (sr.values[i] - lo) / (hi - lo));
            pts += fmt(x) + "," + fmt(y) + " ";
        }
        s += "<polyline fill=\"none\" stroke=\"" + std::string(colors[si % 5]) +
             "\" stroke-width=\"1.5\" points=\"" + pts + "\"/>\n";
        s += "<text x=\"" + std::to_string(kMarginLeft + 110 * int(si)) +
             "\" y=\"36\" font-family=\"sans-serif\" font-size=\"12\" fill=\"" +
             colors[si % 5] + "\">" + sr.label + "</text>\n";
    }
    s += "<text x=\"" + std::to_string(kMarginLeft) + "\" y=\"" +
         std::to_string(kHeight - 12) + "\" font-family=\"sans-serif\" font-size=\"11\">0</text>\n";
    s += "<text x=\"" + std::to_string(kWidth - kMarginRight) + "\" y=\"" +
         std::to_string(kHeight - 12) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">" +
         std::to_string(n - 1) + "</text>\n";
    s += "</svg>\n";
    return s;
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot write: " + path);
    os << content;
}

}  // namespace maskdoor::plot
