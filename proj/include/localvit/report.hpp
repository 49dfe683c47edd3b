#pragma once

// CSV and SVG writers for run artifacts. All numbers are rendered with the
// shortest round-trip representation (or a fixed pixel precision in SVG), so
// rerunning a command reproduces its files byte for byte.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "localvit/train.hpp"

namespace localvit {

inline std::string format_double(double v) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    check(ec == std::errc(), "format_double failed");
    return std::string(buf, ptr);
}

inline void write_file(const std::string& path, const std::string& content) {
    std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    check(out.good(), "cannot open '" + path + "' for writing");
    out << content;
    check(out.good(), "failed writing '" + path + "'");
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    check(in.good(), "cannot open '" + path + "'");
    return std::string(std::istreambuf_iterator<char>(in), {});
}

// epoch,train_loss,train_acc,eval_acc
inline std::string train_report_csv(const TrainReport& rep) {
    std::string csv = "epoch,train_loss,train_acc,eval_acc\n";
    for (size_t e = 0; e < rep.train_loss.size(); ++e) {
        csv += std::to_string(e) + "," + format_double(rep.train_loss[e]) + "," +
               format_double(rep.train_acc[e]) + "," + format_double(rep.eval_acc[e]) + "\n";
    }
    return csv;
}

struct RunSummary {
    std::string preset;
    uint64_t seed = 0;
    int64_t params = 0;
    double final_train_loss = 0.0;
    double final_train_acc = 0.0;
    double final_eval_acc = 0.0;
    uint64_t checksum = 0;
    bool aborted = false;
};

inline std::string comparison_csv(const std::vector<RunSummary>& runs) {
    std::string csv =
        "preset,seed,params,final_train_loss,final_train_acc,final_eval_acc,"
        "param_checksum,aborted\n";
    for (const auto& r : runs) {
        csv += r.preset + "," + std::to_string(r.seed) + "," + std::to_string(r.params) + ",";
        if (!r.aborted)
            csv += format_double(r.final_train_loss) + "," +
                   format_double(r.final_train_acc) + "," + format_double(r.final_eval_acc);
        else
            csv += ",,";
        csv += "," + std::to_string(r.checksum) + "," + (r.aborted ? "1" : "0") + "\n";
    }
    return csv;
}

// ---- SVG line charts ---------------------------------------------------------

struct Series {
    std::string label;
    std::vector<double> values;  // one point per epoch
};

namespace detail {

inline std::string svg_num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

inline const char* series_color(size_t i) {
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};
    return palette[i % (sizeof(palette) / sizeof(palette[0]))];
}

inline std::string chart_group(const std::string& title,
                               const std::vector<Series>& series, double w, double h) {
    double ml = 54, mr = 12, mt = 30, mb = 34;
    double min_y = 1e300, max_y = -1e300;
    size_t n = 1;
    for (const auto& s : series) {
        n = std::max(n, s.values.size());
        for (double v : s.values) {
            min_y = std::min(min_y, v);
            max_y = std::max(max_y, v);
        }
    }
    if (min_y > max_y) {
        min_y = 0;
        max_y = 1;
    }
    if (max_y - min_y < 1e-12) max_y = min_y + 1;
    auto px = [&](size_t i) {
        return ml + (w - ml - mr) * (n > 1 ? double(i) / double(n - 1) : 0.5);
    };
    auto py = [&](double v) { return h - mb - (h - mb - mt) * (v - min_y) / (max_y - min_y); };

    std::string g;
    g += "<rect x=\"" + svg_num(ml) + "\" y=\"" + svg_num(mt) + "\" width=\"" +
         svg_num(w - ml - mr) + "\" height=\"" + svg_num(h - mt - mb) +
         "\" fill=\"none\" stroke=\"#888\"/>\n";
    g += "<text x=\"" + svg_num(w / 2) + "\" y=\"18\" text-anchor=\"middle\" "
         "font-family=\"sans-serif\" font-size=\"13\">" + title + "</text>\n";
    for (int t = 0; t <= 4; ++t) {
        double v = min_y + (max_y - min_y) * t / 4.0;
        char lab[32];
        std::snprintf(lab, sizeof(lab), "%.3g", v);
        g += "<text x=\"" + svg_num(ml - 6) + "\" y=\"" + svg_num(py(v) + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"10\">" + lab +
             "</text>\n";
        g += "<line x1=\"" + svg_num(ml) + "\" y1=\"" + svg_num(py(v)) + "\" x2=\"" +
             svg_num(w - mr) + "\" y2=\"" + svg_num(py(v)) +
             "\" stroke=\"#ddd\" stroke-width=\"0.5\"/>\n";
    }
    g += "<text x=\"" + svg_num((ml + w - mr) / 2) + "\" y=\"" + svg_num(h - 8) +
         "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">epoch</text>\n";
    for (size_t si = 0; si < series.size(); ++si) {
        const auto& s = series[si];
        if (s.values.empty()) continue;
        std::string pts;
        for (size_t i = 0; i < s.values.size(); ++i)
            pts += svg_num(px(i)) + "," + svg_num(py(s.values[i])) + " ";
        g += "<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" +
             series_color(si) + "\" stroke-width=\"1.4\"/>\n";
        double ly = mt + 14 + 13 * double(si);
        g += "<line x1=\"" + svg_num(ml + 8) + "\" y1=\"" + svg_num(ly - 4) + "\" x2=\"" +
             svg_num(ml + 26) + "\" y2=\"" + svg_num(ly - 4) + "\" stroke=\"" +
             series_color(si) + "\" stroke-width=\"2\"/>\n";
        g += "<text x=\"" + svg_num(ml + 30) + "\" y=\"" + svg_num(ly) +
             "\" font-family=\"sans-serif\" font-size=\"10\">" + s.label + "</text>\n";
    }
    return g;
}

}  // namespace detail

// Two panels: training loss on the left, evaluation accuracy on the right.
inline std::string curves_svg(const std::vector<Series>& loss,
                              const std::vector<Series>& accuracy) {
    double w = 460, h = 320;
    std::string svg = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" +
                      detail::svg_num(2 * w) + "\" height=\"" + detail::svg_num(h) +
                      "\" viewBox=\"0 0 " + detail::svg_num(2 * w) + " " +
                      detail::svg_num(h) + "\">\n<rect width=\"100%\" height=\"100%\" "
                      "fill=\"white\"/>\n";
    svg += "<g>" + detail::chart_group("training loss", loss, w, h) + "</g>\n";
    svg += "<g transform=\"translate(" + detail::svg_num(w) + ",0)\">" +
           detail::chart_group("eval accuracy", accuracy, w, h) + "</g>\n";
    svg += "</svg>\n";
    return svg;
}

}  // namespace localvit
