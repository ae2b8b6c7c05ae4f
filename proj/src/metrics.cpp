#include "moviekit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"

namespace moviekit {

MetricsWriter::MetricsWriter(const std::string& path) : path_(path), out_(path, std::ios::app) {
    if (!out_) throw std::runtime_error("cannot open metrics file: " + path);
}

void MetricsWriter::write(const std::map<std::string, double>& values) {
    nlohmann::json j(values);
    out_ << j.dump() << "\n";
    out_.flush();
}

void MetricsWriter::write(const std::string& json_line) {
    out_ << json_line << "\n";
    out_.flush();
}

std::vector<std::map<std::string, double>> read_metrics(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open metrics file: " + path);
    std::vector<std::map<std::string, double>> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line);
        std::map<std::string, double> row;
        for (auto& [k, v] : j.items())
            if (v.is_number()) row[k] = v.get<double>();
        out.push_back(std::move(row));
    }
    return out;
}

void svg_line_chart(const std::string& path, const std::string& title,
                    const std::map<std::string, std::vector<double>>& series) {
    const int w = 720, h = 420, ml = 60, mr = 20, mt = 40, mb = 40;
    double ymin = 0, ymax = 1;
    size_t nmax = 1;
    bool first = true;
    for (const auto& [name, ys] : series) {
        for (double y : ys) {
            if (!std::isfinite(y)) continue;
            if (first) {
                ymin = ymax = y;
                first = false;
            } else {
                ymin = std::min(ymin, y);
                ymax = std::max(ymax, y);
            }
        }
        nmax = std::max(nmax, ys.size());
    }
    if (ymax == ymin) ymax = ymin + 1;
    const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};

    std::ostringstream svg;
    svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << w << "' height='" << h << "'>\n";
    svg << "<rect width='100%' height='100%' fill='white'/>\n";
    svg << "<text x='" << w / 2 << "' y='20' text-anchor='middle' font-size='15'>" << title
        << "</text>\n";
    svg << "<line x1='" << ml << "' y1='" << h - mb << "' x2='" << w - mr << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    svg << "<line x1='" << ml << "' y1='" << mt << "' x2='" << ml << "' y2='" << h - mb
        << "' stroke='black'/>\n";
    svg << "<text x='10' y='" << mt + 5 << "' font-size='11'>" << ymax << "</text>\n";
    svg << "<text x='10' y='" << h - mb << "' font-size='11'>" << ymin << "</text>\n";

    int ci = 0, legend_y = mt;
    for (const auto& [name, ys] : series) {
        const char* color = colors[ci % 6];
        svg << "<polyline fill='none' stroke='" << color << "' stroke-width='1.5' points='";
        for (size_t i = 0; i < ys.size(); ++i) {
            double fx = nmax > 1 ? static_cast<double>(i) / (nmax - 1) : 0.0;
            double fy = (ys[i] - ymin) / (ymax - ymin);
            svg << ml + fx * (w - ml - mr) << "," << (h - mb) - fy * (h - mt - mb) << " ";
        }
        svg << "'/>\n";
        svg << "<text x='" << w - mr - 150 << "' y='" << legend_y << "' font-size='12' fill='"
            << color << "'>" << name << "</text>\n";
        legend_y += 16;
        ++ci;
    }
    svg << "</svg>\n";

    std::ofstream f(path);
    if (!f) throw std::runtime_error("cannot write chart: " + path);
    f << svg.str();
}

}  // namespace moviekit
