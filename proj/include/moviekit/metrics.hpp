#pragma once

#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace moviekit {

// Append-only JSONL event stream; one object per line.
class MetricsWriter {
   public:
    explicit MetricsWriter(const std::string& path);
    void write(const std::map<std::string, double>& values);
    void write(const std::string& json_line);
    const std::string& path() const { return path_; }

   private:
    std::string path_;
    std::ofstream out_;
};

std::vector<std::map<std::string, double>> read_metrics(const std::string& path);

// Minimal SVG polyline chart of one or more named series over their index.
void svg_line_chart(const std::string& path, const std::string& title,
                    const std::map<std::string, std::vector<double>>& series);

}  // namespace moviekit
