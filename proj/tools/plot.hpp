#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ccdm::cli {

struct Series {
  std::string name;
  std::vector<double> x;
  std::vector<std::optional<double>> y;  // gaps break the line
};

/// Minimal standalone SVG line chart.
void write_line_chart(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                      const std::string& y_label, const std::vector<Series>& series);

}  // namespace ccdm::cli
