#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cprune/cascade.hpp"
#include "cprune/matrix.hpp"

namespace cprune {

// Parses a results.csv produced by write_metrics_csv. Throws FormatError.
std::vector<MetricsRow> parse_metrics_csv(const std::string& text);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

// Sweep family of a row: its config id without the "_k<k>_R<R>" part.
std::string family_of(const std::string& config_id);

// Rows grouped by family (the baseline row is excluded), each sorted by mean FLOPs.
std::map<std::string, std::vector<MetricsRow>> group_families(const std::vector<MetricsRow>& rows);

// Accuracy-vs-mean-FLOPs curve with one polyline vertex per row; the
// baseline, if given, is drawn as a separate marker.
std::string curve_svg(const std::string& title, const std::vector<MetricsRow>& rows,
                      const MetricsRow* baseline = nullptr);

// Importance heatmap; cells in `kept` are outlined, cells in `planted` get a dot.
std::string heatmap_svg(const Matrix& importance, const std::vector<std::size_t>& kept,
                        const std::vector<std::size_t>& planted, const std::string& title);

void write_text(const std::filesystem::path& path, const std::string& text);

}  // namespace cprune
