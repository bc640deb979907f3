#pragma once

// Raster plots for the similarity analysis and the best-of-N curve. Each PNG
// is written next to a JSON file holding the plotted numbers.

#include "f2d/evaluation.hpp"
#include "f2d/identity_encoder.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace f2d::plots {

struct PlotSummary {
  std::vector<identity::SimilarityDistribution> distributions;
  std::optional<evaluation::UpperBoundCurve> curve;
  /// Copied into every sidecar (seed, checkpoint hashes, ...).
  nlohmann::json provenance = nlohmann::json::object();
};

struct Histogram {
  double lo = -1.0;
  double hi = 1.0;
  std::vector<int> counts;
};

Histogram histogram(const std::vector<double>& values, int bins, double lo = -1.0, double hi = 1.0);

/// Writes similarity_layer_XX.{png,json} per distribution and
/// upper_bound.{png,json} for the curve. Empty series are skipped and
/// reported through `warn`. Returns the PNG paths in emission order.
std::vector<std::filesystem::path> emit_plots(
    const PlotSummary& summary, const std::filesystem::path& dir,
    const std::function<void(const std::string&)>& warn = {});

}  // namespace f2d::plots
