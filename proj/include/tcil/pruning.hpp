#pragma once

#include <string>
#include <vector>

#include "tcil/model.hpp"

namespace tcil {

struct GeometricMedianResult {
  std::vector<double> point;
  bool converged = false;
  int iterations = 0;
};

// Weiszfeld iteration with the standard subgradient step when an iterate
// lands on an input point. Converges when the update norm drops below tol.
GeometricMedianResult geometric_median(const std::vector<std::vector<double>>& points,
                                       double tol = 1e-10, int max_iterations = 10000);

// Sum of Euclidean distances from y to all points.
double median_objective(const std::vector<std::vector<double>>& points,
                        const std::vector<double>& y);

enum class PruneMode { ratio, threshold };

struct PruneConfig {
  PruneMode mode = PruneMode::ratio;
  double ratio = 0.5;       // fraction of filters removed per layer
  double threshold = 0.95;  // cosine similarity above which a pair is redundant
  double median_tol = 1e-10;

  void validate() const;
};

struct PruneDecision {
  std::vector<int> kept;     // ascending positions within the layer
  std::vector<int> removed;  // ascending
};

// Filters nearest the layer's geometric median are the most replaceable and
// are removed first. At least one filter always survives.
PruneDecision prune_layer(const std::vector<std::vector<double>>& filters,
                          const PruneConfig& config);

// Structural surgery: prunes every conv of one extractor and rewires the
// downstream conv inputs; for the final conv, the fusion module and the
// classifier columns of that extractor's block are adjusted too.
void prune_extractor(DeaModel& model, int extractor_index, const PruneConfig& config);

struct PruneReport {
  int64_t params_before = 0;
  int64_t params_after = 0;
  double ratio() const {
    return params_after > 0 ? static_cast<double>(params_before) / params_after : 0.0;
  }
};

// Prunes all extractors uniformly (the compact-model transform).
PruneReport prune_model(DeaModel& model, const PruneConfig& config);

}  // namespace tcil
