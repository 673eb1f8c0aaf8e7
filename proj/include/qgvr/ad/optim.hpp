#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "qgvr/ad/parameters.hpp"

namespace qgvr::ad {

inline constexpr double kDefaultClipThreshold = 2.0;

/// Rescales every gradient by threshold / g when the global L2 norm g exceeds
/// the threshold. Returns the norm measured before clipping.
double clip_gradients(ModelParameters& params, double threshold = kDefaultClipThreshold);

struct AdamConfig {
  double alpha = 2e-4;
  double beta1 = 0.85;
  double beta2 = 0.997;
  double epsilon = 1e-6;
};

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
};

struct AdamState {
  std::uint64_t step = 0;
  AdamConfig config;
  std::map<std::string, AdamMoments> moments;

  /// Zeroed moments for every parameter in the collection.
  static AdamState for_parameters(const ModelParameters& params, AdamConfig config = {});
};

/// One bias-corrected Adam update applied in place. Throws when the state no
/// longer matches the parameter set.
void adam_step(AdamState& state, ModelParameters& params);

}  // namespace qgvr::ad
