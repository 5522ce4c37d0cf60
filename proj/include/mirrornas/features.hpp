#pragma once

#include <array>
#include <iosfwd>
#include <span>

#include "mirrornas/arch.hpp"

namespace mirrornas {

inline constexpr std::size_t kFeatureDim = 9;
inline constexpr double kDefaultGamma = 0.9;

/// Layout: [one-hot category (6), kernel/5, pred1/(max_len+1), pred2/(max_len+1)].
using Feature = std::array<double, kFeatureDim>;

namespace feature_index {
inline constexpr std::size_t kKernel = 6;
inline constexpr std::size_t kPred1 = 7;
inline constexpr std::size_t kPred2 = 8;
}  // namespace feature_index

Feature state_feature(const LayerCode& code, int max_len = kDefaultMaxLen);
inline Feature state_feature(const Layer& layer, int max_len = kDefaultMaxLen) {
  return state_feature(layer.code(), max_len);
}

/// Discounted feature count: sum over t = 1..T of gamma^t * phi(s_t).
/// The first layer is weighted gamma^1. An empty trajectory gives zeros.
Feature feature_count(const Trajectory& traj, double gamma = kDefaultGamma);

/// Same sum taken directly over the block's layers, normalizing predecessor
/// codes by `max_len` instead of the block's own bound.
Feature feature_count(const BlockArch& arch, double gamma, int max_len);
inline Feature feature_count(const BlockArch& arch, double gamma = kDefaultGamma) {
  return feature_count(arch, gamma, arch.max_len);
}

double dot(const Feature& a, const Feature& b);
double norm2(const Feature& a);
Feature operator+(const Feature& a, const Feature& b);
Feature operator-(const Feature& a, const Feature& b);
Feature operator*(double s, const Feature& a);

/// 0 when either side is the zero vector.
double cosine_similarity(const Feature& a, const Feature& b);

/// Plain-text export: a "# gamma=<g>" header followed by one value per line.
void write_feature_count(std::ostream& os, const Feature& mu, double gamma);

}  // namespace mirrornas
