#include "mirrornas/features.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace mirrornas {

Feature state_feature(const LayerCode& code, int max_len) {
  Feature phi{};
  phi[static_cast<std::size_t>(code.op.category)] = 1.0;
  const double denom = static_cast<double>(max_len) + 1.0;
  phi[feature_index::kKernel] = code.op.kernel / 5.0;
  phi[feature_index::kPred1] = code.pred1 / denom;
  phi[feature_index::kPred2] = code.pred2 / denom;
  return phi;
}

namespace {

template <typename Codes>
Feature discounted_sum(const Codes& codes, double gamma, int max_len) {
  if (!(gamma > 0.0 && gamma <= 1.0)) {
    throw std::invalid_argument("gamma must lie in (0, 1]");
  }
  Feature mu{};
  double weight = gamma;
  for (const auto& c : codes) {
    const Feature phi = state_feature(c, max_len);
    for (std::size_t i = 0; i < kFeatureDim; ++i) mu[i] += weight * phi[i];
    weight *= gamma;
  }
  return mu;
}

}  // namespace

Feature feature_count(const Trajectory& traj, double gamma) {
  std::vector<LayerCode> codes;
  codes.reserve(traj.steps.size());
  for (const Step& s : traj.steps) codes.push_back(s.state.code());
  return discounted_sum(codes, gamma, traj.max_len);
}

Feature feature_count(const BlockArch& arch, double gamma, int max_len) {
  std::vector<LayerCode> codes;
  codes.reserve(arch.layers.size());
  for (const Layer& l : arch.layers) codes.push_back(l.code());
  return discounted_sum(codes, gamma, max_len);
}

double dot(const Feature& a, const Feature& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < kFeatureDim; ++i) s += a[i] * b[i];
  return s;
}

double norm2(const Feature& a) { return std::sqrt(dot(a, a)); }

Feature operator+(const Feature& a, const Feature& b) {
  Feature r;
  for (std::size_t i = 0; i < kFeatureDim; ++i) r[i] = a[i] + b[i];
  return r;
}

Feature operator-(const Feature& a, const Feature& b) {
  Feature r;
  for (std::size_t i = 0; i < kFeatureDim; ++i) r[i] = a[i] - b[i];
  return r;
}

Feature operator*(double s, const Feature& a) {
  Feature r;
  for (std::size_t i = 0; i < kFeatureDim; ++i) r[i] = s * a[i];
  return r;
}

double cosine_similarity(const Feature& a, const Feature& b) {
  const double na = norm2(a);
  const double nb = norm2(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

void write_feature_count(std::ostream& os, const Feature& mu, double gamma) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", gamma);
  os << "# gamma=" << buf << '\n';
  for (double v : mu) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    os << buf << '\n';
  }
}

}  // namespace mirrornas
