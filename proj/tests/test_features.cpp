#include <cmath>
#include <sstream>

#include "doctest.h"
#include "mirrornas/features.hpp"

using namespace mirrornas;

namespace {

BlockArch resnet() {
  const std::vector<LayerCode> codes{{ops::kDwConv3, 1, 0}, {ops::kDwConv3, 2, 0}, {ops::kAdd, 1, 3}};
  return BlockArch::from_codes(codes);
}

}  // namespace

TEST_CASE("state feature layout") {
  const Feature f = state_feature(LayerCode{ops::kAdd, 1, 3}, 24);
  CHECK(f[static_cast<std::size_t>(OpCategory::Add)] == 1.0);
  double onehot = 0.0;
  for (std::size_t i = 0; i < 6; ++i) onehot += f[i];
  CHECK(onehot == 1.0);
  CHECK(f[feature_index::kKernel] == 0.0);
  CHECK(f[feature_index::kPred1] == doctest::Approx(1.0 / 25.0).epsilon(1e-15));
  CHECK(f[feature_index::kPred2] == doctest::Approx(3.0 / 25.0).epsilon(1e-15));

  const Feature g = state_feature(LayerCode{ops::kDwConv5, 2, 0}, 3);
  CHECK(g[feature_index::kKernel] == 1.0);
  CHECK(g[feature_index::kPred1] == 0.5);
  CHECK(g[feature_index::kPred2] == 0.0);
}

TEST_CASE("feature count equals an independent term-by-term sum") {
  const BlockArch b = resnet();
  const double gamma = 0.9;
  Feature expected{};
  for (std::size_t t = 0; t < b.size(); ++t) {
    const Layer& l = b.layers[t];
    Feature phi{};
    phi[static_cast<std::size_t>(l.op.category)] = 1.0;
    phi[6] = l.op.kernel / 5.0;
    phi[7] = l.pred1 / 25.0;
    phi[8] = l.pred2 / 25.0;
    const double w = std::pow(gamma, static_cast<double>(t + 1));
    for (std::size_t i = 0; i < kFeatureDim; ++i) expected[i] += w * phi[i];
  }
  const Feature mu = feature_count(b, gamma, 24);
  for (std::size_t i = 0; i < kFeatureDim; ++i) CHECK(mu[i] == doctest::Approx(expected[i]).epsilon(1e-14));
  const Feature via_traj = feature_count(to_trajectory(b), gamma);
  for (std::size_t i = 0; i < kFeatureDim; ++i) CHECK(via_traj[i] == mu[i]);
}

TEST_CASE("identity chain has the geometric closed form") {
  for (int T = 1; T <= 6; ++T) {
    BlockArch b;
    for (int t = 0; t < T; ++t) b.push({ops::kIdentity, 1, 0});
    const double gamma = 0.7;
    const Feature mu = feature_count(b, gamma, 24);
    const double geo = gamma * (1.0 - std::pow(gamma, T)) / (1.0 - gamma);
    CHECK(mu[static_cast<std::size_t>(OpCategory::Identity)] == doctest::Approx(geo).epsilon(1e-13));
    CHECK(mu[feature_index::kPred1] == doctest::Approx(geo / 25.0).epsilon(1e-13));
  }
}

TEST_CASE("gamma = 1 counts layers") {
  BlockArch b;
  b.push({ops::kIdentity, 1, 0}).push({ops::kIdentity, 2, 0});
  CHECK(feature_count(b, 1.0, 24)[static_cast<std::size_t>(OpCategory::Identity)] == 2.0);
}

TEST_CASE("swapping distinct layers changes mu") {
  BlockArch a, b;
  a.push({ops::kDwConv3, 1, 0}).push({ops::kMaxPool3, 1, 0});
  b.push({ops::kMaxPool3, 1, 0}).push({ops::kDwConv3, 1, 0});
  CHECK(norm2(feature_count(a) - feature_count(b)) > 1e-3);
}

TEST_CASE("gamma outside (0,1] is rejected") {
  CHECK_THROWS_AS(feature_count(resnet(), 0.0, 24), std::invalid_argument);
  CHECK_THROWS_AS(feature_count(resnet(), 1.5, 24), std::invalid_argument);
}

TEST_CASE("vector helpers") {
  Feature a{};
  Feature b{};
  a[0] = 3.0;
  a[1] = 4.0;
  b[0] = 1.0;
  CHECK(norm2(a) == 5.0);
  CHECK(dot(a, b) == 3.0);
  CHECK(cosine_similarity(a, b) == doctest::Approx(0.6));
  CHECK(cosine_similarity(a, Feature{}) == 0.0);
  CHECK((a - a) == Feature{});
  CHECK((2.0 * b)[0] == 2.0);
}

TEST_CASE("feature file format") {
  std::ostringstream os;
  Feature mu{};
  mu[0] = 0.5;
  write_feature_count(os, mu, 0.9);
  const std::string text = os.str();
  CHECK(text.rfind("# gamma=0.9", 0) == 0);
  CHECK(std::count(text.begin(), text.end(), '\n') == 10);
}
