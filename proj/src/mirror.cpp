#include "mirrornas/mirror.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "mirrornas/rng.hpp"

namespace mirrornas {

ExpertBlock expert_library(std::string_view name, int max_len) {
  using namespace ops;
  if (name == "resnet_block") {
    // conv -> conv, plus a shortcut from the block input into the add.
    const LayerCode codes[] = {{kDwConv3, 1, 0}, {kDwConv3, 2, 0}, {kAdd, 1, 3}};
    return {"resnet_block", BlockArch::from_codes(codes, max_len)};
  }
  if (name == "plain_chain") {
    const LayerCode codes[] = {{kDwConv3, 1, 0}, {kDwConv3, 2, 0}};
    return {"plain_chain", BlockArch::from_codes(codes, max_len)};
  }
  throw std::invalid_argument("unknown expert '" + std::string(name) + "'");
}

std::vector<std::string> expert_names() { return {"resnet_block", "plain_chain"}; }

double mirror_stimuli(const MirrorWeights& w, const BlockArch& arch) {
  if (auto v = validate(arch); !v.empty()) {
    throw ArchError("invalid architecture: " + v.front().message);
  }
  return dot(w.w, feature_count(arch, w.gamma, w.max_len));
}

double mirror_stimuli_by_terms(const MirrorWeights& w, const BlockArch& arch) {
  if (auto v = validate(arch); !v.empty()) {
    throw ArchError("invalid architecture: " + v.front().message);
  }
  double total = 0.0;
  double discount = w.gamma;
  for (const Layer& l : arch.layers) {
    total += discount * dot(w.w, state_feature(l, w.max_len));
    discount *= w.gamma;
  }
  return total;
}

Feature expert_feature_expectation(const ExpertBlock& expert, double gamma) {
  return feature_count(to_trajectory(expert.arch), gamma);
}

namespace {

void check_pool(std::span<const OpKind> pool) {
  if (pool.empty()) throw std::invalid_argument("op pool is empty");
  if (std::none_of(pool.begin(), pool.end(), [](OpKind o) { return !o.binary(); })) {
    throw std::invalid_argument("op pool needs at least one unary op to start a block");
  }
}

InnerPolicy finish_policy(BlockArch arch, const Feature& w, double gamma) {
  InnerPolicy p;
  p.trajectory = to_trajectory(arch);
  p.mu = feature_count(p.trajectory, gamma);
  p.value = dot(w, p.mu);
  p.arch = std::move(arch);
  return p;
}

}  // namespace

InnerPolicy inner_optimal_policy(const Feature& w, int max_layers, std::span<const OpKind> pool,
                                 double gamma, int max_len) {
  check_pool(pool);
  const int cap = std::min(max_layers, max_len);
  if (cap < 1) throw std::invalid_argument("max_layers must be at least 1");

  std::vector<LayerCode> best_codes;
  double prefix = 0.0;
  double best_prefix = -std::numeric_limits<double>::infinity();
  int best_len = 0;
  double discount = gamma;
  for (int t = 1; t <= cap; ++t) {
    const auto codes = legal_codes(t, pool);
    const LayerCode* best = nullptr;
    double best_reward = -std::numeric_limits<double>::infinity();
    for (const LayerCode& c : codes) {
      const double r = dot(w, state_feature(c, max_len));
      if (r > best_reward) {
        best_reward = r;
        best = &c;
      }
    }
    best_codes.push_back(*best);
    prefix += discount * best_reward;
    discount *= gamma;
    if (prefix > best_prefix) {
      best_prefix = prefix;
      best_len = t;
    }
  }
  best_codes.resize(static_cast<std::size_t>(best_len));
  return finish_policy(BlockArch::from_codes(best_codes, max_len), w, gamma);
}

InnerPolicy inner_qlearning_policy(const Feature& w, int max_layers, std::span<const OpKind> pool,
                                   double gamma, int max_len, const QInnerOptions& opts) {
  check_pool(pool);
  const int cap = std::min(max_layers, max_len);
  if (cap < 1) throw std::invalid_argument("max_layers must be at least 1");

  // Action 0 is terminate; action k > 0 is legal_codes(t)[k - 1].
  std::vector<std::vector<LayerCode>> codes(cap + 1);
  std::vector<std::vector<double>> rewards(cap + 1);
  std::vector<std::vector<double>> q(cap + 2);
  for (int t = 1; t <= cap; ++t) {
    codes[t] = legal_codes(t, pool);
    for (const auto& c : codes[t]) rewards[t].push_back(dot(w, state_feature(c, max_len)));
    q[t].assign(codes[t].size() + 1, 0.0);
  }
  auto legal = [&](int t, std::size_t a) { return t > 1 || a != 0; };
  auto greedy = [&](int t) {
    std::size_t best = t > 1 ? 0 : 1;
    for (std::size_t a = best + 1; a < q[t].size(); ++a) {
      if (q[t][a] > q[t][best]) best = a;
    }
    return best;
  };
  auto value = [&](int t) { return t > cap ? 0.0 : q[t][greedy(t)]; };

  Rng rng(opts.seed);
  for (int ep = 0; ep < opts.episodes; ++ep) {
    for (int t = 1; t <= cap; ++t) {
      std::size_t a;
      if (rng.bernoulli(opts.epsilon)) {
        do {
          a = rng.index(q[t].size());
        } while (!legal(t, a));
      } else {
        a = greedy(t);
      }
      const double target = a == 0 ? 0.0 : rewards[t][a - 1] + gamma * value(t + 1);
      q[t][a] += opts.learning_rate * (target - q[t][a]);
      if (a == 0) break;
    }
  }

  BlockArch arch;
  arch.max_len = max_len;
  for (int t = 1; t <= cap; ++t) {
    const std::size_t a = greedy(t);
    if (a == 0) break;
    arch.push(codes[t][a - 1]);
  }
  return finish_policy(std::move(arch), w, gamma);
}

namespace {

// Minimum-norm point of conv(points) by Wolfe's active-set method. Returns
// nullopt if the affine subproblems become singular or the loop stalls.
std::optional<Feature> min_norm_point(std::span<const Feature> points) {
  const std::size_t n = points.size();
  const double scale = [&] {
    double m = 0.0;
    for (const auto& p : points) m = std::max(m, dot(p, p));
    return m;
  }();
  if (scale == 0.0) return Feature{};
  const double tol = 1e-12 * scale;

  std::size_t first = 0;
  for (std::size_t j = 1; j < n; ++j) {
    if (dot(points[j], points[j]) < dot(points[first], points[first])) first = j;
  }
  std::vector<std::size_t> active{first};
  std::vector<double> lambda{1.0};
  auto combine = [&](const std::vector<double>& coef) {
    Feature x{};
    for (std::size_t i = 0; i < active.size(); ++i) x = x + coef[i] * points[active[i]];
    return x;
  };
  Feature x = points[first];

  // Affine minimizer over the active set: [G 1; 1^T 0] [a; mu] = [0; 1].
  auto affine_min = [&]() -> std::optional<std::vector<double>> {
    const std::size_t m = active.size();
    std::vector<std::vector<double>> a(m + 1, std::vector<double>(m + 2, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t k = 0; k < m; ++k) a[i][k] = dot(points[active[i]], points[active[k]]);
      a[i][m] = 1.0;
      a[m][i] = 1.0;
    }
    a[m][m + 1] = 1.0;
    for (std::size_t c = 0; c <= m; ++c) {
      std::size_t piv = c;
      for (std::size_t r = c + 1; r <= m; ++r) {
        if (std::abs(a[r][c]) > std::abs(a[piv][c])) piv = r;
      }
      if (std::abs(a[piv][c]) < 1e-14 * std::max(scale, 1.0)) return std::nullopt;
      std::swap(a[c], a[piv]);
      for (std::size_t r = 0; r <= m; ++r) {
        if (r == c) continue;
        const double f = a[r][c] / a[c][c];
        for (std::size_t k = c; k <= m + 1; ++k) a[r][k] -= f * a[c][k];
      }
    }
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) out[i] = a[i][m + 1] / a[i][i];
    return out;
  };

  for (int major = 0; major < 1000; ++major) {
    std::size_t j = 0;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < n; ++k) {
      const double v = dot(x, points[k]);
      if (v < best) {
        best = v;
        j = k;
      }
    }
    if (dot(x, x) - best <= tol) return x;
    if (std::find(active.begin(), active.end(), j) != active.end()) return std::nullopt;
    active.push_back(j);
    lambda.push_back(0.0);

    for (int minor = 0; minor < 1000; ++minor) {
      const auto alpha = affine_min();
      if (!alpha) return std::nullopt;
      if (std::all_of(alpha->begin(), alpha->end(), [](double v) { return v > 1e-15; })) {
        lambda = *alpha;
        x = combine(lambda);
        break;
      }
      double theta = 1.0;
      for (std::size_t i = 0; i < active.size(); ++i) {
        if ((*alpha)[i] <= 1e-15) theta = std::min(theta, lambda[i] / (lambda[i] - (*alpha)[i]));
      }
      for (std::size_t i = 0; i < active.size(); ++i) {
        lambda[i] = (1.0 - theta) * lambda[i] + theta * (*alpha)[i];
      }
      for (std::size_t i = active.size(); i-- > 0;) {
        if (lambda[i] <= 1e-15) {
          active.erase(active.begin() + static_cast<std::ptrdiff_t>(i));
          lambda.erase(lambda.begin() + static_cast<std::ptrdiff_t>(i));
        }
      }
      double sum = 0.0;
      for (double v : lambda) sum += v;
      for (double& v : lambda) v /= sum;
      x = combine(lambda);
    }
  }
  return std::nullopt;
}

}  // namespace

MarginResult max_margin_step(const Feature& mu_star, std::span<const Feature> mu_set,
                             const MarginOptions& opts) {
  if (mu_set.empty()) throw std::invalid_argument("max_margin_step needs a nonempty set");
  std::vector<Feature> diffs;
  diffs.reserve(mu_set.size());
  Feature mean{};
  for (const Feature& mu : mu_set) {
    diffs.push_back(mu_star - mu);
    mean = mean + mu;
  }
  mean = (1.0 / static_cast<double>(mu_set.size())) * mean;

  auto margin = [&](const Feature& w, std::size_t* argmin) {
    double m = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < diffs.size(); ++j) {
      const double v = dot(w, diffs[j]);
      if (v < m) {
        m = v;
        if (argmin) *argmin = j;
      }
    }
    return m;
  };

  Feature w = mu_star - mean;
  const double n0 = norm2(w);
  if (n0 > 0.0) {
    w = (1.0 / n0) * w;
  } else {
    w = Feature{};
    w[0] = 1.0;
  }

  MarginResult best{w, margin(w, nullptr)};
  for (int k = 1; k <= opts.iterations; ++k) {
    std::size_t j = 0;
    margin(w, &j);
    w = w + (1.0 / std::sqrt(static_cast<double>(k))) * diffs[j];
    const double n = norm2(w);
    if (n > 1.0) w = (1.0 / n) * w;
    const double m = margin(w, nullptr);
    if (m > best.delta) best = {w, m};
  }

  // The subgradient phase oscillates around kinks at the scale of its last
  // step. When the margin is positive the optimum is u/|u| for the minimum-norm
  // point u of conv(diffs), which lands exactly on it.
  if (const auto u = min_norm_point(diffs)) {
    const double nu = norm2(*u);
    if (nu > 1e-12) {
      const Feature polished = (1.0 / nu) * *u;
      const double m = margin(polished, nullptr);
      if (m >= best.delta) best = {polished, m};
    }
  }
  return best;
}

IrlResult train_mirror(const ExpertBlock& expert, const IrlConfig& config) {
  if (auto v = validate(expert.arch); !v.empty()) {
    throw ArchError("invalid expert: " + v.front().message);
  }
  check_pool(config.op_pool);

  BlockArch expert_arch = expert.arch;
  expert_arch.max_len = config.max_len;
  const Feature mu_star = feature_count(to_trajectory(expert_arch), config.gamma);

  BlockArch initial;
  initial.max_len = config.max_len;
  if (config.random_init_seed) {
    Rng rng(*config.random_init_seed);
    const int cap = std::min(config.max_layers, config.max_len);
    const int len = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(cap)));
    for (int t = 1; t <= len; ++t) {
      const auto codes = legal_codes(t, config.op_pool);
      if (codes.empty()) break;
      initial.push(codes[rng.index(codes.size())]);
    }
  } else {
    initial.push({ops::kDwConv3, kBlockInput, kNoPred});
  }

  IrlResult result;
  result.trace.initial_arch = canonical_serialize(initial);
  result.trace.mu_initial = feature_count(initial, config.gamma);
  std::vector<Feature> found{result.trace.mu_initial};
  double best_true_margin = 0.0;

  for (int i = 1; i <= config.max_iterations; ++i) {
    const MarginResult step = max_margin_step(mu_star, found, config.margin);
    const InnerPolicy inner =
        config.inner == InnerSolver::Exact
            ? inner_optimal_policy(step.w, config.max_layers, config.op_pool, config.gamma,
                                   config.max_len)
            : inner_qlearning_policy(step.w, config.max_layers, config.op_pool, config.gamma,
                                     config.max_len, config.q_inner);
    IrlIteration rec;
    rec.iteration = i;
    rec.w = step.w;
    rec.delta = step.delta;
    rec.mu_hat = inner.mu;
    rec.inner_arch = canonical_serialize(inner.arch);
    rec.expert_score = dot(step.w, mu_star);
    rec.inner_score = inner.value;
    result.trace.iterations.push_back(rec);
    found.push_back(inner.mu);

    // Keep the iterate under which the expert is closest to the best block;
    // later iterates win ties.
    const double true_margin = rec.expert_score - rec.inner_score;
    if (result.trace.selected_iteration == 0 || true_margin >= best_true_margin) {
      best_true_margin = true_margin;
      result.trace.selected_iteration = i;
      result.weights.w = step.w;
    }
    result.weights.final_margin = step.delta;
    if (step.delta <= config.epsilon) {
      result.trace.converged = true;
      break;
    }
  }
  result.weights.gamma = config.gamma;
  result.weights.max_len = config.max_len;
  result.weights.trained_against = canonical_serialize(expert_arch);
  return result;
}

std::string weights_to_json(const MirrorWeights& w) {
  nlohmann::ordered_json doc;
  doc["w"] = std::vector<double>(w.w.begin(), w.w.end());
  doc["gamma"] = w.gamma;
  doc["expert"] = w.trained_against;
  doc["delta"] = w.final_margin;
  doc["max_len"] = w.max_len;
  return doc.dump();
}

MirrorWeights weights_from_json(std::string_view text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("malformed weights file: ") + e.what());
  }
  MirrorWeights out;
  try {
    const auto w = doc.at("w").get<std::vector<double>>();
    if (w.size() != kFeatureDim) throw ParseError("weights need exactly 9 components");
    std::copy(w.begin(), w.end(), out.w.begin());
    out.gamma = doc.at("gamma").get<double>();
    out.trained_against = doc.value("expert", std::string{});
    out.final_margin = doc.value("delta", 0.0);
    out.max_len = doc.value("max_len", kDefaultMaxLen);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad weights file: ") + e.what());
  }
  if (!(out.gamma > 0.0 && out.gamma <= 1.0)) throw ParseError("gamma must lie in (0, 1]");
  if (out.max_len < 1) throw ParseError("max_len must be positive");
  return out;
}

void write_irl_trace_csv(std::ostream& os, const IrlTrace& trace) {
  os << "iteration,delta,expert_score,inner_score";
  for (std::size_t k = 0; k < kFeatureDim; ++k) os << ",w" << k;
  os << '\n';
  char buf[64];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  for (const auto& it : trace.iterations) {
    os << it.iteration << ',' << num(it.delta) << ',' << num(it.expert_score) << ','
       << num(it.inner_score);
    for (double v : it.w) os << ',' << num(v);
    os << '\n';
  }
}

}  // namespace mirrornas
