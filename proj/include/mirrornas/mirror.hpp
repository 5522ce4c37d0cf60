#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mirrornas/arch.hpp"
#include "mirrornas/features.hpp"

namespace mirrornas {

/// Linear topology score F(m) = w . mu(m). `max_len` is the normalizer the
/// weights were trained with; scoring always recomputes mu with it.
struct MirrorWeights {
  Feature w{};
  double gamma = kDefaultGamma;
  int max_len = kDefaultMaxLen;
  std::string trained_against;  // canonical serialization of the expert
  double final_margin = 0.0;
};

struct ExpertBlock {
  std::string name;
  BlockArch arch;
};

/// Known expert blocks: "resnet_block" and "plain_chain". Throws
/// std::invalid_argument for anything else.
ExpertBlock expert_library(std::string_view name, int max_len = kDefaultMaxLen);
std::vector<std::string> expert_names();

/// w . mu(arch), with mu taken under w.gamma and w.max_len. Throws ArchError
/// for invalid blocks.
double mirror_stimuli(const MirrorWeights& w, const BlockArch& arch);

/// The same score summed layer by layer: sum_t gamma^t * (w . phi(s_t)).
double mirror_stimuli_by_terms(const MirrorWeights& w, const BlockArch& arch);

Feature expert_feature_expectation(const ExpertBlock& expert, double gamma = kDefaultGamma);

struct InnerPolicy {
  BlockArch arch;
  Trajectory trajectory;
  Feature mu{};
  double value = 0.0;  // sum_t gamma^t w . phi(s_t)
};

/// Best block of at most `max_layers` layers under per-layer reward w . phi.
/// The legal code set at step t depends only on t, so the per-step maxima
/// plus the best stopping length give the exact optimum. Ties keep the
/// shortest length and the first code in legal_codes order.
InnerPolicy inner_optimal_policy(const Feature& w, int max_layers, std::span<const OpKind> pool,
                                 double gamma = kDefaultGamma, int max_len = kDefaultMaxLen);

/// Sampled alternative to the exact solver: tabular Q-learning with state =
/// step index. Only used for fidelity experiments.
struct QInnerOptions {
  int episodes = 4000;
  double learning_rate = 0.1;
  double epsilon = 0.2;
  std::uint64_t seed = 1;
};
InnerPolicy inner_qlearning_policy(const Feature& w, int max_layers, std::span<const OpKind> pool,
                                   double gamma, int max_len, const QInnerOptions& opts);

struct MarginResult {
  Feature w{};
  double delta = 0.0;
};

struct MarginOptions {
  int iterations = 2000;
};

/// max_{|w| <= 1} min_j w . (mu_star - mu_j) by projected subgradient ascent
/// with step 1/sqrt(k). Starts from normalize(mu_star - mean(mu_j)), or e_0
/// when that is zero, and returns the best iterate. Deterministic.
MarginResult max_margin_step(const Feature& mu_star, std::span<const Feature> mu_set,
                             const MarginOptions& opts = {});

enum class InnerSolver { Exact, QLearning };

struct IrlConfig {
  double epsilon = 0.01;
  int max_iterations = 50;
  double gamma = kDefaultGamma;
  std::vector<OpKind> op_pool = full_op_pool();
  int max_layers = kDefaultMaxLen;  // length cap of the inner search space
  int max_len = kDefaultMaxLen;     // feature normalizer
  InnerSolver inner = InnerSolver::Exact;
  QInnerOptions q_inner;
  MarginOptions margin;
  /// When set, the initial policy is a seeded random block instead of the
  /// single-DwConv3 block.
  std::optional<std::uint64_t> random_init_seed;
};

struct IrlIteration {
  int iteration = 0;
  Feature w{};
  double delta = 0.0;
  Feature mu_hat{};        // feature count of the inner-optimal block for w
  std::string inner_arch;  // its canonical serialization
  double expert_score = 0.0;  // w . mu_star
  double inner_score = 0.0;   // w . mu_hat
};

struct IrlTrace {
  Feature mu_initial{};
  std::string initial_arch;
  std::vector<IrlIteration> iterations;
  bool converged = false;  // false means the iteration cap was hit
  int selected_iteration = 0;  // iterate whose w was returned
};

struct IrlResult {
  MirrorWeights weights;
  IrlTrace trace;
};

/// Alternates max_margin_step and the inner solver until delta <= epsilon or
/// the iteration cap. Because the inner solver returns the best block for each
/// w^(i), every iterate's true margin (expert score minus best score) is known;
/// the returned weights are the iterate with the largest true margin, and
/// final_margin is the delta at termination.
IrlResult train_mirror(const ExpertBlock& expert, const IrlConfig& config = {});

/// {"w":[...9],"gamma":g,"expert":"<canonical>","delta":d,"max_len":n}
std::string weights_to_json(const MirrorWeights& w);
MirrorWeights weights_from_json(std::string_view text);  // throws ParseError

void write_irl_trace_csv(std::ostream& os, const IrlTrace& trace);

}  // namespace mirrornas
