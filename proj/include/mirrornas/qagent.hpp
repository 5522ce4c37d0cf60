#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "mirrornas/arch.hpp"
#include "mirrornas/eval.hpp"
#include "mirrornas/mirror.hpp"
#include "mirrornas/rng.hpp"

namespace mirrornas {

/// Agent state: the previous layer's code, or nullopt for START.
using AgentState = std::optional<LayerCode>;
/// Agent action: the next layer's code, or nullopt for TERMINATE.
using AgentAction = std::optional<LayerCode>;

/// Legal decisions while building blocks from `pool` with at most
/// `max_layers` layers. The decision at `position` chooses layer `position`;
/// TERMINATE is legal from position 2 on and is the only choice past
/// max_layers.
class ActionSpace {
 public:
  ActionSpace(std::vector<OpKind> pool, int max_layers);

  /// Layer codes first (legal_codes order), then TERMINATE if legal.
  const std::vector<AgentAction>& legal(int position) const;
  bool is_legal(int position, const AgentAction& a) const;
  int max_layers() const { return max_layers_; }
  const std::vector<OpKind>& pool() const { return pool_; }

 private:
  std::vector<OpKind> pool_;
  int max_layers_;
  std::vector<std::vector<AgentAction>> by_position_;  // index = position
};

/// Tabular action values; unseen pairs read as 0.
class QTable {
 public:
  double get(const AgentState& s, const AgentAction& a) const;
  void set(const AgentState& s, const AgentAction& a, double value);
  bool contains(const AgentState& s, const AgentAction& a) const;
  std::size_t size() const { return values_.size(); }

  /// max over `actions` of Q(s, .); 0 for an empty list.
  double max_value(const AgentState& s, std::span<const AgentAction> actions) const;
  /// First action in `actions` order attaining the max.
  std::size_t argmax(const AgentState& s, std::span<const AgentAction> actions) const;

  /// Visits stored entries in key order.
  void for_each(const std::function<void(const AgentState&, const AgentAction&, double)>& fn) const;

  static std::uint32_t pack(const std::optional<LayerCode>& c);
  static std::optional<LayerCode> unpack(std::uint32_t packed);

 private:
  static std::uint64_t key(const AgentState& s, const AgentAction& a) {
    return (static_cast<std::uint64_t>(pack(s)) << 32) | pack(a);
  }
  std::unordered_map<std::uint64_t, double> values_;
};

struct Transition {
  AgentState state;
  AgentAction action;
  double reward = 0.0;
  AgentState next_state;  // ignored for terminal transitions
  std::span<const AgentAction> legal_next;  // empty for terminal transitions
  bool terminal = false;
};

/// Q(s,a) <- (1-eta) Q(s,a) + eta (r + gamma_q max_a' Q(s',a')); the max term is
/// 0 for terminal transitions. Returns the new value.
double td_update(QTable& q, const Transition& t, double eta, double gamma_q);

/// R(m) = acc + lambda * topo.
inline double combined_reward(double acc, double topo, double lambda) { return acc + lambda * topo; }

/// total/T repeated T times. Throws std::invalid_argument for T < 1.
std::vector<double> shaped_rewards(double total, int T);

class ReplayBuffer {
 public:
  struct Entry {
    BlockArch arch;
    double reward = 0.0;
  };
  /// capacity 0 means unbounded.
  explicit ReplayBuffer(std::size_t capacity = 2000) : capacity_(capacity) {}

  void push(BlockArch arch, double reward);
  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return entries_.empty(); }
  const Entry& at(std::size_t i) const { return entries_[i]; }
  /// Uniform draws with replacement.
  std::vector<const Entry*> sample(std::size_t n, Rng& rng) const;

 private:
  std::size_t capacity_;
  std::deque<Entry> entries_;
};

struct SearchConfig {
  double eta = 0.01;
  double gamma_q = 0.9;
  double lambda = 30.0;
  int batch = 64;
  int max_len = kDefaultMaxLen;  // cap on sampled block length
  int iterations = 180;
  int samples_per_iteration = 64;
  double epsilon_start = 1.0;
  double epsilon_end = 0.1;
  double epsilon_decay_fraction = 0.9;
  std::uint64_t seed = 0;
  std::size_t replay_capacity = 2000;
  std::size_t window = 1;
  std::size_t top_k = 4;
  std::vector<OpKind> op_pool = full_op_pool();

  /// Throws std::invalid_argument naming the first bad field.
  void validate() const;
};

/// Linear 1 -> end over the first decay_fraction of iterations, then flat.
/// `iteration` is 0-based.
double epsilon_at(const SearchConfig& config, int iteration);

/// Samples one block layer by layer: with probability epsilon a uniformly
/// random legal decision, otherwise the first argmax-Q decision.
BlockArch sample_block(const QTable& q, double epsilon, const ActionSpace& space, Rng& rng,
                       int max_len = kDefaultMaxLen);

/// Greedy rollout from START (epsilon = 0).
BlockArch greedy_block(const QTable& q, const ActionSpace& space, int max_len = kDefaultMaxLen);

/// Decision sequence of a block: (START -> L1) with reward 0, then
/// (L_t -> L_{t+1}) and finally (L_T -> TERMINATE), each carrying total/T.
std::vector<Transition> block_transitions(const BlockArch& arch, double total,
                                          const ActionSpace& space);

/// Applies td_update along the block's decisions, last decision first.
void replay_update(QTable& q, const BlockArch& arch, double total, const ActionSpace& space,
                   double eta, double gamma_q);

struct ScoredArch {
  BlockArch arch;
  double accuracy = 0.0;
  double topology = 0.0;
  double reward = 0.0;
  std::size_t sample_index = 0;  // 1-based order of evaluation
};

struct LogRow {
  int iteration = 0;
  std::size_t samples_total = 0;
  double epsilon = 0.0;
  double best_reward = 0.0;
  double mean_reward = 0.0;
  double best_accuracy = 0.0;
  double mean_topology = 0.0;
};

struct SearchResult {
  std::vector<ScoredArch> top_by_reward;
  std::vector<ScoredArch> top_by_accuracy;
  std::vector<ScoredArch> history;  // every evaluated sample in arrival order
  std::vector<LogRow> log;
  QTable q;
  std::size_t failures = 0;
};

struct SearchHooks {
  LogSink log;  // evaluation failures; default: stderr
  std::function<void(const LogRow&)> on_iteration;
};

/// Runs the sample -> evaluate -> combine -> replay -> TD loop. `mirror` may
/// be null, in which case topology scores are 0 (only meaningful for
/// lambda = 0). EvaluatorUnavailable propagates and aborts the run.
SearchResult run_search(const SearchConfig& config, Evaluator& evaluator,
                        const MirrorWeights* mirror, const SearchHooks& hooks = {});

/// 1-based sample count at which accuracy first reaches `threshold`, or
/// nullopt if it never does.
std::optional<std::size_t> samples_to_threshold(std::span<const ScoredArch> history,
                                                double threshold);

void write_convergence_csv(std::ostream& os, std::span<const LogRow> log);

}  // namespace mirrornas
