#include "mirrornas/qagent.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <ostream>
#include <stdexcept>

namespace mirrornas {

// ---------------------------------------------------------------------------
// ActionSpace

ActionSpace::ActionSpace(std::vector<OpKind> pool, int max_layers)
    : pool_(std::move(pool)), max_layers_(max_layers) {
  if (pool_.empty()) throw std::invalid_argument("op pool is empty");
  if (max_layers_ < 1) throw std::invalid_argument("max_layers must be at least 1");
  by_position_.resize(static_cast<std::size_t>(max_layers_) + 2);
  for (int p = 1; p <= max_layers_ + 1; ++p) {
    auto& out = by_position_[static_cast<std::size_t>(p)];
    if (p <= max_layers_) {
      for (const LayerCode& c : legal_codes(p, pool_)) out.emplace_back(c);
    }
    if (p >= 2) out.emplace_back(std::nullopt);
  }
}

const std::vector<AgentAction>& ActionSpace::legal(int position) const {
  if (position < 1 || position > max_layers_ + 1) {
    throw std::out_of_range("decision position out of range");
  }
  return by_position_[static_cast<std::size_t>(position)];
}

bool ActionSpace::is_legal(int position, const AgentAction& a) const {
  if (position < 1 || position > max_layers_ + 1) return false;
  if (!a) return position >= 2;
  if (position > max_layers_) return false;
  const auto& legal = by_position_[static_cast<std::size_t>(position)];
  return std::find(legal.begin(), legal.end(), a) != legal.end();
}

// ---------------------------------------------------------------------------
// QTable

std::uint32_t QTable::pack(const std::optional<LayerCode>& c) {
  if (!c) return 0;
  static const std::vector<OpKind> pool = full_op_pool();
  const auto it = std::find(pool.begin(), pool.end(), c->op);
  if (it == pool.end() || c->pred1 < 0 || c->pred1 > 0xfff || c->pred2 < 0 || c->pred2 > 0xfff) {
    throw std::invalid_argument("layer code cannot be packed");
  }
  const auto op = static_cast<std::uint32_t>(it - pool.begin());
  return 1u + ((op << 24) | (static_cast<std::uint32_t>(c->pred1) << 12) |
               static_cast<std::uint32_t>(c->pred2));
}

std::optional<LayerCode> QTable::unpack(std::uint32_t packed) {
  if (packed == 0) return std::nullopt;
  static const std::vector<OpKind> pool = full_op_pool();
  const std::uint32_t v = packed - 1;
  return LayerCode{pool.at(v >> 24), static_cast<int>((v >> 12) & 0xfff),
                   static_cast<int>(v & 0xfff)};
}

double QTable::get(const AgentState& s, const AgentAction& a) const {
  const auto it = values_.find(key(s, a));
  return it == values_.end() ? 0.0 : it->second;
}

void QTable::set(const AgentState& s, const AgentAction& a, double value) {
  values_[key(s, a)] = value;
}

bool QTable::contains(const AgentState& s, const AgentAction& a) const {
  return values_.count(key(s, a)) != 0;
}

double QTable::max_value(const AgentState& s, std::span<const AgentAction> actions) const {
  if (actions.empty()) return 0.0;
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& a : actions) best = std::max(best, get(s, a));
  return best;
}

std::size_t QTable::argmax(const AgentState& s, std::span<const AgentAction> actions) const {
  if (actions.empty()) throw std::invalid_argument("argmax over no actions");
  std::size_t best = 0;
  double best_v = get(s, actions[0]);
  for (std::size_t i = 1; i < actions.size(); ++i) {
    const double v = get(s, actions[i]);
    if (v > best_v) {
      best_v = v;
      best = i;
    }
  }
  return best;
}

void QTable::for_each(
    const std::function<void(const AgentState&, const AgentAction&, double)>& fn) const {
  std::map<std::uint64_t, double> ordered(values_.begin(), values_.end());
  for (const auto& [k, v] : ordered) {
    fn(unpack(static_cast<std::uint32_t>(k >> 32)), unpack(static_cast<std::uint32_t>(k)), v);
  }
}

// ---------------------------------------------------------------------------
// Rewards and TD

double td_update(QTable& q, const Transition& t, double eta, double gamma_q) {
  const double future = t.terminal ? 0.0 : q.max_value(t.next_state, t.legal_next);
  const double updated = (1.0 - eta) * q.get(t.state, t.action) + eta * (t.reward + gamma_q * future);
  q.set(t.state, t.action, updated);
  return updated;
}

std::vector<double> shaped_rewards(double total, int T) {
  if (T < 1) throw std::invalid_argument("shaped_rewards needs T >= 1");
  return std::vector<double>(static_cast<std::size_t>(T), total / T);
}

void ReplayBuffer::push(BlockArch arch, double reward) {
  entries_.push_back({std::move(arch), reward});
  if (capacity_ != 0 && entries_.size() > capacity_) entries_.pop_front();
}

std::vector<const ReplayBuffer::Entry*> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  std::vector<const Entry*> out;
  if (entries_.empty()) return out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(&entries_[rng.index(entries_.size())]);
  return out;
}

// ---------------------------------------------------------------------------
// Config

void SearchConfig::validate() const {
  if (!(eta > 0.0 && eta <= 1.0)) throw std::invalid_argument("eta must lie in (0, 1]");
  if (!(gamma_q > 0.0 && gamma_q <= 1.0)) throw std::invalid_argument("gamma_q must lie in (0, 1]");
  if (!(lambda >= 0.0)) throw std::invalid_argument("lambda must be non-negative");
  if (batch < 1) throw std::invalid_argument("batch must be at least 1");
  if (max_len < 1) throw std::invalid_argument("max_len must be at least 1");
  if (iterations < 0) throw std::invalid_argument("iterations must be non-negative");
  if (samples_per_iteration < 1) throw std::invalid_argument("samples_per_iteration must be >= 1");
  if (!(epsilon_start >= 0.0 && epsilon_start <= 1.0 && epsilon_end >= 0.0 &&
        epsilon_end <= epsilon_start)) {
    throw std::invalid_argument("epsilon schedule must satisfy 0 <= end <= start <= 1");
  }
  if (!(epsilon_decay_fraction > 0.0 && epsilon_decay_fraction <= 1.0)) {
    throw std::invalid_argument("epsilon_decay_fraction must lie in (0, 1]");
  }
  if (window < 1) throw std::invalid_argument("window must be at least 1");
  if (op_pool.empty()) throw std::invalid_argument("op pool is empty");
  if (std::none_of(op_pool.begin(), op_pool.end(), [](OpKind o) { return !o.binary(); })) {
    throw std::invalid_argument("op pool needs at least one unary op");
  }
}

double epsilon_at(const SearchConfig& config, int iteration) {
  const double decay_iters = config.epsilon_decay_fraction * config.iterations;
  if (decay_iters <= 0.0) return config.epsilon_end;
  const double frac = std::min(1.0, iteration / decay_iters);
  return config.epsilon_start + (config.epsilon_end - config.epsilon_start) * frac;
}

// ---------------------------------------------------------------------------
// Sampling

BlockArch sample_block(const QTable& q, double epsilon, const ActionSpace& space, Rng& rng,
                       int max_len) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw std::invalid_argument("epsilon outside [0,1]");
  BlockArch arch;
  arch.max_len = std::max(max_len, space.max_layers());
  AgentState state;
  for (int position = 1; position <= space.max_layers() + 1; ++position) {
    const auto& legal = space.legal(position);
    std::size_t pick;
    if (epsilon > 0.0 && rng.uniform() < epsilon) {
      pick = rng.index(legal.size());
    } else {
      pick = q.argmax(state, legal);
    }
    const AgentAction& a = legal[pick];
    if (!a) break;
    arch.push(*a);
    state = a;
  }
  return arch;
}

BlockArch greedy_block(const QTable& q, const ActionSpace& space, int max_len) {
  Rng unused(0);
  return sample_block(q, 0.0, space, unused, max_len);
}

std::vector<Transition> block_transitions(const BlockArch& arch, double total,
                                          const ActionSpace& space) {
  const int T = static_cast<int>(arch.size());
  const auto rewards = shaped_rewards(total, T);
  std::vector<Transition> out;
  out.reserve(arch.size() + 1);

  Transition first;
  first.state = std::nullopt;
  first.action = arch.layers[0].code();
  first.reward = 0.0;
  first.next_state = first.action;
  first.legal_next = space.legal(2);
  out.push_back(first);

  for (int t = 1; t <= T; ++t) {
    Transition tr;
    tr.state = arch.layers[static_cast<std::size_t>(t - 1)].code();
    tr.reward = rewards[static_cast<std::size_t>(t - 1)];
    if (t < T) {
      tr.action = arch.layers[static_cast<std::size_t>(t)].code();
      tr.next_state = tr.action;
      tr.legal_next = space.legal(t + 2);
    } else {
      tr.action = std::nullopt;
      tr.terminal = true;
    }
    out.push_back(tr);
  }
  return out;
}

void replay_update(QTable& q, const BlockArch& arch, double total, const ActionSpace& space,
                   double eta, double gamma_q) {
  const auto transitions = block_transitions(arch, total, space);
  for (auto it = transitions.rbegin(); it != transitions.rend(); ++it) {
    td_update(q, *it, eta, gamma_q);
  }
}

// ---------------------------------------------------------------------------
// Search loop

namespace {

std::vector<ScoredArch> top_k(const std::vector<ScoredArch>& history, std::size_t k,
                              double ScoredArch::*key) {
  // One entry per distinct architecture; the first evaluation represents it.
  std::map<std::string, const ScoredArch*> distinct;
  for (const auto& s : history) distinct.emplace(canonical_serialize(s.arch), &s);
  std::vector<const ScoredArch*> all;
  all.reserve(distinct.size());
  for (const auto& [_, p] : distinct) all.push_back(p);
  std::stable_sort(all.begin(), all.end(), [&](const ScoredArch* a, const ScoredArch* b) {
    if (a->*key != b->*key) return a->*key > b->*key;
    return a->sample_index < b->sample_index;
  });
  std::vector<ScoredArch> out;
  for (std::size_t i = 0; i < std::min(k, all.size()); ++i) out.push_back(*all[i]);
  return out;
}

}  // namespace

SearchResult run_search(const SearchConfig& config, Evaluator& evaluator,
                        const MirrorWeights* mirror, const SearchHooks& hooks) {
  config.validate();
  const ActionSpace space(config.op_pool, config.max_len);
  const int arch_max_len = mirror ? std::max(mirror->max_len, config.max_len)
                                  : std::max(kDefaultMaxLen, config.max_len);
  if (mirror && config.max_len > mirror->max_len) {
    throw std::invalid_argument("search max_len exceeds the mirror weights' max_len");
  }
  const LogSink log = hooks.log ? hooks.log : stderr_log();

  SearchResult result;
  ReplayBuffer replay(config.replay_capacity);
  Rng rng(config.seed);
  double best_reward = -std::numeric_limits<double>::infinity();
  double best_acc = -std::numeric_limits<double>::infinity();

  CachedEvaluator cached(evaluator);

  for (int it = 0; it < config.iterations; ++it) {
    const double eps = epsilon_at(config, it);
    std::vector<BlockArch> batch;
    batch.reserve(static_cast<std::size_t>(config.samples_per_iteration));
    for (int k = 0; k < config.samples_per_iteration; ++k) {
      batch.push_back(sample_block(result.q, eps, space, rng, arch_max_len));
    }

    double sum_reward = 0.0;
    double sum_topo = 0.0;
    std::size_t ok = 0;
    // Consume in sample order so results do not depend on the window.
    auto outcomes = parallel_window(cached, batch, config.window);
    std::sort(outcomes.begin(), outcomes.end(),
              [](const EvalOutcome& a, const EvalOutcome& b) { return a.index < b.index; });
    for (const EvalOutcome& o : outcomes) {
      const BlockArch& arch = batch[o.index];
      if (!o.accuracy) {
        ++result.failures;
        log("evaluation failed, skipping " + canonical_serialize(arch) + ": " + o.error);
        continue;
      }
      ScoredArch s;
      s.arch = arch;
      s.accuracy = *o.accuracy;
      s.topology = mirror ? mirror_stimuli(*mirror, arch) : 0.0;
      s.reward = combined_reward(s.accuracy, s.topology, config.lambda);
      s.sample_index = result.history.size() + 1;
      replay.push(arch, s.reward);
      best_reward = std::max(best_reward, s.reward);
      best_acc = std::max(best_acc, s.accuracy);
      sum_reward += s.reward;
      sum_topo += s.topology;
      ++ok;
      result.history.push_back(std::move(s));
    }

    for (const auto* entry : replay.sample(static_cast<std::size_t>(config.batch), rng)) {
      replay_update(result.q, entry->arch, entry->reward, space, config.eta, config.gamma_q);
    }

    LogRow row;
    row.iteration = it + 1;
    row.samples_total = result.history.size();
    row.epsilon = eps;
    row.best_reward = result.history.empty() ? 0.0 : best_reward;
    row.best_accuracy = result.history.empty() ? 0.0 : best_acc;
    row.mean_reward = ok ? sum_reward / static_cast<double>(ok) : 0.0;
    row.mean_topology = ok ? sum_topo / static_cast<double>(ok) : 0.0;
    result.log.push_back(row);
    if (hooks.on_iteration) hooks.on_iteration(row);
  }

  result.top_by_reward = top_k(result.history, config.top_k, &ScoredArch::reward);
  result.top_by_accuracy = top_k(result.history, config.top_k, &ScoredArch::accuracy);
  return result;
}

std::optional<std::size_t> samples_to_threshold(std::span<const ScoredArch> history,
                                                double threshold) {
  for (const auto& s : history) {
    if (s.accuracy >= threshold) return s.sample_index;
  }
  return std::nullopt;
}

void write_convergence_csv(std::ostream& os, std::span<const LogRow> log) {
  os << "iteration,samples_total,epsilon,best_R,mean_R,best_acc,mean_topo\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%zu,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.iteration,
                  r.samples_total, r.epsilon, r.best_reward, r.mean_reward, r.best_accuracy,
                  r.mean_topology);
    os << buf;
  }
}

}  // namespace mirrornas
