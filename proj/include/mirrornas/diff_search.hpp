#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "mirrornas/arch.hpp"
#include "mirrornas/mirror.hpp"
#include "mirrornas/rng.hpp"

namespace mirrornas {

/// Per-edge, per-op values laid out like AlphaCell::logits.
using EdgeValues = std::vector<std::vector<double>>;

/// Continuous architecture parameters: one logit per (edge, op) for every node
/// pair i < j, edges in lexicographic (i, j) order. Temperature is 1.
struct AlphaCell {
  int nodes = 2;
  std::vector<OpKind> ops;  // unary ops only
  EdgeValues logits;

  /// All logits zero. Throws std::invalid_argument for nodes < 2, an empty
  /// pool, or a binary op.
  static AlphaCell uniform(int nodes, std::vector<OpKind> ops);

  std::size_t num_edges() const { return logits.size(); }
  /// (i, j) of edge e.
  std::pair<int, int> edge(std::size_t e) const;
  /// Throws std::invalid_argument on shape mismatch or non-finite logits.
  void validate() const;
};

std::size_t edge_count(int nodes);

/// Per-edge softmax, stabilized by subtracting the edge maximum.
EdgeValues softmax_probs(const AlphaCell& cell);

/// Cell -> block embedding. Node 0 is the block input (code 1). For each node
/// j = 1.. in order, each incoming edge (i, j) becomes a layer applying its op
/// to node i; with several incoming edges the node is the left fold of Add
/// layers over them. The last node is the block's only sink. Throws ArchError
/// if the block exceeds max_len.
BlockArch embed_cell(int nodes, std::span<const OpKind> ops, std::span<const std::size_t> choice,
                     int max_len = kDefaultMaxLen);
int embedded_length(int nodes);

struct CellSample {
  std::vector<std::size_t> choice;  // op index per edge
  BlockArch arch;
  double probability = 0.0;  // product of the chosen edges' probabilities
};

CellSample sample_discrete(const AlphaCell& cell, const EdgeValues& probs, Rng& rng,
                           int max_len = kDefaultMaxLen);

struct TopologyEstimate {
  double value = 0.0;  // estimate of sum_k p_k F(m_k)
  EdgeValues grad;     // d value / d logits
};

/// K samples; value = mean F(m_k); grad = (1/K) sum_k F(m_k) (onehot_k - p)
/// per edge. Throws std::invalid_argument for K < 1.
TopologyEstimate topology_loss_and_grad(const AlphaCell& cell, const MirrorWeights& w, int K,
                                        Rng& rng);

/// Exact value and gradient by enumerating every op assignment. Throws
/// std::invalid_argument when there are more than 1e6 assignments.
TopologyEstimate exact_topology_objective(const AlphaCell& cell, const MirrorWeights& w);

/// Task loss callback: returns the loss and writes d loss / d logits into grad
/// (already shaped like the logits).
using TaskLoss = std::function<double(const AlphaCell& cell, EdgeValues& grad)>;

/// 0.5 * |logits - target|^2, minimized at target.
TaskLoss quadratic_task_loss(EdgeValues target);
/// Default target: edge e prefers op (e mod |ops|) with logit 1, others 0.
EdgeValues default_task_target(const AlphaCell& cell);

struct DiffOptions {
  double scale = 0.5;
  int steps = 500;
  double lr = 0.1;
  int K = 5;
  std::uint64_t seed = 0;
  bool exact_topology_gradient = false;
};

struct DiffTraceRow {
  int step = 0;
  double task_loss = 0.0;
  double topo_estimate = 0.0;
  double grad_norm = 0.0;  // norm of the combined update direction
};

struct DiffResult {
  AlphaCell cell;
  std::vector<DiffTraceRow> trace;
  bool diverged = false;  // stopped on non-finite logits; cell is the last finite one
};

/// logits <- logits - lr * (grad task - scale * grad topology). The topology
/// objective is a reward, so it is ascended. scale = 0 is plain gradient
/// descent on the task loss and draws no samples.
DiffResult run_diff_search(const AlphaCell& init, const MirrorWeights& w, const TaskLoss& task,
                           const DiffOptions& opts);

void write_diff_trace_csv(std::ostream& os, std::span<const DiffTraceRow> trace);

/// {"nodes":n,"ops":[...],"logits":[{"i":0,"j":1,"op":"dwconv3","value":x},...]}
std::string cell_to_json(const AlphaCell& cell);
AlphaCell cell_from_json(std::string_view text);  // throws ParseError

}  // namespace mirrornas
