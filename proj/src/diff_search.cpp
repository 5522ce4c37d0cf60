#include "mirrornas/diff_search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include <json.hpp>

namespace mirrornas {

std::size_t edge_count(int nodes) {
  return nodes < 2 ? 0 : static_cast<std::size_t>(nodes) * static_cast<std::size_t>(nodes - 1) / 2;
}

int embedded_length(int nodes) {
  // One layer per edge plus (j - 1) Adds for node j.
  return static_cast<int>(edge_count(nodes)) + (nodes - 1) * (nodes - 2) / 2;
}

AlphaCell AlphaCell::uniform(int nodes, std::vector<OpKind> ops) {
  AlphaCell cell;
  cell.nodes = nodes;
  cell.ops = std::move(ops);
  cell.logits.assign(edge_count(nodes), std::vector<double>(cell.ops.size(), 0.0));
  cell.validate();
  return cell;
}

std::pair<int, int> AlphaCell::edge(std::size_t e) const {
  for (int i = 0; i < nodes; ++i) {
    const auto span = static_cast<std::size_t>(nodes - 1 - i);
    if (e < span) return {i, i + 1 + static_cast<int>(e)};
    e -= span;
  }
  throw std::out_of_range("edge index out of range");
}

void AlphaCell::validate() const {
  if (nodes < 2) throw std::invalid_argument("a cell needs at least 2 nodes");
  if (ops.empty()) throw std::invalid_argument("cell op pool is empty");
  for (OpKind op : ops) {
    if (op.binary()) throw std::invalid_argument("cell ops must be unary, got " + op_token(op));
  }
  if (logits.size() != edge_count(nodes)) throw std::invalid_argument("logit edge count mismatch");
  for (const auto& edge : logits) {
    if (edge.size() != ops.size()) throw std::invalid_argument("logit op count mismatch");
    for (double v : edge) {
      if (!std::isfinite(v)) throw std::invalid_argument("non-finite logit");
    }
  }
}

EdgeValues softmax_probs(const AlphaCell& cell) {
  EdgeValues out;
  out.reserve(cell.logits.size());
  for (const auto& edge : cell.logits) {
    const double mx = *std::max_element(edge.begin(), edge.end());
    std::vector<double> p(edge.size());
    double total = 0.0;
    for (std::size_t o = 0; o < edge.size(); ++o) {
      p[o] = std::exp(edge[o] - mx);
      total += p[o];
    }
    for (double& v : p) v /= total;
    out.push_back(std::move(p));
  }
  return out;
}

BlockArch embed_cell(int nodes, std::span<const OpKind> ops, std::span<const std::size_t> choice,
                     int max_len) {
  if (choice.size() != edge_count(nodes)) throw std::invalid_argument("choice/edge count mismatch");
  if (embedded_length(nodes) > max_len) {
    throw ArchError("cell with " + std::to_string(nodes) + " nodes embeds into " +
                    std::to_string(embedded_length(nodes)) + " layers, above max_len " +
                    std::to_string(max_len));
  }
  BlockArch arch;
  arch.max_len = max_len;
  std::vector<int> node_code(static_cast<std::size_t>(nodes), 0);
  node_code[0] = kBlockInput;
  auto next_code = [&] { return static_cast<int>(arch.size()) + 2; };

  // Edge index of (i, j) in lexicographic order.
  auto edge_index = [&](int i, int j) {
    std::size_t e = 0;
    for (int a = 0; a < i; ++a) e += static_cast<std::size_t>(nodes - 1 - a);
    return e + static_cast<std::size_t>(j - i - 1);
  };

  for (int j = 1; j < nodes; ++j) {
    int acc = 0;
    for (int i = 0; i < j; ++i) {
      const std::size_t c = choice[edge_index(i, j)];
      if (c >= ops.size()) throw std::invalid_argument("op choice out of range");
      const int code = next_code();
      arch.push({ops[c], node_code[static_cast<std::size_t>(i)], kNoPred});
      if (acc == 0) {
        acc = code;
      } else {
        const int sum = next_code();
        arch.push({ops::kAdd, acc, code});
        acc = sum;
      }
    }
    node_code[static_cast<std::size_t>(j)] = acc;
  }
  return arch;
}

CellSample sample_discrete(const AlphaCell& cell, const EdgeValues& probs, Rng& rng, int max_len) {
  CellSample s;
  s.probability = 1.0;
  s.choice.reserve(probs.size());
  for (const auto& p : probs) {
    const std::size_t c = rng.categorical(p);
    s.choice.push_back(c);
    s.probability *= p[c];
  }
  s.arch = embed_cell(cell.nodes, cell.ops, s.choice, max_len);
  return s;
}

namespace {

EdgeValues zeros_like(const AlphaCell& cell) {
  return EdgeValues(cell.logits.size(), std::vector<double>(cell.ops.size(), 0.0));
}

// acc += scale * (onehot(choice) - p), edge by edge.
void add_score(EdgeValues& acc, const EdgeValues& p, std::span<const std::size_t> choice,
               double scale) {
  for (std::size_t e = 0; e < p.size(); ++e) {
    for (std::size_t o = 0; o < p[e].size(); ++o) {
      acc[e][o] += scale * ((o == choice[e] ? 1.0 : 0.0) - p[e][o]);
    }
  }
}

}  // namespace

TopologyEstimate topology_loss_and_grad(const AlphaCell& cell, const MirrorWeights& w, int K,
                                        Rng& rng) {
  if (K < 1) throw std::invalid_argument("K must be at least 1");
  cell.validate();
  const EdgeValues p = softmax_probs(cell);
  TopologyEstimate out;
  out.grad = zeros_like(cell);
  for (int k = 0; k < K; ++k) {
    const CellSample s = sample_discrete(cell, p, rng, w.max_len);
    const double f = mirror_stimuli(w, s.arch);
    out.value += f;
    add_score(out.grad, p, s.choice, f);
  }
  out.value /= K;
  for (auto& edge : out.grad) {
    for (double& v : edge) v /= K;
  }
  return out;
}

TopologyEstimate exact_topology_objective(const AlphaCell& cell, const MirrorWeights& w) {
  cell.validate();
  const std::size_t E = cell.num_edges();
  const std::size_t n_ops = cell.ops.size();
  double total = 1.0;
  for (std::size_t e = 0; e < E; ++e) total *= static_cast<double>(n_ops);
  if (total > 1e6) throw std::invalid_argument("too many op assignments to enumerate");

  const EdgeValues p = softmax_probs(cell);
  TopologyEstimate out;
  out.grad = zeros_like(cell);
  std::vector<std::size_t> choice(E, 0);
  while (true) {
    double pk = 1.0;
    for (std::size_t e = 0; e < E; ++e) pk *= p[e][choice[e]];
    const double f = mirror_stimuli(w, embed_cell(cell.nodes, cell.ops, choice, w.max_len));
    out.value += pk * f;
    add_score(out.grad, p, choice, pk * f);

    std::size_t e = 0;
    while (e < E && ++choice[e] == n_ops) choice[e++] = 0;
    if (e == E) break;
  }
  return out;
}

TaskLoss quadratic_task_loss(EdgeValues target) {
  return [target = std::move(target)](const AlphaCell& cell, EdgeValues& grad) {
    if (target.size() != cell.logits.size()) throw std::invalid_argument("task target shape mismatch");
    double loss = 0.0;
    for (std::size_t e = 0; e < target.size(); ++e) {
      if (target[e].size() != cell.logits[e].size()) {
        throw std::invalid_argument("task target shape mismatch");
      }
      for (std::size_t o = 0; o < target[e].size(); ++o) {
        const double d = cell.logits[e][o] - target[e][o];
        loss += 0.5 * d * d;
        grad[e][o] = d;
      }
    }
    return loss;
  };
}

EdgeValues default_task_target(const AlphaCell& cell) {
  EdgeValues t = zeros_like(cell);
  for (std::size_t e = 0; e < t.size(); ++e) t[e][e % cell.ops.size()] = 1.0;
  return t;
}

DiffResult run_diff_search(const AlphaCell& init, const MirrorWeights& w, const TaskLoss& task,
                           const DiffOptions& opts) {
  init.validate();
  if (opts.steps < 0) throw std::invalid_argument("steps must be non-negative");
  if (opts.K < 1) throw std::invalid_argument("K must be at least 1");
  DiffResult out;
  out.cell = init;
  Rng rng(opts.seed);
  for (int step = 1; step <= opts.steps; ++step) {
    EdgeValues g = zeros_like(out.cell);
    DiffTraceRow row;
    row.step = step;
    row.task_loss = task(out.cell, g);
    if (opts.scale != 0.0) {
      const TopologyEstimate topo = opts.exact_topology_gradient
                                        ? exact_topology_objective(out.cell, w)
                                        : topology_loss_and_grad(out.cell, w, opts.K, rng);
      row.topo_estimate = topo.value;
      for (std::size_t e = 0; e < g.size(); ++e) {
        for (std::size_t o = 0; o < g[e].size(); ++o) g[e][o] -= opts.scale * topo.grad[e][o];
      }
    }
    AlphaCell next = out.cell;
    double sq = 0.0;
    bool finite = std::isfinite(row.task_loss) && std::isfinite(row.topo_estimate);
    for (std::size_t e = 0; e < g.size(); ++e) {
      for (std::size_t o = 0; o < g[e].size(); ++o) {
        sq += g[e][o] * g[e][o];
        next.logits[e][o] -= opts.lr * g[e][o];
        finite = finite && std::isfinite(next.logits[e][o]);
      }
    }
    row.grad_norm = std::sqrt(sq);
    out.trace.push_back(row);
    if (!finite) {
      out.diverged = true;
      break;
    }
    out.cell = std::move(next);
  }
  return out;
}

void write_diff_trace_csv(std::ostream& os, std::span<const DiffTraceRow> trace) {
  os << "step,task_loss,topo_estimate,grad_norm\n";
  char buf[160];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%d,%.17g,%.17g,%.17g\n", r.step, r.task_loss, r.topo_estimate,
                  r.grad_norm);
    os << buf;
  }
}

std::string cell_to_json(const AlphaCell& cell) {
  nlohmann::ordered_json doc;
  doc["nodes"] = cell.nodes;
  auto& ops = doc["ops"] = nlohmann::ordered_json::array();
  for (OpKind op : cell.ops) ops.push_back(op_token(op));
  auto& logits = doc["logits"] = nlohmann::ordered_json::array();
  for (std::size_t e = 0; e < cell.num_edges(); ++e) {
    const auto [i, j] = cell.edge(e);
    for (std::size_t o = 0; o < cell.ops.size(); ++o) {
      logits.push_back({{"i", i}, {"j", j}, {"op", op_token(cell.ops[o])}, {"value", cell.logits[e][o]}});
    }
  }
  return doc.dump(2) + "\n";
}

AlphaCell cell_from_json(std::string_view text) {
  AlphaCell cell;
  try {
    const auto doc = nlohmann::json::parse(text);
    cell.nodes = doc.at("nodes").get<int>();
    if (cell.nodes < 2) throw ParseError("a cell needs at least 2 nodes");
    for (const auto& tok : doc.at("ops")) cell.ops.push_back(parse_op_token(tok.get<std::string>()));
    cell.logits.assign(edge_count(cell.nodes), std::vector<double>(cell.ops.size(), 0.0));
    std::vector<std::vector<bool>> seen(cell.logits.size(), std::vector<bool>(cell.ops.size(), false));
    for (const auto& entry : doc.at("logits")) {
      const int i = entry.at("i").get<int>();
      const int j = entry.at("j").get<int>();
      if (i < 0 || j <= i || j >= cell.nodes) throw ParseError("logit edge out of range");
      const OpKind op = parse_op_token(entry.at("op").get<std::string>());
      const auto it = std::find(cell.ops.begin(), cell.ops.end(), op);
      if (it == cell.ops.end()) throw ParseError("logit op not in the cell's op list");
      std::size_t e = 0;
      for (int a = 0; a < i; ++a) e += static_cast<std::size_t>(cell.nodes - 1 - a);
      e += static_cast<std::size_t>(j - i - 1);
      const auto o = static_cast<std::size_t>(it - cell.ops.begin());
      if (seen[e][o]) throw ParseError("duplicate logit entry");
      seen[e][o] = true;
      cell.logits[e][o] = entry.at("value").get<double>();
    }
    for (const auto& row : seen) {
      if (std::find(row.begin(), row.end(), false) != row.end()) throw ParseError("missing logit entry");
    }
    cell.validate();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad cell file: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ParseError(std::string("bad cell file: ") + e.what());
  }
  return cell;
}

}  // namespace mirrornas
