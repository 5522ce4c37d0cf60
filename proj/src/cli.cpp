#include "mirrornas/cli.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <map>
#include <sstream>
#include <variant>

#include <CLI11.hpp>
#include <json.hpp>

#include "mirrornas/arch.hpp"
#include "mirrornas/diff_search.hpp"
#include "mirrornas/eval.hpp"
#include "mirrornas/features.hpp"
#include "mirrornas/mirror.hpp"
#include "mirrornas/qagent.hpp"

#ifndef MIRRORNAS_VERSION
#define MIRRORNAS_VERSION "0.0.0-unknown"
#endif

namespace fs = std::filesystem;

namespace mirrornas {

std::string version_string() { return MIRRORNAS_VERSION; }

namespace {

// Usage or configuration problem; maps to kExitUsage.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Run stopped before producing a result (diverged descent).
class AbortedRun : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
constexpr int kExitAborted = 1;

// Every key is both a flag (--dashed-name) and a config-file key.
struct RunConfig {
  std::string config;
  std::string seed;
  std::string expert = "resnet_block";
  std::string ops = "all";
  double gamma = kDefaultGamma;
  int feature_max_len = kDefaultMaxLen;
  std::string out;
  std::string weights = "train";

  double irl_epsilon = 0.01;
  int irl_max_iterations = 50;
  int irl_max_layers = 0;  // 0: use max_len
  std::string inner = "exact";
  std::string trace;

  std::string mode = "qsearch";
  double lambda = 30.0;
  double eta = 0.01;
  double gamma_q = 0.9;
  int batch = 64;
  int max_len = kDefaultMaxLen;
  int iterations = 180;
  int samples_per_iteration = 64;
  double epsilon_start = 1.0;
  double epsilon_end = 0.1;
  double epsilon_decay_fraction = 0.9;
  std::uint64_t replay_capacity = 2000;
  std::uint64_t window = 1;
  std::uint64_t top_k = 4;
  std::string threshold = "auto";

  std::string evaluator = "surrogate";
  std::string plugin;
  double plugin_timeout = 600.0;
  double noise_amp = 1.0;
  std::uint64_t noise_seed = 0;
  double base = 50.0;
  double sim_weight = 40.0;
  double len_penalty = 0.8;

  std::string lambdas = "0,30,60";
  int seeds = 5;

  int nodes = 3;
  int steps = 500;
  double lr = 0.1;
  int k = 5;
  double scale = 0.5;
  bool exact_gradient = false;
  std::string cell;

  std::string arch;
};

using FieldRef = std::variant<double*, int*, std::uint64_t*, std::string*, bool*>;

struct Field {
  std::string name;  // config-file key; flag is --name with '_' -> '-'
  FieldRef ref;
  std::string help;
};

std::vector<Field> fields(RunConfig& c) {
  return {
      {"config", &c.config, "JSON config file; flags override its keys"},
      {"seed", &c.seed, "RNG seed (fallback: IRLAS_SEED, then 0)"},
      {"expert", &c.expert, "expert block: resnet_block | plain_chain"},
      {"ops", &c.ops, "op pool: 'all' or comma list such as dwconv3,identity,add"},
      {"gamma", &c.gamma, "feature discount"},
      {"feature_max_len", &c.feature_max_len, "feature normalizer for predecessor codes"},
      {"out", &c.out, "output file or directory"},
      {"weights", &c.weights, "mirror weights file, 'train', or 'none'"},
      {"irl_epsilon", &c.irl_epsilon, "IRL stopping margin"},
      {"irl_max_iterations", &c.irl_max_iterations, "IRL outer iteration cap"},
      {"irl_max_layers", &c.irl_max_layers, "IRL inner length cap (0: max_len)"},
      {"inner", &c.inner, "IRL inner solver: exact | qlearning"},
      {"trace", &c.trace, "IRL trace CSV path"},
      {"mode", &c.mode, "qsearch | diffsearch | irl-only"},
      {"lambda", &c.lambda, "topology reward weight"},
      {"eta", &c.eta, "Q learning rate"},
      {"gamma_q", &c.gamma_q, "Q discount"},
      {"batch", &c.batch, "replay draws per iteration"},
      {"max_len", &c.max_len, "block length cap"},
      {"iterations", &c.iterations, "search iterations"},
      {"samples_per_iteration", &c.samples_per_iteration, "blocks sampled per iteration"},
      {"epsilon_start", &c.epsilon_start, "initial exploration rate"},
      {"epsilon_end", &c.epsilon_end, "final exploration rate"},
      {"epsilon_decay_fraction", &c.epsilon_decay_fraction, "fraction of iterations spent decaying"},
      {"replay_capacity", &c.replay_capacity, "replay buffer size (0: unbounded)"},
      {"window", &c.window, "evaluations in flight"},
      {"top_k", &c.top_k, "architectures kept per ranking"},
      {"threshold", &c.threshold, "accuracy threshold, 'oracle' (enumeration max), 'auto' (oracle when enumerable), or 'none'"},
      {"evaluator", &c.evaluator, "surrogate | external (or 'external <command>')"},
      {"plugin", &c.plugin, "external evaluator command line"},
      {"plugin_timeout", &c.plugin_timeout, "seconds per external evaluation"},
      {"noise_amp", &c.noise_amp, "surrogate noise amplitude"},
      {"noise_seed", &c.noise_seed, "surrogate noise seed"},
      {"base", &c.base, "surrogate base accuracy"},
      {"sim_weight", &c.sim_weight, "surrogate similarity weight"},
      {"len_penalty", &c.len_penalty, "surrogate per-layer penalty"},
      {"lambdas", &c.lambdas, "comma list of lambda values"},
      {"seeds", &c.seeds, "paired seeds per lambda"},
      {"nodes", &c.nodes, "cell node count"},
      {"steps", &c.steps, "descent steps"},
      {"lr", &c.lr, "descent step size"},
      {"k", &c.k, "architectures sampled per gradient estimate"},
      {"scale", &c.scale, "topology term weight"},
      {"exact_gradient", &c.exact_gradient, "use the enumerated topology gradient"},
      {"cell", &c.cell, "initial cell file (default: uniform logits)"},
      {"arch", &c.arch, "architecture file"},
  };
}

std::string flag_name(const std::string& key) {
  std::string f = "--" + key;
  std::replace(f.begin(), f.end(), '_', '-');
  return f;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw UsageError("cannot write " + path.string());
  out << content;
  out.flush();
  if (!out) throw UsageError("failed writing " + path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw UsageError("cannot create directory " + dir.string());
}

void apply_config_file(RunConfig& c, const std::string& path) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw UsageError("malformed config " + path + ": " + e.what());
  }
  if (!doc.is_object()) throw UsageError("config " + path + " must be a JSON object");
  auto table = fields(c);
  for (const auto& [key, value] : doc.items()) {
    if (key == "version" || key == "command" || key == "config") continue;
    const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.name == key; });
    if (it == table.end()) throw UsageError("unknown config key '" + key + "'");
    try {
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, std::string>) {
              if (value.is_array()) {
                std::string joined;
                for (const auto& v : value) {
                  if (!joined.empty()) joined += ',';
                  joined += v.is_string() ? v.get<std::string>() : v.dump();
                }
                *p = joined;
              } else if (value.is_string()) {
                *p = value.get<std::string>();
              } else {
                *p = value.dump();
              }
            } else {
              *p = value.get<T>();
            }
          },
          it->ref);
    } catch (const nlohmann::json::exception& e) {
      throw UsageError("bad value for config key '" + key + "': " + e.what());
    }
  }
}

nlohmann::ordered_json config_to_json(RunConfig& c) {
  nlohmann::ordered_json doc;
  for (const auto& f : fields(c)) {
    if (f.name == "config") continue;
    std::visit([&](auto* p) { doc[f.name] = *p; }, f.ref);
  }
  return doc;
}

std::uint64_t resolve_seed(const RunConfig& c) {
  std::string text = c.seed;
  if (text.empty()) {
    const char* env = std::getenv("IRLAS_SEED");
    if (env == nullptr || *env == '\0') return 0;
    text = env;
  }
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
  if (errno != 0 || end == text.c_str() || *end != '\0' || text.front() == '-') {
    throw UsageError("seed must be a non-negative integer, got '" + text + "'");
  }
  return v;
}

std::vector<std::string> split(const std::string& text, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(text);
  while (std::getline(ss, cur, sep)) {
    const auto b = cur.find_first_not_of(" \t");
    const auto e = cur.find_last_not_of(" \t");
    if (b != std::string::npos) out.push_back(cur.substr(b, e - b + 1));
  }
  return out;
}

std::vector<OpKind> resolve_pool(const std::string& text) {
  if (text == "all") return full_op_pool();
  std::vector<OpKind> pool;
  for (const auto& tok : split(text, ',')) {
    OpKind op;
    try {
      op = parse_op_token(tok);
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
    if (std::find(pool.begin(), pool.end(), op) == pool.end()) pool.push_back(op);
  }
  if (pool.empty()) throw UsageError("op pool is empty");
  return pool;
}

std::vector<double> resolve_lambdas(const std::string& text) {
  std::vector<double> out;
  for (const auto& tok : split(text, ',')) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0' || !std::isfinite(v)) {
      throw UsageError("bad lambda value '" + tok + "'");
    }
    out.push_back(v);
  }
  if (out.empty()) throw UsageError("lambda list is empty");
  return out;
}

ExpertBlock resolve_expert(const RunConfig& c) {
  try {
    return expert_library(c.expert, std::max(c.feature_max_len, 3));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
}

IrlConfig irl_config(const RunConfig& c, const std::vector<OpKind>& pool) {
  IrlConfig irl;
  irl.epsilon = c.irl_epsilon;
  irl.max_iterations = c.irl_max_iterations;
  irl.gamma = c.gamma;
  irl.op_pool = pool;
  irl.max_layers = c.irl_max_layers > 0 ? c.irl_max_layers : c.max_len;
  irl.max_len = c.feature_max_len;
  if (c.inner == "exact") {
    irl.inner = InnerSolver::Exact;
  } else if (c.inner == "qlearning") {
    irl.inner = InnerSolver::QLearning;
  } else {
    throw UsageError("inner solver must be exact or qlearning");
  }
  return irl;
}

// Weights from file, freshly trained, or none.
std::optional<MirrorWeights> resolve_weights(const RunConfig& c, const std::vector<OpKind>& pool,
                                             std::ostream& err) {
  if (c.weights == "none") return std::nullopt;
  if (c.weights == "train") {
    const IrlResult r = train_mirror(resolve_expert(c), irl_config(c, pool));
    err << "trained mirror weights: delta " << r.weights.final_margin << " after "
        << r.trace.iterations.size() << " iterations\n";
    return r.weights;
  }
  try {
    return weights_from_json(read_file(c.weights));
  } catch (const ParseError& e) {
    throw UsageError(c.weights + ": " + e.what());
  }
}

SurrogateParams surrogate_params(const RunConfig& c) {
  SurrogateParams p = SurrogateParams::for_expert(resolve_expert(c).arch, c.gamma, c.feature_max_len);
  p.base = c.base;
  p.sim_weight = c.sim_weight;
  p.len_penalty = c.len_penalty;
  p.noise_amp = c.noise_amp;
  p.noise_seed = c.noise_seed;
  return p;
}

bool is_external(const RunConfig& c) { return c.evaluator.rfind("external", 0) == 0; }

std::unique_ptr<Evaluator> make_evaluator(const RunConfig& c, std::ostream& err) {
  if (c.evaluator == "surrogate") return std::make_unique<SurrogateEvaluator>(surrogate_params(c));
  if (!is_external(c)) throw UsageError("evaluator must be surrogate or external");
  std::string command = c.plugin;
  if (c.evaluator.size() > 8) {
    if (c.evaluator[8] != ' ') throw UsageError("evaluator must be surrogate or external");
    command = c.evaluator.substr(9);
  }
  PluginOptions opts;
  std::istringstream ss(command);
  for (std::string tok; ss >> tok;) opts.argv.push_back(tok);
  if (opts.argv.empty()) throw UsageError("external evaluator needs a plugin command");
  if (!(c.plugin_timeout > 0.0)) throw UsageError("plugin timeout must be positive");
  opts.timeout_s = c.plugin_timeout;
  opts.instances = std::max<std::size_t>(1, c.window);
  opts.log = [&err](const std::string& m) { err << "[evaluator] " << m << '\n'; };
  auto ev = std::make_unique<ExternalEvaluator>(std::move(opts));
  ev->probe();
  return ev;
}

SearchConfig search_config(const RunConfig& c, const std::vector<OpKind>& pool, std::uint64_t seed) {
  SearchConfig s;
  s.eta = c.eta;
  s.gamma_q = c.gamma_q;
  s.lambda = c.lambda;
  s.batch = c.batch;
  s.max_len = c.max_len;
  s.iterations = c.iterations;
  s.samples_per_iteration = c.samples_per_iteration;
  s.epsilon_start = c.epsilon_start;
  s.epsilon_end = c.epsilon_end;
  s.epsilon_decay_fraction = c.epsilon_decay_fraction;
  s.seed = seed;
  s.replay_capacity = c.replay_capacity;
  s.window = c.window;
  s.top_k = c.top_k;
  s.op_pool = pool;
  try {
    s.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return s;
}

constexpr double kMaxEnumeratedBlocks = 2e6;

std::optional<double> resolve_threshold(const RunConfig& c, const std::vector<OpKind>& pool) {
  if (c.threshold.empty() || c.threshold == "none") return std::nullopt;
  if (c.threshold == "auto") {
    if (c.evaluator != "surrogate" || count_blocks(c.max_len, pool) > kMaxEnumeratedBlocks) return std::nullopt;
  } else if (c.threshold != "oracle") {
    char* end = nullptr;
    const double v = std::strtod(c.threshold.c_str(), &end);
    if (end == c.threshold.c_str() || *end != '\0' || !std::isfinite(v)) {
      throw UsageError("threshold must be a number, 'oracle', 'auto', or 'none'");
    }
    return v;
  }
  if (c.evaluator != "surrogate") throw UsageError("threshold 'oracle' needs the surrogate evaluator");
  if (count_blocks(c.max_len, pool) > kMaxEnumeratedBlocks) {
    throw UsageError("space too large for an oracle threshold; give a number");
  }
  const SurrogateParams p = surrogate_params(c);
  double best = -std::numeric_limits<double>::infinity();
  for_each_block(
      c.max_len, pool, [&](const BlockArch& b) { best = std::max(best, surrogate_accuracy(b, p)); },
      std::max(c.max_len, c.feature_max_len));
  return best;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

// ---------------------------------------------------------------------------
// Commands

int cmd_irl_train(RunConfig& c, std::ostream& out, std::ostream& err) {
  if (c.out.empty()) throw UsageError("irl-train needs --out");
  const auto pool = resolve_pool(c.ops);
  const ExpertBlock expert = resolve_expert(c);
  const IrlResult r = train_mirror(expert, irl_config(c, pool));
  write_file(c.out, weights_to_json(r.weights));
  std::ostringstream trace;
  write_irl_trace_csv(trace, r.trace);
  write_file(c.trace.empty() ? c.out + ".trace.csv" : c.trace, trace.str());
  out << "iterations " << r.trace.iterations.size() << " delta " << num(r.weights.final_margin)
      << " converged " << (r.trace.converged ? "yes" : "no") << '\n';
  if (!r.trace.converged) err << "warning: iteration cap reached before delta <= epsilon\n";
  return kExitOk;
}

void write_top(const fs::path& dir, const std::string& kind, const std::vector<ScoredArch>& top,
               std::ostream& summary) {
  for (std::size_t i = 0; i < top.size(); ++i) {
    char stem[64];
    std::snprintf(stem, sizeof stem, "top_%s_%02zu", kind.c_str(), i + 1);
    const std::string canon = canonical_serialize(top[i].arch);
    write_file(dir / (std::string(stem) + ".json"), canon + "\n");
    write_file(dir / (std::string(stem) + ".dot"), to_dot(top[i].arch, stem));
    summary << kind << ',' << i + 1 << ',' << num(top[i].reward) << ',' << num(top[i].accuracy) << ','
            << num(top[i].topology) << ',' << top[i].sample_index << ',' << csv_quote(canon) << '\n';
  }
}

int cmd_diff_search(RunConfig& c, std::ostream& out, std::ostream& err);

int cmd_search(RunConfig& c, std::ostream& out, std::ostream& err) {
  if (c.mode == "irl-only") return cmd_irl_train(c, out, err);
  if (c.mode == "diffsearch") return cmd_diff_search(c, out, err);
  if (c.mode != "qsearch") throw UsageError("mode must be qsearch, diffsearch, or irl-only");
  if (c.out.empty()) throw UsageError("search needs --out <directory>");
  const auto pool = resolve_pool(c.ops);
  const std::uint64_t seed = resolve_seed(c);
  const SearchConfig sc = search_config(c, pool, seed);
  const auto threshold = resolve_threshold(c, pool);
  auto mirror = resolve_weights(c, pool, err);
  if (!mirror && c.lambda != 0.0) throw UsageError("lambda > 0 needs mirror weights");
  if (mirror && mirror->max_len < c.max_len) {
    throw UsageError("max_len exceeds the mirror weights' feature normalizer");
  }
  const fs::path dir(c.out);
  ensure_dir(dir);
  auto evaluator = make_evaluator(c, err);

  SearchHooks hooks;
  hooks.log = [&err](const std::string& m) { err << m << '\n'; };
  const SearchResult r = run_search(sc, *evaluator, mirror ? &*mirror : nullptr, hooks);

  std::ostringstream conv;
  write_convergence_csv(conv, r.log);
  write_file(dir / "convergence.csv", conv.str());
  std::ostringstream summary;
  summary << "ranking,rank,reward,accuracy,topology,sample_index,arch\n";
  write_top(dir, "reward", r.top_by_reward, summary);
  write_top(dir, "accuracy", r.top_by_accuracy, summary);
  write_file(dir / "summary.csv", summary.str());
  if (mirror) write_file(dir / "weights.json", weights_to_json(*mirror));

  auto manifest = config_to_json(c);
  manifest["seed"] = std::to_string(seed);
  manifest["out"] = c.out;
  if (mirror && c.weights == "train") manifest["weights"] = (dir / "weights.json").string();
  nlohmann::ordered_json full;
  full["command"] = "search";
  full["version"] = version_string();
  full.update(manifest);
  write_file(dir / "manifest.json", full.dump(2) + "\n");

  out << "samples " << r.history.size() << " failures " << r.failures;
  if (!r.top_by_reward.empty()) {
    out << " best_R " << num(r.top_by_reward.front().reward) << " best_acc "
        << num(r.top_by_accuracy.front().accuracy);
  }
  if (threshold) {
    const auto hit = samples_to_threshold(r.history, *threshold);
    out << " samples_to_threshold " << (hit ? std::to_string(*hit) : std::string("never"));
  }
  out << '\n';
  return kExitOk;
}

int cmd_diff_search(RunConfig& c, std::ostream& out, std::ostream& err) {
  if (c.out.empty()) throw UsageError("diff-search needs --out <directory>");
  const auto pool = resolve_pool(c.ops);
  std::vector<OpKind> unary;
  for (OpKind op : pool) {
    if (!op.binary()) unary.push_back(op);
  }
  if (unary.empty()) throw UsageError("diff-search needs at least one unary op");
  AlphaCell init;
  try {
    init = c.cell.empty() ? AlphaCell::uniform(c.nodes, unary) : cell_from_json(read_file(c.cell));
  } catch (const ParseError& e) {
    throw UsageError(c.cell + ": " + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  auto mirror = resolve_weights(c, pool, err);
  if (!mirror) {
    if (c.scale != 0.0) throw UsageError("a nonzero scale needs mirror weights");
    mirror = MirrorWeights{};
  }
  if (embedded_length(init.nodes) > mirror->max_len) {
    throw UsageError("cell embeds into more layers than the weights' max_len");
  }
  DiffOptions opts;
  opts.scale = c.scale;
  opts.steps = c.steps;
  opts.lr = c.lr;
  opts.K = c.k;
  opts.seed = resolve_seed(c);
  opts.exact_topology_gradient = c.exact_gradient;
  if (opts.steps < 0 || opts.K < 1) throw UsageError("steps must be >= 0 and k >= 1");

  const DiffResult r =
      run_diff_search(init, *mirror, quadratic_task_loss(default_task_target(init)), opts);
  const fs::path dir(c.out);
  ensure_dir(dir);
  std::ostringstream trace;
  write_diff_trace_csv(trace, r.trace);
  write_file(dir / "trace.csv", trace.str());
  write_file(dir / "cell.json", cell_to_json(r.cell));
  if (r.diverged) throw AbortedRun("descent diverged at step " + std::to_string(r.trace.back().step));
  const auto probs = softmax_probs(r.cell);
  std::vector<std::size_t> mode(probs.size());
  for (std::size_t e = 0; e < probs.size(); ++e) {
    mode[e] = static_cast<std::size_t>(std::max_element(probs[e].begin(), probs[e].end()) - probs[e].begin());
  }
  out << "steps " << r.trace.size() << " most likely block "
      << canonical_serialize(embed_cell(r.cell.nodes, r.cell.ops, mode, mirror->max_len)) << '\n';
  return kExitOk;
}

// Expert variants for the modification diagnostic. Codes: 1 = block input,
// t + 1 = layer t.
std::vector<std::pair<std::string, BlockArch>> modified_experts(const ExpertBlock& expert) {
  if (expert.name != "resnet_block") throw UsageError("modify-diag is defined for resnet_block");
  const int n = expert.arch.max_len;
  using ops::kAdd;
  using ops::kDwConv3;
  const std::vector<LayerCode> conv_before{{kDwConv3, 1, 0}, {kDwConv3, 2, 0}, {kDwConv3, 3, 0}, {kAdd, 2, 4}};
  const std::vector<LayerCode> conv_after{{kDwConv3, 1, 0}, {kDwConv3, 2, 0}, {kAdd, 1, 3}, {kDwConv3, 4, 0}};
  const std::vector<LayerCode> no_shortcut{{kDwConv3, 1, 0}, {kDwConv3, 2, 0}};
  return {{"expert", expert.arch},
          {"conv_before_residual", BlockArch::from_codes(conv_before, n)},
          {"conv_after_residual", BlockArch::from_codes(conv_after, n)},
          {"shortcut_removed", BlockArch::from_codes(no_shortcut, n)}};
}

int cmd_modify_diag(RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto pool = resolve_pool(c.ops);
  const ExpertBlock expert = resolve_expert(c);
  auto mirror = resolve_weights(c, pool, err);
  if (!mirror) throw UsageError("modify-diag needs mirror weights");
  const Feature mu_e = feature_count(expert.arch, mirror->gamma, mirror->max_len);
  const double f_e = mirror_stimuli(*mirror, expert.arch);
  std::ostringstream csv;
  csv << "variant,mu_delta_norm,topology_delta,topology,arch\n";
  for (auto& [name, arch] : modified_experts(expert)) {
    arch.max_len = std::max(arch.max_len, mirror->max_len);
    const Feature mu = feature_count(arch, mirror->gamma, mirror->max_len);
    const double f = mirror_stimuli(*mirror, arch);
    csv << name << ',' << num(norm2(mu - mu_e)) << ',' << num(std::abs(f - f_e)) << ',' << num(f) << ','
        << csv_quote(canonical_serialize(arch)) << '\n';
  }
  if (c.out.empty()) {
    out << csv.str();
  } else {
    write_file(c.out, csv.str());
  }
  return kExitOk;
}

int cmd_lambda_sweep(RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto lambdas = resolve_lambdas(c.lambdas);
  if (c.seeds < 1) throw UsageError("seeds must be at least 1");
  const auto pool = resolve_pool(c.ops);
  const std::uint64_t seed0 = resolve_seed(c);
  const auto threshold = resolve_threshold(c, pool);
  const bool need_mirror = std::any_of(lambdas.begin(), lambdas.end(), [](double l) { return l != 0.0; });
  auto mirror = resolve_weights(c, pool, err);
  if (!mirror && need_mirror) throw UsageError("lambda > 0 needs mirror weights");
  auto evaluator = make_evaluator(c, err);

  std::ostringstream csv;
  csv << "lambda,seed,best_R,best_acc,best_topo,samples_to_threshold\n";
  for (double lambda : lambdas) {
    for (int s = 0; s < c.seeds; ++s) {
      RunConfig rc = c;
      rc.lambda = lambda;
      const std::uint64_t seed = seed0 + static_cast<std::uint64_t>(s);
      const SearchConfig sc = search_config(rc, pool, seed);
      SearchHooks hooks;
      hooks.log = [&err](const std::string& m) { err << m << '\n'; };
      const SearchResult r = run_search(sc, *evaluator, mirror ? &*mirror : nullptr, hooks);
      double best_topo = -std::numeric_limits<double>::infinity();
      for (const auto& h : r.history) best_topo = std::max(best_topo, h.topology);
      csv << num(lambda) << ',' << seed << ',';
      if (r.history.empty()) {
        csv << ",,,";
      } else {
        csv << num(r.top_by_reward.front().reward) << ',' << num(r.top_by_accuracy.front().accuracy) << ','
            << num(best_topo) << ',';
      }
      if (threshold) {
        if (const auto hit = samples_to_threshold(r.history, *threshold)) csv << *hit;
      }
      csv << '\n';
    }
  }
  if (c.out.empty()) {
    out << csv.str();
  } else {
    write_file(c.out, csv.str());
  }
  return kExitOk;
}

int cmd_export_dot(RunConfig& c, std::ostream& out, std::ostream&) {
  if (c.arch.empty()) throw UsageError("export-dot needs an architecture file");
  BlockArch arch;
  try {
    arch = parse_arch(read_file(c.arch), std::max(c.max_len, kDefaultMaxLen));
  } catch (const ParseError& e) {
    throw UsageError(c.arch + ": " + e.what());
  }
  const std::string dot = to_dot(arch);
  if (c.out.empty()) {
    out << dot;
  } else {
    write_file(c.out, dot);
  }
  return kExitOk;
}

int cmd_enumerate(RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto pool = resolve_pool(c.ops);
  if (c.max_len < 1) throw UsageError("max_len must be at least 1");
  if (count_blocks(c.max_len, pool) > kMaxEnumeratedBlocks) {
    throw UsageError("space too large to enumerate; lower --max-len or the op pool");
  }
  auto mirror = resolve_weights(c, pool, err);
  if (mirror && mirror->max_len < c.max_len) {
    throw UsageError("max_len exceeds the mirror weights' feature normalizer");
  }
  const SurrogateParams sp = surrogate_params(c);
  std::ostringstream csv;
  csv << "index,layers,accuracy,topology,reward,arch\n";
  std::size_t index = 0;
  for_each_block(
      c.max_len, pool,
      [&](const BlockArch& b) {
        const double acc = surrogate_accuracy(b, sp);
        csv << ++index << ',' << b.size() << ',' << num(acc) << ',';
        if (mirror) {
          const double f = mirror_stimuli(*mirror, b);
          csv << num(f) << ',' << num(combined_reward(acc, f, c.lambda));
        } else {
          csv << ',' << num(acc);
        }
        csv << ',' << csv_quote(canonical_serialize(b)) << '\n';
      },
      std::max(c.max_len, c.feature_max_len));
  if (c.out.empty()) {
    out << csv.str();
  } else {
    write_file(c.out, csv.str());
  }
  return kExitOk;
}

struct Command {
  const char* name;
  const char* help;
  int (*run)(RunConfig&, std::ostream&, std::ostream&);
  std::vector<std::string> keys;
};

const std::vector<std::string> kCommon = {"config", "seed", "out"};
const std::vector<std::string> kFeature = {"expert", "ops", "gamma", "feature_max_len"};
const std::vector<std::string> kIrl = {"weights", "irl_epsilon", "irl_max_iterations", "irl_max_layers", "inner"};
const std::vector<std::string> kSearch = {"lambda", "eta", "gamma_q", "batch", "max_len", "iterations",
                                          "samples_per_iteration", "epsilon_start", "epsilon_end",
                                          "epsilon_decay_fraction", "replay_capacity", "window", "top_k",
                                          "threshold"};
const std::vector<std::string> kEval = {"evaluator", "plugin", "plugin_timeout", "noise_amp",
                                        "noise_seed", "base", "sim_weight", "len_penalty"};
const std::vector<std::string> kDiff = {"nodes", "steps", "lr", "k", "scale", "exact_gradient", "cell"};

std::vector<std::string> concat(std::initializer_list<std::vector<std::string>> parts) {
  std::vector<std::string> out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

std::vector<Command> commands() {
  std::vector<std::string> irl_train = concat({kCommon, kFeature, kIrl, {"trace", "max_len"}});
  irl_train.erase(std::find(irl_train.begin(), irl_train.end(), "weights"));
  return {
      {"irl-train", "learn mirror weights from an expert block", cmd_irl_train, irl_train},
      {"search", "Q-learning architecture search",
       cmd_search, concat({kCommon, kFeature, kIrl, kSearch, kEval, kDiff, {"mode", "trace"}})},
      {"diff-search", "softmax-relaxed cell search with a REINFORCE topology term", cmd_diff_search,
       concat({kCommon, kFeature, kIrl, kDiff, {"max_len"}})},
      {"modify-diag", "topology score changes for three modifications of the expert", cmd_modify_diag,
       concat({kCommon, kFeature, kIrl, {"max_len"}})},
      {"lambda-sweep", "search once per lambda and seed", cmd_lambda_sweep,
       concat({kCommon, kFeature, kIrl, kSearch, kEval, {"lambdas", "seeds"}})},
      {"export-dot", "Graphviz rendering of an architecture file", cmd_export_dot,
       {"config", "out", "arch", "max_len"}},
      {"enumerate", "dump every block of the space with oracle scores", cmd_enumerate,
       concat({kCommon, kFeature, kIrl, kEval, {"max_len", "lambda"}})},
  };
}

// Finds --config PATH / --config=PATH ahead of the real parse so file values
// become defaults that flags then override.
std::string prescan_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig config;
  try {
    if (const std::string path = prescan_config(args); !path.empty()) apply_config_file(config, path);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  CLI::App app{"Architecture search with a learned topology reward", "mirrornas"};
  app.set_version_flag("--version", version_string());
  app.require_subcommand(1);
  auto table = fields(config);
  const auto cmds = commands();
  std::vector<CLI::App*> subs;
  for (const auto& cmd : cmds) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    for (const auto& key : cmd.keys) {
      const auto it = std::find_if(table.begin(), table.end(), [&](const Field& f) { return f.name == key; });
      std::visit(
          [&](auto* p) {
            using T = std::remove_pointer_t<decltype(p)>;
            if constexpr (std::is_same_v<T, bool>) {
              sub->add_flag(flag_name(key), *p, it->help);
            } else {
              sub->add_option(flag_name(key), *p, it->help);
            }
          },
          it->ref);
    }
    if (std::string(cmd.name) == "export-dot") sub->add_option("arch_file", config.arch, "architecture file");
    subs.push_back(sub);
  }

  std::vector<const char*> argv{"mirrornas"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << version_string() << '\n';
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }

  for (std::size_t i = 0; i < cmds.size(); ++i) {
    if (!subs[i]->parsed()) continue;
    try {
      return cmds[i].run(config, out, err);
    } catch (const UsageError& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const ParseError& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const ArchError& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const std::invalid_argument& e) {
      err << "error: " << e.what() << '\n';
      return kExitUsage;
    } catch (const EvaluatorUnavailable& e) {
      err << "error: evaluator unavailable: " << e.what() << '\n';
      return kExitEvaluator;
    } catch (const EvalError& e) {
      err << "error: evaluator: " << e.what() << '\n';
      return kExitEvaluator;
    } catch (const AbortedRun& e) {
      err << "error: " << e.what() << '\n';
      return kExitAborted;
    }
  }
  err << "error: no command given\n";
  return kExitUsage;
}

}  // namespace mirrornas
