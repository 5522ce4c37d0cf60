// Acceptance run: one PASS/FAIL line per criterion. Every tolerance and
// budget is pinned below. Exit status is nonzero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mirrornas/arch.hpp"
#include "mirrornas/cli.hpp"
#include "mirrornas/diff_search.hpp"
#include "mirrornas/eval.hpp"
#include "mirrornas/features.hpp"
#include "mirrornas/mirror.hpp"
#include "mirrornas/qagent.hpp"

using namespace mirrornas;
namespace fs = std::filesystem;

namespace {

// A1 / A2
constexpr double kA1MaxDelta = 0.01;
constexpr std::size_t kA1MaxIterations = 50;
constexpr double kA1MaxSeconds = 60.0;
constexpr double kNormSlack = 1e-12;
constexpr double kTraceSlack = 1e-12;
// A3
constexpr int kA3Seeds = 100;
constexpr int kA3RequiredHits = 95;
constexpr int kA3Iterations = 200;
constexpr int kA3SamplesPerIteration = 25;  // 5,000 samples per run
constexpr double kA3MaxSeconds = 600.0;
constexpr double kA3RewardMatch = 1e-9;
// A4
constexpr int kA4Seeds = 20;
constexpr std::uint64_t kA4FirstSeed = 1000;
constexpr double kA4NoiseAmp = 1.0;
constexpr double kA4Alpha = 0.05;
// A5
constexpr double kA5Exact = 1e-12;
constexpr double kA5Chain = 1e-6;
constexpr int kA5Sweeps = 10000;
// A6
constexpr int kA6Cases = 1000;
constexpr double kA6Relative = 1e-12;
// A7
constexpr double kA7FiniteDiff = 1e-6;
constexpr double kA7Step = 1e-5;
constexpr int kA7BigK = 100000;
constexpr double kA7BigKRelative = 0.02;
constexpr int kA7Seeds = 10000;
constexpr double kA7Sigmas = 3.0;
// A10
constexpr double kA10Match = 1e-9;

const std::vector<OpKind> kTinyPool{ops::kDwConv3, ops::kIdentity, ops::kAdd};
const char* kTinyPoolArg = "dwconv3,identity,add";
constexpr int kTinyMaxLen = 3;
constexpr double kGamma = 0.9;

int g_failures = 0;

void report(const char* id, bool pass, const std::string& detail) {
  std::printf("%s %s %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
  if (!pass) ++g_failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  if (code != 0) std::fprintf(stderr, "cli exit %d: %s\n", code, err.str().c_str());
  return code;
}

// Splits one CSV line, honouring "" escapes inside quoted fields.
std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> f(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        f.back() += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        f.back() += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      f.emplace_back();
    } else {
      f.back() += ch;
    }
  }
  return f;
}

std::vector<std::map<std::string, std::string>> read_csv(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  const auto header = csv_fields(line);
  std::vector<std::map<std::string, std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_fields(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < f.size(); ++i) row[header[i]] = f[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

// Feature count written out term by term, independent of the library.
std::array<double, kFeatureDim> reference_mu(const BlockArch& b, double gamma, int max_len) {
  std::array<double, kFeatureDim> mu{};
  double g = 1.0;
  for (const Layer& l : b.layers) {
    g *= gamma;
    std::array<double, kFeatureDim> phi{};
    phi[static_cast<std::size_t>(l.op.category)] = 1.0;
    phi[6] = l.op.kernel / 5.0;
    phi[7] = l.pred1 / static_cast<double>(max_len + 1);
    phi[8] = l.pred2 / static_cast<double>(max_len + 1);
    for (std::size_t i = 0; i < kFeatureDim; ++i) mu[i] += g * phi[i];
  }
  return mu;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// P(X >= k) for X ~ Binomial(n, 1/2).
double sign_test_p(int k, int n) {
  if (n == 0) return 1.0;
  double p = 0.0;
  for (int i = k; i <= n; ++i) p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  return std::min(1.0, p);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main() {
  const fs::path dir = fs::temp_directory_path() / "mirrornas_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const fs::path weights_path = dir / "weights.json";
  const ExpertBlock expert = expert_library("resnet_block");

  // A1: IRL convergence through the CLI.
  {
    const auto t0 = std::chrono::steady_clock::now();
    const int code = cli({"irl-train", "--expert", "resnet_block", "--ops", kTinyPoolArg, "--max-len", "3", "--gamma",
                          "0.9", "--out", weights_path.string(), "--trace", (dir / "irl_trace.csv").string()});
    const double secs = seconds_since(t0);
    bool ok = code == 0;
    double delta = std::numeric_limits<double>::infinity(), wnorm = 0.0;
    std::size_t iters = 0;
    bool monotone = true;
    if (ok) {
      const MirrorWeights w = weights_from_json(slurp(weights_path));
      delta = w.final_margin;
      wnorm = norm2(w.w);
      const auto rows = read_csv(dir / "irl_trace.csv");
      iters = rows.size();
      for (std::size_t i = 1; i < rows.size(); ++i) {
        monotone = monotone && std::stod(rows[i].at("delta")) <= std::stod(rows[i - 1].at("delta")) + kTraceSlack;
      }
    }
    ok = ok && delta <= kA1MaxDelta && iters <= kA1MaxIterations && wnorm <= 1.0 + kNormSlack && secs < kA1MaxSeconds &&
         monotone;
    report("A1", ok,
           fmt("delta=%.6g iterations=%g |w|=%.15g runtime=%.3fs", delta, static_cast<double>(iters), wnorm, secs) +
               (monotone ? " trace non-increasing" : " trace increases"));
  }

  MirrorWeights weights;
  bool have_weights = fs::exists(weights_path);
  if (have_weights) weights = weights_from_json(slurp(weights_path));

  // A2: expert maximality over the enumerated space.
  {
    bool ok = have_weights;
    double worst = -std::numeric_limits<double>::infinity();
    std::size_t blocks = 0;
    if (ok) {
      const double fe = mirror_stimuli(weights, expert.arch);
      for_each_block(
          kTinyMaxLen, kTinyPool,
          [&](const BlockArch& b) {
            ++blocks;
            const double gap = mirror_stimuli(weights, b) - fe;
            worst = std::max(worst, gap);
            if (gap > weights.final_margin) ok = false;
          },
          weights.max_len);
    }
    report("A2", ok,
           fmt("blocks=%g max(F(b)-F(expert))=%.6g delta_final=%.6g", static_cast<double>(blocks), worst,
               weights.final_margin));
  }

  // Oracle over the tiny space with the A3 surrogate.
  SurrogateParams exact_surrogate = SurrogateParams::for_expert(expert.arch, kGamma, kDefaultMaxLen);
  exact_surrogate.noise_amp = 0.0;

  // A3: the search recovers the enumeration argmax of R.
  {
    const double lambda = 30.0;
    double oracle_r = -std::numeric_limits<double>::infinity();
    for (const auto& b : enumerate_blocks(kTinyMaxLen, kTinyPool, weights.max_len)) {
      oracle_r = std::max(oracle_r, combined_reward(surrogate_accuracy(b, exact_surrogate), mirror_stimuli(weights, b), lambda));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const fs::path out = dir / "a3.csv";
    const int code =
        cli({"lambda-sweep", "--ops", kTinyPoolArg, "--max-len", "3", "--weights", weights_path.string(), "--lambdas", "30",
             "--seeds", std::to_string(kA3Seeds), "--seed", "1", "--noise-amp", "0", "--iterations",
             std::to_string(kA3Iterations), "--samples-per-iteration", std::to_string(kA3SamplesPerIteration),
             "--threshold", "none", "--out", out.string()});
    const double secs = seconds_since(t0);
    int hits = 0;
    std::size_t runs = 0;
    if (code == 0) {
      for (const auto& row : read_csv(out)) {
        ++runs;
        if (std::abs(std::stod(row.at("best_R")) - oracle_r) <= kA3RewardMatch) ++hits;
      }
    }
    const bool ok = code == 0 && runs == static_cast<std::size_t>(kA3Seeds) && hits >= kA3RequiredHits &&
                    secs < kA3MaxSeconds;
    report("A3", ok,
           fmt("hits=%g/%g samples_per_run=%g runtime=%.2fs", hits, kA3Seeds,
               static_cast<double>(kA3Iterations * kA3SamplesPerIteration), secs) +
               fmt(" oracle_R=%.6f", oracle_r));
  }

  // A4: lambda = 30 reaches the oracle accuracy in fewer samples than lambda = 0.
  {
    const fs::path out = dir / "a4.csv";
    const int code = cli({"lambda-sweep", "--ops", kTinyPoolArg, "--max-len", "3", "--weights", weights_path.string(),
                          "--lambdas", "0,30", "--seeds", std::to_string(kA4Seeds), "--seed", std::to_string(kA4FirstSeed),
                          "--noise-amp", fmt("%.17g", kA4NoiseAmp), "--iterations", std::to_string(kA3Iterations),
                          "--samples-per-iteration", std::to_string(kA3SamplesPerIteration), "--threshold", "oracle",
                          "--out", out.string()});
    std::map<std::string, std::map<std::string, double>> hit;  // lambda -> seed -> samples
    if (code == 0) {
      for (const auto& row : read_csv(out)) {
        const std::string& s = row.at("samples_to_threshold");
        hit[row.at("lambda")][row.at("seed")] = s.empty() || s == "none" ? std::numeric_limits<double>::infinity() : std::stod(s);
      }
    }
    std::vector<double> a, b;
    int wins = 0, losses = 0;
    for (const auto& [seed, v0] : hit["0"]) {
      const double v30 = hit["30"].count(seed) ? hit["30"][seed] : std::numeric_limits<double>::infinity();
      a.push_back(v0);
      b.push_back(v30);
      wins += v30 < v0;
      losses += v30 > v0;
    }
    const bool complete = code == 0 && a.size() == static_cast<std::size_t>(kA4Seeds);
    const double m0 = complete ? median(a) : 0.0, m30 = complete ? median(b) : 0.0;
    const double p = sign_test_p(wins, wins + losses);
    const bool ok = complete && m30 < m0 && p < kA4Alpha;
    report("A4", ok,
           fmt("median(l=30)=%g median(l=0)=%g wins=%g losses=%g", m30, m0, wins, losses) +
               fmt(" ties=%g sign_test_p=%.4g", static_cast<double>(a.size()) - wins - losses, p));
  }

  // A5: TD arithmetic.
  {
    bool ok = true;
    double worst = 0.0;
    auto expect = [&](double got, double want) {
      worst = std::max(worst, std::abs(got - want));
      ok = ok && std::abs(got - want) <= kA5Exact;
    };
    const ActionSpace space(kTinyPool, kTinyMaxLen);
    const LayerCode s{ops::kDwConv3, 1, 0}, n{ops::kIdentity, 1, 0};
    {
      QTable q;
      Transition t{s, std::nullopt, 1.0, std::nullopt, {}, true};
      expect(td_update(q, t, 0.01, 0.9), 0.01);
      expect(td_update(q, t, 0.01, 0.9), 0.99 * 0.01 + 0.01);
      expect(td_update(q, t, 1.0, 0.9), 1.0);
    }
    {
      QTable q;
      q.set(s, n, 2.0);
      q.set(n, std::nullopt, 5.0);
      q.set(n, LayerCode{ops::kDwConv3, 2, 0}, -1.0);
      Transition t{s, n, 0.5, n, space.legal(3), false};
      expect(td_update(q, t, 0.25, 0.9), 0.75 * 2.0 + 0.25 * (0.5 + 0.9 * 5.0));
    }
    QTable q;
    const LayerCode s1{ops::kDwConv3, 1, 0}, s2{ops::kDwConv3, 2, 0}, s3{ops::kDwConv3, 3, 0};
    const std::vector<AgentAction> after1{s2}, after2{s3};
    const Transition t1{std::nullopt, s1, 1.0, s1, after1, false};
    const Transition t2{s1, s2, 2.0, s2, after2, false};
    const Transition t3{s2, s3, 3.0, std::nullopt, {}, true};
    for (int i = 0; i < kA5Sweeps; ++i) {
      td_update(q, t3, 0.1, kGamma);
      td_update(q, t2, 0.1, kGamma);
      td_update(q, t1, 0.1, kGamma);
    }
    const double chain_err = std::abs(q.get(std::nullopt, s1) - (1.0 + kGamma * 2.0 + kGamma * kGamma * 3.0));
    ok = ok && chain_err <= kA5Chain;
    report("A5", ok, fmt("max closed-form error=%.3g chain error=%.3g", worst, chain_err));
  }

  // A6: reward decomposition.
  {
    Rng rng(6);
    double worst = 0.0;
    for (int i = 0; i < kA6Cases; ++i) {
      const double total = 2000.0 * rng.uniform() - 1000.0;
      const int T = 1 + static_cast<int>(rng.index(kDefaultMaxLen));
      double s = 0.0;
      for (double r : shaped_rewards(total, T)) s += r;
      worst = std::max(worst, std::abs(s - total) / std::max(1.0, std::abs(total)));
    }
    bool exact = true;
    for (int i = 0; i < kA6Cases; ++i) {
      const double acc = 100.0 * rng.uniform(), topo = rng.uniform() - 0.5, lambda = 50.0 * rng.uniform();
      exact = exact && combined_reward(acc, topo, lambda) == acc + lambda * topo;
    }
    // Shift invariance on enumerated candidate sets, per position.
    bool invariant = true;
    for (int position = 1; position <= kTinyMaxLen + 1; ++position) {
      const ActionSpace space(kTinyPool, kTinyMaxLen);
      const auto& legal = space.legal(position);
      for (int trial = 0; trial < 20; ++trial) {
        QTable q, shifted;
        const double c = 1000.0 * rng.uniform() - 500.0;
        for (const auto& a : legal) {
          const double v = std::floor(8.0 * rng.uniform());  // ties on purpose
          q.set(std::nullopt, a, v);
          shifted.set(std::nullopt, a, v + c);
        }
        invariant = invariant && q.argmax(std::nullopt, legal) == shifted.argmax(std::nullopt, legal);
      }
    }
    const bool ok = worst <= kA6Relative && exact && invariant;
    report("A6", ok,
           fmt("max relative sum error=%.3g", worst) + (exact ? " combined exact" : " combined inexact") +
               (invariant ? " argmax shift-invariant" : " argmax changed"));
  }

  // A7: REINFORCE on a one-edge, two-op cell.
  {
    MirrorWeights w = weights;
    if (!have_weights) w.w[0] = 1.0;
    AlphaCell cell = AlphaCell::uniform(2, {ops::kDwConv3, ops::kIdentity});
    cell.logits[0] = {0.4, -0.3};
    const auto exact = exact_topology_objective(cell, w);
    double fd_err = 0.0;
    for (std::size_t o = 0; o < 2; ++o) {
      AlphaCell up = cell, dn = cell;
      up.logits[0][o] += kA7Step;
      dn.logits[0][o] -= kA7Step;
      const double fd = (exact_topology_objective(up, w).value - exact_topology_objective(dn, w).value) / (2 * kA7Step);
      fd_err = std::max(fd_err, std::abs(fd - exact.grad[0][o]));
    }
    const double gnorm = std::hypot(exact.grad[0][0], exact.grad[0][1]);
    Rng rng(7);
    const auto big = topology_loss_and_grad(cell, w, kA7BigK, rng);
    const double big_rel = std::hypot(big.grad[0][0] - exact.grad[0][0], big.grad[0][1] - exact.grad[0][1]) / gnorm;
    double worst_z = 0.0;
    for (std::size_t o = 0; o < 2; ++o) {
      double sum = 0.0, sumsq = 0.0;
      for (int s = 0; s < kA7Seeds; ++s) {
        Rng r(static_cast<std::uint64_t>(s));
        const double g = topology_loss_and_grad(cell, w, 5, r).grad[0][o];
        sum += g;
        sumsq += g * g;
      }
      const double mean = sum / kA7Seeds;
      const double se = std::sqrt(std::max(0.0, sumsq / kA7Seeds - mean * mean) / kA7Seeds);
      worst_z = std::max(worst_z, std::abs(mean - exact.grad[0][o]) / se);
    }
    const bool ok = fd_err <= kA7FiniteDiff && big_rel <= kA7BigKRelative && worst_z <= kA7Sigmas;
    report("A7", ok, fmt("fd_error=%.3g K=100000 rel_error=%.4f K=5 max|z|=%.3f", fd_err, big_rel, worst_z));
  }

  // A8: round trips over the whole tiny space.
  {
    std::size_t n = 0, bad = 0;
    for_each_block(kTinyMaxLen, kTinyPool, [&](const BlockArch& b) {
      ++n;
      const std::string text = canonical_serialize(b);
      const bool ok = from_trajectory(to_trajectory(b)) == b && parse_arch(text) == b &&
                      canonical_serialize(parse_arch(text)) == text;
      bad += ok ? 0 : 1;
    });
    report("A8", bad == 0 && n > 0, fmt("blocks=%g failures=%g", static_cast<double>(n), static_cast<double>(bad)));
  }

  // A9: identical configuration, seed and window give byte-identical CSVs.
  {
    std::vector<std::string> base{"search", "--ops", kTinyPoolArg, "--max-len", "3", "--seed", "99", "--window", "1",
                                  "--iterations", "40", "--samples-per-iteration", "16", "--noise-amp", "1",
                                  "--weights", weights_path.string()};
    auto run = [&](const char* name) {
      auto args = base;
      args.push_back("--out");
      args.push_back((dir / name).string());
      return cli(args) == 0 ? slurp(dir / name / "convergence.csv") : std::string();
    };
    const std::string a = run("a9_first"), b = run("a9_second");
    report("A9", !a.empty() && a == b, fmt("bytes=%g identical=%g", static_cast<double>(a.size()), a == b ? 1.0 : 0.0));
  }

  // A10: modification diagnostic against an independent recomputation.
  {
    const fs::path out = dir / "modify.csv";
    const int code = cli({"modify-diag", "--expert", "resnet_block", "--ops", kTinyPoolArg, "--weights",
                          weights_path.string(), "--out", out.string()});
    bool ok = code == 0;
    double worst = 0.0;
    std::size_t variants = 0;
    bool self_zero = false;
    if (ok) {
      const auto mu_e = reference_mu(expert.arch, weights.gamma, weights.max_len);
      double fe = 0.0;
      for (std::size_t i = 0; i < kFeatureDim; ++i) fe += weights.w[i] * mu_e[i];
      for (const auto& row : read_csv(out)) {
        const BlockArch b = parse_arch(row.at("arch"), std::max(kDefaultMaxLen, weights.max_len));
        const auto mu = reference_mu(b, weights.gamma, weights.max_len);
        double f = 0.0, d2 = 0.0;
        for (std::size_t i = 0; i < kFeatureDim; ++i) {
          f += weights.w[i] * mu[i];
          d2 += (mu[i] - mu_e[i]) * (mu[i] - mu_e[i]);
        }
        const double dmu = std::stod(row.at("mu_delta_norm"));
        const double dtopo = std::stod(row.at("topology_delta"));
        if (row.at("variant") == "expert") {
          self_zero = dmu == 0.0 && dtopo == 0.0;
          continue;
        }
        ++variants;
        ok = ok && std::isfinite(dmu) && std::isfinite(dtopo);
        worst = std::max({worst, std::abs(dmu - std::sqrt(d2)), std::abs(dtopo - std::abs(f - fe))});
      }
    }
    ok = ok && variants == 3 && self_zero && worst <= kA10Match;
    report("A10", ok,
           fmt("variants=%g max recompute error=%.3g", static_cast<double>(variants), worst) +
               (self_zero ? " self row exactly 0" : " self row nonzero"));
  }

  std::printf("%d criteria failed\n", g_failures);
  return g_failures == 0 ? 0 : 1;
}
