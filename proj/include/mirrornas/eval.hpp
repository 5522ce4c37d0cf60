#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mirrornas/arch.hpp"
#include "mirrornas/features.hpp"

namespace mirrornas {

/// Per-architecture evaluation failure. The search skips the architecture.
class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class TimeoutError : public EvalError {
 public:
  using EvalError::EvalError;
};
class ProtocolError : public EvalError {
 public:
  using EvalError::EvalError;
};
class TransportError : public EvalError {
 public:
  using EvalError::EvalError;
};

/// Nothing can be evaluated at all (plugin cannot be started, or keeps dying).
class EvaluatorUnavailable : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Source of accuracy percentages. Implementations must tolerate concurrent
/// calls up to the evaluation window in use.
class Evaluator {
 public:
  virtual ~Evaluator() = default;
  virtual double evaluate(const BlockArch& arch) = 0;
};

class FunctionEvaluator : public Evaluator {
 public:
  explicit FunctionEvaluator(std::function<double(const BlockArch&)> fn) : fn_(std::move(fn)) {}
  double evaluate(const BlockArch& arch) override { return fn_(arch); }

 private:
  std::function<double(const BlockArch&)> fn_;
};

// ---------------------------------------------------------------------------
// Surrogate landscape
//
//   acc = clamp(base + sim_weight * cos(mu(arch), reference_mu)
//               - len_penalty * |layers| + noise(arch), 0, 100)
//
// mu uses `gamma` and `max_len`. noise = noise_amp * (2u - 1), where u is the
// top 53 bits of splitmix64(fnv1a64(decimal(noise_seed) + ":" + canonical))
// scaled to [0, 1).
// ---------------------------------------------------------------------------

struct SurrogateParams {
  double base = 50.0;
  double sim_weight = 40.0;
  double len_penalty = 0.8;
  double noise_amp = 1.0;
  Feature reference_mu{};
  std::uint64_t noise_seed = 0;
  double gamma = kDefaultGamma;
  int max_len = kDefaultMaxLen;

  static SurrogateParams for_expert(const BlockArch& expert, double gamma = kDefaultGamma,
                                    int max_len = kDefaultMaxLen);
};

std::uint64_t fnv1a64(std::string_view bytes);
std::uint64_t splitmix64(std::uint64_t x);
/// Deterministic per-architecture noise in [-amp, amp].
double surrogate_noise(const BlockArch& arch, std::uint64_t seed, double amp);

double surrogate_accuracy(const BlockArch& arch, const SurrogateParams& params);

class SurrogateEvaluator : public Evaluator {
 public:
  explicit SurrogateEvaluator(SurrogateParams params) : params_(std::move(params)) {}
  double evaluate(const BlockArch& arch) override { return surrogate_accuracy(arch, params_); }
  const SurrogateParams& params() const { return params_; }

 private:
  SurrogateParams params_;
};

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// Memoizes an evaluator by canonical serialization. Concurrent requests for
/// the same key share one underlying call. Errors are passed through and not
/// stored, so a later request retries.
class CachedEvaluator : public Evaluator {
 public:
  explicit CachedEvaluator(Evaluator& inner) : inner_(inner) {}
  double evaluate(const BlockArch& arch) override;

  std::size_t underlying_calls() const { return calls_.load(); }
  std::size_t size() const;

 private:
  Evaluator& inner_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, std::shared_future<double>> entries_;
  std::atomic<std::size_t> calls_{0};
};

// ---------------------------------------------------------------------------
// Evaluation window
// ---------------------------------------------------------------------------

struct EvalOutcome {
  std::size_t index = 0;  // position in the input span
  std::optional<double> accuracy;
  std::string error;  // set iff accuracy is empty
};

/// Evaluates `archs` with at most `window` calls in flight and hands each
/// outcome to `sink` on the calling thread in completion order. window == 1
/// runs sequentially in input order. EvaluatorUnavailable stops issuing new
/// work and is rethrown once in-flight calls finish.
void parallel_window(Evaluator& evaluator, std::span<const BlockArch> archs, std::size_t window,
                     const std::function<void(const EvalOutcome&)>& sink);
std::vector<EvalOutcome> parallel_window(Evaluator& evaluator, std::span<const BlockArch> archs,
                                         std::size_t window);

// ---------------------------------------------------------------------------
// External plugin
//
// Request line:  {"id":N,"arch":{...canonical...}}\n
// Response line: {"id":N,"accuracy":X}\n  or  {"id":N,"error":"msg"}\n
// The plugin is told to exit by closing its standard input.
// ---------------------------------------------------------------------------

std::string format_request(std::uint64_t id, const BlockArch& arch);

struct PluginResponse {
  std::uint64_t id = 0;
  std::optional<double> accuracy;
  std::string error;
};
/// Throws ProtocolError for anything that is not a well-formed response.
PluginResponse parse_response(std::string_view line);

using LogSink = std::function<void(const std::string&)>;
LogSink stderr_log();

/// One running plugin instance talking over its stdin/stdout.
class PluginProcess {
 public:
  /// Throws EvaluatorUnavailable if the command cannot be started.
  explicit PluginProcess(const std::vector<std::string>& argv);
  ~PluginProcess();
  PluginProcess(const PluginProcess&) = delete;
  PluginProcess& operator=(const PluginProcess&) = delete;

  /// Sends the request and waits for the response carrying `id`. Lines with
  /// other ids are reported to `log` and skipped.
  double request(std::uint64_t id, const BlockArch& arch, double timeout_s, const LogSink& log);

  bool alive() const { return alive_; }
  void kill();
  /// Closes stdin and waits up to `grace_s` for a clean exit. Returns the exit
  /// status, or -1 if the process had to be killed.
  int close(double grace_s = 2.0);
  int pid() const { return pid_; }

 private:
  std::optional<std::string> read_line(double deadline_s);
  int reap(bool block);

  int pid_ = -1;
  int in_fd_ = -1;   // our end of the child's stdin
  int out_fd_ = -1;  // our end of the child's stdout
  bool alive_ = false;
  int exit_status_ = -1;
  std::string buffer_;
};

struct PluginOptions {
  std::vector<std::string> argv;
  double timeout_s = 600.0;
  std::size_t instances = 1;  // one per window slot
  int max_consecutive_transport_failures = 3;
  LogSink log = stderr_log();
};

/// Evaluator backed by a pool of plugin processes, one request per process at
/// a time. Processes are started lazily and restarted after a timeout or exit.
class ExternalEvaluator : public Evaluator {
 public:
  explicit ExternalEvaluator(PluginOptions options);
  ~ExternalEvaluator() override;

  double evaluate(const BlockArch& arch) override;

  /// Starts one instance so an unusable command is reported up front.
  void probe();

 private:
  struct Slot {
    std::unique_ptr<PluginProcess> process;
    bool busy = false;
  };
  std::size_t acquire();
  void release(std::size_t slot);

  PluginOptions options_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::vector<Slot> slots_;
  std::atomic<std::uint64_t> next_id_{1};
  std::atomic<int> consecutive_failures_{0};
};

}  // namespace mirrornas
