#include "mirrornas/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstring>
#include <deque>
#include <iostream>
#include <thread>

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

extern char** environ;

namespace mirrornas {

// ---------------------------------------------------------------------------
// Surrogate

SurrogateParams SurrogateParams::for_expert(const BlockArch& expert, double gamma, int max_len) {
  SurrogateParams p;
  p.gamma = gamma;
  p.max_len = max_len;
  p.reference_mu = feature_count(expert, gamma, max_len);
  return p;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double surrogate_noise(const BlockArch& arch, std::uint64_t seed, double amp) {
  if (amp == 0.0) return 0.0;
  const std::string key = std::to_string(seed) + ":" + canonical_serialize(arch);
  const double u = static_cast<double>(splitmix64(fnv1a64(key)) >> 11) * 0x1.0p-53;
  return amp * (2.0 * u - 1.0);
}

double surrogate_accuracy(const BlockArch& arch, const SurrogateParams& params) {
  const Feature mu = feature_count(arch, params.gamma, params.max_len);
  const double acc = params.base + params.sim_weight * cosine_similarity(mu, params.reference_mu) -
                     params.len_penalty * static_cast<double>(arch.size()) +
                     surrogate_noise(arch, params.noise_seed, params.noise_amp);
  return std::clamp(acc, 0.0, 100.0);
}

// ---------------------------------------------------------------------------
// Cache

double CachedEvaluator::evaluate(const BlockArch& arch) {
  const std::string key = canonical_serialize(arch);
  std::promise<double> promise;
  std::shared_future<double> fut;
  bool owner = false;
  {
    std::lock_guard lock(mu_);
    auto it = entries_.find(key);
    if (it != entries_.end()) {
      fut = it->second;
    } else {
      fut = promise.get_future().share();
      entries_.emplace(key, fut);
      owner = true;
    }
  }
  if (!owner) return fut.get();

  ++calls_;
  try {
    const double v = inner_.evaluate(arch);
    promise.set_value(v);
    return v;
  } catch (...) {
    {
      std::lock_guard lock(mu_);
      entries_.erase(key);
    }
    promise.set_exception(std::current_exception());
    throw;
  }
}

std::size_t CachedEvaluator::size() const {
  std::lock_guard lock(mu_);
  return entries_.size();
}

// ---------------------------------------------------------------------------
// Window

namespace {

EvalOutcome evaluate_one(Evaluator& evaluator, std::span<const BlockArch> archs, std::size_t i) {
  EvalOutcome out;
  out.index = i;
  try {
    out.accuracy = evaluator.evaluate(archs[i]);
  } catch (const EvalError& e) {
    out.error = e.what();
  } catch (const ArchError& e) {
    out.error = e.what();
  }
  return out;
}

}  // namespace

void parallel_window(Evaluator& evaluator, std::span<const BlockArch> archs, std::size_t window,
                     const std::function<void(const EvalOutcome&)>& sink) {
  if (window == 0) throw std::invalid_argument("evaluation window must be at least 1");
  if (window == 1 || archs.size() <= 1) {
    for (std::size_t i = 0; i < archs.size(); ++i) sink(evaluate_one(evaluator, archs, i));
    return;
  }

  std::mutex mu;
  std::condition_variable cv;
  std::deque<EvalOutcome> done;
  std::exception_ptr fatal;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> stop{false};
  const std::size_t workers = std::min(window, archs.size());
  std::size_t running = workers;  // guarded by mu

  auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= archs.size() || stop.load()) break;
      try {
        EvalOutcome o = evaluate_one(evaluator, archs, i);
        std::lock_guard lock(mu);
        done.push_back(std::move(o));
      } catch (...) {
        std::lock_guard lock(mu);
        if (!fatal) fatal = std::current_exception();
        stop = true;
      }
      cv.notify_one();
    }
    std::lock_guard lock(mu);
    --running;
    cv.notify_one();
  };

  std::vector<std::thread> threads;
  threads.reserve(workers);
  for (std::size_t k = 0; k < workers; ++k) threads.emplace_back(worker);

  std::exception_ptr sink_error;
  for (;;) {
    std::unique_lock lock(mu);
    cv.wait(lock, [&] { return !done.empty() || running == 0; });
    if (done.empty() && running == 0) break;
    EvalOutcome o = std::move(done.front());
    done.pop_front();
    lock.unlock();
    if (!sink_error) {
      try {
        sink(o);
      } catch (...) {
        sink_error = std::current_exception();
        stop = true;
      }
    }
  }
  for (auto& t : threads) t.join();
  if (fatal) std::rethrow_exception(fatal);
  if (sink_error) std::rethrow_exception(sink_error);
}

std::vector<EvalOutcome> parallel_window(Evaluator& evaluator, std::span<const BlockArch> archs,
                                         std::size_t window) {
  std::vector<EvalOutcome> out;
  out.reserve(archs.size());
  parallel_window(evaluator, archs, window, [&](const EvalOutcome& o) { out.push_back(o); });
  return out;
}

// ---------------------------------------------------------------------------
// Wire protocol

std::string format_request(std::uint64_t id, const BlockArch& arch) {
  return "{\"id\":" + std::to_string(id) + ",\"arch\":" + canonical_serialize(arch) + "}\n";
}

PluginResponse parse_response(std::string_view line) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error&) {
    throw ProtocolError("malformed response line: " + std::string(line));
  }
  if (!doc.is_object() || !doc.contains("id") || !doc["id"].is_number_unsigned()) {
    throw ProtocolError("response without a non-negative integer id: " + std::string(line));
  }
  PluginResponse r;
  r.id = doc["id"].get<std::uint64_t>();
  const bool has_acc = doc.contains("accuracy");
  const bool has_err = doc.contains("error");
  if (has_acc == has_err) {
    throw ProtocolError("response needs exactly one of accuracy/error: " + std::string(line));
  }
  if (has_acc) {
    if (!doc["accuracy"].is_number()) {
      throw ProtocolError("non-numeric accuracy: " + std::string(line));
    }
    const double acc = doc["accuracy"].get<double>();
    if (!(acc >= 0.0 && acc <= 100.0)) {
      throw ProtocolError("accuracy outside [0,100]: " + std::string(line));
    }
    r.accuracy = acc;
  } else {
    r.error = doc["error"].is_string() ? doc["error"].get<std::string>() : doc["error"].dump();
  }
  return r;
}

LogSink stderr_log() {
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

// ---------------------------------------------------------------------------
// Plugin process

namespace {

double now_s() {
  using namespace std::chrono;
  return duration<double>(steady_clock::now().time_since_epoch()).count();
}

std::string describe_status(int status) {
  if (WIFEXITED(status)) return "exit code " + std::to_string(WEXITSTATUS(status));
  if (WIFSIGNALED(status)) return "signal " + std::to_string(WTERMSIG(status));
  return "status " + std::to_string(status);
}

}  // namespace

PluginProcess::PluginProcess(const std::vector<std::string>& argv) {
  if (argv.empty()) throw EvaluatorUnavailable("empty plugin command");
  int in_pair[2];
  int out_pair[2];
  // Sockets rather than pipes so writes to a dead plugin fail with EPIPE
  // (MSG_NOSIGNAL) instead of raising SIGPIPE.
  if (socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, in_pair) != 0) {
    throw EvaluatorUnavailable(std::string("socketpair: ") + std::strerror(errno));
  }
  if (socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, out_pair) != 0) {
    ::close(in_pair[0]);
    ::close(in_pair[1]);
    throw EvaluatorUnavailable(std::string("socketpair: ") + std::strerror(errno));
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, in_pair[1], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, out_pair[1], STDOUT_FILENO);

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const int rc = posix_spawnp(&pid_, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(in_pair[1]);
  ::close(out_pair[1]);
  if (rc != 0) {
    ::close(in_pair[0]);
    ::close(out_pair[0]);
    pid_ = -1;
    throw EvaluatorUnavailable("cannot start plugin '" + argv[0] + "': " + std::strerror(rc));
  }
  in_fd_ = in_pair[0];
  out_fd_ = out_pair[0];
  alive_ = true;
}

PluginProcess::~PluginProcess() {
  if (alive_) close(1.0);
  if (in_fd_ >= 0) ::close(in_fd_);
  if (out_fd_ >= 0) ::close(out_fd_);
}

int PluginProcess::reap(bool block) {
  if (pid_ < 0) return exit_status_;
  int status = 0;
  const pid_t r = waitpid(pid_, &status, block ? 0 : WNOHANG);
  if (r == pid_) {
    exit_status_ = status;
    pid_ = -1;
    alive_ = false;
  }
  return exit_status_;
}

void PluginProcess::kill() {
  if (pid_ > 0) {
    ::kill(pid_, SIGKILL);
    reap(true);
  }
  alive_ = false;
}

int PluginProcess::close(double grace_s) {
  if (in_fd_ >= 0) {
    ::close(in_fd_);
    in_fd_ = -1;
  }
  const double deadline = now_s() + grace_s;
  while (pid_ > 0 && now_s() < deadline) {
    reap(false);
    if (pid_ > 0) std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  if (pid_ > 0) {
    kill();
    return -1;
  }
  alive_ = false;
  return WIFEXITED(exit_status_) ? WEXITSTATUS(exit_status_) : -1;
}

std::optional<std::string> PluginProcess::read_line(double deadline_s) {
  for (;;) {
    if (auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string line = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return line;
    }
    const double remaining = deadline_s - now_s();
    if (remaining <= 0.0) return std::nullopt;
    pollfd pfd{out_fd_, POLLIN, 0};
    const int timeout_ms = static_cast<int>(std::min(remaining * 1000.0, 1e9)) + 1;
    const int pr = ::poll(&pfd, 1, timeout_ms);
    if (pr < 0) {
      if (errno == EINTR) continue;
      throw TransportError(std::string("poll: ") + std::strerror(errno));
    }
    if (pr == 0) continue;
    char chunk[4096];
    const ssize_t n = ::read(out_fd_, chunk, sizeof chunk);
    if (n < 0) {
      if (errno == EINTR || errno == EAGAIN) continue;
      throw TransportError(std::string("read: ") + std::strerror(errno));
    }
    if (n == 0) {
      reap(true);
      throw TransportError("plugin closed its output (" + describe_status(exit_status_) + ")");
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

double PluginProcess::request(std::uint64_t id, const BlockArch& arch, double timeout_s,
                              const LogSink& log) {
  if (!alive_) throw TransportError("plugin is not running");
  const std::string line = format_request(id, arch);
  std::size_t sent = 0;
  while (sent < line.size()) {
    const ssize_t n = ::send(in_fd_, line.data() + sent, line.size() - sent, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      reap(true);
      throw TransportError("cannot write to plugin (" + describe_status(exit_status_) + ")");
    }
    sent += static_cast<std::size_t>(n);
  }

  const double deadline = now_s() + timeout_s;
  for (;;) {
    auto got = read_line(deadline);
    if (!got) throw TimeoutError("plugin timed out on request " + std::to_string(id));
    PluginResponse resp;
    try {
      resp = parse_response(*got);
    } catch (const ProtocolError&) {
      if (log) log("plugin protocol error, raw line: " + *got);
      throw;
    }
    if (resp.id != id) {
      if (log) log("ignoring stray plugin line for id " + std::to_string(resp.id) + ": " + *got);
      continue;
    }
    if (resp.accuracy) return *resp.accuracy;
    throw EvalError("plugin reported error for request " + std::to_string(id) + ": " +
                    resp.error);
  }
}

// ---------------------------------------------------------------------------
// External evaluator

ExternalEvaluator::ExternalEvaluator(PluginOptions options) : options_(std::move(options)) {
  if (options_.argv.empty()) throw std::invalid_argument("plugin command is empty");
  slots_.resize(std::max<std::size_t>(1, options_.instances));
}

ExternalEvaluator::~ExternalEvaluator() {
  for (auto& s : slots_) {
    if (s.process) s.process->close(2.0);
  }
}

std::size_t ExternalEvaluator::acquire() {
  std::unique_lock lock(mu_);
  for (;;) {
    for (std::size_t i = 0; i < slots_.size(); ++i) {
      if (!slots_[i].busy) {
        slots_[i].busy = true;
        return i;
      }
    }
    cv_.wait(lock);
  }
}

void ExternalEvaluator::release(std::size_t slot) {
  {
    std::lock_guard lock(mu_);
    slots_[slot].busy = false;
  }
  cv_.notify_one();
}

void ExternalEvaluator::probe() {
  const std::size_t slot = acquire();
  try {
    auto& proc = slots_[slot].process;
    if (!proc || !proc->alive()) proc = std::make_unique<PluginProcess>(options_.argv);
  } catch (...) {
    release(slot);
    throw;
  }
  release(slot);
}

double ExternalEvaluator::evaluate(const BlockArch& arch) {
  const std::size_t slot = acquire();
  struct Releaser {
    ExternalEvaluator* self;
    std::size_t slot;
    ~Releaser() { self->release(slot); }
  } releaser{this, slot};

  auto& proc = slots_[slot].process;
  if (!proc || !proc->alive()) proc = std::make_unique<PluginProcess>(options_.argv);
  const std::uint64_t id = next_id_.fetch_add(1);
  try {
    const double acc = proc->request(id, arch, options_.timeout_s, options_.log);
    consecutive_failures_ = 0;
    return acc;
  } catch (const TimeoutError&) {
    proc->kill();
    proc.reset();
    throw;
  } catch (const TransportError& e) {
    proc.reset();
    if (++consecutive_failures_ >= options_.max_consecutive_transport_failures) {
      throw EvaluatorUnavailable(std::string("plugin keeps failing: ") + e.what());
    }
    throw;
  }
}

}  // namespace mirrornas
