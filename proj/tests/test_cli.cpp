#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "mirrornas/cli.hpp"
#include "mirrornas/mirror.hpp"

using namespace mirrornas;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mirrornas_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

const std::vector<std::string> kSmall{"--ops", "dwconv3,identity,add", "--max-len", "3",
                                      "--iterations", "10", "--samples-per-iteration", "5"};

std::vector<std::string> with(std::vector<std::string> head, const std::vector<std::string>& tail) {
  head.insert(head.end(), tail.begin(), tail.end());
  return head;
}

}  // namespace

TEST_CASE("help, version and usage errors") {
  CHECK(cli({"--help"}).code == 0);
  const Run v = cli({"--version"});
  CHECK(v.code == 0);
  CHECK(v.out.find(version_string()) != std::string::npos);
  CHECK(cli({}).code == 2);
  CHECK(cli({"nosuch-command"}).code == 2);
  CHECK(cli({"search", "--no-such-flag", "1"}).code == 2);
  CHECK(cli({"irl-train", "--expert", "nosuch"}).code == 2);
  CHECK(cli({"search", "--ops", "conv9"}).code == 2);
  CHECK(cli({"search", "--threshold", "oracle", "--evaluator", "external", "--plugin", "true"}).code == 2);
  CHECK(cli({"search", "--threshold", "oracle", "--ops", "all", "--max-len", "6"}).code == 2);
  CHECK(cli({"search", "--threshold", "soon"}).code == 2);
}

TEST_CASE("irl-train writes weights that reload") {
  const fs::path d = scratch("irl");
  const Run r = cli({"irl-train", "--ops", "dwconv3,identity,add", "--max-len", "3", "--out", (d / "w.json").string()});
  REQUIRE(r.code == 0);
  const MirrorWeights w = weights_from_json(slurp(d / "w.json"));
  CHECK(w.final_margin <= 0.01);
  CHECK(fs::exists(d / "w.json.trace.csv"));
}

TEST_CASE("config file keys apply and flags override them") {
  const fs::path d = scratch("config");
  {
    std::ofstream(d / "cfg.json") << R"({"ops":"dwconv3,identity,add","max_len":3,"iterations":4,)"
                                     R"("samples_per_iteration":3,"seed":5,"top_k":2})";
  }
  const Run a = cli({"search", "--config", (d / "cfg.json").string(), "--out", (d / "a").string()});
  REQUIRE(a.code == 0);
  CHECK(lines(slurp(d / "a" / "convergence.csv")) == 5);
  CHECK(fs::exists(d / "a" / "top_reward_02.json"));
  CHECK_FALSE(fs::exists(d / "a" / "top_reward_03.json"));

  const Run b =
      cli({"search", "--config", (d / "cfg.json").string(), "--iterations", "6", "--out", (d / "b").string()});
  REQUIRE(b.code == 0);
  CHECK(lines(slurp(d / "b" / "convergence.csv")) == 7);

  { std::ofstream(d / "bad.json") << R"({"iterationz":3})"; }
  CHECK(cli({"search", "--config", (d / "bad.json").string()}).code == 2);
  CHECK(cli({"search", "--config", (d / "missing.json").string()}).code == 2);
}

TEST_CASE("search output is reproducible and the manifest replays it") {
  const fs::path d = scratch("repro");
  REQUIRE(cli(with({"search", "--seed", "11", "--out", (d / "a").string()}, kSmall)).code == 0);
  REQUIRE(cli(with({"search", "--seed", "11", "--window", "4", "--out", (d / "b").string()}, kSmall)).code == 0);
  const std::string conv = slurp(d / "a" / "convergence.csv");
  CHECK(conv == slurp(d / "b" / "convergence.csv"));
  CHECK(conv.rfind("iteration,samples_total,epsilon,best_R,mean_R,best_acc,mean_topo\n", 0) == 0);
  for (const char* f : {"summary.csv", "weights.json", "manifest.json", "top_reward_01.dot", "top_accuracy_01.json"}) {
    CHECK(fs::exists(d / "a" / f));
  }
  REQUIRE(cli({"search", "--config", (d / "a" / "manifest.json").string(), "--out", (d / "c").string()}).code == 0);
  CHECK(slurp(d / "c" / "convergence.csv") == conv);

  REQUIRE(cli(with({"search", "--seed", "12", "--out", (d / "e").string()}, kSmall)).code == 0);
  CHECK(slurp(d / "e" / "convergence.csv") != conv);
}

TEST_CASE("IRLAS_SEED is the seed fallback") {
  const fs::path d = scratch("env");
  REQUIRE(cli(with({"search", "--seed", "21", "--out", (d / "a").string()}, kSmall)).code == 0);
  ::setenv("IRLAS_SEED", "21", 1);
  const Run r = cli(with({"search", "--out", (d / "b").string()}, kSmall));
  ::unsetenv("IRLAS_SEED");
  REQUIRE(r.code == 0);
  CHECK(slurp(d / "a" / "convergence.csv") == slurp(d / "b" / "convergence.csv"));
}

TEST_CASE("lambda sweep rows") {
  const fs::path d = scratch("sweep");
  const Run r = cli(with({"lambda-sweep", "--lambdas", "0,30", "--seeds", "5", "--out", (d / "s.csv").string()}, kSmall));
  REQUIRE(r.code == 0);
  const std::string csv = slurp(d / "s.csv");
  CHECK(csv.rfind("lambda,seed,best_R,best_acc,best_topo,samples_to_threshold\n", 0) == 0);
  CHECK(lines(csv) == 11);
  CHECK(cli(with({"lambda-sweep", "--lambdas", "", "--out", (d / "t.csv").string()}, kSmall)).code == 2);
}

TEST_CASE("export-dot and enumerate") {
  const fs::path d = scratch("dot");
  { std::ofstream(d / "a.json") << canonical_serialize(expert_library("resnet_block").arch); }
  REQUIRE(cli({"export-dot", (d / "a.json").string(), "--out", (d / "a.dot").string()}).code == 0);
  const std::string dot = slurp(d / "a.dot");
  CHECK(dot.find("input -> L3;") != std::string::npos);
  { std::ofstream(d / "bad.json") << R"({"layers":[{"op":"dwconv","k":3,"p":[4,0]}]})"; }
  CHECK(cli({"export-dot", (d / "bad.json").string(), "--out", (d / "b.dot").string()}).code == 2);

  REQUIRE(cli({"enumerate", "--ops", "dwconv3,identity,add", "--max-len", "3", "--out", (d / "e.csv").string()}).code == 0);
  const std::string csv = slurp(d / "e.csv");
  CHECK(csv.rfind("index,layers,accuracy,topology,reward,arch\n", 0) == 0);
  CHECK(lines(csv) == 159);
}

TEST_CASE("modify-diag rows") {
  const fs::path d = scratch("modify");
  REQUIRE(cli({"modify-diag", "--ops", "dwconv3,identity,add", "--max-len", "4", "--out", (d / "m.csv").string()}).code == 0);
  const std::string csv = slurp(d / "m.csv");
  CHECK(csv.rfind("variant,mu_delta_norm,topology_delta,topology,arch\n", 0) == 0);
  CHECK(lines(csv) == 5);
  CHECK(csv.find("\nexpert,0,0,") != std::string::npos);
  CHECK(cli({"modify-diag", "--expert", "plain_chain", "--out", (d / "p.csv").string()}).code == 2);
}

TEST_CASE("an unreachable external evaluator exits 3") {
  const fs::path d = scratch("ext");
  const Run r = cli(with({"search", "--evaluator", "external", "--plugin", "/nonexistent/plugin", "--out",
                          (d / "x").string()},
                         kSmall));
  CHECK(r.code == 3);
}

TEST_CASE("the external evaluator drives a search end to end") {
  const fs::path d = scratch("ext_ok");
  const Run r = cli(with({"search", "--evaluator", "external", "--plugin", std::string(ECHO_PLUGIN_PATH) + " layers",
                          "--window", "2", "--out", (d / "x").string()},
                         kSmall));
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(d / "x" / "convergence.csv")) == 11);
}

TEST_CASE("diff-search writes a trace and a cell") {
  const fs::path d = scratch("diff");
  const Run r = cli({"diff-search", "--ops", "dwconv3,identity,add", "--max-len", "3", "--nodes", "3", "--steps", "20",
                     "--out", (d / "x").string()});
  REQUIRE(r.code == 0);
  CHECK(lines(slurp(d / "x" / "trace.csv")) == 21);
  CHECK(fs::exists(d / "x" / "cell.json"));
}

TEST_CASE("the installed binary maps errors to exit codes") {
  auto status = [](const std::string& args) {
    const int raw = std::system((std::string(MIRRORNAS_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  };
  CHECK(status("--version") == 0);
  CHECK(status("irl-train --expert nosuch") == 2);
  CHECK(status("search --ops dwconv3,identity,add --max-len 3 --iterations 2 --samples-per-iteration 2 "
               "--evaluator external --plugin /nonexistent/plugin --out " +
               (fs::temp_directory_path() / "mirrornas_cli_bin").string()) == 3);
}
