#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "medgrpo/errors.hpp"
#include "medgrpo/experiment.hpp"

using namespace medgrpo;
using namespace medgrpo::experiment;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("medgrpo_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path write_config(const fs::path& dir, const std::string& text) {
  const fs::path p = dir / "config.json";
  std::ofstream(p, std::ios::binary) << text;
  return p;
}

const char* kSmall = R"({
  "cohort": {"n_patients": 9, "horizon": 6},
  "grpo": {"iterations": 3},
  "ga": {"population": 16, "generations": 5},
  "mcts": {"budget": 30},
  "ablation": {"seeds": 1, "batches": 10, "eval_repeats": 1}
})";

const char* kToy = R"({
  "cohort": {"n_patients": 3, "n_latent_groups": 1, "horizon": 4, "n_actions": 3,
             "noise_std": 0.0, "modality_noise_std": 0.0},
  "cluster": {"k": 1},
  "grpo": {"iterations": 0},
  "ga": {"population": 24, "generations": 15, "candidates": 3},
  "mcts": {"budget": 60}
})";

struct Run {
  int code;
  std::string out, err;
};

template <typename Cmd>
Run run(Cmd cmd, const CommandOptions& o) {
  std::ostringstream out, err;
  const int code = cmd(o, out, err);
  return {code, out.str(), err.str()};
}

CommandOptions options(const fs::path& config, const fs::path& out) {
  CommandOptions o;
  o.config_path = config.string();
  o.out_dir = out.string();
  return o;
}

}  // namespace

TEST_CASE("empty document gives the defaults") {
  const auto c = parse_config("{}");
  CHECK(c.cohort.n_patients == 32);
  CHECK(c.cluster.k == 3);
  CHECK(c.grpo.iterations == 150);
  CHECK(c.ga.candidates == 5);
  CHECK(to_json(config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("config errors name the offending key") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(R"({"grpo": {"clipp": 0.2}})").find("grpo.clipp: unknown key") != std::string::npos);
  CHECK(message(R"({"cohort": {"horizon": "long"}})").find("cohort.horizon") != std::string::npos);
  CHECK(message(R"({"grpo": {"clip": 1.5}})").find("grpo") != std::string::npos);
  CHECK(message(R"({"seed": -1})").find("seed") != std::string::npos);
  CHECK(message("{\n  \"seed\": 1,\n  oops\n}").find("line 3") != std::string::npos);
  CHECK(message(R"({"cluster": {"k": 40}})").find("cluster") != std::string::npos);
}

TEST_CASE("missing config file") {
  const auto dir = scratch("missing");
  const auto r = run(cmd_train, options(dir / "nope.json", dir / "out"));
  CHECK(r.code == kConfigError);
  CHECK(r.err.find("nope.json") != std::string::npos);
}

TEST_CASE("module seeds are distinct and stable") {
  ExperimentConfig c;
  c.seed = 42;
  const auto a = c.seeded(), b = c.seeded();
  CHECK(a.cohort.seed == b.cohort.seed);
  CHECK(a.cohort.seed != a.ga.seed);
  CHECK(a.ga.seed != a.mcts.seed);
  c.seed = 43;
  CHECK(c.seeded().cohort.seed != a.cohort.seed);
}

TEST_CASE("metrics header") {
  CHECK(metrics_header(3) ==
        "iteration,mean_return,ret_g1,ret_g2,ret_g3,kl_g1,kl_g2,kl_g3,objective,fairness_gap,wall_ms");
  grpo::IterationLog log;
  log.group_returns = {1, 2};
  log.group_kl = {0, 0};
  const auto row = metrics_row(log);
  CHECK(std::count(row.begin(), row.end(), ',') == 8);
}

TEST_CASE("train with zero iterations writes a header and a loadable checkpoint") {
  const auto dir = scratch("train0");
  const auto cfg = write_config(dir, R"({"cohort": {"n_patients": 6}, "grpo": {"iterations": 0}})");
  const auto r = run(cmd_train, options(cfg, dir / "out"));
  REQUIRE(r.code == kOk);
  CHECK(r.out.find("final mean return") != std::string::npos);
  CHECK(slurp(dir / "out" / "metrics.csv") == metrics_header(3) + "\n");
  CHECK_NOTHROW(load_checkpoint(dir / "out" / "checkpoint.json"));
  CHECK(fs::exists(dir / "out" / "cohort.json"));
}

TEST_CASE("train is byte-identical on rerun and checkpoints round trip") {
  const auto dir = scratch("train_det");
  const auto cfg = write_config(dir, kSmall);
  REQUIRE(run(cmd_train, options(cfg, dir / "a")).code == kOk);
  REQUIRE(run(cmd_train, options(cfg, dir / "b")).code == kOk);
  for (const char* f : {"metrics.csv", "checkpoint.json", "cohort.json", "advantages.csv"})
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));

  const std::string text = slurp(dir / "a" / "checkpoint.json");
  CHECK(dump(to_json(load_checkpoint(dir / "a" / "checkpoint.json"))) == text);

  std::istringstream metrics(slurp(dir / "a" / "metrics.csv"));
  std::string line;
  std::getline(metrics, line);
  const auto columns = std::count(line.begin(), line.end(), ',');
  int rows = 0;
  while (std::getline(metrics, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == columns);
    ++rows;
  }
  CHECK(rows == 3);

  auto seeded = options(cfg, dir / "c");
  seeded.seed = 5;
  REQUIRE(run(cmd_train, seeded).code == kOk);
  CHECK(slurp(dir / "c" / "metrics.csv") != slurp(dir / "a" / "metrics.csv"));
}

TEST_CASE("search on a deterministic toy cohort finds the enumerated optimum") {
  const auto dir = scratch("search");
  const auto cfg = write_config(dir, kToy);
  REQUIRE(run(cmd_train, options(cfg, dir / "train")).code == kOk);
  auto o = options(cfg, dir / "s1");
  o.checkpoint_path = (dir / "train" / "checkpoint.json").string();
  o.patient_id = 1;
  const auto r = run(cmd_search, o);
  REQUIRE(r.code == kOk);
  const auto report = json::parse(slurp(dir / "s1" / "search_report.json"));
  CHECK(report.at("candidates").size() == 3);

  const auto pipeline = build_pipeline(parse_config(kToy));
  const auto model = search::make_model(pipeline.cohort, 1);
  const auto [plan, best] = search::brute_force_optimum(model, 1, 0);
  CHECK(report.at("best_estimate").get<double>() == doctest::Approx(best).epsilon(1e-9));

  o.out_dir = (dir / "s2").string();
  REQUIRE(run(cmd_search, o).code == kOk);
  CHECK(slurp(dir / "s1" / "search_report.json") == slurp(dir / "s2" / "search_report.json"));

  o.patient_id = 3;
  const auto missing = run(cmd_search, o);
  CHECK(missing.code == kConfigError);
  CHECK(missing.err.find("patient 3") != std::string::npos);
}

TEST_CASE("search rejects a checkpoint from different dimensions") {
  const auto dir = scratch("mismatch");
  const auto cfg = write_config(dir, kToy);
  REQUIRE(run(cmd_train, options(cfg, dir / "train")).code == kOk);
  std::string other = kToy;
  other.replace(other.find("\"cluster\""), 0, "\"fusion\": {\"hidden\": 4},\n  ");
  const auto cfg2 = dir / "other.json";
  std::ofstream(cfg2) << other;
  auto o = options(cfg2, dir / "s");
  o.checkpoint_path = (dir / "train" / "checkpoint.json").string();
  const auto r = run(cmd_search, o);
  CHECK(r.code == kConfigError);
  CHECK(r.err.find("checkpoint does not match config") != std::string::npos);
}

TEST_CASE("ablations") {
  const auto dir = scratch("ablate");
  const auto cfg = write_config(dir, kSmall);
  auto o = options(cfg, dir / "out");
  o.mode = "bogus";
  const auto bad = run(cmd_ablate, o);
  CHECK(bad.code == kConfigError);
  CHECK(bad.err.find("ppo_reduction, fairness_sweep") != std::string::npos);

  o.mode = "ppo_reduction";
  CHECK(run(cmd_ablate, o).code == kOk);
  for (const auto& row : ppo_reduction(parse_config(kSmall), 10)) CHECK(row.abs_diff < 1e-10);

  o.mode = "fairness_sweep";
  REQUIRE(run(cmd_ablate, o).code == kOk);
  std::istringstream csv(slurp(dir / "out" / "ablation_fairness_sweep.csv"));
  std::string line;
  int rows = -1;
  while (std::getline(csv, line)) ++rows;
  CHECK(rows == 3);
}

TEST_CASE("gradcheck reports all modules and catches corruption") {
  const auto dir = scratch("gradcheck");
  const auto cfg = write_config(dir, "{}");
  auto o = options(cfg, dir / "out");
  const auto ok = run(cmd_gradcheck, o);
  CHECK(ok.code == kOk);
  for (const char* m : {"fusion_encoder", "policy_objective", "value_regression"})
    CHECK(ok.out.find(m) != std::string::npos);
  for (const char* m : {"fusion_encoder", "policy_objective", "value_regression"}) {
    o.corrupt = m;
    const auto bad = run(cmd_gradcheck, o);
    CHECK(bad.code == kCheckFailed);
    CHECK(bad.err.find(m) != std::string::npos);
  }
}
