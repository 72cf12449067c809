#include <iostream>

#include "CLI11.hpp"

#include "medgrpo/experiment.hpp"

namespace ex = medgrpo::experiment;

namespace {

void add_common(CLI::App* cmd, ex::CommandOptions& o, std::uint64_t& seed, std::string& out) {
  cmd->add_option("--config", o.config_path, "experiment config (JSON)")->required();
  cmd->add_option("--seed", seed, "master seed, overrides the config");
  cmd->add_option("--out", out, "output directory, overrides the config");
  cmd->add_option("--workers", o.workers, "rollout worker threads")->capture_default_str();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Group-relative policy learning and plan search on a synthetic cohort"};
  app.require_subcommand(1);

  ex::CommandOptions o;
  std::uint64_t seed = 0;
  std::string out;

  auto* train = app.add_subcommand("train", "cluster patients and train the policy");
  add_common(train, o, seed, out);

  auto* search = app.add_subcommand("search", "GA + MCTS plan search for one patient");
  add_common(search, o, seed, out);
  search->add_option("--checkpoint", o.checkpoint_path, "checkpoint.json from train")->required();
  search->add_option("--patient", o.patient_id, "patient id")->required();

  auto* ablate = app.add_subcommand("ablate", "ppo_reduction or fairness_sweep");
  add_common(ablate, o, seed, out);
  ablate->add_option("--mode", o.mode, "ppo_reduction | fairness_sweep")->required();

  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(gradcheck, o, seed, out);
  gradcheck->add_option("--corrupt", o.corrupt)->group("");  // test hook

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : ex::kConfigError;
  }

  for (auto* cmd : {train, search, ablate, gradcheck}) {
    if (!cmd->parsed()) continue;
    if (cmd->count("--seed")) o.seed = seed;
    if (cmd->count("--out")) o.out_dir = out;
  }

  if (*train) return ex::cmd_train(o, std::cout, std::cerr);
  if (*search) return ex::cmd_search(o, std::cout, std::cerr);
  if (*ablate) return ex::cmd_ablate(o, std::cout, std::cerr);
  return ex::cmd_gradcheck(o, std::cout, std::cerr);
}
