#pragma once

// Experiment orchestration: JSON configuration, the embedding -> clustering
// -> fusion pipeline, checkpoints, metrics, and the four CLI commands.
//
// Config document (every key optional, unknown keys rejected):
//   { "label", "seed", "output_dir",
//     "cohort":   { n_patients, n_latent_groups, modality_dims, horizon, n_actions,
//                   discount, state_dim, noise_std, feature_dim, feature_std,
//                   feature_separation, feature_clip, modality_noise_std, action_cost },
//     "fusion":   { hidden, heads, kernel_width },
//     "cluster":  { k, embed_dim, phi_hidden, max_iters, restarts },
//     "grpo":     { clip, kl_weight, alpha1, alpha2, alpha3, beta, step_size, epochs,
//                   minibatch, iterations, rollouts_per_patient, normalize_advantages,
//                   policy_hidden, value_hidden, value_epochs, value_step },
//     "ga":       { population, generations, tournament, crossover_rate, mutation_rate,
//                   elite, fitness_rollouts, candidates },
//     "mcts":     { budget, exploration, rollout_depth, eval_rollouts },
//     "ablation": { seeds, batches, eval_repeats } }
//
// Module seeds are never read from the document; each is derived from the
// master seed and the module name.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "medgrpo/cluster.hpp"
#include "medgrpo/cohort.hpp"
#include "medgrpo/fusion.hpp"
#include "medgrpo/grpo.hpp"
#include "medgrpo/search.hpp"

namespace medgrpo::experiment {

using nlohmann::json;

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kConfigError = 2,
  kDivergence = 3,
  kCheckFailed = 4,
};

struct ClusterConfig {
  int k = 3;
  int embed_dim = 4;
  int phi_hidden = 16;
  int max_iters = 100;
  int restarts = 10;
};

struct AblationConfig {
  int seeds = 5;
  int batches = 100;
  int eval_repeats = 4;
};

struct ExperimentConfig {
  std::string label = "default";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  cohort::CohortConfig cohort;
  fusion::FusionDims fusion;  // modality_dims always mirror cohort.modality_dims
  ClusterConfig cluster;
  grpo::GrpoConfig grpo;
  search::GaConfig ga;
  search::MctsConfig mcts;
  AblationConfig ablation;

  /// Validates every nested config; messages are prefixed with the key path.
  void validate() const;
  /// Copy with the per-module seeds filled in from the master seed.
  ExperimentConfig seeded() const;
};

std::uint64_t module_seed(std::uint64_t master, std::string_view module);

ExperimentConfig config_from_json(const json& doc);
json to_json(const ExperimentConfig& config);
ExperimentConfig parse_config(const std::string& text);
/// Throws ConfigError naming the path when the file cannot be read.
ExperimentConfig load_config(const std::filesystem::path& path);

/// Everything fixed before policy learning starts.
struct Pipeline {
  ExperimentConfig config;  // seeded
  cohort::Cohort cohort;
  nn::Mlp phi;
  cluster::GroupAssignment assignment;
  fusion::FusionParams fusion;
};

Pipeline build_pipeline(const ExperimentConfig& config);

struct Checkpoint {
  json config;  // the unseeded config the run was started from
  nn::Mlp phi;
  cluster::GroupAssignment assignment;
  fusion::FusionParams fusion;
  grpo::PolicyParams policy;
  advantage::ValueParams value;
};

json to_json(const Checkpoint& checkpoint);
Checkpoint checkpoint_from_json(const json& doc);
Checkpoint load_checkpoint(const std::filesystem::path& path);
std::string dump(const json& doc);

/// Throws ConfigError describing the first dimension that disagrees.
void check_compatible(const Checkpoint& checkpoint, const Pipeline& pipeline);

json cohort_to_json(const cohort::Cohort& cohort, const cluster::GroupAssignment& assignment);

/// Header `iteration,mean_return,ret_g1..gK,kl_g1..gK,objective,fairness_gap,wall_ms`.
std::string metrics_header(int n_groups);
std::string metrics_row(const grpo::IterationLog& log);

/// Mean discounted return per group of a fixed policy, `repeats` episodes
/// per patient.
std::vector<double> group_returns(const Pipeline& pipeline, const grpo::PolicyParams& policy,
                                  int repeats, std::uint64_t seed);

struct ReductionRow {
  int batch = 0;
  double grpo = 0.0;
  double ppo = 0.0;
  double abs_diff = 0.0;
};

/// Degenerate-GRPO vs direct clipped PPO on `batches` random minibatches of
/// transitions collected from the initial policy, each scored at a random
/// perturbation of it.
std::vector<ReductionRow> ppo_reduction(const ExperimentConfig& config, int batches);

struct SweepRow {
  double alpha3 = 0.0;
  double fairness_gap = 0.0;  // averaged over seeds
  double final_return = 0.0;  // averaged over seeds
  std::vector<double> per_seed_gap;
};

/// Matched-seed training runs over alpha3 in {0, 0.1, 0.5}.
std::vector<SweepRow> fairness_sweep(const ExperimentConfig& config, int workers = 1);

struct GradcheckLine {
  std::string module;
  nn::GradCheckReport report;
};

inline constexpr double kGradTolerance = 1e-4;

/// `corrupt` names a module whose analytic gradient is deliberately broken.
std::vector<GradcheckLine> run_gradchecks(const ExperimentConfig& config,
                                          const std::string& corrupt = {});

/// Search for one patient under a trained checkpoint.
search::HybridResult search_patient(const Pipeline& pipeline, const Checkpoint& checkpoint,
                                    int patient_id);
json search_report(const search::HybridResult& result, int patient_id, int group);

struct CommandOptions {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  int workers = 1;
  std::string checkpoint_path;
  int patient_id = 0;
  std::string mode;
  std::string corrupt;  // gradcheck test hook
};

int cmd_train(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_search(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_ablate(const CommandOptions& options, std::ostream& out, std::ostream& err);
int cmd_gradcheck(const CommandOptions& options, std::ostream& out, std::ostream& err);

}  // namespace medgrpo::experiment
