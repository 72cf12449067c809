#pragma once

// Group-conditioned policy and the clipped, KL-penalised objective
//
//   L(theta) = mean_rows min(rho A~, clip(rho, 1-eps, 1+eps) A~)
//              - lambda_KL * sum_g KL(pi_old^g || pi_theta^g)
//
// where pi^g(a|s) = softmax(trunk(s) + group_bias[g]) and rho is the
// new/old probability ratio of the taken action.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "medgrpo/advantage.hpp"
#include "medgrpo/cluster.hpp"
#include "medgrpo/cohort.hpp"
#include "medgrpo/fusion.hpp"
#include "medgrpo/nn.hpp"

namespace medgrpo::grpo {

using nn::Matrix;
using nn::RowVector;
using nn::Vector;

struct PolicyParams {
  nn::Mlp trunk;      // pooled state -> logits
  Matrix group_bias;  // n_groups x n_actions

  int n_groups() const { return static_cast<int>(group_bias.rows()); }
  int n_actions() const { return static_cast<int>(group_bias.cols()); }
  int state_width() const { return trunk.in(); }

  nn::TensorViews tensors();
  nn::ConstTensorViews tensors() const;
};

/// tanh hidden layer, linear logits, zero group biases.
PolicyParams init_policy(int state_width, int n_actions, int n_groups, int hidden, Rng& rng);
PolicyParams zeros_like(const PolicyParams& policy);

/// theta_old: a read-only snapshot taken before an update round.
class FrozenPolicy {
 public:
  explicit FrozenPolicy(PolicyParams params) : params_(std::move(params)) {}
  const PolicyParams& params() const { return params_; }

 private:
  PolicyParams params_;
};

struct GrpoConfig {
  double clip = 0.2;
  double kl_weight = 0.01;
  advantage::AdvantageHyper advantage;
  double step_size = 3e-3;
  int epochs = 4;
  int minibatch = 64;
  int iterations = 150;
  int rollouts_per_patient = 1;
  bool normalize_advantages = true;

  int policy_hidden = 32;
  int value_hidden = 32;
  int value_epochs = 30;
  double value_step = 3e-3;

  void validate() const;
};

Vector action_logits(const PolicyParams& policy, const RowVector& state, int group);
Vector action_distribution(const PolicyParams& policy, const RowVector& state, int group);

/// pi_theta(a|s,g) / pi_old(a|s,g), evaluated as exp(log pi - log pi_old).
double probability_ratio(const PolicyParams& policy, const FrozenPolicy& frozen,
                         const RowVector& state, int group, int action);

double clipped_surrogate(double ratio, double advantage, double clip);

/// One transition as seen by the objective. `advantage` is whatever enters
/// the surrogate (A~, possibly standardised).
struct PolicySample {
  RowVector state;
  int group = 0;
  int action = 0;
  double advantage = 0.0;
};

/// KL(pi_old^g || pi_theta^g) averaged over each group's states; groups with
/// no samples get 0. Result has one entry per policy group.
std::vector<double> group_kl(const PolicyParams& policy, const FrozenPolicy& frozen,
                             std::span<const PolicySample> samples);

struct ObjectiveResult {
  double value = 0.0;      // surrogate - kl_weight * sum(kl)
  double surrogate = 0.0;
  std::vector<double> kl;  // per group
  PolicyParams grad;       // d value / d params (ascent direction)
};

/// Throws UsageError on an empty batch.
ObjectiveResult grpo_objective(const PolicyParams& policy, const FrozenPolicy& frozen,
                               std::span<const PolicySample> samples, double clip,
                               double kl_weight, bool with_gradient = true);

/// Plain clipped PPO objective with the ratio formed by direct division of
/// probabilities. Reference for the reduction check.
double ppo_objective(const PolicyParams& policy, const FrozenPolicy& frozen,
                     std::span<const PolicySample> samples, double clip);

/// Surrogate samples from an advantage batch: takes A~ from each row and
/// standardises it over the batch when `normalize` is set.
std::vector<PolicySample> make_policy_samples(const advantage::AdvantageBatch& batch,
                                              std::span<const RowVector> states,
                                              std::span<const int> actions, bool normalize);

// --- rollouts and training ---------------------------------------------------

/// One collected episode plus the pooled fused state seen before each action.
struct Episode {
  cohort::Trajectory trajectory;
  std::vector<RowVector> states;
  int group = 0;
};

/// Rollout-time policy: fuses the observation history and samples from
/// pi^g. `params == nullptr` means uniform random actions.
cohort::PolicyFn make_policy_fn(const cohort::Cohort& cohort, const fusion::FusionParams& fusion,
                                const PolicyParams* params, std::vector<RowVector>* pooled_out);

/// One episode per (patient, repeat). Each episode has its own stream derived
/// from (seed, iteration, patient, repeat), so the result does not depend on
/// `workers`.
std::vector<Episode> collect_episodes(const cohort::Cohort& cohort,
                                      const cluster::GroupAssignment& assignment,
                                      const fusion::FusionParams& fusion,
                                      const PolicyParams* policy, int repeats,
                                      std::uint64_t seed, int iteration, int workers = 1);

struct IterationLog {
  int iteration = 0;
  double mean_return = 0.0;          // mean discounted return from t = 0
  std::vector<double> group_returns; // NaN for groups with no patients
  std::vector<double> group_kl;
  double objective = 0.0;
  double fairness_gap = 0.0;         // max - min over present groups
  double wall_ms = 0.0;
};

struct TrainOptions {
  int workers = 1;
  bool record_wall_time = false;
  std::function<void(const IterationLog&)> on_iteration;
};

struct TrainResult {
  PolicyParams policy;
  advantage::ValueParams value;
  std::vector<IterationLog> log;
  advantage::AdvantageBatch last_batch;
};

/// Initial policy and value networks for a run; train() starts from these.
PolicyParams initial_policy(const fusion::FusionParams& fusion, int n_actions, int n_groups,
                            const GrpoConfig& config, std::uint64_t seed);
advantage::ValueParams initial_value(const fusion::FusionParams& fusion, int n_groups,
                                     const GrpoConfig& config, std::uint64_t seed);

/// Throws DivergenceError naming the iteration when a parameter turns
/// non-finite.
TrainResult train(const cohort::Cohort& cohort, const cluster::GroupAssignment& assignment,
                  const fusion::FusionParams& fusion, const GrpoConfig& config,
                  std::uint64_t seed, const TrainOptions& options = {});

/// Mean discounted return of a policy (nullptr: uniform random) over
/// `repeats` episodes per patient.
double evaluate_return(const cohort::Cohort& cohort, const cluster::GroupAssignment& assignment,
                       const fusion::FusionParams& fusion, const PolicyParams* policy,
                       int repeats, std::uint64_t seed);

/// max - min of the finite entries, 0 when fewer than two.
double fairness_gap(std::span<const double> group_returns);

}  // namespace medgrpo::grpo
