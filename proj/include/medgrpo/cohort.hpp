#pragma once

// Synthetic patient cohort: a group-structured linear-Gaussian MDP with
// discrete interventions, noisy multi-modal observations and a quadratic
// distance-to-target reward.
//
//   s' = A_g s + B_g onehot(a) + N(0, noise_std^2 I)
//   r  = -||s' - s*_g||^2 - action_cost * [a > 0]

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "medgrpo/nn.hpp"
#include "medgrpo/rng.hpp"
#include "medgrpo/series.hpp"

namespace medgrpo::cohort {

using nn::Matrix;
using nn::Vector;

struct CohortConfig {
  int n_patients = 32;
  int n_latent_groups = 3;
  int n_modalities = 3;
  std::vector<int> modality_dims{3, 3, 2};
  int horizon = 20;
  int n_actions = 4;  // action 0 is the no-op
  double discount = 0.95;
  int state_dim = 6;
  double noise_std = 0.05;
  std::uint64_t seed = 0;

  // Static features x_i: group means are placed `feature_separation`
  // standard deviations apart; within-group deviations are Gaussian,
  // truncated to a radius of `feature_clip` standard deviations.
  int feature_dim = 4;
  double feature_std = 1.0;
  double feature_separation = 6.0;
  double feature_clip = 2.5;

  double modality_noise_std = 0.05;
  double action_cost = 0.1;

  /// Throws ConfigError on the first violated invariant.
  void validate() const;
};

/// Generator parameters shared by every patient of one latent group.
struct GroupDynamics {
  Matrix transition;     // A_g, state_dim x state_dim, spectral radius <= 0.95
  Matrix action_effect;  // B_g, state_dim x n_actions, column 0 is zero
  Vector target;         // s*_g
  Vector initial_mean;   // mean of the reset distribution
  Vector feature_mean;   // mean of x_i for the group's patients
};

struct Cohort {
  CohortConfig config;
  std::vector<GroupDynamics> groups;
  std::vector<int> latent_group;  // hidden generator label per patient
  std::vector<Vector> features;   // x_i
  std::vector<Matrix> projections;  // P_m, d_m x state_dim

  int n_patients() const { return static_cast<int>(features.size()); }
  const GroupDynamics& dynamics_of(int patient_id) const;
};

struct PatientState {
  Vector physiological;
  Vector static_features;
  int time_index = 0;
};

struct StepRecord {
  int patient_id = 0;
  int time = 0;
  PatientState state;
  int action = 0;
  double reward = 0.0;
  PatientState next_state;
  bool done = false;
};

struct Trajectory {
  int patient_id = 0;
  std::vector<StepRecord> steps;

  std::vector<double> rewards() const;
};

inline constexpr double kMaxSpectralRadius = 0.95;

Cohort generate_cohort(const CohortConfig& config);

/// Deterministic in (seed, patient_id, episode). Throws UsageError for an
/// unknown patient.
PatientState reset(const Cohort& cohort, int patient_id, std::uint64_t episode);

/// Throws UsageError when `state` is already at the horizon or the action is
/// out of range.
StepRecord step(const Cohort& cohort, int patient_id, const PatientState& state, int action,
                Rng& rng);

double reward(const Cohort& cohort, int patient_id, const Vector& next_state, int action);

/// Modality m at row t is P_m s_t plus measurement noise seeded by
/// (cohort seed, patient, t, m), so a row does not depend on prefix length.
std::vector<ModalitySeries> observe_modalities(const Cohort& cohort, int patient_id,
                                               std::span<const PatientState> history);

/// States s_0 .. s_{prefix-1} of the trajectory.
std::vector<ModalitySeries> observe_modalities(const Cohort& cohort, const Trajectory& trajectory,
                                               std::size_t prefix);

/// What a policy sees before acting at `time`.
struct Observation {
  int patient_id = 0;
  int time = 0;
  int group = 0;
  std::span<const PatientState> history;  // s_0 .. s_time
};

/// Returns a probability vector over actions.
using PolicyFn = std::function<Vector(const Observation&)>;

/// Full-horizon episode. The reset episode counter, the step noise and the
/// action samples are all drawn from `stream`. Throws ContractViolation when
/// the policy returns an invalid distribution.
Trajectory rollout(const Cohort& cohort, int patient_id, int group, const PolicyFn& policy,
                   Rng& stream);

/// Inverse-CDF draw from a validated distribution.
int sample_action(const Vector& probabilities, Rng& rng);
void validate_distribution(const Vector& probabilities, int n_actions);

double spectral_radius(const Matrix& m);

}  // namespace medgrpo::cohort
