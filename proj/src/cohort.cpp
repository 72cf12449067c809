#include "medgrpo/cohort.hpp"

#include <cmath>
#include <string>

#include <Eigen/Eigenvalues>

#include "medgrpo/errors.hpp"

namespace medgrpo::cohort {

void CohortConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("cohort: " + msg); };
  if (n_patients < 1) fail("n_patients must be >= 1");
  if (n_latent_groups < 1) fail("n_latent_groups must be >= 1");
  if (n_modalities < 1) fail("n_modalities must be >= 1");
  if (static_cast<int>(modality_dims.size()) != n_modalities)
    fail("modality_dims must have exactly n_modalities entries");
  for (int d : modality_dims)
    if (d < 1) fail("every modality dimension must be >= 1");
  if (horizon < 1) fail("horizon must be >= 1");
  if (n_actions < 2) fail("n_actions must be >= 2");
  if (!(discount >= 0.0 && discount < 1.0)) fail("discount must lie in [0, 1)");
  if (state_dim < 1) fail("state_dim must be >= 1");
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (feature_dim < 1) fail("feature_dim must be >= 1");
  if (!(feature_std > 0.0)) fail("feature_std must be > 0");
  if (!(feature_separation >= 0.0)) fail("feature_separation must be >= 0");
  if (!(feature_clip >= 0.0)) fail("feature_clip must be >= 0");
  if (!(modality_noise_std >= 0.0)) fail("modality_noise_std must be >= 0");
  if (!(action_cost >= 0.0)) fail("action_cost must be >= 0");
}

const GroupDynamics& Cohort::dynamics_of(int patient_id) const {
  if (patient_id < 0 || patient_id >= n_patients())
    throw UsageError("unknown patient " + std::to_string(patient_id));
  return groups[static_cast<std::size_t>(latent_group[static_cast<std::size_t>(patient_id)])];
}

std::vector<double> Trajectory::rewards() const {
  std::vector<double> r;
  r.reserve(steps.size());
  for (const auto& s : steps) r.push_back(s.reward);
  return r;
}

double spectral_radius(const Matrix& m) {
  Eigen::MatrixXd col = m;
  Eigen::EigenSolver<Eigen::MatrixXd> solver(col, false);
  return solver.eigenvalues().cwiseAbs().maxCoeff();
}

namespace {

Matrix gaussian_matrix(int rows, int cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal(rng);
  return m;
}

Vector feature_mean_for(int group, const CohortConfig& c) {
  Vector mu = Vector::Zero(c.feature_dim);
  if (c.n_latent_groups == 1) return mu;
  const double sep = c.feature_separation * c.feature_std;
  if (c.n_latent_groups <= c.feature_dim) {
    // Scaled basis vectors: every pair of means is exactly `sep` apart.
    mu[group] = sep / std::sqrt(2.0);
  } else {
    mu[0] = sep * group;
  }
  return mu;
}

Vector truncated_gaussian(int dim, double stddev, double clip, Rng& rng) {
  Vector v(dim);
  for (;;) {
    for (int i = 0; i < dim; ++i) v[i] = normal(rng);
    if (clip <= 0.0 || v.norm() <= clip) break;
  }
  return stddev * v;
}

}  // namespace

Cohort generate_cohort(const CohortConfig& config) {
  config.validate();
  Cohort cohort;
  cohort.config = config;
  const int d = config.state_dim;
  const int na = config.n_actions;
  Rng rng(derive_seed(config.seed, "cohort.dynamics"));

  for (int g = 0; g < config.n_latent_groups; ++g) {
    GroupDynamics dyn;
    Matrix a = 0.6 * Matrix::Identity(d, d) + gaussian_matrix(d, d, 0.3 / std::sqrt(double(d)), rng);
    const double radius = spectral_radius(a);
    if (radius > kMaxSpectralRadius) a *= kMaxSpectralRadius / radius;
    dyn.transition = a;

    dyn.action_effect = gaussian_matrix(d, na, 1.0 / std::sqrt(double(d)), rng);
    dyn.action_effect.col(0).setZero();

    // Each group's target is the steady state of holding its preferred
    // intervention, so the best action differs between groups.
    const int preferred = 1 + g % (na - 1);
    const Matrix lhs = Matrix::Identity(d, d) - a;
    dyn.target = lhs.fullPivLu().solve(Vector(dyn.action_effect.col(preferred)));

    dyn.initial_mean = Vector(gaussian_matrix(d, 1, 0.5, rng));
    dyn.feature_mean = feature_mean_for(g, config);
    cohort.groups.push_back(std::move(dyn));
  }

  for (int m = 0; m < config.n_modalities; ++m) {
    const int dm = config.modality_dims[static_cast<std::size_t>(m)];
    cohort.projections.push_back(gaussian_matrix(dm, d, 1.0 / std::sqrt(double(d)), rng));
  }

  Rng feature_rng(derive_seed(config.seed, "cohort.features"));
  for (int i = 0; i < config.n_patients; ++i) {
    const int g = i % config.n_latent_groups;
    cohort.latent_group.push_back(g);
    Vector x = cohort.groups[static_cast<std::size_t>(g)].feature_mean +
               truncated_gaussian(config.feature_dim, config.feature_std, config.feature_clip,
                                  feature_rng);
    cohort.features.push_back(std::move(x));
  }
  return cohort;
}

PatientState reset(const Cohort& cohort, int patient_id, std::uint64_t episode) {
  const auto& dyn = cohort.dynamics_of(patient_id);
  Rng rng(derive_seed(cohort.config.seed, "cohort.reset", patient_id, episode));
  PatientState s;
  s.physiological = dyn.initial_mean;
  if (cohort.config.noise_std > 0.0)
    for (Eigen::Index i = 0; i < s.physiological.size(); ++i)
      s.physiological[i] += normal(rng, 0.0, cohort.config.noise_std);
  s.static_features = cohort.features[static_cast<std::size_t>(patient_id)];
  s.time_index = 0;
  return s;
}

double reward(const Cohort& cohort, int patient_id, const Vector& next_state, int action) {
  const auto& dyn = cohort.dynamics_of(patient_id);
  const double cost = action > 0 ? cohort.config.action_cost : 0.0;
  return -(next_state - dyn.target).squaredNorm() - cost;
}

StepRecord step(const Cohort& cohort, int patient_id, const PatientState& state, int action,
                Rng& rng) {
  const auto& c = cohort.config;
  const auto& dyn = cohort.dynamics_of(patient_id);
  if (state.time_index >= c.horizon)
    throw UsageError("step: episode already finished at t=" + std::to_string(state.time_index));
  if (state.time_index < 0) throw UsageError("step: negative time index");
  if (action < 0 || action >= c.n_actions)
    throw UsageError("step: action " + std::to_string(action) + " out of range");

  StepRecord rec;
  rec.patient_id = patient_id;
  rec.time = state.time_index;
  rec.state = state;
  rec.action = action;
  rec.next_state.physiological =
      dyn.transition * state.physiological + dyn.action_effect.col(action);
  if (c.noise_std > 0.0)
    for (Eigen::Index i = 0; i < rec.next_state.physiological.size(); ++i)
      rec.next_state.physiological[i] += normal(rng, 0.0, c.noise_std);
  rec.next_state.static_features = state.static_features;
  rec.next_state.time_index = state.time_index + 1;
  rec.reward = reward(cohort, patient_id, rec.next_state.physiological, action);
  rec.done = rec.time + 1 == c.horizon;
  return rec;
}

std::vector<ModalitySeries> observe_modalities(const Cohort& cohort, int patient_id,
                                               std::span<const PatientState> history) {
  if (history.empty()) throw UsageError("observe_modalities: empty history");
  cohort.dynamics_of(patient_id);
  const auto& c = cohort.config;
  std::vector<ModalitySeries> out;
  for (int m = 0; m < c.n_modalities; ++m) {
    const Matrix& proj = cohort.projections[static_cast<std::size_t>(m)];
    ModalitySeries series;
    series.modality_id = m;
    series.data.resize(static_cast<Eigen::Index>(history.size()), proj.rows());
    for (std::size_t t = 0; t < history.size(); ++t) {
      Vector row = proj * history[t].physiological;
      if (c.modality_noise_std > 0.0) {
        Rng rng(derive_seed(c.seed, "cohort.observe", patient_id, history[t].time_index, m));
        for (Eigen::Index j = 0; j < row.size(); ++j) row[j] += normal(rng, 0.0, c.modality_noise_std);
      }
      series.data.row(static_cast<Eigen::Index>(t)) = row.transpose();
    }
    out.push_back(std::move(series));
  }
  return out;
}

std::vector<ModalitySeries> observe_modalities(const Cohort& cohort, const Trajectory& trajectory,
                                               std::size_t prefix) {
  if (prefix == 0 || prefix > trajectory.steps.size())
    throw UsageError("observe_modalities: prefix length out of range");
  std::vector<PatientState> history;
  history.reserve(prefix);
  for (std::size_t t = 0; t < prefix; ++t) history.push_back(trajectory.steps[t].state);
  return observe_modalities(cohort, trajectory.patient_id, history);
}

void validate_distribution(const Vector& p, int n_actions) {
  if (p.size() != n_actions)
    throw ContractViolation("policy returned " + std::to_string(p.size()) +
                            " probabilities for " + std::to_string(n_actions) + " actions");
  for (Eigen::Index i = 0; i < p.size(); ++i)
    if (!(p[i] >= 0.0)) throw ContractViolation("policy returned negative or NaN probability mass");
  if (std::abs(p.sum() - 1.0) > 1e-6)
    throw ContractViolation("policy distribution sums to " + std::to_string(p.sum()));
}

int sample_action(const Vector& p, Rng& rng) {
  const double u = uniform01(rng);
  double acc = 0.0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return static_cast<int>(i);
  }
  // u landed in the rounding slack above the cumulative sum.
  for (Eigen::Index i = p.size(); i-- > 0;)
    if (p[i] > 0.0) return static_cast<int>(i);
  return 0;
}

Trajectory rollout(const Cohort& cohort, int patient_id, int group, const PolicyFn& policy,
                   Rng& stream) {
  const auto& c = cohort.config;
  Trajectory traj;
  traj.patient_id = patient_id;
  std::vector<PatientState> history;
  history.reserve(static_cast<std::size_t>(c.horizon));
  history.push_back(reset(cohort, patient_id, stream()));
  for (int t = 0; t < c.horizon; ++t) {
    Observation obs{patient_id, t, group, history};
    const Vector p = policy(obs);
    validate_distribution(p, c.n_actions);
    const int a = sample_action(p, stream);
    StepRecord rec = step(cohort, patient_id, history.back(), a, stream);
    if (!rec.done) history.push_back(rec.next_state);
    traj.steps.push_back(std::move(rec));
  }
  return traj;
}

}  // namespace medgrpo::cohort
