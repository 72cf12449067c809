#pragma once

#include <vector>

#include "medgrpo/cohort.hpp"
#include "medgrpo/nn.hpp"
#include "medgrpo/search.hpp"

namespace testing {

using medgrpo::nn::Matrix;
using medgrpo::nn::RowVector;
using medgrpo::nn::Vector;

inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, medgrpo::Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * medgrpo::normal(rng);
  return m;
}

inline Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

inline RowVector row(std::initializer_list<double> xs) { return vec(xs).transpose(); }

/// Within-cluster sum of squares with centroids taken as member means.
inline double partition_inertia(const std::vector<Vector>& points, const std::vector<int>& labels,
                                int k) {
  std::vector<Vector> sum(static_cast<std::size_t>(k), Vector::Zero(points[0].size()));
  std::vector<int> count(static_cast<std::size_t>(k), 0);
  for (std::size_t i = 0; i < points.size(); ++i) {
    sum[static_cast<std::size_t>(labels[i])] += points[i];
    ++count[static_cast<std::size_t>(labels[i])];
  }
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto g = static_cast<std::size_t>(labels[i]);
    total += (points[i] - sum[g] / count[g]).squaredNorm();
  }
  return total;
}

/// Small zero-noise cohort: every plan is enumerable.
inline medgrpo::cohort::CohortConfig toy_config(int horizon, int n_actions, std::uint64_t seed) {
  medgrpo::cohort::CohortConfig c;
  c.n_patients = 3;
  c.n_latent_groups = 1;
  c.horizon = horizon;
  c.n_actions = n_actions;
  c.noise_std = 0.0;
  c.modality_noise_std = 0.0;
  c.seed = seed;
  return c;
}

/// One-step bandit with deterministic rewards per action.
inline medgrpo::search::PlanningModel bandit(std::vector<double> rewards) {
  medgrpo::search::PlanningModel m;
  m.horizon = 1;
  m.n_actions = static_cast<int>(rewards.size());
  m.discount = 0.9;
  m.reset = [](std::uint64_t) {
    medgrpo::cohort::PatientState s;
    s.physiological = Vector::Zero(1);
    return s;
  };
  m.step = [rewards](const medgrpo::cohort::PatientState& s, int a, medgrpo::Rng&) {
    medgrpo::cohort::StepRecord r;
    r.time = s.time_index;
    r.state = s;
    r.action = a;
    r.reward = rewards[static_cast<std::size_t>(a)];
    r.next_state = s;
    r.next_state.time_index = s.time_index + 1;
    r.done = true;
    return r;
  };
  return m;
}

}  // namespace testing
