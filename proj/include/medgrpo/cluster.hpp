#pragma once

// Patient embedding through a frozen network and k-means grouping.

#include <cstdint>
#include <span>
#include <vector>

#include "medgrpo/nn.hpp"
#include "medgrpo/rng.hpp"

namespace medgrpo::cluster {

using nn::Vector;

struct PatientEmbedding {
  int patient_id = 0;
  Vector vector;
};

/// Labels are 0-based: g in [0, n_groups).
struct GroupAssignment {
  std::vector<int> labels;
  std::vector<Vector> centroids;
  int n_groups = 0;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // after every assignment step of the kept run
  int iterations = 0;
};

/// Random embedding network {feature_dim -> hidden (tanh) -> embed_dim}.
/// Never trained.
nn::Mlp make_phi(int feature_dim, int hidden, int embed_dim, Rng& rng);
/// Single identity layer, useful when clustering raw features.
nn::Mlp identity_phi(int dim);

PatientEmbedding embed(const nn::Mlp& phi, int patient_id, const Vector& features);
std::vector<PatientEmbedding> embed_all(const nn::Mlp& phi, std::span<const Vector> features);

struct KMeansOptions {
  int k = 3;
  std::uint64_t seed = 0;
  int max_iters = 100;
  int restarts = 10;
};

/// k-means++ seeding followed by Lloyd iterations, repeated `restarts`
/// times; the lowest-inertia run is kept (earliest wins ties). Nearest
/// centroid ties go to the lowest index and an emptied cluster is re-seeded
/// at the point farthest from its centroid.
/// Throws UsageError when k exceeds the number of distinct points.
GroupAssignment kmeans(std::span<const Vector> points, const KMeansOptions& options);
GroupAssignment kmeans(std::span<const PatientEmbedding> embeddings, const KMeansOptions& options);

/// Patients labelled g, ascending. Empty groups give an empty vector.
std::vector<int> group_members(const GroupAssignment& assignment, int g);

/// Sum of squared distances of every point to its labelled centroid.
double inertia(std::span<const Vector> points, const std::vector<int>& labels,
               const std::vector<Vector>& centroids);

/// True when `a` equals `b` up to a relabelling of groups.
bool same_partition(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace medgrpo::cluster
