#include "medgrpo/cluster.hpp"

#include <algorithm>
#include <limits>
#include <map>
#include <set>
#include <string>

#include "medgrpo/errors.hpp"

namespace medgrpo::cluster {

nn::Mlp make_phi(int feature_dim, int hidden, int embed_dim, Rng& rng) {
  return nn::make_mlp({feature_dim, hidden, embed_dim}, nn::Activation::tanh,
                      nn::Activation::identity, rng);
}

nn::Mlp identity_phi(int dim) {
  nn::Mlp phi;
  nn::DenseLayer layer;
  layer.weight = nn::Matrix::Identity(dim, dim);
  layer.bias = nn::RowVector::Zero(dim);
  layer.activation = nn::Activation::identity;
  phi.layers.push_back(std::move(layer));
  return phi;
}

PatientEmbedding embed(const nn::Mlp& phi, int patient_id, const Vector& features) {
  if (features.size() != phi.in())
    throw ConfigError("embed: network expects " + std::to_string(phi.in()) + " features, got " +
                      std::to_string(features.size()));
  const nn::Matrix row = features.transpose();
  const auto fwd = nn::forward_mlp(phi, row);
  return {patient_id, fwd.output.row(0).transpose()};
}

std::vector<PatientEmbedding> embed_all(const nn::Mlp& phi, std::span<const Vector> features) {
  std::vector<PatientEmbedding> out;
  out.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i)
    out.push_back(embed(phi, static_cast<int>(i), features[i]));
  return out;
}

double inertia(std::span<const Vector> points, const std::vector<int>& labels,
               const std::vector<Vector>& centroids) {
  double total = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i)
    total += (points[i] - centroids[static_cast<std::size_t>(labels[i])]).squaredNorm();
  return total;
}

namespace {

int nearest(const Vector& p, const std::vector<Vector>& centroids) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centroids.size(); ++c) {
    const double d = (p - centroids[c]).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

std::vector<Vector> plus_plus_seeds(std::span<const Vector> points, int k, Rng& rng) {
  const std::size_t n = points.size();
  std::vector<Vector> centroids;
  std::vector<bool> chosen(n, false);
  const auto first = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(n) - 1));
  centroids.push_back(points[first]);
  chosen[first] = true;
  std::vector<double> d2(n);
  while (static_cast<int>(centroids.size()) < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& c : centroids) best = std::min(best, (points[i] - c).squaredNorm());
      d2[i] = best;
      total += best;
    }
    std::size_t pick = n;
    if (total > 0.0) {
      const double u = uniform01(rng) * total;
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && u < acc) {
          pick = i;
          break;
        }
      }
      if (pick == n)
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
    }
    chosen[pick] = true;
    centroids.push_back(points[pick]);
  }
  return centroids;
}

GroupAssignment lloyd(std::span<const Vector> points, std::vector<Vector> centroids,
                      int max_iters) {
  const std::size_t n = points.size();
  const int k = static_cast<int>(centroids.size());
  GroupAssignment out;
  out.n_groups = k;
  std::vector<int> labels(n, -1);

  for (int iter = 0; iter < max_iters; ++iter) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      const int l = nearest(points[i], centroids);
      if (l != labels[i]) {
        labels[i] = l;
        changed = true;
      }
    }
    out.inertia_history.push_back(inertia(points, labels, centroids));
    out.iterations = iter + 1;
    if (!changed) break;

    std::vector<Vector> sums(static_cast<std::size_t>(k), Vector::Zero(points[0].size()));
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums[static_cast<std::size_t>(labels[i])] += points[i];
      ++counts[static_cast<std::size_t>(labels[i])];
    }
    for (int c = 0; c < k; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      if (counts[cu] > 0) {
        centroids[cu] = sums[cu] / counts[cu];
        continue;
      }
      std::size_t far = 0;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = (points[i] - centroids[static_cast<std::size_t>(labels[i])]).squaredNorm();
        if (d > far_d) {
          far_d = d;
          far = i;
        }
      }
      centroids[cu] = points[far];
    }
  }

  out.labels = labels;
  out.centroids = centroids;
  out.inertia = inertia(points, labels, centroids);
  return out;
}

}  // namespace

GroupAssignment kmeans(std::span<const Vector> points, const KMeansOptions& options) {
  const int k = options.k;
  if (k < 1) throw UsageError("kmeans: k must be >= 1");
  if (options.max_iters < 1) throw UsageError("kmeans: max_iters must be >= 1");
  if (static_cast<std::size_t>(k) > points.size())
    throw UsageError("kmeans: k = " + std::to_string(k) + " exceeds the number of points (" +
                     std::to_string(points.size()) + ")");
  std::set<std::vector<double>> distinct;
  for (const auto& p : points) distinct.insert(std::vector<double>(p.data(), p.data() + p.size()));
  if (static_cast<std::size_t>(k) > distinct.size())
    throw UsageError("kmeans: k exceeds the number of distinct points");

  GroupAssignment best;
  bool have = false;
  const int restarts = std::max(1, options.restarts);
  for (int r = 0; r < restarts; ++r) {
    Rng rng(derive_seed(options.seed, "kmeans", r));
    auto run = lloyd(points, plus_plus_seeds(points, k, rng), options.max_iters);
    if (!have || run.inertia < best.inertia) {
      best = std::move(run);
      have = true;
    }
  }
  return best;
}

GroupAssignment kmeans(std::span<const PatientEmbedding> embeddings, const KMeansOptions& options) {
  std::vector<Vector> points;
  points.reserve(embeddings.size());
  for (const auto& e : embeddings) points.push_back(e.vector);
  return kmeans(points, options);
}

std::vector<int> group_members(const GroupAssignment& assignment, int g) {
  if (g < 0 || g >= assignment.n_groups)
    throw UsageError("group_members: group " + std::to_string(g) + " out of range");
  std::vector<int> members;
  for (std::size_t i = 0; i < assignment.labels.size(); ++i)
    if (assignment.labels[i] == g) members.push_back(static_cast<int>(i));
  return members;
}

bool same_partition(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size()) return false;
  std::map<int, int> fwd, back;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto [it, fresh] = fwd.emplace(a[i], b[i]);
    if (!fresh && it->second != b[i]) return false;
    auto [jt, fresh2] = back.emplace(b[i], a[i]);
    if (!fresh2 && jt->second != a[i]) return false;
  }
  return true;
}

}  // namespace medgrpo::cluster
