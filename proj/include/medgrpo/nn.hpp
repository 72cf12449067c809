#pragma once

// Dense network substrate shared by every learned component: row-major
// matrices, MLP forward/backward with hand-derived gradients, the Adam
// optimizer, and a central-difference gradient checker.
//
// Convention: a batch is a matrix with one sample per row, and a layer maps
// x (batch x in) to act(x * W^T + b) with W stored out x in.

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "medgrpo/rng.hpp"

namespace medgrpo::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using TensorViews = std::vector<std::span<double>>;
using ConstTensorViews = std::vector<std::span<const double>>;

template <typename Derived>
std::span<double> view(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}
template <typename Derived>
std::span<const double> view(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

enum class Activation { identity, relu, sigmoid, tanh };

std::string_view to_string(Activation a);
Activation activation_from_string(std::string_view name);

double activate(Activation a, double x);
/// Derivative expressed through the pre-activation x and output y = act(x).
double activate_derivative(Activation a, double x, double y);

struct DenseLayer {
  Matrix weight;   // out x in
  RowVector bias;  // out
  Activation activation = Activation::identity;

  int in() const { return static_cast<int>(weight.cols()); }
  int out() const { return static_cast<int>(weight.rows()); }
};

/// Glorot-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero bias.
DenseLayer make_dense(int in, int out, Activation activation, Rng& rng);

struct Mlp {
  std::vector<DenseLayer> layers;

  int in() const { return layers.empty() ? 0 : layers.front().in(); }
  int out() const { return layers.empty() ? 0 : layers.back().out(); }

  TensorViews tensors();
  ConstTensorViews tensors() const;
};

/// sizes = {in, hidden..., out}; hidden layers use `hidden`, the last `output`.
Mlp make_mlp(const std::vector<int>& sizes, Activation hidden, Activation output, Rng& rng);

/// Zero-valued copy with identical shapes; also serves as a gradient buffer.
Mlp zeros_like(const Mlp& mlp);

struct MlpCache {
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each layer
  std::vector<Matrix> post;    // activation output of each layer
  bool empty() const { return inputs.empty(); }
};

struct MlpForward {
  Matrix output;
  MlpCache cache;
};

struct MlpBackward {
  Mlp grads;         // same shapes as the network
  Matrix input_grad; // batch x in
};

/// Throws ConfigError when the layer chain or the input width do not match.
MlpForward forward_mlp(const Mlp& mlp, const Matrix& input);
/// Throws UsageError on an empty cache.
MlpBackward backward_mlp(const Mlp& mlp, const MlpCache& cache, const Matrix& upstream);

/// Row-wise softmax with max subtraction.
Matrix softmax_rows(const Matrix& m);
Vector softmax(const Vector& logits);
Vector log_softmax(const Vector& logits);

inline double sigmoid(double x) {
  if (x >= 0) {
    const double z = std::exp(-x);
    return 1.0 / (1.0 + z);
  }
  const double z = std::exp(x);
  return z / (1.0 + z);
}

bool all_finite(std::span<const double> values);
bool all_finite(const ConstTensorViews& tensors);

// --- parameter-set utilities ------------------------------------------------
// A parameter set is any type exposing tensors() in both const and non-const
// flavours; gradients use the same type.

template <typename P>
std::size_t parameter_count(const P& p) {
  std::size_t n = 0;
  for (const auto& t : p.tensors()) n += t.size();
  return n;
}

template <typename P>
Vector flatten(const P& p) {
  Vector out(static_cast<Eigen::Index>(parameter_count(p)));
  Eigen::Index k = 0;
  for (const auto& t : p.tensors())
    for (double x : t) out[k++] = x;
  return out;
}

template <typename P>
void unflatten(P& p, const Vector& values) {
  Eigen::Index k = 0;
  for (auto t : p.tensors())
    for (double& x : t) x = values[k++];
}

// --- Adam -------------------------------------------------------------------

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
  long steps = 0;
};

/// One bias-corrected Adam descent step: params -= step * mhat / (sqrt(vhat) + eps).
/// Moment buffers are created on first use; afterwards shapes must match.
void adam_step(const TensorViews& params, const ConstTensorViews& grads, AdamState& state,
               double step_size);

template <typename P>
void adam_step(P& params, const P& grads, AdamState& state, double step_size) {
  adam_step(params.tensors(), grads.tensors(), state, step_size);
}

// --- gradient checking --------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  std::size_t checked = 0;
  bool deterministic = true;

  bool passed(double tolerance) const { return deterministic && max_rel_error < tolerance; }
};

inline constexpr double kGradCheckStep = 1e-5;
inline constexpr double kRelErrorFloor = 1e-8;

/// Compares `analytic` against central differences of `loss` around `point`.
/// Relative error per entry is |a - n| / max(|a|, |n|, 1e-8). A closure that
/// returns different values for the same point marks the report
/// non-deterministic (and therefore failed).
GradCheckReport gradient_check(const std::function<double(const Vector&)>& loss,
                               const Vector& point, const Vector& analytic,
                               double step = kGradCheckStep);

/// Convenience over parameter sets: `eval(p)` returns {loss, grads-of-type-P}.
template <typename P, typename Eval>
GradCheckReport gradient_check_params(const P& params, Eval&& eval,
                                      double step = kGradCheckStep) {
  const auto [value, grads] = eval(params);
  (void)value;
  const Vector analytic = flatten(grads);
  P scratch = params;
  auto loss = [&](const Vector& x) {
    unflatten(scratch, x);
    return eval(scratch).first;
  };
  return gradient_check(loss, flatten(params), analytic, step);
}

}  // namespace medgrpo::nn
