#include "medgrpo/nn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "medgrpo/errors.hpp"

namespace medgrpo::nn {

std::string_view to_string(Activation a) {
  switch (a) {
    case Activation::identity: return "identity";
    case Activation::relu: return "relu";
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
  }
  return "identity";
}

Activation activation_from_string(std::string_view name) {
  if (name == "identity") return Activation::identity;
  if (name == "relu") return Activation::relu;
  if (name == "sigmoid") return Activation::sigmoid;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

double activate(Activation a, double x) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > 0.0 ? x : 0.0;
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return std::tanh(x);
  }
  return x;
}

double activate_derivative(Activation a, double x, double y) {
  switch (a) {
    case Activation::identity: return 1.0;
    case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::tanh: return 1.0 - y * y;
  }
  return 1.0;
}

DenseLayer make_dense(int in, int out, Activation activation, Rng& rng) {
  if (in < 1 || out < 1) throw ConfigError("dense layer dimensions must be positive");
  const double limit = std::sqrt(6.0 / static_cast<double>(in + out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  DenseLayer layer;
  layer.weight.resize(out, in);
  for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = dist(rng);
  layer.bias = RowVector::Zero(out);
  layer.activation = activation;
  return layer;
}

TensorViews Mlp::tensors() {
  TensorViews out;
  for (auto& l : layers) {
    out.push_back(view(l.weight));
    out.push_back(view(l.bias));
  }
  return out;
}

ConstTensorViews Mlp::tensors() const {
  ConstTensorViews out;
  for (const auto& l : layers) {
    out.push_back(view(l.weight));
    out.push_back(view(l.bias));
  }
  return out;
}

Mlp make_mlp(const std::vector<int>& sizes, Activation hidden, Activation output, Rng& rng) {
  if (sizes.size() < 2) throw ConfigError("an MLP needs at least input and output sizes");
  Mlp mlp;
  for (std::size_t i = 0; i + 1 < sizes.size(); ++i) {
    const bool last = i + 2 == sizes.size();
    mlp.layers.push_back(make_dense(sizes[i], sizes[i + 1], last ? output : hidden, rng));
  }
  return mlp;
}

Mlp zeros_like(const Mlp& mlp) {
  Mlp z = mlp;
  for (auto& l : z.layers) {
    l.weight.setZero();
    l.bias.setZero();
  }
  return z;
}

MlpForward forward_mlp(const Mlp& mlp, const Matrix& input) {
  if (mlp.layers.empty()) throw ConfigError("forward_mlp: network has no layers");
  MlpForward fwd;
  Matrix x = input;
  for (std::size_t i = 0; i < mlp.layers.size(); ++i) {
    const auto& layer = mlp.layers[i];
    if (x.cols() != layer.in() || layer.bias.size() != layer.out()) {
      throw ConfigError("forward_mlp: layer " + std::to_string(i) + " expects width " +
                        std::to_string(layer.in()) + ", got " + std::to_string(x.cols()));
    }
    Matrix pre = x * layer.weight.transpose();
    pre.rowwise() += layer.bias;
    Matrix post = pre.unaryExpr([&](double v) { return activate(layer.activation, v); });
    fwd.cache.inputs.push_back(std::move(x));
    fwd.cache.pre.push_back(std::move(pre));
    x = post;
    fwd.cache.post.push_back(std::move(post));
  }
  fwd.output = std::move(x);
  return fwd;
}

MlpBackward backward_mlp(const Mlp& mlp, const MlpCache& cache, const Matrix& upstream) {
  if (cache.empty() || cache.inputs.size() != mlp.layers.size())
    throw UsageError("backward_mlp: no forward cache for this network");
  MlpBackward bwd;
  bwd.grads = zeros_like(mlp);
  Matrix g = upstream;
  for (std::size_t k = mlp.layers.size(); k-- > 0;) {
    const auto& layer = mlp.layers[k];
    const Matrix& pre = cache.pre[k];
    const Matrix& post = cache.post[k];
    if (g.rows() != pre.rows() || g.cols() != pre.cols())
      throw ConfigError("backward_mlp: upstream gradient shape mismatch");
    Matrix local(pre.rows(), pre.cols());
    for (Eigen::Index i = 0; i < pre.size(); ++i)
      local.data()[i] =
          g.data()[i] * activate_derivative(layer.activation, pre.data()[i], post.data()[i]);
    bwd.grads.layers[k].weight = local.transpose() * cache.inputs[k];
    bwd.grads.layers[k].bias = local.colwise().sum();
    g = local * layer.weight;
  }
  bwd.input_grad = std::move(g);
  return bwd;
}

Matrix softmax_rows(const Matrix& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const double mx = m.row(r).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index c = 0; c < m.cols(); ++c) {
      out(r, c) = std::exp(m(r, c) - mx);
      sum += out(r, c);
    }
    out.row(r) /= sum;
  }
  return out;
}

Vector softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  Vector e = (logits.array() - mx).exp().matrix();
  return e / e.sum();
}

Vector log_softmax(const Vector& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return (logits.array() - lse).matrix();
}

bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

bool all_finite(const ConstTensorViews& tensors) {
  return std::all_of(tensors.begin(), tensors.end(),
                     [](std::span<const double> t) { return all_finite(t); });
}

void adam_step(const TensorViews& params, const ConstTensorViews& grads, AdamState& state,
               double step_size) {
  if (params.size() != grads.size()) throw ConfigError("adam_step: parameter/gradient count mismatch");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.emplace_back(p.size(), 0.0);
      state.second.emplace_back(p.size(), 0.0);
    }
  }
  if (state.first.size() != params.size()) throw ConfigError("adam_step: optimizer state shape mismatch");
  const auto& c = state.config;
  ++state.steps;
  const double correction1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.steps));
  const double correction2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.steps));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    auto g = grads[t];
    auto& m = state.first[t];
    auto& v = state.second[t];
    if (g.size() != p.size() || m.size() != p.size())
      throw ConfigError("adam_step: tensor " + std::to_string(t) + " shape mismatch");
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / correction1;
      const double vhat = v[i] / correction2;
      p[i] -= step_size * mhat / (std::sqrt(vhat) + c.epsilon);
    }
  }
}

GradCheckReport gradient_check(const std::function<double(const Vector&)>& loss,
                               const Vector& point, const Vector& analytic, double step) {
  if (point.size() != analytic.size())
    throw ConfigError("gradient_check: analytic gradient has the wrong length");
  GradCheckReport report;
  const double f0 = loss(point);
  const double f1 = loss(point);
  if (f0 != f1 && !(std::isnan(f0) && std::isnan(f1))) {
    report.deterministic = false;
    report.max_rel_error = std::numeric_limits<double>::infinity();
    return report;
  }
  Vector x = point;
  for (Eigen::Index i = 0; i < point.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + step;
    const double up = loss(x);
    x[i] = orig - step;
    const double down = loss(x);
    x[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic[i];
    const double denom = std::max({std::abs(a), std::abs(numeric), kRelErrorFloor});
    const double rel = std::abs(a - numeric) / denom;
    ++report.checked;
    if (!(rel <= report.max_rel_error)) {
      report.max_rel_error = rel;
      report.worst_index = static_cast<std::size_t>(i);
      report.analytic_at_worst = a;
      report.numeric_at_worst = numeric;
    }
  }
  return report;
}

}  // namespace medgrpo::nn
