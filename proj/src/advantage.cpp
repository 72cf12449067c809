#include "medgrpo/advantage.hpp"

#include <cmath>
#include <iomanip>
#include <string>

#include "medgrpo/errors.hpp"

namespace medgrpo::advantage {

std::vector<double> discounted_returns(std::span<const double> rewards, double gamma) {
  std::vector<double> out(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    out[t] = acc;
  }
  return out;
}

std::vector<double> discounted_returns(const cohort::Trajectory& trajectory, double gamma) {
  const auto r = trajectory.rewards();
  return discounted_returns(r, gamma);
}

ValueParams init_value(int state_width, int n_groups, int hidden, Rng& rng) {
  ValueParams v;
  v.n_groups = n_groups;
  v.net = nn::make_mlp({state_width + n_groups, hidden, 1}, nn::Activation::tanh,
                       nn::Activation::identity, rng);
  return v;
}

namespace {

Matrix value_inputs(const ValueParams& value, std::span<const ValueSample> samples) {
  const int width = value.state_width();
  Matrix x = Matrix::Zero(static_cast<Eigen::Index>(samples.size()), value.net.in());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (s.state.size() != width)
      throw ConfigError("value: state width " + std::to_string(s.state.size()) +
                        " does not match network input " + std::to_string(width));
    if (s.group < 0 || s.group >= value.n_groups)
      throw UsageError("value: group " + std::to_string(s.group) + " out of range");
    const auto r = static_cast<Eigen::Index>(i);
    x.row(r).head(width) = s.state;
    x(r, width + s.group) = 1.0;
  }
  return x;
}

}  // namespace

double value_estimate(const ValueParams& value, const RowVector& state, int group) {
  const ValueSample s{state, group, 0.0};
  return value_estimates(value, std::span<const ValueSample>(&s, 1)).front();
}

std::vector<double> value_estimates(const ValueParams& value, std::span<const ValueSample> samples) {
  if (samples.empty()) return {};
  const auto fwd = nn::forward_mlp(value.net, value_inputs(value, samples));
  return {fwd.output.data(), fwd.output.data() + fwd.output.size()};
}

double value_loss(const ValueParams& value, std::span<const ValueSample> samples, ValueParams* grad) {
  if (samples.empty()) throw UsageError("value_loss: empty batch");
  const auto fwd = nn::forward_mlp(value.net, value_inputs(value, samples));
  const auto n = static_cast<double>(samples.size());
  Matrix residual(fwd.output.rows(), 1);
  double loss = 0.0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    residual(r, 0) = fwd.output(r, 0) - samples[i].target;
    loss += residual(r, 0) * residual(r, 0);
  }
  if (grad) {
    const auto bwd = nn::backward_mlp(value.net, fwd.cache, (2.0 / n) * residual);
    grad->n_groups = value.n_groups;
    grad->net = bwd.grads;
  }
  return loss / n;
}

FitResult fit_value(ValueParams& value, std::span<const ValueSample> samples, int epochs,
                    double step_size) {
  if (samples.empty()) throw UsageError("fit_value: empty batch");
  FitResult result;
  ValueParams grad;
  for (int e = 0; e < epochs; ++e) {
    result.history.push_back(value_loss(value, samples, &grad));
    auto params = value.tensors();
    const auto g = grad.tensors();
    for (std::size_t t = 0; t < params.size(); ++t)
      for (std::size_t i = 0; i < params[t].size(); ++i) params[t][i] -= step_size * g[t][i];
  }
  result.mse = value_loss(value, samples);
  result.history.push_back(result.mse);
  return result;
}

void AdvantageHyper::validate() const {
  if (!(alpha1 >= 0.0 && alpha2 >= 0.0 && alpha3 >= 0.0))
    throw ConfigError("advantage: alpha1, alpha2, alpha3 must be >= 0");
  if (!(beta > 0.0)) throw ConfigError("advantage: beta must be > 0");
}

double group_relative_advantage(double individual, double group_mean, const AdvantageHyper& h) {
  const double gap = std::abs(individual - group_mean);
  return h.alpha1 * individual + h.alpha2 * group_mean - h.alpha3 * std::pow(gap, h.beta);
}

std::map<int, double> group_mean_advantage(std::span<const AdvantageRow> rows) {
  std::map<int, std::pair<double, int>> acc;
  for (const auto& r : rows) {
    auto& [sum, count] = acc[r.group];
    sum += r.individual;
    ++count;
  }
  std::map<int, double> out;
  for (const auto& [g, sc] : acc) out[g] = sc.first / sc.second;
  return out;
}

AdvantageBatch build_advantage_batch(std::vector<AdvantageRow> rows, const AdvantageHyper& hyper) {
  hyper.validate();
  for (auto& r : rows) r.individual = individual_advantage(r.ret, r.baseline);
  const auto means = group_mean_advantage(rows);
  for (auto& r : rows) {
    r.group_mean = means.at(r.group);
    r.relative = group_relative_advantage(r.individual, r.group_mean, hyper);
  }
  return {std::move(rows), hyper};
}

std::vector<double> standardize(std::span<const double> values) {
  std::vector<double> out(values.begin(), values.end());
  if (values.empty()) return out;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  const double sd = std::sqrt(var);
  for (double& v : out) v = sd > 1e-12 ? (v - mean) / sd : 0.0;
  return out;
}

void write_csv(const AdvantageBatch& batch, std::ostream& out) {
  out << "patient_id,time,group,return,baseline,individual,group_mean,relative\n";
  out << std::setprecision(17);
  for (const auto& r : batch.rows) {
    out << r.patient_id << ',' << r.time << ',' << r.group << ',' << r.ret << ',' << r.baseline
        << ',' << r.individual << ',' << r.group_mean << ',' << r.relative << '\n';
  }
}

}  // namespace medgrpo::advantage
