#include "medgrpo/grpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <thread>

#include "medgrpo/errors.hpp"

namespace medgrpo::grpo {

nn::TensorViews PolicyParams::tensors() {
  auto out = trunk.tensors();
  out.push_back(nn::view(group_bias));
  return out;
}

nn::ConstTensorViews PolicyParams::tensors() const {
  auto out = trunk.tensors();
  out.push_back(nn::view(group_bias));
  return out;
}

PolicyParams init_policy(int state_width, int n_actions, int n_groups, int hidden, Rng& rng) {
  if (n_groups < 1 || n_actions < 2) throw ConfigError("policy: need >= 1 group and >= 2 actions");
  PolicyParams p;
  p.trunk = nn::make_mlp({state_width, hidden, n_actions}, nn::Activation::tanh,
                         nn::Activation::identity, rng);
  p.group_bias = Matrix::Zero(n_groups, n_actions);
  return p;
}

PolicyParams zeros_like(const PolicyParams& policy) {
  PolicyParams z = policy;
  z.trunk = nn::zeros_like(policy.trunk);
  z.group_bias.setZero();
  return z;
}

void GrpoConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("grpo: " + m); };
  if (!(clip > 0.0 && clip < 1.0)) fail("clip must lie in (0, 1)");
  if (!(kl_weight >= 0.0)) fail("kl_weight must be >= 0");
  advantage.validate();
  if (!(step_size > 0.0)) fail("step_size must be > 0");
  if (epochs < 1 || minibatch < 1 || rollouts_per_patient < 1) fail("counts must be >= 1");
  if (iterations < 0) fail("iterations must be >= 0");
  if (policy_hidden < 1 || value_hidden < 1) fail("hidden sizes must be >= 1");
  if (value_epochs < 0) fail("value_epochs must be >= 0");
  if (!(value_step > 0.0)) fail("value_step must be > 0");
}

namespace {

void check_group(const PolicyParams& policy, int group) {
  if (group < 0 || group >= policy.n_groups())
    throw UsageError("policy: group " + std::to_string(group) + " out of range");
}

/// Logits for every sample, plus the trunk cache for the backward pass.
Matrix batch_logits(const PolicyParams& policy, std::span<const PolicySample> samples,
                    nn::MlpCache* cache) {
  Matrix x(static_cast<Eigen::Index>(samples.size()), policy.state_width());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    check_group(policy, samples[i].group);
    if (samples[i].state.size() != policy.state_width())
      throw ConfigError("policy: state width mismatch");
    x.row(static_cast<Eigen::Index>(i)) = samples[i].state;
  }
  auto fwd = nn::forward_mlp(policy.trunk, x);
  for (std::size_t i = 0; i < samples.size(); ++i)
    fwd.output.row(static_cast<Eigen::Index>(i)) += policy.group_bias.row(samples[i].group);
  if (cache) *cache = std::move(fwd.cache);
  return std::move(fwd.output);
}

Matrix log_softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r)
    out.row(r) = nn::log_softmax(logits.row(r).transpose()).transpose();
  return out;
}

}  // namespace

Vector action_logits(const PolicyParams& policy, const RowVector& state, int group) {
  check_group(policy, group);
  const auto fwd = nn::forward_mlp(policy.trunk, Matrix(state));
  return (fwd.output.row(0) + policy.group_bias.row(group)).transpose();
}

Vector action_distribution(const PolicyParams& policy, const RowVector& state, int group) {
  return nn::softmax(action_logits(policy, state, group));
}

double probability_ratio(const PolicyParams& policy, const FrozenPolicy& frozen,
                         const RowVector& state, int group, int action) {
  const Vector new_logp = nn::log_softmax(action_logits(policy, state, group));
  const Vector old_logp = nn::log_softmax(action_logits(frozen.params(), state, group));
  return std::exp(new_logp[action] - old_logp[action]);
}

double clipped_surrogate(double ratio, double advantage, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * advantage, clipped * advantage);
}

std::vector<double> group_kl(const PolicyParams& policy, const FrozenPolicy& frozen,
                             std::span<const PolicySample> samples) {
  std::vector<double> kl(static_cast<std::size_t>(policy.n_groups()), 0.0);
  if (samples.empty()) return kl;
  const Matrix new_logp = log_softmax_rows(batch_logits(policy, samples, nullptr));
  const Matrix old_logp = log_softmax_rows(batch_logits(frozen.params(), samples, nullptr));
  std::vector<int> counts(kl.size(), 0);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    double term = 0.0;
    for (Eigen::Index a = 0; a < new_logp.cols(); ++a)
      term += std::exp(old_logp(r, a)) * (old_logp(r, a) - new_logp(r, a));
    const auto g = static_cast<std::size_t>(samples[i].group);
    kl[g] += term;
    ++counts[g];
  }
  for (std::size_t g = 0; g < kl.size(); ++g)
    if (counts[g] > 0) kl[g] /= counts[g];
  return kl;
}

ObjectiveResult grpo_objective(const PolicyParams& policy, const FrozenPolicy& frozen,
                               std::span<const PolicySample> samples, double clip,
                               double kl_weight, bool with_gradient) {
  if (samples.empty()) throw UsageError("grpo_objective: empty batch");
  nn::MlpCache cache;
  const Matrix new_logp = log_softmax_rows(batch_logits(policy, samples, &cache));
  const Matrix old_logp = log_softmax_rows(batch_logits(frozen.params(), samples, nullptr));
  const auto n = static_cast<double>(samples.size());
  const auto n_groups = static_cast<std::size_t>(policy.n_groups());

  std::vector<int> counts(n_groups, 0);
  for (const auto& s : samples) ++counts[static_cast<std::size_t>(s.group)];

  ObjectiveResult res;
  res.kl.assign(n_groups, 0.0);
  Matrix dlogits = Matrix::Zero(new_logp.rows(), new_logp.cols());

  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    const auto& s = samples[i];
    const double ratio = std::exp(new_logp(r, s.action) - old_logp(r, s.action));
    const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
    const double unclipped_term = ratio * s.advantage;
    res.surrogate += std::min(unclipped_term, clipped * s.advantage);

    const auto g = static_cast<std::size_t>(s.group);
    double kl_term = 0.0;
    for (Eigen::Index a = 0; a < new_logp.cols(); ++a)
      kl_term += std::exp(old_logp(r, a)) * (old_logp(r, a) - new_logp(r, a));
    res.kl[g] += kl_term / counts[g];

    if (!with_gradient) continue;
    // d rho / d logits = rho (onehot(a) - p); the min passes gradient only
    // when the unclipped branch is the smaller one.
    const double surrogate_coef = unclipped_term <= clipped * s.advantage ? ratio * s.advantage : 0.0;
    for (Eigen::Index a = 0; a < new_logp.cols(); ++a) {
      const double p_new = std::exp(new_logp(r, a));
      const double p_old = std::exp(old_logp(r, a));
      const double onehot = a == s.action ? 1.0 : 0.0;
      dlogits(r, a) = surrogate_coef * (onehot - p_new) / n -
                      kl_weight * (p_new - p_old) / counts[g];
    }
  }
  res.surrogate /= n;
  res.value = res.surrogate - kl_weight * std::accumulate(res.kl.begin(), res.kl.end(), 0.0);

  if (with_gradient) {
    const auto bwd = nn::backward_mlp(policy.trunk, cache, dlogits);
    res.grad.trunk = bwd.grads;
    res.grad.group_bias = Matrix::Zero(policy.n_groups(), policy.n_actions());
    for (std::size_t i = 0; i < samples.size(); ++i)
      res.grad.group_bias.row(samples[i].group) += dlogits.row(static_cast<Eigen::Index>(i));
  }
  return res;
}

double ppo_objective(const PolicyParams& policy, const FrozenPolicy& frozen,
                     std::span<const PolicySample> samples, double clip) {
  if (samples.empty()) throw UsageError("ppo_objective: empty batch");
  double total = 0.0;
  for (const auto& s : samples) {
    const Vector p_new = action_distribution(policy, s.state, s.group);
    const Vector p_old = action_distribution(frozen.params(), s.state, s.group);
    const double ratio = p_new[s.action] / p_old[s.action];
    const double clipped = std::min(std::max(ratio, 1.0 - clip), 1.0 + clip);
    total += std::min(ratio * s.advantage, clipped * s.advantage);
  }
  return total / static_cast<double>(samples.size());
}

std::vector<PolicySample> make_policy_samples(const advantage::AdvantageBatch& batch,
                                              std::span<const RowVector> states,
                                              std::span<const int> actions, bool normalize) {
  if (states.size() != batch.rows.size() || actions.size() != batch.rows.size())
    throw UsageError("make_policy_samples: states/actions do not match the batch");
  std::vector<double> adv;
  adv.reserve(batch.rows.size());
  for (const auto& r : batch.rows) adv.push_back(r.relative);
  if (normalize) adv = advantage::standardize(adv);
  std::vector<PolicySample> out;
  out.reserve(adv.size());
  for (std::size_t i = 0; i < adv.size(); ++i)
    out.push_back({states[i], batch.rows[i].group, actions[i], adv[i]});
  return out;
}

// --- rollouts ------------------------------------------------------------------

cohort::PolicyFn make_policy_fn(const cohort::Cohort& cohort, const fusion::FusionParams& fusion,
                                const PolicyParams* params, std::vector<RowVector>* pooled_out) {
  return [&cohort, &fusion, params, pooled_out](const cohort::Observation& obs) -> Vector {
    const auto series = cohort::observe_modalities(cohort, obs.patient_id, obs.history);
    RowVector pooled = fusion::fuse_pooled(fusion, series);
    Vector p = params ? action_distribution(*params, pooled, obs.group)
                      : Vector::Constant(cohort.config.n_actions, 1.0 / cohort.config.n_actions);
    if (pooled_out) pooled_out->push_back(std::move(pooled));
    return p;
  };
}

std::vector<Episode> collect_episodes(const cohort::Cohort& cohort,
                                      const cluster::GroupAssignment& assignment,
                                      const fusion::FusionParams& fusion,
                                      const PolicyParams* policy, int repeats,
                                      std::uint64_t seed, int iteration, int workers) {
  const int n = cohort.n_patients();
  if (static_cast<int>(assignment.labels.size()) != n)
    throw ConfigError("collect_episodes: assignment does not cover the cohort");
  std::vector<Episode> episodes(static_cast<std::size_t>(n * repeats));

  auto run_one = [&](std::size_t slot) {
    const int patient = static_cast<int>(slot) / repeats;
    const int rep = static_cast<int>(slot) % repeats;
    Episode& ep = episodes[slot];
    ep.group = assignment.labels[static_cast<std::size_t>(patient)];
    Rng stream(derive_seed(seed, "rollout", iteration, patient, rep));
    const auto fn = make_policy_fn(cohort, fusion, policy, &ep.states);
    ep.trajectory = cohort::rollout(cohort, patient, ep.group, fn, stream);
  };

  workers = std::max(1, std::min(workers, static_cast<int>(episodes.size())));
  if (workers == 1) {
    for (std::size_t i = 0; i < episodes.size(); ++i) run_one(i);
    return episodes;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = static_cast<std::size_t>(w); i < episodes.size();
             i += static_cast<std::size_t>(workers))
          run_one(i);
      } catch (...) {
        errors[static_cast<std::size_t>(w)] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return episodes;
}

double fairness_gap(std::span<const double> group_returns) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  int present = 0;
  for (double r : group_returns) {
    if (!std::isfinite(r)) continue;
    lo = std::min(lo, r);
    hi = std::max(hi, r);
    ++present;
  }
  return present < 2 ? 0.0 : hi - lo;
}

double evaluate_return(const cohort::Cohort& cohort, const cluster::GroupAssignment& assignment,
                       const fusion::FusionParams& fusion, const PolicyParams* policy,
                       int repeats, std::uint64_t seed) {
  const auto episodes =
      collect_episodes(cohort, assignment, fusion, policy, repeats, derive_seed(seed, "evaluate"), 0);
  double total = 0.0;
  for (const auto& ep : episodes)
    total += advantage::discounted_returns(ep.trajectory, cohort.config.discount).front();
  return total / static_cast<double>(episodes.size());
}

PolicyParams initial_policy(const fusion::FusionParams& fusion, int n_actions, int n_groups,
                            const GrpoConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "policy.init"));
  return init_policy(fusion.fused_width(), n_actions, n_groups, config.policy_hidden, rng);
}

advantage::ValueParams initial_value(const fusion::FusionParams& fusion, int n_groups,
                                     const GrpoConfig& config, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "value.init"));
  return advantage::init_value(fusion.fused_width(), n_groups, config.value_hidden, rng);
}

TrainResult train(const cohort::Cohort& cohort, const cluster::GroupAssignment& assignment,
                  const fusion::FusionParams& fusion, const GrpoConfig& config,
                  std::uint64_t seed, const TrainOptions& options) {
  config.validate();
  const int k = assignment.n_groups;
  const double gamma = cohort.config.discount;
  TrainResult result;
  result.policy = initial_policy(fusion, cohort.config.n_actions, k, config, seed);
  result.value = initial_value(fusion, k, config, seed);
  result.last_batch.hyper = config.advantage;
  nn::AdamState adam;

  for (int it = 0; it < config.iterations; ++it) {
    const auto started = std::chrono::steady_clock::now();
    const FrozenPolicy frozen(result.policy);
    const auto episodes = collect_episodes(cohort, assignment, fusion, &frozen.params(),
                                           config.rollouts_per_patient, seed, it, options.workers);

    std::vector<advantage::ValueSample> value_samples;
    std::vector<RowVector> states;
    std::vector<int> actions;
    std::vector<advantage::AdvantageRow> rows;
    std::vector<double> group_sum(static_cast<std::size_t>(k), 0.0);
    std::vector<int> group_count(static_cast<std::size_t>(k), 0);
    double return_sum = 0.0;
    for (const auto& ep : episodes) {
      const auto returns = advantage::discounted_returns(ep.trajectory, gamma);
      return_sum += returns.front();
      group_sum[static_cast<std::size_t>(ep.group)] += returns.front();
      ++group_count[static_cast<std::size_t>(ep.group)];
      for (std::size_t t = 0; t < ep.trajectory.steps.size(); ++t) {
        value_samples.push_back({ep.states[t], ep.group, returns[t]});
        states.push_back(ep.states[t]);
        actions.push_back(ep.trajectory.steps[t].action);
        advantage::AdvantageRow row;
        row.patient_id = ep.trajectory.patient_id;
        row.time = static_cast<int>(t);
        row.group = ep.group;
        row.ret = returns[t];
        rows.push_back(row);
      }
    }
    const auto baselines = advantage::value_estimates(result.value, value_samples);
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i].baseline = baselines[i];
    auto batch = advantage::build_advantage_batch(std::move(rows), config.advantage);
    const auto samples =
        make_policy_samples(batch, states, actions, config.normalize_advantages);

    Rng shuffle_rng(derive_seed(seed, "minibatch", it));
    std::vector<std::size_t> order(samples.size());
    std::vector<PolicySample> minibatch;
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::iota(order.begin(), order.end(), std::size_t{0});
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(config.minibatch)) {
        const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(config.minibatch));
        minibatch.clear();
        for (std::size_t i = start; i < stop; ++i) minibatch.push_back(samples[order[i]]);
        auto obj = grpo_objective(result.policy, frozen, minibatch, config.clip, config.kl_weight);
        for (auto t : obj.grad.tensors())
          for (double& g : t) g = -g;  // ascend
        nn::adam_step(result.policy, obj.grad, adam, config.step_size);
        if (!nn::all_finite(std::as_const(result.policy).tensors()))
          throw DivergenceError(it, "policy parameters became non-finite at iteration " +
                                        std::to_string(it));
      }
    }

    IterationLog log;
    log.iteration = it;
    log.mean_return = return_sum / static_cast<double>(episodes.size());
    for (std::size_t g = 0; g < group_sum.size(); ++g)
      log.group_returns.push_back(group_count[g] > 0
                                      ? group_sum[g] / group_count[g]
                                      : std::numeric_limits<double>::quiet_NaN());
    const auto full = grpo_objective(result.policy, frozen, samples, config.clip,
                                     config.kl_weight, false);
    log.group_kl = full.kl;
    log.objective = full.value;
    log.fairness_gap = fairness_gap(log.group_returns);

    advantage::fit_value(result.value, value_samples, config.value_epochs, config.value_step);
    if (!nn::all_finite(std::as_const(result.value).tensors()))
      throw DivergenceError(it, "value parameters became non-finite at iteration " +
                                    std::to_string(it));

    if (options.record_wall_time)
      log.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started)
                        .count();
    if (options.on_iteration) options.on_iteration(log);
    result.log.push_back(std::move(log));
    result.last_batch = std::move(batch);
  }
  return result;
}

}  // namespace medgrpo::grpo
