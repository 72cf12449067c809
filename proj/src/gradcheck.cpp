#include "medgrpo/gradcheck.hpp"

#include <cmath>

#include "medgrpo/advantage.hpp"
#include "medgrpo/grpo.hpp"

namespace medgrpo::checks {

namespace {

nn::Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  nn::Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

template <typename P>
void corrupt_first(P& grad, Corruption c) {
  if (!c.enabled) return;
  auto t = grad.tensors();
  t.front()[0] += c.amount;
}

}  // namespace

nn::GradCheckReport check_fusion_gradient(const fusion::FusionDims& dims, int steps,
                                          std::uint64_t seed, Corruption corrupt) {
  Rng rng(derive_seed(seed, "gradcheck.fusion"));
  fusion::FusionParams params = fusion::init_fusion(dims, rng);
  for (auto& m : params.modalities)
    for (Eigen::Index i = 0; i < m.kernel_bias.size(); ++i) m.kernel_bias[i] = 0.1 * normal(rng);
  for (Eigen::Index i = 0; i < params.gate_bias.size(); ++i) params.gate_bias[i] = 0.5 * normal(rng);

  std::vector<ModalitySeries> series;
  for (std::size_t m = 0; m < dims.modality_dims.size(); ++m)
    series.push_back({static_cast<int>(m), random_matrix(steps, dims.modality_dims[m], rng)});
  const nn::Matrix readout = random_matrix(steps, params.fused_width(), rng);

  auto eval = [&](const fusion::FusionParams& p) {
    fusion::FusionTrace trace;
    const auto out = fusion::fuse(p, series, &trace);
    const double loss = out.fused.cwiseProduct(readout).sum();
    auto grad = fusion::fuse_backward(p, trace, readout);
    corrupt_first(grad, corrupt);
    return std::pair{loss, std::move(grad)};
  };
  return nn::gradient_check_params(params, eval);
}

nn::GradCheckReport check_policy_gradient(int state_width, int n_actions, int n_groups,
                                          int hidden, int batch, double clip, double kl_weight,
                                          std::uint64_t seed, Corruption corrupt) {
  Rng rng(derive_seed(seed, "gradcheck.policy"));
  grpo::PolicyParams old_params = grpo::init_policy(state_width, n_actions, n_groups, hidden, rng);
  old_params.group_bias = 0.3 * random_matrix(n_groups, n_actions, rng);
  const grpo::FrozenPolicy frozen(old_params);
  grpo::PolicyParams params = old_params;
  for (auto t : params.tensors())
    for (double& x : t) x += 0.15 * normal(rng);

  std::vector<grpo::PolicySample> samples;
  for (int i = 0; i < batch; ++i) {
    grpo::PolicySample s;
    s.state = random_matrix(1, state_width, rng);
    s.group = i % n_groups;
    s.action = uniform_int(rng, 0, n_actions - 1);
    s.advantage = normal(rng);
    // the surrogate has a kink at 1 +- clip; central differences straddling it are meaningless
    const double ratio = grpo::probability_ratio(params, frozen, s.state, s.group, s.action);
    if (std::abs(std::abs(ratio - 1.0) - clip) < 1e-3) continue;
    samples.push_back(std::move(s));
  }
  auto eval = [&](const grpo::PolicyParams& p) {
    auto res = grpo::grpo_objective(p, frozen, samples, clip, kl_weight);
    corrupt_first(res.grad, corrupt);
    return std::pair{res.value, std::move(res.grad)};
  };
  return nn::gradient_check_params(params, eval);
}

nn::GradCheckReport check_log_prob_gradient(int state_width, int n_actions, int n_groups,
                                            int hidden, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "gradcheck.logprob"));
  const grpo::PolicyParams base = grpo::init_policy(state_width, n_actions, n_groups, hidden, rng);
  const int batch = 6;
  nn::Matrix states = random_matrix(batch, state_width, rng);
  std::vector<int> groups, actions;
  for (int i = 0; i < batch; ++i) {
    groups.push_back(i % n_groups);
    actions.push_back(uniform_int(rng, 0, n_actions - 1));
  }
  auto eval = [&](const nn::Mlp& trunk) {
    grpo::PolicyParams p = base;
    p.trunk = trunk;
    const auto fwd = nn::forward_mlp(trunk, states);
    nn::Matrix upstream = nn::Matrix::Zero(batch, n_actions);
    double total = 0.0;
    for (int i = 0; i < batch; ++i) {
      const nn::Vector logits =
          (fwd.output.row(i) + p.group_bias.row(groups[static_cast<std::size_t>(i)])).transpose();
      const nn::Vector logp = nn::log_softmax(logits);
      const int a = actions[static_cast<std::size_t>(i)];
      total += logp[a];
      const nn::Vector prob = logp.array().exp().matrix();
      upstream.row(i) = -prob.transpose();
      upstream(i, a) += 1.0;
    }
    auto bwd = nn::backward_mlp(trunk, fwd.cache, upstream);
    return std::pair{total, std::move(bwd.grads)};
  };
  return nn::gradient_check_params(base.trunk, eval);
}

nn::GradCheckReport check_value_gradient(int state_width, int n_groups, int hidden, int batch,
                                         std::uint64_t seed, Corruption corrupt) {
  Rng rng(derive_seed(seed, "gradcheck.value"));
  advantage::ValueParams value = advantage::init_value(state_width, n_groups, hidden, rng);
  std::vector<advantage::ValueSample> samples;
  for (int i = 0; i < batch; ++i)
    samples.push_back({random_matrix(1, state_width, rng), i % n_groups, 2.0 * normal(rng)});
  auto eval = [&](const advantage::ValueParams& v) {
    advantage::ValueParams grad;
    const double loss = advantage::value_loss(v, samples, &grad);
    corrupt_first(grad, corrupt);
    return std::pair{loss, std::move(grad)};
  };
  return nn::gradient_check_params(value, eval);
}

}  // namespace medgrpo::checks
