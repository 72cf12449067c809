#pragma once

// Seeded finite-difference checks for every learned component. Each check
// draws a random parameter point and a random linear read-out of the
// component's output, so the scalar loss exercises every gradient entry.

#include <cstdint>
#include <string>

#include "medgrpo/fusion.hpp"
#include "medgrpo/nn.hpp"

namespace medgrpo::checks {

/// Perturbs the first analytic gradient entry; used to prove the checker
/// catches a broken backward pass.
struct Corruption {
  bool enabled = false;
  double amount = 1e-2;
};

nn::GradCheckReport check_fusion_gradient(const fusion::FusionDims& dims, int steps,
                                          std::uint64_t seed, Corruption corrupt = {});

/// Gradient of the full clipped + KL objective w.r.t. trunk and group biases,
/// at a random policy away from the frozen one.
nn::GradCheckReport check_policy_gradient(int state_width, int n_actions, int n_groups,
                                          int hidden, int batch, double clip, double kl_weight,
                                          std::uint64_t seed, Corruption corrupt = {});

/// Gradient of sum_t log pi(a_t | s_t, g) w.r.t. the trunk only.
nn::GradCheckReport check_log_prob_gradient(int state_width, int n_actions, int n_groups,
                                            int hidden, std::uint64_t seed);

nn::GradCheckReport check_value_gradient(int state_width, int n_groups, int hidden, int batch,
                                         std::uint64_t seed, Corruption corrupt = {});

}  // namespace medgrpo::checks
