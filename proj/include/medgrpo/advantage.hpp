#pragma once

// Monte Carlo returns, the learned value baseline, and the three advantage
// flavours: individual A_i = G_t - V(s_t), the batch-empirical group mean
// A_g, and the group-relative blend
//   A~ = alpha1 A_i + alpha2 A_g - alpha3 |A_i - A_g|^beta.

#include <map>
#include <ostream>
#include <span>
#include <vector>

#include "medgrpo/cohort.hpp"
#include "medgrpo/nn.hpp"

namespace medgrpo::advantage {

using nn::Matrix;
using nn::RowVector;

/// G_t = r_t + gamma G_{t+1}, G_T = 0.
std::vector<double> discounted_returns(std::span<const double> rewards, double gamma);
std::vector<double> discounted_returns(const cohort::Trajectory& trajectory, double gamma);

/// V(s, g): an MLP over [pooled state | onehot(g)].
struct ValueParams {
  nn::Mlp net;
  int n_groups = 1;

  int state_width() const { return net.in() - n_groups; }
  nn::TensorViews tensors() { return net.tensors(); }
  nn::ConstTensorViews tensors() const { return net.tensors(); }
};

ValueParams init_value(int state_width, int n_groups, int hidden, Rng& rng);

struct ValueSample {
  RowVector state;
  int group = 0;
  double target = 0.0;
};

double value_estimate(const ValueParams& value, const RowVector& state, int group);
std::vector<double> value_estimates(const ValueParams& value, std::span<const ValueSample> samples);

/// Mean squared error over the samples; fills `grad` when given.
double value_loss(const ValueParams& value, std::span<const ValueSample> samples,
                  ValueParams* grad = nullptr);

struct FitResult {
  double mse = 0.0;                // after the last epoch
  std::vector<double> history;     // MSE before each epoch, then the final one
};

/// Full-batch gradient descent on the squared error. Throws UsageError on an
/// empty batch.
FitResult fit_value(ValueParams& value, std::span<const ValueSample> samples, int epochs,
                    double step_size);

struct AdvantageHyper {
  double alpha1 = 1.0;
  double alpha2 = 0.5;
  double alpha3 = 0.1;
  double beta = 2.0;

  void validate() const;
};

inline double individual_advantage(double ret, double baseline) { return ret - baseline; }

double group_relative_advantage(double individual, double group_mean, const AdvantageHyper& hyper);

struct AdvantageRow {
  int patient_id = 0;
  int time = 0;
  int group = 0;
  double ret = 0.0;         // G_t
  double baseline = 0.0;    // V(s_t)
  double individual = 0.0;  // A_i
  double group_mean = 0.0;  // A_g of the row's group
  double relative = 0.0;    // A~
};

/// Mean of A_i per group over the given rows; groups with no rows are absent.
std::map<int, double> group_mean_advantage(std::span<const AdvantageRow> rows);

struct AdvantageBatch {
  std::vector<AdvantageRow> rows;
  AdvantageHyper hyper;
};

/// Rows need patient_id, time, group, ret and baseline; everything else is
/// filled in.
AdvantageBatch build_advantage_batch(std::vector<AdvantageRow> rows, const AdvantageHyper& hyper);

/// Zero mean, unit variance. A constant input maps to zeros.
std::vector<double> standardize(std::span<const double> values);

/// One line per transition:
/// patient_id,time,group,return,baseline,individual,group_mean,relative
void write_csv(const AdvantageBatch& batch, std::ostream& out);

}  // namespace medgrpo::advantage
