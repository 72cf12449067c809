#include <cmath>
#include <sstream>

#include "doctest.h"
#include "medgrpo/advantage.hpp"
#include "medgrpo/errors.hpp"
#include "medgrpo/gradcheck.hpp"
#include "support.hpp"

using namespace medgrpo;
using namespace medgrpo::advantage;
using testing::random_matrix;

namespace {

AdvantageRow make_row(int group, double ret, double baseline, int time = 0) {
  AdvantageRow r;
  r.group = group;
  r.ret = ret;
  r.baseline = baseline;
  r.time = time;
  return r;
}

}  // namespace

TEST_CASE("discounted returns by hand") {
  const std::vector<double> r{1, 1, 1};
  const auto g = discounted_returns(r, 0.5);
  CHECK(g == std::vector<double>{1.75, 1.5, 1.0});
  CHECK(discounted_returns(r, 0.0) == r);
  CHECK(discounted_returns(std::vector<double>{}, 0.9).empty());
}

TEST_CASE("backward recursion equals the double loop") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<double> r(20);
    for (double& x : r) x = normal(rng, 0.0, 3.0);
    const double gamma = uniform01(rng);
    const auto fast = discounted_returns(r, gamma);
    for (std::size_t t = 0; t < r.size(); ++t) {
      double direct = 0.0;
      for (std::size_t k = t; k < r.size(); ++k) direct += std::pow(gamma, double(k - t)) * r[k];
      CHECK(std::abs(fast[t] - direct) < 1e-12);
    }
  }
}

TEST_CASE("individual advantage") {
  CHECK(individual_advantage(2.0, 0.5) == 1.5);
  CHECK(individual_advantage(-3.25, -3.25) == 0.0);
}

TEST_CASE("group mean advantage") {
  std::vector<AdvantageRow> rows{make_row(0, 1, 0), make_row(0, 3, 0), make_row(1, -2, 0)};
  for (auto& r : rows) r.individual = r.ret - r.baseline;
  const auto means = group_mean_advantage(rows);
  CHECK(means.at(0) == 2.0);
  CHECK(means.at(1) == -2.0);
  CHECK(means.size() == 2);

  std::vector<AdvantageRow> single{make_row(4, 0.7, 0.2)};
  single[0].individual = 0.5;
  CHECK(group_mean_advantage(single).at(4) == 0.5);
}

TEST_CASE("group relative advantage worked cases") {
  CHECK(group_relative_advantage(2.0, 1.0, {0.5, 0.5, 1.0, 2.0}) == 0.5);
  for (double a : {-2.0, 0.0, 1.5})
    for (double a3 : {0.0, 0.3, 7.0})
      CHECK(group_relative_advantage(a, a, {0.7, 0.4, a3, 2.0}) == 0.7 * a + 0.4 * a);
  CHECK(group_relative_advantage(3.0, -1.0, {1.0, 0.0, 0.0, 2.0}) == 3.0);
}

TEST_CASE("penalty is monotone in alpha3") {
  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    const double ai = normal(rng, 0, 2), ag = normal(rng, 0, 2);
    const double lo = 2.0 * uniform01(rng), hi = lo + uniform01(rng);
    const double beta = 1.0 + uniform01(rng);
    CHECK(group_relative_advantage(ai, ag, {1.0, 0.5, hi, beta}) <=
          group_relative_advantage(ai, ag, {1.0, 0.5, lo, beta}));
  }
}

TEST_CASE("hyperparameter validation") {
  CHECK_NOTHROW(AdvantageHyper{}.validate());
  CHECK_THROWS_AS((AdvantageHyper{1.0, 0.5, -0.1, 2.0}.validate()), ConfigError);
  CHECK_THROWS_AS((AdvantageHyper{1.0, 0.5, 0.1, 0.0}.validate()), ConfigError);
}

TEST_CASE("advantage batch invariants on random rows") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    std::vector<AdvantageRow> rows;
    for (int i = 0; i < 40; ++i) rows.push_back(make_row(uniform_int(rng, 0, 2), normal(rng), normal(rng), i));
    const AdvantageHyper hyper{1.0, 0.5, 0.3, 2.0};
    const auto batch = build_advantage_batch(rows, hyper);
    std::map<int, std::pair<double, int>> acc;
    for (const auto& r : batch.rows) {
      CHECK(r.individual == r.ret - r.baseline);
      acc[r.group].first += r.individual;
      ++acc[r.group].second;
    }
    for (const auto& r : batch.rows) {
      const double mean = acc[r.group].first / acc[r.group].second;
      CHECK(std::abs(r.group_mean - mean) < 1e-12);
      const double expected = hyper.alpha1 * r.individual + hyper.alpha2 * r.group_mean -
                              hyper.alpha3 * std::pow(std::abs(r.individual - r.group_mean), hyper.beta);
      CHECK(std::abs(r.relative - expected) < 1e-12);
    }
  }
}

TEST_CASE("standardize") {
  const std::vector<double> x{1, 2, 3, 4};
  const auto z = standardize(x);
  double mean = 0, var = 0;
  for (double v : z) mean += v / 4;
  for (double v : z) var += (v - mean) * (v - mean) / 4;
  CHECK(std::abs(mean) < 1e-15);
  CHECK(var == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(standardize(std::vector<double>{5, 5, 5}) == std::vector<double>{0, 0, 0});
}

TEST_CASE("advantage CSV has a fixed header and one line per row") {
  std::vector<AdvantageRow> rows{make_row(0, 1, 0.5), make_row(1, -1, 0.0, 1)};
  std::ostringstream out;
  write_csv(build_advantage_batch(rows, {}), out);
  std::istringstream in(out.str());
  std::string line;
  std::getline(in, line);
  CHECK(line == "patient_id,time,group,return,baseline,individual,group_mean,relative");
  int n = 0;
  while (std::getline(in, line)) {
    CHECK(std::count(line.begin(), line.end(), ',') == 7);
    ++n;
  }
  CHECK(n == 2);
}

TEST_CASE("value network fits constant targets") {
  Rng rng(3);
  auto value = init_value(6, 2, 16, rng);
  std::vector<ValueSample> samples;
  for (int i = 0; i < 20; ++i) samples.push_back({random_matrix(1, 6, rng), i % 2, -1.5});
  const auto fit = fit_value(value, samples, 8000, 0.1);
  for (const auto& s : samples) CHECK(std::abs(value_estimate(value, s.state, s.group) + 1.5) < 0.01);
  CHECK(fit.mse < 1e-4);
}

TEST_CASE("zero epochs leave the value network unchanged") {
  Rng rng(4);
  auto value = init_value(3, 2, 4, rng);
  const auto before = nn::flatten(value);
  std::vector<ValueSample> samples{{random_matrix(1, 3, rng), 0, 1.0}};
  fit_value(value, samples, 0, 0.1);
  CHECK(nn::flatten(value) == before);
  CHECK_THROWS_AS(fit_value(value, std::vector<ValueSample>{}, 1, 0.1), UsageError);
}

TEST_CASE("value MSE is non-increasing at a small step") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    auto value = init_value(4, 3, 8, rng);
    std::vector<ValueSample> samples;
    for (int i = 0; i < 30; ++i) samples.push_back({random_matrix(1, 4, rng), i % 3, normal(rng, 0, 2)});
    const auto fit = fit_value(value, samples, 50, 1e-3);
    for (std::size_t i = 1; i < fit.history.size(); ++i)
      CHECK(fit.history[i] <= fit.history[i - 1] + 1e-9);
  }
}

TEST_CASE("value gradients match finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    CHECK(checks::check_value_gradient(5, 3, 8, 12, seed).passed(1e-4));
}
