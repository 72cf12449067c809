#pragma once

// Hybrid plan search over open-loop intervention sequences: a genetic
// algorithm proposes candidates, MCTS refines each one, and the candidate
// with the best refined return wins.

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "medgrpo/cohort.hpp"
#include "medgrpo/rng.hpp"

namespace medgrpo::search {

/// Episodic model used by both searches. `reset(k)` must be deterministic in
/// k; `step` draws its noise from the supplied generator.
struct PlanningModel {
  int horizon = 1;
  int n_actions = 2;
  double discount = 0.95;
  std::function<cohort::PatientState(std::uint64_t episode)> reset;
  std::function<cohort::StepRecord(const cohort::PatientState&, int action, Rng&)> step;
};

PlanningModel make_model(const cohort::Cohort& cohort, int patient_id);

struct Chromosome {
  std::vector<int> actions;
  std::optional<double> cached_fitness;
};

/// Mean over `rollouts` executions of sum_t gamma^t r_t. Execution k starts
/// from reset(k) and draws step noise from a stream seeded by one draw of
/// `rng` per rollout. Throws UsageError on a wrong length or gene.
double evaluate_sequence(const PlanningModel& model, std::span<const int> actions, int rollouts,
                         Rng& rng);

/// evaluate_sequence plus caching on the chromosome.
double fitness(Chromosome& chromosome, const PlanningModel& model, int rollouts, Rng& rng);

using FitnessFn = std::function<double(const std::vector<int>&)>;

/// Fitness closure with common random numbers: every call re-seeds from
/// `seed`, so equal genomes always score equally.
FitnessFn make_fitness_fn(const PlanningModel& model, int rollouts, std::uint64_t seed);

struct GaConfig {
  int population = 64;
  int generations = 40;
  int tournament = 3;
  double crossover_rate = 0.9;
  double mutation_rate = 0.05;
  int elite = 2;
  int fitness_rollouts = 4;  // forced to 1 on noise-free cohorts
  int candidates = 5;        // L
  std::uint64_t seed = 0;

  void validate() const;
};

/// Elitism, tournament selection, one-point crossover, per-gene uniform
/// mutation. Individuals without a cached fitness are evaluated first.
/// With elite >= population size the population is returned unchanged.
std::vector<Chromosome> evolve(std::vector<Chromosome> population, const GaConfig& config,
                               int n_actions, const FitnessFn& fitness_fn, Rng& rng);

struct GaResult {
  std::vector<Chromosome> candidates;          // best distinct genomes, best first
  std::vector<double> best_per_generation;     // index 0 is the initial population
  std::vector<double> mean_per_generation;
  std::vector<double> hall_of_fame_best;       // best ever seen after each generation
};

/// Fewer than L candidates come back only when the genome space itself is
/// smaller than L.
GaResult ga_search(const GaConfig& config, int horizon, int n_actions, const FitnessFn& fitness_fn);

struct MctsConfig {
  int budget = 200;
  double exploration = std::sqrt(2.0);
  int rollout_depth = 0;     // 0: the remaining horizon
  int eval_rollouts = 1;     // executions used to score the returned plan
  std::uint64_t seed = 0;

  void validate() const;
};

struct SearchNode {
  cohort::PatientState state;
  int depth = 0;
  int action = -1;            // edge from the parent
  double edge_reward = 0.0;   // reward on that edge
  int visits = 0;
  double value_sum = 0.0;
  int own_simulations = 0;    // simulations that started at this node
  std::map<int, std::unique_ptr<SearchNode>> children;

  double mean() const { return visits > 0 ? value_sum / visits : 0.0; }
};

/// Action for rollout steps past the end of the chromosome.
using RolloutPolicy = std::function<int(const cohort::PatientState&, Rng&)>;

struct RefineResult {
  double estimate = 0.0;       // MCTS(X)
  std::vector<int> actions;    // refined plan
  std::unique_ptr<SearchNode> root;
};

/// UCB1 tree search anchored to the chromosome: the chromosome's own gene is
/// expanded first at every depth and rollouts follow its remaining genes.
/// Returns the better (by evaluation) of the greedy max-mean path and the best
/// simulated plan.
RefineResult mcts_refine(const Chromosome& chromosome, const PlanningModel& model,
                         const MctsConfig& config, const RolloutPolicy& fallback = {});

/// visits == sum(child visits) + own_simulations at every node.
bool visits_conserved(const SearchNode& node);
int count_nodes(const SearchNode& node);

/// argmax, earliest index on ties. Throws UsageError on an empty set.
std::size_t select_best(std::span<const double> estimates);

struct HybridResult {
  GaResult ga;
  std::vector<double> ga_fitness;
  std::vector<RefineResult> refined;
  std::size_t selected = 0;
  std::vector<int> best_actions;
  double best_estimate = 0.0;
};

/// ga_search -> mcts_refine per candidate -> select_best.
HybridResult hybrid_search(const PlanningModel& model, const GaConfig& ga, const MctsConfig& mcts,
                           const RolloutPolicy& fallback = {});

/// Exhaustive search over all n_actions^horizon plans (small instances only).
std::pair<std::vector<int>, double> brute_force_optimum(const PlanningModel& model, int rollouts,
                                                        std::uint64_t seed);

}  // namespace medgrpo::search
