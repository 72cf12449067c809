#include "medgrpo/search.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <string>

#include "medgrpo/errors.hpp"

namespace medgrpo::search {

PlanningModel make_model(const cohort::Cohort& cohort, int patient_id) {
  cohort.dynamics_of(patient_id);
  PlanningModel m;
  m.horizon = cohort.config.horizon;
  m.n_actions = cohort.config.n_actions;
  m.discount = cohort.config.discount;
  m.reset = [&cohort, patient_id](std::uint64_t episode) {
    return cohort::reset(cohort, patient_id, episode);
  };
  m.step = [&cohort, patient_id](const cohort::PatientState& s, int a, Rng& rng) {
    return cohort::step(cohort, patient_id, s, a, rng);
  };
  return m;
}

double evaluate_sequence(const PlanningModel& model, std::span<const int> actions, int rollouts,
                         Rng& rng) {
  if (static_cast<int>(actions.size()) != model.horizon)
    throw UsageError("fitness: plan length " + std::to_string(actions.size()) +
                     " differs from horizon " + std::to_string(model.horizon));
  for (int a : actions)
    if (a < 0 || a >= model.n_actions) throw UsageError("fitness: gene out of range");
  if (rollouts < 1) throw UsageError("fitness: rollouts must be >= 1");
  double total = 0.0;
  for (int k = 0; k < rollouts; ++k) {
    Rng noise(rng());
    auto state = model.reset(static_cast<std::uint64_t>(k));
    double ret = 0.0;
    double discount = 1.0;
    for (int t = 0; t < model.horizon; ++t) {
      auto rec = model.step(state, actions[static_cast<std::size_t>(t)], noise);
      ret += discount * rec.reward;
      discount *= model.discount;
      state = std::move(rec.next_state);
    }
    total += ret;
  }
  return total / rollouts;
}

double fitness(Chromosome& chromosome, const PlanningModel& model, int rollouts, Rng& rng) {
  const double f = evaluate_sequence(model, chromosome.actions, rollouts, rng);
  chromosome.cached_fitness = f;
  return f;
}

FitnessFn make_fitness_fn(const PlanningModel& model, int rollouts, std::uint64_t seed) {
  return [model, rollouts, seed](const std::vector<int>& genes) {
    Rng rng(derive_seed(seed, "fitness"));
    return evaluate_sequence(model, genes, rollouts, rng);
  };
}

void GaConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("ga: " + m); };
  if (population < 1) fail("population must be >= 1");
  if (generations < 0) fail("generations must be >= 0");
  if (tournament < 1 || tournament > population) fail("tournament size must lie in [1, population]");
  if (!(crossover_rate >= 0.0 && crossover_rate <= 1.0)) fail("crossover_rate must lie in [0, 1]");
  if (!(mutation_rate >= 0.0 && mutation_rate <= 1.0)) fail("mutation_rate must lie in [0, 1]");
  if (elite < 1 || elite >= population) fail("elite must lie in [1, population)");
  if (fitness_rollouts < 1) fail("fitness_rollouts must be >= 1");
  if (candidates < 1 || candidates > population) fail("candidates must lie in [1, population]");
}

namespace {

void ensure_fitness(std::vector<Chromosome>& pop, const FitnessFn& fitness_fn) {
  for (auto& c : pop)
    if (!c.cached_fitness) c.cached_fitness = fitness_fn(c.actions);
}

std::vector<std::size_t> rank(const std::vector<Chromosome>& pop) {
  std::vector<std::size_t> idx(pop.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return *pop[a].cached_fitness > *pop[b].cached_fitness;
  });
  return idx;
}

std::size_t tournament_pick(const std::vector<Chromosome>& pop, int size, Rng& rng) {
  std::size_t best = pop.size();
  for (int i = 0; i < size; ++i) {
    const auto c = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(pop.size()) - 1));
    if (best == pop.size() || *pop[c].cached_fitness > *pop[best].cached_fitness ||
        (*pop[c].cached_fitness == *pop[best].cached_fitness && c < best))
      best = c;
  }
  return best;
}

}  // namespace

std::vector<Chromosome> evolve(std::vector<Chromosome> population, const GaConfig& config,
                               int n_actions, const FitnessFn& fitness_fn, Rng& rng) {
  ensure_fitness(population, fitness_fn);
  const std::size_t size = population.size();
  if (static_cast<std::size_t>(config.elite) >= size) return population;

  const auto order = rank(population);
  std::vector<Chromosome> next;
  next.reserve(size);
  for (int e = 0; e < config.elite; ++e) next.push_back(population[order[static_cast<std::size_t>(e)]]);

  while (next.size() < size) {
    const auto& p1 = population[tournament_pick(population, config.tournament, rng)];
    const auto& p2 = population[tournament_pick(population, config.tournament, rng)];
    Chromosome child = p1;
    bool changed = false;
    const int length = static_cast<int>(p1.actions.size());
    if (length > 1 && uniform01(rng) < config.crossover_rate) {
      const int cut = uniform_int(rng, 1, length - 1);
      for (int t = cut; t < length; ++t) {
        const auto tu = static_cast<std::size_t>(t);
        if (child.actions[tu] != p2.actions[tu]) changed = true;
        child.actions[tu] = p2.actions[tu];
      }
    }
    for (auto& gene : child.actions) {
      if (uniform01(rng) < config.mutation_rate) {
        const int g = uniform_int(rng, 0, n_actions - 1);
        if (g != gene) changed = true;
        gene = g;
      }
    }
    if (changed) child.cached_fitness = fitness_fn(child.actions);
    next.push_back(std::move(child));
  }
  return next;
}

GaResult ga_search(const GaConfig& config, int horizon, int n_actions, const FitnessFn& fitness_fn) {
  config.validate();
  if (horizon < 1 || n_actions < 1) throw ConfigError("ga: horizon and n_actions must be >= 1");
  Rng rng(derive_seed(config.seed, "ga"));

  std::vector<Chromosome> pop(static_cast<std::size_t>(config.population));
  for (auto& c : pop) {
    c.actions.resize(static_cast<std::size_t>(horizon));
    for (auto& g : c.actions) g = uniform_int(rng, 0, n_actions - 1);
  }
  ensure_fitness(pop, fitness_fn);

  // Hall of fame: first-seen fitness per genome, ordered by discovery.
  std::map<std::vector<int>, std::size_t> seen;
  std::vector<Chromosome> hall;
  GaResult res;
  auto record = [&](const std::vector<Chromosome>& generation) {
    double best = -std::numeric_limits<double>::infinity();
    double sum = 0.0;
    for (const auto& c : generation) {
      best = std::max(best, *c.cached_fitness);
      sum += *c.cached_fitness;
      if (seen.emplace(c.actions, hall.size()).second) hall.push_back(c);
    }
    res.best_per_generation.push_back(best);
    res.mean_per_generation.push_back(sum / static_cast<double>(generation.size()));
    double hall_best = -std::numeric_limits<double>::infinity();
    for (const auto& c : hall) hall_best = std::max(hall_best, *c.cached_fitness);
    res.hall_of_fame_best.push_back(hall_best);
  };

  record(pop);
  for (int g = 0; g < config.generations; ++g) {
    pop = evolve(std::move(pop), config, n_actions, fitness_fn, rng);
    record(pop);
  }

  std::vector<std::size_t> idx(hall.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return *hall[a].cached_fitness > *hall[b].cached_fitness;
  });
  const std::size_t keep = std::min(idx.size(), static_cast<std::size_t>(config.candidates));
  for (std::size_t i = 0; i < keep; ++i) res.candidates.push_back(hall[idx[i]]);
  return res;
}

void MctsConfig::validate() const {
  if (budget < 1) throw ConfigError("mcts: budget must be >= 1");
  if (!(exploration > 0.0)) throw ConfigError("mcts: exploration constant must be > 0");
  if (rollout_depth < 0) throw ConfigError("mcts: rollout_depth must be >= 0");
  if (eval_rollouts < 1) throw ConfigError("mcts: eval_rollouts must be >= 1");
}

namespace {

struct Simulation {
  std::vector<int> actions;
  double ret = 0.0;
};

SearchNode* select_child(SearchNode& node, double c) {
  SearchNode* best = nullptr;
  double best_score = -std::numeric_limits<double>::infinity();
  const double log_parent = std::log(static_cast<double>(node.visits));
  for (auto& [action, child] : node.children) {
    const double score = child->mean() + c * std::sqrt(log_parent / child->visits);
    if (best == nullptr || score > best_score) {
      best = child.get();
      best_score = score;
    }
  }
  return best;
}

int next_unexpanded(const SearchNode& node, const std::vector<int>& genes, int n_actions) {
  const auto d = static_cast<std::size_t>(node.depth);
  if (d < genes.size() && !node.children.count(genes[d])) return genes[d];
  for (int a = 0; a < n_actions; ++a)
    if (!node.children.count(a)) return a;
  return -1;
}

}  // namespace

RefineResult mcts_refine(const Chromosome& chromosome, const PlanningModel& model,
                         const MctsConfig& config, const RolloutPolicy& fallback) {
  config.validate();
  const auto& genes = chromosome.actions;
  if (static_cast<int>(genes.size()) > model.horizon)
    throw UsageError("mcts_refine: chromosome longer than the horizon");
  for (int g : genes)
    if (g < 0 || g >= model.n_actions) throw UsageError("mcts_refine: gene out of range");

  Rng rng(derive_seed(config.seed, "mcts"));
  RefineResult result;
  result.root = std::make_unique<SearchNode>();
  result.root->state = model.reset(0);
  const int depth_limit = config.rollout_depth;

  std::vector<double> discounts(static_cast<std::size_t>(model.horizon) + 1, 1.0);
  for (std::size_t t = 1; t < discounts.size(); ++t) discounts[t] = discounts[t - 1] * model.discount;

  Simulation best_sim;
  bool have_sim = false;
  std::vector<SearchNode*> path;

  for (int sim = 0; sim < config.budget; ++sim) {
    path.assign(1, result.root.get());
    Simulation trace;
    double ret = 0.0;

    // Selection: descend through fully expanded nodes.
    SearchNode* node = result.root.get();
    while (node->depth < model.horizon &&
           next_unexpanded(*node, genes, model.n_actions) < 0) {
      node = select_child(*node, config.exploration);
      path.push_back(node);
      trace.actions.push_back(node->action);
      ret += discounts[static_cast<std::size_t>(node->depth - 1)] * node->edge_reward;
    }

    // Expansion: one new child.
    if (node->depth < model.horizon) {
      const int a = next_unexpanded(*node, genes, model.n_actions);
      auto rec = model.step(node->state, a, rng);
      auto child = std::make_unique<SearchNode>();
      child->state = std::move(rec.next_state);
      child->depth = node->depth + 1;
      child->action = a;
      child->edge_reward = rec.reward;
      SearchNode* raw = child.get();
      node->children.emplace(a, std::move(child));
      node = raw;
      path.push_back(node);
      trace.actions.push_back(a);
      ret += discounts[static_cast<std::size_t>(node->depth - 1)] * node->edge_reward;
    }

    // Simulation: remaining genes, then the fallback policy.
    cohort::PatientState state = node->state;
    const int stop = depth_limit > 0 ? std::min(model.horizon, node->depth + depth_limit)
                                     : model.horizon;
    for (int t = node->depth; t < stop; ++t) {
      int a = 0;
      if (static_cast<std::size_t>(t) < genes.size())
        a = genes[static_cast<std::size_t>(t)];
      else if (fallback)
        a = fallback(state, rng);
      auto rec = model.step(state, a, rng);
      ret += discounts[static_cast<std::size_t>(t)] * rec.reward;
      trace.actions.push_back(a);
      state = std::move(rec.next_state);
    }
    trace.ret = ret;

    // Backpropagation.
    node->own_simulations += 1;
    for (SearchNode* n : path) {
      n->visits += 1;
      n->value_sum += ret;
    }
    if (static_cast<int>(trace.actions.size()) == model.horizon &&
        (!have_sim || trace.ret > best_sim.ret)) {
      best_sim = std::move(trace);
      have_sim = true;
    }
  }

  // Greedy path by mean value, completed with the chromosome's genes.
  std::vector<int> greedy;
  const SearchNode* node = result.root.get();
  while (!node->children.empty()) {
    const SearchNode* best = nullptr;
    for (const auto& [a, child] : node->children)
      if (best == nullptr || child->mean() > best->mean()) best = child.get();
    greedy.push_back(best->action);
    node = best;
  }
  for (auto t = greedy.size(); t < static_cast<std::size_t>(model.horizon); ++t)
    greedy.push_back(t < genes.size() ? genes[t] : 0);

  auto score = [&](const std::vector<int>& plan) {
    Rng eval(derive_seed(config.seed, "mcts.evaluate"));
    return evaluate_sequence(model, plan, config.eval_rollouts, eval);
  };
  result.actions = greedy;
  result.estimate = score(greedy);
  if (have_sim && best_sim.actions != greedy) {
    const double alt = score(best_sim.actions);
    if (alt > result.estimate) {
      result.estimate = alt;
      result.actions = best_sim.actions;
    }
  }
  return result;
}

bool visits_conserved(const SearchNode& node) {
  int child_visits = 0;
  for (const auto& [a, child] : node.children) {
    if (!visits_conserved(*child)) return false;
    child_visits += child->visits;
  }
  return node.visits == child_visits + node.own_simulations;
}

int count_nodes(const SearchNode& node) {
  int n = 1;
  for (const auto& [a, child] : node.children) n += count_nodes(*child);
  return n;
}

std::size_t select_best(std::span<const double> estimates) {
  if (estimates.empty()) throw UsageError("select_best: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < estimates.size(); ++i)
    if (estimates[i] > estimates[best]) best = i;
  return best;
}

HybridResult hybrid_search(const PlanningModel& model, const GaConfig& ga, const MctsConfig& mcts,
                           const RolloutPolicy& fallback) {
  HybridResult out;
  const auto fitness_fn = make_fitness_fn(model, ga.fitness_rollouts, ga.seed);
  out.ga = ga_search(ga, model.horizon, model.n_actions, fitness_fn);
  std::vector<double> estimates;
  for (std::size_t i = 0; i < out.ga.candidates.size(); ++i) {
    out.ga_fitness.push_back(*out.ga.candidates[i].cached_fitness);
    MctsConfig cfg = mcts;
    cfg.seed = derive_seed(mcts.seed, "candidate", i);
    out.refined.push_back(mcts_refine(out.ga.candidates[i], model, cfg, fallback));
    estimates.push_back(out.refined.back().estimate);
  }
  out.selected = select_best(estimates);
  out.best_actions = out.refined[out.selected].actions;
  out.best_estimate = estimates[out.selected];
  return out;
}

std::pair<std::vector<int>, double> brute_force_optimum(const PlanningModel& model, int rollouts,
                                                        std::uint64_t seed) {
  std::vector<int> plan(static_cast<std::size_t>(model.horizon), 0);
  std::vector<int> best_plan = plan;
  double best = -std::numeric_limits<double>::infinity();
  for (;;) {
    Rng rng(derive_seed(seed, "fitness"));
    const double f = evaluate_sequence(model, plan, rollouts, rng);
    if (f > best) {
      best = f;
      best_plan = plan;
    }
    std::size_t i = 0;
    while (i < plan.size() && ++plan[i] == model.n_actions) plan[i++] = 0;
    if (i == plan.size()) break;
  }
  return {best_plan, best};
}

}  // namespace medgrpo::search
