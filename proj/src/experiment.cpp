#include "medgrpo/experiment.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>

#include "medgrpo/advantage.hpp"
#include "medgrpo/errors.hpp"
#include "medgrpo/gradcheck.hpp"

namespace medgrpo::experiment {

namespace fs = std::filesystem;

// --- config --------------------------------------------------------------------

namespace {

const char* type_name(const json& v) { return v.type_name(); }

/// Reads the keys of one JSON object, remembering which were consumed so the
/// rest can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path) : path_(std::move(path)) {
    if (doc.is_null()) return;
    if (!doc.is_object()) throw ConfigError(path_ + ": expected an object, got " + type_name(doc));
    doc_ = &doc;
  }

  Section child(const std::string& key) {
    static const json null_value;
    if (!doc_ || !doc_->contains(key)) return Section(null_value, join(key));
    seen_.insert(key);
    return Section(doc_->at(key), join(key));
  }

  void get(const std::string& key, int& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number_integer()) fail(key, "expected an integer");
      const auto x = v->get<std::int64_t>();
      if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
        fail(key, "integer out of range");
      dst = static_cast<int>(x);
    }
  }
  void get(const std::string& key, std::uint64_t& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number_unsigned()) fail(key, "expected a non-negative integer");
      dst = v->get<std::uint64_t>();
    }
  }
  void get(const std::string& key, double& dst) {
    if (const json* v = find(key)) {
      if (!v->is_number()) fail(key, "expected a number");
      dst = v->get<double>();
    }
  }
  void get(const std::string& key, bool& dst) {
    if (const json* v = find(key)) {
      if (!v->is_boolean()) fail(key, "expected true or false");
      dst = v->get<bool>();
    }
  }
  void get(const std::string& key, std::string& dst) {
    if (const json* v = find(key)) {
      if (!v->is_string()) fail(key, "expected a string");
      dst = v->get<std::string>();
    }
  }
  void get(const std::string& key, std::vector<int>& dst) {
    if (const json* v = find(key)) {
      if (!v->is_array()) fail(key, "expected an array of integers");
      dst.clear();
      for (const auto& e : *v) {
        if (!e.is_number_integer()) fail(key, "expected an array of integers");
        dst.push_back(e.get<int>());
      }
    }
  }

  void finish() const {
    if (!doc_) return;
    for (const auto& [key, value] : doc_->items())
      if (!seen_.count(key)) throw ConfigError(join(key) + ": unknown key");
  }

 private:
  const json* find(const std::string& key) {
    if (!doc_ || !doc_->contains(key)) return nullptr;
    seen_.insert(key);
    return &doc_->at(key);
  }
  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    throw ConfigError(join(key) + ": " + msg);
  }
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json* doc_ = nullptr;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

std::uint64_t module_seed(std::uint64_t master, std::string_view module) {
  return derive_seed(master, module);
}

void ExperimentConfig::validate() const {
  auto scoped = [](const std::string& path, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigError(path + ": " + e.what());
    }
  };
  scoped("cohort", [&] { cohort.validate(); });
  scoped("fusion", [&] {
    fusion::FusionDims dims = fusion;
    dims.modality_dims = cohort.modality_dims;
    dims.validate();
  });
  scoped("cluster", [&] {
    if (cluster.k < 1) throw ConfigError("k must be >= 1");
    if (cluster.k > cohort.n_patients) throw ConfigError("k must not exceed cohort.n_patients");
    if (cluster.embed_dim < 1 || cluster.phi_hidden < 1) throw ConfigError("sizes must be >= 1");
    if (cluster.max_iters < 1 || cluster.restarts < 1)
      throw ConfigError("max_iters and restarts must be >= 1");
  });
  scoped("grpo", [&] { grpo.validate(); });
  scoped("ga", [&] { ga.validate(); });
  scoped("mcts", [&] { mcts.validate(); });
  scoped("ablation", [&] {
    if (ablation.seeds < 1 || ablation.batches < 1 || ablation.eval_repeats < 1)
      throw ConfigError("counts must be >= 1");
  });
}

ExperimentConfig ExperimentConfig::seeded() const {
  ExperimentConfig c = *this;
  c.fusion.modality_dims = c.cohort.modality_dims;
  c.cohort.seed = module_seed(seed, "cohort");
  c.ga.seed = module_seed(seed, "ga");
  c.mcts.seed = module_seed(seed, "mcts");
  if (c.cohort.noise_std == 0.0) {
    c.ga.fitness_rollouts = 1;
    c.mcts.eval_rollouts = 1;
  }
  return c;
}

ExperimentConfig config_from_json(const json& doc) {
  ExperimentConfig c;
  Section root(doc, "");
  root.get("label", c.label);
  root.get("seed", c.seed);
  root.get("output_dir", c.output_dir);

  Section co = root.child("cohort");
  co.get("n_patients", c.cohort.n_patients);
  co.get("n_latent_groups", c.cohort.n_latent_groups);
  co.get("modality_dims", c.cohort.modality_dims);
  c.cohort.n_modalities = static_cast<int>(c.cohort.modality_dims.size());
  co.get("horizon", c.cohort.horizon);
  co.get("n_actions", c.cohort.n_actions);
  co.get("discount", c.cohort.discount);
  co.get("state_dim", c.cohort.state_dim);
  co.get("noise_std", c.cohort.noise_std);
  co.get("feature_dim", c.cohort.feature_dim);
  co.get("feature_std", c.cohort.feature_std);
  co.get("feature_separation", c.cohort.feature_separation);
  co.get("feature_clip", c.cohort.feature_clip);
  co.get("modality_noise_std", c.cohort.modality_noise_std);
  co.get("action_cost", c.cohort.action_cost);
  co.finish();

  Section fu = root.child("fusion");
  fu.get("hidden", c.fusion.hidden);
  fu.get("heads", c.fusion.heads);
  fu.get("kernel_width", c.fusion.kernel_width);
  fu.finish();
  c.fusion.modality_dims = c.cohort.modality_dims;

  Section cl = root.child("cluster");
  cl.get("k", c.cluster.k);
  cl.get("embed_dim", c.cluster.embed_dim);
  cl.get("phi_hidden", c.cluster.phi_hidden);
  cl.get("max_iters", c.cluster.max_iters);
  cl.get("restarts", c.cluster.restarts);
  cl.finish();

  Section gr = root.child("grpo");
  gr.get("clip", c.grpo.clip);
  gr.get("kl_weight", c.grpo.kl_weight);
  gr.get("alpha1", c.grpo.advantage.alpha1);
  gr.get("alpha2", c.grpo.advantage.alpha2);
  gr.get("alpha3", c.grpo.advantage.alpha3);
  gr.get("beta", c.grpo.advantage.beta);
  gr.get("step_size", c.grpo.step_size);
  gr.get("epochs", c.grpo.epochs);
  gr.get("minibatch", c.grpo.minibatch);
  gr.get("iterations", c.grpo.iterations);
  gr.get("rollouts_per_patient", c.grpo.rollouts_per_patient);
  gr.get("normalize_advantages", c.grpo.normalize_advantages);
  gr.get("policy_hidden", c.grpo.policy_hidden);
  gr.get("value_hidden", c.grpo.value_hidden);
  gr.get("value_epochs", c.grpo.value_epochs);
  gr.get("value_step", c.grpo.value_step);
  gr.finish();

  Section ga = root.child("ga");
  ga.get("population", c.ga.population);
  ga.get("generations", c.ga.generations);
  ga.get("tournament", c.ga.tournament);
  ga.get("crossover_rate", c.ga.crossover_rate);
  ga.get("mutation_rate", c.ga.mutation_rate);
  ga.get("elite", c.ga.elite);
  ga.get("fitness_rollouts", c.ga.fitness_rollouts);
  ga.get("candidates", c.ga.candidates);
  ga.finish();

  Section mc = root.child("mcts");
  mc.get("budget", c.mcts.budget);
  mc.get("exploration", c.mcts.exploration);
  mc.get("rollout_depth", c.mcts.rollout_depth);
  mc.get("eval_rollouts", c.mcts.eval_rollouts);
  mc.finish();

  Section ab = root.child("ablation");
  ab.get("seeds", c.ablation.seeds);
  ab.get("batches", c.ablation.batches);
  ab.get("eval_repeats", c.ablation.eval_repeats);
  ab.finish();

  root.finish();
  c.validate();
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  j["label"] = c.label;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["cohort"] = {
      {"n_patients", c.cohort.n_patients},
      {"n_latent_groups", c.cohort.n_latent_groups},
      {"modality_dims", c.cohort.modality_dims},
      {"horizon", c.cohort.horizon},
      {"n_actions", c.cohort.n_actions},
      {"discount", c.cohort.discount},
      {"state_dim", c.cohort.state_dim},
      {"noise_std", c.cohort.noise_std},
      {"feature_dim", c.cohort.feature_dim},
      {"feature_std", c.cohort.feature_std},
      {"feature_separation", c.cohort.feature_separation},
      {"feature_clip", c.cohort.feature_clip},
      {"modality_noise_std", c.cohort.modality_noise_std},
      {"action_cost", c.cohort.action_cost},
  };
  j["fusion"] = {{"hidden", c.fusion.hidden},
                 {"heads", c.fusion.heads},
                 {"kernel_width", c.fusion.kernel_width}};
  j["cluster"] = {{"k", c.cluster.k},
                  {"embed_dim", c.cluster.embed_dim},
                  {"phi_hidden", c.cluster.phi_hidden},
                  {"max_iters", c.cluster.max_iters},
                  {"restarts", c.cluster.restarts}};
  j["grpo"] = {
      {"clip", c.grpo.clip},
      {"kl_weight", c.grpo.kl_weight},
      {"alpha1", c.grpo.advantage.alpha1},
      {"alpha2", c.grpo.advantage.alpha2},
      {"alpha3", c.grpo.advantage.alpha3},
      {"beta", c.grpo.advantage.beta},
      {"step_size", c.grpo.step_size},
      {"epochs", c.grpo.epochs},
      {"minibatch", c.grpo.minibatch},
      {"iterations", c.grpo.iterations},
      {"rollouts_per_patient", c.grpo.rollouts_per_patient},
      {"normalize_advantages", c.grpo.normalize_advantages},
      {"policy_hidden", c.grpo.policy_hidden},
      {"value_hidden", c.grpo.value_hidden},
      {"value_epochs", c.grpo.value_epochs},
      {"value_step", c.grpo.value_step},
  };
  j["ga"] = {{"population", c.ga.population},
             {"generations", c.ga.generations},
             {"tournament", c.ga.tournament},
             {"crossover_rate", c.ga.crossover_rate},
             {"mutation_rate", c.ga.mutation_rate},
             {"elite", c.ga.elite},
             {"fitness_rollouts", c.ga.fitness_rollouts},
             {"candidates", c.ga.candidates}};
  j["mcts"] = {{"budget", c.mcts.budget},
               {"exploration", c.mcts.exploration},
               {"rollout_depth", c.mcts.rollout_depth},
               {"eval_rollouts", c.mcts.eval_rollouts}};
  j["ablation"] = {{"seeds", c.ablation.seeds},
                   {"batches", c.ablation.batches},
                   {"eval_repeats", c.ablation.eval_repeats}};
  return j;
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    // nlohmann reports "parse error at line L, column C: ..."
    std::string what = e.what();
    const auto pos = what.find("parse error");
    throw ConfigError(pos == std::string::npos ? what : what.substr(pos));
  }
  return config_from_json(doc);
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// --- pipeline ------------------------------------------------------------------

Pipeline build_pipeline(const ExperimentConfig& config) {
  config.validate();
  Pipeline p;
  p.config = config.seeded();
  p.cohort = cohort::generate_cohort(p.config.cohort);

  Rng phi_rng(module_seed(config.seed, "embedding"));
  p.phi = cluster::make_phi(p.config.cohort.feature_dim, p.config.cluster.phi_hidden,
                            p.config.cluster.embed_dim, phi_rng);
  const auto embeddings = cluster::embed_all(p.phi, p.cohort.features);
  cluster::KMeansOptions km;
  km.k = p.config.cluster.k;
  km.seed = module_seed(config.seed, "cluster");
  km.max_iters = p.config.cluster.max_iters;
  km.restarts = p.config.cluster.restarts;
  p.assignment = cluster::kmeans(embeddings, km);

  Rng fusion_rng(module_seed(config.seed, "fusion"));
  p.fusion = fusion::init_fusion(p.config.fusion, fusion_rng);
  return p;
}

// --- serialization ---------------------------------------------------------------

namespace {

json matrix_json(const nn::Matrix& m) {
  return {{"rows", m.rows()},
          {"cols", m.cols()},
          {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

template <typename M>
M read_matrix(const json& j, const std::string& what) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const auto data = j.at("data").get<std::vector<double>>();
  if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols)
    throw ConfigError(what + ": data length does not match rows x cols");
  M m(rows, cols);
  std::copy(data.begin(), data.end(), m.data());
  return m;
}

json vector_json(const nn::Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

nn::Vector read_vector(const json& j) {
  const auto data = j.get<std::vector<double>>();
  return Eigen::Map<const nn::Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
}

json mlp_json(const nn::Mlp& mlp) {
  json layers = json::array();
  for (const auto& l : mlp.layers)
    layers.push_back({{"activation", std::string(nn::to_string(l.activation))},
                      {"weight", matrix_json(l.weight)},
                      {"bias", matrix_json(l.bias)}});
  return layers;
}

nn::Mlp read_mlp(const json& j, const std::string& what) {
  nn::Mlp mlp;
  for (const auto& l : j) {
    nn::DenseLayer layer;
    layer.activation = nn::activation_from_string(l.at("activation").get<std::string>());
    layer.weight = read_matrix<nn::Matrix>(l.at("weight"), what);
    layer.bias = read_matrix<nn::RowVector>(l.at("bias"), what);
    if (layer.bias.size() != layer.weight.rows())
      throw ConfigError(what + ": bias width does not match weight rows");
    if (!mlp.layers.empty() && mlp.layers.back().out() != layer.in())
      throw ConfigError(what + ": consecutive layer widths disagree");
    mlp.layers.push_back(std::move(layer));
  }
  return mlp;
}

json fusion_json(const fusion::FusionParams& f) {
  json mods = json::array();
  for (const auto& m : f.modalities)
    mods.push_back({{"kernel", matrix_json(m.kernel)},
                    {"kernel_bias", matrix_json(m.kernel_bias)},
                    {"query", matrix_json(m.query)},
                    {"key", matrix_json(m.key)},
                    {"value", matrix_json(m.value)},
                    {"output", matrix_json(m.output)}});
  return {{"heads", f.heads},
          {"kernel_width", f.kernel_width},
          {"modalities", mods},
          {"gate_weight", matrix_json(f.gate_weight)},
          {"gate_bias", matrix_json(f.gate_bias)}};
}

fusion::FusionParams read_fusion(const json& j) {
  fusion::FusionParams f;
  f.heads = j.at("heads").get<int>();
  f.kernel_width = j.at("kernel_width").get<int>();
  for (const auto& m : j.at("modalities")) {
    fusion::ModalityEncoder e;
    e.kernel = read_matrix<nn::Matrix>(m.at("kernel"), "fusion");
    e.kernel_bias = read_matrix<nn::RowVector>(m.at("kernel_bias"), "fusion");
    e.query = read_matrix<nn::Matrix>(m.at("query"), "fusion");
    e.key = read_matrix<nn::Matrix>(m.at("key"), "fusion");
    e.value = read_matrix<nn::Matrix>(m.at("value"), "fusion");
    e.output = read_matrix<nn::Matrix>(m.at("output"), "fusion");
    f.modalities.push_back(std::move(e));
  }
  f.gate_weight = read_matrix<nn::Matrix>(j.at("gate_weight"), "fusion");
  f.gate_bias = read_matrix<nn::RowVector>(j.at("gate_bias"), "fusion");
  return f;
}

json assignment_json(const cluster::GroupAssignment& a) {
  json centroids = json::array();
  for (const auto& c : a.centroids) centroids.push_back(vector_json(c));
  return {{"n_groups", a.n_groups},
          {"labels", a.labels},
          {"centroids", centroids},
          {"inertia", a.inertia},
          {"iterations", a.iterations}};
}

cluster::GroupAssignment read_assignment(const json& j) {
  cluster::GroupAssignment a;
  a.n_groups = j.at("n_groups").get<int>();
  a.labels = j.at("labels").get<std::vector<int>>();
  for (const auto& c : j.at("centroids")) a.centroids.push_back(read_vector(c));
  a.inertia = j.at("inertia").get<double>();
  a.iterations = j.at("iterations").get<int>();
  for (int l : a.labels)
    if (l < 0 || l >= a.n_groups) throw ConfigError("assignment: label out of range");
  return a;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << text;
}

std::string format_double(double x) {
  std::ostringstream s;
  s << std::setprecision(12) << x;
  return s.str();
}

}  // namespace

std::string dump(const json& doc) { return doc.dump(2) + "\n"; }

json to_json(const Checkpoint& c) {
  return {{"config", c.config},
          {"phi", mlp_json(c.phi)},
          {"assignment", assignment_json(c.assignment)},
          {"fusion", fusion_json(c.fusion)},
          {"policy", {{"trunk", mlp_json(c.policy.trunk)},
                      {"group_bias", matrix_json(c.policy.group_bias)}}},
          {"value", {{"n_groups", c.value.n_groups}, {"net", mlp_json(c.value.net)}}}};
}

Checkpoint checkpoint_from_json(const json& doc) {
  try {
    Checkpoint c;
    c.config = doc.at("config");
    c.phi = read_mlp(doc.at("phi"), "phi");
    c.assignment = read_assignment(doc.at("assignment"));
    c.fusion = read_fusion(doc.at("fusion"));
    c.policy.trunk = read_mlp(doc.at("policy").at("trunk"), "policy");
    c.policy.group_bias = read_matrix<nn::Matrix>(doc.at("policy").at("group_bias"), "policy");
    c.value.n_groups = doc.at("value").at("n_groups").get<int>();
    c.value.net = read_mlp(doc.at("value").at("net"), "value");
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("checkpoint: malformed document (") + e.what() + ")");
  }
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read checkpoint '" + path.string() + "'");
  try {
    return checkpoint_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void check_compatible(const Checkpoint& ck, const Pipeline& p) {
  auto mismatch = [](const std::string& what, long have, long want) {
    throw ConfigError("checkpoint does not match config: " + what + " is " + std::to_string(have) +
                      " in the checkpoint but " + std::to_string(want) + " in the config");
  };
  const auto& f = p.fusion;
  if (ck.fusion.n_modalities() != f.n_modalities())
    mismatch("number of modalities", ck.fusion.n_modalities(), f.n_modalities());
  for (int m = 0; m < f.n_modalities(); ++m) {
    const auto& a = ck.fusion.modalities[static_cast<std::size_t>(m)];
    const auto& b = f.modalities[static_cast<std::size_t>(m)];
    if (a.kernel.rows() != b.kernel.rows())
      mismatch("fusion kernel rows of modality " + std::to_string(m), a.kernel.rows(),
               b.kernel.rows());
  }
  if (ck.fusion.kernel_width != f.kernel_width)
    mismatch("fusion kernel_width", ck.fusion.kernel_width, f.kernel_width);
  if (ck.fusion.heads != f.heads) mismatch("fusion heads", ck.fusion.heads, f.heads);
  if (ck.fusion.fused_width() != f.fused_width())
    mismatch("fused width", ck.fusion.fused_width(), f.fused_width());
  if (ck.policy.state_width() != f.fused_width())
    mismatch("policy input width", ck.policy.state_width(), f.fused_width());
  if (ck.policy.n_actions() != p.cohort.config.n_actions)
    mismatch("number of actions", ck.policy.n_actions(), p.cohort.config.n_actions);
  if (ck.policy.n_groups() != p.assignment.n_groups)
    mismatch("number of groups", ck.policy.n_groups(), p.assignment.n_groups);
  if (static_cast<int>(ck.assignment.labels.size()) != p.cohort.n_patients())
    mismatch("number of patients", static_cast<long>(ck.assignment.labels.size()),
             p.cohort.n_patients());
  if (ck.assignment.n_groups != ck.policy.n_groups())
    mismatch("assignment groups vs policy groups", ck.assignment.n_groups, ck.policy.n_groups());
}

json cohort_to_json(const cohort::Cohort& c, const cluster::GroupAssignment& a) {
  json groups = json::array();
  for (const auto& g : c.groups)
    groups.push_back({{"transition", matrix_json(g.transition)},
                      {"action_effect", matrix_json(g.action_effect)},
                      {"target", vector_json(g.target)},
                      {"initial_mean", vector_json(g.initial_mean)},
                      {"feature_mean", vector_json(g.feature_mean)}});
  json patients = json::array();
  for (int i = 0; i < c.n_patients(); ++i)
    patients.push_back({{"patient_id", i},
                        {"latent_group", c.latent_group[static_cast<std::size_t>(i)]},
                        {"assigned_group", a.labels[static_cast<std::size_t>(i)] + 1},
                        {"features", vector_json(c.features[static_cast<std::size_t>(i)])}});
  json projections = json::array();
  for (const auto& p : c.projections) projections.push_back(matrix_json(p));
  return {{"seed", c.config.seed},
          {"state_dim", c.config.state_dim},
          {"n_actions", c.config.n_actions},
          {"horizon", c.config.horizon},
          {"groups", groups},
          {"projections", projections},
          {"patients", patients}};
}

std::string metrics_header(int n_groups) {
  std::string h = "iteration,mean_return";
  for (int g = 1; g <= n_groups; ++g) h += ",ret_g" + std::to_string(g);
  for (int g = 1; g <= n_groups; ++g) h += ",kl_g" + std::to_string(g);
  return h + ",objective,fairness_gap,wall_ms";
}

std::string metrics_row(const grpo::IterationLog& log) {
  std::string row = std::to_string(log.iteration) + "," + format_double(log.mean_return);
  for (double r : log.group_returns) row += "," + format_double(r);
  for (double k : log.group_kl) row += "," + format_double(k);
  row += "," + format_double(log.objective) + "," + format_double(log.fairness_gap) + "," +
         format_double(log.wall_ms);
  return row;
}

// --- analyses --------------------------------------------------------------------

std::vector<double> group_returns(const Pipeline& p, const grpo::PolicyParams& policy, int repeats,
                                  std::uint64_t seed) {
  const auto episodes = grpo::collect_episodes(p.cohort, p.assignment, p.fusion, &policy, repeats,
                                               derive_seed(seed, "group_returns"), 0);
  const auto k = static_cast<std::size_t>(p.assignment.n_groups);
  std::vector<double> sum(k, 0.0);
  std::vector<int> count(k, 0);
  for (const auto& ep : episodes) {
    sum[static_cast<std::size_t>(ep.group)] +=
        advantage::discounted_returns(ep.trajectory, p.cohort.config.discount).front();
    ++count[static_cast<std::size_t>(ep.group)];
  }
  std::vector<double> out(k);
  for (std::size_t g = 0; g < k; ++g)
    out[g] = count[g] > 0 ? sum[g] / count[g] : std::numeric_limits<double>::quiet_NaN();
  return out;
}

std::vector<ReductionRow> ppo_reduction(const ExperimentConfig& config, int batches) {
  ExperimentConfig c = config;
  c.grpo.advantage = {1.0, 0.0, 0.0, c.grpo.advantage.beta};
  c.grpo.kl_weight = 0.0;
  c.grpo.normalize_advantages = false;
  const Pipeline p = build_pipeline(c);
  const std::uint64_t seed = module_seed(c.seed, "ablate.ppo_reduction");
  const int k = p.assignment.n_groups;
  const auto old_params = grpo::initial_policy(p.fusion, p.cohort.config.n_actions, k, c.grpo, seed);
  const auto value = grpo::initial_value(p.fusion, k, c.grpo, seed);
  const grpo::FrozenPolicy frozen(old_params);

  const auto episodes = grpo::collect_episodes(p.cohort, p.assignment, p.fusion, &old_params, 1,
                                               seed, 0);
  std::vector<nn::RowVector> states;
  std::vector<int> actions;
  std::vector<advantage::AdvantageRow> rows;
  for (const auto& ep : episodes) {
    const auto returns = advantage::discounted_returns(ep.trajectory, p.cohort.config.discount);
    for (std::size_t t = 0; t < returns.size(); ++t) {
      advantage::AdvantageRow row;
      row.patient_id = ep.trajectory.patient_id;
      row.time = static_cast<int>(t);
      row.group = ep.group;
      row.ret = returns[t];
      row.baseline = advantage::value_estimate(value, ep.states[t], ep.group);
      rows.push_back(row);
      states.push_back(ep.states[t]);
      actions.push_back(ep.trajectory.steps[t].action);
    }
  }
  const auto batch = advantage::build_advantage_batch(std::move(rows), c.grpo.advantage);
  const auto samples = grpo::make_policy_samples(batch, states, actions, false);

  std::vector<ReductionRow> out;
  for (int b = 0; b < batches; ++b) {
    Rng rng(derive_seed(seed, "batch", b));
    grpo::PolicyParams policy = old_params;
    const double scale = 0.05 + 0.45 * uniform01(rng);  // spans clipped and unclipped ratios
    for (auto t : policy.tensors())
      for (double& x : t) x += scale * normal(rng);
    const std::size_t size = std::min<std::size_t>(samples.size(), static_cast<std::size_t>(c.grpo.minibatch));
    std::vector<grpo::PolicySample> sub;
    for (std::size_t i = 0; i < size; ++i)
      sub.push_back(samples[static_cast<std::size_t>(
          uniform_int(rng, 0, static_cast<int>(samples.size()) - 1))]);
    ReductionRow row;
    row.batch = b;
    row.grpo = grpo::grpo_objective(policy, frozen, sub, c.grpo.clip, 0.0, false).value;
    row.ppo = grpo::ppo_objective(policy, frozen, sub, c.grpo.clip);
    row.abs_diff = std::abs(row.grpo - row.ppo);
    out.push_back(row);
  }
  return out;
}

std::vector<SweepRow> fairness_sweep(const ExperimentConfig& config, int workers) {
  std::vector<SweepRow> out;
  for (double alpha3 : {0.0, 0.1, 0.5}) {
    SweepRow row;
    row.alpha3 = alpha3;
    for (int s = 0; s < config.ablation.seeds; ++s) {
      ExperimentConfig c = config;
      c.seed = derive_seed(config.seed, "sweep", s);
      c.grpo.advantage.alpha3 = alpha3;
      const Pipeline p = build_pipeline(c);
      grpo::TrainOptions opts;
      opts.workers = workers;
      const auto result = grpo::train(p.cohort, p.assignment, p.fusion, p.config.grpo,
                                      module_seed(c.seed, "grpo"), opts);
      const auto returns =
          group_returns(p, result.policy, config.ablation.eval_repeats, module_seed(c.seed, "final"));
      const double gap = grpo::fairness_gap(returns);
      row.per_seed_gap.push_back(gap);
      row.fairness_gap += gap / config.ablation.seeds;
      double mean = 0.0;
      int present = 0;
      for (double r : returns)
        if (std::isfinite(r)) {
          mean += r;
          ++present;
        }
      row.final_return += (present > 0 ? mean / present : 0.0) / config.ablation.seeds;
    }
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<GradcheckLine> run_gradchecks(const ExperimentConfig& config, const std::string& corrupt) {
  const ExperimentConfig c = config.seeded();
  const std::uint64_t seed = module_seed(config.seed, "gradcheck");
  const int width = c.fusion.hidden * static_cast<int>(c.fusion.modality_dims.size());
  const int steps = std::min(c.cohort.horizon, 6);
  auto hook = [&](const std::string& name) { return checks::Corruption{corrupt == name, 1e-2}; };
  std::vector<GradcheckLine> out;
  out.push_back({"fusion_encoder",
                 checks::check_fusion_gradient(c.fusion, steps, seed, hook("fusion_encoder"))});
  out.push_back({"policy_objective",
                 checks::check_policy_gradient(width, c.cohort.n_actions, c.cluster.k,
                                               c.grpo.policy_hidden, 24, c.grpo.clip,
                                               std::max(c.grpo.kl_weight, 0.05), seed,
                                               hook("policy_objective"))});
  out.push_back({"value_regression",
                 checks::check_value_gradient(width, c.cluster.k, c.grpo.value_hidden, 24, seed,
                                              hook("value_regression"))});
  return out;
}

search::HybridResult search_patient(const Pipeline& p, const Checkpoint& ck, int patient_id) {
  if (patient_id < 0 || patient_id >= p.cohort.n_patients())
    throw ConfigError("patient " + std::to_string(patient_id) + " does not exist (cohort has " +
                      std::to_string(p.cohort.n_patients()) + " patients)");
  const int group = ck.assignment.labels[static_cast<std::size_t>(patient_id)];
  const auto model = search::make_model(p.cohort, patient_id);
  search::GaConfig ga = p.config.ga;
  ga.seed = derive_seed(ga.seed, "patient", patient_id);
  search::MctsConfig mcts = p.config.mcts;
  mcts.seed = derive_seed(mcts.seed, "patient", patient_id);

  // Past the chromosome, rollouts act with the trained policy on the
  // single-step observation of the current state.
  const cohort::Cohort& co = p.cohort;
  const grpo::PolicyParams& policy = ck.policy;
  const fusion::FusionParams& fu = ck.fusion;
  search::RolloutPolicy fallback = [&co, &policy, &fu, patient_id, group](
                                       const cohort::PatientState& s, Rng& rng) {
    const auto series = cohort::observe_modalities(co, patient_id, std::span(&s, 1));
    const auto probs = grpo::action_distribution(policy, fusion::fuse_pooled(fu, series), group);
    return cohort::sample_action(probs, rng);
  };
  return search::hybrid_search(model, ga, mcts, fallback);
}

json search_report(const search::HybridResult& r, int patient_id, int group) {
  json candidates = json::array();
  for (std::size_t i = 0; i < r.refined.size(); ++i)
    candidates.push_back({{"rank", i},
                          {"actions", r.ga.candidates[i].actions},
                          {"ga_fitness", r.ga_fitness[i]},
                          {"mcts_estimate", r.refined[i].estimate},
                          {"refined_actions", r.refined[i].actions},
                          {"root_visits", r.refined[i].root->visits},
                          {"tree_nodes", search::count_nodes(*r.refined[i].root)}});
  return {{"patient_id", patient_id},
          {"group", group + 1},
          {"candidates", candidates},
          {"selected", r.selected},
          {"best_actions", r.best_actions},
          {"best_estimate", r.best_estimate},
          {"ga_progress",
           {{"best", r.ga.best_per_generation},
            {"mean", r.ga.mean_per_generation},
            {"hall_of_fame_best", r.ga.hall_of_fame_best}}}};
}

// --- commands ----------------------------------------------------------------------

namespace {

ExperimentConfig resolve(const CommandOptions& o) {
  if (o.config_path.empty()) throw ConfigError("--config is required");
  ExperimentConfig c = load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.out_dir) c.output_dir = *o.out_dir;
  if (o.workers < 1) throw ConfigError("--workers must be >= 1");
  return c;
}

template <typename F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const DivergenceError& e) {
    err << "diverged at iteration " << e.iteration() << ": " << e.what() << "\n";
    return kDivergence;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

int cmd_train(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig config = resolve(o);
    const Pipeline p = build_pipeline(config);
    const fs::path dir = config.output_dir;
    fs::create_directories(dir);

    std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw ConfigError("cannot write '" + (dir / "metrics.csv").string() + "'");
    metrics << metrics_header(p.assignment.n_groups) << "\n";
    grpo::TrainOptions opts;
    opts.workers = o.workers;
    opts.on_iteration = [&](const grpo::IterationLog& log) {
      metrics << metrics_row(log) << "\n";
      metrics.flush();
    };
    const auto result = grpo::train(p.cohort, p.assignment, p.fusion, p.config.grpo,
                                    module_seed(config.seed, "grpo"), opts);

    // the snapshot describes the model, not where it was written; reruns elsewhere stay identical
    json snapshot = to_json(config);
    snapshot.erase("output_dir");
    Checkpoint ck{std::move(snapshot), p.phi, p.assignment, p.fusion, result.policy, result.value};
    write_text(dir / "checkpoint.json", dump(to_json(ck)));
    write_text(dir / "cohort.json", dump(cohort_to_json(p.cohort, p.assignment)));
    std::ostringstream adv;
    advantage::write_csv(result.last_batch, adv);
    write_text(dir / "advantages.csv", adv.str());

    const double final_return = result.log.empty()
                                    ? grpo::evaluate_return(p.cohort, p.assignment, p.fusion,
                                                            &result.policy, 1,
                                                            module_seed(config.seed, "final"))
                                    : result.log.back().mean_return;
    out << "final mean return: " << format_double(final_return) << "\n";
    out << "wrote " << (dir / "metrics.csv").string() << " and " << (dir / "checkpoint.json").string()
        << "\n";
    return kOk;
  });
}

int cmd_search(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig config = resolve(o);
    if (o.checkpoint_path.empty()) throw ConfigError("--checkpoint is required");
    const Checkpoint ck = load_checkpoint(o.checkpoint_path);
    const Pipeline p = build_pipeline(config);
    check_compatible(ck, p);
    const auto result = search_patient(p, ck, o.patient_id);
    const int group = ck.assignment.labels[static_cast<std::size_t>(o.patient_id)];
    const fs::path path = fs::path(config.output_dir) / "search_report.json";
    write_text(path, dump(search_report(result, o.patient_id, group)));
    out << "best plan estimate: " << format_double(result.best_estimate) << " (candidate "
        << result.selected << " of " << result.refined.size() << ")\n";
    out << "wrote " << path.string() << "\n";
    return kOk;
  });
}

int cmd_ablate(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (o.mode != "ppo_reduction" && o.mode != "fairness_sweep")
      throw ConfigError("unknown ablation mode '" + o.mode +
                        "' (available: ppo_reduction, fairness_sweep)");
    const ExperimentConfig config = resolve(o);
    const fs::path dir = config.output_dir;
    std::ostringstream csv;
    if (o.mode == "ppo_reduction") {
      const auto rows = ppo_reduction(config, config.ablation.batches);
      csv << "batch,grpo_objective,ppo_objective,abs_diff\n" << std::setprecision(17);
      double worst = 0.0;
      for (const auto& r : rows) {
        csv << r.batch << "," << r.grpo << "," << r.ppo << "," << r.abs_diff << "\n";
        worst = std::max(worst, r.abs_diff);
      }
      write_text(dir / "ablation_ppo_reduction.csv", csv.str());
      out << "max objective discrepancy: " << worst << "\n";
      return worst < 1e-10 ? kOk : kCheckFailed;
    }
    const auto rows = fairness_sweep(config, o.workers);
    csv << "alpha3,fairness_gap,final_return,seeds\n";
    for (const auto& r : rows) {
      csv << format_double(r.alpha3) << "," << format_double(r.fairness_gap) << ","
          << format_double(r.final_return) << "," << r.per_seed_gap.size() << "\n";
      out << "alpha3=" << format_double(r.alpha3) << " fairness_gap=" << format_double(r.fairness_gap)
          << " final_return=" << format_double(r.final_return) << "\n";
    }
    write_text(dir / "ablation_fairness_sweep.csv", csv.str());
    return kOk;
  });
}

int cmd_gradcheck(const CommandOptions& o, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig config = resolve(o);
    const auto lines = run_gradchecks(config, o.corrupt);
    std::vector<std::string> failed;
    for (const auto& l : lines) {
      const bool ok = l.report.passed(kGradTolerance);
      out << l.module << " max_rel_error=" << std::setprecision(3) << std::scientific
          << l.report.max_rel_error << std::defaultfloat << " checked=" << l.report.checked
          << (ok ? " ok" : " FAILED") << "\n";
      if (!ok) failed.push_back(l.module);
    }
    if (failed.empty()) return kOk;
    err << "gradient check failed:";
    for (const auto& f : failed) err << " " << f;
    err << "\n";
    return kCheckFailed;
  });
}

}  // namespace medgrpo::experiment
