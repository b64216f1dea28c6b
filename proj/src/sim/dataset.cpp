#include "dcrn/sim/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

namespace dcrn::sim {
namespace {

using json = nlohmann::ordered_json;

enum StreamTag : std::uint64_t {
  kTrainPatients = 1,
  kSplitShuffle = 2,
  kTestPatients = 3,
  kTestNoise = 4,
  kPlanPatients = 5,
  kPlanNoise = 6,
};

std::uint64_t history_index(std::size_t patient, std::size_t cut) {
  return (static_cast<std::uint64_t>(patient) << 20) | static_cast<std::uint64_t>(cut);
}

std::vector<std::string> covariate_name_list() {
  return {kCovariateNames.begin(), kCovariateNames.end()};
}

json statics_to_json(const PatientStatics& s) {
  return json{{"alpha0", s.alpha0}, {"lambda_p", s.lambda_p}, {"sigma", s.sigma},
              {"rho0", s.rho0},     {"f", s.fitness},         {"theta", s.theta}};
}

PatientStatics statics_from_json(const json& j) {
  PatientStatics s;
  s.alpha0 = j.at("alpha0").get<double>();
  s.lambda_p = j.at("lambda_p").get<double>();
  s.sigma = j.at("sigma").get<double>();
  s.rho0 = j.at("rho0").get<double>();
  s.fitness = j.at("f").get<double>();
  s.theta = j.at("theta").get<std::array<double, kArOrder>>();
  return s;
}

}  // namespace

std::string to_string(Split split) {
  switch (split) {
    case Split::kTrain:
      return "train";
    case Split::kVal:
      return "val";
    case Split::kTest:
      return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw std::invalid_argument("unknown split '" + s + "'");
}

void Trajectory::validate() const {
  const std::size_t n = outcomes.size();
  if (treatments.size() != n || covariates.size() != n * dim) {
    throw std::invalid_argument("trajectory " + std::to_string(id) + ": inconsistent lengths (X " +
                                std::to_string(covariates.size()) + ", A " +
                                std::to_string(treatments.size()) + ", Y " + std::to_string(n) +
                                ", dim " + std::to_string(dim) + ")");
  }
}

std::vector<const Trajectory*> Dataset::split(Split s) const {
  std::vector<const Trajectory*> out;
  for (const auto& t : trajectories)
    if (t.split == s) out.push_back(&t);
  return out;
}

void compute_train_stats(Dataset& dataset) {
  double max_abs = 0.0;
  double treated = 0.0;
  double steps = 0.0;
  for (const auto& t : dataset.trajectories) {
    if (t.split != Split::kTrain) continue;
    for (double y : t.outcomes) max_abs = std::max(max_abs, std::fabs(y));
    for (int a : t.treatments) treated += a;
    steps += static_cast<double>(t.treatments.size());
  }
  dataset.meta.outcome_max_abs = max_abs;
  dataset.meta.treated_fraction = steps > 0 ? treated / steps : 0.0;
  if (!(dataset.meta.treated_fraction > 0.0 && dataset.meta.treated_fraction < 1.0)) {
    throw OverlapError("overlap violated: treated fraction on the train split is " +
                       std::to_string(dataset.meta.treated_fraction));
  }
}

SimulatedPatient simulate_patient(const SimConfig& config, std::mt19937_64& rng,
                                  std::size_t patient_id, std::size_t length) {
  SampledPatient sp = sample_patient(config, rng, patient_id);
  SimulatedPatient out;
  Trajectory& tr = out.trajectory;
  tr.id = patient_id;
  tr.statics = sp.statics;
  tr.dim = kCovariateDim;
  tr.covariates.reserve(length * kCovariateDim);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  PatientState state = sp.state;
  for (std::size_t t = 0; t < length; ++t) {
    out.states.push_back(state);
    const auto x = covariates(sp.statics, state);
    tr.covariates.insert(tr.covariates.end(), x.begin(), x.end());
    tr.outcomes.push_back(state.rho);
    const int a = unit(rng) < treatment_prob(state, config.zeta) ? 1 : 0;
    tr.treatments.push_back(a);
    if (t + 1 < length) state = step_dynamics(sp.statics, state, a, config.noise, rng);
  }
  return out;
}

Dataset generate_dataset(const SimConfig& config) {
  config.validate();
  Dataset ds;
  ds.meta.source = "pkpd";
  ds.meta.zeta = config.zeta;
  ds.meta.seed = config.seed;
  ds.meta.covariate_names = covariate_name_list();
  ds.trajectories.reserve(config.n_patients);
  for (std::size_t i = 0; i < config.n_patients; ++i) {
    auto rng = make_stream(config.seed, kTrainPatients, i);
    ds.trajectories.push_back(simulate_patient(config, rng, i, config.max_length).trajectory);
  }

  std::vector<std::size_t> order(config.n_patients);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto shuffle_rng = make_stream(config.seed, kSplitShuffle, 0);
  std::shuffle(order.begin(), order.end(), shuffle_rng);
  const auto n = static_cast<double>(config.n_patients);
  const auto n_train = static_cast<std::size_t>(std::llround(n * config.splits.train));
  const auto n_val = std::min(config.n_patients - n_train,
                              static_cast<std::size_t>(std::llround(n * config.splits.val)));
  for (std::size_t k = 0; k < order.size(); ++k) {
    Split s = k < n_train ? Split::kTrain : (k < n_train + n_val ? Split::kVal : Split::kTest);
    ds.trajectories[order[k]].split = s;
  }
  compute_train_stats(ds);
  return ds;
}

CounterfactualTestSet generate_counterfactual_test(const SimConfig& config, std::size_t tau) {
  config.validate();
  if (tau == 0 || tau >= config.max_length) {
    throw std::invalid_argument("counterfactual test: tau must lie in [1, max_length)");
  }
  CounterfactualTestSet set;
  set.tau = tau;
  double max_abs = 0.0;
  for (std::size_t p = 0; p < config.n_test_patients; ++p) {
    auto rng = make_stream(config.seed, kTestPatients, p);
    SimulatedPatient sp = simulate_patient(config, rng, p, config.max_length);
    sp.trajectory.split = Split::kTest;
    for (double y : sp.trajectory.outcomes) max_abs = std::max(max_abs, std::fabs(y));
    for (std::size_t cut = 0; cut < config.max_length; ++cut) {
      CounterfactualHistory h;
      h.patient = p;
      h.cut = cut;
      h.statics = *sp.trajectory.statics;
      h.state = sp.states[cut];
      auto noise_rng = make_stream(config.seed, kTestNoise, history_index(p, cut));
      for (std::size_t u = 0; u < tau; ++u) h.future_noise.push_back(draw_step_noise(config.noise, noise_rng));
      const std::size_t hidx = set.histories.size();
      for (std::size_t j = 0; j < tau; ++j) {
        CounterfactualCase c;
        c.history = hidx;
        c.plan.assign(tau, 0);
        c.plan[j] = 1;
        c.truth = rollout(h.statics, h.state, c.plan, h.future_noise);
        set.cases.push_back(std::move(c));
      }
      set.histories.push_back(std::move(h));
    }
    set.patients.push_back(std::move(sp.trajectory));
  }
  set.normalizer = max_abs > 0.0 ? max_abs : 1.0;
  return set;
}

std::vector<int> plan_from_index(std::size_t k, std::size_t tau) {
  std::vector<int> plan(tau);
  for (std::size_t u = 0; u < tau; ++u) plan[u] = static_cast<int>((k >> (tau - 1 - u)) & 1U);
  return plan;
}

std::vector<std::vector<int>> all_plans(std::size_t tau) {
  std::vector<std::vector<int>> plans;
  for (std::size_t k = 0; k < (std::size_t{1} << tau); ++k) plans.push_back(plan_from_index(k, tau));
  return plans;
}

PlanSearch enumerate_optimal_plan(const CounterfactualHistory& history, std::size_t tau) {
  if (tau == 0 || tau > 5) throw std::invalid_argument("enumerate_optimal_plan: tau must lie in [1, 5]");
  PlanSearch out;
  const auto plans = all_plans(tau);
  for (std::size_t k = 0; k < plans.size(); ++k) {
    const double final_rho = rollout(history.statics, history.state, plans[k], history.future_noise).back();
    out.final_outcomes.push_back(final_rho);
    if (k == 0 || final_rho < out.best_outcome) {
      out.best_outcome = final_rho;
      out.best_index = k;
    }
  }
  out.best_plan = plans[out.best_index];
  return out;
}

PlanSelectionSet generate_plan_selection_set(const SimConfig& config, std::size_t tau,
                                             std::size_t n_patients) {
  config.validate();
  PlanSelectionSet set;
  set.tau = tau;
  for (std::size_t p = 0; p < n_patients; ++p) {
    auto rng = make_stream(config.seed, kPlanPatients, p);
    SimulatedPatient sp = simulate_patient(config, rng, p, config.max_length);
    sp.trajectory.split = Split::kTest;
    CounterfactualHistory h;
    h.patient = p;
    h.cut = config.max_length - 1;
    h.statics = *sp.trajectory.statics;
    h.state = sp.states.back();
    auto noise_rng = make_stream(config.seed, kPlanNoise, p);
    for (std::size_t u = 0; u < tau; ++u) h.future_noise.push_back(draw_step_noise(config.noise, noise_rng));
    set.optimum.push_back(enumerate_optimal_plan(h, tau));
    set.histories.push_back(std::move(h));
    set.patients.push_back(std::move(sp.trajectory));
  }
  return set;
}

std::filesystem::path meta_path_for(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("dataset: cannot write " + path.string());
  for (const auto& t : dataset.trajectories) {
    json rec;
    rec["id"] = t.id;
    rec["split"] = to_string(t.split);
    rec["statics"] = t.statics ? statics_to_json(*t.statics) : json(nullptr);
    json xs = json::array();
    for (std::size_t s = 0; s < t.length(); ++s) {
      xs.push_back(std::vector<double>(t.covariates.begin() + static_cast<std::ptrdiff_t>(s * t.dim),
                                       t.covariates.begin() + static_cast<std::ptrdiff_t>((s + 1) * t.dim)));
    }
    rec["X"] = std::move(xs);
    rec["A"] = t.treatments;
    rec["Y"] = t.outcomes;
    out << rec.dump() << '\n';
  }

  json meta;
  meta["format_version"] = 1;
  meta["source"] = dataset.meta.source;
  meta["zeta"] = dataset.meta.zeta;
  meta["seed"] = dataset.meta.seed;
  meta["covariate_names"] = dataset.meta.covariate_names;
  meta["outcome_max_abs"] = dataset.meta.outcome_max_abs;
  meta["treated_fraction"] = dataset.meta.treated_fraction;
  meta["n_patients"] = dataset.trajectories.size();
  std::ofstream mout(meta_path_for(path));
  if (!mout) throw std::runtime_error("dataset: cannot write " + meta_path_for(path).string());
  mout << meta.dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& path) {
  std::ifstream mfile(meta_path_for(path));
  if (!mfile) throw std::runtime_error("dataset: cannot read metadata " + meta_path_for(path).string());
  const json meta = json::parse(mfile);
  Dataset ds;
  ds.meta.source = meta.at("source").get<std::string>();
  ds.meta.zeta = meta.at("zeta").get<double>();
  ds.meta.seed = meta.at("seed").get<std::uint64_t>();
  ds.meta.covariate_names = meta.at("covariate_names").get<std::vector<std::string>>();
  ds.meta.outcome_max_abs = meta.at("outcome_max_abs").get<double>();
  ds.meta.treated_fraction = meta.at("treated_fraction").get<double>();

  std::ifstream in(path);
  if (!in) throw std::runtime_error("dataset: cannot read " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json rec = json::parse(line);
      Trajectory t;
      t.id = rec.at("id").get<std::size_t>();
      t.split = split_from_string(rec.at("split").get<std::string>());
      if (!rec.at("statics").is_null()) t.statics = statics_from_json(rec.at("statics"));
      t.dim = ds.meta.covariate_names.size();
      for (const auto& row : rec.at("X")) {
        auto v = row.get<std::vector<double>>();
        if (v.size() != t.dim) throw std::invalid_argument("covariate row has wrong width");
        t.covariates.insert(t.covariates.end(), v.begin(), v.end());
      }
      t.treatments = rec.at("A").get<std::vector<int>>();
      t.outcomes = rec.at("Y").get<std::vector<double>>();
      t.validate();
      ds.trajectories.push_back(std::move(t));
    } catch (const std::exception& e) {
      throw std::runtime_error("dataset: " + path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return ds;
}

}  // namespace dcrn::sim
