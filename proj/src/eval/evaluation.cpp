#include "dcrn/eval/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>
#include <unordered_map>

#include <boost/tokenizer.hpp>

namespace dcrn::eval {

using ad::Graph;
using ad::Tensor;

namespace {

constexpr std::size_t kChunk = 1024;

constexpr std::uint64_t kSimSeedTag = 301;
constexpr std::uint64_t kTrainSeedTag = 302;
constexpr std::uint64_t kRandomPlanTag = 303;

void check_queries(const std::vector<sim::Trajectory>& patients, const std::vector<sim::CounterfactualHistory>& histories,
                   const std::vector<ForecastQuery>& queries) {
  for (const auto& q : queries) {
    if (q.history >= histories.size()) throw std::out_of_range("forecast: history index out of range");
    const auto& h = histories[q.history];
    if (h.patient >= patients.size() || h.cut >= patients[h.patient].length()) {
      throw std::out_of_range("forecast: history cut outside its patient trajectory");
    }
  }
}

}  // namespace

double mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double sample_sd(const std::vector<double>& values) {
  if (values.size() < 2) return 0.0;
  const double m = mean(values);
  double acc = 0.0;
  for (double v : values) acc += (v - m) * (v - m);
  return std::sqrt(acc / static_cast<double>(values.size() - 1));
}

double nrmse(const std::vector<double>& predictions, const std::vector<double>& truths, double normalizer) {
  if (predictions.empty()) throw std::invalid_argument("nrmse: empty input");
  if (predictions.size() != truths.size()) {
    throw std::invalid_argument("nrmse: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(truths.size()) + " truths");
  }
  if (!(normalizer > 0.0)) throw std::invalid_argument("nrmse: normalizer must be positive");
  double sse = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double d = predictions[i] - truths[i];
    sse += d * d;
  }
  return std::sqrt(sse / static_cast<double>(predictions.size())) / normalizer;
}

std::vector<std::vector<double>> OracleForecaster::forecast(const std::vector<sim::Trajectory>& patients,
                                                            const std::vector<sim::CounterfactualHistory>& histories,
                                                            const std::vector<ForecastQuery>& queries) const {
  check_queries(patients, histories, queries);
  std::vector<std::vector<double>> out;
  out.reserve(queries.size());
  for (const auto& q : queries) {
    const auto& h = histories[q.history];
    out.push_back(sim::rollout(h.statics, h.state, q.plan, h.future_noise));
  }
  return out;
}

MeanForecaster MeanForecaster::fit(const sim::Dataset& dataset) {
  double sum = 0, n = 0;
  for (const auto* t : dataset.split(sim::Split::kTrain))
    for (double y : t->outcomes) {
      sum += y;
      n += 1;
    }
  if (n == 0) throw std::invalid_argument("MeanForecaster: no training outcomes");
  return MeanForecaster(sum / n);
}

std::vector<std::vector<double>> MeanForecaster::forecast(const std::vector<sim::Trajectory>& patients,
                                                          const std::vector<sim::CounterfactualHistory>& histories,
                                                          const std::vector<ForecastQuery>& queries) const {
  check_queries(patients, histories, queries);
  std::vector<std::vector<double>> out;
  for (const auto& q : queries) out.emplace_back(q.plan.size(), value_);
  return out;
}

std::vector<std::vector<double>> LastValueForecaster::forecast(const std::vector<sim::Trajectory>& patients,
                                                               const std::vector<sim::CounterfactualHistory>& histories,
                                                               const std::vector<ForecastQuery>& queries) const {
  check_queries(patients, histories, queries);
  std::vector<std::vector<double>> out;
  for (const auto& q : queries) {
    const auto& h = histories[q.history];
    out.emplace_back(q.plan.size(), patients[h.patient].outcomes[h.cut]);
  }
  return out;
}

std::vector<std::vector<double>> ModelForecaster::forecast(const std::vector<sim::Trajectory>& patients,
                                                           const std::vector<sim::CounterfactualHistory>& histories,
                                                           const std::vector<ForecastQuery>& queries) const {
  check_queries(patients, histories, queries);
  std::vector<std::vector<double>> out(queries.size());
  if (queries.empty()) return out;
  const model::DcrnModel& m = *model_;
  std::vector<const sim::Trajectory*> ptrs;
  for (const auto& p : patients) ptrs.push_back(&p);
  const model::SequenceBatch batch = model::make_batch(ptrs, m.normalizer);
  const model::HistoryStates hs = model::encode_history(m.config, m.params, batch);
  auto* store = const_cast<ad::ParameterStore*>(&m.params);

  // Group by plan length so each decoder call has one horizon.
  std::map<std::size_t, std::vector<std::size_t>> by_len;
  for (std::size_t i = 0; i < queries.size(); ++i) by_len[queries[i].plan.size()].push_back(i);
  for (const auto& [tau, idx] : by_len) {
    if (tau == 0) continue;
    for (std::size_t lo = 0; lo < idx.size(); lo += kChunk) {
      const std::size_t hi = std::min(idx.size(), lo + kChunk);
      std::vector<std::pair<std::size_t, std::size_t>> row_cuts;
      std::vector<Tensor> plan(tau, Tensor::matrix(hi - lo, 1));
      for (std::size_t k = lo; k < hi; ++k) {
        const auto& q = queries[idx[k]];
        const auto& h = histories[q.history];
        row_cuts.emplace_back(h.patient, h.cut);
        for (std::size_t u = 0; u < tau; ++u) plan[u][k - lo] = q.plan[u];
      }
      const model::DecoderStart start = model::decoder_start(hs, batch, row_cuts);
      Graph g(store, false);
      const auto dec = model::decoder_forward(g, m.config, start, plan, tau, model::DecodeMode::kAutoregressive,
                                              nullptr, false, nullptr, false);
      for (std::size_t k = lo; k < hi; ++k) {
        auto& row = out[idx[k]];
        for (std::size_t u = 0; u < tau; ++u) row.push_back(m.normalizer.y_raw(dec.steps[u].y_hat.value()[k - lo]));
      }
    }
  }
  return out;
}

CounterfactualResult counterfactual_eval(const Forecaster& forecaster, const sim::CounterfactualTestSet& set,
                                         std::size_t tau) {
  if (tau == 0 || tau > set.tau) {
    throw std::invalid_argument("counterfactual_eval: tau = " + std::to_string(tau) + " exceeds the test horizon " +
                                std::to_string(set.tau));
  }
  if (set.cases.empty()) throw std::invalid_argument("counterfactual_eval: empty test set");
  std::vector<ForecastQuery> queries;
  queries.reserve(set.cases.size());
  for (const auto& c : set.cases) queries.push_back({c.history, std::vector<int>(c.plan.begin(), c.plan.begin() + static_cast<std::ptrdiff_t>(tau))});
  const auto pred = forecaster.forecast(set.patients, set.histories, queries);

  CounterfactualResult r;
  r.tau = tau;
  r.cases = set.cases.size();
  r.normalizer = set.normalizer;
  for (std::size_t u = 0; u < tau; ++u) {
    std::vector<double> p, t;
    for (std::size_t i = 0; i < set.cases.size(); ++i) {
      p.push_back(pred[i].at(u));
      t.push_back(set.cases[i].truth.at(u));
    }
    r.nrmse_by_step.push_back(nrmse(p, t, set.normalizer));
  }
  r.nrmse = r.nrmse_by_step.back();
  return r;
}

std::vector<std::size_t> candidate_plans(std::size_t tau, bool one_hot) {
  std::vector<std::size_t> out;
  if (one_hot) {
    // One-hot at step j is index 2^(tau-1-j); listed in increasing index order.
    for (std::size_t j = tau; j-- > 0;) out.push_back(std::size_t{1} << (tau - 1 - j));
  } else {
    for (std::size_t k = 0; k < (std::size_t{1} << tau); ++k) out.push_back(k);
  }
  return out;
}

namespace {

PlanSelectionResult score_choices(const sim::PlanSelectionSet& set, bool one_hot, std::vector<std::size_t> chosen) {
  const auto cands = candidate_plans(set.tau, one_hot);
  PlanSelectionResult r;
  r.tau = set.tau;
  r.patients = set.histories.size();
  r.one_hot = one_hot;
  double hits = 0, regret = 0;
  for (std::size_t p = 0; p < set.histories.size(); ++p) {
    const auto& truth = set.optimum[p].final_outcomes;
    std::size_t best = cands.front();
    for (std::size_t k : cands)
      if (truth[k] < truth[best]) best = k;
    // Any plan reaching the optimal outcome counts; ties arise when rho is clamped at 0.
    hits += truth[chosen[p]] == truth[best] ? 1.0 : 0.0;
    regret += truth[chosen[p]] - truth[best];
  }
  const double n = static_cast<double>(std::max<std::size_t>(r.patients, 1));
  r.accuracy = hits / n;
  r.mean_regret = regret / n;
  r.chosen = std::move(chosen);
  return r;
}

}  // namespace

PlanSelectionResult plan_selection_accuracy(const Forecaster& forecaster, const sim::PlanSelectionSet& set,
                                            bool one_hot) {
  const auto cands = candidate_plans(set.tau, one_hot);
  std::vector<ForecastQuery> queries;
  for (std::size_t p = 0; p < set.histories.size(); ++p)
    for (std::size_t k : cands) queries.push_back({p, sim::plan_from_index(k, set.tau)});
  const auto pred = forecaster.forecast(set.patients, set.histories, queries);
  std::vector<std::size_t> chosen;
  for (std::size_t p = 0; p < set.histories.size(); ++p) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < cands.size(); ++j)
      if (pred[p * cands.size() + j].back() < pred[p * cands.size() + best].back()) best = j;
    chosen.push_back(cands[best]);
  }
  return score_choices(set, one_hot, std::move(chosen));
}

PlanSelectionResult random_plan_baseline(const sim::PlanSelectionSet& set, std::uint64_t seed, bool one_hot) {
  const auto cands = candidate_plans(set.tau, one_hot);
  std::mt19937_64 rng = sim::make_stream(seed, kRandomPlanTag, 0);
  std::uniform_int_distribution<std::size_t> pick(0, cands.size() - 1);
  std::vector<std::size_t> chosen;
  for (std::size_t p = 0; p < set.histories.size(); ++p) chosen.push_back(cands[pick(rng)]);
  return score_choices(set, one_hot, std::move(chosen));
}

loss::InfluenceTable factor_analysis(const model::DcrnModel& m, const std::vector<std::string>& covariate_names,
                                     const std::optional<std::filesystem::path>& csv,
                                     const std::vector<std::string>& comment) {
  loss::InfluenceTable t = loss::influence_table(m.params, m.config, covariate_names);
  if (csv) loss::write_influence_csv(*csv, t, comment);
  return t;
}

DisentanglementCheck check_disentanglement(const loss::InfluenceTable& table) {
  auto row = [&](const std::string& name) -> const std::array<double, 3>& {
    const auto it = std::find(table.names.begin(), table.names.end(), name);
    if (it == table.names.end()) throw std::invalid_argument("influence table has no covariate " + name);
    return table.normalized[static_cast<std::size_t>(it - table.names.begin())];
  };
  DisentanglementCheck c;
  const auto& kappa = row("kappa");
  c.kappa_i_over_o = kappa[0] > kappa[2];
  for (const char* n : {"lambda_p", "sigma", "psi0"}) {
    const auto& r = row(n);
    if (!(r[1] > r[0] && r[1] > r[2])) c.c_dominant_failures.push_back(n);
  }
  for (const char* n : {"alpha0", "rho0"}) {
    const auto& r = row(n);
    if (!(r[2] > r[0] && r[2] > r[1])) c.o_dominant_failures.push_back(n);
  }
  return c;
}

// ---- ablation ----

void AblationConfig::validate() const {
  if (zetas.empty()) throw std::invalid_argument("eval.zetas must not be empty");
  for (double z : zetas)
    if (!(z >= 0.0 && z <= 1.0)) throw std::invalid_argument("eval.zetas entries must lie in [0, 1]");
  if (taus.empty()) throw std::invalid_argument("eval.taus must not be empty");
  for (auto t : taus)
    if (t == 0) throw std::invalid_argument("eval.taus entries must be >= 1");
  for (auto t : plan_taus)
    if (t == 0 || t > 5) throw std::invalid_argument("eval.plan_taus entries must lie in [1, 5]");
  if (n_seeds == 0) throw std::invalid_argument("eval.n_seeds must be >= 1");
  if (models.empty()) throw std::invalid_argument("eval.models must not be empty");
  if (!plan_taus.empty() && plan_patients == 0) throw std::invalid_argument("eval.plan_patients must be >= 1");
}

std::uint64_t derived_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index) {
  return sim::make_stream(base, tag, index)();
}

std::optional<std::pair<model::ModelConfig, train::TrainConfig>> variant_config(const std::string& name,
                                                                               const model::ModelConfig& model,
                                                                               const train::TrainConfig& train) {
  model::ModelConfig m = model;
  train::TrainConfig t = train;
  m.arch = model::Architecture::kDcrn;
  if (name == "dcrn") {
  } else if (name == "dcrn-no-balance") {
    t.weights.alpha = 0.0;
    t.weights.gamma = 0.0;
  } else if (name == "dcrn-unit-weights") {
    t.unit_weights = true;
  } else if (name == "hg-t") {
    m.arch = model::Architecture::kHgt;
  } else {
    return std::nullopt;
  }
  return std::make_pair(m, t);
}

namespace {

// Scores of one (zeta, seed) unit, keyed by (model, tau).
struct UnitResult {
  std::map<std::pair<std::string, std::size_t>, double> nrmse, accuracy, regret;
  std::optional<loss::InfluenceTable> influence;
};

UnitResult run_unit(const sim::SimConfig& sim_cfg, const model::ModelConfig& model_cfg,
                    const train::TrainConfig& train_cfg, const AblationConfig& config,
                    const std::vector<std::string>& models, double zeta, std::size_t s, const Progress& say) {
  UnitResult u;
  sim::SimConfig sc = sim_cfg;
  sc.zeta = zeta;
  sc.seed = derived_seed(sim_cfg.seed, kSimSeedTag, s);
  const sim::Dataset ds = sim::generate_dataset(sc);
  std::vector<sim::CounterfactualTestSet> tests;
  for (std::size_t tau : config.taus) tests.push_back(sim::generate_counterfactual_test(sc, tau));
  std::vector<sim::PlanSelectionSet> plans;
  for (std::size_t tau : config.plan_taus) plans.push_back(sim::generate_plan_selection_set(sc, tau, config.plan_patients));

  auto score = [&](const std::string& name, const Forecaster& f) {
    for (std::size_t k = 0; k < tests.size(); ++k)
      u.nrmse[{name, config.taus[k]}] = counterfactual_eval(f, tests[k], config.taus[k]).nrmse;
    for (std::size_t k = 0; k < plans.size(); ++k) {
      const auto r = plan_selection_accuracy(f, plans[k], config.plan_one_hot);
      u.accuracy[{name, config.plan_taus[k]}] = r.accuracy;
      u.regret[{name, config.plan_taus[k]}] = r.mean_regret;
    }
  };

  for (const auto& name : models) {
    say("zeta " + std::to_string(zeta) + " seed " + std::to_string(s) + " model " + name);
    if (name == "mean") {
      score(name, MeanForecaster::fit(ds));
      continue;
    }
    if (name == "last-value") {
      score(name, LastValueForecaster());
      continue;
    }
    auto [mc, tc] = *variant_config(name, model_cfg, train_cfg);
    tc.seed = derived_seed(train_cfg.seed, kTrainSeedTag, s);
    const train::TrainedModel tm = train::train_model(ds, mc, tc);
    score(name, ModelForecaster(tm.model, name));
    if (name == "dcrn" && zeta == config.influence_zeta) u.influence = factor_analysis(tm.model, ds.meta.covariate_names);
  }
  for (std::size_t k = 0; k < plans.size(); ++k) {
    const auto r = random_plan_baseline(plans[k], sc.seed, config.plan_one_hot);
    u.accuracy[{"random", config.plan_taus[k]}] = r.accuracy;
    u.regret[{"random", config.plan_taus[k]}] = r.mean_regret;
  }
  return u;
}

}  // namespace

AblationReport ablation_suite(const sim::SimConfig& sim_cfg, const model::ModelConfig& model_cfg,
                              const train::TrainConfig& train_cfg, const AblationConfig& config,
                              const Progress& progress, std::size_t jobs) {
  config.validate();
  AblationReport report;
  std::mutex say_mutex;
  const Progress say = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard<std::mutex> lock(say_mutex);
    progress(msg);
  };

  std::vector<std::string> models;
  for (const auto& name : config.models) {
    const bool known = std::find(kAblationModels.begin(), kAblationModels.end(), name) != kAblationModels.end();
    if (!known) {
      report.warnings.push_back("unknown model '" + name + "' skipped");
    } else if (std::find(models.begin(), models.end(), name) == models.end()) {
      models.push_back(name);
    }
  }
  if (models.empty()) throw std::invalid_argument("ablation: no known model in eval.models");

  // Unit k covers zeta index k / n_seeds and seed k % n_seeds.
  const std::size_t n_units = config.zetas.size() * config.n_seeds;
  std::vector<UnitResult> units(n_units);
  std::vector<std::exception_ptr> errors(n_units);
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t k = next++; k < n_units; k = next++) {
      try {
        units[k] = run_unit(sim_cfg, model_cfg, train_cfg, config, models, config.zetas[k / config.n_seeds],
                            k % config.n_seeds, say);
      } catch (...) {
        errors[k] = std::current_exception();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(jobs, 1, n_units);
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  auto collect = [&](std::size_t zi, auto member, const std::pair<std::string, std::size_t>& key) {
    std::vector<double> v;
    for (std::size_t s = 0; s < config.n_seeds; ++s) v.push_back((units[zi * config.n_seeds + s].*member).at(key));
    return v;
  };
  for (const auto& name : models)
    for (std::size_t zi = 0; zi < config.zetas.size(); ++zi)
      for (std::size_t tau : config.taus) {
        const auto v = collect(zi, &UnitResult::nrmse, {name, tau});
        report.nrmse.push_back({name, config.zetas[zi], tau, mean(v), sample_sd(v), v.size(), v});
      }
  std::vector<std::string> plan_models = models;
  plan_models.push_back("random");
  for (const auto& name : plan_models)
    for (std::size_t zi = 0; zi < config.zetas.size(); ++zi)
      for (std::size_t tau : config.plan_taus) {
        const auto a = collect(zi, &UnitResult::accuracy, {name, tau});
        const auto g = collect(zi, &UnitResult::regret, {name, tau});
        report.plans.push_back({name, config.zetas[zi], tau, mean(a), sample_sd(a), mean(g), a.size(), a});
      }

  // Influence shares averaged over the seeds at the influence zeta.
  std::optional<loss::InfluenceTable> sum;
  std::size_t count = 0;
  for (const auto& u : units) {
    if (!u.influence) continue;
    if (!sum) {
      sum = *u.influence;
    } else {
      for (std::size_t d = 0; d < sum->names.size(); ++d)
        for (std::size_t k = 0; k < 3; ++k) {
          sum->raw[d][k] += u.influence->raw[d][k];
          sum->normalized[d][k] += u.influence->normalized[d][k];
        }
    }
    ++count;
  }
  if (sum) {
    for (std::size_t d = 0; d < sum->names.size(); ++d)
      for (std::size_t k = 0; k < 3; ++k) {
        sum->raw[d][k] /= static_cast<double>(count);
        sum->normalized[d][k] /= static_cast<double>(count);
      }
    report.influence = sum;
  } else {
    report.warnings.push_back("no dcrn model trained at influence zeta; factor_influence.csv has no rows");
  }
  return report;
}

std::vector<std::filesystem::path> write_ablation_csvs(const std::filesystem::path& dir, const AblationReport& report,
                                                       const std::vector<std::string>& comment) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::filesystem::path& p) {
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << std::setprecision(17);
    for (const auto& line : comment) out << "# " << line << '\n';
    return out;
  };
  std::vector<std::filesystem::path> paths = {dir / "nrmse_by_zeta.csv", dir / "plan_accuracy.csv",
                                              dir / "factor_influence.csv"};
  {
    auto out = open(paths[0]);
    out << "model,zeta,tau,mean,sd,n\n";
    for (const auto& r : report.nrmse)
      out << r.model << ',' << r.zeta << ',' << r.tau << ',' << r.mean << ',' << r.sd << ',' << r.n << '\n';
  }
  {
    auto out = open(paths[1]);
    out << "model,zeta,tau,accuracy_mean,accuracy_sd,regret_mean,n\n";
    for (const auto& r : report.plans)
      out << r.model << ',' << r.zeta << ',' << r.tau << ',' << r.accuracy_mean << ',' << r.accuracy_sd << ','
          << r.regret_mean << ',' << r.n << '\n';
  }
  if (report.influence) {
    loss::write_influence_csv(paths[2], *report.influence, comment);
  } else {
    auto out = open(paths[2]);
    out << "covariate,I,C,O,I_share,C_share,O_share\n";
  }
  return paths;
}

// ---- CSV ----

namespace {

using Tokenizer = boost::tokenizer<boost::escaped_list_separator<char>>;

std::vector<std::string> split_csv_line(const std::string& line, std::size_t line_no) {
  std::string s = line;
  if (!s.empty() && s.back() == '\r') s.pop_back();
  try {
    Tokenizer tok(s, boost::escaped_list_separator<char>('\\', ',', '"'));
    return {tok.begin(), tok.end()};
  } catch (const boost::escaped_list_error& e) {
    throw IngestError("line " + std::to_string(line_no) + ": malformed CSV (" + e.what() + ")");
  }
}

std::string line_ctx(std::size_t line_no) { return "line " + std::to_string(line_no) + ": "; }

double parse_double(const std::string& cell, const std::string& column, std::size_t line_no) {
  double v = 0.0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e || !std::isfinite(v)) {
    throw IngestError(line_ctx(line_no) + "column '" + column + "' expects a finite number, got '" + cell + "'");
  }
  return v;
}

std::uint64_t parse_uint(const std::string& cell, const std::string& column, std::size_t line_no) {
  std::uint64_t v = 0;
  const char* b = cell.data();
  const char* e = b + cell.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e) {
    throw IngestError(line_ctx(line_no) + "column '" + column + "' expects a non-negative integer, got '" + cell + "'");
  }
  return v;
}

}  // namespace

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  CsvTable t;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!have_header && line.rfind('#', 0) == 0) {
      t.comments.push_back(line.size() > 1 && line[1] == ' ' ? line.substr(2) : line.substr(1));
      continue;
    }
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line, line_no);
    if (!have_header) {
      t.header = std::move(cells);
      have_header = true;
    } else {
      if (cells.size() != t.header.size()) {
        throw IngestError(line_ctx(line_no) + "expected " + std::to_string(t.header.size()) + " fields, got " +
                          std::to_string(cells.size()));
      }
      t.rows.push_back(std::move(cells));
    }
  }
  if (!have_header) throw IngestError(path.string() + ": no header line");
  return t;
}

sim::Dataset ingest_longitudinal_csv(const std::filesystem::path& path, const CsvSchema& schema) {
  if (!std::filesystem::exists(path)) throw IngestError("no such file: " + path.string());
  if (schema.covariates.empty()) throw std::invalid_argument("ingest: schema lists no covariate columns");
  std::ifstream in(path);
  if (!in) throw IngestError("cannot read " + path.string());

  std::string line;
  std::size_t line_no = 0;
  std::vector<std::string> header;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.rfind('#', 0) == 0 || line.empty()) continue;
    header = split_csv_line(line, line_no);
    break;
  }
  if (header.empty()) throw IngestError(path.string() + ": no header line");
  const std::size_t header_line = line_no;
  auto column = [&](const std::string& name, bool required) -> long {
    const auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) {
      if (required) throw IngestError(line_ctx(header_line) + "missing column '" + name + "'");
      return -1;
    }
    return static_cast<long>(it - header.begin());
  };
  const long c_id = column(schema.id, true);
  const long c_step = column(schema.step, true);
  const long c_a = column(schema.treatment, true);
  const long c_y = column(schema.outcome, true);
  const long c_split = schema.split.empty() ? -1 : column(schema.split, false);
  std::vector<long> c_x;
  for (const auto& n : schema.covariates) c_x.push_back(column(n, true));

  struct Row {
    std::uint64_t step;
    std::size_t line;
    std::vector<double> x;
    int a;
    double y;
  };
  struct Patient {
    std::uint64_t id;
    sim::Split split;
    std::size_t first_line;
    std::vector<Row> rows;
  };
  std::vector<Patient> patients;
  std::unordered_map<std::uint64_t, std::size_t> index;

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line, line_no);
    if (cells.size() != header.size()) {
      throw IngestError(line_ctx(line_no) + "expected " + std::to_string(header.size()) + " fields, got " +
                        std::to_string(cells.size()));
    }
    auto cell = [&](long c) -> const std::string& { return cells[static_cast<std::size_t>(c)]; };
    Row r;
    const std::uint64_t id = parse_uint(cell(c_id), schema.id, line_no);
    r.step = parse_uint(cell(c_step), schema.step, line_no);
    r.line = line_no;
    for (std::size_t k = 0; k < c_x.size(); ++k) r.x.push_back(parse_double(cell(c_x[k]), schema.covariates[k], line_no));
    const std::string& a = cell(c_a);
    if (a == "0" || a == "0.0") {
      r.a = 0;
    } else if (a == "1" || a == "1.0") {
      r.a = 1;
    } else {
      throw IngestError(line_ctx(line_no) + "treatment must be 0 or 1, got '" + a + "'");
    }
    r.y = parse_double(cell(c_y), schema.outcome, line_no);
    sim::Split split = sim::Split::kTrain;
    if (c_split >= 0) {
      try {
        split = sim::split_from_string(cell(c_split));
      } catch (const std::exception&) {
        throw IngestError(line_ctx(line_no) + "unknown split '" + cell(c_split) + "'");
      }
    }
    auto it = index.find(id);
    if (it == index.end()) {
      it = index.emplace(id, patients.size()).first;
      patients.push_back({id, split, line_no, {}});
    } else if (patients[it->second].split != split) {
      throw IngestError(line_ctx(line_no) + "patient " + std::to_string(id) + " changes split (first seen on line " +
                        std::to_string(patients[it->second].first_line) + ")");
    }
    patients[it->second].rows.push_back(std::move(r));
  }

  sim::Dataset ds;
  ds.meta.source = "csv";
  ds.meta.covariate_names = schema.covariates;
  for (auto& p : patients) {
    std::stable_sort(p.rows.begin(), p.rows.end(), [](const Row& a, const Row& b) { return a.step < b.step; });
    for (std::size_t k = 1; k < p.rows.size(); ++k) {
      if (p.rows[k].step == p.rows[k - 1].step) {
        const auto [first, second] = std::minmax(p.rows[k - 1].line, p.rows[k].line);
        throw IngestError(line_ctx(second) + "duplicate (id, step) = (" + std::to_string(p.id) + ", " +
                          std::to_string(p.rows[k].step) + "), first seen on line " + std::to_string(first));
      }
    }
    sim::Trajectory t;
    t.id = p.id;
    t.split = p.split;
    t.dim = schema.covariates.size();
    for (const auto& r : p.rows) {
      t.covariates.insert(t.covariates.end(), r.x.begin(), r.x.end());
      t.treatments.push_back(r.a);
      t.outcomes.push_back(r.y);
    }
    ds.trajectories.push_back(std::move(t));
  }
  if (ds.trajectories.empty()) throw IngestError(path.string() + ": no data rows");
  try {
    sim::compute_train_stats(ds);
  } catch (const sim::OverlapError&) {
    // Statistics are filled before the overlap check; training reports it.
  }
  return ds;
}

void export_longitudinal_csv(const std::filesystem::path& path, const sim::Dataset& dataset, const CsvSchema& schema) {
  if (schema.covariates.size() != dataset.dim()) {
    throw std::invalid_argument("export: schema has " + std::to_string(schema.covariates.size()) +
                                " covariates, dataset has " + std::to_string(dataset.dim()));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << std::setprecision(17);
  out << schema.id << ',' << schema.step;
  for (const auto& c : schema.covariates) out << ',' << c;
  out << ',' << schema.treatment << ',' << schema.outcome;
  if (!schema.split.empty()) out << ',' << schema.split;
  out << '\n';
  for (const auto& t : dataset.trajectories) {
    for (std::size_t s = 0; s < t.length(); ++s) {
      out << t.id << ',' << s;
      for (std::size_t k = 0; k < t.dim; ++k) out << ',' << t.x(s, k);
      out << ',' << t.treatments[s] << ',' << t.outcomes[s];
      if (!schema.split.empty()) out << ',' << sim::to_string(t.split);
      out << '\n';
    }
  }
}

}  // namespace dcrn::eval
