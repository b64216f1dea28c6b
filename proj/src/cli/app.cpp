#include "dcrn/cli/app.hpp"

#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>

#include <CLI11.hpp>
#include <spdlog/sinks/ostream_sink.h>
#include <spdlog/spdlog.h>

#include "dcrn/cli/manifest.hpp"
#include "dcrn/cli/run_config.hpp"
#include "dcrn/eval/evaluation.hpp"
#include "dcrn/sim/dataset.hpp"
#include "dcrn/training/train.hpp"

namespace dcrn::cli {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t jobs = 1;
  bool quiet = false;
};

struct Flags {
  // simulate
  std::optional<double> zeta;
  std::optional<std::size_t> patients, max_length;
  // train / hpsearch / analyze-factors
  std::string data;
  std::optional<std::size_t> epochs, tau;
  std::optional<std::string> arch;
  bool unit_weights = false;
  std::optional<std::size_t> trials;
  // evaluate / analyze-factors
  std::string model;
  bool one_hot = false;
  std::optional<std::size_t> plan_patients;
  // ablate
  std::vector<double> zetas;
  std::optional<std::size_t> seeds;
  std::vector<std::string> models;
  // ingest
  std::string csv;
  eval::CsvSchema schema;
  std::vector<std::string> covariates;
  bool no_split = false;
};

struct Context {
  RunConfig config;
  Common common;
  Flags flags;
  fs::path out;
  std::shared_ptr<spdlog::logger> log;
  RunManifest manifest;

  fs::path output(const std::string& name) {
    const fs::path p = out / name;
    manifest.outputs.push_back(p);
    return p;
  }
  fs::path input(const std::string& path, const std::string& what) {
    if (path.empty()) throw UsageError(manifest.command + ": --" + what + " is required");
    if (!fs::exists(path)) throw UsageError(manifest.command + ": " + what + " not found: " + path);
    manifest.inputs.push_back(path);
    return path;
  }
  std::vector<std::string> comment() const {
    return {"dcrn " + manifest.command + " seed=" + std::to_string(config.seed) +
            " config_hash=" + config_hash(config)};
  }
};

std::vector<std::string> names_for(std::size_t dim, const std::vector<std::string>& preferred) {
  if (preferred.size() == dim) return preferred;
  std::vector<std::string> out;
  for (std::size_t k = 0; k < dim; ++k) out.push_back("x" + std::to_string(k));
  return out;
}

void cmd_simulate(Context& c) {
  if (c.flags.zeta) c.config.sim.zeta = *c.flags.zeta;
  if (c.flags.patients) c.config.sim.n_patients = *c.flags.patients;
  if (c.flags.max_length) c.config.sim.max_length = *c.flags.max_length;
  c.config.validate();
  const auto ds = sim::generate_dataset(c.config.sim);
  const fs::path path = c.output("dataset.jsonl");
  sim::write_dataset(path, ds);
  c.manifest.outputs.push_back(sim::meta_path_for(path));
  c.log->info("simulated {} patients (zeta {}) into {}", ds.trajectories.size(), c.config.sim.zeta, path.string());
  c.manifest.summary["patients"] = ds.trajectories.size();
  c.manifest.summary["treated_fraction"] = ds.meta.treated_fraction;
}

void apply_train_flags(Context& c) {
  if (c.flags.epochs) c.config.train.max_epochs = *c.flags.epochs;
  if (c.flags.tau) c.config.train.tau = *c.flags.tau;
  if (c.flags.unit_weights) c.config.train.unit_weights = true;
  if (c.flags.arch) {
    try {
      c.config.model.arch = model::architecture_from_string(*c.flags.arch);
    } catch (const std::exception&) {
      throw UsageError("--arch must be dcrn or hg-t, got '" + *c.flags.arch + "'");
    }
  }
}

void cmd_train(Context& c) {
  const fs::path data = c.input(c.flags.data, "data");
  apply_train_flags(c);
  c.config.validate();
  const auto ds = sim::read_dataset(data);
  c.log->info("training {} on {} trajectories", model::to_string(c.config.model.arch), ds.trajectories.size());
  const auto tm = train::train_model(ds, c.config.model, c.config.train);
  model::save_model(c.output("model.ckpt"), tm.model);
  train::write_report_csv(c.output("encoder_history.csv"), tm.encoder, c.comment());
  train::write_report_csv(c.output("decoder_history.csv"), tm.decoder, c.comment());
  auto& s = c.manifest.summary;
  s["encoder_best_epoch"] = tm.encoder.best_epoch;
  s["encoder_best_val_mse"] = tm.encoder.best_val_mse;
  s["decoder_best_epoch"] = tm.decoder.best_epoch;
  s["decoder_best_val_mse"] = tm.decoder.best_val_mse;
  s["max_encoder_grad_norm_in_decoder"] = tm.decoder.max_encoder_grad_norm;
  s["encoder_checksum_unchanged"] = tm.decoder.encoder_checksum_before == tm.decoder.encoder_checksum_after;
  c.log->info("encoder val MSE {:.6g}, decoder val MSE {:.6g}", tm.encoder.best_val_mse, tm.decoder.best_val_mse);
}

void cmd_evaluate(Context& c) {
  const fs::path mpath = c.input(c.flags.model, "model");
  if (c.flags.zeta) c.config.sim.zeta = *c.flags.zeta;
  if (c.flags.plan_patients) c.config.eval.plan_patients = *c.flags.plan_patients;
  if (c.flags.one_hot) c.config.eval.plan_one_hot = true;
  c.config.validate();
  const auto m = model::load_model(mpath);
  if (m.config.covariate_dim != sim::kCovariateDim) {
    throw std::invalid_argument("evaluate: model expects " + std::to_string(m.config.covariate_dim) +
                                " covariates; simulator test sets have " + std::to_string(sim::kCovariateDim));
  }
  const eval::ModelForecaster model_f(m, "model");
  const eval::LastValueForecaster last;
  {
    std::ofstream out(c.output("counterfactual.csv"));
    out << std::setprecision(17);
    for (const auto& line : c.comment()) out << "# " << line << '\n';
    out << "model,tau,step,nrmse,cases,normalizer\n";
    for (std::size_t tau : c.config.eval.taus) {
      const auto set = sim::generate_counterfactual_test(c.config.sim, tau);
      for (const eval::Forecaster* f : {static_cast<const eval::Forecaster*>(&model_f), static_cast<const eval::Forecaster*>(&last)}) {
        const auto r = eval::counterfactual_eval(*f, set, tau);
        for (std::size_t u = 0; u < tau; ++u)
          out << f->name() << ',' << tau << ',' << u + 1 << ',' << r.nrmse_by_step[u] << ',' << r.cases << ','
              << r.normalizer << '\n';
        if (f == &model_f) c.manifest.summary["nrmse_tau" + std::to_string(tau)] = r.nrmse;
        c.log->info("{} tau={} n-RMSE {:.6g}", f->name(), tau, r.nrmse);
      }
    }
  }
  std::ofstream out(c.output("plan_selection.csv"));
  out << std::setprecision(17);
  for (const auto& line : c.comment()) out << "# " << line << '\n';
  out << "model,tau,one_hot,patients,accuracy,mean_regret\n";
  const bool oh = c.config.eval.plan_one_hot;
  for (std::size_t tau : c.config.eval.plan_taus) {
    const auto set = sim::generate_plan_selection_set(c.config.sim, tau, c.config.eval.plan_patients);
    const auto rm = eval::plan_selection_accuracy(model_f, set, oh);
    const auto rl = eval::plan_selection_accuracy(last, set, oh);
    const auto rr = eval::random_plan_baseline(set, c.config.seed, oh);
    for (const auto& [name, r] : {std::pair{"model", rm}, std::pair{"last-value", rl}, std::pair{"random", rr}})
      out << name << ',' << tau << ',' << (oh ? 1 : 0) << ',' << r.patients << ',' << r.accuracy << ','
          << r.mean_regret << '\n';
    c.manifest.summary["plan_accuracy_tau" + std::to_string(tau)] = rm.accuracy;
    c.log->info("plan selection tau={} accuracy {:.4f} (random {:.4f})", tau, rm.accuracy, rr.accuracy);
  }
}

void cmd_analyze(Context& c) {
  const fs::path mpath = c.input(c.flags.model, "model");
  c.config.validate();
  std::vector<std::string> preferred(sim::kCovariateNames.begin(), sim::kCovariateNames.end());
  if (!c.flags.data.empty()) preferred = sim::read_dataset(c.input(c.flags.data, "data")).meta.covariate_names;
  const auto m = model::load_model(mpath);
  const auto names = names_for(m.config.covariate_dim, preferred);
  const auto table = eval::factor_analysis(m, names, c.output("factor_influence.csv"), c.comment());
  for (std::size_t d = 0; d < names.size(); ++d)
    c.log->info("{:>10}  I {:.3f}  C {:.3f}  O {:.3f}", names[d], table.normalized[d][0], table.normalized[d][1],
                table.normalized[d][2]);
  const std::vector<std::string> sim_names(sim::kCovariateNames.begin(), sim::kCovariateNames.end());
  if (names == sim_names) {
    const auto check = eval::check_disentanglement(table);
    c.manifest.summary["disentanglement_passed"] = check.passed();
    c.manifest.summary["kappa_i_over_o"] = check.kappa_i_over_o;
    c.manifest.summary["c_dominant_failures"] = check.c_dominant_failures;
    c.manifest.summary["o_dominant_failures"] = check.o_dominant_failures;
    c.log->info("simulator factor pattern {}", check.passed() ? "recovered" : "not recovered");
  }
}

void cmd_ablate(Context& c) {
  if (!c.flags.zetas.empty()) c.config.eval.zetas = c.flags.zetas;
  if (c.flags.seeds) c.config.eval.n_seeds = *c.flags.seeds;
  if (!c.flags.models.empty()) c.config.eval.models = c.flags.models;
  apply_train_flags(c);
  c.config.validate();
  const auto report = eval::ablation_suite(c.config.sim, c.config.model, c.config.train, c.config.eval,
                                           [&](const std::string& s) { c.log->info("{}", s); }, c.common.jobs);
  for (const auto& w : report.warnings) c.log->warn("{}", w);
  const auto files = eval::write_ablation_csvs(c.out, report, c.comment());
  c.manifest.outputs.insert(c.manifest.outputs.end(), files.begin(), files.end());
  c.manifest.summary["nrmse_rows"] = report.nrmse.size();
  c.manifest.summary["plan_rows"] = report.plans.size();
  c.manifest.summary["warnings"] = report.warnings;
}

void cmd_hpsearch(Context& c) {
  const fs::path data = c.input(c.flags.data, "data");
  if (c.flags.trials) c.config.search_trials = *c.flags.trials;
  apply_train_flags(c);
  c.config.validate();
  const auto ds = sim::read_dataset(data);
  const auto result =
      train::random_search(ds, c.config.model, c.config.train, c.config.search_trials, c.config.seed, c.common.jobs);
  train::write_leaderboard_csv(c.output("leaderboard.csv"), result, c.comment());
  RunConfig best = c.config;
  best.model = result.best.model;
  best.train = result.best.train;
  best.train.seed = c.config.seed;
  {
    std::ofstream out(c.output("best_config.yaml"));
    out << dump_config(best);
  }
  c.manifest.summary["best_trial"] = result.best.index;
  c.manifest.summary["best_val_mse"] = result.best.val_mse;
  c.log->info("best trial {} with decoder val MSE {:.6g}", result.best.index, result.best.val_mse);
}

void cmd_ingest(Context& c) {
  const fs::path csv = c.input(c.flags.csv, "csv");
  c.config.validate();
  eval::CsvSchema schema = c.flags.schema;
  if (!c.flags.covariates.empty()) schema.covariates = c.flags.covariates;
  if (c.flags.no_split) schema.split.clear();
  const auto ds = eval::ingest_longitudinal_csv(csv, schema);
  const fs::path path = c.output("dataset.jsonl");
  sim::write_dataset(path, ds);
  c.manifest.outputs.push_back(sim::meta_path_for(path));
  std::size_t rows = 0;
  for (const auto& t : ds.trajectories) rows += t.length();
  c.manifest.summary["patients"] = ds.trajectories.size();
  c.manifest.summary["rows"] = rows;
  if (!(ds.meta.treated_fraction > 0 && ds.meta.treated_fraction < 1)) {
    c.log->warn("train split treated fraction is {}; training will fail the overlap check", ds.meta.treated_fraction);
  }
  c.log->info("ingested {} rows for {} patients", rows, ds.trajectories.size());
}

std::string one_line(std::string s) {
  for (auto& ch : s)
    if (ch == '\n' || ch == '\r') ch = ' ';
  return s;
}

constexpr const char* kFooter =
    "Outputs land in --out together with config.yaml (the resolved configuration) and manifest.json "
    "(argv, config hash, input/output SHA-256). File formats: docs/FORMATS.md.";

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Disentangled counterfactual recurrent network: simulate, train, evaluate.", "dcrn"};
  app.require_subcommand(1);
  app.footer(kFooter);
  Common common;
  Flags flags;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "YAML config with sections sim/model/train/eval");
    sub->add_option("--seed", common.seed, "Seed for simulation and training (overrides the config)");
    sub->add_option("--out", common.out, "Output directory")->required();
    sub->add_flag("--quiet", common.quiet, "Only log warnings");
  };
  auto add_train_flags = [&](CLI::App* sub) {
    sub->add_option("--epochs", flags.epochs, "train.max_epochs");
    sub->add_option("--tau", flags.tau, "train.tau (decoder horizon)");
    sub->add_option("--arch", flags.arch, "model.arch: dcrn or hg-t");
    sub->add_flag("--unit-weights", flags.unit_weights, "Train with omega = 1");
  };

  using Handler = std::function<void(Context&)>;
  std::vector<std::pair<CLI::App*, Handler>> handlers;

  auto* simulate = app.add_subcommand("simulate", "Generate a PK-PD dataset: dataset.jsonl (+ .meta.json)");
  add_common(simulate);
  simulate->add_option("--zeta", flags.zeta, "sim.zeta");
  simulate->add_option("--patients", flags.patients, "sim.n_patients");
  simulate->add_option("--max-length", flags.max_length, "sim.max_length");
  handlers.emplace_back(simulate, cmd_simulate);

  auto* trn = app.add_subcommand("train", "Train encoder then decoder: model.ckpt, encoder/decoder_history.csv");
  add_common(trn);
  trn->add_option("--data", flags.data, "Dataset file (dataset.jsonl)");
  add_train_flags(trn);
  handlers.emplace_back(trn, cmd_train);

  auto* evaluate = app.add_subcommand(
      "evaluate", "Counterfactual n-RMSE and plan selection on simulator test sets: counterfactual.csv, "
                  "plan_selection.csv");
  add_common(evaluate);
  evaluate->add_option("--model", flags.model, "Model checkpoint (model.ckpt)");
  evaluate->add_option("--zeta", flags.zeta, "sim.zeta of the test sets");
  evaluate->add_option("--plan-patients", flags.plan_patients, "eval.plan_patients");
  evaluate->add_flag("--one-hot", flags.one_hot, "Restrict plan candidates to one-hot plans");
  handlers.emplace_back(evaluate, cmd_evaluate);

  auto* analyze = app.add_subcommand("analyze-factors", "Influence shares of I/C/O per covariate: factor_influence.csv");
  add_common(analyze);
  analyze->add_option("--model", flags.model, "Model checkpoint (model.ckpt)");
  analyze->add_option("--data", flags.data, "Dataset whose covariate names label the rows");
  handlers.emplace_back(analyze, cmd_analyze);

  auto* ablate = app.add_subcommand(
      "ablate", "zeta sweep over model variants: nrmse_by_zeta.csv, plan_accuracy.csv, factor_influence.csv");
  add_common(ablate);
  ablate->add_option("--zetas", flags.zetas, "eval.zetas")->delimiter(',');
  ablate->add_option("--seeds", flags.seeds, "eval.n_seeds");
  ablate->add_option("--models", flags.models, "eval.models")->delimiter(',');
  ablate->add_option("--jobs", common.jobs, "Worker threads")->check(CLI::PositiveNumber);
  add_train_flags(ablate);
  handlers.emplace_back(ablate, cmd_ablate);

  auto* hpsearch = app.add_subcommand("hpsearch", "Random search: leaderboard.csv, best_config.yaml");
  add_common(hpsearch);
  hpsearch->add_option("--data", flags.data, "Dataset file (dataset.jsonl)");
  hpsearch->add_option("--trials", flags.trials, "eval.search_trials");
  hpsearch->add_option("--jobs", common.jobs, "Worker threads")->check(CLI::PositiveNumber);
  add_train_flags(hpsearch);
  handlers.emplace_back(hpsearch, cmd_hpsearch);

  auto* ingest = app.add_subcommand("ingest", "Longitudinal CSV to dataset.jsonl");
  add_common(ingest);
  ingest->add_option("--csv", flags.csv, "Input CSV, one row per (id, step)");
  ingest->add_option("--covariates", flags.covariates, "Covariate columns")->delimiter(',');
  ingest->add_option("--id-col", flags.schema.id, "Patient id column")->capture_default_str();
  ingest->add_option("--step-col", flags.schema.step, "Time step column")->capture_default_str();
  ingest->add_option("--treatment-col", flags.schema.treatment, "Binary treatment column")->capture_default_str();
  ingest->add_option("--outcome-col", flags.schema.outcome, "Outcome column")->capture_default_str();
  ingest->add_option("--split-col", flags.schema.split, "train/val/test column")->capture_default_str();
  ingest->add_flag("--no-split", flags.no_split, "Put every patient in the train split");
  handlers.emplace_back(ingest, cmd_ingest);

  std::vector<const char*> argv{"dcrn"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error[usage]: " << one_line(e.what()) << '\n';
    return 2;
  }

  Context c;
  c.common = common;
  c.flags = flags;
  auto sink = std::make_shared<spdlog::sinks::ostream_sink_mt>(err);
  c.log = std::make_shared<spdlog::logger>("dcrn", sink);
  c.log->set_pattern("[%l] %v");
  c.log->set_level(common.quiet ? spdlog::level::warn : spdlog::level::info);
  c.manifest.argv = args;
  c.manifest.started_at = utc_timestamp();

  try {
    Handler handler;
    for (const auto& [sub, h] : handlers)
      if (sub->parsed()) {
        handler = h;
        c.manifest.command = sub->get_name();
      }
    if (!common.config.empty()) {
      if (!fs::exists(common.config)) throw UsageError("config file not found: " + common.config);
      c.config = load_config(common.config);
      c.manifest.inputs.push_back(common.config);
    }
    if (common.seed) c.config.seed = *common.seed;
    c.config.apply_seed();
    c.out = common.out;
    fs::create_directories(c.out);
    handler(c);
    {
      std::ofstream cfg(c.output("config.yaml"));
      cfg << dump_config(c.config);
    }
    c.manifest.config = c.config;
    c.manifest.finished_at = utc_timestamp();
    const fs::path manifest = c.out / "manifest.json";
    write_manifest(manifest, c.manifest);
    out << manifest.string() << '\n';
    return 0;
  } catch (const UsageError& e) {
    err << "error[usage]: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "error[config]: " << one_line(e.what()) << '\n';
    return 2;
  } catch (const eval::IngestError& e) {
    err << "error[ingest]: " << one_line(e.what()) << '\n';
  } catch (const train::TrainingError& e) {
    err << "error[training]: " << one_line(e.what()) << '\n';
  } catch (const sim::OverlapError& e) {
    err << "error[overlap]: " << one_line(e.what()) << '\n';
  } catch (const sim::SimulationError& e) {
    err << "error[simulation]: " << one_line(e.what()) << '\n';
  } catch (const std::invalid_argument& e) {
    err << "error[invalid-argument]: " << one_line(e.what()) << '\n';
  } catch (const std::exception& e) {
    err << "error[runtime]: " << one_line(e.what()) << '\n';
  }
  return 1;
}

}  // namespace dcrn::cli
