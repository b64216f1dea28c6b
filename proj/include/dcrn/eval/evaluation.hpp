#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcrn/losses/losses.hpp"
#include "dcrn/model/network.hpp"
#include "dcrn/sim/dataset.hpp"
#include "dcrn/training/train.hpp"

namespace dcrn::eval {

/// sqrt(mean squared error) / normalizer.
double nrmse(const std::vector<double>& predictions, const std::vector<double>& truths, double normalizer);

/// Sample standard deviation (n - 1); 0 for fewer than two values.
double sample_sd(const std::vector<double>& values);
double mean(const std::vector<double>& values);

/// One forecast request: the history to start from and the treatments
/// A_cut..A_{cut+tau-1} to apply.
struct ForecastQuery {
  std::size_t history = 0;
  std::vector<int> plan;
};

/// Anything that forecasts Y_{cut+1..cut+tau} for a history under a plan.
/// `patients[h.patient]` holds the observed trajectory of history `h`; only
/// its first `cut + 1` steps may be used.
class Forecaster {
 public:
  virtual ~Forecaster() = default;
  virtual std::string name() const = 0;
  virtual std::vector<std::vector<double>> forecast(const std::vector<sim::Trajectory>& patients,
                                                    const std::vector<sim::CounterfactualHistory>& histories,
                                                    const std::vector<ForecastQuery>& queries) const = 0;
};

/// Replays the simulator from the stored state with the shared noise.
class OracleForecaster : public Forecaster {
 public:
  std::string name() const override { return "oracle"; }
  std::vector<std::vector<double>> forecast(const std::vector<sim::Trajectory>& patients,
                                            const std::vector<sim::CounterfactualHistory>& histories,
                                            const std::vector<ForecastQuery>& queries) const override;
};

/// Predicts a constant (the train-split outcome mean).
class MeanForecaster : public Forecaster {
 public:
  explicit MeanForecaster(double value) : value_(value) {}
  static MeanForecaster fit(const sim::Dataset& dataset);
  std::string name() const override { return "mean"; }
  double value() const { return value_; }
  std::vector<std::vector<double>> forecast(const std::vector<sim::Trajectory>& patients,
                                            const std::vector<sim::CounterfactualHistory>& histories,
                                            const std::vector<ForecastQuery>& queries) const override;

 private:
  double value_;
};

/// Carries Y_cut forward.
class LastValueForecaster : public Forecaster {
 public:
  std::string name() const override { return "last-value"; }
  std::vector<std::vector<double>> forecast(const std::vector<sim::Trajectory>& patients,
                                            const std::vector<sim::CounterfactualHistory>& histories,
                                            const std::vector<ForecastQuery>& queries) const override;
};

/// Encoder history plus autoregressive decoder rollout under the plan.
class ModelForecaster : public Forecaster {
 public:
  ModelForecaster(const model::DcrnModel& model, std::string name) : model_(&model), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::vector<std::vector<double>> forecast(const std::vector<sim::Trajectory>& patients,
                                            const std::vector<sim::CounterfactualHistory>& histories,
                                            const std::vector<ForecastQuery>& queries) const override;

 private:
  const model::DcrnModel* model_;
  std::string name_;
};

struct CounterfactualResult {
  std::size_t tau = 0;
  std::size_t cases = 0;
  double normalizer = 1.0;
  /// n-RMSE of the step-u forecasts, u = 1..tau.
  std::vector<double> nrmse_by_step;
  /// n-RMSE at step tau (the reported tau-step figure).
  double nrmse = 0.0;
};

/// Evaluates the first `tau` plan steps of every case; throws when `tau`
/// exceeds the test set's horizon.
CounterfactualResult counterfactual_eval(const Forecaster& forecaster, const sim::CounterfactualTestSet& set,
                                         std::size_t tau);

struct PlanSelectionResult {
  std::size_t tau = 0;
  std::size_t patients = 0;
  bool one_hot = false;
  double accuracy = 0.0;
  double mean_regret = 0.0;
  /// Chosen plan index (lexicographic over all 2^tau plans) per patient.
  std::vector<std::size_t> chosen;
};

/// Candidate plan indices: all 2^tau plans, or the tau one-hot plans.
std::vector<std::size_t> candidate_plans(std::size_t tau, bool one_hot);

/// Scores every candidate by the forecast final outcome and picks the
/// smallest (ties go to the lexicographically first plan). A choice is a
/// match when its true final outcome equals the best candidate's.
PlanSelectionResult plan_selection_accuracy(const Forecaster& forecaster, const sim::PlanSelectionSet& set,
                                            bool one_hot = false);
/// Uniformly random choice among the candidates.
PlanSelectionResult random_plan_baseline(const sim::PlanSelectionSet& set, std::uint64_t seed,
                                         bool one_hot = false);

/// Influence table of the encoder (covariate source), optionally written to
/// `csv`.
loss::InfluenceTable factor_analysis(const model::DcrnModel& model, const std::vector<std::string>& covariate_names,
                                     const std::optional<std::filesystem::path>& csv = std::nullopt,
                                     const std::vector<std::string>& comment = {});

/// Ordinal pattern of the simulator's factor structure: kappa I-share above
/// its O-share; lambda_p, sigma, psi0 C-dominant; alpha0, rho0 O-dominant.
struct DisentanglementCheck {
  bool kappa_i_over_o = false;
  std::vector<std::string> c_dominant_failures;
  std::vector<std::string> o_dominant_failures;
  bool passed() const { return kappa_i_over_o && c_dominant_failures.empty() && o_dominant_failures.empty(); }
};
DisentanglementCheck check_disentanglement(const loss::InfluenceTable& table);

// ---- ablation suite ----

inline const std::vector<std::string> kAblationModels = {"dcrn",  "dcrn-no-balance", "dcrn-unit-weights",
                                                         "hg-t",  "mean",            "last-value"};

struct AblationConfig {
  std::vector<double> zetas = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0};
  std::vector<std::size_t> taus = {1, 5};
  std::vector<std::string> models = kAblationModels;
  std::size_t n_seeds = 5;
  /// Plan-selection horizons (each <= 5); empty skips plan selection.
  std::vector<std::size_t> plan_taus = {3, 5};
  std::size_t plan_patients = 200;
  bool plan_one_hot = false;
  /// Trained "dcrn" models at this zeta feed factor_influence.csv (averaged
  /// over seeds); no influence table when the grid lacks it.
  double influence_zeta = 0.7;

  void validate() const;
  friend bool operator==(const AblationConfig&, const AblationConfig&) = default;
};

struct NrmseRow {
  std::string model;
  double zeta = 0;
  std::size_t tau = 0;
  double mean = 0, sd = 0;
  std::size_t n = 0;
  std::vector<double> values;  // per seed
};

struct PlanRow {
  std::string model;
  double zeta = 0;
  std::size_t tau = 0;
  double accuracy_mean = 0, accuracy_sd = 0, regret_mean = 0;
  std::size_t n = 0;
  std::vector<double> accuracies;  // per seed
};

struct AblationReport {
  std::vector<NrmseRow> nrmse;
  std::vector<PlanRow> plans;
  std::optional<loss::InfluenceTable> influence;
  std::vector<std::string> warnings;
};

/// Model and train configuration of a named variant; nullopt for baselines
/// and unknown names.
std::optional<std::pair<model::ModelConfig, train::TrainConfig>> variant_config(const std::string& name,
                                                                               const model::ModelConfig& model,
                                                                               const train::TrainConfig& train);

using Progress = std::function<void(const std::string&)>;

/// For each zeta and seed: simulate, train every model variant, and score
/// the counterfactual test set (and plan selection). Seeds are derived from
/// `sim.seed`, so the same inputs reproduce the report bitwise for any
/// `jobs` (worker threads over (zeta, seed) units).
AblationReport ablation_suite(const sim::SimConfig& sim, const model::ModelConfig& model,
                              const train::TrainConfig& train, const AblationConfig& config,
                              const Progress& progress = {}, std::size_t jobs = 1);

/// Writes nrmse_by_zeta.csv, plan_accuracy.csv and factor_influence.csv into
/// `dir`, each starting with the comment lines.
std::vector<std::filesystem::path> write_ablation_csvs(const std::filesystem::path& dir, const AblationReport& report,
                                                       const std::vector<std::string>& comment);

/// Per-run seeds derived from a base seed.
std::uint64_t derived_seed(std::uint64_t base, std::uint64_t tag, std::uint64_t index);

// ---- CSV I/O ----

struct CsvTable {
  std::vector<std::string> comments;  // without the leading "# "
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

/// Parses comma-separated text with optional double-quoted fields; lines
/// starting with '#' before the header are comments.
CsvTable read_csv(const std::filesystem::path& path);

class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Column roles for ingest_longitudinal_csv. Empty `split` assigns every
/// trajectory to the train split.
struct CsvSchema {
  std::string id = "id";
  std::string step = "step";
  std::vector<std::string> covariates{sim::kCovariateNames.begin(), sim::kCovariateNames.end()};
  std::string treatment = "treatment";
  std::string outcome = "outcome";
  std::string split = "split";
};

/// Groups rows by id, orders them by step, and fills the dataset statistics.
/// Errors name the 1-based line: missing columns, non-numeric cells,
/// treatments other than 0/1, and duplicate (id, step) pairs.
sim::Dataset ingest_longitudinal_csv(const std::filesystem::path& path, const CsvSchema& schema = {});
/// Writes one row per (trajectory, step) in the layout `schema` describes.
void export_longitudinal_csv(const std::filesystem::path& path, const sim::Dataset& dataset,
                             const CsvSchema& schema = {});

}  // namespace dcrn::eval
