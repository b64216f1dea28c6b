#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dcrn/sim/pkpd.hpp"

namespace dcrn::sim {

enum class Split { kTrain, kVal, kTest };

std::string to_string(Split split);
Split split_from_string(const std::string& s);

/// One patient's observed sequence: X_t (row-major, length x dim), A_t, Y_t.
struct Trajectory {
  std::size_t id = 0;
  Split split = Split::kTrain;
  std::optional<PatientStatics> statics;
  std::size_t dim = 0;
  std::vector<double> covariates;
  std::vector<int> treatments;
  std::vector<double> outcomes;

  std::size_t length() const { return outcomes.size(); }
  double x(std::size_t t, std::size_t k) const { return covariates[t * dim + k]; }
  /// Throws std::invalid_argument if the arrays disagree on length.
  void validate() const;

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

struct DatasetMeta {
  std::string source = "pkpd";
  double zeta = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::string> covariate_names;
  /// max |Y| over the train split.
  double outcome_max_abs = 0.0;
  /// Fraction of treated steps over the train split.
  double treated_fraction = 0.0;

  friend bool operator==(const DatasetMeta&, const DatasetMeta&) = default;
};

struct Dataset {
  DatasetMeta meta;
  std::vector<Trajectory> trajectories;

  std::vector<const Trajectory*> split(Split s) const;
  std::size_t dim() const { return meta.covariate_names.size(); }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

/// Recomputes outcome_max_abs and treated_fraction from the train split.
/// Throws OverlapError when the treated fraction is 0 or 1.
void compute_train_stats(Dataset& dataset);

struct SimulatedPatient {
  Trajectory trajectory;
  /// Simulator state at every step t (before A_t is applied).
  std::vector<PatientState> states;
};

/// Runs the biased observational policy for `length` steps.
SimulatedPatient simulate_patient(const SimConfig& config, std::mt19937_64& rng,
                                  std::size_t patient_id, std::size_t length);

Dataset generate_dataset(const SimConfig& config);

/// Simulator state at a history cut plus the noise shared by every plan.
struct CounterfactualHistory {
  std::size_t patient = 0;
  /// Index of the last observed step; the plan starts at A_cut.
  std::size_t cut = 0;
  PatientStatics statics;
  PatientState state;
  std::vector<StepNoise> future_noise;
};

struct CounterfactualCase {
  std::size_t history = 0;
  std::vector<int> plan;
  /// Ground-truth outcomes Y_{cut+1..cut+tau}.
  std::vector<double> truth;
};

struct CounterfactualTestSet {
  std::size_t tau = 0;
  std::vector<Trajectory> patients;
  std::vector<CounterfactualHistory> histories;
  std::vector<CounterfactualCase> cases;
  /// max |Y| over the observational test trajectories.
  double normalizer = 1.0;
};

/// For each test patient and history length 1..max_length, builds tau one-hot
/// plans (treat only at future step j) with common random numbers.
CounterfactualTestSet generate_counterfactual_test(const SimConfig& config, std::size_t tau);

/// Plans in lexicographic order: index k maps to the bits of k, first step
/// most significant.
std::vector<int> plan_from_index(std::size_t k, std::size_t tau);
std::vector<std::vector<int>> all_plans(std::size_t tau);

struct PlanSearch {
  std::vector<int> best_plan;
  std::size_t best_index = 0;
  double best_outcome = 0.0;
  /// Final outcome for every plan, lexicographic order.
  std::vector<double> final_outcomes;
};

/// Exhaustive search over all 2^tau plans with shared noise; ties resolve to
/// the lexicographically first plan. Requires tau <= 5.
PlanSearch enumerate_optimal_plan(const CounterfactualHistory& history, std::size_t tau);

struct PlanSelectionSet {
  std::size_t tau = 0;
  std::vector<Trajectory> patients;
  std::vector<CounterfactualHistory> histories;
  std::vector<PlanSearch> optimum;
};

/// One history per patient, cut at the last observed step.
PlanSelectionSet generate_plan_selection_set(const SimConfig& config, std::size_t tau,
                                             std::size_t n_patients);

// Dataset files: `path` holds one JSON record per patient; `path.meta.json`
// holds the metadata record.
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);
std::filesystem::path meta_path_for(const std::filesystem::path& path);

}  // namespace dcrn::sim
