#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcrn/sim/dataset.hpp"

namespace dcrn::model {

enum class Architecture { kDcrn, kHgt };

std::string to_string(Architecture arch);
Architecture architecture_from_string(const std::string& s);

struct ModelConfig {
  Architecture arch = Architecture::kDcrn;
  std::size_t covariate_dim = sim::kCovariateDim;
  std::size_t repr_size = 16;
  std::size_t rnn_hidden = 16;
  std::size_t fc_hidden = 16;
  std::size_t factor_dim = 8;
  double dropout = 0.1;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::ordered_json to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::ordered_json& j);

/// Train-split statistics used to standardize covariates and z-score
/// outcomes inside the network. Predictions leave the model on the original
/// outcome scale.
struct Normalizer {
  std::vector<double> x_mean;
  std::vector<double> x_std;
  double y_mean = 0.0;
  double y_std = 1.0;

  static Normalizer identity(std::size_t dim);
  /// Statistics over every step of the train split; zero spreads become 1.
  static Normalizer fit(const sim::Dataset& dataset);

  double x(std::size_t k, double raw) const { return (raw - x_mean[k]) / x_std[k]; }
  double y(double raw) const { return (raw - y_mean) / y_std; }
  double y_raw(double normalized) const { return normalized * y_std + y_mean; }

  friend bool operator==(const Normalizer&, const Normalizer&) = default;
};

nlohmann::ordered_json to_json(const Normalizer& norm);
Normalizer normalizer_from_json(const nlohmann::ordered_json& j);

}  // namespace dcrn::model
