#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcrn/losses/losses.hpp"
#include "dcrn/model/network.hpp"
#include "dcrn/sim/dataset.hpp"

namespace dcrn::train {

/// Training failure with epoch / batch context in the message.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Sampling ranges for random search. Learning rates are drawn log-uniformly, the rest uniformly.
struct SearchRanges {
  double lr_min = 1e-4, lr_max = 1e-2;
  std::size_t encoder_batch_min = 16, encoder_batch_max = 256;
  std::size_t decoder_batch_min = 64, decoder_batch_max = 512;
  std::size_t rnn_hidden_min = 8, rnn_hidden_max = 128;
  std::size_t repr_min = 8, repr_max = 256;
  std::size_t fc_hidden_min = 4, fc_hidden_max = 32;
  double dropout_min = 0.0, dropout_max = 0.4;
  double weight_min = 0.0, weight_max = 1.0;  // alpha, beta, gamma

  void validate() const;
  friend bool operator==(const SearchRanges&, const SearchRanges&) = default;
};

struct TrainConfig {
  double encoder_lr = 1e-3;
  double decoder_lr = 1e-3;
  std::size_t encoder_batch = 128;
  std::size_t decoder_batch = 256;
  std::size_t max_epochs = 100;
  std::size_t patience = 5;
  std::size_t tau = 5;
  loss::LossWeights weights;
  /// DCRN(omega=1) ablation.
  bool unit_weights = false;
  /// Joint gradient-norm cap per update; 0 disables clipping.
  double clip_norm = 10.0;
  std::uint64_t seed = 42;
  SearchRanges search;

  /// Throws std::invalid_argument naming the field.
  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double l_y = 0, l_d = 0, l_c = 0, l_o = 0, reg = 0, total = 0;
  double val_mse = 0;
};

struct TrainReport {
  std::string block;  // "encoder" or "decoder"
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val_mse = 0;
  std::size_t updates = 0;
  /// Largest encoder gradient norm seen during decoder updates (always 0
  /// unless the freeze is broken, which aborts training).
  double max_encoder_grad_norm = 0;
  std::string encoder_checksum_before, encoder_checksum_after;
  double wall_seconds = 0;
};

/// Columns: epoch,L_Y,L_D,L_C,L_O,L2,total,val_mse.
void write_report_csv(const std::filesystem::path& path, const TrainReport& report,
                      const std::vector<std::string>& comment = {});

/// Fresh model whose normalizer and treated rate come from the train split.
model::DcrnModel make_model(const sim::Dataset& dataset, const model::ModelConfig& config, std::uint64_t seed);

/// Block 1. Updates only encoder parameters of `model` and leaves it at the
/// best-validation epoch. Validation is unweighted one-step MSE on the
/// original outcome scale.
TrainReport train_encoder(model::DcrnModel& model, const sim::Dataset& dataset, const TrainConfig& config);

/// Block 2. Encoder parameters enter the graph frozen; each update asserts
/// that they received no gradient. Validation is autoregressive tau-step MSE
/// with the factual treatments.
TrainReport train_decoder(model::DcrnModel& model, const sim::Dataset& dataset, const TrainConfig& config);

/// Decoder cut points (row, last observed index) for trajectories long
/// enough to cover `tau` future steps: cut in [1, length - tau - 1].
std::vector<std::pair<std::size_t, std::size_t>> decoder_cuts(const std::vector<const sim::Trajectory*>& trajectories,
                                                              std::size_t tau);

/// Unweighted one-step MSE of the encoder over every forecast step.
double encoder_mse(const model::DcrnModel& model, const std::vector<const sim::Trajectory*>& trajectories);
/// Unweighted autoregressive MSE over all tau decoder steps of every cut.
double decoder_mse(const model::DcrnModel& model, const std::vector<const sim::Trajectory*>& trajectories,
                   std::size_t tau);

struct TrainedModel {
  model::DcrnModel model;
  TrainReport encoder, decoder;
};

/// Both blocks in order.
TrainedModel train_model(const sim::Dataset& dataset, const model::ModelConfig& model_config,
                         const TrainConfig& config);

struct Trial {
  std::size_t index = 0;
  std::uint64_t seed = 0;
  model::ModelConfig model;
  TrainConfig train;
  double encoder_val_mse = 0;
  double val_mse = 0;  // decoder tau-step factual MSE; the ranking score
  std::string error;   // non-empty when the trial failed
};

struct SearchResult {
  Trial best;
  std::vector<Trial> leaderboard;  // sorted by val_mse, failed trials last
};

/// Draws one configuration; fields outside the ranges keep `base` values.
void sample_trial(const SearchRanges& ranges, std::mt19937_64& rng, model::ModelConfig& model,
                  TrainConfig& train);
bool in_ranges(const SearchRanges& ranges, const model::ModelConfig& model, const TrainConfig& train);

/// Independent trials with derived seeds, run on up to `jobs` threads.
/// Throws TrainingError listing every failure when no trial succeeds.
SearchResult random_search(const sim::Dataset& dataset, const model::ModelConfig& base_model,
                           const TrainConfig& base_train, std::size_t n_trials, std::uint64_t seed,
                           std::size_t jobs = 1);
void write_leaderboard_csv(const std::filesystem::path& path, const SearchResult& result,
                           const std::vector<std::string>& comment = {});

}  // namespace dcrn::train
