#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dcrn/autodiff/checkpoint.hpp"
#include "dcrn/autodiff/graph.hpp"
#include "dcrn/autodiff/ops.hpp"
#include "dcrn/model/config.hpp"

namespace dcrn::model {

enum class Factor { kI, kC, kO };
inline constexpr std::array<Factor, 3> kFactors = {Factor::kI, Factor::kC, Factor::kO};
std::string to_string(Factor f);

enum class Block { kEncoder, kDecoder };
/// "enc." or "dec."; every parameter of a block starts with it.
std::string block_prefix(Block b);

// Parameter names are "<block>.<component>.<leaf>". LSTM leaves are wx
// (in x 4H), wh (H x 4H), b (1 x 4H); fully connected leaves are w1, b1, w2,
// b2 with weights stored in x out.
std::string param_name(Block b, const std::string& component, const std::string& leaf);

/// Latent recurrent components: "rnn_phi" for DCRN, one per factor for HG-t.
std::vector<std::string> latent_components(const ModelConfig& config);
/// Latent component feeding factor `f`.
std::string latent_component_for(const ModelConfig& config, Factor f);
std::string factor_component(Factor f);
/// Input width of the latent RNNs of a block.
std::size_t latent_input_dim(const ModelConfig& config, Block b);

/// Registers encoder and decoder parameters with Glorot-uniform weights,
/// zero biases, and forget-gate bias 1.
void init_parameters(ad::ParameterStore& params, const ModelConfig& config, std::uint64_t seed);

/// Time-major padded batch on the normalized scale. Rows past a trajectory's
/// length are zero.
struct SequenceBatch {
  std::size_t batch = 0;
  std::size_t steps = 0;
  std::vector<ad::Tensor> x;  // per step, batch x covariate_dim
  std::vector<ad::Tensor> a;  // per step, batch x 1 (A_t)
  std::vector<ad::Tensor> y;  // per step, batch x 1 (normalized Y_t)
  std::vector<std::size_t> lengths;

  bool valid(std::size_t row, std::size_t t) const { return t < lengths[row]; }
};

SequenceBatch make_batch(const std::vector<const sim::Trajectory*>& trajectories,
                         const Normalizer& norm);

/// One time step of network outputs (each batch x width).
struct StepOutputs {
  std::vector<ad::Var> latent;  // per latent component (Phi for DCRN)
  ad::Var i, c, o;
  ad::Var a_ic;   // P(A=1 | I, C)
  ad::Var a_c;    // P(A=1 | C)
  ad::Var y_hat;  // normalized next outcome
  ad::Var factor(Factor f) const { return f == Factor::kI ? i : (f == Factor::kC ? c : o); }
};

/// Encoder outputs for steps t = 0..T-2; step t forecasts Y_{t+1}.
struct EncoderOutputs {
  std::vector<StepOutputs> steps;
};

/// When `trainable` is false the block's parameters enter as frozen leaves.
/// `rng` is required when training with dropout.
EncoderOutputs encoder_forward(ad::Graph& g, const ModelConfig& config, const SequenceBatch& batch,
                               bool training, std::mt19937_64* rng = nullptr, bool trainable = true);
/// encoder_forward restricted to the HG-t architecture.
EncoderOutputs hgt_forward(ad::Graph& g, const ModelConfig& config, const SequenceBatch& batch,
                           bool training, std::mt19937_64* rng = nullptr, bool trainable = true);

/// Evaluation-mode encoder states after every step t = 0..T-1, as plain
/// tensors.
struct HistoryStates {
  std::vector<std::vector<ad::Tensor>> latent;  // [t][component], batch x repr
  std::vector<ad::Tensor> a_h, a_c, y_h, y_c;   // [t], batch x rnn_hidden
};
HistoryStates encode_history(const ModelConfig& config, const ad::ParameterStore& params,
                             const SequenceBatch& batch);

/// Detached encoder summary at a cut: latent output, RNN_A / RNN_Y states
/// and the last observed outcome.
struct DecoderStart {
  std::size_t batch = 0;
  std::vector<ad::Tensor> latent;  // per component, batch x repr
  ad::Tensor a_h, a_c, y_h, y_c;
  ad::Tensor y_last;  // normalized Y_cut, batch x 1
};

/// Gathers (row, cut) pairs from encoded histories into one decoder batch.
DecoderStart decoder_start(const HistoryStates& states, const SequenceBatch& batch,
                           const std::vector<std::pair<std::size_t, std::size_t>>& row_cuts);

enum class DecodeMode { kTeacherForced, kAutoregressive };

struct DecoderOutputs {
  std::vector<StepOutputs> steps;  // step u forecasts Y_{cut+u+1}
};

/// Rolls the decoder tau steps under `plan` (tau tensors of batch x 1 holding
/// A_cut..A_{cut+tau-1}). Teacher forcing feeds `observed` (at least tau-1
/// tensors of normalized Y_{cut+1}..); autoregressive mode feeds predictions.
DecoderOutputs decoder_forward(ad::Graph& g, const ModelConfig& config, const DecoderStart& start,
                               const std::vector<ad::Tensor>& plan, std::size_t tau, DecodeMode mode,
                               const std::vector<ad::Tensor>* observed = nullptr, bool training = false,
                               std::mt19937_64* rng = nullptr, bool trainable = true);

struct ImpulseResponse {
  std::vector<std::vector<int>> treatments;      // [row][u]
  std::vector<std::vector<double>> propensity;   // [row][u], P(A=1 | I, C) at each step
  std::vector<std::vector<double>> outcomes;     // [row][u], normalized forecasts
};

/// Step 0 applies `first_treatment`; later steps treat when the decoder's
/// propensity head exceeds `threshold`. Outcomes are fed back throughout.
ImpulseResponse impulse_response_rollout(const ModelConfig& config, const ad::ParameterStore& params,
                                         const DecoderStart& start, int first_treatment,
                                         std::size_t tau, double threshold = 0.5);

/// A trained network plus everything needed to apply it to raw data.
struct DcrnModel {
  ModelConfig config;
  Normalizer normalizer;
  /// Marginal treated fraction of the train split, used by the loss weights.
  double treated_rate = 0.5;
  ad::ParameterStore params;

  static DcrnModel create(const ModelConfig& config, const Normalizer& norm, double treated_rate,
                          std::uint64_t seed);
  nlohmann::ordered_json header() const;
};

void save_model(const std::filesystem::path& path, const DcrnModel& model);
DcrnModel load_model(const std::filesystem::path& path);
DcrnModel model_from_checkpoint(const ad::Checkpoint& ckpt);

}  // namespace dcrn::model
