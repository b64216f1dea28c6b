#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "dcrn/autodiff/graph.hpp"
#include "dcrn/model/network.hpp"

namespace dcrn::loss {

struct LossWeights {
  double alpha = 0.4;  // discrepancy (MMD) term
  double beta = 1.0;   // treatment-head cross entropy
  double gamma = 0.3;  // orthogonality of influence vectors
  double l2 = 1e-4;    // squared-norm penalty on the trained block

  /// Throws std::invalid_argument on negative or non-finite coefficients.
  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

inline constexpr double kPropensityFloor = 0.05;
inline constexpr double kPropensityCeil = 0.95;
inline constexpr double kProbabilityClamp = 1e-7;

/// Importance weight for one sample. `a_c` is the confounder-head probability
/// (clamped to [0.05, 0.95]); `p_hat` the marginal treated rate.
double propensity_weight(int a, double a_c, double p_hat);
/// Column of weights for column tensors of labels and probabilities.
ad::Tensor propensity_weights(const ad::Tensor& labels, const ad::Tensor& a_c, double p_hat);

/// mean(omega * (y - y_hat)^2); omega is a constant column.
ad::Var loss_factual(ad::Var y_hat, ad::Var y, const ad::Tensor& omega);

/// Median of pooled pairwise Euclidean distances; 1 when that median is 0.
double mmd_bandwidth(const ad::Tensor& a, const ad::Tensor& b);
/// Biased squared MMD with k(x, y) = exp(-|x - y|^2 / (2 bandwidth^2)).
ad::Var mmd(ad::Var a, ad::Var b, double bandwidth);
/// Plain-value MMD; bandwidth <= 0 selects the median heuristic. Returns 0
/// when either sample is empty.
double mmd_value(const ad::Tensor& a, const ad::Tensor& b, double bandwidth = 0.0);

/// Mean binary cross entropy of one probability head, clamped to
/// [1e-7, 1 - 1e-7].
ad::Var loss_ce(ad::Var prob, ad::Var labels);

enum class InfluenceSource { kCovariates, kRepresentation };

/// Row average of |W_1| x ... x |W_m| along a chain of weight matrices
/// (each in x out): one entry per input dimension of the first matrix.
ad::Var influence_chain(const std::vector<ad::Var>& weights);
/// Influence of the block input on factor `f`. kCovariates starts at the
/// encoder's covariates and passes through the latent LSTM, with the four
/// gate input matrices made absolute and summed; kRepresentation starts at
/// the latent output feeding the factor network.
ad::Var influence_var(ad::Graph& g, const model::ModelConfig& config, model::Block block, model::Factor f,
                      InfluenceSource source, bool trainable = true);
ad::Tensor influence_vector(const ad::ParameterStore& params, const model::ModelConfig& config,
                            model::Block block, model::Factor f, InfluenceSource source);

/// Sum of the three pairwise inner products (unscaled; gamma enters in the
/// total objective).
ad::Var loss_orthogonal(ad::Var w_i, ad::Var w_c, ad::Var w_o);

struct LossComponents {
  ad::Var l_y, l_d, l_c, l_o, reg;
};

/// L_Y + alpha L_D + beta L_C + gamma L_O + l2 * reg. Throws
/// std::runtime_error naming the first non-finite component.
ad::Var total_loss(const LossComponents& parts, const LossWeights& weights);

/// Targets for one output step: next outcome, observed treatment, and the
/// rows that carry data.
struct StepTargets {
  ad::Tensor y_next;
  ad::Tensor a;
  std::vector<std::size_t> rows;
};

/// Encoder targets: step t pairs the forecast with Y_{t+1} and A_t.
std::vector<StepTargets> encoder_targets(const model::SequenceBatch& batch);

/// Data-dependent constants of the loss. Recording them at one point and
/// replaying them elsewhere makes the loss a fixed function of the
/// parameters (used by gradient checks).
struct FrozenStats {
  ad::Tensor omega;
  std::vector<double> bandwidths;
};

struct BlockLossOptions {
  LossWeights weights;
  /// DCRN(omega=1) ablation.
  bool unit_weights = false;
  const FrozenStats* frozen = nullptr;
  FrozenStats* record = nullptr;
};

struct BlockLoss {
  LossComponents parts;
  ad::Var total;
  std::size_t samples = 0;
};

/// Loss of one block over its output steps. The orthogonality term uses the
/// covariate chains for the encoder and the representation chains for the
/// decoder; the penalty covers every parameter of the block.
BlockLoss block_loss(ad::Graph& g, const model::ModelConfig& config, model::Block block,
                     const std::vector<model::StepOutputs>& steps, const std::vector<StepTargets>& targets,
                     double treated_rate, const BlockLossOptions& options, bool trainable = true);

struct InfluenceTable {
  std::vector<std::string> names;
  std::vector<std::array<double, 3>> raw;         // I, C, O
  std::vector<std::array<double, 3>> normalized;  // each row sums to 1 (uniform if all zero)
};

InfluenceTable influence_table(const ad::ParameterStore& params, const model::ModelConfig& config,
                               const std::vector<std::string>& covariate_names);
/// CSV with columns covariate,I,C,O,I_share,C_share,O_share; `comment` lines
/// are written first, prefixed with '#'.
void write_influence_csv(const std::filesystem::path& path, const InfluenceTable& table,
                         const std::vector<std::string>& comment = {});

}  // namespace dcrn::loss
