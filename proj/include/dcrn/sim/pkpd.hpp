#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dcrn::sim {

inline constexpr std::size_t kCovariateDim = 8;
inline constexpr std::size_t kArOrder = 10;
inline constexpr std::size_t kMuWindow = 10;

/// Covariate order of X_t.
inline const std::array<std::string, kCovariateDim> kCovariateNames = {
    "alpha0", "lambda_p", "sigma", "psi0", "rho0", "f", "kappa", "rho"};

class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised when the marginal treated fraction is 0 or 1.
class OverlapError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PatientStatics {
  double alpha0 = 0.0;    // tumour proliferation rate
  double lambda_p = 0.0;  // intrinsic kill rate
  double sigma = 0.0;     // drug bound to immune cells
  double rho0 = 0.0;      // tumour cell count constant
  double fitness = 1.0;   // immune-cell fitness f
  std::array<double, kArOrder> theta{};  // AR coefficients for kappa

  friend bool operator==(const PatientStatics&, const PatientStatics&) = default;
};

struct PatientState {
  std::size_t patient = 0;
  std::size_t t = 0;
  double rho = 0.0;   // cancer cell mass
  double psi0 = 0.0;  // immune cell count
  /// kappa history, most recent first: kappa_history[0] == kappa(t).
  std::array<double, kArOrder> kappa_history{};
  /// Last kMuWindow values of mu, most recent first.
  std::array<double, kMuWindow> mu_window{};

  double kappa() const { return kappa_history[0]; }
  double mu_bar() const;
};

struct NoiseConfig {
  double rho_variance = 0.01;
  double kappa_variance = 0.01;
  double ar_coef_variance = 0.01;
  bool enabled = true;
};

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;
};

struct SimConfig {
  double zeta = 0.5;
  std::size_t n_patients = 1000;
  std::size_t max_length = 20;
  std::size_t tau = 5;
  std::size_t n_test_patients = 50;
  NoiseConfig noise;
  std::uint64_t seed = 42;
  SplitFractions splits;

  /// Throws std::invalid_argument on out-of-range fields.
  void validate() const;
};

/// Additive noise for one transition; pre-drawn so that several treatment
/// plans can share it.
struct StepNoise {
  double rho = 0.0;
  double kappa = 0.0;
};

/// Deterministic per-stream generator derived from (seed, stream tag, index).
std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index);

struct SampledPatient {
  PatientStatics statics;
  PatientState state;
};

SampledPatient sample_patient(const SimConfig& config, std::mt19937_64& rng,
                              std::size_t patient_id = 0);

double treatment_prob(const PatientState& state, double zeta);

StepNoise draw_step_noise(const NoiseConfig& noise, std::mt19937_64& rng);

/// Advances one step under treatment `a`. Throws SimulationError naming the
/// patient and step if the state turns non-finite.
PatientState step_dynamics(const PatientStatics& statics, const PatientState& state, int a,
                           const StepNoise& noise);
PatientState step_dynamics(const PatientStatics& statics, const PatientState& state, int a,
                           const NoiseConfig& noise, std::mt19937_64& rng);

/// X_t for the given state.
std::array<double, kCovariateDim> covariates(const PatientStatics& statics, const PatientState& state);

/// Outcomes rho(t+1), ..., rho(t+len(plan)) after applying `plan` from
/// `state` with pre-drawn noise.
std::vector<double> rollout(const PatientStatics& statics, const PatientState& state,
                            const std::vector<int>& plan, const std::vector<StepNoise>& noise);

}  // namespace dcrn::sim
