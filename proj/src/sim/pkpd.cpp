#include "dcrn/sim/pkpd.hpp"

#include <cmath>
#include <numeric>

namespace dcrn::sim {

double PatientState::mu_bar() const {
  return std::accumulate(mu_window.begin(), mu_window.end(), 0.0) / static_cast<double>(kMuWindow);
}

void SimConfig::validate() const {
  if (!(zeta >= 0.0 && zeta <= 1.0)) throw std::invalid_argument("sim.zeta must lie in [0, 1]");
  if (n_patients == 0) throw std::invalid_argument("sim.n_patients must be positive");
  if (max_length == 0) throw std::invalid_argument("sim.max_length must be positive");
  if (tau == 0) throw std::invalid_argument("sim.tau must be positive");
  if (tau >= max_length) throw std::invalid_argument("sim.tau must be smaller than sim.max_length");
  if (noise.rho_variance < 0 || noise.kappa_variance < 0 || noise.ar_coef_variance < 0) {
    throw std::invalid_argument("sim noise variances must be non-negative");
  }
  const double total = splits.train + splits.val + splits.test;
  if (splits.train <= 0 || splits.val < 0 || splits.test < 0 || std::fabs(total - 1.0) > 1e-9) {
    throw std::invalid_argument("sim split fractions must be non-negative, train > 0, summing to 1");
  }
}

std::mt19937_64 make_stream(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(tag), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  return std::mt19937_64(seq);
}

SampledPatient sample_patient(const SimConfig& config, std::mt19937_64& rng, std::size_t patient_id) {
  auto uniform = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto normal = [&rng](double variance) {
    return variance > 0.0 ? std::normal_distribution<double>(0.0, std::sqrt(variance))(rng) : 0.0;
  };

  SampledPatient out;
  PatientStatics& s = out.statics;
  s.alpha0 = uniform(0.0, 0.1);
  s.lambda_p = uniform(0.1, 0.2);
  s.sigma = uniform(0.0, 0.1);
  s.rho0 = uniform(0.0, 0.1);
  s.fitness = uniform(1.0, 5.0);
  for (double& th : s.theta) th = normal(config.noise.ar_coef_variance);

  PatientState& st = out.state;
  st.patient = patient_id;
  st.t = 0;
  st.kappa_history.fill(0.0);
  st.kappa_history[0] = normal(config.noise.kappa_variance);
  st.psi0 = uniform(0.1, 0.3);
  st.rho = uniform(0.03, 1.0);
  st.mu_window.fill(s.lambda_p * st.psi0 * s.sigma);
  return out;
}

double treatment_prob(const PatientState& state, double zeta) {
  const double z = zeta * state.mu_bar() + (1.0 - zeta) * state.kappa();
  return 1.0 / (1.0 + std::exp(-z));
}

StepNoise draw_step_noise(const NoiseConfig& noise, std::mt19937_64& rng) {
  StepNoise n;
  if (!noise.enabled) return n;
  if (noise.rho_variance > 0.0)
    n.rho = std::normal_distribution<double>(0.0, std::sqrt(noise.rho_variance))(rng);
  if (noise.kappa_variance > 0.0)
    n.kappa = std::normal_distribution<double>(0.0, std::sqrt(noise.kappa_variance))(rng);
  return n;
}

PatientState step_dynamics(const PatientStatics& s, const PatientState& state, int a,
                           const StepNoise& noise) {
  if (a != 0 && a != 1) throw std::invalid_argument("step_dynamics: treatment must be 0 or 1");
  PatientState next = state;
  next.t = state.t + 1;
  next.psi0 = state.psi0 * (a == 1 ? 1.01 : 0.99);
  const double mu = s.lambda_p * next.psi0 * s.sigma;
  const double lambda = (s.rho0 / next.psi0) / s.fitness;
  const double rho = state.rho;
  next.rho = rho + (s.alpha0 - mu + mu * lambda) * rho - mu * lambda * rho * rho + noise.rho;
  if (next.rho < 0.0) next.rho = 0.0;

  double kappa = noise.kappa;
  for (std::size_t i = 0; i < kArOrder; ++i) kappa += s.theta[i] * state.kappa_history[i];
  for (std::size_t i = kArOrder - 1; i > 0; --i) next.kappa_history[i] = state.kappa_history[i - 1];
  next.kappa_history[0] = kappa;

  for (std::size_t i = kMuWindow - 1; i > 0; --i) next.mu_window[i] = state.mu_window[i - 1];
  next.mu_window[0] = mu;

  if (!std::isfinite(next.rho) || !std::isfinite(next.psi0) || !std::isfinite(kappa)) {
    throw SimulationError("simulation: non-finite state for patient " + std::to_string(state.patient) +
                          " at step " + std::to_string(next.t));
  }
  return next;
}

PatientState step_dynamics(const PatientStatics& statics, const PatientState& state, int a,
                           const NoiseConfig& noise, std::mt19937_64& rng) {
  return step_dynamics(statics, state, a, draw_step_noise(noise, rng));
}

std::array<double, kCovariateDim> covariates(const PatientStatics& s, const PatientState& st) {
  return {s.alpha0, s.lambda_p, s.sigma, st.psi0, s.rho0, s.fitness, st.kappa(), st.rho};
}

std::vector<double> rollout(const PatientStatics& statics, const PatientState& state,
                            const std::vector<int>& plan, const std::vector<StepNoise>& noise) {
  if (noise.size() < plan.size()) throw std::invalid_argument("rollout: fewer noise draws than plan steps");
  std::vector<double> out;
  out.reserve(plan.size());
  PatientState st = state;
  for (std::size_t u = 0; u < plan.size(); ++u) {
    st = step_dynamics(statics, st, plan[u], noise[u]);
    out.push_back(st.rho);
  }
  return out;
}

}  // namespace dcrn::sim
