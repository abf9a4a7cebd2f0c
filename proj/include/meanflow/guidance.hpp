#pragma once

// Logit-normal time-pair sampling, classifier-free guidance in standard and
// scalar-rescaled form, and samplers: one-step / multi-step average-velocity
// jumps and an explicit-Euler baseline on the instantaneous field.

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

#include "meanflow/common.hpp"
#include "meanflow/net.hpp"

namespace meanflow {

/// Logit-normal (r, t) sampling: mu/sigma parameterize the underlying normal,
/// neq_ratio is the probability of a strictly positive interval r < t.
struct TimePairConfig {
  double mu = -2.0;
  double sigma = 2.0;
  double neq_ratio = 0.10;
};

/// Draws (r, t) with 0 < r <= t < 1. With probability 1 - neq_ratio a single
/// draw is duplicated so r == t exactly; otherwise two draws are ordered.
inline std::pair<double, double> sample_time_pair(const TimePairConfig& cfg, Rng& rng) {
  if (!(cfg.sigma > 0.0)) throw std::invalid_argument("sample_time_pair: sigma must be positive");
  if (!(cfg.neq_ratio >= 0.0 && cfg.neq_ratio <= 1.0)) {
    throw std::invalid_argument("sample_time_pair: neq_ratio must be in [0, 1]");
  }
  const bool distinct = rng.uniform01() < cfg.neq_ratio;
  auto draw = [&] { return logistic(cfg.mu + cfg.sigma * rng.normal()); };
  const double a = draw();
  if (!distinct) return {a, a};
  const double b = draw();
  return {std::min(a, b), std::max(a, b)};
}

enum class GuidanceMode { None, Standard, Scaled };

inline const char* guidance_mode_name(GuidanceMode m) {
  switch (m) {
    case GuidanceMode::None: return "none";
    case GuidanceMode::Standard: return "standard";
    case GuidanceMode::Scaled: return "scaled";
  }
  return "?";
}

inline GuidanceMode guidance_mode_from_name(const std::string& s) {
  if (s == "none") return GuidanceMode::None;
  if (s == "standard") return GuidanceMode::Standard;
  if (s == "scaled") return GuidanceMode::Scaled;
  throw std::invalid_argument("unknown guidance mode: " + s);
}

struct GuidanceConfig {
  GuidanceMode mode = GuidanceMode::None;
  double omega = 1.0;  // guidance strength; ignored when mode == None
};

inline constexpr double kDegenerateDirection = 1e-12;

/// Projection coefficient s = <u_c, u_u> / ||u_u||^2 of the conditional
/// prediction onto the unconditional direction.
inline double cfg_scale_factor(const std::vector<double>& u_c, const std::vector<double>& u_u) {
  if (u_c.size() != u_u.size()) throw std::invalid_argument("cfg_scale_factor: size mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < u_u.size(); ++i) {
    num += u_c[i] * u_u[i];
    den += u_u[i] * u_u[i];
  }
  if (den < kDegenerateDirection) {
    throw NumericError("cfg_scale_factor: unconditional direction is degenerate");
  }
  return num / den;
}

/// Combine conditional and unconditional predictions. omega == 1 returns the
/// conditional prediction unchanged in every mode. A degenerate unconditional
/// direction falls back to s = 1, i.e. standard guidance.
inline std::vector<double> apply_guidance(const std::vector<double>& u_c,
                                          const std::vector<double>& u_u,
                                          const GuidanceConfig& cfg) {
  if (cfg.mode == GuidanceMode::None || cfg.omega == 1.0) return u_c;
  if (u_c.size() != u_u.size()) throw std::invalid_argument("apply_guidance: size mismatch");
  double s = 1.0;
  if (cfg.mode == GuidanceMode::Scaled) {
    double den = 0.0;
    for (double v : u_u) den += v * v;
    if (den >= kDegenerateDirection) {
      double num = 0.0;
      for (std::size_t i = 0; i < u_u.size(); ++i) num += u_c[i] * u_u[i];
      s = num / den;
    }
  }
  std::vector<double> out(u_c.size());
  const double wu = (1.0 - cfg.omega) * s;
  for (std::size_t i = 0; i < u_c.size(); ++i) out[i] = cfg.omega * u_c[i] + wu * u_u[i];
  return out;
}

namespace detail {

template <class Model>
std::vector<double> guided_velocity(const Model& model, const std::vector<double>& z, double t,
                                    double dt, Condition c, const GuidanceConfig& cfg) {
  std::vector<double> u_c = u_eval(model, z, t, dt, c);
  if (cfg.mode == GuidanceMode::None) return u_c;
  std::vector<double> u_u = u_eval(model, z, t, dt, Condition::null());
  return apply_guidance(u_c, u_u, cfg);
}

}  // namespace detail

/// z_0 = eps - u(eps, t=1, dt=1, c): one average-velocity jump across the
/// whole interval. Two model evaluations when guided, one otherwise.
template <class Model>
std::vector<double> one_step_sample(const Model& model, const std::vector<double>& eps,
                                    Condition c, const GuidanceConfig& cfg) {
  std::vector<double> u = detail::guided_velocity(model, eps, 1.0, 1.0, c, cfg);
  std::vector<double> z(eps.size());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = eps[i] - u[i];
  return z;
}

/// Average-velocity jumps over the uniform grid t = 1, (n-1)/n, ..., 0:
/// z_{t-h} = z_t - h * u(z_t, t, h, c). n_steps == 1 matches one_step_sample.
template <class Model>
std::vector<double> multi_step_sample(const Model& model, const std::vector<double>& eps,
                                      Condition c, const GuidanceConfig& cfg, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("multi_step_sample: n_steps must be >= 1");
  std::vector<double> z = eps;
  for (int k = n_steps; k >= 1; --k) {
    const double t_hi = static_cast<double>(k) / n_steps;
    const double t_lo = static_cast<double>(k - 1) / n_steps;
    const double h = t_hi - t_lo;
    std::vector<double> u = detail::guided_velocity(model, z, t_hi, h, c, cfg);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= h * u[i];
  }
  return z;
}

/// Baseline: explicit Euler on dz/dt = u(z, t, 0, c) from t = 1 down to 0.
template <class Model>
std::vector<double> fm_euler_sample(const Model& model, const std::vector<double>& eps,
                                    Condition c, const GuidanceConfig& cfg, int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("fm_euler_sample: n_steps must be >= 1");
  std::vector<double> z = eps;
  for (int k = n_steps; k >= 1; --k) {
    const double t_hi = static_cast<double>(k) / n_steps;
    const double h = t_hi - static_cast<double>(k - 1) / n_steps;
    std::vector<double> u = detail::guided_velocity(model, z, t_hi, 0.0, c, cfg);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] -= h * u[i];
  }
  return z;
}

}  // namespace meanflow
