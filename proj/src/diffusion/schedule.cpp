#include "tshamo/diffusion.hpp"

#include <algorithm>
#include <numbers>

namespace tshamo::diffusion {

ScheduleKind parse_schedule_kind(const std::string& name) {
  if (name == "linear") return ScheduleKind::linear;
  if (name == "cosine") return ScheduleKind::cosine;
  throw std::invalid_argument("diffusion: unknown schedule kind '" + name + "'");
}

std::string to_string(ScheduleKind kind) { return kind == ScheduleKind::linear ? "linear" : "cosine"; }

NoiseSchedule build_schedule(int steps, ScheduleKind kind) {
  if (steps < 1) throw std::invalid_argument("diffusion: schedule needs at least one step");
  NoiseSchedule s;
  s.steps = steps;
  s.kind = kind;
  const Eigen::Index n = steps + 1;
  s.beta = Eigen::VectorXd::Zero(n);

  if (kind == ScheduleKind::linear) {
    constexpr double first = 1e-4, last = 2e-2;
    for (int t = 1; t <= steps; ++t) {
      s.beta[t] = steps == 1 ? first : first + (last - first) * (t - 1) / static_cast<double>(steps - 1);
    }
  } else {
    constexpr double offset = 0.008;
    auto f = [&](double t) {
      const double c = std::cos((t / steps + offset) / (1.0 + offset) * std::numbers::pi / 2.0);
      return c * c;
    };
    for (int t = 1; t <= steps; ++t) s.beta[t] = std::min(1.0 - f(t) / f(t - 1), 0.999);
  }

  s.alpha = 1.0 - s.beta.array();
  s.alpha_bar = Eigen::VectorXd::Ones(n);
  for (int t = 1; t <= steps; ++t) s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];

  s.posterior_coef_x0 = Eigen::VectorXd::Zero(n);
  s.posterior_coef_xt = Eigen::VectorXd::Zero(n);
  s.posterior_variance = Eigen::VectorXd::Zero(n);
  for (int t = 1; t <= steps; ++t) {
    const double ab = s.alpha_bar[t], ab_prev = s.alpha_bar[t - 1];
    s.posterior_coef_x0[t] = std::sqrt(ab_prev) * s.beta[t] / (1.0 - ab);
    s.posterior_coef_xt[t] = std::sqrt(s.alpha[t]) * (1.0 - ab_prev) / (1.0 - ab);
    s.posterior_variance[t] = s.beta[t] * (1.0 - ab_prev) / (1.0 - ab);
  }
  return s;
}

}  // namespace tshamo::diffusion
