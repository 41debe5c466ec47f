// Noise schedules and the forward/reverse processes of an x0-predicting
// denoising diffusion model.
//
// Step indexing: data lives at t = 0 (alpha_bar(0) = 1) and noise steps run
// 1..T. Every per-step vector below therefore has T + 1 entries.
#ifndef TSHAMO_DIFFUSION_HPP
#define TSHAMO_DIFFUSION_HPP

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace tshamo::diffusion {

enum class ScheduleKind { linear, cosine };

ScheduleKind parse_schedule_kind(const std::string& name);
std::string to_string(ScheduleKind kind);

struct NoiseSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::linear;
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_bar;
  Eigen::VectorXd posterior_coef_x0;
  Eigen::VectorXd posterior_coef_xt;
  Eigen::VectorXd posterior_variance;

  void check_step(int t, int lowest = 1) const {
    if (t < lowest || t > steps) {
      throw std::out_of_range("diffusion: step " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                              std::to_string(steps) + "]");
    }
  }
};

// Linear kind spaces beta from 1e-4 to 2e-2; cosine follows the squared-cosine
// alpha_bar curve with offset 0.008 and betas capped at 0.999.
NoiseSchedule build_schedule(int steps, ScheduleKind kind = ScheduleKind::linear);

// sqrt(alpha_bar) * x0 + sqrt(1 - alpha_bar) * eps
template <typename DerivedX, typename DerivedE>
typename DerivedX::PlainObject corrupt(const Eigen::MatrixBase<DerivedX>& x0, double alpha_bar,
                                       const Eigen::MatrixBase<DerivedE>& eps) {
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) {
    throw std::invalid_argument("diffusion: noise shape does not match sample shape");
  }
  return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

// Closed-form draw of x_t given x0. t = 0 returns x0 unchanged.
template <typename DerivedX, typename DerivedE>
typename DerivedX::PlainObject q_sample(const Eigen::MatrixBase<DerivedX>& x0, int t,
                                        const Eigen::MatrixBase<DerivedE>& eps, const NoiseSchedule& sched) {
  sched.check_step(t, 0);
  return corrupt(x0, sched.alpha_bar[t], eps);
}

// One application of q(x_t | x_{t-1}).
template <typename DerivedX, typename DerivedE>
typename DerivedX::PlainObject q_step(const Eigen::MatrixBase<DerivedX>& x_prev, int t,
                                      const Eigen::MatrixBase<DerivedE>& eps, const NoiseSchedule& sched) {
  sched.check_step(t);
  return corrupt(x_prev, sched.alpha[t], eps);
}

// Draw x_{t-1} from the posterior q(x_{t-1} | x_t, x0 = x0_hat). The noise
// term is suppressed at t = 1.
template <typename DerivedT, typename DerivedH, typename DerivedN>
typename DerivedT::PlainObject posterior_step(const Eigen::MatrixBase<DerivedT>& x_t,
                                              const Eigen::MatrixBase<DerivedH>& x0_hat, int t,
                                              const Eigen::MatrixBase<DerivedN>& noise, const NoiseSchedule& sched) {
  sched.check_step(t);
  if (x_t.rows() != x0_hat.rows() || x_t.cols() != x0_hat.cols() || x_t.rows() != noise.rows() ||
      x_t.cols() != noise.cols()) {
    throw std::invalid_argument("diffusion: posterior_step operand shapes differ");
  }
  const double sd = t == 1 ? 0.0 : std::sqrt(sched.posterior_variance[t]);
  return sched.posterior_coef_x0[t] * x0_hat + sched.posterior_coef_xt[t] * x_t + sd * noise;
}

}  // namespace tshamo::diffusion

#endif
