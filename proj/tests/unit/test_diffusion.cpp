#include "doctest.h"
#include "tshamo/diffusion.hpp"
#include "tshamo/random.hpp"

#include <cmath>

using namespace tshamo::diffusion;
using tshamo::Rng;

namespace {

Eigen::VectorXd normals(Eigen::Index n, Rng& rng) {
  Eigen::VectorXd v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.normal();
  return v;
}

double variance(const Eigen::VectorXd& v) { return (v.array() - v.mean()).square().sum() / (v.size() - 1.0); }

Eigen::VectorXd scalar(double x) { return Eigen::VectorXd::Constant(1, x); }

}  // namespace

TEST_CASE("linear schedule endpoints and terminal alpha_bar") {
  const auto s = build_schedule(1000, ScheduleKind::linear);
  CHECK(s.beta[1] == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(s.beta[1000] == doctest::Approx(2e-2).epsilon(1e-12));
  CHECK(s.alpha_bar[0] == 1.0);
  // prod(1 - linspace(1e-4, 2e-2, 1000)) computed independently in float64.
  CHECK(s.alpha_bar[1000] == doctest::Approx(4.035829765375676e-05).epsilon(1e-9));
  CHECK(s.alpha_bar[1000] < 1e-3);
}

TEST_CASE("single-step schedule") {
  const auto s = build_schedule(1, ScheduleKind::linear);
  CHECK(s.alpha_bar[1] == doctest::Approx(1.0 - s.beta[1]));
  CHECK(s.beta[1] == doctest::Approx(1e-4));
}

TEST_CASE("zero steps is rejected") { CHECK_THROWS_AS(build_schedule(0), std::invalid_argument); }

TEST_CASE("schedule invariants hold for both kinds") {
  for (auto kind : {ScheduleKind::linear, ScheduleKind::cosine}) {
    for (int steps : {1, 2, 10, 100, 1000}) {
      const auto s = build_schedule(steps, kind);
      CAPTURE(steps);
      for (int t = 1; t <= steps; ++t) {
        CHECK(s.beta[t] > 0.0);
        CHECK(s.beta[t] < 1.0);
        CHECK(s.alpha_bar[t] < s.alpha_bar[t - 1]);
        CHECK(s.posterior_variance[t] >= 0.0);
      }
    }
  }
}

TEST_CASE("closed-form corruption arithmetic") {
  CHECK(corrupt(scalar(0.7), 1.0, scalar(-3.0))[0] == 0.7);
  CHECK(corrupt(scalar(0.7), 0.0, scalar(-3.0))[0] == -3.0);
  // 0.8 * 1.0 + 0.6 * 0.5
  CHECK(corrupt(scalar(1.0), 0.64, scalar(0.5))[0] == doctest::Approx(1.1).epsilon(1e-15));
  const auto s = build_schedule(10);
  CHECK(q_sample(scalar(2.0), 0, scalar(5.0), s)[0] == 2.0);
}

TEST_CASE("q_sample and posterior_step reject out-of-range steps") {
  const auto s = build_schedule(10);
  CHECK_THROWS_AS(q_sample(scalar(1.0), 11, scalar(0.0), s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(scalar(1.0), -1, scalar(0.0), s), std::out_of_range);
  CHECK_THROWS_AS(posterior_step(scalar(1.0), scalar(1.0), 0, scalar(0.0), s), std::out_of_range);
  CHECK_THROWS_AS(posterior_step(scalar(1.0), scalar(1.0), 11, scalar(0.0), s), std::out_of_range);
  CHECK_THROWS_AS(q_sample(Eigen::VectorXd::Zero(2), 3, scalar(0.0), s), std::invalid_argument);
}

TEST_CASE("posterior step at t = 1 ignores the noise") {
  const auto s = build_schedule(10);
  const auto a = posterior_step(scalar(0.3), scalar(-0.2), 1, scalar(5.0), s);
  const auto b = posterior_step(scalar(0.3), scalar(-0.2), 1, scalar(-7.0), s);
  CHECK(a[0] == b[0]);
}

TEST_CASE("posterior step is linear when x0_hat equals x_t and noise is zero") {
  const auto s = build_schedule(10);
  const auto out = posterior_step(scalar(0.9), scalar(0.9), 4, scalar(0.0), s);
  CHECK(out[0] == doctest::Approx((s.posterior_coef_x0[4] + s.posterior_coef_xt[4]) * 0.9));
}

TEST_CASE("posterior coefficients match a re-derivation from beta") {
  const auto s = build_schedule(10);
  const int t = 5;
  Eigen::VectorXd beta(11);
  beta[0] = 0.0;
  for (int i = 1; i <= 10; ++i) beta[i] = 1e-4 + (2e-2 - 1e-4) * (i - 1) / 9.0;
  double ab = 1.0, ab_prev = 1.0;
  for (int i = 1; i <= t; ++i) {
    ab_prev = ab;
    ab *= 1.0 - beta[i];
  }
  const double c0 = std::sqrt(ab_prev) * beta[t] / (1.0 - ab);
  const double ct = std::sqrt(1.0 - beta[t]) * (1.0 - ab_prev) / (1.0 - ab);
  CHECK(s.posterior_coef_x0[t] == doctest::Approx(c0).epsilon(1e-12));
  CHECK(s.posterior_coef_xt[t] == doctest::Approx(ct).epsilon(1e-12));
  // Same quantities evaluated separately with numpy.
  CHECK(s.posterior_coef_x0[t] == doctest::Approx(0.396019744892581).epsilon(1e-12));
  CHECK(s.posterior_coef_xt[t] == doctest::Approx(0.6039648663709842).epsilon(1e-12));
  CHECK(s.posterior_variance[t] == doctest::Approx(0.005426453008063376).epsilon(1e-12));

  Rng rng(3);
  const Eigen::VectorXd xt = normals(4, rng), xh = normals(4, rng), z = normals(4, rng);
  const Eigen::VectorXd out = posterior_step(xt, xh, t, z, s);
  const Eigen::VectorXd expect = c0 * xh + ct * xt + std::sqrt(s.posterior_variance[t]) * z;
  CHECK((out - expect).norm() < 1e-12);
}

TEST_CASE("stepwise corruption matches the closed-form marginal") {
  const auto s = build_schedule(1000);
  const int t = 60;
  const Eigen::Index n = 100000;
  Rng rng(17);
  Eigen::VectorXd x = Eigen::VectorXd::Constant(n, 1.5);
  for (int k = 1; k <= t; ++k) x = q_step(x, k, normals(n, rng), s);
  const double mean_expected = std::sqrt(s.alpha_bar[t]) * 1.5;
  const double var_expected = 1.0 - s.alpha_bar[t];
  CHECK(std::abs(x.mean() - mean_expected) <= 0.01 * mean_expected);
  CHECK(std::abs(variance(x) - var_expected) <= 0.01 * var_expected);

  const Eigen::VectorXd closed = q_sample(Eigen::VectorXd::Constant(n, 1.5), t, normals(n, rng), s);
  CHECK(std::abs(closed.mean() - mean_expected) <= 0.01 * mean_expected);
  CHECK(std::abs(variance(closed) - var_expected) <= 0.01 * var_expected);
}

TEST_CASE("terminal step is unit-variance noise for normalized data") {
  const auto s = build_schedule(1000);
  Rng rng(23);
  const Eigen::Index n = 100000;
  const Eigen::VectorXd x0 = normals(n, rng);
  const Eigen::VectorXd xT = q_sample(x0, 1000, normals(n, rng), s);
  const double v = variance(xT);
  CHECK(v >= 0.98);
  CHECK(v <= 1.02);
}

TEST_CASE("reverse chain with a perfect x0 oracle recovers the data") {
  const auto s = build_schedule(100);
  const Eigen::Index chains = 1000;
  Rng rng(29);
  const Eigen::VectorXd target = Eigen::VectorXd::Constant(chains, -0.4);
  Eigen::VectorXd x = normals(chains, rng);
  for (int t = s.steps; t >= 1; --t) x = posterior_step(x, target, t, normals(chains, rng), s);
  const double se = std::sqrt(variance(x) / chains);
  CHECK(std::abs(x.mean() - (-0.4)) <= 3.0 * se + 1e-12);
}
