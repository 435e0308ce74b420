#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <numbers>
#include <random>

#include "percdl/warp.hpp"

using namespace percdl;

namespace {

Mat random_theta(Index D, Index W, std::mt19937_64& rng, double margin = 1e-3) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Mat a(D, W);
  for (Index d = 0; d < D; ++d)
    for (Index w = 0; w < W; ++w) a(d, w) = unit(rng);
  return project_theta(a, margin);
}

Mat smooth_atom(Index L) {
  Mat phi(L, 1);
  for (Index i = 0; i < L; ++i) {
    const double t = static_cast<double>(i + 1) / static_cast<double>(L);
    phi(i, 0) = std::sin(2.0 * std::numbers::pi * t) + 0.3 * std::cos(5.0 * t);
  }
  return phi;
}

// Direct per-sample evaluation of the warped-interpolation definition,
// written independently of the library's row/matrix machinery.
Mat direct_warp_eval(const Mat& phi, const Mat& a, double sigma) {
  const Index L = phi.rows();
  Mat out(L, phi.cols());
  for (Index i = 1; i <= L; ++i) {
    double u = static_cast<double>(i) / static_cast<double>(L);
    for (Index d = 0; d < a.rows(); ++d) {
      double v = u;
      for (Index w = 1; w <= a.cols(); ++w)
        v += a(d, w - 1) * std::sin(w * std::numbers::pi * u) / (w * std::numbers::pi);
      u = v;
    }
    double denom = 0.0;
    Eigen::RowVectorXd value = Eigen::RowVectorXd::Zero(phi.cols());
    for (Index l = 1; l <= L; ++l) {
      const double c = u - static_cast<double>(l) / static_cast<double>(L);
      const double w = std::exp(-c * c / (2.0 * sigma * sigma));
      denom += w;
      const Eigen::RowVectorXd next = (l < L) ? phi.row(l) : phi.row(L - 1);
      value += w * (phi.row(l - 1) + c * (next - phi.row(l - 1)));
    }
    out.row(i - 1) = value / denom;
  }
  return out;
}

}  // namespace

TEST_CASE("basis_eval boundary and closed-form values") {
  REQUIRE(std::abs(basis_eval(1, 0.0)) < 1e-12);
  REQUIRE(std::abs(basis_eval(1, 1.0)) < 1e-12);
  REQUIRE(basis_eval(1, 0.5) == Catch::Approx(1.0 / std::numbers::pi).epsilon(1e-12));
  REQUIRE(basis_eval(3, 0.5) == Catch::Approx(std::sin(1.5 * std::numbers::pi) /
                                              (3.0 * std::numbers::pi)).epsilon(1e-12));
  REQUIRE_THROWS_AS(basis_eval(1, -0.1), DomainError);
  REQUIRE_THROWS_AS(basis_eval(1, 1.1), DomainError);
  REQUIRE_THROWS_AS(basis_eval(0, 0.5), DomainError);
}

TEST_CASE("psi_eval identity warp and closed-form case") {
  const Mat zero = Mat::Zero(3, 5);
  for (double t : {0.0, 0.25, 0.7, 1.0}) REQUIRE(psi_eval(zero, t) == t);

  Mat a(1, 1);
  a << 0.5;
  const double expected = 0.5 + 0.5 * std::sin(std::numbers::pi / 2.0) / std::numbers::pi;
  REQUIRE(psi_eval(a, 0.5) == Catch::Approx(expected).epsilon(1e-12));
}

TEST_CASE("psi_eval rejects parameters outside Theta") {
  Mat a(2, 2);
  a << 0.9, 0.4, 0.0, 0.0;
  REQUIRE_THROWS_AS(psi_eval(a, 0.5), DomainError);
}

TEST_CASE("psi endpoint pinning and monotonicity on random Theta draws") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Mat a = random_theta(3, 10, rng);
    REQUIRE(std::abs(psi_eval(a, 0.0)) <= 1e-12);
    REQUIRE(std::abs(psi_eval(a, 1.0) - 1.0) <= 1e-12);
    double prev = psi_eval(a, 0.0);
    for (int g = 1; g <= 1000; ++g) {
      const double value = psi_eval(a, g / 1000.0);
      REQUIRE(value > prev);
      prev = value;
    }
  }
}

TEST_CASE("interp_weights normalization, concentration and symmetry") {
  REQUIRE_THROWS_AS(interp_weights(0.0, 0.5, 10), DomainError);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int trial = 0; trial < 25; ++trial) {
    const Vec w = interp_weights(0.05, unif(rng), 17);
    REQUIRE(w.sum() == Catch::Approx(1.0).epsilon(1e-12));
    REQUIRE(w.minCoeff() >= 0.0);
  }

  // t exactly on node 3/10 with tiny sigma: all weight on that node.
  const Vec w = interp_weights(1e-4, 0.3, 10);
  REQUIRE(w(2) == Catch::Approx(1.0).epsilon(1e-9));
  REQUIRE(w.sum() == Catch::Approx(1.0).epsilon(1e-12));

  // Midway between nodes 4/10 and 5/10: the two nearest weights are equal.
  const Vec mid = interp_weights(0.03, 0.45, 10);
  REQUIRE(mid(3) == Catch::Approx(mid(4)).epsilon(1e-9));
}

TEST_CASE("build_warp_matrix preserves constants for any Theta parameters") {
  std::mt19937_64 rng(5);
  WarpConfig cfg{3, 10, 0.002, 1e-3};
  for (int trial = 0; trial < 20; ++trial) {
    const Mat a = random_theta(cfg.depth, cfg.width, rng);
    const WarpOperator op = build_warp_matrix(a, cfg, 40);
    const Mat constant = Mat::Constant(40, 2, 3.25);
    REQUIRE(((op.matrix * constant) - constant).norm() < 1e-9);
    REQUIRE(op.matrix.allFinite());
  }
}

TEST_CASE("zero warp is near identity on smooth atoms") {
  WarpConfig cfg{1, 1, 0.002, 0.0};
  const Index L = 100;
  const Mat phi = smooth_atom(L);
  const Mat zero = Mat::Zero(1, 1);
  const Mat out = apply_timewarp(phi, zero, cfg);
  REQUIRE((out - phi).norm() / phi.norm() < 1e-3);
}

TEST_CASE("warp matches independent direct evaluation") {
  WarpConfig cfg{1, 1, 0.01, 0.0};
  Mat a(1, 1);
  a << 0.3;
  Mat phi(4, 1);
  phi << 0.0, 1.0, 2.0, 3.0;
  const Mat expected = direct_warp_eval(phi, a, cfg.sigma);
  const Mat got = build_warp_matrix(a, cfg, 4).matrix * phi;
  REQUIRE((got - expected).norm() < 1e-12);

  // and a denser random case
  std::mt19937_64 rng(17);
  WarpConfig cfg2{3, 10, 0.004, 1e-3};
  const Mat a2 = random_theta(3, 10, rng);
  const Mat phi2 = smooth_atom(50);
  REQUIRE((apply_timewarp(phi2, a2, cfg2) - direct_warp_eval(phi2, a2, cfg2.sigma)).norm() < 1e-10);
}

TEST_CASE("matrix-free and matrix paths agree") {
  std::mt19937_64 rng(23);
  WarpConfig cfg{2, 6, 0.005, 1e-3};
  for (int trial = 0; trial < 10; ++trial) {
    const Mat a = random_theta(2, 6, rng);
    Mat phi(30, 2);
    std::normal_distribution<double> g;
    for (Index i = 0; i < phi.rows(); ++i)
      for (Index j = 0; j < phi.cols(); ++j) phi(i, j) = g(rng);
    const Mat via_matrix = build_warp_matrix(a, cfg, 30).matrix * phi;
    const Mat direct = apply_timewarp(phi, a, cfg);
    REQUIRE((via_matrix - direct).norm() < 1e-12);
  }
}

TEST_CASE("warp application is linear in the atom") {
  std::mt19937_64 rng(29);
  WarpConfig cfg{3, 10, 0.002, 1e-3};
  const Mat a = random_theta(3, 10, rng);
  const Mat phi1 = smooth_atom(40);
  Mat phi2 = smooth_atom(40);
  phi2.array() *= -0.7;
  phi2.array() += 0.2;
  const double alpha = 1.7, beta = -0.4;
  const Mat lhs = apply_timewarp(alpha * phi1 + beta * phi2, a, cfg);
  const Mat rhs = alpha * apply_timewarp(phi1, a, cfg) + beta * apply_timewarp(phi2, a, cfg);
  REQUIRE((lhs - rhs).norm() < 1e-12);
}

TEST_CASE("project_theta matches hand-computed projections") {
  Mat row(1, 2);
  row << 0.3, 0.2;
  REQUIRE((project_theta(row, 0.0) - row).norm() == 0.0);

  row << 2.0, 0.0;
  Mat expected(1, 2);
  expected << 1.0, 0.0;
  REQUIRE((project_theta(row, 0.0) - expected).norm() < 1e-12);

  row << 1.0, 1.0;
  expected << 0.5, 0.5;
  REQUIRE((project_theta(row, 0.0) - expected).norm() < 1e-12);
}

TEST_CASE("project_theta is idempotent, feasible and firmly nonexpansive") {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> spread(-3.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    Mat a(2, 5);
    for (Index d = 0; d < a.rows(); ++d)
      for (Index w = 0; w < a.cols(); ++w) a(d, w) = spread(rng);
    const double margin = 1e-3;
    const Mat p = project_theta(a, margin);
    REQUIRE(in_theta(p));
    for (Index d = 0; d < p.rows(); ++d)
      REQUIRE(p.row(d).template lpNorm<1>() <= 1.0 - margin + 1e-12);
    REQUIRE((project_theta(p, margin) - p).norm() < 1e-12);

    // The projection never moves away from any feasible point.
    const Mat feasible = random_theta(2, 5, rng, margin);
    REQUIRE((p - feasible).norm() <= (a - feasible).norm() + 1e-12);
  }
}

TEST_CASE("grad_warp_params vanishes at the minimum and for constant atoms") {
  std::mt19937_64 rng(37);
  WarpConfig cfg{3, 10, 0.004, 1e-3};
  const Mat a = random_theta(3, 10, rng);
  const Mat phi = smooth_atom(30);
  const Mat target = apply_timewarp(phi, a, cfg);
  REQUIRE(grad_warp_params(phi, a, target, cfg).norm() < 1e-10);

  const Mat constant = Mat::Constant(30, 1, 1.3);
  const Mat other = random_theta(3, 10, rng);
  REQUIRE(grad_warp_params(constant, other, Mat::Zero(30, 1), cfg).norm() < 1e-9);
}

TEST_CASE("grad_warp_params agrees with central finite differences") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> g;
  const double h = 1e-5;
  for (int trial = 0; trial < 100; ++trial) {
    const Index D = 1 + static_cast<Index>(rng() % 3);
    const Index W = 1 + static_cast<Index>(rng() % 6);
    const Index L = 10 + static_cast<Index>(rng() % 30);
    const Index P = 1 + static_cast<Index>(rng() % 2);
    WarpConfig cfg{static_cast<int>(D), static_cast<int>(W), 0.01, 1e-3};
    Mat a = random_theta(D, W, rng);
    a *= 0.8;  // keep well inside Theta so FD probes stay feasible
    Mat phi(L, P), target(L, P);
    for (Index i = 0; i < L; ++i)
      for (Index p = 0; p < P; ++p) {
        phi(i, p) = g(rng);
        target(i, p) = g(rng);
      }
    const Mat analytic = grad_warp_params(phi, a, target, cfg);
    Mat fd(D, W);
    for (Index d = 0; d < D; ++d)
      for (Index w = 0; w < W; ++w) {
        Mat ap = a, am = a;
        ap(d, w) += h;
        am(d, w) -= h;
        const double fp = (target - apply_timewarp(phi, ap, cfg)).squaredNorm();
        const double fm = (target - apply_timewarp(phi, am, cfg)).squaredNorm();
        fd(d, w) = (fp - fm) / (2.0 * h);
      }
    const double scale = std::max(fd.template lpNorm<Eigen::Infinity>(), 1e-12);
    REQUIRE((analytic - fd).template lpNorm<Eigen::Infinity>() / scale < 1e-4);
  }
}
