#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "percdl/common.hpp"

namespace percdl {

// Hyper-parameters of the time-warp family: depth D (composed displacement
// layers, global dilation) and width W (sine-basis truncation, local
// dilation), plus the interpolation bandwidth sigma in normalized time.
struct WarpConfig {
  int depth = 3;
  int width = 10;
  double sigma = 0.002;
  double theta_margin = 1e-3;

  void validate() const {
    if (depth < 1 || width < 1) throw InvalidInput("WarpConfig: depth and width must be >= 1");
    if (sigma <= 0) throw InvalidInput("WarpConfig: sigma must be positive");
    if (theta_margin < 0 || theta_margin >= 1)
      throw InvalidInput("WarpConfig: theta_margin must lie in [0,1)");
  }
};

// The L x L linear map realizing the warp on a sampled atom. Row sums are 1,
// so constant signals are preserved exactly.
struct WarpOperator {
  Mat matrix;  // L x L
  Mat params;  // D x W source parameters
};

// b_w(t) = sin(w pi t) / (w pi); normalized so |b_w'| <= 1.
inline double basis_eval(int w, double t) {
  if (w < 1) throw DomainError("basis_eval: w must be >= 1");
  if (t < 0.0 || t > 1.0) throw DomainError("basis_eval: t outside [0,1]");
  const double wp = static_cast<double>(w) * std::numbers::pi;
  return std::sin(wp * t) / wp;
}

inline bool in_theta(const Mat& a, double tol = 1e-9) {
  for (Index d = 0; d < a.rows(); ++d) {
    if (a.row(d).template lpNorm<1>() > 1.0 + tol) return false;
  }
  return true;
}

namespace detail {

// One displacement layer: t + sum_w a_w b_w(t), clamped to [0,1] against
// floating-point drift at the endpoints.
inline double psi_layer(const Mat& a, Index d, double t) {
  double v = t;
  const double pi = std::numbers::pi;
  for (Index w = 0; w < a.cols(); ++w) {
    const double wp = static_cast<double>(w + 1) * pi;
    v += a(d, w) * std::sin(wp * t) / wp;
  }
  return std::min(1.0, std::max(0.0, v));
}

inline double psi_layer_deriv(const Mat& a, Index d, double t) {
  double v = 1.0;
  const double pi = std::numbers::pi;
  for (Index w = 0; w < a.cols(); ++w) {
    v += a(d, w) * std::cos(static_cast<double>(w + 1) * pi * t);
  }
  return v;
}

}  // namespace detail

// psi_a(t): depth-D composition of identity-plus-sine displacements. Monotone
// on [0,1] with pinned endpoints for any a in Theta.
inline double psi_eval(const Mat& a, double t) {
  if (t < 0.0 || t > 1.0) throw DomainError("psi_eval: t outside [0,1]");
  if (!in_theta(a)) throw DomainError("psi_eval: parameters outside Theta");
  double v = t;
  for (Index d = 0; d < a.rows(); ++d) v = detail::psi_layer(a, d, v);
  return v;
}

// psi_a(t) together with d psi_a(t) / d a^d_w (chain rule through the layer
// composition). No Theta check: callers project after every gradient step.
inline double psi_eval_grad(const Mat& a, double t, Mat& grad) {
  const Index D = a.rows();
  const Index W = a.cols();
  grad.setZero(D, W);
  std::vector<double> stage(static_cast<std::size_t>(D) + 1);
  stage[0] = t;
  for (Index d = 0; d < D; ++d)
    stage[static_cast<std::size_t>(d) + 1] = detail::psi_layer(a, d, stage[static_cast<std::size_t>(d)]);
  // suffix[d] = prod_{e > d} psi_e'(stage[e-1])
  double suffix = 1.0;
  const double pi = std::numbers::pi;
  for (Index d = D - 1; d >= 0; --d) {
    const double s = stage[static_cast<std::size_t>(d)];
    for (Index w = 0; w < W; ++w) {
      const double wp = static_cast<double>(w + 1) * pi;
      grad(d, w) = suffix * std::sin(wp * s) / wp;
    }
    suffix *= detail::psi_layer_deriv(a, d, s);
  }
  return stage[static_cast<std::size_t>(D)];
}

// Smooth-interpolation weights w_l(sigma, t) over the nodes t_l = l/L,
// l in [1, L]. Stabilized softmax; as sigma -> 0 the mass concentrates on the
// nearest node.
inline Vec interp_weights(double sigma, double t, Index L) {
  if (sigma <= 0) throw DomainError("interp_weights: sigma must be positive");
  Vec c(L);
  for (Index l = 0; l < L; ++l) c(l) = t - static_cast<double>(l + 1) / static_cast<double>(L);
  const double m = c.array().square().minCoeff();
  Vec w(L);
  double total = 0.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Index l = 0; l < L; ++l) {
    w(l) = std::exp(-(c(l) * c(l) - m) * inv);
    total += w(l);
  }
  w /= total;
  return w;
}

namespace detail {

struct InterpRow {
  Vec weight;  // L
  Vec offset;  // c_l(t) = t - t_l
};

inline InterpRow interp_row(double sigma, double t, Index L) {
  InterpRow row;
  row.offset.resize(L);
  for (Index l = 0; l < L; ++l)
    row.offset(l) = t - static_cast<double>(l + 1) / static_cast<double>(L);
  const double m = row.offset.array().square().minCoeff();
  row.weight.resize(L);
  double total = 0.0;
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (Index l = 0; l < L; ++l) {
    row.weight(l) = std::exp(-(row.offset(l) * row.offset(l) - m) * inv);
    total += row.weight(l);
  }
  row.weight /= total;
  return row;
}

// Fills one row of the warp matrix: the interpolated linear term
// sum_l w_l [phi_l + c_l (phi_{l+1} - phi_l)] expressed as coefficients on
// phi, with the boundary clamp phi_{L+1} := phi_L.
inline void fill_matrix_row(const InterpRow& row, Eigen::Ref<Eigen::RowVectorXd> out) {
  const Index L = row.weight.size();
  out.setZero();
  for (Index l = 0; l < L; ++l) {
    const double w = row.weight(l);
    const double c = row.offset(l);
    if (l + 1 < L) {
      out(l) += w * (1.0 - c);
      out(l + 1) += w * c;
    } else {
      out(l) += w;  // clamped: the l = L linear term collapses onto phi_L
    }
  }
}

}  // namespace detail

// Interpolation matrix for arbitrary query times (one row per query). Used by
// the warp operator (queries psi_a(t_i)) and by atom recentering (queries from
// a mean warp evaluated on the grid).
inline Mat build_interp_matrix(const Vec& queries, double sigma, Index L) {
  if (sigma <= 0) throw DomainError("build_interp_matrix: sigma must be positive");
  Mat T(queries.size(), L);
  for (Index i = 0; i < queries.size(); ++i) {
    const auto row = detail::interp_row(sigma, queries(i), L);
    detail::fill_matrix_row(row, T.row(i));
  }
  return T;
}

inline WarpOperator build_warp_matrix(const Mat& a, const WarpConfig& cfg, Index L) {
  cfg.validate();
  if (!in_theta(a)) throw DomainError("build_warp_matrix: parameters outside Theta");
  Vec queries(L);
  for (Index i = 0; i < L; ++i)
    queries(i) = psi_eval(a, static_cast<double>(i + 1) / static_cast<double>(L));
  return WarpOperator{build_interp_matrix(queries, cfg.sigma, L), a};
}

// Matrix-free application of the warp operator; identical arithmetic to
// multiplying by build_warp_matrix(a).matrix row by row.
inline Mat apply_timewarp(const Mat& phi, const Mat& a, const WarpConfig& cfg) {
  cfg.validate();
  if (!in_theta(a)) throw DomainError("apply_timewarp: parameters outside Theta");
  const Index L = phi.rows();
  const Index P = phi.cols();
  Mat out(L, P);
  Eigen::RowVectorXd coef(L);
  for (Index i = 0; i < L; ++i) {
    const double u = psi_eval(a, static_cast<double>(i + 1) / static_cast<double>(L));
    const auto row = detail::interp_row(cfg.sigma, u, L);
    detail::fill_matrix_row(row, coef);
    out.row(i) = coef * phi;
  }
  return out;
}

// Euclidean projection of each depth row onto the l1 ball of radius
// 1 - margin (sort-and-threshold).
inline Mat project_theta(Mat a, double margin) {
  if (margin < 0 || margin >= 1) throw InvalidInput("project_theta: margin must lie in [0,1)");
  const double radius = 1.0 - margin;
  for (Index d = 0; d < a.rows(); ++d) {
    const double l1 = a.row(d).template lpNorm<1>();
    if (l1 <= radius) continue;
    std::vector<double> mag(static_cast<std::size_t>(a.cols()));
    for (Index w = 0; w < a.cols(); ++w) mag[static_cast<std::size_t>(w)] = std::abs(a(d, w));
    std::sort(mag.begin(), mag.end(), std::greater<double>());
    double cumsum = 0.0;
    double theta = 0.0;
    for (std::size_t j = 0; j < mag.size(); ++j) {
      cumsum += mag[j];
      const double candidate = (cumsum - radius) / static_cast<double>(j + 1);
      if (mag[j] - candidate > 0) theta = candidate;
    }
    for (Index w = 0; w < a.cols(); ++w) {
      const double m = std::abs(a(d, w)) - theta;
      a(d, w) = m > 0 ? (a(d, w) > 0 ? m : -m) : 0.0;
    }
  }
  return a;
}

// Warp application with everything the chain rule needs: the output, its
// derivative with respect to each row's query time, and d psi(t_i) / d a.
struct WarpApply {
  Mat out;      // L x P : T phi
  Mat dout_du;  // L x P : d out_i / d u_i
  Mat du_da;    // L x (D*W), row i holds d u_i / d a flattened as d*W + w
};

inline WarpApply apply_timewarp_with_grad(const Mat& phi, const Mat& a, const WarpConfig& cfg) {
  const Index L = phi.rows();
  const Index P = phi.cols();
  const Index D = a.rows();
  const Index W = a.cols();
  WarpApply res;
  res.out.resize(L, P);
  res.dout_du.resize(L, P);
  res.du_da.resize(L, D * W);
  Mat psi_grad;
  const double inv = 1.0 / (cfg.sigma * cfg.sigma);
  for (Index i = 0; i < L; ++i) {
    const double t = static_cast<double>(i + 1) / static_cast<double>(L);
    const double u = psi_eval_grad(a, t, psi_grad);
    for (Index d = 0; d < D; ++d)
      for (Index w = 0; w < W; ++w) res.du_da(i, d * W + w) = psi_grad(d, w);

    const auto row = detail::interp_row(cfg.sigma, u, L);
    const double mu = row.weight.dot(row.offset);
    res.out.row(i).setZero();
    res.dout_du.row(i).setZero();
    for (Index l = 0; l < L; ++l) {
      const double w = row.weight(l);
      const double c = row.offset(l);
      const double dw = w * (mu - c) * inv;
      if (l + 1 < L) {
        const auto diff = phi.row(l + 1) - phi.row(l);
        res.out.row(i) += w * (phi.row(l) + c * diff);
        res.dout_du.row(i) += dw * (phi.row(l) + c * diff) + w * diff;
      } else {
        res.out.row(i) += w * phi.row(l);
        res.dout_du.row(i) += dw * phi.row(l);
      }
    }
  }
  return res;
}

// Gradient of || target - L(a) phi ||_2^2 with respect to a, via the chain
// rule through the warp composition and the interpolation weights.
inline Mat grad_warp_params(const Mat& phi, const Mat& a, const Mat& target, const WarpConfig& cfg) {
  cfg.validate();
  const Index D = a.rows();
  const Index W = a.cols();
  const WarpApply wa = apply_timewarp_with_grad(phi, a, cfg);
  Mat grad = Mat::Zero(D, W);
  for (Index i = 0; i < phi.rows(); ++i) {
    const double r = 2.0 * (wa.out.row(i) - target.row(i)).dot(wa.dout_du.row(i));
    for (Index d = 0; d < D; ++d)
      for (Index w = 0; w < W; ++w) grad(d, w) += r * wa.du_da(i, d * W + w);
  }
  return grad;
}

}  // namespace percdl
