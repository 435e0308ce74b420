#pragma once

#include <string>
#include <vector>

#include <Eigen/SVD>

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/warp.hpp"

namespace percdl {

enum class TransformType { identity, free_atoms, timewarp, rotation };

inline std::string to_string(TransformType t) {
  switch (t) {
    case TransformType::identity: return "identity";
    case TransformType::free_atoms: return "free";
    case TransformType::timewarp: return "timewarp";
    case TransformType::rotation: return "rotation";
  }
  return "unknown";
}

inline TransformType transform_type_from_string(const std::string& s) {
  if (s == "identity") return TransformType::identity;
  if (s == "free") return TransformType::free_atoms;
  if (s == "timewarp") return TransformType::timewarp;
  if (s == "rotation") return TransformType::rotation;
  throw InvalidInput("unknown transform kind: " + s);
}

// The transformation-function family f(phi, a): identity reproduces PopCDL,
// free reproduces IndCDL, timewarp and rotation are the structured
// personalizations.
struct TransformKind {
  TransformType type = TransformType::identity;
  WarpConfig warp;  // only meaningful for timewarp

  static TransformKind identity() { return {}; }
  static TransformKind free_atoms() { return {TransformType::free_atoms, {}}; }
  static TransformKind timewarp(const WarpConfig& cfg) { return {TransformType::timewarp, cfg}; }
  static TransformKind rotation() { return {TransformType::rotation, {}}; }

  // Parameter block shape per (series, atom).
  std::pair<Index, Index> param_shape(Index L, Index P) const {
    switch (type) {
      case TransformType::identity: return {0, 0};
      case TransformType::free_atoms: return {L, P};
      case TransformType::timewarp: return {warp.depth, warp.width};
      case TransformType::rotation: return {P, P};
    }
    return {0, 0};
  }
};

struct RotationParam {
  Mat orthogonal;  // P x P, O^T O = I
  bool degenerate = false;
};

inline constexpr double kOrthogonalityTol = 1e-9;

inline bool is_orthogonal(const Mat& o, double tol = kOrthogonalityTol) {
  if (o.rows() != o.cols()) return false;
  return (o.transpose() * o - Mat::Identity(o.rows(), o.cols())).norm() <= tol;
}

// Applies O to every time step's channel vector: row t becomes (O phi_t)^T.
inline Mat apply_rotation(const Mat& phi, const Mat& o) {
  if (!is_orthogonal(o)) throw DomainError("apply_rotation: matrix is not orthogonal");
  return phi * o.transpose();
}

inline Mat apply_transform(const TransformKind& kind, const Mat& phi, const Mat& a) {
  switch (kind.type) {
    case TransformType::identity:
      return phi;
    case TransformType::free_atoms:
      if (a.rows() != phi.rows() || a.cols() != phi.cols())
        throw InvalidInput("apply_transform: free parameter block shape mismatch");
      return a;
    case TransformType::timewarp:
      if (a.rows() != kind.warp.depth || a.cols() != kind.warp.width)
        throw InvalidInput("apply_transform: warp parameter shape mismatch");
      return apply_timewarp(phi, a, kind.warp);
    case TransformType::rotation:
      if (a.rows() != phi.cols() || a.cols() != phi.cols())
        throw InvalidInput("apply_transform: rotation parameter shape mismatch");
      return apply_rotation(phi, a);
  }
  throw InvalidInput("apply_transform: unknown kind");
}

// Closed-form orthogonal fit: the O in O_P minimizing
// sum_i || X_i - (O applied time-wise to phi) ||^2 is V U^T, where the
// time-summed P x P cross matrix (1/m) sum_i phi^T X_i = U S V^T. A
// rank-deficient cross matrix still yields a valid O but is flagged: any
// SVD-compatible completion is optimal there.
inline RotationParam rotation_fit(const std::vector<Mat>& segments, const Mat& phi,
                                  bool proper_rotation = false) {
  if (segments.empty()) throw InvalidInput("rotation_fit: no segments");
  if (!(phi.norm() > 0)) throw DomainError("rotation_fit: zero atom");
  const Index P = phi.cols();
  Mat cross = Mat::Zero(P, P);
  for (const Mat& x : segments) {
    if (x.rows() != phi.rows() || x.cols() != P)
      throw InvalidInput("rotation_fit: segment shape mismatch");
    cross += phi.transpose() * x;
  }
  cross /= static_cast<double>(segments.size());

  Eigen::JacobiSVD<Mat> svd(cross, Eigen::ComputeFullU | Eigen::ComputeFullV);
  RotationParam res;
  const auto& sv = svd.singularValues();
  res.degenerate = sv(P - 1) <= 1e-12 * std::max(1.0, sv(0));
  Mat v = svd.matrixV();
  if (proper_rotation) {
    const double det = (svd.matrixV() * svd.matrixU().transpose()).determinant();
    if (det < 0) v.col(P - 1) *= -1.0;
  }
  res.orthogonal = v * svd.matrixU().transpose();
  return res;
}

}  // namespace percdl
