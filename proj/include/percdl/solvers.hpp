#pragma once

#include <algorithm>
#include <cassert>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Eigenvalues>

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/transforms.hpp"
#include "percdl/warp.hpp"

namespace percdl {

struct FitResult {
  Dictionary dictionary;
  ActivationSet activations;
  PersonalizationMatrix personalization;
  std::vector<double> objective_trace;
  double wall_time_seconds = 0.0;
  std::vector<std::string> warnings;
};

// ---------------------------------------------------------------------------
// Convolutional sparse coding: exact l0 solver under the no-overlap
// assumption. Optimal amplitudes are clamped inner products; a dynamic
// program over window end positions selects the placement set maximizing the
// total gain sum(z^2 - lambda). Ties resolve to fewer activations, earlier
// positions, lower atom index.
// ---------------------------------------------------------------------------
inline std::vector<std::vector<Activation>> csc_solve(const Mat& x,
                                                      const std::vector<Mat>& atoms,
                                                      double lambda) {
  if (lambda < 0) throw InvalidInput("csc_solve: lambda must be >= 0");
  if (atoms.empty()) throw InvalidInput("csc_solve: empty dictionary");
  const Index N = x.rows();
  const Index L = atoms.front().rows();
  const Index K = static_cast<Index>(atoms.size());
  if (L > N) throw InvalidInput("csc_solve: atom longer than series");
#ifndef NDEBUG
  for (const Mat& a : atoms) assert(std::abs(a.norm() - 1.0) < 1e-6);
#endif

  const Index positions = N - L + 1;
  // Sliding inner products; direct products keep the cost at O(K L N P),
  // within the near-linear contract for short atoms.
  Mat amp(positions, K);
  for (Index k = 0; k < K; ++k) {
    const Mat& phi = atoms[static_cast<std::size_t>(k)];
    for (Index n = 0; n < positions; ++n) {
      double ip = 0.0;
      for (Index l = 0; l < L; ++l) ip += x.row(n + l).dot(phi.row(l));
      amp(n, k) = std::max(0.0, ip);
    }
  }

  // best[m]: maximal gain using windows inside [0, m). choice[m] = atom index
  // of a window [m-L, m), or -1 for "skip". Placement requires a strict
  // improvement, so every emitted activation has gain > 0.
  std::vector<double> best(static_cast<std::size_t>(N) + 1, 0.0);
  std::vector<int> choice(static_cast<std::size_t>(N) + 1, -1);
  for (Index m = L; m <= N; ++m) {
    const Index n = m - L;
    double candidate = best[static_cast<std::size_t>(m - 1)];
    int pick = -1;
    for (Index k = 0; k < K; ++k) {
      const double z = amp(n, k);
      const double gain = z * z - lambda;
      const double value = best[static_cast<std::size_t>(n)] + gain;
      if (value > candidate) {
        candidate = value;
        pick = static_cast<int>(k);
      }
    }
    best[static_cast<std::size_t>(m)] = candidate;
    choice[static_cast<std::size_t>(m)] = pick;
  }

  std::vector<std::vector<Activation>> result(static_cast<std::size_t>(K));
  Index m = N;
  while (m >= L) {
    const int pick = choice[static_cast<std::size_t>(m)];
    if (pick < 0) {
      --m;
    } else {
      const Index n = m - L;
      result[static_cast<std::size_t>(pick)].push_back({n, amp(n, pick)});
      m = n;
    }
  }
  for (auto& list : result) std::reverse(list.begin(), list.end());
  return result;
}

// ---------------------------------------------------------------------------
// Forward model and objective
// ---------------------------------------------------------------------------

// Personalized atoms f(phi_k, a^s_k) for one series.
inline std::vector<Mat> personalized_atoms(const Dictionary& dict,
                                           const std::vector<Mat>& params,
                                           const TransformKind& kind) {
  std::vector<Mat> out;
  out.reserve(dict.atoms.size());
  for (std::size_t k = 0; k < dict.atoms.size(); ++k)
    out.push_back(apply_transform(kind, dict.atoms[k], params[k]));
  return out;
}

// x_hat^s = sum_k z^s_k * f(phi_k, a^s_k) via sparse placement.
inline std::vector<Mat> reconstruct(const ActivationSet& acts,
                                    const std::vector<std::vector<Mat>>& atoms_per_series) {
  check_activation_invariants(acts);
  const Index N = acts.sample_count;
  const Index S = acts.subject_count();
  std::vector<Mat> out;
  out.reserve(static_cast<std::size_t>(S));
  for (Index s = 0; s < S; ++s) {
    const auto& atoms = atoms_per_series[static_cast<std::size_t>(s)];
    const Index P = atoms.empty() ? 1 : atoms.front().cols();
    Mat xhat = Mat::Zero(N, P);
    for (std::size_t k = 0; k < acts.lists[static_cast<std::size_t>(s)].size(); ++k) {
      const Mat& atom = atoms[k];
      for (const Activation& a : acts.lists[static_cast<std::size_t>(s)][k])
        xhat.middleRows(a.position, atom.rows()) += a.amplitude * atom;
    }
    out.push_back(std::move(xhat));
  }
  return out;
}

inline std::vector<std::vector<Mat>> personalized_dictionary(const Dictionary& dict,
                                                             const PersonalizationMatrix& params,
                                                             const TransformKind& kind) {
  std::vector<std::vector<Mat>> out(params.params.size());
  for (std::size_t s = 0; s < params.params.size(); ++s)
    out[s] = personalized_atoms(dict, params.params[s], kind);
  return out;
}

// Value of the personalized objective: sum_s ||x^s - x_hat^s||^2 + lambda |Z|_0.
inline double objective(const TimeSeriesDataset& dataset, const ActivationSet& acts,
                        const Dictionary& dict, const PersonalizationMatrix& params,
                        double lambda, const TransformKind& kind) {
  const auto atoms = personalized_dictionary(dict, params, kind);
  const auto recon = reconstruct(acts, atoms);
  double value = 0.0;
  for (std::size_t s = 0; s < dataset.series.size(); ++s)
    value += (dataset.series[s] - recon[s]).squaredNorm();
  return value + lambda * static_cast<double>(acts.total_count());
}

// ---------------------------------------------------------------------------
// Dictionary updates
// ---------------------------------------------------------------------------

struct DictUpdate {
  Dictionary dictionary;
  std::vector<double> scales;   // c_k, folded into amplitudes by the driver
  std::vector<Index> frozen;    // atoms with no activations this round
  std::vector<Index> singular;  // atoms where the normal system was singular
};

// Extracted segment y^s_k[j] = x^s[position : position + L).
inline Mat segment(const Mat& x, Index position, Index L) { return x.middleRows(position, L); }

inline DictUpdate cdu_update(const TimeSeriesDataset& dataset, const ActivationSet& acts,
                             const Dictionary& current, CduMode mode) {
  const Index K = current.atom_count();
  const Index L = current.atom_length();
  const Index P = current.channel_count();
  DictUpdate upd;
  upd.dictionary = current;
  upd.scales.assign(static_cast<std::size_t>(K), 1.0);
  for (Index k = 0; k < K; ++k) {
    Mat acc = Mat::Zero(L, P);
    double weight = 0.0;  // segment count (barycenter) or sum z^2 (least squares)
    for (std::size_t s = 0; s < dataset.series.size(); ++s) {
      for (const Activation& a : acts.lists[s][static_cast<std::size_t>(k)]) {
        const Mat y = segment(dataset.series[s], a.position, L);
        if (mode == CduMode::barycenter) {
          acc += y;
          weight += 1.0;
        } else {
          acc += a.amplitude * y;
          weight += a.amplitude * a.amplitude;
        }
      }
    }
    if (weight <= 0.0) {
      upd.frozen.push_back(k);
      continue;
    }
    auto [unit, norm] = normalize_atom(Mat(acc / weight));
    upd.dictionary.atoms[static_cast<std::size_t>(k)] = unit;
    upd.scales[static_cast<std::size_t>(k)] = norm;
  }
  return upd;
}

namespace detail {

// Objective sum_j ||y_j - z_j L(a) phi||^2 through the precomputed sums
// ws2 = sum z^2, wy = sum z y, yy = sum ||y||^2.
inline double warp_segments_objective(const Mat& phi, const Mat& a, const WarpConfig& cfg,
                                      double ws2, const Mat& wy, double yy) {
  const Mat out = apply_timewarp(phi, a, cfg);
  return std::max(0.0, yy - 2.0 * (wy.array() * out.array()).sum() + ws2 * out.squaredNorm());
}

inline Mat warp_segments_gradient(const Mat& phi, const Mat& a, const WarpConfig& cfg,
                                  double ws2, const Mat& wy, double yy, double& f_value) {
  const WarpApply wa = apply_timewarp_with_grad(phi, a, cfg);
  f_value = std::max(0.0, yy - 2.0 * (wy.array() * wa.out.array()).sum() + ws2 * wa.out.squaredNorm());
  const Index D = a.rows();
  const Index W = a.cols();
  Mat grad = Mat::Zero(D, W);
  for (Index i = 0; i < phi.rows(); ++i) {
    const double r = 2.0 * (ws2 * wa.out.row(i) - wy.row(i)).dot(wa.dout_du.row(i));
    for (Index d = 0; d < D; ++d)
      for (Index w = 0; w < W; ++w) grad(d, w) += r * wa.du_da(i, d * W + w);
  }
  return grad;
}

// Projected gradient descent on the warp parameters of one (series, atom)
// pair. Polyak stepsize with the objective's lower bound 0, step rejected and
// halved whenever it would increase the objective.
inline Mat ipu_warp_descent(const Mat& phi, Mat a, const WarpConfig& cfg, const FitConfig& fit,
                            double ws2, const Mat& wy, double yy) {
  // The accepted damping factor is carried across iterations so that the
  // rejection loop does not re-discover the same reduction every step.
  double damping = 1.0;
  for (int step = 0; step < fit.ipu_steps; ++step) {
    double f_now = 0.0;
    const Mat grad = warp_segments_gradient(phi, a, cfg, ws2, wy, yy, f_now);
    const double g2 = grad.squaredNorm();
    if (g2 <= 0.0 || f_now <= 0.0) break;
    double eta = fit.ipu_mode == IpuMode::polyak
                     ? damping * fit.ipu_step_scale * f_now / g2
                     : fit.ipu_fixed_step;
    bool accepted = false;
    for (int halving = 0; halving < 40; ++halving) {
      const Mat trial = project_theta(a - eta * grad, cfg.theta_margin);
      const double f_trial = warp_segments_objective(phi, trial, cfg, ws2, wy, yy);
      if (f_trial <= f_now) {
        a = trial;
        accepted = true;
        break;
      }
      eta *= 0.5;
      if (fit.ipu_mode == IpuMode::polyak) damping *= 0.5;
    }
    if (!accepted) break;
    if (fit.ipu_mode == IpuMode::polyak) damping = std::min(1.0, damping * 2.0);
  }
  return a;
}

}  // namespace detail

// Individual-parameter update for one series: refits a^s_k for every atom
// with at least one activation. Time warps run projected gradient descent;
// rotations use the closed-form orthogonal fit; free atoms take their
// weighted barycenter; identity is a no-op.
inline std::vector<Mat> ipu_update(const Mat& x, const std::vector<std::vector<Activation>>& acts,
                                   const Dictionary& dict, std::vector<Mat> params,
                                   const TransformKind& kind, const FitConfig& cfg) {
  if (kind.type == TransformType::identity) return params;
  const Index L = dict.atom_length();
  for (std::size_t k = 0; k < dict.atoms.size(); ++k) {
    const auto& list = acts[k];
    if (list.empty()) continue;
    const Mat& phi = dict.atoms[k];
    switch (kind.type) {
      case TransformType::free_atoms: {
        Mat acc = Mat::Zero(phi.rows(), phi.cols());
        double ws2 = 0.0;
        for (const Activation& a : list) {
          acc += a.amplitude * segment(x, a.position, L);
          ws2 += a.amplitude * a.amplitude;
        }
        if (ws2 > 0) params[k] = acc / ws2;
        break;
      }
      case TransformType::rotation: {
        std::vector<Mat> scaled;
        scaled.reserve(list.size());
        for (const Activation& a : list) scaled.push_back(a.amplitude * segment(x, a.position, L));
        params[k] = rotation_fit(scaled, phi).orthogonal;
        break;
      }
      case TransformType::timewarp: {
        double ws2 = 0.0;
        double yy = 0.0;
        Mat wy = Mat::Zero(phi.rows(), phi.cols());
        for (const Activation& a : list) {
          const Mat y = segment(x, a.position, L);
          ws2 += a.amplitude * a.amplitude;
          yy += y.squaredNorm();
          wy += a.amplitude * y;
        }
        params[k] = detail::ipu_warp_descent(phi, params[k], kind.warp, cfg, ws2, wy, yy);
        break;
      }
      case TransformType::identity:
        break;
    }
  }
  return params;
}

inline constexpr double kPerCduConditionLimit = 1e12;

// Personalized dictionary update: per atom, solves the amplitude-weighted
// normal equations sum z^2 L(a)^T L(a) phi = sum z L(a)^T y channel-by-channel
// (the unit-amplitude case recovers the plain weighted-barycenter formula).
// A near-singular system falls back to one Polyak gradient step on phi.
inline DictUpdate percdu_update(const TimeSeriesDataset& dataset, const ActivationSet& acts,
                                const PersonalizationMatrix& params, const Dictionary& current,
                                const TransformKind& kind, const FitConfig& cfg) {
  if (kind.type == TransformType::identity)
    return cdu_update(dataset, acts, current, CduMode::least_squares);

  const Index K = current.atom_count();
  const Index L = current.atom_length();
  const Index P = current.channel_count();
  DictUpdate upd;
  upd.dictionary = current;
  upd.scales.assign(static_cast<std::size_t>(K), 1.0);

  if (kind.type == TransformType::free_atoms) {
    // f(phi, a) = a: the common atom does not enter the reconstruction. Keep
    // it meaningful as the normalized barycenter of the individual blocks.
    for (Index k = 0; k < K; ++k) {
      Mat acc = Mat::Zero(L, P);
      double used = 0.0;
      for (std::size_t s = 0; s < params.params.size(); ++s) {
        if (acts.lists[s][static_cast<std::size_t>(k)].empty()) continue;
        acc += params.params[s][static_cast<std::size_t>(k)];
        used += 1.0;
      }
      if (used <= 0.0) {
        upd.frozen.push_back(k);
        continue;
      }
      auto [unit, norm] = normalize_atom(Mat(acc / used));
      (void)norm;
      upd.dictionary.atoms[static_cast<std::size_t>(k)] = unit;
      // scale stays 1: amplitudes pair with the free blocks, not with phi.
    }
    return upd;
  }

  for (Index k = 0; k < K; ++k) {
    double ws2_total = 0.0;
    double yy = 0.0;
    Mat rhs = Mat::Zero(L, P);
    Mat normal;
    if (kind.type == TransformType::timewarp) normal = Mat::Zero(L, L);
    for (std::size_t s = 0; s < dataset.series.size(); ++s) {
      const auto& list = acts.lists[s][static_cast<std::size_t>(k)];
      if (list.empty()) continue;
      double ws2 = 0.0;
      Mat wy = Mat::Zero(L, P);
      for (const Activation& a : list) {
        const Mat y = segment(dataset.series[s], a.position, L);
        ws2 += a.amplitude * a.amplitude;
        wy += a.amplitude * y;
        yy += y.squaredNorm();
      }
      ws2_total += ws2;
      const Mat& a_sk = params.params[s][static_cast<std::size_t>(k)];
      if (kind.type == TransformType::timewarp) {
        const Mat T = build_warp_matrix(a_sk, kind.warp, L).matrix;
        normal.noalias() += ws2 * T.transpose() * T;
        rhs.noalias() += T.transpose() * wy;
      } else {  // rotation: L(a)^T acts in channel space
        rhs.noalias() += wy * a_sk;
      }
    }
    if (ws2_total <= 0.0) {
      upd.frozen.push_back(k);
      continue;
    }

    Mat solution;
    if (kind.type == TransformType::rotation) {
      solution = rhs / ws2_total;
    } else {
      Eigen::SelfAdjointEigenSolver<Mat> es(normal);
      const double lo = es.eigenvalues().minCoeff();
      const double hi = es.eigenvalues().maxCoeff();
      if (!(lo > 0.0) || hi / lo > kPerCduConditionLimit) {
        upd.singular.push_back(k);
        // One Polyak step on phi for the quadratic sum ||y - z L phi||^2.
        const Mat& phi = current.atoms[static_cast<std::size_t>(k)];
        const Mat grad = 2.0 * (normal * phi - rhs);
        const double f = std::max(0.0, (phi.transpose() * normal * phi).trace() -
                                           2.0 * (rhs.array() * phi.array()).sum() + yy);
        const double g2 = grad.squaredNorm();
        solution = phi;
        if (g2 > 0.0 && f > 0.0) {
          double eta = f / g2;
          for (int halving = 0; halving < 30; ++halving) {
            const Mat trial = phi - eta * grad;
            const double f_trial = (trial.transpose() * normal * trial).trace() -
                                   2.0 * (rhs.array() * trial.array()).sum() + yy;
            if (f_trial <= f) {
              solution = trial;
              break;
            }
            eta *= 0.5;
          }
        }
      } else {
        solution = es.eigenvectors() *
                   es.eigenvalues().cwiseInverse().asDiagonal() *
                   (es.eigenvectors().transpose() * rhs);
      }
    }
    auto [unit, norm] = normalize_atom(solution);
    upd.dictionary.atoms[static_cast<std::size_t>(k)] = unit;
    upd.scales[static_cast<std::size_t>(k)] = norm;
  }
  return upd;
}

// Smoothing trick: re-sample each atom through the across-individuals mean
// warp evaluated on the sampling grid, then renormalize.
inline DictUpdate recenter_atoms(const Dictionary& dict, const PersonalizationMatrix& params,
                                 const TransformKind& kind) {
  if (kind.type != TransformType::timewarp)
    throw InvalidInput("recenter_atoms: only defined for the timewarp transform");
  const Index K = dict.atom_count();
  const Index L = dict.atom_length();
  const Index S = params.subject_count();
  DictUpdate upd;
  upd.dictionary = dict;
  upd.scales.assign(static_cast<std::size_t>(K), 1.0);
  for (Index k = 0; k < K; ++k) {
    Vec mean_queries = Vec::Zero(L);
    for (Index s = 0; s < S; ++s) {
      const Mat& a = params.params[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)];
      for (Index i = 0; i < L; ++i)
        mean_queries(i) += psi_eval(a, static_cast<double>(i + 1) / static_cast<double>(L));
    }
    mean_queries /= static_cast<double>(S);
    const Mat T = build_interp_matrix(mean_queries, kind.warp.sigma, L);
    auto [unit, norm] = normalize_atom(Mat(T * dict.atoms[static_cast<std::size_t>(k)]));
    upd.dictionary.atoms[static_cast<std::size_t>(k)] = unit;
    upd.scales[static_cast<std::size_t>(k)] = norm;
  }
  return upd;
}

// ---------------------------------------------------------------------------
// Drivers
// ---------------------------------------------------------------------------

enum class InitPolicy { explicit_atoms, first_signal, random_unit };

struct DictInit {
  InitPolicy policy = InitPolicy::first_signal;
  Dictionary atoms;

  static DictInit from_atoms(Dictionary d) { return {InitPolicy::explicit_atoms, std::move(d)}; }
  static DictInit first_signal() { return {InitPolicy::first_signal, {}}; }
  static DictInit random_unit() { return {InitPolicy::random_unit, {}}; }
};

// Resolves the initialization policy into K unit-norm atoms. "first-signal"
// takes the K highest-energy non-overlapping windows of the first series, in
// position order.
inline Dictionary resolve_init(const TimeSeriesDataset& dataset, Index K, Index L,
                               const DictInit& init, std::uint64_t seed) {
  Dictionary dict;
  switch (init.policy) {
    case InitPolicy::explicit_atoms: {
      if (init.atoms.atom_count() != K || init.atoms.atom_length() != L)
        throw InvalidInput("resolve_init: explicit dictionary shape mismatch");
      for (const Mat& atom : init.atoms.atoms) dict.atoms.push_back(normalize_atom(atom).first);
      return dict;
    }
    case InitPolicy::first_signal: {
      const Mat& x = dataset.series.front();
      const Index positions = x.rows() - L + 1;
      if (positions < 1) throw InvalidInput("resolve_init: series shorter than atom");
      std::vector<std::pair<double, Index>> energy;
      energy.reserve(static_cast<std::size_t>(positions));
      for (Index n = 0; n < positions; ++n)
        energy.emplace_back(x.middleRows(n, L).squaredNorm(), n);
      std::sort(energy.begin(), energy.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
      });
      std::vector<Index> picked;
      for (const auto& [e, n] : energy) {
        if (static_cast<Index>(picked.size()) == K) break;
        bool clash = false;
        for (Index p : picked)
          if (std::abs(p - n) < L) clash = true;
        if (!clash) picked.push_back(n);
      }
      if (static_cast<Index>(picked.size()) < K)
        throw InvalidInput("resolve_init: not enough disjoint windows in the first series");
      std::sort(picked.begin(), picked.end());
      for (Index n : picked) dict.atoms.push_back(normalize_atom(Mat(x.middleRows(n, L))).first);
      return dict;
    }
    case InitPolicy::random_unit: {
      const Index P = dataset.channel_count();
      for (Index k = 0; k < K; ++k) {
        std::mt19937_64 rng(mix_seed(seed, 0xA70B0000ULL + static_cast<std::uint64_t>(k)));
        std::normal_distribution<double> gauss(0.0, 1.0);
        Mat atom(L, P);
        for (Index i = 0; i < L; ++i)
          for (Index p = 0; p < P; ++p) atom(i, p) = gauss(rng);
        dict.atoms.push_back(normalize_atom(atom).first);
      }
      return dict;
    }
  }
  throw InvalidInput("resolve_init: unknown policy");
}

namespace detail {

inline void fold_scales(ActivationSet& acts, const std::vector<double>& scales) {
  for (auto& per_series : acts.lists)
    for (std::size_t k = 0; k < per_series.size(); ++k)
      for (Activation& a : per_series[k]) a.amplitude *= scales[k];
}

// CSC against the personalized atoms of one series. Atoms are normalized for
// the solver; amplitudes are converted back to the unnormalized personalized
// atoms so that stored activations always pair with f(phi_k, a^s_k).
inline std::vector<std::vector<Activation>> csc_personalized(const Mat& x, const Dictionary& dict,
                                                             const std::vector<Mat>& params,
                                                             const TransformKind& kind,
                                                             double lambda) {
  std::vector<Mat> units;
  std::vector<double> norms;
  units.reserve(dict.atoms.size());
  for (std::size_t k = 0; k < dict.atoms.size(); ++k) {
    auto [unit, norm] = normalize_atom(apply_transform(kind, dict.atoms[k], params[k]));
    units.push_back(std::move(unit));
    norms.push_back(norm);
  }
  auto lists = csc_solve(x, units, lambda);
  for (std::size_t k = 0; k < lists.size(); ++k)
    for (Activation& a : lists[k]) a.amplitude /= norms[k];
  return lists;
}

inline void note_update_flags(const DictUpdate& upd, int round, const char* step,
                              std::vector<std::string>& warnings) {
  for (Index k : upd.frozen)
    warnings.push_back(std::string(step) + ": atom " + std::to_string(k) +
                       " frozen (no activations) in round " + std::to_string(round));
  for (Index k : upd.singular)
    warnings.push_back(std::string("singular PerCDU: atom ") + std::to_string(k) + " in round " +
                       std::to_string(round));
}

}  // namespace detail

// Block-coordinate driver: n_init rounds of (CSC; CDU) to estimate the common
// dictionary, then n_perso rounds of (IPU; CSC against personalized atoms;
// PerCDU; optional recentering). Activations and parameters start at zero.
inline FitResult fit(const TimeSeriesDataset& dataset, Index K, Index L,
                     const TransformKind& kind, const FitConfig& cfg, const DictInit& init) {
  const auto t0 = std::chrono::steady_clock::now();
  validate_dataset(dataset);
  cfg.validate();
  if (K < 1) throw InvalidInput("fit: need at least one atom");
  if (L >= dataset.sample_count()) throw InvalidInput("fit: atom length must be < series length");

  const Index S = dataset.subject_count();
  const Index N = dataset.sample_count();
  const Index P = dataset.channel_count();
  if (kind.type == TransformType::rotation && P < 2)
    throw InvalidInput("fit: rotation transform requires P >= 2");

  FitResult res;
  res.dictionary = resolve_init(dataset, K, L, init, cfg.rng_seed);
  res.activations = ActivationSet::zeros(S, K, N, L);
  const auto [pr, pc] = kind.param_shape(L, P);
  res.personalization = PersonalizationMatrix::zeros(S, K, pr, pc);
  if (kind.type == TransformType::rotation)
    for (auto& per_series : res.personalization.params)
      for (Mat& a : per_series) a = Mat::Identity(P, P);

  auto trace_objective = [&]() {
    res.objective_trace.push_back(
        objective(dataset, res.activations, res.dictionary, res.personalization, cfg.lambda, kind));
  };

  for (int round = 1; round <= cfg.n_init; ++round) {
    parallel_for(static_cast<std::size_t>(S), cfg.parallelism, [&](std::size_t s) {
      res.activations.lists[s] = csc_solve(dataset.series[s], res.dictionary.atoms, cfg.lambda);
    });
    PERCDL_DEBUG_CHECK_ACTIVATIONS(res.activations);
    const DictUpdate upd = cdu_update(dataset, res.activations, res.dictionary, cfg.cdu_mode);
    detail::note_update_flags(upd, round, "cdu", res.warnings);
    res.dictionary = upd.dictionary;
    detail::fold_scales(res.activations, upd.scales);
    trace_objective();
  }

  for (int round = 1; round <= cfg.n_perso; ++round) {
    parallel_for(static_cast<std::size_t>(S), cfg.parallelism, [&](std::size_t s) {
      res.personalization.params[s] =
          ipu_update(dataset.series[s], res.activations.lists[s], res.dictionary,
                     res.personalization.params[s], kind, cfg);
    });
    parallel_for(static_cast<std::size_t>(S), cfg.parallelism, [&](std::size_t s) {
      res.activations.lists[s] = detail::csc_personalized(
          dataset.series[s], res.dictionary, res.personalization.params[s], kind, cfg.lambda);
    });
    PERCDL_DEBUG_CHECK_ACTIVATIONS(res.activations);
    const DictUpdate upd =
        percdu_update(dataset, res.activations, res.personalization, res.dictionary, kind, cfg);
    detail::note_update_flags(upd, round, "percdu", res.warnings);
    res.dictionary = upd.dictionary;
    detail::fold_scales(res.activations, upd.scales);
    if (cfg.recenter_atoms && kind.type == TransformType::timewarp) {
      const DictUpdate rec = recenter_atoms(res.dictionary, res.personalization, kind);
      res.dictionary = rec.dictionary;
      detail::fold_scales(res.activations, rec.scales);
    }
    trace_objective();
  }

  res.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// Population-level baseline: the same driver with the identity transform
// (no personalization step has any effect).
inline FitResult fit_popcdl(const TimeSeriesDataset& dataset, Index K, Index L,
                            const FitConfig& cfg, const DictInit& init) {
  return fit(dataset, K, L, TransformKind::identity(), cfg, init);
}

struct IndcdlResult {
  std::vector<FitResult> individual;
  Dictionary barycenter;
};

namespace detail {

// Non-circular shift with zero padding.
inline Mat shift_atom(const Mat& atom, Index delta) {
  Mat out = Mat::Zero(atom.rows(), atom.cols());
  for (Index i = 0; i < atom.rows(); ++i) {
    const Index j = i - delta;
    if (j >= 0 && j < atom.rows()) out.row(i) = atom.row(j);
  }
  return out;
}

inline Index best_alignment_shift(const Mat& reference, const Mat& atom, Index max_shift) {
  Index best = 0;
  double best_corr = -std::numeric_limits<double>::infinity();
  for (Index delta = -max_shift; delta <= max_shift; ++delta) {
    const double corr = (reference.array() * shift_atom(atom, delta).array()).sum();
    if (corr > best_corr) {
      best_corr = corr;
      best = delta;
    }
  }
  return best;
}

}  // namespace detail

// Independent per-series CDL plus the Euclidean barycenter of the individual
// atoms. Atoms are aligned to the first individual's by the best
// cross-correlation shift within +/- L/4 before averaging (switchable).
inline IndcdlResult fit_indcdl(const TimeSeriesDataset& dataset, Index K, Index L,
                               const FitConfig& cfg, const DictInit& init, bool align = true) {
  validate_dataset(dataset);
  const Index S = dataset.subject_count();
  const Dictionary shared_init = resolve_init(dataset, K, L, init, cfg.rng_seed);

  IndcdlResult res;
  res.individual.resize(static_cast<std::size_t>(S));
  parallel_for(static_cast<std::size_t>(S), cfg.parallelism, [&](std::size_t s) {
    TimeSeriesDataset single;
    single.series.push_back(dataset.series[s]);
    FitConfig sub = cfg;
    sub.parallelism = 1;
    sub.rng_seed = mix_seed(cfg.rng_seed, 0x1D0C0000ULL + s);
    res.individual[s] = fit_popcdl(single, K, L, sub, DictInit::from_atoms(shared_init));
  });

  res.barycenter = shared_init;
  const Index max_shift = L / 4;
  for (Index k = 0; k < K; ++k) {
    const Mat& reference = res.individual.front().dictionary.atoms[static_cast<std::size_t>(k)];
    Mat acc = Mat::Zero(L, dataset.channel_count());
    for (Index s = 0; s < S; ++s) {
      const Mat& atom = res.individual[static_cast<std::size_t>(s)]
                            .dictionary.atoms[static_cast<std::size_t>(k)];
      const Index delta = align ? detail::best_alignment_shift(reference, atom, max_shift) : 0;
      acc += detail::shift_atom(atom, delta);
    }
    res.barycenter.atoms[static_cast<std::size_t>(k)] = normalize_atom(Mat(acc / S)).first;
  }
  return res;
}

}  // namespace percdl
