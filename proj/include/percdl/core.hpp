#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "percdl/common.hpp"

namespace percdl {

// S multichannel series of equal length N with P channels each.
struct TimeSeriesDataset {
  std::vector<Mat> series;          // each N x P
  std::vector<std::string> labels;  // optional; empty or one per series

  Index subject_count() const { return static_cast<Index>(series.size()); }
  Index sample_count() const { return series.empty() ? 0 : series.front().rows(); }
  Index channel_count() const { return series.empty() ? 0 : series.front().cols(); }
};

// K unit-norm atoms of length L with P channels each.
struct Dictionary {
  std::vector<Mat> atoms;  // each L x P

  Index atom_count() const { return static_cast<Index>(atoms.size()); }
  Index atom_length() const { return atoms.empty() ? 0 : atoms.front().rows(); }
  Index channel_count() const { return atoms.empty() ? 0 : atoms.front().cols(); }
};

struct Activation {
  Index position;    // window start in [0, N-L]
  double amplitude;  // >= 0

  friend bool operator==(const Activation&, const Activation&) = default;
};

// Sparse nonnegative activations per (series, atom) with pairwise disjoint
// windows within each series.
struct ActivationSet {
  std::vector<std::vector<std::vector<Activation>>> lists;  // [S][K], positions increasing
  Index sample_count = 0;
  Index atom_length = 0;

  Index subject_count() const { return static_cast<Index>(lists.size()); }
  Index atom_count() const { return lists.empty() ? 0 : static_cast<Index>(lists.front().size()); }

  static ActivationSet zeros(Index S, Index K, Index N, Index L) {
    ActivationSet z;
    z.lists.assign(static_cast<std::size_t>(S),
                   std::vector<std::vector<Activation>>(static_cast<std::size_t>(K)));
    z.sample_count = N;
    z.atom_length = L;
    return z;
  }

  Index total_count() const {
    Index n = 0;
    for (const auto& per_series : lists)
      for (const auto& acts : per_series) n += static_cast<Index>(acts.size());
    return n;
  }
};

// Per-(series, atom) transformation parameter blocks. For time warps each
// block is D x W and lives in Theta (per-depth l1 norm <= 1); other transform
// kinds use their own block shapes.
struct PersonalizationMatrix {
  std::vector<std::vector<Mat>> params;  // [S][K]
  Index depth = 0;
  Index width = 0;

  Index subject_count() const { return static_cast<Index>(params.size()); }
  Index atom_count() const { return params.empty() ? 0 : static_cast<Index>(params.front().size()); }

  static PersonalizationMatrix zeros(Index S, Index K, Index rows, Index cols) {
    PersonalizationMatrix a;
    a.params.assign(static_cast<std::size_t>(S),
                    std::vector<Mat>(static_cast<std::size_t>(K), Mat::Zero(rows, cols)));
    a.depth = rows;
    a.width = cols;
    return a;
  }
};

enum class CduMode { barycenter, least_squares };
enum class IpuMode { polyak, fixed_step };

struct FitConfig {
  double lambda = 1e-2;        // l0 sparsity penalty
  int n_init = 5;              // CSC+CDU warm-up rounds
  int n_perso = 5;             // personalization rounds
  int ipu_steps = 25;
  double ipu_step_scale = 1.0;  // damping on the Polyak step
  double ipu_fixed_step = 1e-3; // used by IpuMode::fixed_step
  IpuMode ipu_mode = IpuMode::polyak;
  CduMode cdu_mode = CduMode::least_squares;
  double sigma_interp = 0.002;  // interpolation bandwidth, normalized time
  double theta_margin = 1e-3;   // strict margin on the Theta l1 radius
  bool recenter_atoms = false;
  std::uint64_t rng_seed = 0;
  unsigned parallelism = 0;  // 0 = hardware concurrency

  void validate() const {
    if (lambda < 0) throw InvalidInput("FitConfig: lambda must be >= 0");
    if (n_init < 0 || n_perso < 0) throw InvalidInput("FitConfig: negative round count");
    if (ipu_steps <= 0) throw InvalidInput("FitConfig: ipu_steps must be positive");
    if (ipu_step_scale <= 0) throw InvalidInput("FitConfig: ipu_step_scale must be positive");
    if (sigma_interp <= 0) throw InvalidInput("FitConfig: sigma_interp must be positive");
    if (theta_margin < 0 || theta_margin >= 1)
      throw InvalidInput("FitConfig: theta_margin must lie in [0,1)");
  }
};

inline void validate_dataset(const TimeSeriesDataset& dataset) {
  if (dataset.series.empty()) throw InvalidInput("dataset: empty dataset");
  const Index n = dataset.series.front().rows();
  const Index p = dataset.series.front().cols();
  if (n < 1 || p < 1) throw InvalidInput("dataset: series must be at least 1 x 1");
  for (std::size_t s = 0; s < dataset.series.size(); ++s) {
    const Mat& x = dataset.series[s];
    if (x.rows() != n || x.cols() != p)
      throw InvalidInput("dataset: ragged series shapes (series " + std::to_string(s) + ")");
    if (!x.allFinite())
      throw InvalidInput("dataset: non-finite value in series " + std::to_string(s));
  }
  if (!dataset.labels.empty() && dataset.labels.size() != dataset.series.size())
    throw InvalidInput("dataset: label count does not match series count");
}

// Unit l2 tolerance for dictionary atoms; the norm constraint itself gives no
// tolerance so we fix one artifact-wide.
inline constexpr double kUnitNormTol = 1e-9;

// Returns (atom / ||atom||, ||atom||). The norm is handed back so callers can
// rescale activations by c_k after a dictionary update.
inline std::pair<Mat, double> normalize_atom(const Mat& atom) {
  const double norm = atom.norm();
  if (!(norm > 0.0)) throw DomainError("normalize_atom: degenerate atom");
  return {atom / norm, norm};
}

// Disjoint-interval checker: within each series, the windows
// [position, position+L) of all atoms must be pairwise disjoint, amplitudes
// nonnegative and positions strictly increasing per atom.
inline void check_activation_invariants(const ActivationSet& acts) {
  const Index L = acts.atom_length;
  const Index N = acts.sample_count;
  for (std::size_t s = 0; s < acts.lists.size(); ++s) {
    std::vector<Index> starts;
    for (const auto& per_atom : acts.lists[s]) {
      Index prev = -1;
      for (const Activation& a : per_atom) {
        if (a.amplitude < 0)
          throw DomainError("activations: negative amplitude in series " + std::to_string(s));
        if (a.position < 0 || a.position > N - L)
          throw DomainError("activations: position out of range in series " + std::to_string(s));
        if (a.position <= prev)
          throw DomainError("activations: positions not strictly increasing in series " +
                            std::to_string(s));
        prev = a.position;
        starts.push_back(a.position);
      }
    }
    std::sort(starts.begin(), starts.end());
    for (std::size_t i = 1; i < starts.size(); ++i) {
      if (starts[i] < starts[i - 1] + L)
        throw DomainError("activations: overlapping windows in series " + std::to_string(s));
    }
  }
}

#ifndef NDEBUG
#define PERCDL_DEBUG_CHECK_ACTIVATIONS(acts) ::percdl::check_activation_invariants(acts)
#else
#define PERCDL_DEBUG_CHECK_ACTIVATIONS(acts) ((void)0)
#endif

}  // namespace percdl
