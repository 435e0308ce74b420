#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/solvers.hpp"
#include "percdl/warp.hpp"

namespace percdl {

struct NoiseSpec {
  enum class Kind { none, gaussian, impulse };
  Kind kind = Kind::none;
  double snr_db = std::numeric_limits<double>::infinity();  // gaussian
  double impulse_fraction = 0.0;                            // impulse: fraction of samples
};

// Synthetic benchmark: S series of length N, each containing r time-warped
// repetitions of K common patterns at non-overlapping random positions.
struct SynthSpec {
  Index S = 3;
  Index N = 500;
  Index K = 2;
  Index r = 3;
  Index L = 50;
  Index P = 1;
  WarpConfig warp{3, 10, 0.002, 1e-3};
  std::uint64_t seed = 0;
  std::vector<Mat> base_atoms;  // empty -> default_atoms(K, L, P)
  NoiseSpec noise;

  void validate() const {
    if (S < 1 || N < 1 || K < 1 || r < 1 || L < 1 || P < 1)
      throw InvalidInput("SynthSpec: all dimensions must be positive");
    if (K * r * L > N) throw InvalidInput("SynthSpec: K*r*L exceeds N, placement infeasible");
    warp.validate();
    if (noise.kind == NoiseSpec::Kind::impulse &&
        (noise.impulse_fraction < 0 || noise.impulse_fraction > 1))
      throw InvalidInput("SynthSpec: impulse fraction must lie in [0,1]");
  }
};

struct GroundTruth {
  Dictionary dictionary;
  ActivationSet activations;
  PersonalizationMatrix parameters;
  TimeSeriesDataset clean;
};

// Built-in unit-norm pattern shapes: Gaussian bump, one-period sawtooth,
// Mexican hat, step-ramp. Channels beyond the first repeat the shape with a
// circular phase offset of L/(4P) per channel.
inline std::vector<Mat> default_atoms(Index K, Index L, Index P) {
  if (K > 4) throw InvalidInput("default_atoms: only 4 built-in shapes, pass explicit atoms");
  std::vector<Mat> atoms;
  auto shape = [&](Index k, double t) -> double {
    switch (k) {
      case 0:  // Gaussian bump
        return std::exp(-(t - 0.5) * (t - 0.5) / (2.0 * 0.15 * 0.15));
      case 1:  // one-period sawtooth
        return 2.0 * t - 1.0;
      case 2: {  // Mexican hat
        const double s = 0.12;
        const double q = (t - 0.5) / s;
        return (1.0 - q * q) * std::exp(-q * q / 2.0);
      }
      default: {  // step-ramp
        if (t < 0.35) return -0.5;
        if (t > 0.65) return 1.0;
        return -0.5 + 1.5 * (t - 0.35) / 0.3;
      }
    }
  };
  for (Index k = 0; k < K; ++k) {
    Mat atom(L, P);
    for (Index p = 0; p < P; ++p) {
      const Index offset = (p * L) / (4 * P);
      for (Index i = 0; i < L; ++i) {
        const Index j = (i + offset) % L;
        atom(i, p) = shape(k, (static_cast<double>(j) + 0.5) / static_cast<double>(L));
      }
    }
    atoms.push_back(normalize_atom(atom).first);
  }
  return atoms;
}

// Adds i.i.d. zero-mean Gaussian noise scaled per series so that
// 10 log10(signal power / noise power) = snr_db. An infinite target leaves
// the dataset untouched.
inline TimeSeriesDataset add_gaussian_noise(const TimeSeriesDataset& dataset, double snr_db,
                                            std::uint64_t seed) {
  if (std::isinf(snr_db)) return dataset;
  TimeSeriesDataset out = dataset;
  for (std::size_t s = 0; s < out.series.size(); ++s) {
    Mat& x = out.series[s];
    const double power = x.squaredNorm() / static_cast<double>(x.size());
    if (!(power > 0)) throw DomainError("add_gaussian_noise: zero-power series");
    const double sigma = std::sqrt(power / std::pow(10.0, snr_db / 10.0));
    std::mt19937_64 rng(mix_seed(seed, s));
    std::normal_distribution<double> gauss(0.0, sigma);
    for (Index i = 0; i < x.rows(); ++i)
      for (Index p = 0; p < x.cols(); ++p) x(i, p) += gauss(rng);
  }
  return out;
}

// Corrupts ceil(S/4) uniformly chosen series: in each, floor(p*N) uniformly
// chosen samples receive a +/- spike of magnitude Uniform[2.0, 2.5).
inline TimeSeriesDataset add_impulse_noise(const TimeSeriesDataset& dataset, double p,
                                           std::uint64_t seed) {
  if (p < 0 || p > 1) throw InvalidInput("add_impulse_noise: p must lie in [0,1]");
  TimeSeriesDataset out = dataset;
  if (p == 0.0) return out;
  const Index S = out.subject_count();
  const Index N = out.sample_count();
  const Index corrupted_series = (S + 3) / 4;
  const Index corrupted_samples = static_cast<Index>(p * static_cast<double>(N));

  std::mt19937_64 rng(mix_seed(seed, 0));
  std::vector<Index> order(static_cast<std::size_t>(S));
  for (Index s = 0; s < S; ++s) order[static_cast<std::size_t>(s)] = s;
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(static_cast<std::size_t>(corrupted_series));

  for (Index s : order) {
    std::mt19937_64 series_rng(mix_seed(seed, 0x51ED0000ULL + static_cast<std::uint64_t>(s)));
    std::vector<Index> samples(static_cast<std::size_t>(N));
    for (Index i = 0; i < N; ++i) samples[static_cast<std::size_t>(i)] = i;
    std::shuffle(samples.begin(), samples.end(), series_rng);
    std::uniform_real_distribution<double> magnitude(2.0, 2.5);
    std::bernoulli_distribution sign(0.5);
    Mat& x = out.series[static_cast<std::size_t>(s)];
    for (Index j = 0; j < corrupted_samples; ++j) {
      const Index i = samples[static_cast<std::size_t>(j)];
      for (Index c = 0; c < x.cols(); ++c)
        x(i, c) += (sign(series_rng) ? 1.0 : -1.0) * magnitude(series_rng);
    }
  }
  return out;
}

namespace detail {

// Uniform sample over all placements of m disjoint length-L windows in [0, N):
// draw m distinct values from [1, F+m] (F = slack), sort, and peel off the
// running window lengths.
inline std::vector<Index> sample_placements(Index N, Index m, Index L, std::mt19937_64& rng) {
  const Index F = N - m * L;
  std::set<Index> chosen;
  std::uniform_int_distribution<Index> pick(1, F + m);
  while (static_cast<Index>(chosen.size()) < m) chosen.insert(pick(rng));
  std::vector<Index> positions;
  positions.reserve(static_cast<std::size_t>(m));
  Index j = 0;
  for (Index u : chosen) {
    positions.push_back(u - (j + 1) + j * L);
    ++j;
  }
  return positions;
}

}  // namespace detail

inline std::pair<TimeSeriesDataset, GroundTruth> gen_dataset(const SynthSpec& spec) {
  spec.validate();
  const std::vector<Mat> base =
      spec.base_atoms.empty() ? default_atoms(spec.K, spec.L, spec.P) : spec.base_atoms;
  if (static_cast<Index>(base.size()) != spec.K)
    throw InvalidInput("gen_dataset: base atom count mismatch");

  GroundTruth truth;
  for (const Mat& atom : base) truth.dictionary.atoms.push_back(normalize_atom(atom).first);
  truth.activations = ActivationSet::zeros(spec.S, spec.K, spec.N, spec.L);
  truth.parameters =
      PersonalizationMatrix::zeros(spec.S, spec.K, spec.warp.depth, spec.warp.width);

  TimeSeriesDataset data;
  data.series.resize(static_cast<std::size_t>(spec.S));

  for (Index s = 0; s < spec.S; ++s) {
    std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(s)));
    std::uniform_real_distribution<double> unit(-1.0, 1.0);

    for (Index k = 0; k < spec.K; ++k) {
      Mat a(spec.warp.depth, spec.warp.width);
      for (Index d = 0; d < a.rows(); ++d)
        for (Index w = 0; w < a.cols(); ++w) a(d, w) = unit(rng);
      truth.parameters.params[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)] =
          project_theta(a, spec.warp.theta_margin);
    }

    auto positions = detail::sample_placements(spec.N, spec.K * spec.r, spec.L, rng);
    std::vector<Index> labels;
    for (Index k = 0; k < spec.K; ++k)
      for (Index j = 0; j < spec.r; ++j) labels.push_back(k);
    std::shuffle(labels.begin(), labels.end(), rng);

    Mat x = Mat::Zero(spec.N, spec.P);
    for (std::size_t j = 0; j < positions.size(); ++j) {
      const Index k = labels[j];
      const Mat warped = apply_timewarp(
          truth.dictionary.atoms[static_cast<std::size_t>(k)],
          truth.parameters.params[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)],
          spec.warp);
      x.middleRows(positions[j], spec.L) += warped;
      truth.activations.lists[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)].push_back(
          {positions[j], 1.0});
    }
    for (auto& per_atom : truth.activations.lists[static_cast<std::size_t>(s)])
      std::sort(per_atom.begin(), per_atom.end(),
                [](const Activation& a, const Activation& b) { return a.position < b.position; });
    data.series[static_cast<std::size_t>(s)] = x;
  }
  check_activation_invariants(truth.activations);
  truth.clean = data;

  switch (spec.noise.kind) {
    case NoiseSpec::Kind::none:
      break;
    case NoiseSpec::Kind::gaussian:
      data = add_gaussian_noise(data, spec.noise.snr_db, mix_seed(spec.seed, 0x6E01));
      break;
    case NoiseSpec::Kind::impulse:
      data = add_impulse_noise(data, spec.noise.impulse_fraction, mix_seed(spec.seed, 0x6E02));
      break;
  }
  return {std::move(data), std::move(truth)};
}

}  // namespace percdl
