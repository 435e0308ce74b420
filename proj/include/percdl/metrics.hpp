#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/solvers.hpp"
#include "percdl/synth.hpp"

namespace percdl {

// Euclidean reconstruction error over the whole dataset; the normalized
// variant divides by the dataset norm.
inline double recon_error(const TimeSeriesDataset& dataset, const std::vector<Mat>& reconstruction,
                          bool normalized) {
  if (dataset.series.size() != reconstruction.size())
    throw InvalidInput("recon_error: shape mismatch");
  double err = 0.0;
  double ref = 0.0;
  for (std::size_t s = 0; s < dataset.series.size(); ++s) {
    err += (dataset.series[s] - reconstruction[s]).squaredNorm();
    ref += dataset.series[s].squaredNorm();
  }
  if (!normalized) return std::sqrt(err);
  if (!(ref > 0)) throw DomainError("recon_error: zero dataset with normalized flag");
  return std::sqrt(err) / std::sqrt(ref);
}

enum class AtomMetric { euclidean, dtw };

// Classic DTW with per-step Euclidean ground cost over the P channels and the
// symmetric step pattern (1,1), (1,0), (0,1); no band constraint.
inline double dtw_distance(const Mat& a, const Mat& b) {
  const Index n = a.rows();
  const Index m = b.rows();
  if (n == 0 || m == 0) throw InvalidInput("dtw_distance: empty series");
  Mat acc(n, m);
  auto cost = [&](Index i, Index j) { return (a.row(i) - b.row(j)).norm(); };
  acc(0, 0) = cost(0, 0);
  for (Index i = 1; i < n; ++i) acc(i, 0) = acc(i - 1, 0) + cost(i, 0);
  for (Index j = 1; j < m; ++j) acc(0, j) = acc(0, j - 1) + cost(0, j);
  for (Index i = 1; i < n; ++i)
    for (Index j = 1; j < m; ++j)
      acc(i, j) = cost(i, j) + std::min({acc(i - 1, j - 1), acc(i - 1, j), acc(i, j - 1)});
  return acc(n - 1, m - 1);
}

// Distance between two atoms. Euclidean with align searches shifts within
// +/- L/4 (zero-padded) and both signs; DTW handles temporal offset itself.
inline double atom_distance(const Mat& a, const Mat& b, AtomMetric metric, bool align) {
  if (metric == AtomMetric::dtw) return dtw_distance(a, b);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw InvalidInput("atom_distance: euclidean metric requires equal shapes");
  if (!align) return (a - b).norm();
  const Index max_shift = a.rows() / 4;
  double best = std::numeric_limits<double>::infinity();
  for (Index delta = -max_shift; delta <= max_shift; ++delta) {
    const Mat shifted = detail::shift_atom(b, delta);
    best = std::min(best, (a - shifted).norm());
    best = std::min(best, (a + shifted).norm());
  }
  return best;
}

// Mean per-atom distance under the best atom-to-atom assignment (K is small,
// permutations are exhaustive).
inline double dictionary_distance(const Dictionary& fitted, const Dictionary& truth,
                                  AtomMetric metric, bool align) {
  const Index K = truth.atom_count();
  if (fitted.atom_count() != K) throw InvalidInput("dictionary_distance: atom count mismatch");
  if (K > 6) throw InvalidInput("dictionary_distance: exhaustive matching limited to K <= 6");
  std::vector<Index> perm(static_cast<std::size_t>(K));
  std::iota(perm.begin(), perm.end(), Index{0});
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (Index k = 0; k < K; ++k)
      total += atom_distance(fitted.atoms[static_cast<std::size_t>(perm[static_cast<std::size_t>(k)])],
                             truth.atoms[static_cast<std::size_t>(k)], metric, align);
    best = std::min(best, total / static_cast<double>(K));
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

struct SegmentationScore {
  double sensitivity = 0.0;
  double fpr_proportion = 0.0;
  Index matched = 0;
  Index truth_count = 0;
  Index prediction_count = 0;
};

// Event-detection score: activations below tau_act * mean(nonzero amplitude)
// are dropped, remaining predictions are matched one-to-one to ground-truth
// positions within tau_tol samples, nearest pairs first.
inline SegmentationScore segmentation_eval(const ActivationSet& predicted,
                                           const std::vector<std::vector<Index>>& truth_positions,
                                           double tau_tol, double tau_act) {
  if (tau_tol < 0) throw InvalidInput("segmentation_eval: tau_tol must be >= 0");
  if (tau_act < 0 || tau_act >= 1) throw InvalidInput("segmentation_eval: tau_act must lie in [0,1)");
  if (truth_positions.size() != predicted.lists.size())
    throw InvalidInput("segmentation_eval: series count mismatch");

  double amp_sum = 0.0;
  Index amp_count = 0;
  for (const auto& per_series : predicted.lists)
    for (const auto& per_atom : per_series)
      for (const Activation& a : per_atom)
        if (a.amplitude != 0.0) {
          amp_sum += std::abs(a.amplitude);
          ++amp_count;
        }
  const double threshold = amp_count > 0 ? tau_act * amp_sum / static_cast<double>(amp_count) : 0.0;

  SegmentationScore score;
  for (std::size_t s = 0; s < predicted.lists.size(); ++s) {
    std::vector<Index> preds;
    for (const auto& per_atom : predicted.lists[s])
      for (const Activation& a : per_atom)
        if (a.amplitude != 0.0 && std::abs(a.amplitude) >= threshold) preds.push_back(a.position);
    std::sort(preds.begin(), preds.end());
    const auto& truths = truth_positions[s];
    score.truth_count += static_cast<Index>(truths.size());
    score.prediction_count += static_cast<Index>(preds.size());

    struct Pair {
      Index dist;
      std::size_t truth;
      std::size_t pred;
    };
    std::vector<Pair> pairs;
    for (std::size_t t = 0; t < truths.size(); ++t)
      for (std::size_t p = 0; p < preds.size(); ++p) {
        const Index d = std::abs(truths[t] - preds[p]);
        if (static_cast<double>(d) <= tau_tol) pairs.push_back({d, t, p});
      }
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
      if (a.dist != b.dist) return a.dist < b.dist;
      if (a.truth != b.truth) return a.truth < b.truth;
      return a.pred < b.pred;
    });
    std::vector<bool> truth_used(truths.size(), false);
    std::vector<bool> pred_used(preds.size(), false);
    for (const Pair& pr : pairs) {
      if (truth_used[pr.truth] || pred_used[pr.pred]) continue;
      truth_used[pr.truth] = true;
      pred_used[pr.pred] = true;
      ++score.matched;
    }
  }
  if (score.truth_count > 0) {
    score.sensitivity = static_cast<double>(score.matched) / static_cast<double>(score.truth_count);
    score.fpr_proportion = static_cast<double>(score.prediction_count - score.matched) /
                           static_cast<double>(score.truth_count);
  } else {
    score.sensitivity = 1.0;
    score.fpr_proportion = score.prediction_count > 0
                               ? std::numeric_limits<double>::infinity()
                               : 0.0;
  }
  return score;
}

// ---------------------------------------------------------------------------
// Experiment runners
// ---------------------------------------------------------------------------

struct ExperimentCell {
  std::string method;
  std::string measure;
  std::vector<std::pair<std::string, double>> axis;  // ordered (name, value)
  std::vector<double> values;                        // one per replicate
  std::vector<std::uint64_t> seeds;
  bool failed = false;

  double mean() const {
    if (values.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  }
  double stddev() const {
    if (values.size() < 2) return 0.0;
    const double m = mean();
    double acc = 0.0;
    for (double v : values) acc += (v - m) * (v - m);
    return std::sqrt(acc / static_cast<double>(values.size() - 1));
  }
  double ci95_halfwidth() const {
    if (values.size() < 3) return std::numeric_limits<double>::quiet_NaN();
    return 1.96 * stddev() / std::sqrt(static_cast<double>(values.size()));
  }
};

struct ExperimentReport {
  std::string name;
  std::vector<ExperimentCell> cells;
  std::map<std::string, double> summary;
  std::uint64_t master_seed = 0;

  const ExperimentCell* find(const std::string& method, const std::string& measure,
                             const std::vector<std::pair<std::string, double>>& axis) const {
    for (const auto& c : cells)
      if (c.method == method && c.measure == measure && c.axis == axis) return &c;
    return nullptr;
  }
};

namespace detail {

// Experiment protocol initialization: the dictionary starts from the first
// series' ground-truth personalized patterns, shared across all methods.
inline DictInit experiment_init(const GroundTruth& truth, const WarpConfig& warp) {
  Dictionary init;
  for (std::size_t k = 0; k < truth.dictionary.atoms.size(); ++k) {
    const Mat personalized =
        apply_timewarp(truth.dictionary.atoms[k], truth.parameters.params.front()[k], warp);
    init.atoms.push_back(normalize_atom(personalized).first);
  }
  return DictInit::from_atoms(init);
}

inline std::vector<Mat> indcdl_reconstruction(const std::vector<FitResult>& individual) {
  std::vector<Mat> recon;
  recon.reserve(individual.size());
  for (const FitResult& fr : individual) {
    const auto atoms = personalized_dictionary(fr.dictionary, fr.personalization,
                                               TransformKind::identity());
    recon.push_back(reconstruct(fr.activations, atoms).front());
  }
  return recon;
}

}  // namespace detail

struct ConvergenceConfig {
  std::vector<Index> s_grid{4, 16, 64, 128};
  SynthSpec base;  // S is overridden per cell
  FitConfig fit;
  int replicates = 5;
  std::uint64_t seed = 1;
};

// Identifiability versus dataset size: aligned Euclidean distance between
// each method's common-structure estimate and the true atoms.
inline ExperimentReport experiment_convergence_vs_s(const ConvergenceConfig& cfg) {
  ExperimentReport report;
  report.name = "convergence_vs_s";
  report.master_seed = cfg.seed;
  const std::vector<std::string> methods{"percdl", "popcdl", "indcdl_barycenter"};
  for (Index s_val : cfg.s_grid)
    for (const auto& method : methods) {
      ExperimentCell cell;
      cell.method = method;
      cell.measure = "atom_distance";
      cell.axis = {{"S", static_cast<double>(s_val)}};
      report.cells.push_back(cell);
    }

  struct Task {
    std::size_t cell0;  // index of the percdl cell for this S
    Index s_val;
    int rep;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cfg.s_grid.size(); ++i)
    for (int rep = 0; rep < cfg.replicates; ++rep)
      tasks.push_back({i * methods.size(), cfg.s_grid[i], rep});

  std::vector<std::array<double, 3>> results(tasks.size());
  std::vector<std::uint64_t> task_seeds(tasks.size());
  parallel_for(tasks.size(), cfg.fit.parallelism, [&](std::size_t t) {
    const Task& task = tasks[t];
    SynthSpec spec = cfg.base;
    spec.S = task.s_val;
    spec.seed = mix_seed(cfg.seed, 0xC04F0000ULL + t);
    task_seeds[t] = spec.seed;
    auto [data, truth] = gen_dataset(spec);
    const DictInit init = detail::experiment_init(truth, spec.warp);
    FitConfig fit_cfg = cfg.fit;
    fit_cfg.parallelism = 1;
    fit_cfg.rng_seed = spec.seed;

    const FitResult per = fit(data, spec.K, spec.L, TransformKind::timewarp(spec.warp), fit_cfg, init);
    const FitResult pop = fit_popcdl(data, spec.K, spec.L, fit_cfg, init);
    const IndcdlResult ind = fit_indcdl(data, spec.K, spec.L, fit_cfg, init);

    results[t][0] = dictionary_distance(per.dictionary, truth.dictionary, AtomMetric::euclidean, true);
    results[t][1] = dictionary_distance(pop.dictionary, truth.dictionary, AtomMetric::euclidean, true);
    results[t][2] = dictionary_distance(ind.barycenter, truth.dictionary, AtomMetric::euclidean, true);
  });

  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t m = 0; m < methods.size(); ++m) {
      auto& cell = report.cells[tasks[t].cell0 + m];
      cell.values.push_back(results[t][m]);
      cell.seeds.push_back(task_seeds[t]);
    }
  return report;
}

struct NoiseRobustnessConfig {
  std::vector<double> levels{0.0, 0.05, 0.10};  // impulse fractions or gaussian SNR dB
  NoiseSpec::Kind noise_kind = NoiseSpec::Kind::impulse;
  SynthSpec base;  // noise overridden per cell
  FitConfig fit;
  int replicates = 5;
  std::uint64_t seed = 2;
};

// Robustness to noise: methods are fit on the corrupted data; reconstruction
// errors are reported against both the clean and the corrupted dataset, plus
// the distance of the common-structure estimates to the true atoms.
inline ExperimentReport experiment_noise_robustness(const NoiseRobustnessConfig& cfg) {
  ExperimentReport report;
  report.name = "noise_robustness";
  report.master_seed = cfg.seed;
  const std::vector<std::string> methods{"percdl", "popcdl", "indcdl", "indcdl_barycenter"};
  const std::vector<std::string> measures{"recon_clean", "recon_input", "atom_distance"};
  const std::string axis_name =
      cfg.noise_kind == NoiseSpec::Kind::impulse ? "impulse_fraction" : "snr_db";

  for (double level : cfg.levels)
    for (const auto& method : methods)
      for (const auto& measure : measures) {
        ExperimentCell cell;
        cell.method = method;
        cell.measure = measure;
        cell.axis = {{axis_name, level}};
        report.cells.push_back(cell);
      }
  auto cell_at = [&](std::size_t level_idx, std::size_t method_idx, std::size_t measure_idx)
      -> ExperimentCell& {
    return report.cells[(level_idx * methods.size() + method_idx) * measures.size() + measure_idx];
  };

  struct Task {
    std::size_t level_idx;
    int rep;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cfg.levels.size(); ++i)
    for (int rep = 0; rep < cfg.replicates; ++rep) tasks.push_back({i, rep});

  std::vector<std::array<std::array<double, 3>, 4>> results(tasks.size());
  std::vector<std::uint64_t> task_seeds(tasks.size());
  parallel_for(tasks.size(), cfg.fit.parallelism, [&](std::size_t t) {
    const Task& task = tasks[t];
    SynthSpec spec = cfg.base;
    spec.noise.kind = cfg.noise_kind;
    if (cfg.noise_kind == NoiseSpec::Kind::impulse)
      spec.noise.impulse_fraction = cfg.levels[task.level_idx];
    else
      spec.noise.snr_db = cfg.levels[task.level_idx];
    // Same generator seed across noise levels of one replicate: the clean
    // data is shared, only the corruption changes.
    spec.seed = mix_seed(cfg.seed, 0x401E0000ULL + static_cast<std::uint64_t>(task.rep));
    task_seeds[t] = spec.seed;
    auto [data, truth] = gen_dataset(spec);
    const DictInit init = detail::experiment_init(truth, spec.warp);
    FitConfig fit_cfg = cfg.fit;
    fit_cfg.parallelism = 1;
    fit_cfg.rng_seed = spec.seed;

    const FitResult per = fit(data, spec.K, spec.L, TransformKind::timewarp(spec.warp), fit_cfg, init);
    const FitResult pop = fit_popcdl(data, spec.K, spec.L, fit_cfg, init);
    const IndcdlResult ind = fit_indcdl(data, spec.K, spec.L, fit_cfg, init);

    auto eval = [&](const std::vector<Mat>& recon, const Dictionary& dict, std::size_t m) {
      results[t][m][0] = recon_error(truth.clean, recon, true);
      results[t][m][1] = recon_error(data, recon, true);
      results[t][m][2] = dictionary_distance(dict, truth.dictionary, AtomMetric::euclidean, true);
    };
    eval(reconstruct(per.activations,
                     personalized_dictionary(per.dictionary, per.personalization,
                                             TransformKind::timewarp(spec.warp))),
         per.dictionary, 0);
    eval(reconstruct(pop.activations,
                     personalized_dictionary(pop.dictionary, pop.personalization,
                                             TransformKind::identity())),
         pop.dictionary, 1);
    const auto ind_recon = detail::indcdl_reconstruction(ind.individual);
    eval(ind_recon, ind.barycenter, 2);
    // IndCDL-barycenter: reconstruct every series with the barycenter atoms
    // and re-fit activations only.
    std::vector<Mat> bary_recon(data.series.size());
    for (std::size_t s = 0; s < data.series.size(); ++s) {
      auto lists = csc_solve(data.series[s], ind.barycenter.atoms, fit_cfg.lambda);
      ActivationSet single = ActivationSet::zeros(1, spec.K, spec.N, spec.L);
      single.lists[0] = lists;
      bary_recon[s] = reconstruct(single, {ind.barycenter.atoms}).front();
    }
    eval(bary_recon, ind.barycenter, 3);
  });

  for (std::size_t t = 0; t < tasks.size(); ++t)
    for (std::size_t m = 0; m < methods.size(); ++m)
      for (std::size_t q = 0; q < measures.size(); ++q) {
        auto& cell = cell_at(tasks[t].level_idx, m, q);
        cell.values.push_back(results[t][m][q]);
        cell.seeds.push_back(task_seeds[t]);
      }
  return report;
}

struct SensitivityGridConfig {
  std::vector<int> d_grid{1, 2, 3, 4};
  std::vector<int> w_grid{1, 3, 5, 10, 15};
  SynthSpec truth_spec;  // generated at (D, W) = (3, 10) by default
  int ipu_steps = 150;
  int replicates = 3;
  std::uint64_t seed = 3;
};

// Warp hyper-parameter sensitivity: atoms and activations fixed at truth,
// IPU-only fitting per (D, W) cell, raw Euclidean reconstruction error.
inline ExperimentReport experiment_sensitivity_grid(const SensitivityGridConfig& cfg) {
  ExperimentReport report;
  report.name = "sensitivity_grid";
  report.master_seed = cfg.seed;
  for (int d : cfg.d_grid)
    for (int w : cfg.w_grid) {
      ExperimentCell cell;
      cell.method = "percdl_ipu_only";
      cell.measure = "recon_error";
      cell.axis = {{"D", static_cast<double>(d)}, {"W", static_cast<double>(w)}};
      report.cells.push_back(cell);
    }

  struct Task {
    std::size_t cell;
    int d, w, rep;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cfg.d_grid.size(); ++i)
    for (std::size_t j = 0; j < cfg.w_grid.size(); ++j)
      for (int rep = 0; rep < cfg.replicates; ++rep)
        tasks.push_back({i * cfg.w_grid.size() + j, cfg.d_grid[i], cfg.w_grid[j], rep});

  std::vector<double> results(tasks.size());
  std::vector<std::uint64_t> task_seeds(tasks.size());
  parallel_for(tasks.size(), 0, [&](std::size_t t) {
    const Task& task = tasks[t];
    SynthSpec spec = cfg.truth_spec;
    spec.seed = mix_seed(cfg.seed, 0x5E4D0000ULL + static_cast<std::uint64_t>(task.rep));
    task_seeds[t] = spec.seed;
    auto [data, truth] = gen_dataset(spec);

    WarpConfig warp = spec.warp;
    warp.depth = task.d;
    warp.width = task.w;
    const TransformKind kind = TransformKind::timewarp(warp);
    FitConfig fit_cfg;
    fit_cfg.ipu_steps = cfg.ipu_steps;
    fit_cfg.sigma_interp = warp.sigma;
    fit_cfg.theta_margin = warp.theta_margin;

    PersonalizationMatrix params =
        PersonalizationMatrix::zeros(spec.S, spec.K, warp.depth, warp.width);
    for (Index s = 0; s < spec.S; ++s)
      params.params[static_cast<std::size_t>(s)] = ipu_update(
          data.series[static_cast<std::size_t>(s)], truth.activations.lists[static_cast<std::size_t>(s)],
          truth.dictionary, params.params[static_cast<std::size_t>(s)], kind, fit_cfg);

    const auto recon =
        reconstruct(truth.activations, personalized_dictionary(truth.dictionary, params, kind));
    results[t] = recon_error(data, recon, false);
  });

  for (std::size_t t = 0; t < tasks.size(); ++t) {
    report.cells[tasks[t].cell].values.push_back(results[t]);
    report.cells[tasks[t].cell].seeds.push_back(task_seeds[t]);
  }
  return report;
}

struct MleRateConfig {
  std::vector<Index> s_grid{8, 16, 32, 64, 128, 256, 512, 1024};
  Index p = 3;
  Index L = 50;
  Index P = 1;
  WarpConfig warp{3, 10, 0.002, 1e-3};
  double noise_sigma = 0.1;
  int replicates = 20;
  Index p_check_s = 64;    // S at which the p-doubling ratio is measured
  Index rho_samples = 1000;
  std::uint64_t seed = 4;
};

namespace detail {

inline Mat draw_theta_uniform(const WarpConfig& warp, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  Mat a(warp.depth, warp.width);
  for (Index d = 0; d < a.rows(); ++d)
    for (Index w = 0; w < a.cols(); ++w) a(d, w) = unit(rng);
  return project_theta(a, warp.theta_margin);
}

// One closed-form estimate of the common atom from S individuals with p
// known-warp segments each.
inline double mle_single_error(const Mat& phi_star, const WarpConfig& warp, Index S, Index p,
                               double noise_sigma, std::uint64_t seed) {
  const Index L = phi_star.rows();
  const Index P = phi_star.cols();
  Mat normal = Mat::Zero(L, L);
  Mat rhs = Mat::Zero(L, P);
  for (Index s = 0; s < S; ++s) {
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(s)));
    const Mat a = draw_theta_uniform(warp, rng);
    const Mat T = build_warp_matrix(a, warp, L).matrix;
    normal.noalias() += static_cast<double>(p) * T.transpose() * T;
    std::normal_distribution<double> gauss(0.0, noise_sigma);
    Mat ysum = Mat::Zero(L, P);
    for (Index j = 0; j < p; ++j) {
      Mat y = T * phi_star;
      if (noise_sigma > 0)
        for (Index i = 0; i < L; ++i)
          for (Index c = 0; c < P; ++c) y(i, c) += gauss(rng);
      ysum += y;
    }
    rhs.noalias() += T.transpose() * ysum;
  }
  Eigen::SelfAdjointEigenSolver<Mat> es(normal);
  if (!(es.eigenvalues().minCoeff() > 0)) return std::numeric_limits<double>::quiet_NaN();
  const Mat estimate = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                       (es.eigenvectors().transpose() * rhs);
  return (estimate - phi_star).norm();
}

}  // namespace detail

// Monte Carlo check of the MLE convergence rate: log mean error regressed on
// log S should have slope -1/2. Also reports the empirical minimum eigenvalue
// of E[L(a)^T L(a)] and the error ratio when p doubles.
inline ExperimentReport experiment_mle_rate(const MleRateConfig& cfg) {
  ExperimentReport report;
  report.name = "mle_rate";
  report.master_seed = cfg.seed;
  const Mat phi_star = default_atoms(1, cfg.L, cfg.P).front();

  struct Task {
    std::size_t cell;
    Index S;
    Index p;
    int rep;
  };
  std::vector<Task> tasks;
  for (std::size_t i = 0; i < cfg.s_grid.size(); ++i) {
    ExperimentCell cell;
    cell.method = "mle";
    cell.measure = "atom_error";
    cell.axis = {{"S", static_cast<double>(cfg.s_grid[i])}, {"p", static_cast<double>(cfg.p)}};
    report.cells.push_back(cell);
    for (int rep = 0; rep < cfg.replicates; ++rep)
      tasks.push_back({i, cfg.s_grid[i], cfg.p, rep});
  }
  {  // doubled-p cell
    ExperimentCell cell;
    cell.method = "mle";
    cell.measure = "atom_error";
    cell.axis = {{"S", static_cast<double>(cfg.p_check_s)}, {"p", static_cast<double>(2 * cfg.p)}};
    report.cells.push_back(cell);
    for (int rep = 0; rep < cfg.replicates; ++rep)
      tasks.push_back({cfg.s_grid.size(), cfg.p_check_s, 2 * cfg.p, rep});
  }

  std::vector<double> results(tasks.size());
  std::vector<std::uint64_t> task_seeds(tasks.size());
  parallel_for(tasks.size(), 0, [&](std::size_t t) {
    const Task& task = tasks[t];
    // Replicated noise seeds are shared between the p and 2p cells only
    // through the master; every (S, p, rep) triple gets its own stream.
    const std::uint64_t s = mix_seed(cfg.seed, 0x31E00000ULL + t);
    task_seeds[t] = s;
    results[t] = detail::mle_single_error(phi_star, cfg.warp, task.S, task.p, cfg.noise_sigma, s);
  });
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    auto& cell = report.cells[tasks[t].cell];
    if (std::isnan(results[t])) {
      cell.failed = true;
      continue;
    }
    cell.values.push_back(results[t]);
    cell.seeds.push_back(task_seeds[t]);
  }

  // Least-squares slope of log(mean error) against log(S).
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  Index n = 0;
  for (std::size_t i = 0; i < cfg.s_grid.size(); ++i) {
    const double m = report.cells[i].mean();
    if (!(m > 0)) continue;
    const double lx = std::log(static_cast<double>(cfg.s_grid[i]));
    const double ly = std::log(m);
    sx += lx;
    sy += ly;
    sxx += lx * lx;
    sxy += lx * ly;
    ++n;
  }
  if (n >= 2) {
    const double denom = static_cast<double>(n) * sxx - sx * sx;
    report.summary["slope"] = (static_cast<double>(n) * sxy - sx * sy) / denom;
    report.summary["intercept"] = (sy - report.summary["slope"] * sx) / static_cast<double>(n);
  }

  // p-doubling ratio at the sentinel S.
  const ExperimentCell* base_cell =
      report.find("mle", "atom_error",
                  {{"S", static_cast<double>(cfg.p_check_s)}, {"p", static_cast<double>(cfg.p)}});
  const ExperimentCell* doubled_cell =
      report.find("mle", "atom_error",
                  {{"S", static_cast<double>(cfg.p_check_s)}, {"p", static_cast<double>(2 * cfg.p)}});
  if (base_cell && doubled_cell && base_cell->mean() > 0)
    report.summary["p_doubling_ratio"] = doubled_cell->mean() / base_cell->mean();

  // Empirical minimum eigenvalue of E[L(a)^T L(a)] by Monte Carlo.
  {
    Mat acc = Mat::Zero(cfg.L, cfg.L);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x4F0A));
    for (Index i = 0; i < cfg.rho_samples; ++i) {
      const Mat T = build_warp_matrix(detail::draw_theta_uniform(cfg.warp, rng), cfg.warp, cfg.L).matrix;
      acc.noalias() += T.transpose() * T;
    }
    acc /= static_cast<double>(cfg.rho_samples);
    Eigen::SelfAdjointEigenSolver<Mat> es(acc);
    report.summary["rho_estimate"] = es.eigenvalues().minCoeff();
  }
  return report;
}

struct SegmentationExperimentConfig {
  SynthSpec spec;
  FitConfig fit;
  double tau_tol = 100.0;
  double tau_act = 0.02;
  std::uint64_t seed = 5;
};

// Synthetic segmentation benchmark: fit, then score activation positions
// against the generator's ground truth.
inline ExperimentReport experiment_segmentation(const SegmentationExperimentConfig& cfg) {
  ExperimentReport report;
  report.name = "segmentation";
  report.master_seed = cfg.seed;
  SynthSpec spec = cfg.spec;
  spec.seed = mix_seed(cfg.seed, 0x5E60);
  auto [data, truth] = gen_dataset(spec);
  FitConfig fit_cfg = cfg.fit;
  fit_cfg.rng_seed = spec.seed;
  const FitResult res =
      fit(data, spec.K, spec.L, TransformKind::timewarp(spec.warp), fit_cfg,
          detail::experiment_init(truth, spec.warp));

  std::vector<std::vector<Index>> truth_positions(static_cast<std::size_t>(spec.S));
  for (Index s = 0; s < spec.S; ++s)
    for (const auto& per_atom : truth.activations.lists[static_cast<std::size_t>(s)])
      for (const Activation& a : per_atom)
        truth_positions[static_cast<std::size_t>(s)].push_back(a.position);

  const SegmentationScore score =
      segmentation_eval(res.activations, truth_positions, cfg.tau_tol, cfg.tau_act);
  ExperimentCell sens;
  sens.method = "percdl";
  sens.measure = "sensitivity";
  sens.values = {score.sensitivity};
  sens.seeds = {spec.seed};
  ExperimentCell fpr = sens;
  fpr.measure = "fpr_proportion";
  fpr.values = {score.fpr_proportion};
  report.cells.push_back(sens);
  report.cells.push_back(fpr);
  report.summary["sensitivity"] = score.sensitivity;
  report.summary["fpr_proportion"] = score.fpr_proportion;
  return report;
}

}  // namespace percdl
