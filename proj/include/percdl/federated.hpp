#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "percdl/common.hpp"
#include "percdl/core.hpp"
#include "percdl/solvers.hpp"
#include "percdl/transforms.hpp"

namespace percdl {

// Per-server private state. Never serialized into a Message: only O(L)-sized
// summaries travel.
struct LocalState {
  Mat series;                                       // N x P, stays local
  std::vector<std::vector<Activation>> activations; // per atom
  std::vector<Mat> params;                          // per atom
  std::vector<double> scales;                       // last broadcast c_k
};

// Wire unit of the simulation. Payload sizes are O(L): per atom at most
// L*P + D*W + 2 scalars ever cross the network.
struct Message {
  enum class Kind { broadcast, individual_barycenter, weighted_stats };
  Kind kind = Kind::broadcast;
  bool up = false;

  // broadcast: common atoms + normalization constants
  std::vector<Mat> atoms;
  std::vector<double> scales;

  // individual_barycenter: per-atom mean segment (absent when the atom had no
  // activations on that server)
  std::vector<bool> present;
  std::vector<Mat> barycenters;  // L x P where present

  // weighted_stats: per-atom weight sum z^2, parameters, and sum_j z L(a)^T y
  std::vector<double> weights;
  std::vector<Mat> params;  // parameter block where weight > 0
  std::vector<Mat> stats;   // L x P where weight > 0

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    switch (kind) {
      case Kind::broadcast:
        for (const Mat& a : atoms) n += a.size();
        n += static_cast<std::int64_t>(scales.size());
        break;
      case Kind::individual_barycenter:
        for (std::size_t k = 0; k < present.size(); ++k)
          if (present[k]) n += barycenters[k].size();
        break;
      case Kind::weighted_stats:
        n += static_cast<std::int64_t>(weights.size());
        for (std::size_t k = 0; k < weights.size(); ++k)
          if (weights[k] > 0) n += params[k].size() + stats[k].size();
        break;
    }
    return n;
  }
};

struct CommStats {
  struct Round {
    int round = 0;
    std::string phase;
    Index up_messages = 0;
    Index down_messages = 0;
    std::int64_t up_scalars = 0;
    std::int64_t down_scalars = 0;
  };
  std::vector<Round> rounds;
};

enum class FederatedVariant { barycenter, robust_joint };

inline FederatedVariant federated_variant_from_string(const std::string& s) {
  if (s == "barycenter") return FederatedVariant::barycenter;
  if (s == "robust_joint") return FederatedVariant::robust_joint;
  throw InvalidInput("unknown federated variant: " + s);
}

// ---------------------------------------------------------------------------
// Local server rounds
// ---------------------------------------------------------------------------

// Warm-up round: rescale stored amplitudes by the broadcast c_k, re-run CSC
// against the common atoms, send each atom's plain segment mean upward.
inline Message local_round_init(LocalState& state, const Dictionary& dict,
                                const std::vector<double>& c, double lambda) {
  const Index K = dict.atom_count();
  const Index L = dict.atom_length();
  for (Index k = 0; k < K; ++k)
    for (Activation& a : state.activations[static_cast<std::size_t>(k)])
      a.amplitude *= c[static_cast<std::size_t>(k)];
  state.activations = csc_solve(state.series, dict.atoms, lambda);

  Message msg;
  msg.kind = Message::Kind::individual_barycenter;
  msg.up = true;
  msg.present.assign(static_cast<std::size_t>(K), false);
  msg.barycenters.assign(static_cast<std::size_t>(K), Mat());
  for (Index k = 0; k < K; ++k) {
    const auto& list = state.activations[static_cast<std::size_t>(k)];
    if (list.empty()) continue;
    Mat acc = Mat::Zero(L, dict.channel_count());
    for (const Activation& a : list) acc += segment(state.series, a.position, L);
    msg.present[static_cast<std::size_t>(k)] = true;
    msg.barycenters[static_cast<std::size_t>(k)] = acc / static_cast<double>(list.size());
  }
  return msg;
}

// Personalization round: rescale amplitudes, update the individual
// parameters, re-run CSC against the personalized atoms, send the weighted
// pulled-back statistics (sum z^2, a, sum z L(a)^T y) upward.
inline Message local_round_perso(LocalState& state, const Dictionary& dict,
                                 const std::vector<double>& c, double lambda,
                                 const TransformKind& kind, const FitConfig& cfg) {
  const Index K = dict.atom_count();
  const Index L = dict.atom_length();
  for (Index k = 0; k < K; ++k)
    for (Activation& a : state.activations[static_cast<std::size_t>(k)])
      a.amplitude *= c[static_cast<std::size_t>(k)];

  state.params = ipu_update(state.series, state.activations, dict, state.params, kind, cfg);
  state.activations = detail::csc_personalized(state.series, dict, state.params, kind, lambda);

  Message msg;
  msg.kind = Message::Kind::weighted_stats;
  msg.up = true;
  msg.weights.assign(static_cast<std::size_t>(K), 0.0);
  msg.params.assign(static_cast<std::size_t>(K), Mat());
  msg.stats.assign(static_cast<std::size_t>(K), Mat());
  for (Index k = 0; k < K; ++k) {
    const auto& list = state.activations[static_cast<std::size_t>(k)];
    if (list.empty()) continue;
    double ws2 = 0.0;
    Mat wy = Mat::Zero(L, dict.channel_count());
    for (const Activation& a : list) {
      ws2 += a.amplitude * a.amplitude;
      wy += a.amplitude * segment(state.series, a.position, L);
    }
    const Mat& a_k = state.params[static_cast<std::size_t>(k)];
    msg.weights[static_cast<std::size_t>(k)] = ws2;
    msg.params[static_cast<std::size_t>(k)] = a_k;
    if (kind.type == TransformType::timewarp) {
      const Mat T = build_warp_matrix(a_k, kind.warp, L).matrix;
      msg.stats[static_cast<std::size_t>(k)] = T.transpose() * wy;
    } else if (kind.type == TransformType::rotation) {
      msg.stats[static_cast<std::size_t>(k)] = wy * a_k;
    } else {
      msg.stats[static_cast<std::size_t>(k)] = wy;
    }
  }
  return msg;
}

// Robust variant round: IPU warm start, CSC, then a few joint Polyak steps on
// (a, local copy of the common atoms); only the adapted local atoms travel.
inline Message local_round_robust(LocalState& state, const Dictionary& dict,
                                  const std::vector<double>& c, double lambda,
                                  const TransformKind& kind, const FitConfig& cfg,
                                  int warm_steps, int joint_steps) {
  const Index K = dict.atom_count();
  const Index L = dict.atom_length();
  for (Index k = 0; k < K; ++k)
    for (Activation& a : state.activations[static_cast<std::size_t>(k)])
      a.amplitude *= c[static_cast<std::size_t>(k)];

  FitConfig warm = cfg;
  warm.ipu_steps = warm_steps;
  state.params = ipu_update(state.series, state.activations, dict, state.params, kind, warm);
  state.activations = detail::csc_personalized(state.series, dict, state.params, kind, lambda);

  Message msg;
  msg.kind = Message::Kind::individual_barycenter;
  msg.up = true;
  msg.present.assign(static_cast<std::size_t>(K), false);
  msg.barycenters.assign(static_cast<std::size_t>(K), Mat());

  for (Index k = 0; k < K; ++k) {
    const auto& list = state.activations[static_cast<std::size_t>(k)];
    if (list.empty()) continue;
    Mat local_atom = dict.atoms[static_cast<std::size_t>(k)];
    Mat a_k = state.params[static_cast<std::size_t>(k)];
    if (kind.type == TransformType::timewarp) {
      double ws2 = 0.0;
      double yy = 0.0;
      Mat wy = Mat::Zero(L, dict.channel_count());
      for (const Activation& act : list) {
        const Mat y = segment(state.series, act.position, L);
        ws2 += act.amplitude * act.amplitude;
        yy += y.squaredNorm();
        wy += act.amplitude * y;
      }
      for (int step = 0; step < joint_steps; ++step) {
        double f = 0.0;
        const Mat grad_a =
            detail::warp_segments_gradient(local_atom, a_k, kind.warp, ws2, wy, yy, f);
        const Mat T = build_warp_matrix(a_k, kind.warp, L).matrix;
        const Mat grad_phi = 2.0 * (ws2 * T.transpose() * (T * local_atom) - T.transpose() * wy);
        const double g2 = grad_a.squaredNorm() + grad_phi.squaredNorm();
        if (!(g2 > 0.0) || !(f > 0.0)) break;
        double eta = cfg.ipu_step_scale * f / g2;
        bool accepted = false;
        for (int halving = 0; halving < 30; ++halving) {
          const Mat trial_a = project_theta(a_k - eta * grad_a, kind.warp.theta_margin);
          const Mat trial_phi = local_atom - eta * grad_phi;
          const double f_trial =
              detail::warp_segments_objective(trial_phi, trial_a, kind.warp, ws2, wy, yy);
          if (f_trial <= f) {
            a_k = trial_a;
            local_atom = trial_phi;
            accepted = true;
            break;
          }
          eta *= 0.5;
        }
        if (!accepted) break;
      }
      state.params[static_cast<std::size_t>(k)] = a_k;
    }
    msg.present[static_cast<std::size_t>(k)] = true;
    msg.barycenters[static_cast<std::size_t>(k)] = local_atom;
  }
  return msg;
}

// ---------------------------------------------------------------------------
// Central server aggregation
// ---------------------------------------------------------------------------

struct CentralUpdate {
  Message broadcast;
  std::vector<Index> frozen;
  std::vector<Index> singular;
};

// Global barycenter: mean of the received per-server means over the servers
// that contributed, then normalization. All-absent atoms stay frozen.
inline CentralUpdate central_aggregate_init(const std::vector<Message>& messages,
                                            const Dictionary& current) {
  const Index K = current.atom_count();
  CentralUpdate upd;
  upd.broadcast.kind = Message::Kind::broadcast;
  upd.broadcast.atoms = current.atoms;
  upd.broadcast.scales.assign(static_cast<std::size_t>(K), 1.0);
  for (Index k = 0; k < K; ++k) {
    Mat acc = Mat::Zero(current.atom_length(), current.channel_count());
    double contributors = 0.0;
    for (const Message& msg : messages) {
      if (msg.kind != Message::Kind::individual_barycenter)
        throw InvalidInput("central_aggregate_init: unexpected message kind");
      if (!msg.present[static_cast<std::size_t>(k)]) continue;
      acc += msg.barycenters[static_cast<std::size_t>(k)];
      contributors += 1.0;
    }
    if (contributors <= 0.0) {
      upd.frozen.push_back(k);
      continue;
    }
    auto [unit, norm] = normalize_atom(Mat(acc / contributors));
    upd.broadcast.atoms[static_cast<std::size_t>(k)] = unit;
    upd.broadcast.scales[static_cast<std::size_t>(k)] = norm;
  }
  return upd;
}

// Weighted global barycenter: rebuilds L(a) from the transmitted parameters,
// solves sum_s w_s L_s^T L_s phi = sum_s stats_s per atom. A singular system
// falls back to the unweighted mean of stats_s / w_s.
inline CentralUpdate central_aggregate_perso(const std::vector<Message>& messages,
                                             const TransformKind& kind, const Dictionary& current) {
  const Index K = current.atom_count();
  const Index L = current.atom_length();
  CentralUpdate upd;
  upd.broadcast.kind = Message::Kind::broadcast;
  upd.broadcast.atoms = current.atoms;
  upd.broadcast.scales.assign(static_cast<std::size_t>(K), 1.0);
  for (Index k = 0; k < K; ++k) {
    double total_weight = 0.0;
    Mat rhs = Mat::Zero(L, current.channel_count());
    Mat normal = Mat::Zero(L, L);
    for (const Message& msg : messages) {
      if (msg.kind != Message::Kind::weighted_stats)
        throw InvalidInput("central_aggregate_perso: unexpected message kind");
      const double w = msg.weights[static_cast<std::size_t>(k)];
      if (!(w > 0)) continue;  // absent servers are excluded from both sides
      total_weight += w;
      rhs += msg.stats[static_cast<std::size_t>(k)];
      if (kind.type == TransformType::timewarp) {
        const Mat T = build_warp_matrix(msg.params[static_cast<std::size_t>(k)], kind.warp, L).matrix;
        normal.noalias() += w * T.transpose() * T;
      }
    }
    if (total_weight <= 0.0) {
      upd.frozen.push_back(k);
      continue;
    }
    Mat solution;
    if (kind.type == TransformType::timewarp) {
      Eigen::SelfAdjointEigenSolver<Mat> es(normal);
      const double lo = es.eigenvalues().minCoeff();
      const double hi = es.eigenvalues().maxCoeff();
      if (!(lo > 0.0) || hi / lo > kPerCduConditionLimit) {
        upd.singular.push_back(k);
        solution = Mat::Zero(L, current.channel_count());
        double contributors = 0.0;
        for (const Message& msg : messages) {
          const double w = msg.weights[static_cast<std::size_t>(k)];
          if (!(w > 0)) continue;
          solution += msg.stats[static_cast<std::size_t>(k)] / w;
          contributors += 1.0;
        }
        solution /= contributors;
      } else {
        solution = es.eigenvectors() * es.eigenvalues().cwiseInverse().asDiagonal() *
                   (es.eigenvectors().transpose() * rhs);
      }
    } else {
      solution = rhs / total_weight;
    }
    auto [unit, norm] = normalize_atom(solution);
    upd.broadcast.atoms[static_cast<std::size_t>(k)] = unit;
    upd.broadcast.scales[static_cast<std::size_t>(k)] = norm;
  }
  return upd;
}

// ---------------------------------------------------------------------------
// Orchestration
// ---------------------------------------------------------------------------

// In-process simulation of the federated protocol: one local server per
// series, the central server as a per-round barrier, messages as the only
// cross-task channel. Sub-step order matches the centralized driver, so with
// equal per-server counts the two produce the same common atoms.
inline std::pair<FitResult, CommStats> run_federated(const TimeSeriesDataset& dataset, Index K,
                                                     Index L, const TransformKind& kind,
                                                     const FitConfig& cfg, FederatedVariant variant,
                                                     const DictInit& init) {
  const auto t0 = std::chrono::steady_clock::now();
  validate_dataset(dataset);
  cfg.validate();
  if (L >= dataset.sample_count()) throw InvalidInput("run_federated: atom length must be < N");

  const Index S = dataset.subject_count();
  const Index N = dataset.sample_count();
  const Index P = dataset.channel_count();
  const auto [pr, pc] = kind.param_shape(L, P);

  Dictionary dict = resolve_init(dataset, K, L, init, cfg.rng_seed);
  std::vector<double> scales(static_cast<std::size_t>(K), 1.0);

  std::vector<LocalState> locals(static_cast<std::size_t>(S));
  for (Index s = 0; s < S; ++s) {
    auto& st = locals[static_cast<std::size_t>(s)];
    st.series = dataset.series[static_cast<std::size_t>(s)];
    st.activations.assign(static_cast<std::size_t>(K), {});
    st.params.assign(static_cast<std::size_t>(K), Mat::Zero(pr, pc));
    if (kind.type == TransformType::rotation)
      for (Mat& a : st.params) a = Mat::Identity(P, P);
    st.scales.assign(static_cast<std::size_t>(K), 1.0);
  }

  FitResult res;
  CommStats stats;
  auto harvest_state = [&]() {
    res.dictionary = dict;
    res.activations = ActivationSet::zeros(S, K, N, L);
    res.personalization = PersonalizationMatrix::zeros(S, K, pr, pc);
    for (Index s = 0; s < S; ++s) {
      res.activations.lists[static_cast<std::size_t>(s)] = locals[static_cast<std::size_t>(s)].activations;
      for (Index k = 0; k < K; ++k) {
        for (Activation& a :
             res.activations.lists[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)])
          a.amplitude *= scales[static_cast<std::size_t>(k)];
        res.personalization.params[static_cast<std::size_t>(s)][static_cast<std::size_t>(k)] =
            locals[static_cast<std::size_t>(s)].params[static_cast<std::size_t>(k)];
      }
    }
  };
  auto trace_objective = [&]() {
    harvest_state();
    res.objective_trace.push_back(objective(dataset, res.activations, res.dictionary,
                                            res.personalization, cfg.lambda, kind));
  };

  const std::int64_t broadcast_scalars =
      static_cast<std::int64_t>(K) * (static_cast<std::int64_t>(L) * P + 1);
  // Bootstrap broadcast of the initial dictionary.
  stats.rounds.push_back({0, "bootstrap", 0, S, 0, S * broadcast_scalars});

  int round_id = 0;
  auto run_round = [&](const char* phase, auto&& local_fn, auto&& central_fn) {
    ++round_id;
    std::vector<Message> inbox(static_cast<std::size_t>(S));
    parallel_for(static_cast<std::size_t>(S), cfg.parallelism,
                 [&](std::size_t s) { inbox[s] = local_fn(locals[s]); });
    CentralUpdate upd = central_fn(inbox);
    for (Index k : upd.frozen)
      res.warnings.push_back(std::string(phase) + ": atom " + std::to_string(k) +
                             " frozen (all servers absent) in round " + std::to_string(round_id));
    for (Index k : upd.singular)
      res.warnings.push_back("singular aggregate: atom " + std::to_string(k) + " in round " +
                             std::to_string(round_id));
    dict.atoms = upd.broadcast.atoms;
    scales = upd.broadcast.scales;

    CommStats::Round row;
    row.round = round_id;
    row.phase = phase;
    row.up_messages = S;
    row.down_messages = S;
    for (const Message& m : inbox) row.up_scalars += m.scalar_count();
    row.down_scalars = S * upd.broadcast.scalar_count();
    stats.rounds.push_back(row);
    trace_objective();
  };

  for (int r = 0; r < cfg.n_init; ++r) {
    run_round(
        "init",
        [&](LocalState& st) { return local_round_init(st, dict, scales, cfg.lambda); },
        [&](const std::vector<Message>& inbox) { return central_aggregate_init(inbox, dict); });
  }
  for (int r = 0; r < cfg.n_perso; ++r) {
    if (variant == FederatedVariant::barycenter) {
      run_round(
          "perso",
          [&](LocalState& st) {
            return local_round_perso(st, dict, scales, cfg.lambda, kind, cfg);
          },
          [&](const std::vector<Message>& inbox) {
            return central_aggregate_perso(inbox, kind, dict);
          });
    } else {
      run_round(
          "perso_robust",
          [&](LocalState& st) {
            return local_round_robust(st, dict, scales, cfg.lambda, kind, cfg, 10, 5);
          },
          [&](const std::vector<Message>& inbox) { return central_aggregate_init(inbox, dict); });
    }
  }

  harvest_state();
  res.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(res), std::move(stats)};
}

}  // namespace percdl
