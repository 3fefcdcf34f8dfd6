#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Eigenvalues>

#include "refuel/error.hpp"
#include "refuel/linalg.hpp"
#include "refuel/mdp.hpp"
#include "refuel/rng.hpp"

namespace refuel {

struct StateAction {
  std::size_t state = 0;
  std::size_t action = 0;
};

struct OfflineRecord {
  std::size_t traj = 0;
  std::size_t h = 0;
  std::size_t state = 0;
  std::size_t action = 0;
  double reward = 0.0;
  std::size_t next_state = 0;

  friend bool operator==(const OfflineRecord&, const OfflineRecord&) = default;
};

/// N_off behavior-policy trajectories flattened to (traj, h) records, in
/// trajectory-major order.
struct OfflineDataset {
  std::vector<OfflineRecord> records;
  std::string behavior_id;
  std::uint64_t seed = 0;
  std::size_t trajectories = 0;
  std::size_t horizon = 0;

  friend bool operator==(const OfflineDataset&, const OfflineDataset&) = default;
};

inline OfflineDataset gen_offline_dataset(const TabularLowRankMdp& mdp, const RewardTable& reward,
                                          const Policy& behavior, std::size_t n_off, std::uint64_t seed,
                                          std::string behavior_id = "behavior") {
  require(n_off >= 1, "gen_offline_dataset: N_off must be at least 1");
  OfflineDataset ds;
  ds.behavior_id = std::move(behavior_id);
  ds.seed = seed;
  ds.trajectories = n_off;
  ds.horizon = mdp.horizon();
  ds.records.reserve(n_off * mdp.horizon());
  for (std::size_t tau = 0; tau < n_off; ++tau) {
    const auto tr = sample_trajectory(mdp, reward, behavior, derive_seed(seed, {tau}));
    for (std::size_t h = 0; h < tr.steps.size(); ++h) {
      const auto& st = tr.steps[h];
      ds.records.push_back({tau, h, st.state, st.action, st.reward, st.next_state});
    }
  }
  return ds;
}

struct RidgeFit {
  Eigen::MatrixXd gram;  ///< Lambda = sum phi phi^T + lambda I
  Eigen::VectorXd rhs;   ///< sum phi * target
  Eigen::VectorXd w;
  double residual = 0.0; ///< ||Lambda w - rhs||_2
};

/// Regularized least squares w = Lambda^{-1} sum phi(s,a) target.
inline RidgeFit ridge_weights(const FeatureTable& phi_hat, std::size_t h, std::span<const StateAction> inputs,
                              std::span<const double> targets, double lambda) {
  require(inputs.size() == targets.size(), "ridge_weights: inputs and targets differ in length");
  require(lambda > 0.0, "ridge_weights: lambda must be positive");
  require(h < phi_hat.shape().horizon, "ridge_weights: step out of range");
  const auto d = static_cast<Eigen::Index>(phi_hat.dim());
  RidgeFit fit{Eigen::MatrixXd::Identity(d, d) * lambda, Eigen::VectorXd::Zero(d), Eigen::VectorXd::Zero(d), 0.0};
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto f = phi_hat.at(h, inputs[i].state, inputs[i].action);
    add_outer(fit.gram, f);
    fit.rhs += as_vector(f) * targets[i];
  }
  if (!fit.rhs.allFinite()) throw NumericalError("ridge_weights: non-finite targets");
  const SpdSolver solver(fit.gram, "ridge_weights(step " + std::to_string(h) + ")");
  fit.w = solver.solve(fit.rhs);
  if (!fit.w.allFinite()) throw NumericalError("ridge_weights: non-finite solution");
  fit.residual = (fit.gram * fit.w - fit.rhs).norm();
  return fit;
}

struct PessimismConfig {
  double lambda = 1.0;
  double c_beta = 1.0;
  double delta = 0.05;
  double xi_down = 0.0;
  std::size_t p = 1;

  void validate() const {
    require(lambda > 0.0 && c_beta > 0.0 && delta > 0.0 && delta < 1.0 && p >= 1,
            "PessimismConfig: lambda, c_beta, p must be positive and delta in (0, 1)");
    require(xi_down >= 0.0, "PessimismConfig: xi_down must be nonnegative");
  }
};

/// iota = ln(2 p d H N max{xi_down, 1} / delta);
/// beta = c_beta * (d sqrt(iota) + sqrt(d N) xi_down + sqrt(p ln N)).
inline double pessimism_beta(const PessimismConfig& cfg, std::size_t d, std::size_t horizon, std::size_t n_off,
                             double* iota_out = nullptr) {
  const double D = static_cast<double>(d), N = static_cast<double>(n_off), P = static_cast<double>(cfg.p);
  const double iota =
      std::log(2.0 * P * D * static_cast<double>(horizon) * N * std::max(cfg.xi_down, 1.0) / cfg.delta);
  if (iota_out) *iota_out = iota;
  return cfg.c_beta * (D * std::sqrt(iota) + std::sqrt(D * N) * cfg.xi_down + std::sqrt(P * std::log(N)));
}

struct GammaStats {
  double min = 0.0;
  double mean = 0.0;
  double max = 0.0;
};

struct PeviResult {
  Policy policy;
  double beta = 0.0;
  double iota = 0.0;
  double v1 = 0.0;                 ///< V_hat_1(s_1)
  std::vector<GammaStats> gamma;   ///< per step
  std::vector<double> residuals;   ///< ridge normal-equation residual per step
  StepTable q;                     ///< Q_hat after the penalty and clamp
  StepTable q_unpenalized;         ///< clamp(r + phi^T w, 0, 1)
  StepTable uncertainty;           ///< Gamma_h(s, a)
};

/// Pessimistic value iteration with the uncertainty
/// Gamma_h = xi_down + beta * ||phi_hat||_{Lambda_h^{-1}}.
inline PeviResult pevi(const OfflineDataset& data, const FeatureTable& phi_hat, const RewardTable& reward,
                       const PessimismConfig& cfg, std::size_t initial_state = 0) {
  cfg.validate();
  require(!data.records.empty() && data.trajectories >= 1, "pevi: empty dataset");
  const Shape sh = phi_hat.shape();
  require(reward.r.shape() == sh, "pevi: reward and feature shapes differ");
  require(data.horizon == sh.horizon, "pevi: dataset horizon differs from features");
  const std::size_t H = sh.horizon, S = sh.states, K = sh.actions;

  PeviResult res;
  res.beta = pessimism_beta(cfg, phi_hat.dim(), H, data.trajectories, &res.iota);
  res.gamma.resize(H);
  res.residuals.resize(H);
  res.q = StepTable(sh, 0.0);
  res.q_unpenalized = StepTable(sh, 0.0);
  res.uncertainty = StepTable(sh, 0.0);

  std::vector<std::vector<StateAction>> inputs(H);
  std::vector<std::vector<std::size_t>> next(H);
  for (const auto& r : data.records) {
    require(r.h < H && r.state < S && r.action < K && r.next_state < S, "pevi: record out of range");
    inputs[r.h].push_back({r.state, r.action});
    next[r.h].push_back(r.next_state);
  }

  std::vector<double> v_next(S, 0.0), v(S, 0.0);
  std::vector<std::size_t> choice(H * S, 0);
  for (std::size_t h = H; h-- > 0;) {
    std::vector<double> targets(next[h].size());
    for (std::size_t i = 0; i < targets.size(); ++i) targets[i] = v_next[next[h][i]];
    RidgeFit fit;
    try {
      fit = ridge_weights(phi_hat, h, inputs[h], targets, cfg.lambda);
    } catch (const NumericalError& e) {
      throw NumericalError("pevi: step " + std::to_string(h) + ": " + e.what());
    }
    res.residuals[h] = fit.residual;
    const SpdSolver solver(fit.gram, "pevi");
    GammaStats gs{std::numeric_limits<double>::infinity(), 0.0, 0.0};
    for (std::size_t s = 0; s < S; ++s) {
      double best = 0.0;
      std::size_t best_a = 0;
      for (std::size_t a = 0; a < K; ++a) {
        const auto f = phi_hat.at(h, s, a);
        const double gamma = cfg.xi_down + res.beta * std::sqrt(solver.inverse_quadratic(f));
        const double fit_value = reward.r(h, s, a) + as_vector(f).dot(fit.w);
        if (!std::isfinite(gamma) || !std::isfinite(fit_value))
          throw NumericalError("pevi: non-finite value at step " + std::to_string(h));
        const double q = std::clamp(fit_value - gamma, 0.0, 1.0);
        res.q(h, s, a) = q;
        res.q_unpenalized(h, s, a) = std::clamp(fit_value, 0.0, 1.0);
        res.uncertainty(h, s, a) = gamma;
        gs.min = std::min(gs.min, gamma);
        gs.max = std::max(gs.max, gamma);
        gs.mean += gamma;
        if (a == 0 || q > best) {
          best = q;
          best_a = a;
        }
      }
      v[s] = best;
      choice[h * S + s] = best_a;
    }
    gs.mean /= static_cast<double>(S * K);
    res.gamma[h] = gs;
    v_next.swap(v);
  }
  res.v1 = v_next[initial_state];
  res.policy = Policy::deterministic(sh, choice);
  return res;
}

/// min_h lambda_min( E_{(s,a) ~ behavior} phi_hat phi_hat^T ), from exact
/// occupancy.
inline double feature_coverage(const Policy& behavior, const TabularLowRankMdp& mdp, const FeatureTable& phi_hat) {
  require(phi_hat.shape() == mdp.shape(), "feature_coverage: feature and MDP shapes differ");
  const auto occ = occupancy(mdp, behavior);
  const auto d = static_cast<Eigen::Index>(phi_hat.dim());
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t h = 0; h < mdp.horizon(); ++h) {
    Eigen::MatrixXd sigma = Eigen::MatrixXd::Zero(d, d);
    for (std::size_t s = 0; s < mdp.states(); ++s)
      for (std::size_t a = 0; a < mdp.actions(); ++a)
        if (occ(h, s, a) > 0.0) add_outer(sigma, phi_hat.at(h, s, a), occ(h, s, a));
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sigma, Eigen::EigenvaluesOnly);
    worst = std::min(worst, std::max(0.0, eig.eigenvalues().minCoeff()));
  }
  return worst;
}

}  // namespace refuel
