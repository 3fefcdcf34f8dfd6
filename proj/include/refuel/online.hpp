#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "refuel/error.hpp"
#include "refuel/linalg.hpp"
#include "refuel/mdp.hpp"
#include "refuel/offline.hpp"
#include "refuel/rng.hpp"

namespace refuel {

struct OnlineConfig {
  double lambda = 1.0;
  double c_beta = 1.0;
  double delta = 0.05;
  double xi_down = 0.0;
  std::size_t p = 1;
  std::size_t episodes = 1000;  ///< N_on

  void validate() const {
    require(lambda > 0.0 && c_beta > 0.0 && delta > 0.0 && delta < 1.0 && p >= 1 && episodes >= 1,
            "OnlineConfig: lambda, c_beta, p, episodes must be positive and delta in (0, 1)");
    require(xi_down >= 0.0, "OnlineConfig: xi_down must be nonnegative");
  }
};

/// beta_n = c_beta * (d sqrt(iota_n) + sqrt(n d) xi_down + sqrt(p ln n)),
/// iota_n = ln(2 p d n H max{xi_down, 1} / delta).
inline double optimism_beta(const OnlineConfig& cfg, std::size_t d, std::size_t horizon, std::size_t n) {
  const double D = static_cast<double>(d), nn = static_cast<double>(n), P = static_cast<double>(cfg.p);
  const double iota =
      std::log(2.0 * P * D * nn * static_cast<double>(horizon) * std::max(cfg.xi_down, 1.0) / cfg.delta);
  return cfg.c_beta * (D * std::sqrt(iota) + std::sqrt(nn * D) * cfg.xi_down + std::sqrt(P * std::log(nn)));
}

struct BackupResult {
  StepTable q;  ///< horizon-1 table indexed (0, s, a)
  Eigen::VectorXd w;
  double residual = 0.0;
};

/// Q(s,a) = min{r_h(s,a) + phi^T w + beta ||phi||_{Lambda^{-1}}, 1}, floored
/// at 0.
inline BackupResult optimistic_q_backup(const FeatureTable& phi_hat, std::size_t h,
                                        std::span<const StateAction> history, std::span<const double> targets,
                                        const StepTable& reward, double beta, double lambda) {
  const Shape& sh = phi_hat.shape();
  require(reward.shape() == sh, "optimistic_q_backup: reward shape mismatch");
  const RidgeFit fit = ridge_weights(phi_hat, h, history, targets, lambda);
  const SpdSolver solver(fit.gram, "optimistic_q_backup");
  BackupResult out{StepTable(Shape{1, sh.states, sh.actions}, 0.0), fit.w, fit.residual};
  for (std::size_t s = 0; s < sh.states; ++s)
    for (std::size_t a = 0; a < sh.actions; ++a) {
      const auto f = phi_hat.at(h, s, a);
      const double q = reward(h, s, a) + as_vector(f).dot(fit.w) + beta * std::sqrt(solver.inverse_quadratic(f));
      if (!std::isfinite(q)) throw NumericalError("optimistic_q_backup: non-finite value");
      out.q(0, s, a) = std::clamp(q, 0.0, 1.0);
    }
  return out;
}

struct OnlineRunRecord {
  std::vector<Trajectory> trajectories;
  std::vector<Policy> policies;      ///< greedy pi^n
  std::vector<double> v1;            ///< V^n_1(s_1)
  std::vector<double> returns;       ///< realized return of episode n
  std::vector<double> betas;
  /// potentials[h][n] = phi(s_h^n, a_h^n)^T (Lambda_h^n)^{-1} phi(s_h^n, a_h^n)
  std::vector<std::vector<double>> potentials;
  double q_min = 1.0;  ///< extreme Q values seen over every (n, h, s, a)
  double q_max = 0.0;

  std::size_t episodes() const noexcept { return policies.size(); }
};

/// LSVI-UCB on the downstream task with a fixed feature map. Lambda_h is
/// updated by one rank-one term per episode; the regression targets are
/// recomputed every episode from visit counts n_h(s, a, s').
inline OnlineRunRecord run_lsvi_ucb(const TabularLowRankMdp& mdp, const RewardTable& reward,
                                    const FeatureTable& phi_hat, const OnlineConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  const Shape sh = mdp.shape();
  require(phi_hat.shape() == sh && reward.r.shape() == sh, "run_lsvi_ucb: shape mismatch");
  const std::size_t H = sh.horizon, S = sh.states, K = sh.actions;
  const auto d = static_cast<Eigen::Index>(phi_hat.dim());

  std::vector<Eigen::MatrixXd> gram(H, Eigen::MatrixXd::Identity(d, d) * cfg.lambda);
  std::vector<std::vector<double>> counts(H, std::vector<double>(S * K * S, 0.0));

  OnlineRunRecord rec;
  rec.potentials.assign(H, {});
  for (std::size_t n = 1; n <= cfg.episodes; ++n) {
    const double beta = optimism_beta(cfg, phi_hat.dim(), H, n);
    std::vector<double> v_next(S, 0.0), v(S, 0.0);
    std::vector<std::size_t> choice(H * S, 0);
    std::vector<SpdSolver> solvers;
    solvers.reserve(H);
    for (std::size_t h = 0; h < H; ++h)
      solvers.emplace_back(gram[h], "run_lsvi_ucb(n=" + std::to_string(n) + ", h=" + std::to_string(h) + ")");

    for (std::size_t h = H; h-- > 0;) {
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(d);
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < K; ++a) {
          const double* c = counts[h].data() + (s * K + a) * S;
          double target = 0.0;
          for (std::size_t sn = 0; sn < S; ++sn) target += c[sn] * v_next[sn];
          if (target != 0.0) rhs += as_vector(phi_hat.at(h, s, a)) * target;
        }
      const Eigen::VectorXd w = solvers[h].solve(rhs);
      if (!w.allFinite())
        throw NumericalError("run_lsvi_ucb: non-finite weights at n=" + std::to_string(n) + ", h=" + std::to_string(h));
      for (std::size_t s = 0; s < S; ++s) {
        double best = 0.0;
        std::size_t best_a = 0;
        for (std::size_t a = 0; a < K; ++a) {
          const auto f = phi_hat.at(h, s, a);
          const double raw =
              reward.r(h, s, a) + as_vector(f).dot(w) + beta * std::sqrt(solvers[h].inverse_quadratic(f));
          if (!std::isfinite(raw))
            throw NumericalError("run_lsvi_ucb: non-finite Q at n=" + std::to_string(n) + ", h=" + std::to_string(h));
          const double q = std::clamp(raw, 0.0, 1.0);
          rec.q_min = std::min(rec.q_min, q);
          rec.q_max = std::max(rec.q_max, q);
          if (a == 0 || q > best) {
            best = q;
            best_a = a;
          }
        }
        v[s] = best;
        choice[h * S + s] = best_a;
      }
      v_next.swap(v);
    }
    rec.v1.push_back(v_next[mdp.initial_state()]);
    rec.betas.push_back(beta);
    rec.policies.push_back(Policy::deterministic(sh, choice));

    Rng rng(derive_seed(seed, {n}));
    Trajectory tr;
    tr.seed = seed;
    std::size_t s = mdp.initial_state();
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t a = choice[h * S + s];
      const std::size_t sn = sample_next(mdp, h, s, a, rng);
      const auto f = phi_hat.at(h, s, a);
      rec.potentials[h].push_back(solvers[h].inverse_quadratic(f));
      tr.steps.push_back({s, a, reward.r(h, s, a), sn});
      add_outer(gram[h], f);
      counts[h][(s * K + a) * S + sn] += 1.0;
      s = sn;
    }
    rec.returns.push_back(tr.total_reward());
    rec.trajectories.push_back(std::move(tr));
  }
  return rec;
}

/// Exact value of the uniform mixture of pi^1..pi^N.
inline double mixture_value(const OnlineRunRecord& rec, const TabularLowRankMdp& mdp, const RewardTable& reward) {
  require(!rec.policies.empty(), "mixture_value: empty record");
  double total = 0.0;
  for (const auto& pi : rec.policies) total += value_dp(mdp, reward, pi);
  return total / static_cast<double>(rec.policies.size());
}

}  // namespace refuel
