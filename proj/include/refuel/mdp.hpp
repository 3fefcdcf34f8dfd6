#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "refuel/error.hpp"
#include "refuel/rng.hpp"
#include "refuel/tables.hpp"

namespace refuel {

/// Tolerance applied when validating tables that come from outside the
/// generator (files, user code).
inline constexpr double kLoadTolerance = 1e-6;
/// Inner products in [-kClampTolerance, 0) are clamped to zero.
inline constexpr double kClampTolerance = 1e-12;

/// Finite episodic MDP whose step-h kernel factors as <phi_h(s,a), mu_h(s')>.
///
/// Immutable after construction. The constructor validates the simplex /
/// column-stochastic normalization and caches the dense kernel
/// P_h(s'|s,a), clamping tiny negative inner products and renormalizing
/// each row.
class TabularLowRankMdp {
 public:
  TabularLowRankMdp() = default;

  TabularLowRankMdp(FeatureTable phi, MeasureTable mu, std::size_t initial_state = 0)
      : phi_(std::move(phi)), mu_(std::move(mu)), initial_state_(initial_state) {
    const Shape& sh = phi_.shape();
    require(sh.horizon > 0 && sh.states > 0 && sh.actions > 0 && phi_.dim() > 0,
            "TabularLowRankMdp: all sizes must be positive");
    require(mu_.horizon() == sh.horizon && mu_.states() == sh.states && mu_.dim() == phi_.dim(),
            "TabularLowRankMdp: phi and mu shapes disagree");
    require(initial_state_ < sh.states, "TabularLowRankMdp: initial state out of range");
    validate_factors();
    build_kernel();
  }

  const Shape& shape() const noexcept { return phi_.shape(); }
  std::size_t horizon() const noexcept { return phi_.shape().horizon; }
  std::size_t states() const noexcept { return phi_.shape().states; }
  std::size_t actions() const noexcept { return phi_.shape().actions; }
  std::size_t dim() const noexcept { return phi_.dim(); }
  std::size_t initial_state() const noexcept { return initial_state_; }
  const FeatureTable& phi() const noexcept { return phi_; }
  const MeasureTable& mu() const noexcept { return mu_; }

  /// Cached row P_h(.|s,a); no bounds checks.
  std::span<const double> next(std::size_t h, std::size_t s, std::size_t a) const noexcept {
    const std::size_t S = states();
    return {kernel_.data() + ((h * S + s) * actions() + a) * S, S};
  }

  friend bool operator==(const TabularLowRankMdp& x, const TabularLowRankMdp& y) {
    return x.phi_ == y.phi_ && x.mu_ == y.mu_ && x.initial_state_ == y.initial_state_;
  }

 private:
  void validate_factors() const {
    const Shape& sh = phi_.shape();
    for (std::size_t h = 0; h < sh.horizon; ++h)
      for (std::size_t s = 0; s < sh.states; ++s)
        for (std::size_t a = 0; a < sh.actions; ++a) {
          double sum = 0.0;
          for (double v : phi_.at(h, s, a)) {
            if (!std::isfinite(v) || v < -kClampTolerance)
              throw InputError("TabularLowRankMdp: phi entries must be finite and nonnegative");
            sum += v;
          }
          if (std::abs(sum - 1.0) > kLoadTolerance)
            throw InputError("TabularLowRankMdp: phi row at (h=" + std::to_string(h) + ", s=" + std::to_string(s) +
                             ", a=" + std::to_string(a) + ") does not sum to 1");
        }
    for (std::size_t h = 0; h < sh.horizon; ++h)
      for (std::size_t j = 0; j < phi_.dim(); ++j) {
        double sum = 0.0;
        for (std::size_t s = 0; s < sh.states; ++s) {
          const double v = mu_(h, s, j);
          if (!std::isfinite(v) || v < -kClampTolerance)
            throw InputError("TabularLowRankMdp: mu entries must be finite and nonnegative");
          sum += v;
        }
        if (std::abs(sum - 1.0) > kLoadTolerance)
          throw InputError("TabularLowRankMdp: mu latent column (h=" + std::to_string(h) + ", j=" +
                           std::to_string(j) + ") is not a distribution");
      }
  }

  void build_kernel() {
    const std::size_t H = horizon(), S = states(), K = actions(), d = dim();
    kernel_.assign(H * S * K * S, 0.0);
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t a = 0; a < K; ++a) {
          double* row = kernel_.data() + ((h * S + s) * K + a) * S;
          const auto f = phi_.at(h, s, a);
          double total = 0.0;
          for (std::size_t sn = 0; sn < S; ++sn) {
            const auto m = mu_.at(h, sn);
            double p = 0.0;
            for (std::size_t j = 0; j < d; ++j) p += f[j] * m[j];
            if (p < 0.0) {
              if (p < -kClampTolerance) throw InputError("TabularLowRankMdp: negative transition probability");
              p = 0.0;
            }
            row[sn] = p;
            total += p;
          }
          if (std::abs(total - 1.0) > kLoadTolerance || total <= 0.0)
            throw InputError("TabularLowRankMdp: kernel row does not sum to 1");
          for (std::size_t sn = 0; sn < S; ++sn) row[sn] /= total;
        }
  }

  FeatureTable phi_;
  MeasureTable mu_;
  std::size_t initial_state_ = 0;
  std::vector<double> kernel_;
};

/// Deterministic reward r_h(s, a) in [0, 1] plus the latent generator it came
/// from.
struct RewardTable {
  StepTable r;
  std::size_t feature_dim = 0;
  std::vector<double> theta;

  /// Sum over steps of the per-step maximum: an upper bound on the return of
  /// any trajectory.
  double trajectory_bound() const {
    double total = 0.0;
    for (std::size_t h = 0; h < r.horizon(); ++h) {
      double best = 0.0;
      for (std::size_t s = 0; s < r.states(); ++s)
        for (double v : r.row(h, s)) best = std::max(best, v);
      total += best;
    }
    return total;
  }

  void validate() const {
    for (double v : r.data())
      if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw InputError("RewardTable: entries must lie in [0, 1]");
    if (trajectory_bound() > 1.0 + 1e-12) throw InputError("RewardTable: sum over steps of max reward exceeds 1");
  }

  friend bool operator==(const RewardTable&, const RewardTable&) = default;
};

/// Markov policy pi_h(a|s).
class Policy {
 public:
  Policy() = default;
  explicit Policy(StepTable pi) : pi_(std::move(pi)) {
    for (std::size_t h = 0; h < pi_.horizon(); ++h)
      for (std::size_t s = 0; s < pi_.states(); ++s) {
        double sum = 0.0;
        for (double p : pi_.row(h, s)) {
          if (!std::isfinite(p) || p < 0.0) throw InputError("Policy: probabilities must be nonnegative");
          sum += p;
        }
        if (std::abs(sum - 1.0) > 1e-9) throw InputError("Policy: row does not sum to 1");
      }
  }

  static Policy uniform(Shape shape) {
    return Policy(StepTable(shape, 1.0 / static_cast<double>(shape.actions)));
  }

  /// actions[h * S + s] is the action taken at (h, s).
  static Policy deterministic(Shape shape, std::span<const std::size_t> actions) {
    require(actions.size() == shape.horizon * shape.states, "Policy::deterministic: wrong action count");
    StepTable t(shape, 0.0);
    for (std::size_t h = 0; h < shape.horizon; ++h)
      for (std::size_t s = 0; s < shape.states; ++s) {
        const std::size_t a = actions[h * shape.states + s];
        require(a < shape.actions, "Policy::deterministic: action out of range");
        t(h, s, a) = 1.0;
      }
    return Policy(std::move(t));
  }

  /// Random stochastic policy with flat-Dirichlet rows.
  static Policy random(Shape shape, std::uint64_t seed) {
    Rng rng(seed);
    StepTable t(shape, 0.0);
    for (std::size_t h = 0; h < shape.horizon; ++h)
      for (std::size_t s = 0; s < shape.states; ++s) {
        auto row = t.row(h, s);
        double total = 0.0;
        for (double& p : row) total += (p = rng.exponential());
        for (double& p : row) p /= total;
      }
    return Policy(std::move(t));
  }

  const Shape& shape() const noexcept { return pi_.shape(); }
  double operator()(std::size_t h, std::size_t s, std::size_t a) const noexcept { return pi_(h, s, a); }
  std::span<const double> row(std::size_t h, std::size_t s) const noexcept { return pi_.row(h, s); }
  const StepTable& table() const noexcept { return pi_; }

  friend bool operator==(const Policy&, const Policy&) = default;

 private:
  StepTable pi_;
};

/// occ[h][s][a] = Pr(s_h = s, a_h = a) under a model and a policy.
struct OccupancyMeasure {
  StepTable occ;
  std::string model_id;
  std::string policy_id;

  double operator()(std::size_t h, std::size_t s, std::size_t a) const noexcept { return occ(h, s, a); }

  double state_mass(std::size_t h, std::size_t s) const noexcept {
    double m = 0.0;
    for (double v : occ.row(h, s)) m += v;
    return m;
  }
};

struct TrajectoryStep {
  std::size_t state = 0;
  std::size_t action = 0;
  double reward = 0.0;
  std::size_t next_state = 0;

  friend bool operator==(const TrajectoryStep&, const TrajectoryStep&) = default;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  std::uint64_t seed = 0;

  double total_reward() const {
    double g = 0.0;
    for (const auto& st : steps) g += st.reward;
    return g;
  }

  friend bool operator==(const Trajectory&, const Trajectory&) = default;
};

/// Value tables V[h][s] for h in [0, H]; V[H] is identically zero.
using ValueTable = std::vector<std::vector<double>>;

struct OptimalSolution {
  double value = 0.0;
  Policy policy;
  ValueTable values;
};

namespace detail {

inline void require_shape(const TabularLowRankMdp& mdp, const Shape& other, const char* what) {
  if (!(mdp.shape() == other)) throw InputError(std::string(what) + ": shape mismatch with MDP");
}

inline double expect_next(const TabularLowRankMdp& mdp, std::size_t h, std::size_t s, std::size_t a,
                          const std::vector<double>& v) {
  const auto p = mdp.next(h, s, a);
  double e = 0.0;
  for (std::size_t sn = 0; sn < p.size(); ++sn) e += p[sn] * v[sn];
  return e;
}

}  // namespace detail

inline std::vector<double> transition_dist(const TabularLowRankMdp& mdp, std::size_t h, std::size_t s,
                                           std::size_t a) {
  if (h >= mdp.horizon() || s >= mdp.states() || a >= mdp.actions())
    throw InputError("transition_dist: index out of range");
  const auto row = mdp.next(h, s, a);
  return {row.begin(), row.end()};
}

/// Backward induction for a fixed policy; returns V[h][s] with V[H] = 0.
/// `reward` is any per-step table (not necessarily normalized).
inline ValueTable policy_values(const TabularLowRankMdp& mdp, const StepTable& reward, const Policy& policy) {
  detail::require_shape(mdp, reward.shape(), "policy_values(reward)");
  detail::require_shape(mdp, policy.shape(), "policy_values(policy)");
  const std::size_t H = mdp.horizon(), S = mdp.states(), K = mdp.actions();
  ValueTable v(H + 1, std::vector<double>(S, 0.0));
  for (std::size_t h = H; h-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double acc = 0.0;
      for (std::size_t a = 0; a < K; ++a) {
        const double p = policy(h, s, a);
        if (p == 0.0) continue;
        acc += p * (reward(h, s, a) + detail::expect_next(mdp, h, s, a, v[h + 1]));
      }
      v[h][s] = acc;
    }
  return v;
}

/// V^pi_{1,P,r}(s_1) by exact backward induction.
inline double value_dp(const TabularLowRankMdp& mdp, const RewardTable& reward, const Policy& policy) {
  return policy_values(mdp, reward.r, policy)[0][mdp.initial_state()];
}

/// Bellman optimality backup on an arbitrary per-step reward table.
/// Ties go to the lowest action index.
inline OptimalSolution backward_induction(const TabularLowRankMdp& mdp, const StepTable& reward) {
  detail::require_shape(mdp, reward.shape(), "optimal_dp");
  const std::size_t H = mdp.horizon(), S = mdp.states(), K = mdp.actions();
  ValueTable v(H + 1, std::vector<double>(S, 0.0));
  std::vector<std::size_t> choice(H * S, 0);
  for (std::size_t h = H; h-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double best = 0.0;
      std::size_t best_a = 0;
      for (std::size_t a = 0; a < K; ++a) {
        const double q = reward(h, s, a) + detail::expect_next(mdp, h, s, a, v[h + 1]);
        if (a == 0 || q > best) {
          best = q;
          best_a = a;
        }
      }
      v[h][s] = best;
      choice[h * S + s] = best_a;
    }
  OptimalSolution sol;
  sol.value = v[0][mdp.initial_state()];
  sol.policy = Policy::deterministic(mdp.shape(), choice);
  sol.values = std::move(v);
  return sol;
}

inline OptimalSolution optimal_dp(const TabularLowRankMdp& mdp, const RewardTable& reward) {
  return backward_induction(mdp, reward.r);
}

/// Forward recursion for the state-action occupancy of a policy.
inline OccupancyMeasure occupancy(const TabularLowRankMdp& mdp, const Policy& policy) {
  detail::require_shape(mdp, policy.shape(), "occupancy");
  const std::size_t H = mdp.horizon(), S = mdp.states(), K = mdp.actions();
  OccupancyMeasure out{StepTable(mdp.shape(), 0.0), {}, {}};
  std::vector<double> dist(S, 0.0), next(S, 0.0);
  dist[mdp.initial_state()] = 1.0;
  for (std::size_t h = 0; h < H; ++h) {
    std::fill(next.begin(), next.end(), 0.0);
    for (std::size_t s = 0; s < S; ++s) {
      if (dist[s] == 0.0) continue;
      for (std::size_t a = 0; a < K; ++a) {
        const double m = dist[s] * policy(h, s, a);
        out.occ(h, s, a) = m;
        if (m == 0.0) continue;
        const auto p = mdp.next(h, s, a);
        for (std::size_t sn = 0; sn < S; ++sn) next[sn] += m * p[sn];
      }
    }
    dist.swap(next);
  }
  return out;
}

/// State distribution at every step under a policy, d[h][s].
inline std::vector<std::vector<double>> state_distribution(const TabularLowRankMdp& mdp, const Policy& policy) {
  const auto occ = occupancy(mdp, policy);
  std::vector<std::vector<double>> d(mdp.horizon(), std::vector<double>(mdp.states(), 0.0));
  for (std::size_t h = 0; h < mdp.horizon(); ++h)
    for (std::size_t s = 0; s < mdp.states(); ++s) d[h][s] = occ.state_mass(h, s);
  return d;
}

/// Draws s' ~ P_h(.|s,a).
inline std::size_t sample_next(const TabularLowRankMdp& mdp, std::size_t h, std::size_t s, std::size_t a,
                               Rng& rng) {
  return rng.categorical(mdp.next(h, s, a));
}

inline Trajectory sample_trajectory(const TabularLowRankMdp& mdp, const StepTable& reward, const Policy& policy,
                                    std::uint64_t seed) {
  detail::require_shape(mdp, reward.shape(), "sample_trajectory(reward)");
  detail::require_shape(mdp, policy.shape(), "sample_trajectory(policy)");
  Rng rng(seed);
  Trajectory tr;
  tr.seed = seed;
  tr.steps.reserve(mdp.horizon());
  std::size_t s = mdp.initial_state();
  for (std::size_t h = 0; h < mdp.horizon(); ++h) {
    const std::size_t a = rng.categorical(policy.row(h, s));
    const std::size_t sn = sample_next(mdp, h, s, a, rng);
    tr.steps.push_back({s, a, reward(h, s, a), sn});
    s = sn;
  }
  return tr;
}

inline Trajectory sample_trajectory(const TabularLowRankMdp& mdp, const RewardTable& reward, const Policy& policy,
                                    std::uint64_t seed) {
  return sample_trajectory(mdp, reward.r, policy, seed);
}

/// Total variation distance 0.5 * sum |p_i - q_i|.
inline double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw InputError("tv_distance: length mismatch");
  double sp = 0.0, sq = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    sp += p[i];
    sq += q[i];
    acc += std::abs(p[i] - q[i]);
  }
  if (std::abs(sp - 1.0) > 1e-6 || std::abs(sq - 1.0) > 1e-6)
    throw InputError("tv_distance: arguments must be probability vectors");
  return std::min(1.0, 0.5 * acc);
}

/// |LHS - RHS| of the simulation identity
///   V^pi_{P1,r1} - V^pi_{P2,r2}
///     = sum_h E_{(s,a) ~ (P2,pi)} [ r1 - r2 + (P1_h - P2_h) V^pi_{h+1,P1,r1} ](s,a),
/// both sides evaluated exactly. Test oracle only.
inline double simulation_residual(const TabularLowRankMdp& p1, const TabularLowRankMdp& p2, const RewardTable& r1,
                                  const RewardTable& r2, const Policy& policy) {
  if (!(p1.shape() == p2.shape()) || p1.initial_state() != p2.initial_state())
    throw InputError("simulation_residual: models disagree in shape or initial state");
  const auto v1 = policy_values(p1, r1.r, policy);
  const auto v2 = policy_values(p2, r2.r, policy);
  const double lhs = v1[0][p1.initial_state()] - v2[0][p2.initial_state()];
  const auto occ = occupancy(p2, policy);
  double rhs = 0.0;
  for (std::size_t h = 0; h < p1.horizon(); ++h)
    for (std::size_t s = 0; s < p1.states(); ++s)
      for (std::size_t a = 0; a < p1.actions(); ++a) {
        const double m = occ(h, s, a);
        if (m == 0.0) continue;
        const double drift =
            detail::expect_next(p1, h, s, a, v1[h + 1]) - detail::expect_next(p2, h, s, a, v1[h + 1]);
        rhs += m * (r1.r(h, s, a) - r2.r(h, s, a) + drift);
      }
  return std::abs(lhs - rhs);
}

}  // namespace refuel
