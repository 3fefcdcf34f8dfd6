#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "refuel/envgen.hpp"
#include "refuel/error.hpp"
#include "refuel/linalg.hpp"
#include "refuel/mdp.hpp"
#include "refuel/rng.hpp"

namespace refuel {

/// REFUEL hyperparameters. The c_* multipliers scale the O(.) schedules,
/// which carry no fixed constants of their own.
struct HyperParams {
  double delta = 0.05;
  double eps_u = 0.15;
  double c_lambda = 1.0;
  double c_zeta = 1.0;
  double c_alpha = 1.0;
  double c_b = 1.0;
  std::size_t max_iterations = 2000;
  std::size_t planner_rounds = 10;
  double planner_tol = 1e-9;

  void validate() const {
    require(delta > 0.0 && delta < 1.0, "HyperParams: delta must lie in (0, 1)");
    require(eps_u > 0.0, "HyperParams: eps_u must be positive");
    require(c_lambda > 0.0 && c_zeta > 0.0 && c_alpha > 0.0 && c_b > 0.0, "HyperParams: multipliers must be positive");
    require(max_iterations >= 1, "HyperParams: max_iterations must be at least 1");
    require(planner_tol >= 0.0, "HyperParams: planner_tol must be nonnegative");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

struct ProblemDims {
  std::size_t dim = 0;
  std::size_t actions = 0;
  std::size_t tasks = 0;
  std::size_t horizon = 0;
  std::size_t phi_size = 0;
  std::size_t psi_size = 0;
};

struct ScheduleValues {
  std::size_t n = 0;
  double lambda = 0.0;
  double zeta = 0.0;
  double alpha_tilde = 0.0;
  double bonus_cap = 0.0;  ///< B

  friend bool operator==(const ScheduleValues&, const ScheduleValues&) = default;
};

/// Parameter schedules at iteration n. |Psi|^T enters only through
/// T * ln|Psi| so large T cannot overflow.
inline ScheduleValues schedule(std::size_t n, const ProblemDims& dims, const HyperParams& hp) {
  require(n >= 1, "schedule: n must be at least 1");
  const double nn = static_cast<double>(n);
  const double d = static_cast<double>(dims.dim), K = static_cast<double>(dims.actions);
  const double T = static_cast<double>(dims.tasks), H = static_cast<double>(dims.horizon);
  const double phi = static_cast<double>(dims.phi_size), psi = static_cast<double>(dims.psi_size);
  const double log_class = std::log(2.0 * phi * nn * H / hp.delta) + T * std::log(psi);
  ScheduleValues v;
  v.n = n;
  v.lambda = hp.c_lambda * d * std::log(phi * nn * T * H / hp.delta);
  v.zeta = hp.c_zeta * 2.0 * log_class / nn;
  v.alpha_tilde = hp.c_alpha * std::sqrt(2.0 * K * log_class + v.lambda * d * T);
  v.bonus_cap = hp.c_b * 2.0 * std::sqrt(T + K / (d * d));
  return v;
}

struct TransitionRecord {
  std::size_t iteration = 0;
  std::size_t state = 0;
  std::size_t action = 0;
  std::size_t next_state = 0;

  friend bool operator==(const TransitionRecord&, const TransitionRecord&) = default;
};

struct CovariancePair {
  std::size_t iteration = 0;
  std::size_t state = 0;
  std::size_t action = 0;

  friend bool operator==(const CovariancePair&, const CovariancePair&) = default;
};

/// triples[t][h]: one record per iteration, produced by episode h.
/// pairs[t][h] (h < H-1): the step-h pair of episode h+1, one per iteration.
struct ExplorationDatasets {
  std::vector<std::vector<std::vector<TransitionRecord>>> triples;
  std::vector<std::vector<std::vector<CovariancePair>>> pairs;

  ExplorationDatasets() = default;
  ExplorationDatasets(std::size_t tasks, std::size_t horizon)
      : triples(tasks, std::vector<std::vector<TransitionRecord>>(horizon)),
        pairs(tasks, std::vector<std::vector<CovariancePair>>(horizon > 0 ? horizon - 1 : 0)) {}

  std::size_t tasks() const noexcept { return triples.size(); }
  std::size_t horizon() const noexcept { return triples.empty() ? 0 : triples.front().size(); }

  friend bool operator==(const ExplorationDatasets&, const ExplorationDatasets&) = default;
};

/// One iteration of reward-free collection. For every task t and episode
/// index e in [0, H): roll pi_t for steps < e-1, act uniformly at steps e-1
/// and e, record (s_e, a_e, s_{e+1}) into D_e and, for e >= 1, the pair
/// (s_{e-1}, a_{e-1}) into the covariance list of step e-1.
inline void collect_iteration(const TaskFamily& family, std::span<const Policy> policies, std::size_t n,
                              ExplorationDatasets& data, std::uint64_t seed) {
  const std::size_t T = family.tasks(), H = family.shape().horizon, K = family.shape().actions;
  require(policies.size() == T, "collect_iteration: need one policy per task");
  require(data.tasks() == T && data.horizon() == H, "collect_iteration: dataset shape mismatch");
  require(n >= 1, "collect_iteration: n must be at least 1");
  for (std::size_t t = 0; t < T; ++t) {
    const TabularLowRankMdp& mdp = family.upstream[t];
    const Policy& pi = policies[t];
    for (std::size_t e = 0; e < H; ++e) {
      Rng rng(derive_seed(seed, {n, t, e}));
      std::size_t s = mdp.initial_state();
      const std::size_t uniform_from = e == 0 ? 0 : e - 1;
      for (std::size_t h = 0; h < uniform_from; ++h) {
        const std::size_t a = rng.categorical(pi.row(h, s));
        s = sample_next(mdp, h, s, a, rng);
      }
      if (e >= 1) {
        const std::size_t a = static_cast<std::size_t>(rng.below(K));
        data.pairs[t][e - 1].push_back({n, s, a});
        s = sample_next(mdp, e - 1, s, a, rng);
      }
      const std::size_t a = static_cast<std::size_t>(rng.below(K));
      const std::size_t sn = sample_next(mdp, e, s, a, rng);
      data.triples[t][e].push_back({n, s, a, sn});
    }
  }
}

/// ln <Phi_i(s,a), Psi_j(s')> for every class pair, step and transition.
/// Nonpositive probabilities map to -infinity.
class LogLikelihoodTable {
 public:
  explicit LogLikelihoodTable(const ModelClass& mc) : phi_size_(mc.phi.size()), psi_size_(mc.psi.size()) {
    require(!mc.phi.empty() && !mc.psi.empty(), "LogLikelihoodTable: empty class");
    const FeatureTable& f0 = mc.phi.front();
    shape_ = f0.shape();
    const std::size_t S = shape_.states, K = shape_.actions, H = shape_.horizon, d = f0.dim();
    for (const auto& f : mc.phi) require(f.shape() == shape_ && f.dim() == d, "LogLikelihoodTable: Phi shapes differ");
    for (const auto& m : mc.psi)
      require(m.horizon() == H && m.states() == S && m.dim() == d, "LogLikelihoodTable: Psi shapes differ");
    stride_ = H * S * K * S;
    logs_.resize(phi_size_ * psi_size_ * stride_);
    for (std::size_t i = 0; i < phi_size_; ++i)
      for (std::size_t j = 0; j < psi_size_; ++j)
        for (std::size_t h = 0; h < H; ++h)
          for (std::size_t s = 0; s < S; ++s)
            for (std::size_t a = 0; a < K; ++a) {
              const auto f = mc.phi[i].at(h, s, a);
              for (std::size_t sn = 0; sn < S; ++sn) {
                const auto m = mc.psi[j].at(h, sn);
                double p = 0.0;
                for (std::size_t k = 0; k < d; ++k) p += f[k] * m[k];
                logs_[index(i, j, h, s, a, sn)] = p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
              }
            }
  }

  std::size_t phi_size() const noexcept { return phi_size_; }
  std::size_t psi_size() const noexcept { return psi_size_; }
  const Shape& shape() const noexcept { return shape_; }

  double operator()(std::size_t i, std::size_t j, std::size_t h, const TransitionRecord& r) const noexcept {
    return logs_[index(i, j, h, r.state, r.action, r.next_state)];
  }

 private:
  std::size_t index(std::size_t i, std::size_t j, std::size_t h, std::size_t s, std::size_t a,
                    std::size_t sn) const noexcept {
    return (i * psi_size_ + j) * stride_ + ((h * shape_.states + s) * shape_.actions + a) * shape_.states + sn;
  }

  std::size_t phi_size_, psi_size_;
  Shape shape_;
  std::size_t stride_ = 0;
  std::vector<double> logs_;
};

struct MleSelection {
  std::size_t phi_index = 0;
  std::vector<std::size_t> mu_indices;
  double log_likelihood = 0.0;

  friend bool operator==(const MleSelection&, const MleSelection&) = default;
};

namespace upstream_detail {

/// scores[(i * T + t) * |Psi| + j] is the log-likelihood of task t's data
/// under <Phi_i, Psi_j>. For each i the task maxima decouple.
inline MleSelection select_from_scores(const std::vector<double>& scores, std::size_t phi_size, std::size_t tasks,
                                       std::size_t psi_size, std::size_t h) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  MleSelection best;
  best.log_likelihood = kNegInf;
  bool found = false;
  std::vector<std::size_t> mus(tasks);
  for (std::size_t i = 0; i < phi_size; ++i) {
    double total = 0.0;
    bool alive = true;
    for (std::size_t t = 0; t < tasks && alive; ++t) {
      double task_best = kNegInf;
      std::size_t arg = 0;
      for (std::size_t j = 0; j < psi_size; ++j) {
        const double v = scores[(i * tasks + t) * psi_size + j];
        if (v > task_best) {
          task_best = v;
          arg = j;
        }
      }
      if (task_best == kNegInf) alive = false;
      mus[t] = arg;
      total += task_best;
    }
    if (!alive) continue;
    if (!found || total > best.log_likelihood) {
      found = true;
      best.phi_index = i;
      best.mu_indices = mus;
      best.log_likelihood = total;
    }
  }
  if (!found)
    throw MleError("joint_mle: every candidate is inconsistent with the data at step " + std::to_string(h));
  return best;
}

}  // namespace upstream_detail

/// Total log-likelihood of the step-h data under (Phi_i, Psi_{j_1..j_T}).
inline double joint_log_likelihood(const ExplorationDatasets& data, const LogLikelihoodTable& ll, std::size_t h,
                                   std::size_t phi_index, std::span<const std::size_t> mu_indices) {
  double total = 0.0;
  for (std::size_t t = 0; t < data.tasks(); ++t) {
    double task = 0.0;
    for (const auto& r : data.triples[t][h]) task += ll(phi_index, mu_indices[t], h, r);
    total += task;
  }
  return total;
}

/// Joint maximum likelihood over Phi x Psi^T for step h, exploiting the
/// product structure: O(|Phi| * T * |Psi| * records). Ties go to the lowest
/// indices.
inline MleSelection joint_mle(const ExplorationDatasets& data, const ModelClass& classes, std::size_t h,
                              const LogLikelihoodTable* precomputed = nullptr) {
  require(h < data.horizon(), "joint_mle: step out of range");
  for (std::size_t t = 0; t < data.tasks(); ++t)
    require(!data.triples[t][h].empty(), "joint_mle: empty dataset for some task");
  std::optional<LogLikelihoodTable> own;
  if (precomputed == nullptr) own.emplace(classes);
  const LogLikelihoodTable& ll = precomputed ? *precomputed : *own;
  const std::size_t P = ll.phi_size(), Q = ll.psi_size(), T = data.tasks();
  std::vector<double> scores(P * T * Q, 0.0);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < Q; ++j) {
        double s = 0.0;
        for (const auto& r : data.triples[t][h]) s += ll(i, j, h, r);
        scores[(i * T + t) * Q + j] = s;
      }
  return upstream_detail::select_from_scores(scores, P, T, Q, h);
}

/// Running log-likelihood sums, updated as records arrive. Produces the
/// same selection as joint_mle on the accumulated data (records are summed
/// in arrival order in both).
class MleAccumulator {
 public:
  MleAccumulator(const ModelClass& classes, std::size_t tasks)
      : ll_(classes), tasks_(tasks),
        sums_(ll_.shape().horizon, std::vector<double>(ll_.phi_size() * tasks * ll_.psi_size(), 0.0)) {}

  void add(std::size_t t, std::size_t h, const TransitionRecord& r) {
    auto& row = sums_[h];
    const std::size_t P = ll_.phi_size(), Q = ll_.psi_size();
    for (std::size_t i = 0; i < P; ++i)
      for (std::size_t j = 0; j < Q; ++j) row[(i * tasks_ + t) * Q + j] += ll_(i, j, h, r);
  }

  MleSelection select(std::size_t h) const {
    return upstream_detail::select_from_scores(sums_[h], ll_.phi_size(), tasks_, ll_.psi_size(), h);
  }

  const LogLikelihoodTable& table() const noexcept { return ll_; }

 private:
  LogLikelihoodTable ll_;
  std::size_t tasks_;
  std::vector<std::vector<double>> sums_;
};

struct BonusResult {
  Eigen::MatrixXd covariance;  ///< U_h
  StepTable bonus;             ///< single-step table: horizon 1, indexed (0, s, a)
};

/// Covariance from visit counts: U = lambda I + sum_{s,a} n(s,a) phi phi^T,
/// and bonus(s,a) = min{alpha_tilde * ||phi(s,a)||_{U^{-1}}, B}.
inline BonusResult covariance_and_bonus_from_counts(const FeatureTable& phi_hat, std::size_t h,
                                                    const std::vector<double>& counts, const ScheduleValues& sched) {
  const Shape& sh = phi_hat.shape();
  require(h < sh.horizon, "covariance_and_bonus: step out of range");
  require(counts.size() == sh.states * sh.actions, "covariance_and_bonus: count table shape mismatch");
  const auto d = static_cast<Eigen::Index>(phi_hat.dim());
  BonusResult out{Eigen::MatrixXd::Identity(d, d) * sched.lambda, StepTable(Shape{1, sh.states, sh.actions}, 0.0)};
  for (std::size_t s = 0; s < sh.states; ++s)
    for (std::size_t a = 0; a < sh.actions; ++a) {
      const double c = counts[s * sh.actions + a];
      if (c != 0.0) add_outer(out.covariance, phi_hat.at(h, s, a), c);
    }
  const SpdSolver solver(out.covariance, "covariance_and_bonus(step " + std::to_string(h) + ")");
  for (std::size_t s = 0; s < sh.states; ++s)
    for (std::size_t a = 0; a < sh.actions; ++a) {
      const double b = sched.alpha_tilde * std::sqrt(solver.inverse_quadratic(phi_hat.at(h, s, a)));
      if (!std::isfinite(b)) throw NumericalError("covariance_and_bonus: non-finite bonus");
      out.bonus(0, s, a) = std::min(b, sched.bonus_cap);
    }
  return out;
}

inline BonusResult covariance_and_bonus(const FeatureTable& phi_hat, std::size_t h,
                                        std::span<const CovariancePair> pairs, const ScheduleValues& sched) {
  const Shape& sh = phi_hat.shape();
  require(h + 1 < sh.horizon, "covariance_and_bonus: bonuses exist only for steps before the last");
  std::vector<double> counts(sh.states * sh.actions, 0.0);
  for (const auto& p : pairs) {
    require(p.state < sh.states && p.action < sh.actions, "covariance_and_bonus: pair out of range");
    counts[p.state * sh.actions + p.action] += 1.0;
  }
  return covariance_and_bonus_from_counts(phi_hat, h, counts, sched);
}

/// x[h][t] = E_{(s,a) ~ (P_hat_t, pi_t)} b_t(h, s, a) for h < H-1.
inline std::vector<std::vector<double>> pcv_components(std::span<const TabularLowRankMdp> models,
                                                       std::span<const StepTable> bonuses,
                                                       std::span<const Policy> policies) {
  const std::size_t T = models.size();
  require(T > 0 && bonuses.size() == T && policies.size() == T, "pcv: need one model, bonus and policy per task");
  const Shape sh = models.front().shape();
  std::vector<std::vector<double>> x(sh.horizon > 0 ? sh.horizon - 1 : 0, std::vector<double>(T, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    require(models[t].shape() == sh && bonuses[t].shape() == sh && policies[t].shape() == sh,
            "pcv: shape mismatch");
    const auto occ = occupancy(models[t], policies[t]);
    for (std::size_t h = 0; h + 1 < sh.horizon; ++h) {
      double acc = 0.0;
      for (std::size_t s = 0; s < sh.states; ++s)
        for (std::size_t a = 0; a < sh.actions; ++a) acc += occ(h, s, a) * bonuses[t](h, s, a);
      x[h][t] = acc;
    }
  }
  return x;
}

inline double pcv_from_components(const std::vector<std::vector<double>>& x) {
  double total = 0.0;
  for (const auto& row : x) {
    double sq = 0.0;
    for (double v : row) sq += v * v;
    total += std::sqrt(sq);
  }
  return total;
}

/// Pseudo cumulative value: sum_{h < H-1} sqrt(sum_t x[h][t]^2).
inline double pcv(std::span<const TabularLowRankMdp> models, std::span<const StepTable> bonuses,
                  std::span<const Policy> policies) {
  return pcv_from_components(pcv_components(models, bonuses, policies));
}

struct PlanResult {
  std::vector<Policy> policies;
  double pcv = 0.0;
  std::vector<double> accepted;  ///< PCV of each accepted iterate, in order
};

/// Maximizes PCV over per-task policies by linearization ascent. PCV is
/// convex in the stacked vector x, so maximizing its supporting hyperplane
/// (a per-task DP with step weights w[h][t] = x[h][t] / ||x[h]||) never
/// decreases it. The best iterate is kept.
inline PlanResult plan_exploration(std::span<const TabularLowRankMdp> models, std::span<const StepTable> bonuses,
                                   const HyperParams& hp) {
  const std::size_t T = models.size();
  require(T > 0 && bonuses.size() == T, "plan_exploration: need one bonus table per task");
  const Shape sh = models.front().shape();

  auto best_response = [&](const std::vector<std::vector<double>>* weights) {
    std::vector<Policy> out;
    out.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      StepTable r(sh, 0.0);
      for (std::size_t h = 0; h + 1 < sh.horizon; ++h) {
        const double w = weights ? (*weights)[h][t] : 1.0;
        for (std::size_t s = 0; s < sh.states; ++s)
          for (std::size_t a = 0; a < sh.actions; ++a) r(h, s, a) = w * bonuses[t](h, s, a);
      }
      out.push_back(backward_induction(models[t], r).policy);
    }
    return out;
  };

  PlanResult res;
  res.policies = best_response(nullptr);
  auto x = pcv_components(models, bonuses, res.policies);
  res.pcv = pcv_from_components(x);
  res.accepted.push_back(res.pcv);

  for (std::size_t round = 0; round < hp.planner_rounds; ++round) {
    std::vector<std::vector<double>> w(x.size(), std::vector<double>(T, 0.0));
    for (std::size_t h = 0; h < x.size(); ++h) {
      double sq = 0.0;
      for (double v : x[h]) sq += v * v;
      const double norm = std::sqrt(sq + 1e-12);
      for (std::size_t t = 0; t < T; ++t) w[h][t] = x[h][t] / norm;
    }
    auto cand = best_response(&w);
    auto cx = pcv_components(models, bonuses, cand);
    const double value = pcv_from_components(cx);
    if (value <= res.pcv) break;
    const double gain = value - res.pcv;
    res.policies = std::move(cand);
    res.pcv = value;
    res.accepted.push_back(value);
    x = std::move(cx);
    if (gain < hp.planner_tol) break;
  }
  return res;
}

/// 2 * PCV + 2 * sqrt(K * T * zeta_n) <= T * eps_u.
inline bool check_termination(double pcv_value, const ScheduleValues& sched, std::size_t actions, std::size_t tasks,
                              double eps_u) {
  const double T = static_cast<double>(tasks);
  return 2.0 * pcv_value + 2.0 * std::sqrt(static_cast<double>(actions) * T * sched.zeta) <= T * eps_u;
}

/// Output of REFUEL: phi_hat and one measure per task, assembled per step
/// from the selected class members.
struct LearnedRepresentation {
  FeatureTable phi_hat;
  std::vector<MeasureTable> mu_hats;
  std::vector<std::size_t> phi_indices;               ///< [h]
  std::vector<std::vector<std::size_t>> mu_indices;   ///< [h][t]
  std::size_t n_u = 0;
  bool terminated = false;
  std::vector<ScheduleValues> schedules;
  std::vector<double> pcv_history;
  std::size_t initial_state = 0;

  std::size_t tasks() const noexcept { return mu_hats.size(); }

  /// Estimated kernel <phi_hat, mu_hat_t>.
  TabularLowRankMdp model(std::size_t t) const { return {phi_hat, mu_hats.at(t), initial_state}; }

  friend bool operator==(const LearnedRepresentation&, const LearnedRepresentation&) = default;
};

struct RefuelRun {
  LearnedRepresentation learned;
  ExplorationDatasets data;
  bool stopped_by_observer = false;
};

/// Called after every iteration with the current estimate; returning true
/// stops the run (used by experiments that monitor accuracy directly).
using RefuelObserver = std::function<bool(std::size_t n, const LearnedRepresentation&)>;

inline LearnedRepresentation assemble_representation(const ModelClass& classes,
                                                     const std::vector<MleSelection>& picks,
                                                     std::size_t initial_state) {
  const FeatureTable& f0 = classes.phi.front();
  const Shape sh = f0.shape();
  const std::size_t T = picks.front().mu_indices.size(), d = f0.dim();
  LearnedRepresentation rep;
  rep.phi_hat = FeatureTable(sh, d);
  rep.mu_hats.assign(T, MeasureTable(sh.horizon, sh.states, d));
  rep.initial_state = initial_state;
  for (std::size_t h = 0; h < sh.horizon; ++h) {
    const auto& pick = picks[h];
    rep.phi_indices.push_back(pick.phi_index);
    rep.mu_indices.push_back(pick.mu_indices);
    const FeatureTable& src = classes.phi[pick.phi_index];
    for (std::size_t s = 0; s < sh.states; ++s)
      for (std::size_t a = 0; a < sh.actions; ++a) {
        const auto from = src.at(h, s, a);
        std::copy(from.begin(), from.end(), rep.phi_hat.at(h, s, a).begin());
      }
    for (std::size_t t = 0; t < T; ++t) {
      const MeasureTable& m = classes.psi[pick.mu_indices[t]];
      for (std::size_t sn = 0; sn < sh.states; ++sn) {
        const auto from = m.at(h, sn);
        std::copy(from.begin(), from.end(), rep.mu_hats[t].at(h, sn).begin());
      }
    }
  }
  return rep;
}

inline ProblemDims problem_dims(const TaskFamily& family, const ModelClass& classes) {
  return {family.shared_phi.dim(), family.shape().actions, family.tasks(), family.shape().horizon, classes.phi.size(),
          classes.psi.size()};
}

/// REFUEL main loop: collect -> joint MLE per step -> covariance and bonus
/// -> PCV planning -> termination test. Non-termination within
/// max_iterations is reported through `terminated == false`.
inline RefuelRun run_refuel(const TaskFamily& family, const ModelClass& classes, const HyperParams& hp,
                            std::uint64_t seed, const RefuelObserver& observer = {}) {
  hp.validate();
  const Shape sh = family.shape();
  const std::size_t T = family.tasks(), H = sh.horizon;
  require(classes.truth_psi.size() == T, "run_refuel: model class does not match the number of tasks");
  const ProblemDims dims = problem_dims(family, classes);

  RefuelRun run;
  run.data = ExplorationDatasets(T, H);
  MleAccumulator mle(classes, T);
  // counts[t][h][s * K + a] of covariance pairs, h < H-1.
  std::vector<std::vector<std::vector<double>>> counts(
      T, std::vector<std::vector<double>>(H > 0 ? H - 1 : 0, std::vector<double>(sh.states * sh.actions, 0.0)));

  std::vector<Policy> policies(T, Policy::uniform(sh));
  LearnedRepresentation rep;
  for (std::size_t n = 1; n <= hp.max_iterations; ++n) {
    collect_iteration(family, policies, n, run.data, seed);
    for (std::size_t t = 0; t < T; ++t) {
      for (std::size_t h = 0; h < H; ++h) mle.add(t, h, run.data.triples[t][h].back());
      for (std::size_t h = 0; h + 1 < H; ++h) {
        const auto& p = run.data.pairs[t][h].back();
        counts[t][h][p.state * sh.actions + p.action] += 1.0;
      }
    }

    std::vector<MleSelection> picks;
    picks.reserve(H);
    for (std::size_t h = 0; h < H; ++h) picks.push_back(mle.select(h));
    auto snapshot = assemble_representation(classes, picks, family.upstream.front().initial_state());
    snapshot.schedules = std::move(rep.schedules);
    snapshot.pcv_history = std::move(rep.pcv_history);
    rep = std::move(snapshot);

    const ScheduleValues sched = schedule(n, dims, hp);
    std::vector<TabularLowRankMdp> models;
    std::vector<StepTable> bonuses;
    models.reserve(T);
    for (std::size_t t = 0; t < T; ++t) {
      models.push_back(rep.model(t));
      StepTable b(sh, 0.0);
      for (std::size_t h = 0; h + 1 < H; ++h) {
        const auto res = covariance_and_bonus_from_counts(rep.phi_hat, h, counts[t][h], sched);
        for (std::size_t s = 0; s < sh.states; ++s)
          for (std::size_t a = 0; a < sh.actions; ++a) b(h, s, a) = res.bonus(0, s, a);
      }
      bonuses.push_back(std::move(b));
    }

    PlanResult plan = plan_exploration(models, bonuses, hp);
    policies = std::move(plan.policies);
    rep.schedules.push_back(sched);
    rep.pcv_history.push_back(plan.pcv);
    rep.n_u = n;
    const bool done = check_termination(plan.pcv, sched, sh.actions, T, hp.eps_u);
    rep.terminated = done;
    if (observer && observer(n, rep)) {
      run.stopped_by_observer = !done;
      break;
    }
    if (done) break;
  }
  run.learned = std::move(rep);
  return run;
}

/// Greedy policy for a revealed reward on an estimated kernel.
inline Policy plan_with_reward(const TabularLowRankMdp& p_hat, const RewardTable& reward) {
  return optimal_dp(p_hat, reward).policy;
}

}  // namespace refuel
