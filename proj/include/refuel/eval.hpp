#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <mutex>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "refuel/envgen.hpp"
#include "refuel/error.hpp"
#include "refuel/linalg.hpp"
#include "refuel/mdp.hpp"
#include "refuel/online.hpp"
#include "refuel/report.hpp"
#include "refuel/rng.hpp"
#include "refuel/upstream.hpp"

namespace refuel {

/// Runs fn(i) for i in [0, count) on up to `jobs` threads. Results must be
/// written by index so the outcome does not depend on scheduling. The first
/// exception (lowest index) is rethrown.
template <class Fn>
void parallel_for(std::size_t count, std::size_t jobs, Fn&& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, count));
  if (jobs == 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  pool.reserve(jobs);
  for (std::size_t w = 0; w < jobs; ++w)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < count;) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

struct Estimate {
  double mean = 0.0;
  double stderr_ = 0.0;
};

inline Estimate sample_mean(std::span<const double> xs) {
  require(xs.size() >= 2, "sample_mean: need at least two samples");
  const double n = static_cast<double>(xs.size());
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= n;
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var /= n - 1.0;
  return {mean, std::sqrt(var / n)};
}

// ---------------------------------------------------------------- panels

/// One policy set = one policy per task. Set i, task t is a flat-Dirichlet
/// random policy seeded by (seed, i, t), so task t sees the same policies
/// whatever the number of tasks.
inline std::vector<std::vector<Policy>> random_policy_panel(Shape shape, std::size_t tasks, std::size_t count,
                                                            std::uint64_t seed) {
  std::vector<std::vector<Policy>> sets(count);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t t = 0; t < tasks; ++t) sets[i].push_back(Policy::random(shape, derive_seed(seed, {i, t})));
  return sets;
}

inline std::vector<RewardTable> random_rewards(Shape shape, std::size_t p, std::size_t count, std::uint64_t seed) {
  std::vector<RewardTable> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(generate_reward(shape, p, derive_seed(seed, {k})));
  return out;
}

/// Greedy policies of plan_with_reward on every task's estimated model, one
/// set per reward.
inline std::vector<std::vector<Policy>> greedy_policy_sets(const LearnedRepresentation& learned,
                                                           std::span<const RewardTable> rewards) {
  std::vector<std::vector<Policy>> sets;
  for (const auto& r : rewards) {
    std::vector<Policy> set;
    for (std::size_t t = 0; t < learned.tasks(); ++t) set.push_back(plan_with_reward(learned.model(t), r));
    sets.push_back(std::move(set));
  }
  return sets;
}

// ---------------------------------------------------------------- TV error

inline void check_learned(const TaskFamily& family, const LearnedRepresentation& learned) {
  require(learned.tasks() == family.tasks(), "learned representation does not cover every task");
  require(learned.phi_hat.shape() == family.shape(), "learned representation shape mismatch");
}

/// (1/T) sum_t E_{(s,a) ~ occ(P*_t, pi_t)}[ TV(P_hat_t(.|s,a), P*_t(.|s,a)) ]
/// at step h, for a single policy set.
inline double avg_tv_for_set(const TaskFamily& family, const LearnedRepresentation& learned,
                             std::span<const Policy> set, std::size_t h) {
  const Shape sh = family.shape();
  require(set.size() == family.tasks(), "avg_tv_error: policy set must hold one policy per task");
  require(h < sh.horizon, "avg_tv_error: step out of range");
  double total = 0.0;
  for (std::size_t t = 0; t < family.tasks(); ++t) {
    const auto occ = occupancy(family.upstream[t], set[t]);
    const auto hat = learned.model(t);
    double acc = 0.0;
    for (std::size_t s = 0; s < sh.states; ++s)
      for (std::size_t a = 0; a < sh.actions; ++a) {
        const double w = occ(h, s, a);
        if (w > 0.0) acc += w * tv_distance(hat.next(h, s, a), family.upstream[t].next(h, s, a));
      }
    total += acc;
  }
  return std::clamp(total / static_cast<double>(family.tasks()), 0.0, 1.0);
}

/// Worst case of avg_tv_for_set over the provided policy sets.
inline double avg_tv_error(const TaskFamily& family, const LearnedRepresentation& learned,
                           std::span<const std::vector<Policy>> policy_sets, std::size_t h) {
  check_learned(family, learned);
  require(!policy_sets.empty(), "avg_tv_error: no policy sets");
  double worst = 0.0;
  for (const auto& set : policy_sets) worst = std::max(worst, avg_tv_for_set(family, learned, set, h));
  return worst;
}

inline double worst_avg_tv_error(const TaskFamily& family, const LearnedRepresentation& learned,
                                 std::span<const std::vector<Policy>> policy_sets) {
  double worst = 0.0;
  for (std::size_t h = 0; h < family.shape().horizon; ++h)
    worst = std::max(worst, avg_tv_error(family, learned, policy_sets, h));
  return worst;
}

/// Sampling counterpart of avg_tv_for_set: rollouts under the true kernels,
/// averaging the TV at the visited (s_h, a_h).
inline Estimate avg_tv_monte_carlo(const TaskFamily& family, const LearnedRepresentation& learned,
                                   std::span<const Policy> set, std::size_t h, std::size_t episodes,
                                   std::uint64_t seed) {
  const Shape sh = family.shape();
  const StepTable zero(sh, 0.0);
  std::vector<double> samples(episodes, 0.0);
  for (std::size_t t = 0; t < family.tasks(); ++t) {
    const auto hat = learned.model(t);
    for (std::size_t e = 0; e < episodes; ++e) {
      const auto tr = sample_trajectory(family.upstream[t], zero, set[t], derive_seed(seed, {t, e}));
      const auto& st = tr.steps[h];
      samples[e] += tv_distance(hat.next(h, st.state, st.action), family.upstream[t].next(h, st.state, st.action)) /
                    static_cast<double>(family.tasks());
    }
  }
  return sample_mean(samples);
}

// ---------------------------------------------------------------- gaps

inline double suboptimality_gap(const TabularLowRankMdp& mdp, const RewardTable& reward, const Policy& policy) {
  return optimal_dp(mdp, reward).value - value_dp(mdp, reward, policy);
}

/// Mean over rewards and tasks of V*_t - V_t^{plan_with_reward(P_hat_t)},
/// both evaluated on the true task kernel.
inline double planning_suboptimality(const TaskFamily& family, const LearnedRepresentation& learned,
                                     std::span<const RewardTable> rewards) {
  check_learned(family, learned);
  require(!rewards.empty(), "planning_suboptimality: no rewards");
  double total = 0.0;
  for (const auto& r : rewards)
    for (std::size_t t = 0; t < family.tasks(); ++t)
      total += suboptimality_gap(family.upstream[t], r, plan_with_reward(learned.model(t), r));
  return total / static_cast<double>(rewards.size() * family.tasks());
}

inline Estimate value_monte_carlo(const TabularLowRankMdp& mdp, const RewardTable& reward, const Policy& policy,
                                  std::size_t episodes, std::uint64_t seed) {
  std::vector<double> samples(episodes);
  for (std::size_t e = 0; e < episodes; ++e)
    samples[e] = sample_trajectory(mdp, reward, policy, derive_seed(seed, {e})).total_reward();
  return sample_mean(samples);
}

/// PCV from sampled bonus means, with a delta-method standard error.
inline Estimate pcv_monte_carlo(std::span<const TabularLowRankMdp> models, std::span<const StepTable> bonuses,
                                std::span<const Policy> policies, std::size_t episodes, std::uint64_t seed) {
  const std::size_t T = models.size();
  require(T > 0 && bonuses.size() == T && policies.size() == T, "pcv_monte_carlo: need one of each per task");
  const std::size_t H = models.front().horizon();
  std::vector<std::vector<double>> x(H > 0 ? H - 1 : 0, std::vector<double>(T)), var = x;
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<std::vector<double>> samples(x.size(), std::vector<double>(episodes));
    for (std::size_t e = 0; e < episodes; ++e) {
      const auto tr = sample_trajectory(models[t], bonuses[t], policies[t], derive_seed(seed, {t, e}));
      for (std::size_t h = 0; h < x.size(); ++h) samples[h][e] = tr.steps[h].reward;
    }
    for (std::size_t h = 0; h < x.size(); ++h) {
      const auto est = sample_mean(samples[h]);
      x[h][t] = est.mean;
      var[h][t] = est.stderr_ * est.stderr_;
    }
  }
  double total_var = 0.0;
  for (std::size_t h = 0; h < x.size(); ++h) {
    double sq = 0.0;
    for (double v : x[h]) sq += v * v;
    if (sq <= 0.0) continue;
    for (std::size_t t = 0; t < T; ++t) total_var += x[h][t] * x[h][t] / sq * var[h][t];
  }
  return {pcv_from_components(x), std::sqrt(total_var)};
}

struct UpstreamGuarantee {
  double worst_tv = 0.0;     ///< over the random panel, the greedy sets and every step
  double panel_tv = 0.0;     ///< random panel only
  double planning_gap = 0.0; ///< mean plan_with_reward suboptimality
};

/// Evaluates a learned representation against the true tasks: a panel of
/// random policy sets plus the greedy sets of `reward_count` random rewards.
inline UpstreamGuarantee upstream_guarantee(const TaskFamily& family, const LearnedRepresentation& learned,
                                            std::size_t panel_size, std::size_t reward_count, std::uint64_t seed) {
  check_learned(family, learned);
  const auto panel = random_policy_panel(family.shape(), family.tasks(), panel_size, derive_seed(seed, {1}));
  const auto rewards = random_rewards(family.shape(), family.spec.reward_dim, reward_count, derive_seed(seed, {2}));
  auto sets = panel;
  for (auto& g : greedy_policy_sets(learned, rewards)) sets.push_back(std::move(g));
  UpstreamGuarantee g;
  g.panel_tv = worst_avg_tv_error(family, learned, panel);
  g.worst_tv = worst_avg_tv_error(family, learned, sets);
  g.planning_gap = planning_suboptimality(family, learned, rewards);
  return g;
}

// ---------------------------------------------------------------- MLE oracle

inline constexpr double kBruteForceLimit = 1e6;

/// Enumerates every (Phi_i, Psi_{j_1}, ..., Psi_{j_T}) and checks that the
/// selection of joint_mle attains the global maximum. Log-likelihoods are
/// recomputed here from the raw inner products.
inline bool brute_force_mle_check(const ExplorationDatasets& data, const ModelClass& classes, std::size_t h) {
  const std::size_t P = classes.phi.size(), Q = classes.psi.size(), T = data.tasks();
  const double combos = static_cast<double>(P) * std::pow(static_cast<double>(Q), static_cast<double>(T));
  if (combos > kBruteForceLimit)
    throw InputError("brute_force_mle_check: " + std::to_string(combos) + " combinations exceed the limit");
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  // ll[(i * T + t) * Q + j], summed in record order.
  std::vector<double> ll(P * T * Q, 0.0);
  for (std::size_t i = 0; i < P; ++i)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t j = 0; j < Q; ++j) {
        double sum = 0.0;
        for (const auto& r : data.triples[t][h]) {
          const auto f = classes.phi[i].at(h, r.state, r.action);
          const auto m = classes.psi[j].at(h, r.next_state);
          double p = 0.0;
          for (std::size_t k = 0; k < f.size(); ++k) p += f[k] * m[k];
          sum += p > 0.0 ? std::log(p) : kNegInf;
        }
        ll[(i * T + t) * Q + j] = sum;
      }

  double best = kNegInf;
  std::vector<std::size_t> idx(T, 0);
  for (std::size_t i = 0; i < P; ++i) {
    std::fill(idx.begin(), idx.end(), 0);
    for (;;) {
      double total = 0.0;
      for (std::size_t t = 0; t < T; ++t) total += ll[(i * T + t) * Q + idx[t]];
      best = std::max(best, total);
      std::size_t t = 0;
      while (t < T && ++idx[t] == Q) idx[t++] = 0;
      if (t == T) break;
    }
  }
  MleSelection pick;
  try {
    pick = joint_mle(data, classes, h);
  } catch (const MleError&) {
    return best == kNegInf;
  }
  double chosen = 0.0;
  for (std::size_t t = 0; t < T; ++t) chosen += ll[(pick.phi_index * T + t) * Q + pick.mu_indices[t]];
  return chosen >= best - 1e-9 * std::max(1.0, std::abs(best));
}

// ---------------------------------------------------------------- elliptical

struct EllipticalResult {
  double lhs = 0.0;
  double bound = 0.0;
  bool ok = true;
};

/// lhs = sum_n x_n^T M_{n-1}^{-1} x_n with M_0 = lambda I and
/// M_n = M_{n-1} + x_n x_n^T; bound = 2 d ln(1 + N / (d lambda)).
inline EllipticalResult elliptical_check(std::span<const std::vector<double>> trace, double lambda, std::size_t d) {
  require(lambda > 0.0 && d >= 1, "elliptical_check: lambda and d must be positive");
  Eigen::MatrixXd m = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(d)) * lambda;
  EllipticalResult res;
  for (const auto& x : trace) {
    require(x.size() == d, "elliptical_check: vector dimension mismatch");
    res.lhs += SpdSolver(m, "elliptical_check").inverse_quadratic(x);
    add_outer(m, x);
  }
  const double D = static_cast<double>(d);
  res.bound = 2.0 * D * std::log(1.0 + static_cast<double>(trace.size()) / (D * lambda));
  res.ok = res.lhs <= res.bound + 1e-9;
  return res;
}

/// phi_hat(s_h^n, a_h^n) for every episode of an online run.
inline std::vector<std::vector<double>> online_feature_trace(const OnlineRunRecord& rec, const FeatureTable& phi_hat,
                                                             std::size_t h) {
  std::vector<std::vector<double>> out;
  out.reserve(rec.trajectories.size());
  for (const auto& tr : rec.trajectories) {
    const auto f = phi_hat.at(h, tr.steps[h].state, tr.steps[h].action);
    out.emplace_back(f.begin(), f.end());
  }
  return out;
}

/// regret[n] = V* - V^{pi^n}, per episode, on the true model.
inline std::vector<double> episode_regret(const OnlineRunRecord& rec, const TabularLowRankMdp& mdp,
                                          const RewardTable& reward) {
  const double v_star = optimal_dp(mdp, reward).value;
  std::vector<double> out;
  out.reserve(rec.policies.size());
  for (const auto& pi : rec.policies) out.push_back(v_star - value_dp(mdp, reward, pi));
  return out;
}

// ---------------------------------------------------------------- multitask

/// The first `tasks` upstream tasks of a family, with the matching model
/// class truths. Classes are shared so that per-task difficulty is matched.
inline TaskFamily subfamily(const TaskFamily& family, std::size_t tasks) {
  require(tasks >= 1 && tasks <= family.tasks(), "subfamily: task count out of range");
  TaskFamily sub = family;
  sub.spec.tasks = tasks;
  sub.mus.resize(tasks);
  sub.upstream.resize(tasks);
  sub.rewards.resize(tasks);
  sub.coefficients.resize(tasks);
  sub.constants.reset();
  return sub;
}

inline ModelClass subclasses(const ModelClass& classes, std::size_t tasks) {
  require(tasks >= 1 && tasks <= classes.truth_psi.size(), "subclasses: task count out of range");
  ModelClass sub = classes;
  sub.truth_psi.resize(tasks);
  return sub;
}

struct MultitaskConfig {
  FamilySpec family;  ///< tasks = the largest T in the grid
  std::vector<std::size_t> task_grid{1, 8};
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  HyperParams hp;
  double tv_target = 0.20;
  std::size_t panel_size = 20;
  std::size_t jobs = 1;
};

struct MultitaskCell {
  std::size_t tasks = 0;
  std::uint64_t seed = 0;
  bool reached = false;
  std::size_t iterations = 0;
  double per_task_trajectories = 0.0;  ///< n * H
  double final_tv = 0.0;
};

inline MultitaskCell run_multitask_cell(const MultitaskConfig& cfg, std::size_t tasks, std::uint64_t seed) {
  FamilySpec spec = cfg.family;
  spec.seed = seed;
  const TaskFamily full = generate_family(spec);
  const ModelClass full_classes = generate_model_classes(full, spec, derive_seed(seed, {101}));
  const TaskFamily fam = subfamily(full, tasks);
  const ModelClass classes = subclasses(full_classes, tasks);
  const auto panel = random_policy_panel(fam.shape(), tasks, cfg.panel_size, derive_seed(seed, {102}));

  MultitaskCell cell{tasks, seed, false, 0, 0.0, 1.0};
  const auto run = run_refuel(fam, classes, cfg.hp, derive_seed(seed, {103}),
                              [&](std::size_t n, const LearnedRepresentation& rep) {
                                cell.iterations = n;
                                cell.final_tv = worst_avg_tv_error(fam, rep, panel);
                                cell.reached = cell.final_tv <= cfg.tv_target;
                                return cell.reached;
                              });
  (void)run;
  const std::size_t counted = cell.reached ? cell.iterations : cfg.hp.max_iterations;
  cell.per_task_trajectories = static_cast<double>(counted * fam.shape().horizon);
  return cell;
}

/// Runs every (T, seed) cell of the grid until the worst panel TV error
/// falls below the target. Unreached cells count at the iteration budget
/// and are flagged.
inline RunReport multitask_benefit_experiment(const MultitaskConfig& cfg) {
  require(!cfg.task_grid.empty() && !cfg.seeds.empty(), "multitask_benefit_experiment: empty grid");
  for (std::size_t T : cfg.task_grid)
    require(T >= 1 && T <= cfg.family.tasks, "multitask_benefit_experiment: grid T exceeds family tasks");
  const std::size_t G = cfg.task_grid.size(), N = cfg.seeds.size();
  std::vector<MultitaskCell> cells(G * N);
  parallel_for(G * N, cfg.jobs,
               [&](std::size_t i) { cells[i] = run_multitask_cell(cfg, cfg.task_grid[i / N], cfg.seeds[i % N]); });

  RunReport rep;
  rep.kind = "compare_report";
  rep.seeds = cfg.seeds;
  Curve rows{{"tasks", "seed", "reached", "iterations", "per_task_trajectories", "final_tv"}, {}};
  for (const auto& c : cells)
    rows.rows.push_back({static_cast<double>(c.tasks), static_cast<double>(c.seed), c.reached ? 1.0 : 0.0,
                         static_cast<double>(c.iterations), c.per_task_trajectories, c.final_tv});
  rep.curves["cells"] = std::move(rows);

  std::vector<double> medians(G);
  for (std::size_t g = 0; g < G; ++g) {
    std::vector<double> v;
    double reached = 0.0;
    for (std::size_t k = 0; k < N; ++k) {
      v.push_back(cells[g * N + k].per_task_trajectories);
      reached += cells[g * N + k].reached ? 1.0 : 0.0;
    }
    medians[g] = median(v);
    const std::string T = std::to_string(cfg.task_grid[g]);
    rep.metrics["median_per_task_trajectories_T" + T] = medians[g];
    rep.metrics["reached_fraction_T" + T] = reached / static_cast<double>(N);
  }
  const auto one = std::find(cfg.task_grid.begin(), cfg.task_grid.end(), std::size_t{1});
  if (one != cfg.task_grid.end()) {
    const double base = medians[static_cast<std::size_t>(one - cfg.task_grid.begin())];
    for (std::size_t g = 0; g < G; ++g)
      if (cfg.task_grid[g] != 1)
        rep.metrics["ratio_T" + std::to_string(cfg.task_grid[g]) + "_vs_T1"] = medians[g] / base;
  }
  return rep;
}

}  // namespace refuel
