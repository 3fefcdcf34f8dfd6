#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "helpers.hpp"

using namespace refuel;
using namespace testing_helpers;

namespace {

const ProblemDims kDims{2, 3, 4, 4, 6, 12};

FamilySpec small_spec(std::uint64_t seed, std::size_t phi, std::size_t psi, std::size_t tasks) {
  FamilySpec spec;
  spec.seed = seed;
  spec.phi_class_size = phi;
  spec.psi_class_size = psi;
  spec.tasks = tasks;
  return spec;
}

ExplorationDatasets collect(const TaskFamily& fam, std::size_t iterations, std::uint64_t seed) {
  ExplorationDatasets data(fam.tasks(), fam.shape().horizon);
  const std::vector<Policy> pols(fam.tasks(), Policy::uniform(fam.shape()));
  for (std::size_t n = 1; n <= iterations; ++n) collect_iteration(fam, pols, n, data, seed);
  return data;
}

// Log-likelihood straight from the class tables, for the enumeration oracle.
double direct_loglik(const ExplorationDatasets& data, const ModelClass& mc, std::size_t h, std::size_t i,
                     const std::vector<std::size_t>& js) {
  double total = 0.0;
  for (std::size_t t = 0; t < data.tasks(); ++t)
    for (const auto& r : data.triples[t][h]) {
      const auto f = mc.phi[i].at(h, r.state, r.action);
      const auto m = mc.psi[js[t]].at(h, r.next_state);
      double p = 0.0;
      for (std::size_t k = 0; k < f.size(); ++k) p += f[k] * m[k];
      total += p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
    }
  return total;
}

std::vector<StepTable> random_bonuses(Shape sh, std::size_t T, std::uint64_t seed) {
  std::vector<StepTable> out;
  Rng rng(seed);
  for (std::size_t t = 0; t < T; ++t) {
    StepTable b(sh, 0.0);
    for (std::size_t h = 0; h + 1 < sh.horizon; ++h)
      for (std::size_t s = 0; s < sh.states; ++s)
        for (std::size_t a = 0; a < sh.actions; ++a) b(h, s, a) = rng.uniform();
    out.push_back(b);
  }
  return out;
}

}  // namespace

// Frozen from an independent evaluation of the closed-form schedules.
TEST(Upstream, ScheduleGoldenValues) {
  const auto v = schedule(1, kDims, HyperParams{});
  EXPECT_NEAR(v.lambda, 15.120160930043655, 1e-12);
  EXPECT_NEAR(v.zeta, 33.613119767227765, 1e-12);
  EXPECT_NEAR(v.alpha_tilde, 14.892973065913754, 1e-12);
  EXPECT_NEAR(v.bonus_cap, 4.358898943540674, 1e-12);
  EXPECT_THROW(schedule(0, kDims, HyperParams{}), InputError);
}

TEST(Upstream, ScheduleMonotonicity) {
  const HyperParams hp;
  for (std::size_t n = 1; n < 500; ++n) {
    const auto a = schedule(n, kDims, hp), b = schedule(n + 1, kDims, hp), c = schedule(2 * n, kDims, hp);
    EXPECT_GT(a.lambda, 0.0);
    EXPECT_GT(a.zeta, 0.0);
    EXPECT_LT(b.zeta, a.zeta);
    EXPECT_LT(c.zeta, a.zeta);
    EXPECT_GE(b.alpha_tilde, a.alpha_tilde);
    EXPECT_EQ(a.bonus_cap, b.bonus_cap);
    // zeta * n grows only through ln n.
    const double lhs = c.zeta * (2.0 * n) - a.zeta * n;
    EXPECT_NEAR(lhs, 2.0 * std::log(2.0), 1e-9);
  }
}

TEST(Upstream, MultipliersScaleLinearly) {
  HyperParams hp;
  hp.c_zeta = 0.01;
  hp.c_alpha = 0.02;
  hp.c_lambda = 3.0;
  hp.c_b = 0.5;
  const auto base = schedule(7, kDims, HyperParams{});
  HyperParams lam_only;
  lam_only.c_lambda = 3.0;
  const auto v = schedule(7, kDims, hp);
  EXPECT_NEAR(v.zeta, 0.01 * base.zeta, 1e-12);
  EXPECT_NEAR(v.lambda, 3.0 * base.lambda, 1e-12);
  EXPECT_NEAR(v.bonus_cap, 0.5 * base.bonus_cap, 1e-12);
  EXPECT_NEAR(v.alpha_tilde, 0.02 * schedule(7, kDims, lam_only).alpha_tilde, 1e-12);
}

TEST(Upstream, DatasetCardinality) {
  const auto fam = generate_family(small_spec(1, 6, 12, 4));
  const auto data = collect(fam, 25, 3);
  for (std::size_t t = 0; t < 4; ++t) {
    for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(data.triples[t][h].size(), 25u);
    ASSERT_EQ(data.pairs[t].size(), 3u);
    for (std::size_t h = 0; h < 3; ++h) EXPECT_EQ(data.pairs[t][h].size(), 25u);
    for (const auto& r : data.triples[t][0]) EXPECT_EQ(r.state, fam.upstream[t].initial_state());
    for (std::size_t n = 0; n < 25; ++n) EXPECT_EQ(data.triples[t][2][n].iteration, n + 1);
  }
}

TEST(Upstream, CollectionIsDeterministic) {
  const auto fam = generate_family(small_spec(2, 6, 12, 4));
  EXPECT_EQ(collect(fam, 10, 5), collect(fam, 10, 5));
  EXPECT_FALSE(collect(fam, 10, 5) == collect(fam, 10, 6));
}

TEST(Upstream, RecordedActionsAreUniform) {
  const auto fam = generate_family(small_spec(3, 6, 12, 4));
  const std::size_t N = 10000;
  const auto data = collect(fam, N, 11);
  const double K = 3.0;
  for (std::size_t h = 0; h < 4; ++h) {
    std::vector<double> counts(3, 0.0);
    for (std::size_t t = 0; t < 4; ++t)
      for (const auto& r : data.triples[t][h]) counts[r.action] += 1.0;
    const double total = 4.0 * N, p = 1.0 / K, sigma = std::sqrt(p * (1 - p) / total);
    for (double c : counts) EXPECT_NEAR(c / total, p, 3.0 * sigma);
  }
}

TEST(Upstream, SingletonClassesSelectIndexZero) {
  FamilySpec spec = small_spec(4, 1, 1, 1);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 1);
  const auto data = collect(fam, 5, 1);
  for (std::size_t h = 0; h < 4; ++h) {
    const auto pick = joint_mle(data, mc, h);
    EXPECT_EQ(pick.phi_index, 0u);
    EXPECT_EQ(pick.mu_indices, std::vector<std::size_t>{0});
  }
}

TEST(Upstream, MleDominatesTruthLikelihood) {
  const FamilySpec spec = small_spec(5, 6, 12, 4);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 7);
  const auto data = collect(fam, 40, 2);
  const LogLikelihoodTable ll(mc);
  for (std::size_t h = 0; h < 4; ++h) {
    const auto pick = joint_mle(data, mc, h, &ll);
    const double truth = joint_log_likelihood(data, ll, h, mc.truth_phi, mc.truth_psi);
    EXPECT_GE(pick.log_likelihood, truth);
    EXPECT_NEAR(pick.log_likelihood, joint_log_likelihood(data, ll, h, pick.phi_index, pick.mu_indices), 1e-9);
  }
}

TEST(Upstream, MleMatchesBruteForceEnumeration) {
  const FamilySpec spec = small_spec(6, 3, 3, 2);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 8);
  const auto data = collect(fam, 500, 4);
  for (std::size_t h = 0; h < spec.horizon; ++h) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t bi = 0;
    std::vector<std::size_t> bj;
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j0 = 0; j0 < 3; ++j0)
        for (std::size_t j1 = 0; j1 < 3; ++j1) {
          const double v = direct_loglik(data, mc, h, i, {j0, j1});
          if (v > best) {
            best = v;
            bi = i;
            bj = {j0, j1};
          }
        }
    const auto pick = joint_mle(data, mc, h);
    EXPECT_EQ(pick.phi_index, bi);
    EXPECT_EQ(pick.mu_indices, bj);
    EXPECT_NEAR(pick.log_likelihood, best, 1e-9 * std::abs(best));
  }
}

TEST(Upstream, AccumulatorAgreesWithBatchMle) {
  const FamilySpec spec = small_spec(7, 6, 12, 4);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 9);
  const auto data = collect(fam, 30, 3);
  MleAccumulator acc(mc, 4);
  for (std::size_t n = 0; n < 30; ++n)
    for (std::size_t t = 0; t < 4; ++t)
      for (std::size_t h = 0; h < 4; ++h) acc.add(t, h, data.triples[t][h][n]);
  for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(acc.select(h), joint_mle(data, mc, h));
}

TEST(Upstream, InconsistentClassIsAnMleError) {
  const Shape sh{1, 2, 1};
  // The only candidate never moves to state 1; the data does.
  FeatureTable phi(sh, 1, {1.0, 1.0});
  MeasureTable mu(1, 2, 1, {1.0, 0.0});
  const ModelClass mc{{phi}, {mu}, 0, {0}};
  ExplorationDatasets data(1, 1);
  data.triples[0][0].push_back({1, 0, 0, 1});
  EXPECT_THROW(joint_mle(data, mc, 0), MleError);
  ExplorationDatasets empty(1, 1);
  EXPECT_THROW(joint_mle(empty, mc, 0), InputError);
}

TEST(Upstream, BonusWithoutPairs) {
  const auto phi = random_mdp({3, 4, 2}, 3, 1).phi();
  const auto sched = schedule(3, kDims, HyperParams{});
  const auto res = covariance_and_bonus(phi, 1, {}, sched);
  EXPECT_TRUE(res.covariance.isApprox(Eigen::MatrixXd::Identity(3, 3) * sched.lambda));
  for (std::size_t s = 0; s < 4; ++s)
    for (std::size_t a = 0; a < 2; ++a) {
      const double norm = as_vector(phi.at(1, s, a)).norm();
      EXPECT_NEAR(res.bonus(0, s, a), std::min(sched.alpha_tilde * norm / std::sqrt(sched.lambda), sched.bonus_cap),
                  1e-12);
    }
}

TEST(Upstream, BonusMatchesIndependentSolve) {
  const Shape sh{3, 5, 3};
  const auto phi = random_mdp(sh, 4, 2).phi();
  Rng rng(3);
  std::vector<CovariancePair> pairs;
  for (std::size_t i = 0; i < 200; ++i) pairs.push_back({i + 1, rng.below(5), rng.below(3)});
  ScheduleValues sched{1, 0.7, 1.0, 2.5, 100.0};
  const auto res = covariance_and_bonus(phi, 0, pairs, sched);
  Eigen::MatrixXd u = Eigen::MatrixXd::Identity(4, 4) * 0.7;
  for (const auto& p : pairs) {
    const Eigen::VectorXd v = as_vector(phi.at(0, p.state, p.action));
    u += v * v.transpose();
  }
  EXPECT_LE((u - res.covariance).cwiseAbs().maxCoeff(), 1e-9);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(res.covariance);
  EXPECT_GE(eig.eigenvalues().minCoeff(), 0.7 - 1e-9);
  const Eigen::FullPivLU<Eigen::MatrixXd> lu(u);
  for (std::size_t s = 0; s < 5; ++s)
    for (std::size_t a = 0; a < 3; ++a) {
      const Eigen::VectorXd v = as_vector(phi.at(0, s, a));
      const double quad = v.dot(lu.solve(v));
      EXPECT_NEAR(res.bonus(0, s, a), 2.5 * std::sqrt(quad), 1e-10);
    }
}

TEST(Upstream, BonusIsCapped) {
  const auto phi = random_mdp({3, 4, 2}, 2, 4).phi();
  ScheduleValues sched{1, 0.01, 1.0, 50.0, 0.3};
  const auto res = covariance_and_bonus(phi, 0, {}, sched);
  for (double b : res.bonus.data()) EXPECT_LE(b, 0.3);
  EXPECT_THROW(covariance_and_bonus(phi, 2, {}, sched), InputError);
}

TEST(Upstream, PcvSingleTaskIsASum) {
  const Shape sh{4, 3, 2};
  const std::vector<TabularLowRankMdp> models{random_mdp(sh, 2, 5)};
  const auto bonuses = random_bonuses(sh, 1, 6);
  const std::vector<Policy> pols{Policy::random(sh, 7)};
  const auto x = pcv_components(models, bonuses, pols);
  double sum = 0.0;
  for (const auto& row : x) sum += row[0];
  EXPECT_NEAR(pcv(models, bonuses, pols), sum, 1e-14);
}

TEST(Upstream, PcvConstantBonus) {
  const Shape sh{5, 3, 2};
  const double b = 0.37;
  for (std::size_t T : {1u, 2u, 4u}) {
    std::vector<TabularLowRankMdp> models;
    std::vector<StepTable> bonuses;
    std::vector<Policy> pols;
    for (std::size_t t = 0; t < T; ++t) {
      models.push_back(random_mdp(sh, 2, 10 + t));
      StepTable bt(sh, b);
      bonuses.push_back(bt);
      pols.push_back(Policy::random(sh, 20 + t));
    }
    EXPECT_NEAR(pcv(models, bonuses, pols), 4.0 * std::sqrt(static_cast<double>(T)) * b, 1e-12);
  }
}

TEST(Upstream, PcvComponentsMatchRollouts) {
  const Shape sh{4, 3, 2};
  const std::size_t T = 2, N = 100000;
  std::vector<TabularLowRankMdp> models{random_mdp(sh, 2, 30), random_mdp(sh, 2, 31)};
  const auto bonuses = random_bonuses(sh, T, 32);
  std::vector<Policy> pols{Policy::random(sh, 33), Policy::random(sh, 34)};
  const auto x = pcv_components(models, bonuses, pols);
  for (std::size_t t = 0; t < T; ++t) {
    std::vector<double> sum(3, 0.0), sq(3, 0.0);
    for (std::size_t e = 0; e < N; ++e) {
      const auto tr = sample_trajectory(models[t], bonuses[t], pols[t], derive_seed(35, {t, e}));
      for (std::size_t h = 0; h < 3; ++h) {
        sum[h] += tr.steps[h].reward;
        sq[h] += tr.steps[h].reward * tr.steps[h].reward;
      }
    }
    for (std::size_t h = 0; h < 3; ++h) {
      const double m = sum[h] / N, var = sq[h] / N - m * m;
      EXPECT_NEAR(x[h][t], m, 3.0 * std::sqrt(var / N));
    }
  }
}

TEST(Upstream, PlannerAscendsAndBeatsInitialization) {
  const Shape sh{4, 4, 3};
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<TabularLowRankMdp> models;
    for (std::size_t t = 0; t < 3; ++t) models.push_back(random_mdp(sh, 2, derive_seed(seed, {t})));
    const auto bonuses = random_bonuses(sh, 3, derive_seed(seed, {9}));
    const auto res = plan_exploration(models, bonuses, HyperParams{});
    ASSERT_FALSE(res.accepted.empty());
    for (std::size_t i = 1; i < res.accepted.size(); ++i) EXPECT_GE(res.accepted[i], res.accepted[i - 1]);
    EXPECT_GE(res.pcv, res.accepted.front());
    EXPECT_NEAR(res.pcv, pcv(models, bonuses, res.policies), 1e-12);
    // Initialization is the per-task greedy policy.
    std::vector<Policy> greedy;
    for (std::size_t t = 0; t < 3; ++t) {
      StepTable r = bonuses[t];
      greedy.push_back(backward_induction(models[t], r).policy);
    }
    EXPECT_GE(res.pcv + 1e-12, pcv(models, bonuses, greedy));
  }
}

TEST(Upstream, PlannerAgainstExhaustiveSearch) {
  const Shape sh{3, 2, 2};
  const auto all = all_deterministic(sh);
  double worst_gap = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<TabularLowRankMdp> models{random_mdp(sh, 2, derive_seed(seed, {1})),
                                          random_mdp(sh, 2, derive_seed(seed, {2}))};
    const auto bonuses = random_bonuses(sh, 2, derive_seed(seed, {3}));
    double best = 0.0;
    for (const auto& p0 : all)
      for (const auto& p1 : all) best = std::max(best, pcv(models, bonuses, std::vector<Policy>{p0, p1}));
    const auto res = plan_exploration(models, bonuses, HyperParams{});
    worst_gap = std::max(worst_gap, best - res.pcv);
    EXPECT_GE(res.pcv, best - 1e-9) << "seed " << seed;
  }
  RecordProperty("worst_exhaustive_gap", std::to_string(worst_gap));
}

TEST(Upstream, TerminationRule) {
  ScheduleValues small{1, 1.0, 1e-6, 1.0, 1.0};
  EXPECT_TRUE(check_termination(0.0, small, 3, 4, 0.15));
  EXPECT_FALSE(check_termination(4 * 0.15, small, 3, 4, 0.15));

  HyperParams hp;
  hp.c_zeta = 0.01;
  const auto sched = schedule(300, kDims, hp);
  const double slack = 4 * 0.15 - 2.0 * std::sqrt(3.0 * 4.0 * sched.zeta);
  ASSERT_GT(slack, 0.0);
  EXPECT_TRUE(check_termination(slack / 2.0 - 1e-9, sched, 3, 4, 0.15));
  EXPECT_FALSE(check_termination(slack / 2.0 + 1e-9, sched, 3, 4, 0.15));
}

TEST(Upstream, SingletonClassesRecoverTheTruth) {
  const FamilySpec spec = small_spec(8, 1, 1, 1);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 1);
  HyperParams hp;
  hp.max_iterations = 1;
  const auto run = run_refuel(fam, mc, hp, 2);
  EXPECT_EQ(run.learned.n_u, 1u);
  EXPECT_EQ(run.learned.phi_hat, fam.shared_phi);
  ASSERT_EQ(run.learned.tasks(), 1u);
  EXPECT_EQ(run.learned.mu_hats[0], fam.mus[0]);
  EXPECT_EQ(worst_avg_tv_error(fam, run.learned, random_policy_panel(fam.shape(), 1, 5, 3)), 0.0);
}

TEST(Upstream, RunIsDeterministicAndWellFormed) {
  const FamilySpec spec = small_spec(9, 6, 12, 4);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 2);
  HyperParams hp;
  hp.max_iterations = 8;
  const auto a = run_refuel(fam, mc, hp, 4), b = run_refuel(fam, mc, hp, 4);
  EXPECT_EQ(a.learned, b.learned);
  EXPECT_EQ(a.data, b.data);
  EXPECT_FALSE(a.learned.terminated);
  EXPECT_EQ(a.learned.n_u, 8u);
  ASSERT_EQ(a.learned.pcv_history.size(), 8u);
  for (double v : a.learned.pcv_history) EXPECT_GE(v, 0.0);
  for (std::size_t t = 0; t < 4; ++t) EXPECT_NO_THROW(a.learned.model(t));
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t h = 0; h < 4; ++h) EXPECT_EQ(a.data.triples[t][h].size(), 8u);
}

TEST(Upstream, ObserverStopsTheRun) {
  const FamilySpec spec = small_spec(10, 6, 12, 4);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, 2);
  HyperParams hp;
  hp.max_iterations = 50;
  const auto run = run_refuel(fam, mc, hp, 1, [](std::size_t n, const LearnedRepresentation&) { return n == 3; });
  EXPECT_TRUE(run.stopped_by_observer);
  EXPECT_EQ(run.learned.n_u, 3u);
}

TEST(Upstream, TunedRunTerminatesAccurately) {
  FamilySpec spec = small_spec(1, 6, 12, 4);
  const auto fam = generate_family(spec);
  const auto mc = generate_model_classes(fam, spec, derive_seed(1, {1}));
  HyperParams hp;
  hp.c_zeta = 0.01;
  hp.c_alpha = 0.02;
  const auto run = run_refuel(fam, mc, hp, derive_seed(1, {2}));
  ASSERT_TRUE(run.learned.terminated);
  EXPECT_LE(worst_avg_tv_error(fam, run.learned, random_policy_panel(fam.shape(), 4, 10, 5)), hp.eps_u);
}

TEST(Upstream, PlanWithReward) {
  const Shape sh{3, 4, 2};
  const auto m = random_mdp(sh, 2, 50);
  const auto zero = plan_with_reward(m, RewardTable{StepTable(sh, 0.0), 1, {0.0}});
  for (std::size_t h = 0; h < 3; ++h)
    for (std::size_t s = 0; s < 4; ++s) EXPECT_EQ(zero(h, s, 0), 1.0);
  const auto r = generate_reward(sh, 3, 51);
  const auto pi = plan_with_reward(m, r);
  EXPECT_NEAR(value_dp(m, r, pi), optimal_dp(m, r).value, 1e-12);
}

TEST(Upstream, EllipticalPotentialOnCovariancePairs) {
  const FamilySpec spec = small_spec(11, 6, 12, 4);
  const auto fam = generate_family(spec);
  const auto data = collect(fam, 300, 7);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t h = 0; h < 3; ++h) {
      std::vector<std::vector<double>> trace;
      for (const auto& p : data.pairs[t][h]) {
        const auto f = fam.shared_phi.at(h, p.state, p.action);
        trace.emplace_back(f.begin(), f.end());
      }
      const auto res = elliptical_check(trace, 1.0, 2);
      EXPECT_TRUE(res.ok) << res.lhs << " > " << res.bound;
    }
}
