// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Writes acceptance/report.json (and timing.json) under the working directory.

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <thread>

#include "refuel.hpp"
#include "refuel/cli.hpp"

using namespace refuel;
namespace fs = std::filesystem;

namespace {

const std::vector<std::uint64_t> kSeeds{1, 2, 3, 4, 5};

// Tuned multipliers. The defaults (all 1) are the unscaled constants.
HyperParams tuned_hp() {
  HyperParams hp;
  hp.eps_u = 0.15;
  hp.delta = 0.05;
  hp.c_zeta = 0.01;
  hp.c_alpha = 0.02;
  hp.max_iterations = 2000;
  return hp;
}
constexpr double kOfflineCBeta = 0.02;
constexpr double kOnlineCBeta = 0.2;

struct Line {
  bool pass = true;
  std::ostringstream detail;
};

void emit(int k, const Line& l) {
  std::cout << "criterion #" << k << ": " << (l.pass ? "PASS" : "FAIL") << "  " << l.detail.str() << std::endl;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double mean_of(std::span<const double> v, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s / static_cast<double>(n);
}

TabularLowRankMdp random_model(Shape sh, std::size_t d, Rng& rng) {
  auto phi = envgen_detail::random_features(sh, d, rng);
  auto mu = envgen_detail::random_measure(sh.horizon, sh.states, d, rng);
  return {std::move(phi), std::move(mu), 0};
}

struct SeedRun {
  FamilySpec spec;
  TaskFamily fam;
  ModelClass mc;
  RefuelRun run;
  UpstreamGuarantee g;
  double seconds = 0.0;
  double xi_down = 0.0;
};

RunReport report;

// ---------------------------------------------------------------- #1

std::vector<SeedRun> criterion1() {
  Line l;
  std::vector<SeedRun> runs;
  std::vector<double> tv, worst, plan, iters, secs;
  bool all_terminated = true;
  const HyperParams hp = tuned_hp();
  for (auto seed : kSeeds) {
    SeedRun r;
    r.spec.seed = seed;
    r.fam = generate_family(r.spec);
    r.mc = generate_model_classes(r.fam, r.spec, derive_seed(seed, {1}));
    const auto start = std::chrono::steady_clock::now();
    r.run = run_refuel(r.fam, r.mc, hp, derive_seed(seed, {2}));
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.g = upstream_guarantee(r.fam, r.run.learned, 20, 10, derive_seed(seed, {3}));
    r.fam.constants = family_constants(r.fam, r.mc);
    r.xi_down = compute_xi_down(*r.fam.constants, r.fam.tasks(), hp.eps_u);
    all_terminated = all_terminated && r.run.learned.terminated;
    tv.push_back(r.g.panel_tv);
    worst.push_back(r.g.worst_tv);
    plan.push_back(r.g.planning_gap);
    iters.push_back(static_cast<double>(r.run.learned.n_u));
    secs.push_back(r.seconds);
    runs.push_back(std::move(r));
  }
  const double max_secs = *std::max_element(secs.begin(), secs.end());
  l.pass = all_terminated && median(tv) <= 0.15 && median(plan) <= 0.20 && max_secs < 300.0;
  l.detail << "terminated " << (all_terminated ? "5/5" : "not all") << ", median n_u " << fmt(median(iters))
           << ", median avg TV (20-policy panel) " << fmt(median(tv)) << " <= 0.15"
           << ", median TV incl. greedy sets " << fmt(median(worst)) << ", median planning gap " << fmt(median(plan))
           << " <= 0.20, slowest seed " << fmt(max_secs) << " s (c_zeta 0.01, c_alpha 0.02)";
  report.metrics["c1_median_avg_tv"] = median(tv);
  report.metrics["c1_median_avg_tv_with_greedy"] = median(worst);
  report.metrics["c1_median_planning_gap"] = median(plan);
  report.metrics["c1_median_n_u"] = median(iters);
  report.metrics["c1_pass"] = l.pass;
  emit(1, l);
  return runs;
}

// ---------------------------------------------------------------- #2

void criterion2() {
  Line l;
  MultitaskConfig cfg;
  cfg.family.tasks = 8;
  cfg.family.phi_class_size = 50;
  cfg.family.psi_class_size = 8;
  cfg.family.decoy_separation = 0.2;
  cfg.hp = tuned_hp();
  cfg.tv_target = 0.20;
  cfg.panel_size = 20;
  cfg.task_grid = {1, 8};
  cfg.seeds = kSeeds;
  cfg.jobs = std::max(1u, std::thread::hardware_concurrency());
  const auto rep = multitask_benefit_experiment(cfg);
  const double t1 = rep.metrics.at("median_per_task_trajectories_T1");
  const double t8 = rep.metrics.at("median_per_task_trajectories_T8");
  const double ratio = rep.metrics.at("ratio_T8_vs_T1");
  l.pass = ratio <= 1.0;
  l.detail << "median per-task trajectories T=1 " << fmt(t1) << ", T=8 " << fmt(t8) << ", ratio " << fmt(ratio)
           << " <= 1.0, reached T=1 " << fmt(rep.metrics.at("reached_fraction_T1")) << ", T=8 "
           << fmt(rep.metrics.at("reached_fraction_T8")) << " (|Phi| 50, |Psi| 8)";
  report.metrics["c2_median_T1"] = t1;
  report.metrics["c2_median_T8"] = t8;
  report.metrics["c2_ratio"] = ratio;
  report.metrics["c2_pass"] = l.pass;
  report.curves["c2_cells"] = rep.curves.at("cells");
  emit(2, l);
}

// ---------------------------------------------------------------- #3

struct OfflineEvidence {
  std::vector<OfflineDataset> datasets;
  std::vector<PeviResult> results;
  std::size_t beta_pairs = 0, beta_violations = 0;
};

void criterion3(std::vector<SeedRun>& runs, OfflineEvidence& ev) {
  Line l;
  std::vector<double> g512, g8192, g16384, learned_excess;
  bool excess_ok = true;
  for (auto& r : runs) {
    const auto& m = r.fam.downstream;
    const auto& rw = r.fam.downstream_reward;
    const Shape sh = m.shape();
    const auto onehot = cli::one_hot_features(sh);
    const Policy behavior = Policy::uniform(sh);
    const PessimismConfig exact{1.0, kOfflineCBeta, 0.05, 0.0, r.fam.spec.reward_dim};
    for (std::size_t n : {512u, 8192u, 16384u}) {
      auto ds = gen_offline_dataset(m, rw, behavior, n, derive_seed(r.spec.seed, {5, n}), "uniform");
      auto res = pevi(ds, onehot, rw, exact, m.initial_state());
      const double gap = suboptimality_gap(m, rw, res.policy);
      (n == 512 ? g512 : n == 8192 ? g8192 : g16384).push_back(gap);

      // Pessimism monotonicity on the same data: beta versus 2 beta.
      for (const FeatureTable* phi : std::array<const FeatureTable*, 3>{&onehot, &r.run.learned.phi_hat, &m.phi()}) {
        PessimismConfig lo = exact, hi = exact;
        hi.c_beta *= 2.0;
        const double v_lo = pevi(ds, *phi, rw, lo, m.initial_state()).v1;
        const double v_hi = pevi(ds, *phi, rw, hi, m.initial_state()).v1;
        ++ev.beta_pairs;
        if (v_hi > v_lo + 1e-12) ++ev.beta_violations;
      }

      if (n == 8192) {
        PessimismConfig cert = exact;
        cert.xi_down = r.xi_down;
        const auto lr = pevi(ds, r.run.learned.phi_hat, rw, cert, m.initial_state());
        const double excess = suboptimality_gap(m, rw, lr.policy) - gap;
        learned_excess.push_back(excess);
        excess_ok = excess_ok && excess <= 2.0 * static_cast<double>(sh.horizon) * r.xi_down + 0.05;
        ev.results.push_back(lr);
      }
      ev.results.push_back(std::move(res));
      ev.datasets.push_back(std::move(ds));
    }
  }
  const double m512 = median(g512), m8192 = median(g8192), m16384 = median(g16384);
  l.pass = m16384 <= 0.05 && m8192 <= 0.6 * m512 && excess_ok;
  l.detail << "one-hot median gap N=512 " << fmt(m512) << ", N=8192 " << fmt(m8192) << " (ratio "
           << fmt(m512 > 0 ? m8192 / m512 : 0.0) << " <= 0.6), N=16384 " << fmt(m16384)
           << " <= 0.05; learned-minus-oracle gap median " << fmt(median(learned_excess)) << " vs 2H xi_down + 0.05 = "
           << fmt(8.0 * runs.front().xi_down + 0.05) << " (seed 1)" << (excess_ok ? "" : " EXCEEDED")
           << " (c_beta 0.02)";
  report.metrics["c3_median_gap_512"] = m512;
  report.metrics["c3_median_gap_8192"] = m8192;
  report.metrics["c3_median_gap_16384"] = m16384;
  report.metrics["c3_median_learned_excess"] = median(learned_excess);
  report.metrics["c3_pass"] = l.pass;
  emit(3, l);
}

// ---------------------------------------------------------------- #4

struct OnlineEvidence {
  double q_min = 1.0, q_max = 0.0;
};

void criterion4(const std::vector<SeedRun>& runs, OnlineEvidence& ev) {
  Line l;
  bool elliptical_ok = true;
  std::string detail;
  for (const char* which : {"learned", "true"}) {
    std::vector<double> a500, a2000, ratios;
    for (const auto& r : runs) {
      const auto& m = r.fam.downstream;
      const FeatureTable& phi = std::string(which) == "learned" ? r.run.learned.phi_hat : m.phi();
      const OnlineConfig cfg{1.0, kOnlineCBeta, 0.05, 0.0, r.fam.spec.reward_dim, 2000};
      const auto rec = run_lsvi_ucb(m, r.fam.downstream_reward, phi, cfg, derive_seed(r.spec.seed, {6}));
      const auto regret = episode_regret(rec, m, r.fam.downstream_reward);
      a500.push_back(mean_of(regret, 500));
      a2000.push_back(mean_of(regret, 2000));
      ratios.push_back(a500.back() > 0 ? a2000.back() / a500.back() : 0.0);
      for (std::size_t h = 0; h < m.horizon(); ++h)
        elliptical_ok = elliptical_ok && elliptical_check(online_feature_trace(rec, phi, h), 1.0, phi.dim()).ok;
      ev.q_min = std::min(ev.q_min, rec.q_min);
      ev.q_max = std::max(ev.q_max, rec.q_max);
    }
    const double ratio_of_medians = median(a500) > 0 ? median(a2000) / median(a500) : 0.0;
    l.pass = l.pass && ratio_of_medians <= 0.6 && median(ratios) <= 0.6;
    l.detail << which << " features: median avg regret N=500 " << fmt(median(a500)) << ", N=2000 "
             << fmt(median(a2000)) << ", ratio of medians " << fmt(ratio_of_medians) << ", median ratio "
             << fmt(median(ratios)) << " <= 0.6; ";
    report.metrics[std::string("c4_ratio_of_medians_") + which] = ratio_of_medians;
    report.metrics[std::string("c4_median_ratio_") + which] = median(ratios);
  }
  l.pass = l.pass && elliptical_ok;
  l.detail << "elliptical check " << (elliptical_ok ? "holds on every (run, h)" : "FAILED") << " (c_beta 0.2)";
  report.metrics["c4_pass"] = l.pass;
  emit(4, l);
}

// ---------------------------------------------------------------- #5

void criterion5(const std::vector<SeedRun>& runs, const OfflineEvidence& off, const OnlineEvidence& on) {
  Line l;
  std::vector<std::string> failed;
  double pooled_z = 0.0;
  auto check = [&](bool ok, const std::string& what) {
    if (!ok) failed.push_back(what);
  };

  {  // simulation identity
    Rng rng(derive_seed(55, {1}));
    const Shape sh{4, 6, 3};
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      const auto p1 = random_model(sh, 3, rng), p2 = random_model(sh, 3, rng);
      const auto r1 = generate_reward(sh, 2, rng.next_u64()), r2 = generate_reward(sh, 2, rng.next_u64());
      worst = std::max(worst, simulation_residual(p1, p2, r1, r2, Policy::random(sh, rng.next_u64())));
    }
    check(worst <= 1e-8, "simulation residual " + fmt(worst));
  }
  {  // normal-equation residuals
    double worst = 0.0;
    for (const auto& res : off.results)
      for (double v : res.residuals) worst = std::max(worst, v);
    Rng rng(derive_seed(55, {2}));
    const Shape sh{4, 6, 3};
    for (int i = 0; i < 20; ++i) {
      const auto phi = random_model(sh, 4, rng).phi();
      std::vector<StateAction> hist;
      std::vector<double> targets;
      for (int k = 0; k < 200; ++k) {
        hist.push_back({rng.below(6), rng.below(3)});
        targets.push_back(rng.uniform());
      }
      const auto r = generate_reward(sh, 2, rng.next_u64());
      worst = std::max(worst, optimistic_q_backup(phi, rng.below(4), hist, targets, r.r, 0.5, 1.0).residual);
    }
    check(worst <= 1e-10, "normal-equation residual " + fmt(worst));
  }
  {  // MLE dominance and dataset cardinality on every recorded run
    bool dom = true, card = true;
    for (const auto& r : runs) {
      const LogLikelihoodTable ll(r.mc);
      const std::size_t n = r.run.learned.n_u;
      for (std::size_t h = 0; h < r.fam.shape().horizon; ++h) {
        const auto pick = joint_mle(r.run.data, r.mc, h, &ll);
        dom = dom && pick.log_likelihood >= joint_log_likelihood(r.run.data, ll, h, r.mc.truth_phi, r.mc.truth_psi) - 1e-9;
        for (std::size_t t = 0; t < r.fam.tasks(); ++t) {
          card = card && r.run.data.triples[t][h].size() == n;
          if (h + 1 < r.fam.shape().horizon) card = card && r.run.data.pairs[t][h].size() == n;
        }
      }
    }
    for (const auto& ds : off.datasets) card = card && ds.records.size() == ds.trajectories * ds.horizon;
    check(dom, "MLE dominance");
    check(card, "dataset cardinality");
  }
  {  // brute-force MLE on tiny instances, with dominance there too
    bool ok = true;
    for (std::uint64_t i = 0; i < 20; ++i) {
      FamilySpec spec;
      spec.seed = 500 + i;
      spec.tasks = 2;
      spec.phi_class_size = 3;
      spec.psi_class_size = 3;
      const auto fam = generate_family(spec);
      const auto mc = generate_model_classes(fam, spec, derive_seed(spec.seed, {1}));
      ExplorationDatasets data(2, fam.shape().horizon);
      const std::vector<Policy> pols{Policy::random(fam.shape(), i), Policy::uniform(fam.shape())};
      for (std::size_t n = 1; n <= 10 + 5 * i; ++n) collect_iteration(fam, pols, n, data, derive_seed(spec.seed, {2}));
      const LogLikelihoodTable ll(mc);
      for (std::size_t h = 0; h < fam.shape().horizon; ++h) {
        ok = ok && brute_force_mle_check(data, mc, h);
        ok = ok && joint_mle(data, mc, h).log_likelihood >= joint_log_likelihood(data, ll, h, mc.truth_phi, mc.truth_psi) - 1e-9;
      }
    }
    check(ok, "brute-force MLE");
  }
  {  // planner ascent and PCV exact vs Monte Carlo
    bool ascent = true;
    int within = 0;
    double z_sum = 0.0;
    Rng rng(derive_seed(55, {3}));
    const Shape sh{4, 5, 3};
    for (int i = 0; i < 20; ++i) {
      std::vector<TabularLowRankMdp> models;
      std::vector<StepTable> bonuses;
      for (int t = 0; t < 3; ++t) {
        models.push_back(random_model(sh, 2, rng));
        StepTable b(sh, 0.0);
        for (std::size_t h = 0; h + 1 < sh.horizon; ++h)
          for (std::size_t s = 0; s < sh.states; ++s)
            for (std::size_t a = 0; a < sh.actions; ++a) b(h, s, a) = rng.uniform();
        bonuses.push_back(std::move(b));
      }
      const auto plan = plan_exploration(models, bonuses, tuned_hp());
      for (std::size_t k = 1; k < plan.accepted.size(); ++k) ascent = ascent && plan.accepted[k] >= plan.accepted[k - 1];
      const auto est = pcv_monte_carlo(models, bonuses, plan.policies, 200000, rng.next_u64());
      const double z = (est.mean - pcv(models, bonuses, plan.policies)) / est.stderr_;
      if (std::abs(z) <= 3.0) ++within;
      z_sum += z;
    }
    pooled_z = z_sum / std::sqrt(20.0);
    check(ascent, "planner ascent");
    check(within == 20, "PCV exact vs Monte Carlo " + std::to_string(within) + "/20");
    check(std::abs(pooled_z) <= 3.0, "PCV pooled z " + fmt(pooled_z));
  }
  {  // value ranges
    bool ok = on.q_min >= 0.0 && on.q_max <= 1.0;
    for (const auto& res : off.results)
      for (double q : res.q.data()) ok = ok && q >= 0.0 && q <= 1.0;
    check(ok, "Q range");
    check(off.beta_violations == 0,
          "V1 monotone in beta (" + std::to_string(off.beta_violations) + "/" + std::to_string(off.beta_pairs) + ")");
  }
  {  // persistence round-trips
    bool ok = true;
    for (const auto& r : runs) {
      const auto f = family_from_json(Json::parse(to_json(r.fam).dump()));
      ok = ok && f == r.fam && canonical_dump(to_json(f)) == canonical_dump(to_json(r.fam));
      ok = ok && model_class_from_json(Json::parse(to_json(r.mc).dump())) == r.mc;
      const auto l2 = learned_from_json(Json::parse(to_json(r.run.learned).dump()));
      ok = ok && l2 == r.run.learned && canonical_dump(to_json(l2)) == canonical_dump(to_json(r.run.learned));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      ok = ok && dataset_from_ndjson(dataset_ndjson(off.datasets[i])) == off.datasets[i];
      ok = ok && policy_from_json(Json::parse(to_json(off.results[i].policy).dump())) == off.results[i].policy;
    }
    ok = ok && report_from_json(Json::parse(report_to_json(report).dump())) == report;
    check(ok, "round-trips");
  }
  l.pass = failed.empty();
  if (l.pass) {
    l.detail << "simulation identity (100 pairs), normal-equation residuals, MLE dominance, brute-force MLE (20), "
                "planner ascent, PCV vs Monte Carlo (20, pooled z "
             << fmt(pooled_z) << "), Q ranges, V1 monotone in beta ("
             << off.beta_pairs << " pairs), dataset cardinality, round-trips";
  } else {
    l.detail << "failed:";
    for (const auto& f : failed) l.detail << " [" << f << "]";
  }
  report.metrics["c5_pcv_pooled_z"] = pooled_z;
  report.metrics["c5_pass"] = l.pass;
  emit(5, l);
}

// ---------------------------------------------------------------- #6

int dispatch(std::vector<std::string> args) {
  args.insert(args.begin(), "refuel");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = cli::dispatch(static_cast<int>(argv.size()), argv.data(), out, err);
  if (code != 0) std::cerr << err.str();
  return code;
}

void criterion6() {
  Line l;
  const fs::path work = fs::absolute("acceptance_work");
  fs::remove_all(work);
  fs::create_directories(work);
  const Json cfg{{"hyperparams", {{"c_zeta", 0.01}, {"c_alpha", 0.02}}},
                 {"offline", {{"features", "one_hot"}, {"c_beta", kOfflineCBeta}, {"n_off", 512}}},
                 {"online", {{"features", "learned"}, {"c_beta", kOnlineCBeta}, {"n_on", 300}, {"xi_down", 0.0}}},
                 {"eval", {{"panel_size", 20}, {"reward_count", 10}, {"mc_episodes", 2000}}},
                 {"compare", {{"task_grid", Json::array({1, 2})}}},
                 {"family", {{"psi_class_size", 12}}},
                 {"seeds", Json::array({7, 8})}};
  save_json(work / "config.json", cfg);
  const std::vector<std::string> cmds{"gen", "upstream", "offline", "online", "eval", "compare"};
  std::map<std::string, std::string> first;
  int mismatches = 0, errors = 0;
  for (int pass = 0; pass < 2; ++pass) {
    const fs::path out = work / ("out" + std::to_string(pass));
    for (const auto& c : cmds) {
      std::vector<std::string> args{c, "--config", (work / "config.json").string(), "--out", out.string()};
      if (c == "compare") {
        args.push_back("--jobs");
        args.push_back(pass == 0 ? "1" : "3");
      }
      if (dispatch(args) != 0) ++errors;
      const auto hash = read_text(out / "reports" / c / "report.sha256");
      const auto body = read_text(out / "reports" / c / "report.json");
      if (hash.substr(0, 64) != sha256_hex(canonical_dump(Json::parse(body)))) ++mismatches;
      if (pass == 0) first[c] = hash + body;
      else if (first[c] != hash + body) ++mismatches;
    }
  }
  l.pass = mismatches == 0 && errors == 0;
  l.detail << cmds.size() << " commands rerun with identical config and seed, compare at --jobs 1 vs 3: " << mismatches
           << " hash mismatches, " << errors << " nonzero exits";
  report.metrics["c6_pass"] = l.pass;
  emit(6, l);
}

}  // namespace

int main() {
  try {
    const auto start = std::chrono::steady_clock::now();
    const HyperParams hp = tuned_hp();
    report.kind = "acceptance_report";
    report.seeds = kSeeds;
    report.config = Json{{"c_lambda", hp.c_lambda},  {"c_zeta", hp.c_zeta},  {"c_alpha", hp.c_alpha},
                         {"c_b", hp.c_b},            {"eps_u", hp.eps_u},    {"delta", hp.delta},
                         {"offline_c_beta", kOfflineCBeta}, {"online_c_beta", kOnlineCBeta},
                         {"multitask_phi_class_size", 50},  {"multitask_psi_class_size", 8}};

    auto runs = criterion1();
    criterion2();
    OfflineEvidence off;
    criterion3(runs, off);
    OnlineEvidence on;
    criterion4(runs, on);
    criterion5(runs, off, on);
    criterion6();

    bool all = true;
    for (int k = 1; k <= 6; ++k) all = all && report.metrics.at("c" + std::to_string(k) + "_pass") == 1.0;
    emit_report(report, "acceptance");
    save_json(fs::path("acceptance") / "timing.json",
              Json{{"wall_clock_seconds",
                    std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count()}});
    std::cout << (all ? "all criteria PASS" : "some criteria FAIL") << std::endl;
    return all ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
}
