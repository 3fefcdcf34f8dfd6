#pragma once

#include <chrono>
#include <functional>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "refuel/envgen.hpp"
#include "refuel/error.hpp"
#include "refuel/eval.hpp"
#include "refuel/offline.hpp"
#include "refuel/online.hpp"
#include "refuel/report.hpp"
#include "refuel/serialize.hpp"
#include "refuel/upstream.hpp"

namespace refuel::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kInput = 2, kNumerical = 3, kNonTermination = 4 };

// ---------------------------------------------------------------- config

struct OfflineSection {
  double lambda = 1.0;
  double c_beta = 1.0;
  double delta = 0.05;
  std::size_t n_off = 1024;
  std::string behavior = "uniform";  ///< uniform | random
  std::string features = "learned";  ///< learned | true | one_hot
  std::optional<double> xi_down;     ///< null: certified for learned, 0 otherwise
};

struct OnlineSection {
  double lambda = 1.0;
  double c_beta = 1.0;
  double delta = 0.05;
  std::size_t n_on = 500;
  std::string features = "learned";
  std::optional<double> xi_down;
};

struct EvalSection {
  std::size_t panel_size = 20;
  std::size_t reward_count = 10;
  std::size_t mc_episodes = 4000;
};

struct CompareSection {
  std::vector<std::size_t> task_grid{1, 8};
  double tv_target = 0.20;
};

struct PipelineConfig {
  FamilySpec family;
  HyperParams hp;
  OfflineSection offline;
  OnlineSection online;
  EvalSection eval;
  CompareSection compare;
  std::vector<std::uint64_t> seeds{0};
  std::string out = "out";
  std::size_t jobs = 1;
};

/// Consumes known keys of a JSON object; finish() rejects the rest.
class KeyReader {
 public:
  KeyReader(const Json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw SchemaError(where_ + ": expected an object");
  }

  template <class T>
  KeyReader& operator()(const char* key, T& dst) {
    known_.insert(key);
    if (obj_.contains(key)) {
      try {
        dst = obj_.at(key).get<T>();
      } catch (const Json::exception& e) {
        throw SchemaError(where_ + "." + key + ": " + e.what());
      }
    }
    return *this;
  }

  KeyReader& optional_number(const char* key, std::optional<double>& dst) {
    known_.insert(key);
    if (obj_.contains(key)) {
      const Json& v = obj_.at(key);
      if (v.is_null()) dst.reset();
      else if (v.is_number()) dst = v.get<double>();
      else throw SchemaError(where_ + "." + key + ": expected a number or null");
    }
    return *this;
  }

  KeyReader& section(const char* key, const std::function<void(const Json&)>& f) {
    known_.insert(key);
    if (obj_.contains(key)) f(obj_.at(key));
    return *this;
  }

  void finish() const {
    for (const auto& [k, v] : obj_.items())
      if (!known_.count(k)) throw SchemaError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const Json& obj_;
  std::string where_;
  std::set<std::string> known_;
};

inline void check_choice(const std::string& value, std::initializer_list<const char*> allowed, const std::string& where) {
  for (const char* a : allowed)
    if (value == a) return;
  throw SchemaError(where + ": unsupported value '" + value + "'");
}

inline PipelineConfig config_from_json(const Json& j) {
  PipelineConfig c;
  KeyReader root(j, "config");
  root.section("family", [&](const Json& f) { c.family = spec_from_json(f, c.family); })
      .section("hyperparams",
               [&](const Json& h) {
                 KeyReader(h, "hyperparams")("delta", c.hp.delta)("eps_u", c.hp.eps_u)("c_lambda", c.hp.c_lambda)(
                     "c_zeta", c.hp.c_zeta)("c_alpha", c.hp.c_alpha)("c_b", c.hp.c_b)(
                     "max_iterations", c.hp.max_iterations)("planner_rounds", c.hp.planner_rounds)(
                     "planner_tol", c.hp.planner_tol)
                     .finish();
               })
      .section("offline",
               [&](const Json& o) {
                 auto& s = c.offline;
                 KeyReader(o, "offline")("lambda", s.lambda)("c_beta", s.c_beta)("delta", s.delta)("n_off", s.n_off)(
                     "behavior", s.behavior)("features", s.features)
                     .optional_number("xi_down", s.xi_down)
                     .finish();
               })
      .section("online",
               [&](const Json& o) {
                 auto& s = c.online;
                 KeyReader(o, "online")("lambda", s.lambda)("c_beta", s.c_beta)("delta", s.delta)("n_on", s.n_on)(
                     "features", s.features)
                     .optional_number("xi_down", s.xi_down)
                     .finish();
               })
      .section("eval",
               [&](const Json& e) {
                 KeyReader(e, "eval")("panel_size", c.eval.panel_size)("reward_count", c.eval.reward_count)(
                     "mc_episodes", c.eval.mc_episodes)
                     .finish();
               })
      .section("compare",
               [&](const Json& e) {
                 KeyReader(e, "compare")("task_grid", c.compare.task_grid)("tv_target", c.compare.tv_target).finish();
               })
      ("seeds", c.seeds)("out", c.out)("jobs", c.jobs)
      .finish();
  return c;
}

inline void validate_config(const PipelineConfig& c) {
  c.family.validate();
  c.hp.validate();
  require(!c.seeds.empty(), "config: seeds must not be empty");
  require(c.jobs >= 1, "config: jobs must be at least 1");
  check_choice(c.offline.behavior, {"uniform", "random"}, "offline.behavior");
  check_choice(c.offline.features, {"learned", "true", "one_hot"}, "offline.features");
  check_choice(c.online.features, {"learned", "true", "one_hot"}, "online.features");
  require(c.offline.n_off >= 1 && c.online.n_on >= 1, "config: n_off and n_on must be at least 1");
  require(c.eval.panel_size >= 1 && c.eval.reward_count >= 1 && c.eval.mc_episodes >= 2,
          "config: eval sizes must be positive");
  require(!c.compare.task_grid.empty(), "config: compare.task_grid must not be empty");
  for (auto T : c.compare.task_grid) require(T >= 1, "config: compare.task_grid entries must be positive");
  require(c.compare.tv_target > 0.0, "config: compare.tv_target must be positive");
}

/// Every field with defaults expanded; out and jobs are omitted because they
/// do not influence results.
inline Json resolved_json(const PipelineConfig& c) {
  auto opt = [](const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); };
  return Json{
      {"family", spec_json(c.family)},
      {"hyperparams",
       {{"delta", c.hp.delta},
        {"eps_u", c.hp.eps_u},
        {"c_lambda", c.hp.c_lambda},
        {"c_zeta", c.hp.c_zeta},
        {"c_alpha", c.hp.c_alpha},
        {"c_b", c.hp.c_b},
        {"max_iterations", c.hp.max_iterations},
        {"planner_rounds", c.hp.planner_rounds},
        {"planner_tol", c.hp.planner_tol}}},
      {"offline",
       {{"lambda", c.offline.lambda},
        {"c_beta", c.offline.c_beta},
        {"delta", c.offline.delta},
        {"n_off", c.offline.n_off},
        {"behavior", c.offline.behavior},
        {"features", c.offline.features},
        {"xi_down", opt(c.offline.xi_down)}}},
      {"online",
       {{"lambda", c.online.lambda},
        {"c_beta", c.online.c_beta},
        {"delta", c.online.delta},
        {"n_on", c.online.n_on},
        {"features", c.online.features},
        {"xi_down", opt(c.online.xi_down)}}},
      {"eval",
       {{"panel_size", c.eval.panel_size}, {"reward_count", c.eval.reward_count}, {"mc_episodes", c.eval.mc_episodes}}},
      {"compare", {{"task_grid", c.compare.task_grid}, {"tv_target", c.compare.tv_target}}},
      {"seeds", c.seeds}};
}

// ---------------------------------------------------------------- helpers

inline std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"' || ch == '\\') out += '\\';
    out += ch == '\n' ? ' ' : ch;
  }
  return out + "\"";
}

inline void log_line(std::ostream& err, const std::string& level, const std::string& cmd, const std::string& kind,
                     const std::string& msg) {
  err << "refuel level=" << level << " cmd=" << (cmd.empty() ? "-" : cmd) << " kind=" << kind << " msg=" << quote(msg)
      << "\n";
}

struct Context {
  PipelineConfig cfg;
  std::filesystem::path out;
  std::string cmd;
  std::uint64_t seed = 0;

  std::filesystem::path report_dir() const { return out / "reports" / cmd; }
};

inline RunReport base_report(const Context& ctx, const std::string& kind) {
  RunReport r;
  r.kind = kind;
  r.config = resolved_json(ctx.cfg);
  r.seeds = ctx.cfg.seeds;
  return r;
}

inline TaskFamily load_family(const Context& ctx) { return family_from_json(load_json(ctx.out / "family.json")); }

inline ModelClass load_classes(const Context& ctx) {
  return model_class_from_json(load_json(ctx.out / "model_class.json"));
}

inline LearnedRepresentation load_learned(const Context& ctx) {
  return learned_from_json(load_json(ctx.out / "learned.json"));
}

/// Identity features of dimension S * K.
inline FeatureTable one_hot_features(Shape sh) {
  FeatureTable f(sh, sh.states * sh.actions);
  for (std::size_t h = 0; h < sh.horizon; ++h)
    for (std::size_t s = 0; s < sh.states; ++s)
      for (std::size_t a = 0; a < sh.actions; ++a) f.at(h, s, a)[s * sh.actions + a] = 1.0;
  return f;
}

struct Features {
  FeatureTable phi;
  double xi_down = 0.0;
};

/// Resolves the downstream feature map and its misspecification level.
inline Features downstream_features(const Context& ctx, const TaskFamily& family, const std::string& which,
                                    const std::optional<double>& xi_override) {
  Features f;
  if (which == "learned") {
    f.phi = load_learned(ctx).phi_hat;
    if (xi_override) {
      f.xi_down = *xi_override;
    } else {
      const FamilyConstants c = family.constants ? *family.constants : family_constants(family, load_classes(ctx));
      f.xi_down = compute_xi_down(c, family.tasks(), ctx.cfg.hp.eps_u);
    }
  } else {
    f.phi = which == "true" ? family.downstream.phi() : one_hot_features(family.shape());
    f.xi_down = xi_override.value_or(0.0);
  }
  return f;
}

inline void write_outputs(const Context& ctx, const RunReport& report, double seconds) {
  emit_report(report, ctx.report_dir());
  save_json(ctx.report_dir() / "resolved_config.json", resolved_json(ctx.cfg));
  // Wall-clock lives outside report.json so that reports stay byte-identical.
  save_json(ctx.report_dir() / "timing.json", Json{{"wall_clock_seconds", seconds}});
}

// ---------------------------------------------------------------- commands

inline RunReport cmd_gen(const Context& ctx) {
  FamilySpec spec = ctx.cfg.family;
  spec.seed = ctx.seed;
  TaskFamily family = generate_family(spec);
  const ModelClass classes = generate_model_classes(family, spec, derive_seed(ctx.seed, {1}));
  RunReport r = base_report(ctx, "gen_report");
  r.metrics["min_class_separation"] = min_class_separation(classes);
  r.metrics["mix_weight"] = family.mix_weight;
  r.metrics["xi_measured"] = measure_xi(family.downstream, family.upstream, family.coefficients);
  if (spec.horizon >= 2) {
    family.constants = family_constants(family, classes);
    const auto& c = *family.constants;
    r.metrics["upsilon"] = c.upsilon;
    r.metrics["kappa_u_lb"] = c.kappa_u_lb;
    r.metrics["c_r"] = c.c_r;
    r.metrics["c_l"] = c.c_l;
    r.metrics["xi_down"] = compute_xi_down(c, family.tasks(), ctx.cfg.hp.eps_u);
  }
  save_json(ctx.out / "family.json", to_json(family));
  save_json(ctx.out / "model_class.json", to_json(classes));
  return r;
}

inline void record_multipliers(RunReport& r, const HyperParams& hp) {
  r.metrics["c_lambda"] = hp.c_lambda;
  r.metrics["c_zeta"] = hp.c_zeta;
  r.metrics["c_alpha"] = hp.c_alpha;
  r.metrics["c_b"] = hp.c_b;
  r.metrics["eps_u"] = hp.eps_u;
  r.metrics["delta"] = hp.delta;
}

inline RunReport cmd_upstream(const Context& ctx) {
  const TaskFamily family = load_family(ctx);
  const ModelClass classes = load_classes(ctx);
  const auto run = run_refuel(family, classes, ctx.cfg.hp, derive_seed(ctx.seed, {2}));
  const auto& l = run.learned;
  save_json(ctx.out / "learned.json", to_json(l));

  RunReport r = base_report(ctx, "upstream_report");
  record_multipliers(r, ctx.cfg.hp);
  r.metrics["n_u"] = static_cast<double>(l.n_u);
  r.metrics["terminated"] = l.terminated ? 1.0 : 0.0;
  r.metrics["per_task_trajectories"] = static_cast<double>(l.n_u * family.shape().horizon);
  r.metrics["final_pcv"] = l.pcv_history.empty() ? 0.0 : l.pcv_history.back();
  const auto g = upstream_guarantee(family, l, ctx.cfg.eval.panel_size, ctx.cfg.eval.reward_count,
                                    derive_seed(ctx.seed, {3}));
  r.metrics["avg_tv_error"] = g.worst_tv;
  r.metrics["avg_tv_error_random_panel"] = g.panel_tv;
  r.metrics["planning_suboptimality"] = g.planning_gap;
  r.curves["upstream_metrics"] = upstream_curve(l);
  return r;
}

inline Policy behavior_policy(const Context& ctx, Shape sh) {
  return ctx.cfg.offline.behavior == "uniform" ? Policy::uniform(sh) : Policy::random(sh, derive_seed(ctx.seed, {4}));
}

inline RunReport cmd_offline(const Context& ctx) {
  const TaskFamily family = load_family(ctx);
  const auto& oc = ctx.cfg.offline;
  const Features feat = downstream_features(ctx, family, oc.features, oc.xi_down);
  const Policy behavior = behavior_policy(ctx, family.shape());
  const auto data = gen_offline_dataset(family.downstream, family.downstream_reward, behavior, oc.n_off,
                                        derive_seed(ctx.seed, {5}), oc.behavior);
  const PessimismConfig pc{oc.lambda, oc.c_beta, oc.delta, feat.xi_down, family.spec.reward_dim};
  const auto res = pevi(data, feat.phi, family.downstream_reward, pc, family.downstream.initial_state());
  write_text(ctx.out / "offline_dataset.ndjson", dataset_ndjson(data));
  save_json(ctx.out / "offline_policy.json", to_json(res.policy));

  RunReport r = base_report(ctx, "offline_report");
  r.labels["features"] = oc.features;
  r.labels["behavior"] = oc.behavior;
  r.metrics["n_off"] = static_cast<double>(oc.n_off);
  r.metrics["c_beta"] = oc.c_beta;
  r.metrics["beta"] = res.beta;
  r.metrics["iota"] = res.iota;
  r.metrics["xi_down"] = feat.xi_down;
  r.metrics["v_hat_1"] = res.v1;
  r.metrics["suboptimality_gap"] = suboptimality_gap(family.downstream, family.downstream_reward, res.policy);
  r.metrics["feature_coverage"] = feature_coverage(behavior, family.downstream, feat.phi);
  double residual = 0.0;
  for (double v : res.residuals) residual = std::max(residual, v);
  r.metrics["max_ridge_residual"] = residual;
  Curve gamma{{"h", "gamma_min", "gamma_mean", "gamma_max"}, {}};
  for (std::size_t h = 0; h < res.gamma.size(); ++h)
    gamma.rows.push_back({static_cast<double>(h), res.gamma[h].min, res.gamma[h].mean, res.gamma[h].max});
  r.curves["uncertainty"] = std::move(gamma);
  return r;
}

inline RunReport cmd_online(const Context& ctx) {
  const TaskFamily family = load_family(ctx);
  const auto& oc = ctx.cfg.online;
  const Features feat = downstream_features(ctx, family, oc.features, oc.xi_down);
  const OnlineConfig cfg{oc.lambda, oc.c_beta, oc.delta, feat.xi_down, family.spec.reward_dim, oc.n_on};
  const auto rec = run_lsvi_ucb(family.downstream, family.downstream_reward, feat.phi, cfg, derive_seed(ctx.seed, {6}));
  const auto regret = episode_regret(rec, family.downstream, family.downstream_reward);
  const double v_star = optimal_dp(family.downstream, family.downstream_reward).value;

  RunReport r = base_report(ctx, "online_report");
  r.labels["features"] = oc.features;
  r.metrics["n_on"] = static_cast<double>(oc.n_on);
  r.metrics["c_beta"] = oc.c_beta;
  r.metrics["xi_down"] = feat.xi_down;
  r.metrics["v_star"] = v_star;
  r.metrics["mixture_value"] = mixture_value(rec, family.downstream, family.downstream_reward);
  r.metrics["mixture_gap"] = v_star - r.metrics["mixture_value"];
  Curve ep{{"n", "return", "V1", "regret_to_date"}, {}};
  double cum = 0.0, near_optimistic = 0.0;
  const double H = static_cast<double>(family.shape().horizon);
  for (std::size_t n = 0; n < rec.episodes(); ++n) {
    cum += regret[n];
    ep.rows.push_back({static_cast<double>(n + 1), rec.returns[n], rec.v1[n], cum});
    if (rec.v1[n] + 2.0 * H * feat.xi_down >= v_star) near_optimistic += 1.0;
  }
  r.metrics["average_regret"] = cum / static_cast<double>(rec.episodes());
  r.metrics["near_optimism_fraction"] = near_optimistic / static_cast<double>(rec.episodes());
  bool all_ok = true;
  for (std::size_t h = 0; h < family.shape().horizon; ++h) {
    const auto trace = online_feature_trace(rec, feat.phi, h);
    const auto e = elliptical_check(trace, oc.lambda, feat.phi.dim());
    r.metrics["elliptical_lhs_h" + std::to_string(h)] = e.lhs;
    r.metrics["elliptical_bound_h" + std::to_string(h)] = e.bound;
    all_ok = all_ok && e.ok;
  }
  r.metrics["elliptical_ok"] = all_ok ? 1.0 : 0.0;
  r.curves["episodes"] = std::move(ep);
  return r;
}

inline RunReport cmd_eval(const Context& ctx) {
  const TaskFamily family = load_family(ctx);
  const LearnedRepresentation learned = load_learned(ctx);
  const auto& ec = ctx.cfg.eval;
  RunReport r = base_report(ctx, "eval_report");
  const auto g = upstream_guarantee(family, learned, ec.panel_size, ec.reward_count, derive_seed(ctx.seed, {3}));
  r.metrics["avg_tv_error"] = g.worst_tv;
  r.metrics["avg_tv_error_random_panel"] = g.panel_tv;
  r.metrics["planning_suboptimality"] = g.planning_gap;
  r.metrics["n_u"] = static_cast<double>(learned.n_u);
  r.metrics["terminated"] = learned.terminated ? 1.0 : 0.0;

  // Exact-vs-sampled cross-check on the first panel set.
  const auto panel = random_policy_panel(family.shape(), family.tasks(), 1, derive_seed(derive_seed(ctx.seed, {3}), {1}));
  Curve check{{"h", "exact", "monte_carlo", "stderr"}, {}};
  for (std::size_t h = 0; h < family.shape().horizon; ++h) {
    const double exact = avg_tv_error(family, learned, panel, h);
    const auto mc = avg_tv_monte_carlo(family, learned, panel.front(), h, ec.mc_episodes, derive_seed(ctx.seed, {7, h}));
    check.rows.push_back({static_cast<double>(h), exact, mc.mean, mc.stderr_});
  }
  r.curves["tv_cross_check"] = std::move(check);
  if (std::filesystem::exists(ctx.out / "offline_policy.json")) {
    const Policy pi = policy_from_json(load_json(ctx.out / "offline_policy.json"));
    r.metrics["offline_suboptimality_gap"] = suboptimality_gap(family.downstream, family.downstream_reward, pi);
  }
  return r;
}

inline RunReport cmd_compare(const Context& ctx) {
  MultitaskConfig mc;
  mc.family = ctx.cfg.family;
  std::size_t t_max = 1;
  for (auto T : ctx.cfg.compare.task_grid) t_max = std::max(t_max, T);
  mc.family.tasks = t_max;
  mc.family.psi_class_size = std::max(mc.family.psi_class_size, t_max);
  mc.task_grid = ctx.cfg.compare.task_grid;
  mc.seeds = ctx.cfg.seeds;
  mc.hp = ctx.cfg.hp;
  mc.tv_target = ctx.cfg.compare.tv_target;
  mc.panel_size = ctx.cfg.eval.panel_size;
  mc.jobs = ctx.cfg.jobs;
  RunReport r = multitask_benefit_experiment(mc);
  r.config = resolved_json(ctx.cfg);
  record_multipliers(r, ctx.cfg.hp);
  return r;
}

// ---------------------------------------------------------------- dispatch

inline int exit_code_for(const Error& e) {
  const std::string k = e.kind();
  if (k == "numerical" || k == "mle") return kNumerical;
  return kInput;
}

/// Entry point. Precedence for the seed list: --seed > REFUEL_SEED > file.
inline int dispatch(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Reward-free multitask representation learning workbench", "refuel"};
  app.require_subcommand(0, 1);
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::size_t> jobs_flag;
  app.add_option("--config", config_path, "JSON pipeline config");
  app.add_option("--out", out_dir, "output directory");
  app.add_option("--seed", seed_flag, "seed (overrides REFUEL_SEED and the config)");
  app.add_option("--jobs", jobs_flag, "worker threads for compare")->check(CLI::PositiveNumber);
  const std::vector<std::pair<const char*, const char*>> cmds = {
      {"gen", "generate a task family and model classes"},
      {"upstream", "run REFUEL on the generated family"},
      {"offline", "offline dataset, pessimistic value iteration and its gap"},
      {"online", "optimistic online value iteration and its regret"},
      {"eval", "metrics on saved artifacts"},
      {"compare", "multitask benefit experiment over a task grid"}};
  for (const auto& [name, help] : cmds) app.add_subcommand(name, help)->fallthrough();

  std::vector<std::string> args;
  for (int i = argc - 1; i > 0; --i) args.emplace_back(argv[i]);
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    log_line(err, "error", "", "usage", e.what());
    err << app.help();
    return kUsage;
  }
  if (app.get_subcommands().empty()) {
    err << app.help();
    return kUsage;
  }

  Context ctx;
  ctx.cmd = app.get_subcommands().front()->get_name();
  try {
    Json file_cfg = Json::object();
    if (!config_path.empty()) file_cfg = load_json(config_path);
    ctx.cfg = config_from_json(file_cfg);
    if (const char* env = std::getenv("REFUEL_SEED"); env != nullptr && !seed_flag) {
      try {
        std::size_t used = 0;
        const auto v = std::stoull(env, &used);
        if (used != std::string(env).size()) throw std::invalid_argument(env);
        ctx.cfg.seeds = {v};
      } catch (const std::exception&) {
        throw InputError(std::string("REFUEL_SEED is not an unsigned integer: ") + env);
      }
    }
    if (seed_flag) ctx.cfg.seeds = {*seed_flag};
    if (!out_dir.empty()) ctx.cfg.out = out_dir;
    if (jobs_flag) ctx.cfg.jobs = *jobs_flag;
    validate_config(ctx.cfg);
    ctx.out = ctx.cfg.out;
    ctx.seed = ctx.cfg.seeds.front();
    ctx.cfg.family.seed = ctx.seed;

    const auto start = std::chrono::steady_clock::now();
    RunReport report;
    if (ctx.cmd == "gen") report = cmd_gen(ctx);
    else if (ctx.cmd == "upstream") report = cmd_upstream(ctx);
    else if (ctx.cmd == "offline") report = cmd_offline(ctx);
    else if (ctx.cmd == "online") report = cmd_online(ctx);
    else if (ctx.cmd == "eval") report = cmd_eval(ctx);
    else report = cmd_compare(ctx);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_outputs(ctx, report, seconds);
    save_json(ctx.out / "resolved_config.json", resolved_json(ctx.cfg));
    log_line(err, "info", ctx.cmd, "done", "wrote " + (ctx.report_dir() / "report.json").string());

    if (ctx.cmd == "upstream" && report.metrics.at("terminated") == 0.0) {
      log_line(err, "error", ctx.cmd, "budget",
               "REFUEL did not terminate within " + std::to_string(ctx.cfg.hp.max_iterations) + " iterations");
      return kNonTermination;
    }
    return kOk;
  } catch (const Error& e) {
    log_line(err, "error", ctx.cmd, e.kind(), e.what());
    return exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    log_line(err, "error", ctx.cmd, "io", e.what());
    return kInput;
  }
}

}  // namespace refuel::cli
