#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "refuel/envgen.hpp"
#include "refuel/error.hpp"
#include "refuel/mdp.hpp"
#include "refuel/offline.hpp"
#include "refuel/report.hpp"
#include "refuel/upstream.hpp"

namespace refuel {

inline constexpr int kSchemaVersion = 1;

namespace serialize_detail {

inline Json header(const char* kind) { return Json{{"version", kSchemaVersion}, {"kind", kind}}; }

inline void check_header(const Json& j, const std::string& kind) {
  if (!j.is_object()) throw SchemaError(kind + ": document is not an object");
  if (!j.contains("version")) throw SchemaError(kind + ": missing version");
  if (!j.at("version").is_number_integer() || j.at("version").get<int>() != kSchemaVersion)
    throw VersionError(kind + ": unsupported version " + j.at("version").dump());
  if (!j.contains("kind") || j.at("kind") != kind)
    throw SchemaError("expected kind '" + kind + "', found " + (j.contains("kind") ? j.at("kind").dump() : "none"));
}

inline Json shape_json(const Shape& s) {
  return Json{{"horizon", s.horizon}, {"states", s.states}, {"actions", s.actions}};
}

inline Shape shape_of(const Json& j) {
  return {j.at("horizon").get<std::size_t>(), j.at("states").get<std::size_t>(), j.at("actions").get<std::size_t>()};
}

inline Json features_json(const FeatureTable& f) {
  Json j = shape_json(f.shape());
  j["dim"] = f.dim();
  j["data"] = f.data();
  return j;
}

inline FeatureTable features_of(const Json& j) {
  return FeatureTable(shape_of(j), j.at("dim").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

inline Json measure_json(const MeasureTable& m) {
  return Json{{"horizon", m.horizon()}, {"states", m.states()}, {"dim", m.dim()}, {"data", m.data()}};
}

inline MeasureTable measure_of(const Json& j) {
  return MeasureTable(j.at("horizon").get<std::size_t>(), j.at("states").get<std::size_t>(),
                      j.at("dim").get<std::size_t>(), j.at("data").get<std::vector<double>>());
}

/// Runs a decoder, mapping JSON access failures and invariant violations to
/// SchemaError.
template <class F>
auto guarded(const std::string& kind, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const VersionError&) {
    throw;
  } catch (const SchemaError&) {
    throw;
  } catch (const Json::exception& e) {
    throw SchemaError(kind + ": " + e.what());
  } catch (const InputError& e) {
    throw SchemaError(kind + ": " + e.what());
  }
}

}  // namespace serialize_detail

// ---------------------------------------------------------------- mdp

inline Json to_json(const TabularLowRankMdp& m) {
  using namespace serialize_detail;
  Json j = header("mdp");
  j.update(shape_json(m.shape()));
  j["dim"] = m.dim();
  j["initial_state"] = m.initial_state();
  j["phi"] = m.phi().data();
  j["mu"] = m.mu().data();
  return j;
}

inline TabularLowRankMdp mdp_from_json(const Json& j) {
  using namespace serialize_detail;
  return guarded("mdp", [&] {
    check_header(j, "mdp");
    const Shape sh = shape_of(j);
    const auto d = j.at("dim").get<std::size_t>();
    return TabularLowRankMdp(FeatureTable(sh, d, j.at("phi").get<std::vector<double>>()),
                             MeasureTable(sh.horizon, sh.states, d, j.at("mu").get<std::vector<double>>()),
                             j.at("initial_state").get<std::size_t>());
  });
}

// ---------------------------------------------------------------- reward

inline Json to_json(const RewardTable& r) {
  using namespace serialize_detail;
  Json j = header("reward");
  j.update(shape_json(r.r.shape()));
  j["r"] = r.r.data();
  j["feature_dim"] = r.feature_dim;
  j["theta"] = r.theta;
  return j;
}

inline RewardTable reward_from_json(const Json& j) {
  using namespace serialize_detail;
  return guarded("reward", [&] {
    check_header(j, "reward");
    RewardTable r{StepTable(shape_of(j), j.at("r").get<std::vector<double>>()), j.at("feature_dim").get<std::size_t>(),
                  j.at("theta").get<std::vector<double>>()};
    r.validate();
    return r;
  });
}

// ---------------------------------------------------------------- policy

inline Json to_json(const Policy& p) {
  using namespace serialize_detail;
  Json j = header("policy");
  j.update(shape_json(p.shape()));
  j["pi"] = p.table().data();
  return j;
}

inline Policy policy_from_json(const Json& j) {
  using namespace serialize_detail;
  return guarded("policy", [&] {
    check_header(j, "policy");
    return Policy(StepTable(shape_of(j), j.at("pi").get<std::vector<double>>()));
  });
}

// ---------------------------------------------------------------- family

inline Json spec_json(const FamilySpec& s) {
  return Json{{"states", s.states},
              {"actions", s.actions},
              {"horizon", s.horizon},
              {"dim", s.dim},
              {"tasks", s.tasks},
              {"seed", s.seed},
              {"xi_target", s.xi_target},
              {"reward_dim", s.reward_dim},
              {"phi_class_size", s.phi_class_size},
              {"psi_class_size", s.psi_class_size},
              {"decoy_separation", s.decoy_separation}};
}

/// Reads a spec, starting from `base` and overriding present keys. Unknown
/// keys are rejected.
inline FamilySpec spec_from_json(const Json& j, FamilySpec base = {}) {
  using serialize_detail::guarded;
  return guarded("family spec", [&] {
    if (!j.is_object()) throw SchemaError("family spec: not an object");
    for (const auto& [k, v] : j.items()) {
      if (k == "states") base.states = v.get<std::size_t>();
      else if (k == "actions") base.actions = v.get<std::size_t>();
      else if (k == "horizon") base.horizon = v.get<std::size_t>();
      else if (k == "dim") base.dim = v.get<std::size_t>();
      else if (k == "tasks") base.tasks = v.get<std::size_t>();
      else if (k == "seed") base.seed = v.get<std::uint64_t>();
      else if (k == "xi_target") base.xi_target = v.get<double>();
      else if (k == "reward_dim") base.reward_dim = v.get<std::size_t>();
      else if (k == "phi_class_size") base.phi_class_size = v.get<std::size_t>();
      else if (k == "psi_class_size") base.psi_class_size = v.get<std::size_t>();
      else if (k == "decoy_separation") base.decoy_separation = v.get<double>();
      else throw SchemaError("family spec: unknown key '" + k + "'");
    }
    base.validate();
    return base;
  });
}

inline Json constants_json(const FamilyConstants& c) {
  return Json{{"upsilon", c.upsilon},
              {"kappa_u_lb", c.kappa_u_lb},
              {"c_r", c.c_r},
              {"xi_measured", c.xi_measured},
              {"c_l", c.c_l}};
}

inline FamilyConstants constants_from_json(const Json& j) {
  return {j.at("upsilon").get<double>(), j.at("kappa_u_lb").get<double>(), j.at("c_r").get<double>(),
          j.at("xi_measured").get<double>(), j.at("c_l").get<double>()};
}

inline Json to_json(const TaskFamily& f) {
  using namespace serialize_detail;
  Json j = header("family");
  j["spec"] = spec_json(f.spec);
  j["shared_phi"] = features_json(f.shared_phi);
  j["mus"] = Json::array();
  for (const auto& m : f.mus) j["mus"].push_back(measure_json(m));
  j["rewards"] = Json::array();
  for (const auto& r : f.rewards) j["rewards"].push_back(to_json(r));
  j["downstream"] = to_json(f.downstream);
  j["downstream_reward"] = to_json(f.downstream_reward);
  j["coefficients"] = f.coefficients;
  j["mix_weight"] = f.mix_weight;
  j["constants"] = f.constants ? constants_json(*f.constants) : Json(nullptr);
  return j;
}

inline TaskFamily family_from_json(const Json& j) {
  using namespace serialize_detail;
  return guarded("family", [&] {
    check_header(j, "family");
    TaskFamily f;
    f.spec = spec_from_json(j.at("spec"));
    f.shared_phi = features_of(j.at("shared_phi"));
    for (const auto& m : j.at("mus")) f.mus.push_back(measure_of(m));
    for (const auto& mu : f.mus) f.upstream.emplace_back(f.shared_phi, mu, 0);
    for (const auto& r : j.at("rewards")) f.rewards.push_back(reward_from_json(r));
    f.downstream = mdp_from_json(j.at("downstream"));
    f.downstream_reward = reward_from_json(j.at("downstream_reward"));
    f.coefficients = j.at("coefficients").get<std::vector<double>>();
    f.mix_weight = j.at("mix_weight").get<double>();
    if (!j.at("constants").is_null()) f.constants = constants_from_json(j.at("constants"));
    if (f.mus.size() != f.spec.tasks || f.rewards.size() != f.spec.tasks || f.coefficients.size() != f.spec.tasks)
      throw SchemaError("family: task lists disagree with spec.tasks");
    if (!(f.shared_phi.shape() == f.spec.shape()) || f.downstream.shape() != f.spec.shape())
      throw SchemaError("family: shapes disagree with spec");
    return f;
  });
}

// ---------------------------------------------------------------- classes

inline Json to_json(const ModelClass& mc) {
  using namespace serialize_detail;
  Json j = header("model_class");
  j["phi"] = Json::array();
  for (const auto& f : mc.phi) j["phi"].push_back(features_json(f));
  j["psi"] = Json::array();
  for (const auto& m : mc.psi) j["psi"].push_back(measure_json(m));
  j["truth_phi"] = mc.truth_phi;
  j["truth_psi"] = mc.truth_psi;
  return j;
}

inline ModelClass model_class_from_json(const Json& j) {
  using namespace serialize_detail;
  return guarded("model_class", [&] {
    check_header(j, "model_class");
    ModelClass mc;
    for (const auto& f : j.at("phi")) mc.phi.push_back(features_of(f));
    for (const auto& m : j.at("psi")) mc.psi.push_back(measure_of(m));
    mc.truth_phi = j.at("truth_phi").get<std::size_t>();
    mc.truth_psi = j.at("truth_psi").get<std::vector<std::size_t>>();
    if (mc.phi.empty() || mc.psi.empty()) throw SchemaError("model_class: empty class");
    if (mc.truth_phi >= mc.phi.size()) throw SchemaError("model_class: truth_phi out of range");
    for (auto t : mc.truth_psi)
      if (t >= mc.psi.size()) throw SchemaError("model_class: truth_psi out of range");
    const Shape sh = mc.phi.front().shape();
    const std::size_t d = mc.phi.front().dim();
    for (const auto& f : mc.phi)
      if (!(f.shape() == sh) || f.dim() != d) throw SchemaError("model_class: Phi members differ in shape");
    for (const auto& m : mc.psi)
      if (m.horizon() != sh.horizon || m.states() != sh.states || m.dim() != d)
        throw SchemaError("model_class: Psi members differ in shape");
    return mc;
  });
}

// ---------------------------------------------------------------- learned

inline Json to_json(const LearnedRepresentation& l) {
  using namespace serialize_detail;
  Json j = header("learned");
  j["phi_hat"] = features_json(l.phi_hat);
  j["mu_hats"] = Json::array();
  for (const auto& m : l.mu_hats) j["mu_hats"].push_back(measure_json(m));
  j["phi_indices"] = l.phi_indices;
  j["mu_indices"] = l.mu_indices;
  j["n_u"] = l.n_u;
  j["terminated"] = l.terminated;
  j["initial_state"] = l.initial_state;
  j["pcv_history"] = l.pcv_history;
  j["schedules"] = Json::array();
  for (const auto& s : l.schedules)
    j["schedules"].push_back(Json{{"n", s.n},
                                  {"lambda", s.lambda},
                                  {"zeta", s.zeta},
                                  {"alpha_tilde", s.alpha_tilde},
                                  {"bonus_cap", s.bonus_cap}});
  return j;
}

inline LearnedRepresentation learned_from_json(const Json& j) {
  using namespace serialize_detail;
  return guarded("learned", [&] {
    check_header(j, "learned");
    LearnedRepresentation l;
    l.phi_hat = features_of(j.at("phi_hat"));
    for (const auto& m : j.at("mu_hats")) l.mu_hats.push_back(measure_of(m));
    l.phi_indices = j.at("phi_indices").get<std::vector<std::size_t>>();
    l.mu_indices = j.at("mu_indices").get<std::vector<std::vector<std::size_t>>>();
    l.n_u = j.at("n_u").get<std::size_t>();
    l.terminated = j.at("terminated").get<bool>();
    l.initial_state = j.at("initial_state").get<std::size_t>();
    l.pcv_history = j.at("pcv_history").get<std::vector<double>>();
    for (const auto& s : j.at("schedules"))
      l.schedules.push_back({s.at("n").get<std::size_t>(), s.at("lambda").get<double>(), s.at("zeta").get<double>(),
                             s.at("alpha_tilde").get<double>(), s.at("bonus_cap").get<double>()});
    if (l.mu_hats.empty()) throw SchemaError("learned: no task measures");
    for (std::size_t t = 0; t < l.tasks(); ++t) (void)l.model(t);  // validates the kernels
    return l;
  });
}

// ---------------------------------------------------------------- datasets

/// NDJSON: a header line, then one {traj, h, s, a, r, s_next} object per
/// line.
inline std::string dataset_ndjson(const OfflineDataset& ds) {
  std::string out = Json{{"version", kSchemaVersion},
                         {"kind", "offline_dataset"},
                         {"behavior_id", ds.behavior_id},
                         {"seed", ds.seed},
                         {"trajectories", ds.trajectories},
                         {"horizon", ds.horizon}}
                        .dump();
  out += '\n';
  for (const auto& r : ds.records) {
    out += Json{{"traj", r.traj}, {"h", r.h}, {"s", r.state}, {"a", r.action}, {"r", r.reward}, {"s_next", r.next_state}}
               .dump();
    out += '\n';
  }
  return out;
}

inline OfflineDataset dataset_from_ndjson(const std::string& text) {
  using namespace serialize_detail;
  return guarded("offline_dataset", [&] {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line)) throw SchemaError("offline_dataset: empty file");
    const Json head = Json::parse(line);
    check_header(head, "offline_dataset");
    OfflineDataset ds;
    ds.behavior_id = head.at("behavior_id").get<std::string>();
    ds.seed = head.at("seed").get<std::uint64_t>();
    ds.trajectories = head.at("trajectories").get<std::size_t>();
    ds.horizon = head.at("horizon").get<std::size_t>();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const Json r = Json::parse(line);
      ds.records.push_back({r.at("traj").get<std::size_t>(), r.at("h").get<std::size_t>(), r.at("s").get<std::size_t>(),
                            r.at("a").get<std::size_t>(), r.at("r").get<double>(), r.at("s_next").get<std::size_t>()});
    }
    if (ds.records.size() != ds.trajectories * ds.horizon)
      throw SchemaError("offline_dataset: record count differs from trajectories * horizon");
    return ds;
  });
}

// ---------------------------------------------------------------- files

inline void save_json(const std::filesystem::path& path, const Json& j) { write_text(path, j.dump(2) + "\n"); }

inline Json load_json(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
}

/// Upstream per-iteration metrics: n, pcv, zeta_n, lambda_n, alpha_tilde_n,
/// terminated.
inline Curve upstream_curve(const LearnedRepresentation& l) {
  Curve c{{"n", "pcv", "zeta_n", "lambda_n", "alpha_tilde_n", "terminated"}, {}};
  for (std::size_t i = 0; i < l.schedules.size(); ++i) {
    const auto& s = l.schedules[i];
    const bool last = i + 1 == l.schedules.size();
    c.rows.push_back({static_cast<double>(s.n), l.pcv_history[i], s.zeta, s.lambda, s.alpha_tilde,
                      last && l.terminated ? 1.0 : 0.0});
  }
  return c;
}

}  // namespace refuel
