#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "refuel/error.hpp"
#include "refuel/mdp.hpp"
#include "refuel/rng.hpp"
#include "refuel/tables.hpp"

namespace refuel {

/// Draw budget for each rejection-sampled class member.
inline constexpr int kMaxGenerationRetries = 2000;

struct FamilySpec {
  std::size_t states = 6;
  std::size_t actions = 3;
  std::size_t horizon = 4;
  std::size_t dim = 2;
  std::size_t tasks = 4;
  std::uint64_t seed = 0;
  double xi_target = 0.0;          ///< allowed downstream misspecification
  std::size_t reward_dim = 4;      ///< dimension p of the latent reward feature
  std::size_t phi_class_size = 6;  ///< |Phi|
  std::size_t psi_class_size = 12; ///< |Psi|
  double decoy_separation = 0.2;   ///< minimum average TV between distinct class members

  Shape shape() const noexcept { return {horizon, states, actions}; }

  void validate() const {
    require(states > 0 && actions > 0 && horizon > 0 && dim > 0 && tasks > 0 && reward_dim > 0,
            "FamilySpec: all sizes must be positive");
    require(phi_class_size >= 1, "FamilySpec: |Phi| must be at least 1");
    require(psi_class_size >= tasks, "FamilySpec: |Psi| must hold every task's true measure");
    require(xi_target >= 0.0 && xi_target < 1.0, "FamilySpec: xi_target must lie in [0, 1)");
    require(decoy_separation > 0.0 && decoy_separation <= 1.0, "FamilySpec: decoy_separation must lie in (0, 1]");
  }

  friend bool operator==(const FamilySpec&, const FamilySpec&) = default;
};

struct FamilyConstants {
  double upsilon = 0.0;     ///< 1 / |S|
  double kappa_u_lb = 0.0;  ///< certified lower bound on the reachability constant
  double c_r = 1.0;         ///< smoothness constant of TV over the finite class
  double xi_measured = 0.0; ///< sup TV between downstream and the task combination
  double c_l = 1.0;

  friend bool operator==(const FamilyConstants&, const FamilyConstants&) = default;
};

/// T upstream tasks sharing phi*, plus the downstream task T+1.
struct TaskFamily {
  FamilySpec spec;
  FeatureTable shared_phi;
  std::vector<MeasureTable> mus;
  std::vector<TabularLowRankMdp> upstream;
  std::vector<RewardTable> rewards;
  TabularLowRankMdp downstream;
  RewardTable downstream_reward;
  std::vector<double> coefficients;
  double mix_weight = 0.0;
  std::optional<FamilyConstants> constants;

  std::size_t tasks() const noexcept { return upstream.size(); }
  Shape shape() const noexcept { return shared_phi.shape(); }

  friend bool operator==(const TaskFamily& x, const TaskFamily& y) {
    return x.spec == y.spec && x.shared_phi == y.shared_phi && x.mus == y.mus && x.rewards == y.rewards &&
           x.downstream == y.downstream && x.downstream_reward == y.downstream_reward &&
           x.coefficients == y.coefficients && x.mix_weight == y.mix_weight && x.constants == y.constants;
  }
};

/// Finite candidate sets for the per-step feature map and measures.
struct ModelClass {
  std::vector<FeatureTable> phi;
  std::vector<MeasureTable> psi;
  std::size_t truth_phi = 0;
  std::vector<std::size_t> truth_psi;  ///< per task

  friend bool operator==(const ModelClass&, const ModelClass&) = default;
};

namespace envgen_detail {

inline void fill_simplex(Rng& rng, std::span<double> out) {
  double total = 0.0;
  for (double& v : out) total += (v = rng.exponential());
  for (double& v : out) v /= total;
}

inline FeatureTable random_features(Shape shape, std::size_t dim, Rng& rng) {
  FeatureTable phi(shape, dim);
  for (std::size_t h = 0; h < shape.horizon; ++h)
    for (std::size_t s = 0; s < shape.states; ++s)
      for (std::size_t a = 0; a < shape.actions; ++a) fill_simplex(rng, phi.at(h, s, a));
  return phi;
}

inline MeasureTable random_measure(std::size_t horizon, std::size_t states, std::size_t dim, Rng& rng) {
  MeasureTable mu(horizon, states, dim);
  std::vector<double> col(states);
  for (std::size_t h = 0; h < horizon; ++h)
    for (std::size_t j = 0; j < dim; ++j) {
      fill_simplex(rng, col);
      for (std::size_t s = 0; s < states; ++s) mu(h, s, j) = col[s];
    }
  return mu;
}

template <class T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

}  // namespace envgen_detail

/// Average over (h, s, a) of the TV distance between two feature rows, each
/// read as a distribution over latent coordinates.
inline double feature_distance(const FeatureTable& x, const FeatureTable& y) {
  require(x.shape() == y.shape() && x.dim() == y.dim(), "feature_distance: shape mismatch");
  const Shape& sh = x.shape();
  double acc = 0.0;
  for (std::size_t h = 0; h < sh.horizon; ++h)
    for (std::size_t s = 0; s < sh.states; ++s)
      for (std::size_t a = 0; a < sh.actions; ++a) acc += tv_distance(x.at(h, s, a), y.at(h, s, a));
  return acc / static_cast<double>(sh.cells());
}

/// Average over (h, latent j) of the TV distance between latent columns.
inline double measure_distance(const MeasureTable& x, const MeasureTable& y) {
  require(x.horizon() == y.horizon() && x.states() == y.states() && x.dim() == y.dim(),
          "measure_distance: shape mismatch");
  std::vector<double> cx(x.states()), cy(x.states());
  double acc = 0.0;
  for (std::size_t h = 0; h < x.horizon(); ++h)
    for (std::size_t j = 0; j < x.dim(); ++j) {
      for (std::size_t s = 0; s < x.states(); ++s) {
        cx[s] = x(h, s, j);
        cy[s] = y(h, s, j);
      }
      acc += tv_distance(cx, cy);
    }
  return acc / static_cast<double>(x.horizon() * x.dim());
}

/// r_h(s,a) = <theta, phi~_h(s,a)>_+ for a random p-dimensional feature
/// phi~, scaled so that the sum over steps of the per-step maximum is at
/// most one.
inline RewardTable generate_reward(Shape shape, std::size_t feature_dim, std::uint64_t seed) {
  require(feature_dim > 0, "generate_reward: feature_dim must be positive");
  Rng rng(seed);
  RewardTable rt{StepTable(shape, 0.0), feature_dim, std::vector<double>(feature_dim)};
  for (double& th : rt.theta) th = rng.uniform(-0.5, 1.0);
  std::vector<double> feat(feature_dim);
  for (std::size_t h = 0; h < shape.horizon; ++h)
    for (std::size_t s = 0; s < shape.states; ++s)
      for (std::size_t a = 0; a < shape.actions; ++a) {
        double v = 0.0;
        for (std::size_t i = 0; i < feature_dim; ++i) v += rt.theta[i] * rng.uniform();
        rt.r(h, s, a) = std::max(0.0, v);
      }
  const double bound = rt.trajectory_bound();
  if (bound > 0.0) {
    const StepTable raw = rt.r;
    double scale = 1.0 / bound;
    for (;;) {
      for (std::size_t h = 0; h < shape.horizon; ++h)
        for (std::size_t s = 0; s < shape.states; ++s)
          for (std::size_t a = 0; a < shape.actions; ++a) rt.r(h, s, a) = raw(h, s, a) * scale;
      if (rt.trajectory_bound() <= 1.0) break;
      scale = std::nextafter(scale, 0.0);
    }
  }
  return rt;
}

/// Sup over (h, s, a) of TV(P_down, sum_t c_t P_t), by exhaustive evaluation.
inline double measure_xi(const TabularLowRankMdp& downstream, const std::vector<TabularLowRankMdp>& upstream,
                         const std::vector<double>& coefficients) {
  require(upstream.size() == coefficients.size() && !upstream.empty(), "measure_xi: coefficient count mismatch");
  const Shape& sh = downstream.shape();
  std::vector<double> mix(sh.states);
  double worst = 0.0;
  for (std::size_t h = 0; h < sh.horizon; ++h)
    for (std::size_t s = 0; s < sh.states; ++s)
      for (std::size_t a = 0; a < sh.actions; ++a) {
        std::fill(mix.begin(), mix.end(), 0.0);
        for (std::size_t t = 0; t < upstream.size(); ++t) {
          const auto p = upstream[t].next(h, s, a);
          for (std::size_t sn = 0; sn < sh.states; ++sn) mix[sn] += coefficients[t] * p[sn];
        }
        worst = std::max(worst, tv_distance(downstream.next(h, s, a), mix));
      }
  return worst;
}

inline TaskFamily generate_family(const FamilySpec& spec) {
  spec.validate();
  using namespace envgen_detail;
  const Shape shape = spec.shape();
  const std::size_t H = spec.horizon, S = spec.states, K = spec.actions, d = spec.dim, T = spec.tasks;
  Rng root(spec.seed);

  TaskFamily fam;
  fam.spec = spec;
  Rng phi_rng = root.split(1);
  fam.shared_phi = random_features(shape, d, phi_rng);

  Rng mu_rng = root.split(2);
  for (std::size_t t = 0; t < T; ++t) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxGenerationRetries && !placed; ++attempt) {
      MeasureTable cand = random_measure(H, S, d, mu_rng);
      const bool separated = std::all_of(fam.mus.begin(), fam.mus.end(), [&](const MeasureTable& m) {
        return measure_distance(m, cand) >= spec.decoy_separation;
      });
      if (separated) {
        fam.mus.push_back(std::move(cand));
        placed = true;
      }
    }
    if (!placed)
      throw GenerationError("generate_family: cannot place task measures at separation " +
                            std::to_string(spec.decoy_separation));
  }
  for (const auto& mu : fam.mus) fam.upstream.emplace_back(fam.shared_phi, mu, 0);

  for (std::size_t t = 0; t < T; ++t)
    fam.rewards.push_back(generate_reward(shape, spec.reward_dim, derive_seed(spec.seed, {3, t})));
  fam.downstream_reward = generate_reward(shape, spec.reward_dim, derive_seed(spec.seed, {6}));

  Rng coef_rng = root.split(4);
  fam.coefficients.assign(T, 0.0);
  fill_simplex(coef_rng, fam.coefficients);

  // Convex combination of the task measures keeps phi* as an exact feature.
  MeasureTable mixed(H, S, d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t h = 0; h < H; ++h)
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t j = 0; j < d; ++j) mixed(h, s, j) += fam.coefficients[t] * fam.mus[t](h, s, j);
  TabularLowRankMdp base(fam.shared_phi, mixed, 0);

  // Independent random kernel Q_h(.|s,a) and its worst-case TV to the base.
  Rng noise_rng = root.split(5);
  std::vector<std::vector<double>> noise(H * S * K, std::vector<double>(S));
  double worst = 0.0;
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t a = 0; a < K; ++a) {
        auto& q = noise[(h * S + s) * K + a];
        fill_simplex(noise_rng, q);
        worst = std::max(worst, tv_distance(q, base.next(h, s, a)));
      }

  double eps = 0.0;
  if (spec.xi_target > 0.0 && worst > 0.0) eps = std::min(1.0, spec.xi_target / worst);

  if (eps == 0.0) {
    fam.downstream = base;
  } else {
    for (;;) {
      // (1 - eps) * <phi*, mu_bar> + eps * Q written as one low-rank factorization
      // of dimension d + S*K: one-hot latent coordinates carry the rows of Q.
      const std::size_t D = d + S * K;
      FeatureTable phi(shape, D);
      MeasureTable mu(H, S, D);
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t s = 0; s < S; ++s)
          for (std::size_t a = 0; a < K; ++a) {
            auto f = phi.at(h, s, a);
            const auto base_f = fam.shared_phi.at(h, s, a);
            for (std::size_t j = 0; j < d; ++j) f[j] = (1.0 - eps) * base_f[j];
            f[d + s * K + a] = eps;
            const auto& q = noise[(h * S + s) * K + a];
            for (std::size_t sn = 0; sn < S; ++sn) mu(h, sn, d + s * K + a) = q[sn];
          }
        for (std::size_t sn = 0; sn < S; ++sn)
          for (std::size_t j = 0; j < d; ++j) mu(h, sn, j) = mixed(h, sn, j);
      }
      fam.downstream = TabularLowRankMdp(std::move(phi), std::move(mu), 0);
      if (measure_xi(fam.downstream, fam.upstream, fam.coefficients) <= spec.xi_target + 1e-12) break;
      eps *= 1.0 - 1e-9;
    }
  }
  fam.mix_weight = eps;
  return fam;
}

/// Finite classes that contain the truth; decoys come from the same
/// constructive scheme and respect the separation invariant. Member order
/// is shuffled so that lowest-index tie-breaking carries no information.
inline ModelClass generate_model_classes(const TaskFamily& family, const FamilySpec& spec, std::uint64_t seed) {
  spec.validate();
  using namespace envgen_detail;
  const Shape shape = family.shape();
  const std::size_t d = family.shared_phi.dim();
  const std::size_t T = family.tasks();
  require(spec.phi_class_size >= 1 && spec.psi_class_size >= T, "generate_model_classes: class too small");
  Rng root(seed);

  std::vector<FeatureTable> phis{family.shared_phi};
  Rng phi_rng = root.split(1);
  while (phis.size() < spec.phi_class_size) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxGenerationRetries && !placed; ++attempt) {
      FeatureTable cand = random_features(shape, d, phi_rng);
      const bool separated = std::all_of(phis.begin(), phis.end(), [&](const FeatureTable& f) {
        return feature_distance(f, cand) >= spec.decoy_separation;
      });
      if (separated) {
        phis.push_back(std::move(cand));
        placed = true;
      }
    }
    if (!placed) throw GenerationError("generate_model_classes: retry budget exhausted for Phi decoys");
  }

  std::vector<MeasureTable> psis(family.mus.begin(), family.mus.end());
  Rng psi_rng = root.split(2);
  while (psis.size() < spec.psi_class_size) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxGenerationRetries && !placed; ++attempt) {
      MeasureTable cand = random_measure(shape.horizon, shape.states, d, psi_rng);
      const bool separated = std::all_of(psis.begin(), psis.end(), [&](const MeasureTable& m) {
        return measure_distance(m, cand) >= spec.decoy_separation;
      });
      if (separated) {
        psis.push_back(std::move(cand));
        placed = true;
      }
    }
    if (!placed) throw GenerationError("generate_model_classes: retry budget exhausted for Psi decoys");
  }

  Rng perm_rng = root.split(3);
  std::vector<std::size_t> phi_order(phis.size()), psi_order(psis.size());
  for (std::size_t i = 0; i < phi_order.size(); ++i) phi_order[i] = i;
  for (std::size_t i = 0; i < psi_order.size(); ++i) psi_order[i] = i;
  shuffle(phi_order, perm_rng);
  shuffle(psi_order, perm_rng);

  ModelClass mc;
  mc.truth_psi.assign(T, 0);
  for (std::size_t pos = 0; pos < phi_order.size(); ++pos) {
    mc.phi.push_back(phis[phi_order[pos]]);
    if (phi_order[pos] == 0) mc.truth_phi = pos;
  }
  for (std::size_t pos = 0; pos < psi_order.size(); ++pos) {
    mc.psi.push_back(psis[psi_order[pos]]);
    if (psi_order[pos] < T) mc.truth_psi[psi_order[pos]] = pos;
  }
  return mc;
}

/// Minimum pairwise average TV within each class (infinity for singletons).
inline double min_class_separation(const ModelClass& mc) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < mc.phi.size(); ++i)
    for (std::size_t j = i + 1; j < mc.phi.size(); ++j) best = std::min(best, feature_distance(mc.phi[i], mc.phi[j]));
  for (std::size_t i = 0; i < mc.psi.size(); ++i)
    for (std::size_t j = i + 1; j < mc.psi.size(); ++j) best = std::min(best, measure_distance(mc.psi[i], mc.psi[j]));
  return best;
}

/// Largest ratio of pointwise TV to mean TV (uniform over (s,a)) between any
/// two distinct kernels <Phi_i, Psi_j> of the class, per step.
inline double smoothness_constant(const ModelClass& mc, std::size_t initial_state = 0) {
  std::vector<TabularLowRankMdp> kernels;
  for (const auto& f : mc.phi)
    for (const auto& m : mc.psi) kernels.emplace_back(f, m, initial_state);
  if (kernels.empty()) return 1.0;
  const Shape& sh = kernels.front().shape();
  const std::size_t cells = sh.states * sh.actions;
  std::vector<double> tv(cells);
  double c_r = 1.0;
  for (std::size_t x = 0; x < kernels.size(); ++x)
    for (std::size_t y = x + 1; y < kernels.size(); ++y)
      for (std::size_t h = 0; h < sh.horizon; ++h) {
        double mean = 0.0, peak = 0.0;
        for (std::size_t s = 0; s < sh.states; ++s)
          for (std::size_t a = 0; a < sh.actions; ++a) {
            const double v = tv_distance(kernels[x].next(h, s, a), kernels[y].next(h, s, a));
            mean += v;
            peak = std::max(peak, v);
          }
        mean /= static_cast<double>(cells);
        if (mean <= 1e-15) continue;  // identical at this step
        c_r = std::max(c_r, peak / mean);
      }
  return c_r;
}

inline FamilyConstants family_constants(const TaskFamily& family, const ModelClass& classes) {
  const Shape sh = family.shape();
  if (sh.horizon < 2)
    throw ConstantsError("family_constants: reachability needs horizon >= 2 (step 1 only visits s_1)");
  FamilyConstants c;
  c.upsilon = 1.0 / static_cast<double>(sh.states);
  c.kappa_u_lb = std::numeric_limits<double>::infinity();
  const Policy uniform = Policy::uniform(sh);
  for (const auto& task : family.upstream) {
    const auto dist = state_distribution(task, uniform);
    // Step 1 is pinned to s_1, so reachability is certified from step 2 on.
    for (std::size_t h = 1; h < sh.horizon; ++h)
      for (double m : dist[h]) c.kappa_u_lb = std::min(c.kappa_u_lb, m);
  }
  if (!(c.kappa_u_lb > 0.0))
    throw ConstantsError("family_constants: some state is unreachable under the uniform policy; regenerate the family");
  c.c_r = smoothness_constant(classes, family.downstream.initial_state());
  c.xi_measured = measure_xi(family.downstream, family.upstream, family.coefficients);
  c.c_l = 1.0;
  return c;
}

/// xi_down = xi + C_L * C_R * T * upsilon * eps_u / kappa_u.
inline double compute_xi_down(const FamilyConstants& constants, std::size_t tasks, double eps_u) {
  require(eps_u >= 0.0, "compute_xi_down: eps_u must be nonnegative");
  if (!(constants.kappa_u_lb > 0.0)) throw ConstantsError("compute_xi_down: kappa_u lower bound must be positive");
  return constants.xi_measured +
         constants.c_l * constants.c_r * static_cast<double>(tasks) * constants.upsilon * eps_u / constants.kappa_u_lb;
}

}  // namespace refuel
