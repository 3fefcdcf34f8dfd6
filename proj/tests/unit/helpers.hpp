#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "refuel.hpp"

namespace testing_helpers {

using namespace refuel;

/// Tabular MDP written as a low-rank one with one-hot features:
/// phi_h(s,a) = e_{s*K+a} and mu_h(s')_{s*K+a} = kernel(h, s, a)[s'].
inline TabularLowRankMdp tabular_mdp(Shape sh,
                                     const std::function<std::vector<double>(std::size_t, std::size_t, std::size_t)>& kernel,
                                     std::size_t initial_state = 0) {
  const std::size_t D = sh.states * sh.actions;
  FeatureTable phi(sh, D);
  MeasureTable mu(sh.horizon, sh.states, D);
  for (std::size_t h = 0; h < sh.horizon; ++h)
    for (std::size_t s = 0; s < sh.states; ++s)
      for (std::size_t a = 0; a < sh.actions; ++a) {
        phi.at(h, s, a)[s * sh.actions + a] = 1.0;
        const auto row = kernel(h, s, a);
        for (std::size_t sn = 0; sn < sh.states; ++sn) mu(h, sn, s * sh.actions + a) = row[sn];
      }
  return TabularLowRankMdp(std::move(phi), std::move(mu), initial_state);
}

inline TabularLowRankMdp random_mdp(Shape sh, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  auto phi = envgen_detail::random_features(sh, d, rng);
  auto mu = envgen_detail::random_measure(sh.horizon, sh.states, d, rng);
  return TabularLowRankMdp(std::move(phi), std::move(mu), 0);
}

inline RewardTable reward_of(Shape sh, const std::vector<double>& values) {
  return RewardTable{StepTable(sh, values), 1, {1.0}};
}

/// Expected return by explicit enumeration of every trajectory, computed
/// forward from s_1 with the raw inner products. No dynamic programming.
inline double enumerate_value(const TabularLowRankMdp& mdp, const StepTable& r, const Policy& pi) {
  const std::size_t H = mdp.horizon(), S = mdp.states(), K = mdp.actions();
  std::function<double(std::size_t, std::size_t, double, double)> walk = [&](std::size_t h, std::size_t s,
                                                                             double prob, double ret) -> double {
    if (h == H) return prob * ret;
    double total = 0.0;
    for (std::size_t a = 0; a < K; ++a) {
      const double pa = pi(h, s, a);
      if (pa == 0.0) continue;
      const auto f = mdp.phi().at(h, s, a);
      for (std::size_t sn = 0; sn < S; ++sn) {
        double p = 0.0;
        for (std::size_t j = 0; j < f.size(); ++j) p += f[j] * mdp.mu()(h, sn, j);
        if (p <= 0.0) continue;
        total += walk(h + 1, sn, prob * pa * p, ret + r(h, s, a));
      }
    }
    return total;
  };
  return walk(0, mdp.initial_state(), 1.0, 0.0);
}

/// Every deterministic policy of a tiny shape, in lexicographic order.
inline std::vector<Policy> all_deterministic(Shape sh) {
  const std::size_t cells = sh.horizon * sh.states;
  std::vector<Policy> out;
  std::vector<std::size_t> idx(cells, 0);
  for (;;) {
    out.push_back(Policy::deterministic(sh, idx));
    std::size_t i = 0;
    while (i < cells && ++idx[i] == sh.actions) idx[i++] = 0;
    if (i == cells) break;
  }
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testing_helpers
