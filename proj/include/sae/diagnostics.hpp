#ifndef SAE_DIAGNOSTICS_HPP
#define SAE_DIAGNOSTICS_HPP

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sae/error.hpp"
#include "sae/model.hpp"
#include "sae/sampler.hpp"

namespace sae {

struct NamedValue {
  std::string name;
  double value;
};

/// Scalar parameters of a state, named after the stage's symbols. Inactive
/// blocks (per the submodel) are omitted; latent effects only on request.
inline std::vector<NamedValue> flatten_parameters(const StageState& s, Stage stage, const SubmodelSpec& spec,
                                                  bool include_latent = false) {
  const bool out = stage == Stage::outcome;
  const std::string b = out ? "beta" : "alpha";
  const std::string e = out ? "sigma2" : "nu2";
  const std::string sp = out ? "w" : "u";
  const std::string noise = out ? "tau2" : "gamma2";
  std::vector<NamedValue> v;
  v.push_back({b + "0", s.intercept});
  const int q = s.q(), p = s.p();
  if (spec.stratum_coefficients)
    for (int j = 0; j < q; ++j) v.push_back({b + "_tilde0[" + std::to_string(j) + "]", s.stratum_intercepts(j)});
  for (int k = 0; k < p; ++k) v.push_back({b + "[" + std::to_string(k + 1) + "]", s.slopes(k)});
  if (spec.stratum_coefficients) {
    for (int j = 0; j < q; ++j)
      for (int k = 0; k < p; ++k)
        v.push_back({b + "_tilde[" + std::to_string(j) + "," + std::to_string(k + 1) + "]", s.stratum_slopes(j * p + k)});
    for (int k = 0; k <= p; ++k) v.push_back({e + "[" + std::to_string(k) + "]", s.effect_variances(k)});
  }
  if (spec.spatial_effect) {
    v.push_back({e + "_" + sp, s.theta.sigma2});
    v.push_back({"phi_" + sp, s.theta.phi});
  }
  if (spec.stratum_variances) {
    for (int j = 0; j < q; ++j) v.push_back({noise + "[" + std::to_string(j) + "]", s.noise_variances(j)});
  } else {
    v.push_back({noise, s.noise_variances(0)});
  }
  if (include_latent && spec.spatial_effect)
    for (Eigen::Index i = 0; i < s.spatial.size(); ++i) v.push_back({sp + "[" + std::to_string(i) + "]", s.spatial(i)});
  return v;
}

namespace detail {
inline double quantile_sorted(const std::vector<double>& x, double prob) {
  const double h = (static_cast<double>(x.size()) - 1.0) * prob;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, x.size() - 1);
  return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}
}  // namespace detail

/// Empirical quantile with linear interpolation between order statistics (type 7).
inline double quantile_type7(std::vector<double> x, double prob) {
  if (x.empty()) throw InvalidArgument("quantile of empty sample");
  std::sort(x.begin(), x.end());
  return detail::quantile_sorted(x, prob);
}

struct Summary {
  double mean = 0.0;
  double sd = 0.0;
  double lo = 0.0;  ///< 2.5%
  double hi = 0.0;  ///< 97.5%
};

inline Summary summarize(std::span<const double> x) {
  if (x.empty()) throw InvalidArgument("summary of empty sample");
  std::vector<double> sorted(x.begin(), x.end());
  std::sort(sorted.begin(), sorted.end());
  Summary s;
  double sum = 0.0;
  for (double v : x) sum += v;
  s.mean = sorted.front() == sorted.back() ? sorted.front() : sum / static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - s.mean) * (v - s.mean);
  s.sd = x.size() > 1 ? std::sqrt(ss / static_cast<double>(x.size() - 1)) : 0.0;
  s.lo = detail::quantile_sorted(sorted, 0.025);
  s.hi = detail::quantile_sorted(sorted, 0.975);
  return s;
}

struct RhatResult {
  double rhat = 1.0;
  bool degenerate = false;  ///< zero within-chain variance; rhat reported as 1
};

/// Split-Rhat: each chain is halved, then the usual between/within ratio.
inline RhatResult split_rhat(const std::vector<std::vector<double>>& chains) {
  if (chains.size() < 2)
    throw InvalidArgument("gelman_rubin needs at least 2 chains; use within-chain diagnostics for a single chain");
  std::size_t len = chains.front().size();
  for (const auto& c : chains) len = std::min(len, c.size());
  const std::size_t half = len / 2;
  if (half < 2) throw InvalidArgument("gelman_rubin: chains too short to split");
  std::vector<std::vector<double>> parts;
  for (const auto& c : chains) {
    parts.emplace_back(c.begin(), c.begin() + static_cast<std::ptrdiff_t>(half));
    parts.emplace_back(c.begin() + static_cast<std::ptrdiff_t>(len - half), c.begin() + static_cast<std::ptrdiff_t>(len));
  }
  const double n = static_cast<double>(half);
  const double m = static_cast<double>(parts.size());
  std::vector<double> means;
  double w = 0.0;
  for (const auto& p : parts) {
    double mu = 0.0;
    for (double v : p) mu += v - p.front();
    mu = p.front() + mu / n;
    double ss = 0.0;
    for (double v : p) ss += (v - mu) * (v - mu);
    w += ss / (n - 1.0);
    means.push_back(mu);
  }
  w /= m;
  double grand = 0.0;
  for (double mu : means) grand += mu - means.front();
  grand = means.front() + grand / m;
  double b = 0.0;
  for (double mu : means) b += (mu - grand) * (mu - grand);
  b *= n / (m - 1.0);
  RhatResult r;
  if (!(w > 0.0)) {
    r.degenerate = true;
    r.rhat = b > 0.0 ? std::numeric_limits<double>::infinity() : 1.0;
    return r;
  }
  const double var_plus = (n - 1.0) / n * w + b / n;
  r.rhat = std::sqrt(var_plus / w);
  return r;
}

struct ParameterSummary {
  std::string name;
  Summary summary;
  RhatResult rhat;
  bool has_rhat = false;
};

/// Posterior summary of every scalar parameter, with split-Rhat across chains.
inline std::vector<ParameterSummary> summarize_posterior(const Posterior& post) {
  if (post.size() == 0) throw InvalidArgument("empty posterior");
  const auto names = flatten_parameters(post.draw(0), post.stage, post.spec);
  std::vector<std::vector<std::vector<double>>> per_chain(names.size());
  for (auto& v : per_chain) v.resize(post.chains.size());
  for (std::size_t c = 0; c < post.chains.size(); ++c)
    for (const auto& d : post.chains[c].draws) {
      const auto flat = flatten_parameters(d, post.stage, post.spec);
      for (std::size_t k = 0; k < flat.size(); ++k) per_chain[k][c].push_back(flat[k].value);
    }
  std::vector<ParameterSummary> out;
  for (std::size_t k = 0; k < names.size(); ++k) {
    ParameterSummary ps;
    ps.name = names[k].name;
    std::vector<double> all;
    for (const auto& c : per_chain[k]) all.insert(all.end(), c.begin(), c.end());
    ps.summary = summarize(all);
    if (post.chains.size() >= 2 && post.chains.front().size() >= 4) {
      ps.rhat = split_rhat(per_chain[k]);
      ps.has_rhat = true;
    }
    out.push_back(ps);
  }
  return out;
}

/// Split-Rhat per scalar parameter.
inline std::vector<std::pair<std::string, RhatResult>> gelman_rubin(const Posterior& post) {
  if (post.chains.size() < 2)
    throw InvalidArgument("gelman_rubin needs at least 2 chains; use within-chain diagnostics for a single chain");
  std::vector<std::pair<std::string, RhatResult>> out;
  for (const auto& p : summarize_posterior(post)) out.emplace_back(p.name, p.rhat);
  return out;
}

}  // namespace sae

#endif  // SAE_DIAGNOSTICS_HPP
