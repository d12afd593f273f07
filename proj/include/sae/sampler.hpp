#ifndef SAE_SAMPLER_HPP
#define SAE_SAMPLER_HPP

// Systematic-scan MCMC for one stage: joint normal draw of all regression
// coefficients, inverse-gamma variance draws, a sequential sweep over the
// NNGP latent effects, and random-walk Metropolis on log(phi).

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "sae/error.hpp"
#include "sae/model.hpp"
#include "sae/random.hpp"
#include "sae/spatial_core.hpp"

namespace sae {

struct McmcConfig {
  long n_iter = 25000;
  long n_burn = 15000;
  long thin = 10;
  int n_chains = 3;
  std::uint64_t seed = 1;
  double step_sd = 0.1;  ///< initial proposal SD on log(phi)
  bool adapt = true;
  double target_accept = 0.35;

  void validate() const {
    if (n_iter < 1 || n_burn < 0 || n_burn >= n_iter) throw InvalidArgument("mcmc: need 0 <= n_burn < n_iter");
    if (thin < 1) throw InvalidArgument("mcmc: thin must be at least 1");
    if (n_chains < 1) throw InvalidArgument("mcmc: n_chains must be at least 1");
    if (!(step_sd >= 0.0)) throw InvalidArgument("mcmc: step_sd must be non-negative");
  }

  long retained_per_chain() const { return (n_iter - n_burn) / thin; }
};

struct GraphOptions {
  std::size_t m = 15;
  OrderingRule ordering = OrderingRule::coordinate;
};

/// Immutable pieces of one stage fit: data, design, graph and priors.
class StageModel {
 public:
  StageModel(Stage stage, SubmodelSpec spec, StageData data, Priors priors, GraphOptions graph = {})
      : stage_(stage), spec_(spec), data_(std::move(data)), priors_(std::move(priors)), graph_opts_(graph) {
    if (!spec_.include_x) data_.covariates.resize(static_cast<Eigen::Index>(data_.n()), 0);
    if (data_.n() == 0) throw InvalidArgument("stage model: no observations");
    if (static_cast<std::size_t>(data_.response.size()) != data_.n() || data_.locations.size() != data_.n())
      throw InvalidArgument("stage model: response, strata and locations differ in length");
    const int q = data_.num_strata, p = data_.p();
    if (priors_.noise_scales.size() != q) throw InvalidArgument("priors: need one noise scale per stratum");
    if (priors_.effect_scales.size() != p + 1) throw InvalidArgument("priors: need p+1 effect scales");
    priors_.validate();
    layout_ = CoefficientLayout{q, p, spec_.stratum_coefficients};
    design_ = build_design(data_.strata, data_.covariates, q);
    z_ = layout_.regression_matrix(design_);

    group_.resize(data_.n());
    for (std::size_t i = 0; i < data_.n(); ++i) group_[i] = spec_.stratum_variances ? data_.strata[i] : 0;
    const int groups = spec_.stratum_variances ? q : 1;
    group_rows_.assign(static_cast<std::size_t>(groups), {});
    for (std::size_t i = 0; i < data_.n(); ++i) group_rows_[static_cast<std::size_t>(group_[i])].push_back(i);
    group_gram_.assign(static_cast<std::size_t>(groups), Eigen::MatrixXd::Zero(layout_.size(), layout_.size()));
    for (std::size_t i = 0; i < data_.n(); ++i) {
      const auto zi = z_.row(static_cast<Eigen::Index>(i));
      group_gram_[static_cast<std::size_t>(group_[i])].noalias() += zi.transpose() * zi;
    }

    if (spec_.spatial_effect) {
      graph_ = build_neighbor_graph(data_.locations, graph_opts_.m, graph_opts_.ordering);
      factorizer_ = NngpFactorizer(graph_, data_.locations);
    }
  }

  Stage stage() const { return stage_; }
  const SubmodelSpec& spec() const { return spec_; }
  const StageData& data() const { return data_; }
  const Priors& priors() const { return priors_; }
  const CoefficientLayout& layout() const { return layout_; }
  const DesignMatrices& design() const { return design_; }
  const Eigen::MatrixXd& regression_matrix() const { return z_; }
  const NeighborGraph& graph() const { return graph_; }
  const NngpFactorizer& factorizer() const { return factorizer_; }
  const GraphOptions& graph_options() const { return graph_opts_; }
  std::size_t n() const { return data_.n(); }
  int num_groups() const { return static_cast<int>(group_rows_.size()); }
  int group(std::size_t i) const { return group_[i]; }
  const std::vector<std::size_t>& group_rows(int g) const { return group_rows_[static_cast<std::size_t>(g)]; }
  const Eigen::MatrixXd& group_gram(int g) const { return group_gram_[static_cast<std::size_t>(g)]; }

  /// Noise variance of observation i (tau2 or gamma2 of its stratum).
  double noise_variance(const StageState& s, std::size_t i) const { return s.noise_variances(data_.strata[i]); }

  Eigen::VectorXd linear_predictor(const StageState& s) const { return z_ * layout_.pack(s); }

  /// Fitted mean including the spatial effect.
  Eigen::VectorXd fitted(const StageState& s) const {
    Eigen::VectorXd mu = linear_predictor(s);
    if (spec_.spatial_effect) mu += s.spatial;
    return mu;
  }

  /// Per-observation log p(y_i | state).
  Eigen::VectorXd loglik(const StageState& s) const {
    constexpr double log2pi = 1.8378770664093453;
    const Eigen::VectorXd mu = fitted(s);
    Eigen::VectorXd ll(static_cast<Eigen::Index>(n()));
    for (std::size_t i = 0; i < n(); ++i) {
      const double v = noise_variance(s, i);
      const double e = data_.response(static_cast<Eigen::Index>(i)) - mu(static_cast<Eigen::Index>(i));
      ll(static_cast<Eigen::Index>(i)) = -0.5 * (log2pi + std::log(v) + e * e / v);
    }
    return ll;
  }

  /// Pooled least-squares coefficients, EDA residual variance, w = 0 and phi
  /// at the midpoint of its prior support.
  StageState initial_state() const {
    const int q = data_.num_strata, p = data_.p();
    StageState s = StageState::zeros(q, p, n());
    Eigen::MatrixXd z(static_cast<Eigen::Index>(n()), p + 1);
    z.col(0).setOnes();
    z.rightCols(p) = data_.covariates;
    const Eigen::VectorXd coef = z.colPivHouseholderQr().solve(data_.response);
    s.intercept = coef(0);
    s.slopes = coef.tail(p);
    const Eigen::VectorXd resid = data_.response - z * coef;
    const double dof = std::max<double>(1.0, static_cast<double>(n()) - p - 1);
    double v = resid.squaredNorm() / dof;
    if (!(v > 0.0) || !std::isfinite(v)) v = priors_.noise_scales(0);
    s.noise_variances.setConstant(v);
    s.effect_variances = priors_.effect_scales;
    s.theta.sigma2 = priors_.spatial_scale;
    s.theta.phi = 0.5 * (priors_.phi_lower + priors_.phi_upper);
    if (!spec_.spatial_effect) s.spatial.setZero();
    return s;
  }

 private:
  Stage stage_;
  SubmodelSpec spec_;
  StageData data_;
  Priors priors_;
  GraphOptions graph_opts_;
  CoefficientLayout layout_;
  DesignMatrices design_;
  Eigen::MatrixXd z_;
  std::vector<int> group_;
  std::vector<std::vector<std::size_t>> group_rows_;
  std::vector<Eigen::MatrixXd> group_gram_;
  NeighborGraph graph_;
  NngpFactorizer factorizer_;
};

/// Unit-variance NNGP factors at the current phi.
struct DecayCache {
  double phi = 0.0;
  NngpFactors unit;

  void refresh(const StageModel& model, double new_phi) {
    phi = new_phi;
    unit = model.factorizer().factorize({1.0, new_phi});
  }

  NngpFactors scaled(double sigma2) const {
    NngpFactors f = unit;
    for (auto& d : f.delta2) d *= sigma2;
    return f;
  }
};

/// NNGP log density of w with covariance sigma2 times the unit-variance factors.
inline double scaled_log_density(const Eigen::VectorXd& w, const NngpFactors& unit, const NeighborGraph& g,
                                 double sigma2) {
  constexpr double log2pi = 1.8378770664093453;
  double lp = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double d = sigma2 * unit.delta2[i];
    const double e = w(static_cast<Eigen::Index>(i)) - conditional_mean(g, unit, w, i);
    lp -= 0.5 * (log2pi + std::log(d) + e * e / d);
  }
  return lp;
}

/// Draws all regression coefficients jointly from their Gaussian full conditional.
inline void gibbs_regression_block(const StageModel& model, StageState& s, Rng& rng) {
  const auto& lay = model.layout();
  const int k = lay.size();
  Eigen::MatrixXd prec = Eigen::MatrixXd::Zero(k, k);
  for (int g = 0; g < model.num_groups(); ++g) {
    prec.noalias() += model.group_gram(g) / s.noise_variances(g);
  }
  if (lay.stratum) {
    for (int j = 0; j < lay.q; ++j) {
      prec(1 + j, 1 + j) += 1.0 / s.effect_variances(0);
      for (int c = 0; c < lay.p; ++c) {
        const int idx = lay.stratum_slopes_offset() + j * lay.p + c;
        prec(idx, idx) += 1.0 / s.effect_variances(1 + c);
      }
    }
  }
  const auto& z = model.regression_matrix();
  Eigen::VectorXd weighted(static_cast<Eigen::Index>(model.n()));
  for (std::size_t i = 0; i < model.n(); ++i) {
    double r = model.data().response(static_cast<Eigen::Index>(i));
    if (model.spec().spatial_effect) r -= s.spatial(static_cast<Eigen::Index>(i));
    weighted(static_cast<Eigen::Index>(i)) = r / model.noise_variance(s, i);
  }
  const Eigen::VectorXd b = z.transpose() * weighted;
  Eigen::LLT<Eigen::MatrixXd> llt(prec);
  if (llt.info() != Eigen::Success)
    throw InvalidArgument("regression block: conditional precision is singular (collinear design?)");
  Eigen::VectorXd e(k);
  for (int i = 0; i < k; ++i) e(i) = rng.normal();
  const Eigen::VectorXd coef = llt.solve(b) + llt.matrixU().solve(e);
  lay.unpack(coef, s);
}

/// Inverse-gamma draws for the noise variances and (when present) the
/// stratum-effect variances. A stratum without observations draws from its prior.
inline void gibbs_variance_block(const StageModel& model, StageState& s, Rng& rng) {
  const auto& pr = model.priors();
  const double a = pr.ig_shape;
  const Eigen::VectorXd mu = model.fitted(s);
  const auto& y = model.data().response;
  if (model.spec().stratum_variances) {
    for (int j = 0; j < model.num_groups(); ++j) {
      double ss = 0.0;
      const auto& rows = model.group_rows(j);
      for (auto i : rows) {
        const double e = y(static_cast<Eigen::Index>(i)) - mu(static_cast<Eigen::Index>(i));
        ss += e * e;
      }
      s.noise_variances(j) = rng.inverse_gamma(a + 0.5 * static_cast<double>(rows.size()), pr.noise_scales(j) + 0.5 * ss);
    }
  } else {
    const double ss = (y - mu).squaredNorm();
    s.noise_variances.setConstant(rng.inverse_gamma(a + 0.5 * static_cast<double>(model.n()), pr.noise_scales(0) + 0.5 * ss));
  }
  if (model.spec().stratum_coefficients) {
    const auto& lay = model.layout();
    const double shape = a + 0.5 * lay.q;
    s.effect_variances(0) = rng.inverse_gamma(shape, pr.effect_scales(0) + 0.5 * s.stratum_intercepts.squaredNorm());
    for (int c = 0; c < lay.p; ++c) {
      double ss = 0.0;
      for (int j = 0; j < lay.q; ++j) ss += s.stratum_slopes(j * lay.p + c) * s.stratum_slopes(j * lay.p + c);
      s.effect_variances(1 + c) = rng.inverse_gamma(shape, pr.effect_scales(1 + c) + 0.5 * ss);
    }
  }
}

/// One sweep over the latent effects in NNGP order; each w_i is drawn from
/// its full conditional given parents, children and observation i.
inline void update_w_sequential(const StageModel& model, StageState& s, const NngpFactors& unit, Rng& rng) {
  const auto& g = model.graph();
  const double sigma2 = s.theta.sigma2;
  const Eigen::VectorXd lin = model.linear_predictor(s);
  const auto& y = model.data().response;
  auto& w = s.spatial;
  for (std::size_t r = 0; r < g.size(); ++r) {
    const std::size_t i = g.ordering[r];
    const auto ii = static_cast<Eigen::Index>(i);
    const double d_i = sigma2 * unit.delta2[i];
    double prec = 1.0 / d_i;
    double num = conditional_mean(g, unit, w, i) / d_i;
    for (const auto& [c, slot] : g.children[i]) {
      const double a_ci = unit.a[c](static_cast<Eigen::Index>(slot));
      const double d_c = sigma2 * unit.delta2[c];
      const double rest = conditional_mean(g, unit, w, c) - a_ci * w(ii);
      prec += a_ci * a_ci / d_c;
      num += a_ci * (w(static_cast<Eigen::Index>(c)) - rest) / d_c;
    }
    const double tau2 = model.noise_variance(s, i);
    prec += 1.0 / tau2;
    num += (y(ii) - lin(ii)) / tau2;
    w(ii) = num / prec + rng.normal() / std::sqrt(prec);
  }
}

/// sigma2_w | w ~ IG(a + n/2, b + Q/2), Q the unit-variance NNGP quadratic form.
inline void gibbs_spatial_variance(const StageModel& model, StageState& s, const NngpFactors& unit, Rng& rng) {
  const auto& g = model.graph();
  double q = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double e = s.spatial(static_cast<Eigen::Index>(i)) - conditional_mean(g, unit, s.spatial, i);
    q += e * e / unit.delta2[i];
  }
  const auto& pr = model.priors();
  s.theta.sigma2 = rng.inverse_gamma(pr.ig_shape + 0.5 * static_cast<double>(g.size()), pr.spatial_scale + 0.5 * q);
}

/// Random-walk Metropolis on log(phi) targeting p(w | sigma2_w, phi) p(phi).
/// Returns the acceptance probability of the move; the cache is refreshed on acceptance.
inline double metropolis_phi(const StageModel& model, StageState& s, DecayCache& cache, double step_sd, Rng& rng,
                             bool* accepted = nullptr) {
  if (accepted) *accepted = true;
  if (step_sd == 0.0) return 1.0;
  const auto& pr = model.priors();
  const double cur = s.theta.phi;
  const double prop = cur * std::exp(step_sd * rng.normal());
  const double u = rng.uniform();
  if (!(prop >= pr.phi_lower && prop <= pr.phi_upper)) {
    if (accepted) *accepted = false;
    return 0.0;
  }
  DecayCache next;
  next.refresh(model, prop);
  const double lp_cur = scaled_log_density(s.spatial, cache.unit, model.graph(), s.theta.sigma2) +
                        pr.log_decay_density(cur) + std::log(cur);
  const double lp_prop = scaled_log_density(s.spatial, next.unit, model.graph(), s.theta.sigma2) +
                         pr.log_decay_density(prop) + std::log(prop);
  const double alpha = std::min(1.0, std::exp(lp_prop - lp_cur));
  const bool ok = u < alpha;
  if (ok) {
    cache = std::move(next);
    s.theta.phi = prop;
  }
  if (accepted) *accepted = ok;
  return alpha;
}

/// Retained draws of one chain.
struct ChainSamples {
  std::vector<StageState> draws;
  Eigen::MatrixXd loglik;  // draws x n
  double acceptance = 1.0;         ///< phi acceptance rate after burn-in
  double burnin_acceptance = 1.0;  ///< over the second half of burn-in
  double step_sd = 0.0;            ///< proposal SD after adaptation

  std::size_t size() const { return draws.size(); }
};

/// All chains of one stage fit, concatenated in chain order.
struct Posterior {
  Stage stage = Stage::outcome;
  SubmodelSpec spec;
  std::vector<ChainSamples> chains;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& c : chains) n += c.size();
    return n;
  }
  const StageState& draw(std::size_t l) const {
    for (const auto& c : chains) {
      if (l < c.size()) return c.draws[l];
      l -= c.size();
    }
    throw InvalidArgument("posterior draw index out of range");
  }
  Eigen::MatrixXd loglik() const {
    if (chains.empty()) return {};
    Eigen::MatrixXd m(static_cast<Eigen::Index>(size()), chains.front().loglik.cols());
    Eigen::Index row = 0;
    for (const auto& c : chains) {
      m.middleRows(row, c.loglik.rows()) = c.loglik;
      row += c.loglik.rows();
    }
    return m;
  }
};

/// Everything needed to continue a chain bit-exactly.
struct ChainCheckpoint {
  int chain = 0;
  long iteration = 0;  ///< completed iterations
  StageState state;
  std::string rng_state;
  double step_sd = 0.0;
  long post_accepted = 0, post_proposed = 0;
  double late_burn_alpha = 0.0;
  long late_burn_count = 0;
  ChainSamples samples;
};

/// Drives a single chain; can stop part-way and resume from a checkpoint.
class ChainRunner {
 public:
  ChainRunner(const StageModel& model, const McmcConfig& config, int chain)
      : model_(model), config_(config), rng_(config.seed, static_cast<std::uint64_t>(chain) + 1) {
    config_.validate();
    ck_.chain = chain;
    ck_.state = model_.initial_state();
    ck_.step_sd = config_.step_sd;
    reserve();
    if (model_.spec().spatial_effect) cache_.refresh(model_, ck_.state.theta.phi);
  }

  ChainRunner(const StageModel& model, const McmcConfig& config, ChainCheckpoint ck)
      : model_(model), config_(config), ck_(std::move(ck)) {
    config_.validate();
    rng_.restore(ck_.rng_state);
    if (ck_.samples.loglik.rows() == 0) reserve();
    if (model_.spec().spatial_effect) cache_.refresh(model_, ck_.state.theta.phi);
  }

  bool done() const { return ck_.iteration >= config_.n_iter; }
  long iteration() const { return ck_.iteration; }

  /// Runs up to `budget` more iterations (all remaining when negative).
  void advance(long budget = -1) {
    const bool spatial = model_.spec().spatial_effect;
    while (!done() && budget != 0) {
      const long t = ck_.iteration + 1;
      StageState& s = ck_.state;
      gibbs_regression_block(model_, s, rng_);
      gibbs_variance_block(model_, s, rng_);
      if (spatial) {
        update_w_sequential(model_, s, cache_.unit, rng_);
        gibbs_spatial_variance(model_, s, cache_.unit, rng_);
        bool acc = false;
        const double alpha = metropolis_phi(model_, s, cache_, ck_.step_sd, rng_, &acc);
        if (t <= config_.n_burn) {
          if (config_.adapt && ck_.step_sd > 0.0) {
            // Robbins-Monro on log step size; frozen once burn-in ends.
            const double gain = std::pow(static_cast<double>(t), -0.6);
            ck_.step_sd = std::clamp(ck_.step_sd * std::exp(gain * (alpha - config_.target_accept)), 1e-4, 10.0);
          }
          if (2 * t > config_.n_burn) {
            ck_.late_burn_alpha += acc ? 1.0 : 0.0;
            ++ck_.late_burn_count;
          }
        } else {
          ck_.post_accepted += acc ? 1 : 0;
          ++ck_.post_proposed;
        }
      }
      check_finite(s, t);
      if (t > config_.n_burn && (t - config_.n_burn) % config_.thin == 0) {
        const auto row = static_cast<Eigen::Index>(ck_.samples.draws.size());
        ck_.samples.loglik.row(row) = model_.loglik(s).transpose();
        ck_.samples.draws.push_back(s);
      }
      ck_.iteration = t;
      if (budget > 0) --budget;
    }
    update_rates();
  }

  ChainCheckpoint checkpoint() const {
    ChainCheckpoint c = ck_;
    c.rng_state = rng_.state();
    return c;
  }

  ChainSamples result() const { return ck_.samples; }

 private:
  void reserve() {
    ck_.samples.loglik.resize(config_.retained_per_chain(), static_cast<Eigen::Index>(model_.n()));
    ck_.samples.draws.reserve(static_cast<std::size_t>(config_.retained_per_chain()));
  }

  void update_rates() {
    auto& sm = ck_.samples;
    sm.step_sd = ck_.step_sd;
    if (!model_.spec().spatial_effect || ck_.step_sd == 0.0) {
      sm.acceptance = sm.burnin_acceptance = 1.0;
      return;
    }
    sm.acceptance = ck_.post_proposed ? static_cast<double>(ck_.post_accepted) / static_cast<double>(ck_.post_proposed) : 0.0;
    sm.burnin_acceptance = ck_.late_burn_count ? ck_.late_burn_alpha / static_cast<double>(ck_.late_burn_count) : 0.0;
  }

  static void check_finite(const StageState& s, long t) {
    auto bad = [](const Eigen::VectorXd& v) { return !v.allFinite(); };
    if (!std::isfinite(s.intercept) || bad(s.slopes) || bad(s.stratum_intercepts) || bad(s.stratum_slopes) ||
        bad(s.spatial))
      throw SamplerError("non-finite coefficient or latent draw", t);
    if (bad(s.noise_variances) || bad(s.effect_variances) || !std::isfinite(s.theta.sigma2) ||
        (s.noise_variances.array() <= 0.0).any())
      throw SamplerError("divergent variance draw", t);
  }

  const StageModel& model_;
  McmcConfig config_;
  Rng rng_;
  ChainCheckpoint ck_;
  DecayCache cache_;
};

inline ChainSamples run_chain(const StageModel& model, const McmcConfig& config, int chain = 0) {
  ChainRunner runner(model, config, chain);
  runner.advance();
  return runner.result();
}

/// Runs config.n_chains independent chains (stream = chain index), in
/// parallel when threads > 1. Output does not depend on the thread count.
inline Posterior run_chains(const StageModel& model, const McmcConfig& config, int threads = 1) {
  config.validate();
  Posterior post;
  post.stage = model.stage();
  post.spec = model.spec();
  post.chains.resize(static_cast<std::size_t>(config.n_chains));
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  auto worker = [&] {
    for (int c = next++; c < config.n_chains; c = next++) {
      try {
        post.chains[static_cast<std::size_t>(c)] = run_chain(model, config, c);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int nt = std::clamp(threads, 1, config.n_chains);
  if (nt == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  return post;
}

}  // namespace sae

#endif  // SAE_SAMPLER_HPP
