#ifndef SAE_SELECTION_HPP
#define SAE_SELECTION_HPP

// Fit criteria from an L x n matrix of per-draw, per-observation log likelihoods.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/sampler.hpp"

namespace sae {

using LogLikMatrix = Eigen::MatrixXd;

struct FitReport {
  std::string model;
  double dic = 0, p_d = 0;
  double waic1 = 0, waic2 = 0, p1 = 0, p2 = 0;
  double lppd = 0;
  double rmse = 0;
};

namespace detail {

inline void check_loglik(const LogLikMatrix& m, bool allow_neg_inf = false) {
  if (m.rows() < 2) throw InvalidArgument("log-likelihood matrix needs at least 2 draws");
  for (Eigen::Index i = 0; i < m.cols(); ++i)
    for (Eigen::Index l = 0; l < m.rows(); ++l) {
      const double v = m(l, i);
      if (std::isnan(v) || v == std::numeric_limits<double>::infinity() || (!allow_neg_inf && !std::isfinite(v)))
        throw InvalidArgument("log-likelihood entry (draw " + std::to_string(l) + ", observation " +
                              std::to_string(i) + ") is not finite");
    }
}

/// log( mean_l exp(m[l, i]) ) with the max factored out.
inline double log_mean_exp(const LogLikMatrix& m, Eigen::Index i) {
  const double mx = m.col(i).maxCoeff();
  if (!std::isfinite(mx)) throw InvalidArgument("observation " + std::to_string(i) + " has -inf mean predictive density");
  const double s = (m.col(i).array() - mx).exp().sum();
  const double v = mx + std::log(s / static_cast<double>(m.rows()));
  if (!std::isfinite(v)) throw InvalidArgument("observation " + std::to_string(i) + " has -inf mean predictive density");
  return v;
}

/// Mean of a column as an offset from its first entry; exact for constant columns.
inline double column_mean(const LogLikMatrix& m, Eigen::Index i) {
  const double ref = m(0, i);
  double acc = 0.0;
  for (Eigen::Index l = 0; l < m.rows(); ++l) acc += m(l, i) - ref;
  return ref + acc / static_cast<double>(m.rows());
}

/// Left-to-right sum of row l.
inline double row_sum(const LogLikMatrix& m, Eigen::Index l) {
  double acc = 0.0;
  for (Eigen::Index i = 0; i < m.cols(); ++i) acc += m(l, i);
  return acc;
}

}  // namespace detail

inline double lppd(const LogLikMatrix& m) {
  detail::check_loglik(m, true);
  double total = 0.0;
  for (Eigen::Index i = 0; i < m.cols(); ++i) total += detail::log_mean_exp(m, i);
  return total;
}

struct WaicResult {
  double waic1, waic2, p1, p2, lppd;
};

/// Both WAIC penalties: p1 = 2 sum_i(log mean exp - mean), p2 = sum_i var_l.
inline WaicResult waic(const LogLikMatrix& m) {
  detail::check_loglik(m);
  WaicResult r{0, 0, 0, 0, 0};
  const double L = static_cast<double>(m.rows());
  for (Eigen::Index i = 0; i < m.cols(); ++i) {
    const double lme = detail::log_mean_exp(m, i);
    const double mean = detail::column_mean(m, i);
    const double var = (m.col(i).array() - mean).square().sum() / (L - 1.0);
    r.lppd += lme;
    r.p1 += 2.0 * (lme - mean);
    r.p2 += var;
  }
  r.waic1 = -2.0 * (r.lppd - r.p1);
  r.waic2 = -2.0 * (r.lppd - r.p2);
  return r;
}

struct DicResult {
  double dic, p_d;
};

/// Plug-in DIC: p_d = 2 (log p(y | posterior mean) - mean_l log p(y | draw l)).
inline DicResult dic(const LogLikMatrix& m, const Eigen::VectorXd& loglik_at_mean) {
  detail::check_loglik(m);
  if (loglik_at_mean.size() != m.cols()) throw InvalidArgument("dic: log-likelihood vector length differs from n");
  double at_mean = 0.0;
  for (Eigen::Index i = 0; i < loglik_at_mean.size(); ++i) at_mean += loglik_at_mean(i);
  const double ref = detail::row_sum(m, 0);
  double dev = 0.0;
  for (Eigen::Index l = 0; l < m.rows(); ++l) dev += detail::row_sum(m, l) - ref;
  const double mean_of = ref + dev / static_cast<double>(m.rows());
  DicResult r{};
  r.p_d = 2.0 * (at_mean - mean_of);
  r.dic = -2.0 * (at_mean - r.p_d);
  return r;
}

inline double rmse(const Eigen::VectorXd& fitted, const Eigen::VectorXd& observed) {
  if (fitted.size() != observed.size()) throw InvalidArgument("rmse: length mismatch");
  if (fitted.size() == 0) throw InvalidArgument("rmse: empty input");
  return std::sqrt((fitted - observed).squaredNorm() / static_cast<double>(fitted.size()));
}

/// Componentwise posterior mean of a stage's parameters.
inline StageState posterior_mean(const Posterior& post) {
  if (post.size() == 0) throw InvalidArgument("posterior_mean: empty posterior");
  StageState m = post.draw(0);
  const double n = static_cast<double>(post.size());
  auto acc = [&](auto get) {
    auto sum = get(post.draw(0));
    for (std::size_t l = 1; l < post.size(); ++l) sum = sum + get(post.draw(l));
    return sum;
  };
  m.intercept = acc([](const StageState& s) { return s.intercept; }) / n;
  m.stratum_intercepts = acc([](const StageState& s) -> Eigen::VectorXd { return s.stratum_intercepts; }) / n;
  m.slopes = acc([](const StageState& s) -> Eigen::VectorXd { return s.slopes; }) / n;
  m.stratum_slopes = acc([](const StageState& s) -> Eigen::VectorXd { return s.stratum_slopes; }) / n;
  m.effect_variances = acc([](const StageState& s) -> Eigen::VectorXd { return s.effect_variances; }) / n;
  m.spatial = acc([](const StageState& s) -> Eigen::VectorXd { return s.spatial; }) / n;
  m.noise_variances = acc([](const StageState& s) -> Eigen::VectorXd { return s.noise_variances; }) / n;
  m.theta.sigma2 = acc([](const StageState& s) { return s.theta.sigma2; }) / n;
  m.theta.phi = acc([](const StageState& s) { return s.theta.phi; }) / n;
  return m;
}

/// DIC, WAIC, LPPD and RMSE for a fitted stage. Fitted values are the
/// posterior mean of the in-sample mean surface including the spatial effect.
inline FitReport fit_report(const StageModel& model, const Posterior& post) {
  const LogLikMatrix m = post.loglik();
  FitReport r;
  r.model = post.spec.name();
  const auto w = waic(m);
  r.waic1 = w.waic1;
  r.waic2 = w.waic2;
  r.p1 = w.p1;
  r.p2 = w.p2;
  r.lppd = w.lppd;
  const StageState mean = posterior_mean(post);
  const auto d = dic(m, model.loglik(mean));
  r.dic = d.dic;
  r.p_d = d.p_d;
  Eigen::VectorXd fitted = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(model.n()));
  for (std::size_t l = 0; l < post.size(); ++l) fitted += model.fitted(post.draw(l));
  fitted /= static_cast<double>(post.size());
  r.rmse = rmse(fitted, model.data().response);
  return r;
}

struct Ranking {
  std::vector<std::size_t> dic, waic1, waic2, rmse;  ///< report indices, best first
};

/// Ascending order per criterion; ties keep registration (input) order.
inline Ranking rank_models(const std::vector<FitReport>& reports) {
  if (reports.size() < 2) throw InvalidArgument("rank_models needs at least 2 reports");
  auto order = [&](auto key) {
    std::vector<std::size_t> idx(reports.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return key(reports[a]) < key(reports[b]); });
    return idx;
  };
  Ranking r;
  r.dic = order([](const FitReport& f) { return f.dic; });
  r.waic1 = order([](const FitReport& f) { return f.waic1; });
  r.waic2 = order([](const FitReport& f) { return f.waic2; });
  r.rmse = order([](const FitReport& f) { return f.rmse; });
  return r;
}

}  // namespace sae

#endif  // SAE_SELECTION_HPP
