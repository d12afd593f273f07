#ifndef SAE_MODEL_HPP
#define SAE_MODEL_HPP

// Data records, design matrices, priors and parameter state shared by the
// outcome (biomass) stage and the covariate (canopy height) stage. Both stages
// have the same structure: a global intercept and slopes, stratum deviations
// with normal priors, an optional NNGP spatial effect and stratum noise.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sae/error.hpp"
#include "sae/spatial_core.hpp"

namespace sae {

/// Field plot: outcome and covariate observed at the same location.
struct PlotRecord {
  Location location;
  double y = 0.0;     ///< biomass density, Mg/ha
  int stratum = 0;
  double x_ch = 0.0;  ///< mean canopy height, m
  double v_tc = 0.0;  ///< percent tree cover
};

/// Covariate-only record (LiDAR footprint).
struct LidarRecord {
  Location location;
  int stratum = 0;
  double x_ch = 0.0;
  double v_tc = 0.0;
};

/// Prediction grid cell.
struct PredictionCell {
  Location location;
  int stratum = 0;
  double v_tc = 0.0;
  double cell_area = 0.0;  ///< ha
};

enum class Stage { outcome, covariate };

inline const char* stage_name(Stage s) { return s == Stage::outcome ? "outcome" : "covariate"; }

enum class Variant { sm1, sm2, sm3, sm4, full, full_no_x };

struct SubmodelSpec {
  Variant variant = Variant::full;
  bool stratum_coefficients = true;
  bool stratum_variances = true;
  bool spatial_effect = true;
  bool include_x = true;

  static SubmodelSpec make(Variant v) {
    SubmodelSpec s;
    s.variant = v;
    switch (v) {
      case Variant::sm1: s.stratum_coefficients = false, s.stratum_variances = false, s.spatial_effect = false; break;
      case Variant::sm2: s.stratum_coefficients = false, s.stratum_variances = true, s.spatial_effect = false; break;
      case Variant::sm3: s.stratum_coefficients = true, s.stratum_variances = false, s.spatial_effect = false; break;
      case Variant::sm4: s.stratum_coefficients = true, s.stratum_variances = true, s.spatial_effect = false; break;
      case Variant::full: break;
      case Variant::full_no_x: s.include_x = false; break;
    }
    return s;
  }

  std::string name() const { return variant_name(variant); }

  static std::string variant_name(Variant v) {
    switch (v) {
      case Variant::sm1: return "SM1";
      case Variant::sm2: return "SM2";
      case Variant::sm3: return "SM3";
      case Variant::sm4: return "SM4";
      case Variant::full: return "FULL";
      case Variant::full_no_x: return "FULL_NO_X";
    }
    return "?";
  }

  static SubmodelSpec parse(const std::string& s) {
    for (auto v : all_variants())
      if (variant_name(v) == s) return make(v);
    throw InvalidArgument("unknown model variant '" + s + "' (expected SM1..SM4, FULL, FULL_NO_X)");
  }

  static std::vector<Variant> all_variants() {
    return {Variant::sm1, Variant::sm2, Variant::sm3, Variant::sm4, Variant::full, Variant::full_no_x};
  }
};

/// Regression inputs for one stage: response, strata, covariates, locations.
struct StageData {
  std::vector<Location> locations;
  Eigen::VectorXd response;
  std::vector<int> strata;
  Eigen::MatrixXd covariates;  // n x p
  int num_strata = 1;

  std::size_t n() const { return strata.size(); }
  int p() const { return static_cast<int>(covariates.cols()); }
};

/// The 1, indicator, X and X-tilde matrices of the stacked regression.
struct DesignMatrices {
  Eigen::VectorXd ones;
  Eigen::MatrixXd strata_indicator;  // n x q
  Eigen::MatrixXd X;                 // n x p
  Eigen::MatrixXd X_tilde;           // n x pq, stratum-j block holds row of X
};

inline void check_strata(std::span<const int> strata, int q) {
  if (q < 1) throw InvalidArgument("number of strata must be at least 1");
  std::vector<std::string> issues;
  for (std::size_t i = 0; i < strata.size(); ++i)
    if (strata[i] < 0 || strata[i] >= q)
      issues.push_back("record " + std::to_string(i) + ": stratum " + std::to_string(strata[i]) +
                       " outside 0.." + std::to_string(q - 1));
  if (!issues.empty()) throw ValidationError(std::move(issues));
}

inline DesignMatrices build_design(std::span<const int> strata, const Eigen::MatrixXd& X, int q) {
  const auto n = static_cast<Eigen::Index>(strata.size());
  if (n == 0) throw InvalidArgument("build_design: no records");
  if (X.rows() != n) throw InvalidArgument("build_design: covariate rows differ from record count");
  check_strata(strata, q);
  const auto p = X.cols();
  DesignMatrices d;
  d.ones = Eigen::VectorXd::Ones(n);
  d.strata_indicator = Eigen::MatrixXd::Zero(n, q);
  d.X = X;
  d.X_tilde = Eigen::MatrixXd::Zero(n, p * q);
  for (Eigen::Index i = 0; i < n; ++i) {
    const int j = strata[static_cast<std::size_t>(i)];
    d.strata_indicator(i, j) = 1.0;
    d.X_tilde.block(i, j * p, 1, p) = X.row(i);
  }
  return d;
}

/// Design over plot records; p = 1 uses x_ch, p = 0 drops it.
inline DesignMatrices build_design(std::span<const PlotRecord> records, int q, int p) {
  if (p != 0 && p != 1) throw InvalidArgument("plot records carry a single covariate (p must be 0 or 1)");
  std::vector<int> strata;
  Eigen::MatrixXd X(static_cast<Eigen::Index>(records.size()), p);
  for (std::size_t i = 0; i < records.size(); ++i) {
    strata.push_back(records[i].stratum);
    if (p == 1) X(static_cast<Eigen::Index>(i), 0) = records[i].x_ch;
  }
  return build_design(strata, X, q);
}

/// Design over LiDAR records for the covariate stage; r = 1 uses v_tc.
inline DesignMatrices build_design(std::span<const LidarRecord> records, int q, int r) {
  if (r != 0 && r != 1) throw InvalidArgument("lidar records carry a single predictor (r must be 0 or 1)");
  std::vector<int> strata;
  Eigen::MatrixXd V(static_cast<Eigen::Index>(records.size()), r);
  for (std::size_t i = 0; i < records.size(); ++i) {
    strata.push_back(records[i].stratum);
    if (r == 1) V(static_cast<Eigen::Index>(i), 0) = records[i].v_tc;
  }
  return build_design(strata, V, q);
}

inline StageData outcome_data(std::span<const PlotRecord> plots, int q, bool include_x = true) {
  StageData d;
  d.num_strata = q;
  const auto n = static_cast<Eigen::Index>(plots.size());
  d.response.resize(n);
  d.covariates.resize(n, include_x ? 1 : 0);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = plots[static_cast<std::size_t>(i)];
    d.locations.push_back(r.location);
    d.response(i) = r.y;
    d.strata.push_back(r.stratum);
    if (include_x) d.covariates(i, 0) = r.x_ch;
  }
  check_strata(d.strata, q);
  return d;
}

inline StageData covariate_data(std::span<const LidarRecord> lidar, int q) {
  StageData d;
  d.num_strata = q;
  const auto n = static_cast<Eigen::Index>(lidar.size());
  d.response.resize(n);
  d.covariates.resize(n, 1);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& r = lidar[static_cast<std::size_t>(i)];
    d.locations.push_back(r.location);
    d.response(i) = r.x_ch;
    d.strata.push_back(r.stratum);
    d.covariates(i, 0) = r.v_tc;
  }
  check_strata(d.strata, q);
  return d;
}

/// One draw of every parameter of a stage. For the outcome stage the fields
/// are beta0, beta-tilde0, beta, beta-tilde, sigma2_0..p, w, (sigma2_w, phi_w)
/// and tau2; for the covariate stage alpha0, alpha-tilde0, alpha, alpha-tilde,
/// nu2_0..r, u, (nu2_u, phi_u) and gamma2.
struct StageState {
  double intercept = 0.0;
  Eigen::VectorXd stratum_intercepts;  // q
  Eigen::VectorXd slopes;              // p
  Eigen::VectorXd stratum_slopes;      // p*q, stratum-major
  Eigen::VectorXd effect_variances;    // p+1
  Eigen::VectorXd spatial;             // n
  CovParams theta;
  Eigen::VectorXd noise_variances;     // q

  static StageState zeros(int q, int p, std::size_t n) {
    StageState s;
    s.stratum_intercepts = Eigen::VectorXd::Zero(q);
    s.slopes = Eigen::VectorXd::Zero(p);
    s.stratum_slopes = Eigen::VectorXd::Zero(p * q);
    s.effect_variances = Eigen::VectorXd::Ones(p + 1);
    s.spatial = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n));
    s.noise_variances = Eigen::VectorXd::Ones(q);
    return s;
  }

  int q() const { return static_cast<int>(stratum_intercepts.size()); }
  int p() const { return static_cast<int>(slopes.size()); }

  /// Regression mean (without the spatial effect) for stratum j at covariates x.
  double mean(int j, const Eigen::Ref<const Eigen::VectorXd>& x) const {
    double mu = intercept + stratum_intercepts(j);
    for (int k = 0; k < p(); ++k) mu += x(k) * (slopes(k) + stratum_slopes(j * p() + k));
    return mu;
  }
};

using OutcomeParamState = StageState;
using CovariateParamState = StageState;

/// Position of each coefficient block inside the stacked coefficient vector
/// [intercept | stratum intercepts | slopes | stratum slopes].
struct CoefficientLayout {
  int q = 1;
  int p = 0;
  bool stratum = true;

  int size() const { return stratum ? 1 + q + p + p * q : 1 + p; }
  int slopes_offset() const { return stratum ? 1 + q : 1; }
  int stratum_slopes_offset() const { return 1 + q + p; }

  Eigen::VectorXd pack(const StageState& s) const {
    Eigen::VectorXd c(size());
    c(0) = s.intercept;
    if (stratum) {
      c.segment(1, q) = s.stratum_intercepts;
      c.segment(stratum_slopes_offset(), p * q) = s.stratum_slopes;
    }
    c.segment(slopes_offset(), p) = s.slopes;
    return c;
  }

  void unpack(const Eigen::VectorXd& c, StageState& s) const {
    s.intercept = c(0);
    s.slopes = c.segment(slopes_offset(), p);
    if (stratum) {
      s.stratum_intercepts = c.segment(1, q);
      s.stratum_slopes = c.segment(stratum_slopes_offset(), p * q);
    } else {
      s.stratum_intercepts.setZero(q);
      s.stratum_slopes.setZero(p * q);
    }
  }

  /// Stacked regression matrix matching pack().
  Eigen::MatrixXd regression_matrix(const DesignMatrices& d) const {
    const auto n = d.ones.size();
    Eigen::MatrixXd z(n, size());
    z.col(0) = d.ones;
    if (stratum) {
      z.middleCols(1, q) = d.strata_indicator;
      z.middleCols(stratum_slopes_offset(), p * q) = d.X_tilde;
    }
    z.middleCols(slopes_offset(), p) = d.X;
    return z;
  }
};

enum class DecayPrior { uniform_rate, uniform_range };

/// Inverse-gamma scales (shape fixed at 2) and the decay support.
struct Priors {
  double ig_shape = 2.0;
  Eigen::VectorXd noise_scales;   // q
  Eigen::VectorXd effect_scales;  // p+1
  double spatial_scale = 1.0;
  double phi_lower = decay_for_range(500.0);
  double phi_upper = decay_for_range(1.0);
  DecayPrior decay = DecayPrior::uniform_rate;

  /// Log prior density of phi up to a constant; -inf outside the support.
  double log_decay_density(double phi) const {
    if (!(phi >= phi_lower && phi <= phi_upper)) return -std::numeric_limits<double>::infinity();
    // Uniform on range c/phi induces density proportional to phi^-2 on phi.
    return decay == DecayPrior::uniform_rate ? 0.0 : -2.0 * std::log(phi);
  }

  void validate() const {
    auto positive = [](const Eigen::VectorXd& v) { return v.size() == 0 || (v.array() > 0.0).all(); };
    if (!(ig_shape > 0.0) || !positive(noise_scales) || !positive(effect_scales) || !(spatial_scale > 0.0))
      throw InvalidArgument("priors: all inverse-gamma scales must be positive");
    if (!(phi_lower > 0.0 && phi_lower < phi_upper)) throw InvalidArgument("priors: need 0 < phi_lower < phi_upper");
  }
};

/// Variance estimates from a preliminary least-squares look at the data.
struct EdaSummary {
  double residual_variance = 1.0;
  std::optional<Eigen::VectorXd> effect_variances;  // p+1
  std::optional<double> spatial_variance;
};

inline Priors default_priors(const EdaSummary& eda, int q, int p, double range_min_km = 1.0,
                             double range_max_km = 500.0) {
  if (!(eda.residual_variance > 0.0) || !std::isfinite(eda.residual_variance))
    throw InvalidArgument("default_priors: EDA residual variance must be positive");
  Priors pr;
  pr.noise_scales = Eigen::VectorXd::Constant(q, eda.residual_variance);
  pr.effect_scales = Eigen::VectorXd::Constant(p + 1, eda.residual_variance);
  if (eda.effect_variances) {
    if (eda.effect_variances->size() != p + 1) throw InvalidArgument("default_priors: effect variance size must be p+1");
    pr.effect_scales = *eda.effect_variances;
  }
  pr.spatial_scale = eda.spatial_variance.value_or(eda.residual_variance);
  if (!(range_min_km > 0.0 && range_min_km < range_max_km)) throw InvalidArgument("default_priors: bad range support");
  pr.phi_lower = decay_for_range(range_max_km);
  pr.phi_upper = decay_for_range(range_min_km);
  pr.validate();
  return pr;
}

/// Least-squares EDA: pooled residual variance and the spread of per-stratum
/// coefficient estimates around the pooled fit.
inline EdaSummary eda_summary(const StageData& data) {
  const auto n = static_cast<Eigen::Index>(data.n());
  const int p = data.p();
  if (n < p + 2) throw InvalidArgument("eda_summary: too few observations for least squares");
  Eigen::MatrixXd z(n, p + 1);
  z.col(0).setOnes();
  z.rightCols(p) = data.covariates;
  const Eigen::VectorXd coef = z.colPivHouseholderQr().solve(data.response);
  const Eigen::VectorXd resid = data.response - z * coef;
  EdaSummary eda;
  eda.residual_variance = resid.squaredNorm() / static_cast<double>(n - p - 1);
  if (!(eda.residual_variance > 0.0)) eda.residual_variance = 1e-6;

  Eigen::VectorXd eff = Eigen::VectorXd::Zero(p + 1);
  int used = 0;
  for (int j = 0; j < data.num_strata; ++j) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < n; ++i)
      if (data.strata[static_cast<std::size_t>(i)] == j) rows.push_back(i);
    if (static_cast<int>(rows.size()) < p + 3) continue;
    Eigen::MatrixXd zj(static_cast<Eigen::Index>(rows.size()), p + 1);
    Eigen::VectorXd yj(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t r = 0; r < rows.size(); ++r) {
      zj.row(static_cast<Eigen::Index>(r)) = z.row(rows[r]);
      yj(static_cast<Eigen::Index>(r)) = data.response(rows[r]);
    }
    const Eigen::VectorXd cj = zj.colPivHouseholderQr().solve(yj);
    eff += (cj - coef).array().square().matrix();
    ++used;
  }
  if (used >= 2) {
    eff /= static_cast<double>(used);
    // Keep the scale away from zero so the inverse-gamma stays proper and weak.
    for (int k = 0; k <= p; ++k) {
      const double floor_k = k == 0 ? 1e-3 * eda.residual_variance
                                    : 1e-3 * eda.residual_variance /
                                          std::max(1e-12, (z.col(k).array() - z.col(k).mean()).square().mean());
      eff(k) = std::max(eff(k), floor_k);
    }
    eda.effect_variances = eff;
  }
  return eda;
}

}  // namespace sae

#endif  // SAE_MODEL_HPP
