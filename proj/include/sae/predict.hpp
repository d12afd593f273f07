#ifndef SAE_PREDICT_HPP
#define SAE_PREDICT_HPP

// Posterior predictive draws at unobserved cells: NNGP kriging of the latent
// effects, the covariate stage, the outcome stage conditioned on the sampled
// covariate, and areal aggregation of the outcome draws.

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <exception>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "sae/diagnostics.hpp"
#include "sae/error.hpp"
#include "sae/kdtree.hpp"
#include "sae/model.hpp"
#include "sae/random.hpp"
#include "sae/sampler.hpp"
#include "sae/spatial_core.hpp"
#include "sae/survey.hpp"

namespace sae {

/// independent: neighbors from the observed set only (parallel friendly).
/// sequential: neighbors from observed plus earlier cells, as a joint path.
enum class PredictionMode { independent, sequential };

struct PredictionOptions {
  std::size_t m = 15;
  PredictionMode mode = PredictionMode::independent;
  bool allow_novel_strata = false;
  bool truncate_at_zero = false;  ///< changes the estimand; off by default
  std::size_t max_draws = 0;      ///< 0 keeps every retained draw
  std::uint64_t seed = 1;
  int threads = 1;
};

/// Neighbor sets of new locations. Indices below n_ref refer to the reference
/// (observed) set; index n_ref + k refers to new location k.
struct PredictionGraph {
  std::size_t n_ref = 0;
  PredictionMode mode = PredictionMode::independent;
  std::vector<std::vector<std::size_t>> neighbors;
};

inline PredictionGraph build_prediction_graph(std::span<const Location> ref, std::span<const Location> targets,
                                              std::size_t m, PredictionMode mode) {
  if (m < 1) throw InvalidArgument("prediction neighbors: m must be at least 1");
  PredictionGraph g;
  g.n_ref = ref.size();
  g.mode = mode;
  g.neighbors.resize(targets.size());
  std::vector<KdTree2::Point> pts;
  pts.reserve(ref.size() + (mode == PredictionMode::sequential ? targets.size() : 0));
  for (const auto& l : ref) pts.push_back({l.x, l.y});
  if (mode == PredictionMode::sequential)
    for (const auto& l : targets) pts.push_back({l.x, l.y});
  if (pts.empty()) return g;
  KdTree2 tree(std::move(pts));
  for (std::size_t k = 0; k < targets.size(); ++k) {
    const std::size_t bound = mode == PredictionMode::sequential ? ref.size() + k : ref.size();
    g.neighbors[k] = tree.nearest({targets[k].x, targets[k].y}, m, bound);
  }
  return g;
}

struct LatentMoments {
  double mean = 0.0;
  double variance = 0.0;
};

/// Conditional mean a' u(N) and variance delta2 of target k given values at
/// its neighbors. `values` spans the combined [reference..., targets...] index space.
inline LatentMoments latent_conditional(const PredictionGraph& g, std::span<const Location> ref,
                                        std::span<const Location> targets, std::size_t k, const CovParams& theta,
                                        const Eigen::VectorXd& values) {
  const auto& nb = g.neighbors[k];
  const auto loc = [&](std::size_t idx) -> const Location& { return idx < g.n_ref ? ref[idx] : targets[idx - g.n_ref]; };
  const auto mm = static_cast<Eigen::Index>(nb.size());
  Eigen::MatrixXd pd(mm, mm);
  Eigen::VectorXd d(mm);
  for (Eigen::Index a = 0; a < mm; ++a) {
    const auto& la = loc(nb[static_cast<std::size_t>(a)]);
    d(a) = distance(la, targets[k]);
    pd(a, a) = 0.0;
    for (Eigen::Index b = 0; b < a; ++b) pd(a, b) = pd(b, a) = distance(la, loc(nb[static_cast<std::size_t>(b)]));
  }
  Eigen::VectorXd a;
  LatentMoments mo;
  if (mm > 0 && d.minCoeff() == 0.0) {
    // Coincident with a conditioning location: interpolate exactly.
    Eigen::Index at = 0;
    d.minCoeff(&at);
    mo.mean = values(static_cast<Eigen::Index>(nb[static_cast<std::size_t>(at)]));
    mo.variance = 0.0;
    return mo;
  }
  mo.variance = theta.sigma2 * detail::conditional_factor(pd, d, theta.phi, a);
  for (Eigen::Index s = 0; s < mm; ++s) mo.mean += a(s) * values(static_cast<Eigen::Index>(nb[static_cast<std::size_t>(s)]));
  return mo;
}

/// One joint draw of the latent process at the targets given its values at
/// the reference locations. With no reference locations, draws are from the
/// unconditional prior N(0, sigma2).
inline Eigen::VectorXd predict_latent(const PredictionGraph& g, std::span<const Location> ref,
                                      std::span<const Location> targets, const Eigen::VectorXd& observed,
                                      const CovParams& theta, Rng& rng) {
  if (static_cast<std::size_t>(observed.size()) != ref.size())
    throw InvalidArgument("predict_latent: observed values and reference locations differ in length");
  const std::size_t n = targets.size();
  Eigen::VectorXd out(static_cast<Eigen::Index>(n));
  if (theta.sigma2 <= 0.0) {
    out.setZero();
    return out;
  }
  Eigen::VectorXd values;
  if (g.mode == PredictionMode::sequential) {
    values.resize(static_cast<Eigen::Index>(ref.size() + n));
    values.head(observed.size()) = observed;
  }
  const Eigen::VectorXd& space = g.mode == PredictionMode::sequential ? values : observed;
  for (std::size_t k = 0; k < n; ++k) {
    double v;
    if (g.neighbors[k].empty()) {
      v = std::sqrt(theta.sigma2) * rng.normal();
    } else {
      const auto mo = latent_conditional(g, ref, targets, k, theta, space);
      v = mo.mean + std::sqrt(mo.variance) * rng.normal();
    }
    out(static_cast<Eigen::Index>(k)) = v;
    if (g.mode == PredictionMode::sequential) values(static_cast<Eigen::Index>(ref.size() + k)) = v;
  }
  return out;
}

/// Evenly spaced subset of posterior draw indices.
inline std::vector<std::size_t> select_draws(std::size_t available, std::size_t max_draws) {
  std::vector<std::size_t> idx;
  if (max_draws == 0 || max_draws >= available) {
    for (std::size_t l = 0; l < available; ++l) idx.push_back(l);
    return idx;
  }
  for (std::size_t k = 0; k < max_draws; ++k) idx.push_back(k * available / max_draws);
  return idx;
}

namespace detail {

template <class Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const int nt = std::clamp<int>(threads, 1, static_cast<int>(std::max<std::size_t>(n, 1)));
  if (nt == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr err;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (int t = 0; t < nt; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!err) err = std::current_exception();
        }
      }
    });
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

inline void check_cell_strata(std::span<const PredictionCell> cells, const StageModel& model, bool allow_novel) {
  std::set<int> seen(model.data().strata.begin(), model.data().strata.end());
  const int q = model.data().num_strata;
  for (const auto& c : cells) {
    if (c.stratum < 0 || c.stratum >= q)
      throw InvalidArgument("cell " + std::to_string(c.location.id) + ": stratum " + std::to_string(c.stratum) +
                            " outside the model's 0.." + std::to_string(q - 1));
    if (!seen.count(c.stratum) && !allow_novel)
      throw InvalidArgument("cell " + std::to_string(c.location.id) + ": stratum " + std::to_string(c.stratum) +
                            " absent from training data (enable allow_novel_strata to draw its effects from the prior)");
  }
}

inline std::vector<Location> cell_locations(std::span<const PredictionCell> cells) {
  std::vector<Location> l;
  l.reserve(cells.size());
  for (const auto& c : cells) l.push_back(c.location);
  return l;
}

constexpr std::uint64_t kCovariateStream = 0x100000000ull;
constexpr std::uint64_t kOutcomeStream = 0x200000000ull;

}  // namespace detail

/// Covariate draws (rows = selected draws, cols = cells):
/// x = alpha0 + alpha~0j + v'(alpha + alpha~j) + u + N(0, gamma2_j).
inline Eigen::MatrixXd predict_covariate(std::span<const PredictionCell> cells, const StageModel& model,
                                         const Posterior& post, const std::vector<std::size_t>& draws,
                                         const PredictionOptions& opt) {
  detail::check_cell_strata(cells, model, opt.allow_novel_strata);
  if (model.data().p() != 1) throw InvalidArgument("predict_covariate: covariate stage must use v_tc as its predictor");
  const auto targets = detail::cell_locations(cells);
  const auto& ref = model.data().locations;
  PredictionGraph g;
  if (model.spec().spatial_effect) g = build_prediction_graph(ref, targets, opt.m, opt.mode);
  Eigen::MatrixXd x(static_cast<Eigen::Index>(draws.size()), static_cast<Eigen::Index>(cells.size()));
  detail::parallel_for(draws.size(), opt.threads, [&](std::size_t r) {
    const auto& s = post.draw(draws[r]);
    Rng rng(opt.seed, detail::kCovariateStream + draws[r]);
    Eigen::VectorXd u = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cells.size()));
    if (model.spec().spatial_effect) u = predict_latent(g, ref, targets, s.spatial, s.theta, rng);
    Eigen::VectorXd v(1);
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const int j = cells[k].stratum;
      v(0) = cells[k].v_tc;
      x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) =
          s.mean(j, v) + u(static_cast<Eigen::Index>(k)) + std::sqrt(s.noise_variances(j)) * rng.normal();
    }
  });
  return x;
}

/// Outcome draws aligned with the covariate draws: row r uses the outcome
/// posterior draw draws[r] and the covariate draw in row r of x_draws.
inline Eigen::MatrixXd predict_outcome(std::span<const PredictionCell> cells, const StageModel& model,
                                       const Posterior& post, const std::vector<std::size_t>& draws,
                                       const Eigen::MatrixXd& x_draws, const PredictionOptions& opt) {
  if (x_draws.rows() != static_cast<Eigen::Index>(draws.size()) ||
      x_draws.cols() != static_cast<Eigen::Index>(cells.size()))
    throw InvalidArgument("predict_outcome: covariate draws misaligned with outcome draws (L or cell count differs)");
  detail::check_cell_strata(cells, model, opt.allow_novel_strata);
  const int p = model.data().p();
  const auto targets = detail::cell_locations(cells);
  const auto& ref = model.data().locations;
  PredictionGraph g;
  if (model.spec().spatial_effect) g = build_prediction_graph(ref, targets, opt.m, opt.mode);
  Eigen::MatrixXd y(x_draws.rows(), x_draws.cols());
  detail::parallel_for(draws.size(), opt.threads, [&](std::size_t r) {
    const auto& s = post.draw(draws[r]);
    Rng rng(opt.seed, detail::kOutcomeStream + draws[r]);
    Eigen::VectorXd w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(cells.size()));
    if (model.spec().spatial_effect) w = predict_latent(g, ref, targets, s.spatial, s.theta, rng);
    Eigen::VectorXd xv(p);
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const int j = cells[k].stratum;
      if (p == 1) xv(0) = x_draws(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k));
      double val = s.mean(j, xv) + w(static_cast<Eigen::Index>(k)) + std::sqrt(s.noise_variances(j)) * rng.normal();
      if (opt.truncate_at_zero) val = std::max(val, 0.0);
      y(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = val;
    }
  });
  return y;
}

/// Aligned covariate and outcome draws per cell (rows = draws).
struct PredictiveSamples {
  std::vector<std::size_t> draw_index;
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;

  double negative_fraction() const {
    if (y.size() == 0) return 0.0;
    return static_cast<double>((y.array() < 0.0).count()) / static_cast<double>(y.size());
  }
};

inline PredictiveSamples predict_two_stage(std::span<const PredictionCell> cells, const StageModel& covariate_model,
                                           const Posterior& covariate_post, const StageModel& outcome_model,
                                           const Posterior& outcome_post, const PredictionOptions& opt) {
  if (covariate_post.size() != outcome_post.size())
    throw InvalidArgument("two-stage prediction: covariate and outcome chains retain different numbers of draws (" +
                          std::to_string(covariate_post.size()) + " vs " + std::to_string(outcome_post.size()) + ")");
  if (cells.empty()) throw InvalidArgument("two-stage prediction: no cells");
  PredictiveSamples ps;
  ps.draw_index = select_draws(outcome_post.size(), opt.max_draws);
  if (outcome_model.spec().include_x) {
    ps.x = predict_covariate(cells, covariate_model, covariate_post, ps.draw_index, opt);
  } else {
    ps.x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ps.draw_index.size()), static_cast<Eigen::Index>(cells.size()));
  }
  ps.y = predict_outcome(cells, outcome_model, outcome_post, ps.draw_index, ps.x, opt);
  return ps;
}

/// Per-cell posterior predictive summaries of a draws matrix (rows = draws).
inline std::vector<Summary> cell_summaries(const Eigen::MatrixXd& draws) {
  std::vector<Summary> out;
  out.reserve(static_cast<std::size_t>(draws.cols()));
  std::vector<double> col(static_cast<std::size_t>(draws.rows()));
  for (Eigen::Index k = 0; k < draws.cols(); ++k) {
    for (Eigen::Index l = 0; l < draws.rows(); ++l) col[static_cast<std::size_t>(l)] = draws(l, k);
    out.push_back(summarize(col));
  }
  return out;
}

inline constexpr int kAllStrata = -1;

struct AreaEstimate {
  int scope = kAllStrata;  ///< stratum id or kAllStrata
  std::size_t n_cells = 0;
  double area_ha = 0.0;
  Summary density;  ///< Mg/ha
  Summary total;    ///< Mg
  double negative_fraction = 0.0;
  Eigen::VectorXd density_draws;
  Eigen::VectorXd total_draws;

  std::string scope_name() const { return scope == kAllStrata ? "ALL" : std::to_string(scope); }
};

/// Areal density and total per draw. Totals are area-weighted sums over the
/// cells in scope, accumulated per stratum and then across strata in ascending
/// id order, so stratum totals add up to the overall total exactly.
/// Density = total / |D| (the plain cell mean on a uniform grid).
inline AreaEstimate aggregate(std::span<const PredictionCell> cells, const Eigen::MatrixXd& y_draws,
                              int scope = kAllStrata) {
  if (y_draws.cols() != static_cast<Eigen::Index>(cells.size()))
    throw InvalidArgument("aggregate: draws and cells differ in count");
  if (y_draws.rows() == 0) throw InvalidArgument("aggregate: no draws");
  AreaEstimate e;
  e.scope = scope;
  std::vector<Eigen::Index> in;
  std::map<int, double> area;
  for (std::size_t k = 0; k < cells.size(); ++k)
    if (scope == kAllStrata || cells[k].stratum == scope) {
      in.push_back(static_cast<Eigen::Index>(k));
      area[cells[k].stratum] += cells[k].cell_area;
    }
  for (const auto& [j, a] : area) e.area_ha += a;
  if (in.empty()) throw InvalidArgument("aggregate: no cells in stratum " + e.scope_name());
  e.n_cells = in.size();
  const Eigen::Index L = y_draws.rows();
  e.total_draws.resize(L);
  e.density_draws.resize(L);
  long negative = 0;
  std::map<int, double> partial;
  for (Eigen::Index l = 0; l < L; ++l) {
    partial.clear();
    for (auto k : in) {
      const auto& c = cells[static_cast<std::size_t>(k)];
      const double v = y_draws(l, k);
      partial[c.stratum] += c.cell_area * v;
      negative += v < 0.0;
    }
    double t = 0.0;
    for (const auto& [j, pt] : partial) t += pt;
    e.total_draws(l) = t;
    e.density_draws(l) = t / e.area_ha;
  }
  e.negative_fraction = static_cast<double>(negative) / static_cast<double>(L * static_cast<Eigen::Index>(in.size()));
  e.density = summarize(std::span<const double>(e.density_draws.data(), static_cast<std::size_t>(L)));
  e.total = summarize(std::span<const double>(e.total_draws.data(), static_cast<std::size_t>(L)));
  return e;
}

/// One estimate per stratum present among the cells, then the ALL scope.
inline std::vector<AreaEstimate> aggregate_by_stratum(std::span<const PredictionCell> cells,
                                                      const Eigen::MatrixXd& y_draws) {
  std::set<int> strata;
  for (const auto& c : cells) strata.insert(c.stratum);
  std::vector<AreaEstimate> out;
  for (int j : strata) out.push_back(aggregate(cells, y_draws, j));
  out.push_back(aggregate(cells, y_draws, kAllStrata));
  return out;
}

struct StabilityRow {
  double ha_per_location = 0.0;
  double spacing_m = 0.0;
  int scope = kAllStrata;
  std::size_t n_cells = 0;
  double density_mean = 0.0;
  double density_sd = 0.0;
};

/// Indices of a spatially thinned subsample: one cell (nearest the bin
/// centre) per square bin of the requested area. Requests at or below the
/// native cell area keep every cell.
inline std::vector<std::size_t> thin_cells(std::span<const PredictionCell> cells, double ha_per_location) {
  std::vector<std::size_t> keep;
  if (cells.empty()) return keep;
  double native = 0.0;
  double xmin = cells[0].location.x, ymin = cells[0].location.y;
  for (const auto& c : cells) {
    native = std::max(native, c.cell_area);
    xmin = std::min(xmin, c.location.x);
    ymin = std::min(ymin, c.location.y);
  }
  if (ha_per_location <= native * (1.0 + 1e-9)) {
    keep.resize(cells.size());
    std::iota(keep.begin(), keep.end(), std::size_t{0});
    return keep;
  }
  const double side_km = std::sqrt(ha_per_location / 100.0);
  std::map<std::pair<long, long>, std::pair<double, std::size_t>> best;
  for (std::size_t k = 0; k < cells.size(); ++k) {
    const long bx = static_cast<long>(std::floor((cells[k].location.x - xmin) / side_km));
    const long by = static_cast<long>(std::floor((cells[k].location.y - ymin) / side_km));
    const double cx = xmin + (static_cast<double>(bx) + 0.5) * side_km;
    const double cy = ymin + (static_cast<double>(by) + 0.5) * side_km;
    const double d = std::hypot(cells[k].location.x - cx, cells[k].location.y - cy);
    auto [it, fresh] = best.try_emplace({bx, by}, d, k);
    if (!fresh && d < it->second.first) it->second = {d, k};
  }
  for (const auto& [bin, v] : best) keep.push_back(v.second);
  std::sort(keep.begin(), keep.end());
  return keep;
}

/// Density summaries on thinned grids, per stratum and overall.
inline std::vector<StabilityRow> grid_stability_sweep(std::span<const PredictionCell> cells,
                                                      const Eigen::MatrixXd& y_draws,
                                                      const std::vector<double>& ha_per_location) {
  std::vector<StabilityRow> rows;
  for (double ha : ha_per_location) {
    if (!(ha > 0.0)) throw InvalidArgument("stability: densities must be positive (ha per location)");
    const auto keep = thin_cells(cells, ha);
    if (keep.empty()) {
      detail::warn("stability: no cells at " + std::to_string(ha) + " ha per location; skipped");
      continue;
    }
    std::vector<PredictionCell> sub;
    Eigen::MatrixXd sub_draws(y_draws.rows(), static_cast<Eigen::Index>(keep.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
      sub.push_back(cells[keep[k]]);
      sub_draws.col(static_cast<Eigen::Index>(k)) = y_draws.col(static_cast<Eigen::Index>(keep[k]));
    }
    for (const auto& est : aggregate_by_stratum(sub, sub_draws)) {
      StabilityRow r;
      r.ha_per_location = ha;
      r.spacing_m = std::sqrt(ha) * 100.0;
      r.scope = est.scope;
      r.n_cells = est.n_cells;
      r.density_mean = est.density.mean;
      r.density_sd = est.density.sd;
      rows.push_back(r);
    }
  }
  return rows;
}

struct ComparisonRow {
  std::string scope;
  double design_mean = 0, design_se = 0, model_mean = 0, model_sd = 0;
  double density_diff = 0;  ///< model - design
  double sd_ratio = 0;      ///< model SD / design SE (NaN when SE = 0)
  double design_total = 0, design_total_se = 0, model_total = 0, model_total_sd = 0;
  double total_diff = 0;
};

inline ComparisonRow compare(const AreaEstimate& model_est, double design_mean, double design_se, double design_total,
                             double design_total_se, const std::string& scope) {
  ComparisonRow r;
  r.scope = scope;
  r.design_mean = design_mean;
  r.design_se = design_se;
  r.model_mean = model_est.density.mean;
  r.model_sd = model_est.density.sd;
  r.density_diff = r.model_mean - r.design_mean;
  r.sd_ratio = design_se > 0.0 ? r.model_sd / design_se : std::numeric_limits<double>::quiet_NaN();
  r.design_total = design_total;
  r.design_total_se = design_total_se;
  r.model_total = model_est.total.mean;
  r.model_total_sd = model_est.total.sd;
  r.total_diff = r.model_total - r.design_total;
  return r;
}

/// Side-by-side table, one row per scope; every model scope needs a design match.
inline std::vector<ComparisonRow> compare(const std::vector<AreaEstimate>& model_ests, const PostStratResult& design) {
  std::vector<ComparisonRow> rows;
  for (const auto& e : model_ests) {
    if (e.scope == kAllStrata) {
      rows.push_back(compare(e, design.mean, design.se, design.total, design.total_se, "ALL"));
      continue;
    }
    auto it = std::find_if(design.strata.begin(), design.strata.end(), [&](const auto& s) { return s.stratum == e.scope; });
    if (it == design.strata.end())
      throw InvalidArgument("compare: stratum " + e.scope_name() + " has no design-based estimate");
    rows.push_back(compare(e, it->mean, it->se, it->total, it->total_se, e.scope_name()));
  }
  return rows;
}

}  // namespace sae

#endif  // SAE_PREDICT_HPP
