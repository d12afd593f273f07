#ifndef SAE_SIMULATE_HPP
#define SAE_SIMULATE_HPP

// Synthetic data from the two-stage generative model: Voronoi strata, a
// logistic-GP tree-cover field, LiDAR footprints along flight lines, plots on
// a subset of those footprints, and a regular prediction grid with truth.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sae/diagnostics.hpp"
#include "sae/error.hpp"
#include "sae/model.hpp"
#include "sae/random.hpp"
#include "sae/sampler.hpp"
#include "sae/spatial_core.hpp"

namespace sae {

enum class GpMode { automatic, dense, nngp };

struct SimScenario {
  double width_km = 100.0;
  double height_km = 60.0;
  int q = 3;
  int n_seeds = 12;  ///< Voronoi seeds; seed s belongs to stratum s mod q
  std::size_t n_plots = 400;
  std::size_t n_lidar = 2000;  ///< includes the plot footprints
  std::vector<double> flight_lines_x{10.0, 90.0};
  double line_half_width_km = 0.5;
  double cell_spacing_km = 1.5;  ///< 0 disables the grid
  CovParams tree_cover_field{1.0, 0.1};
  double tree_cover_logit_mean = 0.0;
  StageState outcome;    ///< true beta's, tau2, (sigma2_w, phi_w)
  StageState covariate;  ///< true alpha's, gamma2, (nu2_u, phi_u)
  GpMode gp_mode = GpMode::automatic;
  std::size_t nngp_m = 15;
  bool cell_truth = true;  ///< simulate latent fields at cells too
  std::uint64_t seed = 1;

  /// Three strata with distinct noise variances and a strong x-y relationship.
  static SimScenario defaults() {
    SimScenario s;
    s.covariate = StageState::zeros(3, 1, 0);
    s.covariate.intercept = 5.0;
    s.covariate.stratum_intercepts << -0.5, 0.0, 0.5;
    s.covariate.slopes << 0.1;
    s.covariate.stratum_slopes << -0.01, 0.0, 0.01;
    s.covariate.theta = {2.0, 0.3};
    s.covariate.noise_variances << 0.5, 1.0, 1.5;
    s.outcome = StageState::zeros(3, 1, 0);
    s.outcome.intercept = 10.0;
    s.outcome.stratum_intercepts << -4.0, 0.0, 4.0;
    s.outcome.slopes << 5.0;
    s.outcome.stratum_slopes << -1.0, 0.0, 1.0;
    s.outcome.theta = {20.0, 0.15};
    s.outcome.noise_variances << 25.0, 64.0, 144.0;
    return s;
  }

  void validate() const {
    if (!(width_km > 0 && height_km > 0)) throw InvalidArgument("scenario: domain extent must be positive");
    if (q < 1 || n_seeds < q) throw InvalidArgument("scenario: need q >= 1 and at least q Voronoi seeds");
    if (n_lidar < 1 || n_plots < 1 || n_plots > n_lidar)
      throw InvalidArgument("scenario: need 1 <= n_plots <= n_lidar");
    if (flight_lines_x.empty()) throw InvalidArgument("scenario: at least one flight line");
    auto nonneg = [](const Eigen::VectorXd& v) { return (v.array() >= 0.0).all(); };
    for (const auto* st : {&outcome, &covariate}) {
      if (st->q() != q || st->p() != 1) throw InvalidArgument("scenario: truth must have q strata and one slope");
      if (!nonneg(st->noise_variances) || st->theta.sigma2 < 0.0 || !(st->theta.phi > 0.0))
        throw InvalidArgument("scenario: variances must be non-negative and decay positive");
    }
  }
};

struct SimTruth {
  StageState outcome;    ///< spatial = w at plot locations
  StageState covariate;  ///< spatial = u at lidar locations
  Eigen::VectorXd cell_x, cell_y, cell_u, cell_w;
  bool nngp_simulated = false;
};

struct SimulatedData {
  std::vector<PlotRecord> plots;
  std::vector<LidarRecord> lidar;
  std::vector<PredictionCell> cells;
  SimTruth truth;
};

namespace detail {

/// Zero-mean field draw: exact (dense Cholesky) or sequential NNGP.
inline Eigen::VectorXd draw_field(const std::vector<Location>& locs, const CovParams& theta, bool dense,
                                  const NeighborGraph* graph, Rng& rng) {
  const auto n = static_cast<Eigen::Index>(locs.size());
  Eigen::VectorXd z(n);
  for (Eigen::Index i = 0; i < n; ++i) z(i) = rng.normal();
  if (theta.sigma2 == 0.0) return Eigen::VectorXd::Zero(n);
  if (dense) {
    Eigen::LLT<Eigen::MatrixXd> llt(dense_covariance(locs, theta));
    if (llt.info() != Eigen::Success) throw FactorizationError("simulate: dense covariance not positive definite");
    return llt.matrixL() * z;
  }
  const auto f = nngp_factors(*graph, locs, theta);
  Eigen::VectorXd w(n);
  for (std::size_t r = 0; r < graph->size(); ++r) {
    const std::size_t i = graph->ordering[r];
    w(static_cast<Eigen::Index>(i)) = conditional_mean(*graph, f, w, i) + std::sqrt(f.delta2[i]) * z(static_cast<Eigen::Index>(i));
  }
  return w;
}

}  // namespace detail

inline SimulatedData simulate(const SimScenario& sc) {
  sc.validate();
  Rng rng(sc.seed, 0x51a);
  SimulatedData out;

  std::vector<std::pair<double, double>> seeds;
  for (int s = 0; s < sc.n_seeds; ++s) seeds.emplace_back(rng.uniform(0, sc.width_km), rng.uniform(0, sc.height_km));
  auto stratum_at = [&](double x, double y) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (int s = 0; s < sc.n_seeds; ++s) {
      const double d = std::hypot(x - seeds[static_cast<std::size_t>(s)].first, y - seeds[static_cast<std::size_t>(s)].second);
      if (d < bd) bd = d, best = s;
    }
    return best % sc.q;
  };

  std::vector<Location> all;
  for (std::size_t i = 0; i < sc.n_lidar; ++i) {
    const double cx = sc.flight_lines_x[rng.index(sc.flight_lines_x.size())];
    const double x = std::clamp(cx + rng.uniform(-sc.line_half_width_km, sc.line_half_width_km), 0.0, sc.width_km);
    all.push_back({x, rng.uniform(0, sc.height_km), static_cast<std::int64_t>(i)});
  }
  std::vector<Location> cell_locs;
  if (sc.cell_spacing_km > 0.0) {
    const auto nx = static_cast<long>(std::floor(sc.width_km / sc.cell_spacing_km));
    const auto ny = static_cast<long>(std::floor(sc.height_km / sc.cell_spacing_km));
    std::int64_t id = 0;
    for (long iy = 0; iy < ny; ++iy)
      for (long ix = 0; ix < nx; ++ix)
        cell_locs.push_back({(static_cast<double>(ix) + 0.5) * sc.cell_spacing_km,
                             (static_cast<double>(iy) + 0.5) * sc.cell_spacing_km, id++});
  }
  const std::size_t n_l = all.size();
  const std::size_t n_field = n_l + (sc.cell_truth ? cell_locs.size() : 0);
  std::vector<Location> field_locs = all;
  for (std::size_t k = 0; k < cell_locs.size(); ++k) {
    auto l = cell_locs[k];
    l.id = static_cast<std::int64_t>(n_l + k);
    if (sc.cell_truth) field_locs.push_back(l);
  }

  const bool dense = sc.gp_mode == GpMode::dense || (sc.gp_mode == GpMode::automatic && n_field <= kDenseGuard);
  if (sc.gp_mode == GpMode::dense && n_field > kDenseGuard)
    throw InvalidArgument("simulate: dense simulation of " + std::to_string(n_field) +
                          " locations exceeds the guard of 5000; use gp_mode nngp");
  out.truth.nngp_simulated = !dense;
  NeighborGraph graph;
  if (!dense) graph = build_neighbor_graph(field_locs, sc.nngp_m, OrderingRule::coordinate);

  // Tree cover is defined everywhere, including cells without latent truth.
  std::vector<Location> cover_locs = all;
  for (std::size_t k = 0; k < cell_locs.size(); ++k) {
    auto l = cell_locs[k];
    l.id = static_cast<std::int64_t>(n_l + k);
    cover_locs.push_back(l);
  }
  NeighborGraph cover_graph;
  const bool cover_dense = dense && cover_locs.size() == field_locs.size();
  if (!cover_dense) cover_graph = build_neighbor_graph(cover_locs, sc.nngp_m, OrderingRule::coordinate);
  const Eigen::VectorXd z = detail::draw_field(cover_locs, sc.tree_cover_field, cover_dense, &cover_graph, rng);
  const Eigen::VectorXd u = detail::draw_field(field_locs, sc.covariate.theta, dense, &graph, rng);
  const Eigen::VectorXd w = detail::draw_field(field_locs, sc.outcome.theta, dense, &graph, rng);
  auto cover = [&](std::size_t i) { return 100.0 / (1.0 + std::exp(-(sc.tree_cover_logit_mean + z(static_cast<Eigen::Index>(i))))); };

  Eigen::VectorXd v1(1), x1(1);
  for (std::size_t i = 0; i < n_l; ++i) {
    LidarRecord r;
    r.location = all[i];
    r.stratum = stratum_at(all[i].x, all[i].y);
    r.v_tc = cover(i);
    v1(0) = r.v_tc;
    r.x_ch = sc.covariate.mean(r.stratum, v1) + u(static_cast<Eigen::Index>(i)) +
             std::sqrt(sc.covariate.noise_variances(r.stratum)) * rng.normal();
    out.lidar.push_back(r);
  }
  for (std::size_t i = 0; i < sc.n_plots; ++i) {
    const auto& l = out.lidar[i];
    PlotRecord p;
    p.location = l.location;
    p.stratum = l.stratum;
    p.x_ch = l.x_ch;
    p.v_tc = l.v_tc;
    x1(0) = p.x_ch;
    p.y = sc.outcome.mean(p.stratum, x1) + w(static_cast<Eigen::Index>(i)) +
          std::sqrt(sc.outcome.noise_variances(p.stratum)) * rng.normal();
    out.plots.push_back(p);
  }

  const std::size_t nc = cell_locs.size();
  out.truth.cell_x.resize(static_cast<Eigen::Index>(sc.cell_truth ? nc : 0));
  out.truth.cell_y.resize(out.truth.cell_x.size());
  out.truth.cell_u.resize(out.truth.cell_x.size());
  out.truth.cell_w.resize(out.truth.cell_x.size());
  const double cell_area_ha = sc.cell_spacing_km * sc.cell_spacing_km * 100.0;
  for (std::size_t k = 0; k < nc; ++k) {
    PredictionCell c;
    c.location = cell_locs[k];
    c.stratum = stratum_at(c.location.x, c.location.y);
    c.v_tc = cover(n_l + k);
    c.cell_area = cell_area_ha;
    out.cells.push_back(c);
    if (!sc.cell_truth) continue;
    const auto fk = static_cast<Eigen::Index>(n_l + k);
    const auto kk = static_cast<Eigen::Index>(k);
    v1(0) = c.v_tc;
    const double x = sc.covariate.mean(c.stratum, v1) + u(fk) + std::sqrt(sc.covariate.noise_variances(c.stratum)) * rng.normal();
    x1(0) = x;
    const double y = sc.outcome.mean(c.stratum, x1) + w(fk) + std::sqrt(sc.outcome.noise_variances(c.stratum)) * rng.normal();
    out.truth.cell_x(kk) = x;
    out.truth.cell_y(kk) = y;
    out.truth.cell_u(kk) = u(fk);
    out.truth.cell_w(kk) = w(fk);
  }

  out.truth.outcome = sc.outcome;
  out.truth.outcome.spatial = w.head(static_cast<Eigen::Index>(sc.n_plots));
  out.truth.covariate = sc.covariate;
  out.truth.covariate.spatial = u.head(static_cast<Eigen::Index>(n_l));
  return out;
}

struct RecoveryRow {
  std::string name;
  double truth = 0.0;
  double mean = 0.0;
  double bias = 0.0;
  double relative_bias = 0.0;  ///< NaN when truth is 0
  double lo = 0.0, hi = 0.0;
  bool covered = false;
};

inline std::vector<RecoveryRow> recovery_score(const std::map<std::string, double>& truth, const Posterior& post) {
  std::vector<RecoveryRow> rows;
  for (const auto& ps : summarize_posterior(post)) {
    auto it = truth.find(ps.name);
    if (it == truth.end()) throw InvalidArgument("recovery_score: truth has no parameter named '" + ps.name + "'");
    RecoveryRow r;
    r.name = ps.name;
    r.truth = it->second;
    r.mean = ps.summary.mean;
    r.bias = r.mean - r.truth;
    r.relative_bias = r.truth != 0.0 ? r.bias / r.truth : std::numeric_limits<double>::quiet_NaN();
    r.lo = ps.summary.lo;
    r.hi = ps.summary.hi;
    r.covered = r.lo <= r.truth && r.truth <= r.hi;
    rows.push_back(r);
  }
  return rows;
}

/// Posterior-mean bias and 95% interval coverage for every scalar parameter
/// the posterior carries. The truth must supply each of those names.
inline std::vector<RecoveryRow> recovery_score(const StageState& truth, const Posterior& post) {
  const auto truth_flat = flatten_parameters(truth, post.stage, post.spec);
  std::map<std::string, double> truth_by_name;
  for (const auto& t : truth_flat) truth_by_name[t.name] = t.value;
  return recovery_score(truth_by_name, post);
}

}  // namespace sae

#endif  // SAE_SIMULATE_HPP
