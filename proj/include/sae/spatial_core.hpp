#ifndef SAE_SPATIAL_CORE_HPP
#define SAE_SPATIAL_CORE_HPP

// Exponential covariance, ordered nearest-neighbor graphs, NNGP conditional
// factors and the NNGP / exact GP log densities.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <numeric>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "sae/error.hpp"
#include "sae/kdtree.hpp"
#include "sae/random.hpp"

namespace sae {

/// Projected location in km.
struct Location {
  double x = 0.0;
  double y = 0.0;
  std::int64_t id = 0;
};

/// Exponential covariance parameters: sigma2 * exp(-phi * d).
struct CovParams {
  double sigma2 = 1.0;  ///< process variance
  double phi = 1.0;     ///< decay rate, 1/km
};

inline constexpr double kRangeThreshold = 0.05;

inline double distance(const Location& a, const Location& b) { return std::hypot(a.x - b.x, a.y - b.y); }

inline double exp_correlation(double dist, double phi) {
  if (!std::isfinite(dist) || dist < 0.0)
    throw InvalidArgument("exp_correlation: distance must be finite and non-negative, got " +
                          std::to_string(dist));
  if (!(phi > 0.0)) throw InvalidArgument("exp_correlation: phi must be positive");
  return std::exp(-phi * dist);
}

/// Distance at which the exponential correlation falls to 0.05.
inline double effective_range(double phi) {
  if (!(phi > 0.0) || !std::isfinite(phi))
    throw InvalidArgument("effective_range: phi must be positive, got " + std::to_string(phi));
  return -std::log(kRangeThreshold) / phi;
}

/// Inverse of effective_range.
inline double decay_for_range(double range_km) {
  if (!(range_km > 0.0)) throw InvalidArgument("decay_for_range: range must be positive");
  return -std::log(kRangeThreshold) / range_km;
}

enum class OrderingRule { input, coordinate, maxmin };
enum class DuplicatePolicy { reject, jitter };

inline constexpr double kJitterKm = 1e-6;

/// Ordered nearest-neighbor DAG. All per-node vectors are indexed by node id
/// (the index into the location list); `ordering[r]` is the node at rank r.
struct NeighborGraph {
  std::size_t m = 0;
  std::vector<std::size_t> ordering;
  std::vector<std::size_t> rank;
  /// Predecessor neighbors of each node, nearest first.
  std::vector<std::vector<std::size_t>> neighbors;
  /// For each node, the (child node, slot in the child's neighbor list) pairs.
  std::vector<std::vector<std::pair<std::size_t, std::size_t>>> children;

  std::size_t size() const { return ordering.size(); }
};

/// Per-node conditional regression weights and conditional variances.
struct NngpFactors {
  std::vector<Eigen::VectorXd> a;
  std::vector<double> delta2;

  std::size_t size() const { return delta2.size(); }
};

namespace detail {

inline void check_finite(std::span<const Location> locs) {
  for (const auto& l : locs)
    if (!std::isfinite(l.x) || !std::isfinite(l.y))
      throw InvalidArgument("location " + std::to_string(l.id) + " has non-finite coordinates");
}

inline std::vector<KdTree2::Point> to_points(std::span<const Location> locs,
                                             std::span<const std::size_t> order) {
  std::vector<KdTree2::Point> pts;
  pts.reserve(order.size());
  for (auto i : order) pts.push_back({locs[i].x, locs[i].y});
  return pts;
}

/// Solves K(N,N) a = K(N,i) with unit variance and returns the unit-variance
/// conditional variance. `pair_dist` is |N| x |N|, `dist` is |N|.
inline double conditional_factor(const Eigen::MatrixXd& pair_dist, const Eigen::VectorXd& dist,
                                 double phi, Eigen::VectorXd& a) {
  const auto k = dist.size();
  if (k == 0) {
    a.resize(0);
    return 1.0;
  }
  Eigen::MatrixXd c = (-phi * pair_dist.array()).exp().matrix();
  Eigen::VectorXd r = (-phi * dist.array()).exp().matrix();
  Eigen::LLT<Eigen::MatrixXd> llt(c);
  if (llt.info() != Eigen::Success)
    throw FactorizationError("neighbor covariance is not positive definite (duplicate neighbors?)");
  a = llt.solve(r);
  const double d = 1.0 - r.dot(a);
  if (!(d > 0.0))
    throw FactorizationError("non-positive conditional variance (near-duplicate locations)");
  return std::min(d, 1.0);
}

}  // namespace detail

/// Pairs of ids sharing identical coordinates.
inline std::vector<std::pair<std::int64_t, std::int64_t>> find_duplicates(std::span<const Location> locs) {
  std::vector<std::size_t> idx(locs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](auto a, auto b) {
    return std::pair(locs[a].x, locs[a].y) < std::pair(locs[b].x, locs[b].y);
  });
  std::vector<std::pair<std::int64_t, std::int64_t>> dups;
  for (std::size_t i = 1; i < idx.size(); ++i) {
    const auto& p = locs[idx[i - 1]];
    const auto& c = locs[idx[i]];
    if (p.x == c.x && p.y == c.y) dups.emplace_back(p.id, c.id);
  }
  return dups;
}

/// Rejects duplicate coordinates, or jitters every duplicate (beyond the first
/// of its group) by up to kJitterKm in each axis.
inline void apply_duplicate_policy(std::vector<Location>& locs, DuplicatePolicy policy,
                                   std::uint64_t seed = 0) {
  auto dups = find_duplicates(locs);
  if (dups.empty()) return;
  if (policy == DuplicatePolicy::reject) {
    std::string msg = "duplicate coordinates:";
    for (std::size_t i = 0; i < std::min<std::size_t>(dups.size(), 10); ++i)
      msg += " (" + std::to_string(dups[i].first) + "," + std::to_string(dups[i].second) + ")";
    if (dups.size() > 10) msg += " ...";
    throw InvalidArgument(msg);
  }
  Rng rng(seed, 0x717e);
  std::map<std::int64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < locs.size(); ++i) by_id[locs[i].id] = i;
  for (const auto& [keep, move] : dups) {
    auto& l = locs[by_id.at(move)];
    l.x += rng.uniform(-kJitterKm, kJitterKm);
    l.y += rng.uniform(-kJitterKm, kJitterKm);
  }
  detail::warn("jittered " + std::to_string(dups.size()) + " duplicate location(s) by up to 1e-6 km");
  if (!find_duplicates(locs).empty()) apply_duplicate_policy(locs, DuplicatePolicy::reject);
}

/// Node ids in rank order under the given rule.
inline std::vector<std::size_t> make_ordering(std::span<const Location> locs, OrderingRule rule) {
  const std::size_t n = locs.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  switch (rule) {
    case OrderingRule::input:
      break;
    case OrderingRule::coordinate:
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
        return std::pair(locs[a].x, locs[a].y) < std::pair(locs[b].x, locs[b].y);
      });
      break;
    case OrderingRule::maxmin: {
      // Quadratic: start nearest the centroid, then repeatedly take the point
      // farthest from everything already chosen.
      if (n == 0) break;
      double cx = 0, cy = 0;
      for (const auto& l : locs) cx += l.x, cy += l.y;
      cx /= static_cast<double>(n);
      cy /= static_cast<double>(n);
      std::vector<double> mind(n, std::numeric_limits<double>::infinity());
      std::vector<char> used(n, 0);
      std::size_t first = 0;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) {
        const double d = std::hypot(locs[i].x - cx, locs[i].y - cy);
        if (d < best) best = d, first = i;
      }
      order.clear();
      std::size_t cur = first;
      for (std::size_t step = 0; step < n; ++step) {
        order.push_back(cur);
        used[cur] = 1;
        std::size_t next = n;
        double far = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          if (used[i]) continue;
          mind[i] = std::min(mind[i], distance(locs[i], locs[cur]));
          if (mind[i] > far) far = mind[i], next = i;
        }
        cur = next;
      }
      break;
    }
  }
  return order;
}

/// Builds the DAG where each node links to its min(rank, m) nearest predecessors.
inline NeighborGraph build_neighbor_graph(std::span<const Location> locs, std::size_t m,
                                          OrderingRule rule = OrderingRule::coordinate) {
  if (m < 1) throw InvalidArgument("build_neighbor_graph: m must be at least 1");
  detail::check_finite(locs);
  if (auto dups = find_duplicates(locs); !dups.empty())
    throw InvalidArgument("build_neighbor_graph: duplicate coordinates for ids " +
                          std::to_string(dups.front().first) + " and " +
                          std::to_string(dups.front().second));
  const std::size_t n = locs.size();
  NeighborGraph g;
  g.m = m;
  g.ordering = make_ordering(locs, rule);
  g.rank.assign(n, 0);
  for (std::size_t r = 0; r < n; ++r) g.rank[g.ordering[r]] = r;
  g.neighbors.assign(n, {});
  g.children.assign(n, {});

  KdTree2 tree(detail::to_points(locs, g.ordering));
  for (std::size_t r = 1; r < n; ++r) {
    const std::size_t node = g.ordering[r];
    auto ranks = tree.nearest(tree.point(r), m, r);
    auto& nb = g.neighbors[node];
    nb.reserve(ranks.size());
    for (auto rr : ranks) nb.push_back(g.ordering[rr]);
  }
  for (std::size_t node = 0; node < n; ++node)
    for (std::size_t s = 0; s < g.neighbors[node].size(); ++s)
      g.children[g.neighbors[node][s]].emplace_back(node, s);
  return g;
}

/// Neighbor distance tables for repeated factorization at varying phi.
class NngpFactorizer {
 public:
  NngpFactorizer() = default;
  NngpFactorizer(const NeighborGraph& graph, std::span<const Location> locs) {
    if (graph.size() != locs.size())
      throw InvalidArgument("NngpFactorizer: graph and location count differ");
    const std::size_t n = locs.size();
    pair_dist_.resize(n);
    dist_.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& nb = graph.neighbors[i];
      const auto k = static_cast<Eigen::Index>(nb.size());
      pair_dist_[i].resize(k, k);
      dist_[i].resize(k);
      for (Eigen::Index a = 0; a < k; ++a) {
        dist_[i](a) = distance(locs[i], locs[nb[static_cast<std::size_t>(a)]]);
        for (Eigen::Index b = 0; b <= a; ++b) {
          const double d = distance(locs[nb[static_cast<std::size_t>(a)]], locs[nb[static_cast<std::size_t>(b)]]);
          pair_dist_[i](a, b) = d;
          pair_dist_[i](b, a) = d;
        }
      }
    }
  }

  std::size_t size() const { return dist_.size(); }

  NngpFactors factorize(const CovParams& params) const {
    if (!(params.sigma2 > 0.0) || !(params.phi > 0.0))
      throw InvalidArgument("nngp_factors: sigma2 and phi must be positive");
    NngpFactors f;
    const std::size_t n = dist_.size();
    f.a.resize(n);
    f.delta2.resize(n);
    for (std::size_t i = 0; i < n; ++i)
      f.delta2[i] = params.sigma2 * detail::conditional_factor(pair_dist_[i], dist_[i], params.phi, f.a[i]);
    return f;
  }

 private:
  std::vector<Eigen::MatrixXd> pair_dist_;
  std::vector<Eigen::VectorXd> dist_;
};

inline NngpFactors nngp_factors(const NeighborGraph& graph, std::span<const Location> locs,
                                const CovParams& params) {
  return NngpFactorizer(graph, locs).factorize(params);
}

/// Conditional mean a_i' w_N(i) of node i.
inline double conditional_mean(const NeighborGraph& graph, const NngpFactors& f,
                               const Eigen::VectorXd& w, std::size_t i) {
  double mu = 0.0;
  const auto& nb = graph.neighbors[i];
  for (std::size_t s = 0; s < nb.size(); ++s) mu += f.a[i](static_cast<Eigen::Index>(s)) * w(static_cast<Eigen::Index>(nb[s]));
  return mu;
}

/// Sum over nodes of log N(w_i | a_i' w_N(i), delta2_i).
inline double nngp_log_density(const Eigen::VectorXd& w, const NngpFactors& factors,
                               const NeighborGraph& graph) {
  const std::size_t n = graph.size();
  if (static_cast<std::size_t>(w.size()) != n || factors.size() != n)
    throw InvalidArgument("nngp_log_density: dimension mismatch (w has " + std::to_string(w.size()) +
                          ", graph has " + std::to_string(n) + ")");
  constexpr double log2pi = 1.8378770664093453;
  double ll = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double e = w(static_cast<Eigen::Index>(i)) - conditional_mean(graph, factors, w, i);
    ll += -0.5 * (log2pi + std::log(factors.delta2[i]) + e * e / factors.delta2[i]);
  }
  return ll;
}

inline constexpr std::size_t kDenseGuard = 5000;

inline Eigen::MatrixXd dense_covariance(std::span<const Location> a, std::span<const Location> b,
                                        const CovParams& params) {
  Eigen::MatrixXd k(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j)
      k(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          params.sigma2 * std::exp(-params.phi * distance(a[i], b[j]));
  return k;
}

inline Eigen::MatrixXd dense_covariance(std::span<const Location> locs, const CovParams& params) {
  return dense_covariance(locs, locs, params);
}

/// Exact zero-mean Gaussian log density under the dense exponential covariance.
inline double dense_gp_log_density(const Eigen::VectorXd& w, std::span<const Location> locs,
                                   const CovParams& params) {
  const std::size_t n = locs.size();
  if (static_cast<std::size_t>(w.size()) != n) throw InvalidArgument("dense_gp_log_density: dimension mismatch");
  if (n > kDenseGuard) throw InvalidArgument("dense_gp_log_density: n exceeds dense guard of 5000");
  Eigen::LLT<Eigen::MatrixXd> llt(dense_covariance(locs, params));
  if (llt.info() != Eigen::Success)
    throw FactorizationError("dense covariance is not positive definite (duplicate points?)");
  const Eigen::VectorXd z = llt.matrixL().solve(w);
  const double logdet = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
  constexpr double log2pi = 1.8378770664093453;
  return -0.5 * (static_cast<double>(n) * log2pi + logdet + z.squaredNorm());
}

}  // namespace sae

#endif  // SAE_SPATIAL_CORE_HPP
