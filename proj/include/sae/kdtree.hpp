#ifndef SAE_KDTREE_HPP
#define SAE_KDTREE_HPP

#include <algorithm>
#include <array>
#include <cstddef>
#include <limits>
#include <numeric>
#include <queue>
#include <span>
#include <utility>
#include <vector>

namespace sae {

/// Static 2-d tree over points indexed by a rank (their position in some
/// ordering). Queries return the k nearest points whose rank is below a
/// bound, which is exactly the "nearest predecessors" search an NNGP needs.
/// Ties in distance go to the lower rank.
class KdTree2 {
 public:
  struct Point {
    double x;
    double y;
  };

  explicit KdTree2(std::vector<Point> points, std::size_t leaf_size = 8)
      : points_(std::move(points)), leaf_size_(std::max<std::size_t>(leaf_size, 1)) {
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    if (!points_.empty()) build(0, points_.size());
  }

  std::size_t size() const { return points_.size(); }
  const Point& point(std::size_t rank) const { return points_[rank]; }

  /// Ranks of the k nearest points with rank < rank_bound, sorted by
  /// increasing (distance, rank).
  std::vector<std::size_t> nearest(Point q, std::size_t k, std::size_t rank_bound) const {
    rank_bound = std::min(rank_bound, points_.size());
    k = std::min(k, rank_bound);
    std::vector<std::size_t> out;
    if (k == 0) return out;
    Heap heap;
    if (rank_bound <= 4 * leaf_size_ + k) {
      for (std::size_t r = 0; r < rank_bound; ++r) offer(heap, k, dist2(q, points_[r]), r);
    } else {
      search(0, q, k, rank_bound, heap);
    }
    std::vector<Candidate> found;
    found.reserve(heap.size());
    while (!heap.empty()) {
      found.push_back(heap.top());
      heap.pop();
    }
    std::reverse(found.begin(), found.end());
    out.reserve(found.size());
    for (const auto& c : found) out.push_back(c.second);
    return out;
  }

  static double dist2(Point a, Point b) {
    const double dx = a.x - b.x, dy = a.y - b.y;
    return dx * dx + dy * dy;
  }

 private:
  using Candidate = std::pair<double, std::size_t>;  // (squared distance, rank)
  using Heap = std::priority_queue<Candidate>;       // max-heap on (d2, rank)

  struct Node {
    std::array<double, 2> lo;
    std::array<double, 2> hi;
    std::size_t begin;
    std::size_t end;
    std::size_t min_rank;
    int left = -1;
    int right = -1;
  };

  static void offer(Heap& heap, std::size_t k, double d2, std::size_t rank) {
    Candidate c{d2, rank};
    if (heap.size() < k) {
      heap.push(c);
    } else if (c < heap.top()) {
      heap.pop();
      heap.push(c);
    }
  }

  int build(std::size_t begin, std::size_t end) {
    Node node{};
    node.begin = begin;
    node.end = end;
    node.lo = {std::numeric_limits<double>::infinity(), std::numeric_limits<double>::infinity()};
    node.hi = {-node.lo[0], -node.lo[1]};
    node.min_rank = std::numeric_limits<std::size_t>::max();
    for (std::size_t i = begin; i < end; ++i) {
      const auto& p = points_[order_[i]];
      node.lo[0] = std::min(node.lo[0], p.x);
      node.lo[1] = std::min(node.lo[1], p.y);
      node.hi[0] = std::max(node.hi[0], p.x);
      node.hi[1] = std::max(node.hi[1], p.y);
      node.min_rank = std::min(node.min_rank, order_[i]);
    }
    const int id = static_cast<int>(nodes_.size());
    nodes_.push_back(node);
    if (end - begin <= leaf_size_) return id;

    const int axis = (node.hi[0] - node.lo[0] >= node.hi[1] - node.lo[1]) ? 0 : 1;
    const std::size_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + static_cast<std::ptrdiff_t>(begin),
                     order_.begin() + static_cast<std::ptrdiff_t>(mid),
                     order_.begin() + static_cast<std::ptrdiff_t>(end),
                     [&](std::size_t a, std::size_t b) {
                       return axis == 0 ? points_[a].x < points_[b].x : points_[a].y < points_[b].y;
                     });
    const int left = build(begin, mid);
    const int right = build(mid, end);
    nodes_[static_cast<std::size_t>(id)].left = left;
    nodes_[static_cast<std::size_t>(id)].right = right;
    return id;
  }

  static double box_dist2(const Node& n, Point q) {
    const double dx = std::max({n.lo[0] - q.x, 0.0, q.x - n.hi[0]});
    const double dy = std::max({n.lo[1] - q.y, 0.0, q.y - n.hi[1]});
    return dx * dx + dy * dy;
  }

  void search(int id, Point q, std::size_t k, std::size_t bound, Heap& heap) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.min_rank >= bound) return;
    // Strict comparison keeps equal-distance boxes, which may hold a lower-rank tie.
    if (heap.size() == k && box_dist2(n, q) > heap.top().first) return;
    if (n.left < 0) {
      for (std::size_t i = n.begin; i < n.end; ++i) {
        const std::size_t r = order_[i];
        if (r < bound) offer(heap, k, dist2(q, points_[r]), r);
      }
      return;
    }
    const Node& a = nodes_[static_cast<std::size_t>(n.left)];
    const Node& b = nodes_[static_cast<std::size_t>(n.right)];
    if (box_dist2(a, q) <= box_dist2(b, q)) {
      search(n.left, q, k, bound, heap);
      search(n.right, q, k, bound, heap);
    } else {
      search(n.right, q, k, bound, heap);
      search(n.left, q, k, bound, heap);
    }
  }

  std::vector<Point> points_;
  std::size_t leaf_size_;
  std::vector<std::size_t> order_;
  std::vector<Node> nodes_;
};

}  // namespace sae

#endif  // SAE_KDTREE_HPP
