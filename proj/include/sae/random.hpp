#ifndef SAE_RANDOM_HPP
#define SAE_RANDOM_HPP

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

namespace sae {

/// Seeded pseudo-random stream. The full state (engine plus the cached
/// normal variate) can be saved and restored, so chains resume bit-exactly.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 1, std::uint64_t stream = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream),
                      static_cast<std::uint32_t>(stream >> 32), 0x5ae5ae5au};
    engine_.seed(seq);
  }

  double normal() { return normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal_(engine_); }
  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }
  double gamma(double shape, double scale = 1.0) {
    return std::gamma_distribution<double>(shape, scale)(engine_);
  }
  /// IG(shape, scale): density proportional to x^{-shape-1} exp(-scale/x).
  double inverse_gamma(double shape, double scale) { return scale / gamma(shape, 1.0); }

  std::mt19937_64& engine() { return engine_; }

  std::string state() const {
    std::ostringstream os;
    os << engine_ << ' ' << normal_;
    return os.str();
  }
  void restore(const std::string& s) {
    std::istringstream is(s);
    is >> engine_ >> normal_;
  }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace sae

#endif  // SAE_RANDOM_HPP
