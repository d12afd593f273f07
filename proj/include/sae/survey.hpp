#ifndef SAE_SURVEY_HPP
#define SAE_SURVEY_HPP

// Design-based post-stratified estimators of mean and total.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "sae/error.hpp"

namespace sae {

struct StratumData {
  int stratum = 0;
  double area_ha = 0.0;
  std::vector<double> values;  ///< plot observations, Mg/ha
};

struct StratumMeanSe {
  double mean = 0.0;
  std::optional<double> se;  ///< unavailable when n_j = 1
};

inline StratumMeanSe stratum_mean_se(const StratumData& d) {
  const std::size_t n = d.values.size();
  if (n == 0) throw InvalidArgument("stratum " + std::to_string(d.stratum) + " has no observations");
  StratumMeanSe r;
  double sum = 0.0;
  for (double v : d.values) sum += v;
  r.mean = sum / static_cast<double>(n);
  if (n >= 2) {
    double ss = 0.0;
    for (double v : d.values) ss += (v - r.mean) * (v - r.mean);
    r.se = std::sqrt(ss / (static_cast<double>(n) * static_cast<double>(n - 1)));
  }
  return r;
}

struct StratumEstimate {
  int stratum = 0;
  std::size_t n = 0;
  double area_ha = 0.0;
  double weight = 0.0;
  double mean = 0.0, se = 0.0;
  double total = 0.0, total_se = 0.0;
};

struct PostStratResult {
  std::vector<StratumEstimate> strata;
  std::size_t n = 0;
  double area_ha = 0.0;
  double mean = 0.0, se = 0.0;
  double total = 0.0, total_se = 0.0;
};

/// W_j = A_j / A, ybar = sum W_j ybar_j and
/// s^2 = (1/n) (sum W_j n_j s_j^2 + sum (1 - W_j) (n_j / n) s_j^2).
inline PostStratResult post_stratified(const std::vector<StratumData>& strata) {
  if (strata.empty()) throw InvalidArgument("post_stratified: no strata");
  double area = 0.0;
  std::size_t n = 0;
  for (const auto& s : strata) {
    if (s.values.size() < 2)
      throw InvalidArgument("post_stratified: stratum " + std::to_string(s.stratum) + " has fewer than 2 plots");
    if (!(s.area_ha > 0.0)) throw InvalidArgument("post_stratified: stratum " + std::to_string(s.stratum) + " has non-positive area");
    area += s.area_ha;
    n += s.values.size();
  }
  PostStratResult r;
  r.n = n;
  r.area_ha = area;
  const double nd = static_cast<double>(n);
  double first = 0.0, second = 0.0;
  for (const auto& s : strata) {
    const auto ms = stratum_mean_se(s);
    StratumEstimate e;
    e.stratum = s.stratum;
    e.n = s.values.size();
    e.area_ha = s.area_ha;
    e.weight = s.area_ha / area;
    e.mean = ms.mean;
    e.se = *ms.se;
    e.total = e.mean * s.area_ha;
    e.total_se = e.se * s.area_ha;
    const double nj = static_cast<double>(e.n);
    const double s2 = e.se * e.se;
    r.mean += e.weight * e.mean;
    first += e.weight * nj * s2;
    second += (1.0 - e.weight) * (nj / nd) * s2;
    r.strata.push_back(e);
  }
  r.se = std::sqrt((first + second) / nd);
  r.total = r.mean * area;
  r.total_se = r.se * area;
  return r;
}

}  // namespace sae

#endif  // SAE_SURVEY_HPP
