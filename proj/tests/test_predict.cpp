#include <gtest/gtest.h>

#include <algorithm>
#include <functional>
#include <numeric>
#include <random>

#include "oracles.hpp"
#include "sae/predict.hpp"

using namespace sae;

namespace {

StageModel plain_model(Stage stage, Variant v, std::size_t n, int q, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> u(0, 10);
  StageData d;
  d.num_strata = q;
  d.response.resize(Eigen::Index(n));
  d.covariates.resize(Eigen::Index(n), 1);
  for (std::size_t i = 0; i < n; ++i) {
    d.locations.push_back({u(gen), u(gen), std::int64_t(i)});
    d.strata.push_back(int(i % std::size_t(q)));
    d.covariates(Eigen::Index(i), 0) = u(gen);
    d.response(Eigen::Index(i)) = u(gen);
  }
  EdaSummary e;
  return StageModel(stage, SubmodelSpec::make(v), d, default_priors(e, q, 1));
}

Posterior synthetic_posterior(const StageModel& m, std::size_t L, const std::function<void(StageState&, std::size_t)>& f) {
  Posterior p;
  p.stage = m.stage();
  p.spec = m.spec();
  ChainSamples c;
  for (std::size_t l = 0; l < L; ++l) {
    auto s = m.initial_state();
    f(s, l);
    c.draws.push_back(s);
  }
  c.loglik = Eigen::MatrixXd::Zero(Eigen::Index(L), Eigen::Index(m.n()));
  p.chains.push_back(c);
  return p;
}

std::vector<PredictionCell> grid_cells(int nx, int ny, double spacing, int q) {
  std::vector<PredictionCell> c;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i)
      c.push_back({{(i + 0.5) * spacing, (j + 0.5) * spacing, std::int64_t(c.size())}, (i + j) % q, 40.0,
                   spacing * spacing * 100.0});
  return c;
}

}  // namespace

TEST(PredictLatent, CoincidentLocationInterpolates) {
  std::vector<Location> ref{{0, 0, 0}, {1, 0, 1}, {0, 2, 2}};
  std::vector<Location> tgt{{1, 0, 0}};
  Eigen::VectorXd u(3);
  u << 0.5, -1.25, 2.0;
  const auto g = build_prediction_graph(ref, tgt, 3, PredictionMode::independent);
  const auto mo = latent_conditional(g, ref, tgt, 0, {1.0, 0.5}, u);
  EXPECT_EQ(mo.mean, -1.25);
  EXPECT_EQ(mo.variance, 0.0);
  Rng rng(1, 0);
  EXPECT_EQ(predict_latent(g, ref, tgt, u, {1.0, 0.5}, rng)(0), -1.25);
  // approaching the observed location recovers the limit continuously
  std::vector<Location> near{{1 + 1e-9, 0, 0}};
  const auto gn = build_prediction_graph(ref, near, 3, PredictionMode::independent);
  const auto mn = latent_conditional(gn, ref, near, 0, {1.0, 0.5}, u);
  EXPECT_NEAR(mn.mean, -1.25, 1e-6);
  EXPECT_LT(mn.variance, 1e-6);
}

TEST(PredictLatent, FarLocationDecorrelates) {
  std::vector<Location> ref{{0, 0, 0}, {1, 0, 1}};
  std::vector<Location> tgt{{500, 500, 0}};
  Eigen::VectorXd u(2);
  u << 3.0, -2.0;
  const auto g = build_prediction_graph(ref, tgt, 2, PredictionMode::independent);
  const auto mo = latent_conditional(g, ref, tgt, 0, {2.0, 0.2}, u);
  EXPECT_NEAR(mo.mean, 0.0, 1e-20);
  EXPECT_NEAR(mo.variance, 2.0, 1e-12);
}

TEST(PredictLatent, FiveObservedMatchesKriging) {
  std::mt19937_64 gen(3);
  const auto ref = oracle::random_locations(5, gen, 4.0);
  std::vector<Location> tgt{{2.2, 1.7, 0}};
  Eigen::VectorXd u(5);
  u << 0.3, -0.2, 1.1, 0.8, -0.5;
  const auto g = build_prediction_graph(ref, tgt, 5, PredictionMode::independent);
  const auto mo = latent_conditional(g, ref, tgt, 0, {1.3, 0.6}, u);
  const auto [mean, var] = oracle::kriging(ref, u, tgt[0], 1.3, 0.6);
  EXPECT_NEAR(mo.mean, mean, 1e-10);
  EXPECT_NEAR(mo.variance, var, 1e-10);
}

TEST(PredictLatent, SaturatedMomentsMatchDenseConditionals) {
  std::mt19937_64 gen(4);
  for (int rep = 0; rep < 5; ++rep) {
    const auto ref = oracle::random_locations(100, gen, 10.0);
    const auto tgt = oracle::random_locations(20, gen, 10.0);
    Eigen::VectorXd u = Eigen::VectorXd::Random(100);
    const CovParams th{1.7, 0.35};
    const auto g = build_prediction_graph(ref, tgt, 100, PredictionMode::independent);
    for (std::size_t k = 0; k < tgt.size(); ++k) {
      const auto mo = latent_conditional(g, ref, tgt, k, th, u);
      const auto [mean, var] = oracle::kriging(ref, u, tgt[k], th.sigma2, th.phi);
      EXPECT_NEAR(mo.mean, mean, 1e-8);
      EXPECT_NEAR(mo.variance, var, 1e-8);
    }
  }
}

TEST(PredictLatent, SequentialModeConditionsOnEarlierTargets) {
  std::mt19937_64 gen(5);
  const auto ref = oracle::random_locations(12, gen, 5.0);
  const auto tgt = oracle::random_locations(6, gen, 5.0);
  Eigen::VectorXd all = Eigen::VectorXd::Random(18);
  const CovParams th{1.0, 0.8};
  const auto g = build_prediction_graph(ref, tgt, 30, PredictionMode::sequential);
  for (std::size_t k = 0; k < tgt.size(); ++k) {
    EXPECT_EQ(g.neighbors[k].size(), 12 + k);
    std::vector<Location> cond(ref.begin(), ref.end());
    for (std::size_t j = 0; j < k; ++j) cond.push_back(tgt[j]);
    const auto mo = latent_conditional(g, ref, tgt, k, th, all);
    const auto [mean, var] = oracle::kriging(cond, all.head(Eigen::Index(12 + k)), tgt[k], th.sigma2, th.phi);
    EXPECT_NEAR(mo.mean, mean, 1e-9);
    EXPECT_NEAR(mo.variance, var, 1e-9);
  }
}

TEST(PredictLatent, EmptyReferenceDrawsFromPrior) {
  std::vector<Location> ref;
  std::vector<Location> tgt{{0, 0, 0}};
  const auto g = build_prediction_graph(ref, tgt, 5, PredictionMode::independent);
  Rng rng(6, 0);
  double s = 0, ss = 0;
  const int N = 40000;
  for (int t = 0; t < N; ++t) {
    const double v = predict_latent(g, ref, tgt, Eigen::VectorXd(), {4.0, 1.0}, rng)(0);
    s += v;
    ss += v * v;
  }
  EXPECT_NEAR(s / N, 0.0, 0.05);
  EXPECT_NEAR(ss / N, 4.0, 0.15);
  Rng r2(1, 0);
  const auto zero = predict_latent(g, ref, tgt, Eigen::VectorXd(), {0.0, 1.0}, r2);
  EXPECT_EQ(zero(0), 0.0);
}

TEST(PredictCovariate, ZeroVariancesGiveRegressionSurface) {
  const auto m = plain_model(Stage::covariate, Variant::full, 50, 2, 7);
  const auto post = synthetic_posterior(m, 4, [](StageState& s, std::size_t l) {
    s.intercept = 5.0 + double(l);
    s.stratum_intercepts << -0.5, 0.5;
    s.slopes << 0.1;
    s.stratum_slopes << 0.0, 0.02;
    s.noise_variances.setZero();
    s.theta.sigma2 = 0.0;
  });
  auto cells = grid_cells(5, 4, 2.0, 2);
  for (std::size_t k = 0; k < cells.size(); ++k) cells[k].v_tc = double(k) * 3.0;
  PredictionOptions opt;
  const auto x = predict_covariate(cells, m, post, select_draws(4, 0), opt);
  for (Eigen::Index l = 0; l < 4; ++l)
    for (std::size_t k = 0; k < cells.size(); ++k) {
      Eigen::VectorXd v(1);
      v << cells[k].v_tc;
      EXPECT_DOUBLE_EQ(x(l, Eigen::Index(k)), post.draw(std::size_t(l)).mean(cells[k].stratum, v));
    }
}

TEST(PredictCovariate, ObservedLocationShrinksSd) {
  const auto m = plain_model(Stage::covariate, Variant::full, 60, 1, 8);
  std::mt19937_64 gen(9);
  std::normal_distribution<double> z;
  Eigen::VectorXd field(60);
  for (auto& v : field) v = std::sqrt(2.0) * z(gen);
  const auto post = synthetic_posterior(m, 400, [&](StageState& s, std::size_t) {
    s.intercept = 5.0;
    s.slopes << 0.0;
    s.noise_variances.setConstant(0.01);
    s.theta = {2.0, 0.3};
    s.spatial = field;
  });
  const auto& at = m.data().locations[7];
  std::vector<PredictionCell> cells{{{at.x, at.y, 0}, 0, 50, 1.0}, {{60.0, 60.0, 1}, 0, 50, 1.0}};
  PredictionOptions opt;
  const auto x = predict_covariate(cells, m, post, select_draws(400, 0), opt);
  auto sd = [&](Eigen::Index k) {
    const double mu = x.col(k).mean();
    return std::sqrt((x.col(k).array() - mu).square().sum() / double(x.rows() - 1));
  };
  EXPECT_LT(sd(0), 0.5 * sd(1));
  Eigen::VectorXd diff(400);
  for (Eigen::Index l = 0; l < 400; ++l) diff(l) = x(l, 0) - (5.0 + post.draw(std::size_t(l)).spatial(7));
  EXPECT_LT(diff.cwiseAbs().maxCoeff(), 0.5);
}

TEST(PredictCovariate, NovelStrataPolicy) {
  StageData d;
  d.num_strata = 3;
  for (int i = 0; i < 30; ++i) {
    d.locations.push_back({double(i), 0.0, i});
    d.strata.push_back(i % 2);  // stratum 2 unseen
  }
  d.response = Eigen::VectorXd::LinSpaced(30, 1, 2);
  d.covariates = Eigen::MatrixXd::Constant(30, 1, 10.0);
  d.covariates.col(0) += Eigen::VectorXd::LinSpaced(30, 0, 5);
  StageModel m(Stage::covariate, SubmodelSpec::make(Variant::sm4), d, default_priors(EdaSummary{}, 3, 1));
  const auto post = synthetic_posterior(m, 2, [](StageState&, std::size_t) {});
  std::vector<PredictionCell> cells{{{0.5, 0.5, 0}, 2, 10, 1}};
  PredictionOptions opt;
  EXPECT_THROW(predict_covariate(cells, m, post, {0, 1}, opt), InvalidArgument);
  opt.allow_novel_strata = true;
  EXPECT_NO_THROW(predict_covariate(cells, m, post, {0, 1}, opt));
  cells[0].stratum = 3;
  EXPECT_THROW(predict_covariate(cells, m, post, {0, 1}, opt), InvalidArgument);
}

TEST(PredictOutcome, DeterministicAffineMapOfX) {
  const auto m = plain_model(Stage::outcome, Variant::full, 40, 2, 10);
  const auto post = synthetic_posterior(m, 3, [](StageState& s, std::size_t l) {
    s.intercept = 10.0;
    s.stratum_intercepts << -4, 4;
    s.slopes << 5.0 + double(l);
    s.stratum_slopes << -1, 1;
    s.noise_variances.setZero();
    s.theta.sigma2 = 0.0;
  });
  const auto cells = grid_cells(4, 3, 1.0, 2);
  Eigen::MatrixXd x = Eigen::MatrixXd::Random(3, Eigen::Index(cells.size())) * 10.0;
  const auto y = predict_outcome(cells, m, post, {0, 1, 2}, x, PredictionOptions{});
  for (Eigen::Index l = 0; l < 3; ++l)
    for (std::size_t k = 0; k < cells.size(); ++k) {
      const int j = cells[k].stratum;
      const double b = (5.0 + double(l)) + (j == 0 ? -1.0 : 1.0);
      const double a = 10.0 + (j == 0 ? -4.0 : 4.0);
      EXPECT_NEAR(y(l, Eigen::Index(k)), a + b * x(l, Eigen::Index(k)), 1e-12);
    }
  EXPECT_THROW(predict_outcome(cells, m, post, {0, 1}, x, PredictionOptions{}), InvalidArgument);
}

TEST(PredictTwoStage, MisalignedChainLengthsRejected) {
  const auto cm = plain_model(Stage::covariate, Variant::full, 30, 1, 11);
  const auto om = plain_model(Stage::outcome, Variant::full, 30, 1, 12);
  const auto cp = synthetic_posterior(cm, 5, [](StageState&, std::size_t) {});
  const auto op = synthetic_posterior(om, 6, [](StageState&, std::size_t) {});
  EXPECT_THROW(predict_two_stage(grid_cells(2, 2, 1, 1), cm, cp, om, op, PredictionOptions{}), InvalidArgument);
}

TEST(PredictTwoStage, AlignmentIsLaw) {
  // Covariate draws rise with l while outcome slopes fall so that the aligned
  // products are nearly constant; any de-coupling of the pairing inflates the SD.
  const std::size_t L = 400;
  const auto cm = plain_model(Stage::covariate, Variant::sm1, 30, 1, 13);
  const auto om = plain_model(Stage::outcome, Variant::sm1, 30, 1, 14);
  const auto cp = synthetic_posterior(cm, L, [&](StageState& s, std::size_t l) {
    s.intercept = 1.0 + 4.0 * double(l) / double(L);
    s.slopes << 0.0;
    s.noise_variances.setConstant(1e-6);
  });
  const auto op = synthetic_posterior(om, L, [&](StageState& s, std::size_t l) {
    const double xl = 1.0 + 4.0 * double(l) / double(L);
    s.slopes << 10.0 / xl;
    s.intercept = 0.0;
    s.noise_variances.setConstant(0.25);
  });
  const auto cells = grid_cells(6, 5, 1.0, 1);
  PredictionOptions opt;
  const auto ps = predict_two_stage(cells, cm, cp, om, op, opt);
  Eigen::MatrixXd shuffled = ps.x;
  std::vector<Eigen::Index> perm(L);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), std::mt19937_64(15));
  for (std::size_t l = 0; l < L; ++l) shuffled.row(Eigen::Index(l)) = ps.x.row(perm[l]);
  const auto ys = predict_outcome(cells, om, op, ps.draw_index, shuffled, opt);
  auto mean_sd = [](const Eigen::MatrixXd& y) {
    double acc = 0;
    for (Eigen::Index k = 0; k < y.cols(); ++k) {
      const double mu = y.col(k).mean();
      acc += std::sqrt((y.col(k).array() - mu).square().sum() / double(y.rows() - 1));
    }
    return acc / double(y.cols());
  };
  EXPECT_LT(mean_sd(ps.y), mean_sd(ys));
  EXPECT_LT(mean_sd(ps.y), 0.6);
  EXPECT_GT(mean_sd(ys), 2.0);
}

TEST(PredictTwoStage, DeterministicAndThreadInvariant) {
  const auto cm = plain_model(Stage::covariate, Variant::full, 80, 2, 16);
  const auto om = plain_model(Stage::outcome, Variant::full, 50, 2, 17);
  std::mt19937_64 gen(18);
  std::normal_distribution<double> z;
  auto fill = [&](StageState& s, std::size_t) {
    s.theta = {1.0, 0.4};
    for (auto& v : s.spatial) v = z(gen);
  };
  const auto cp = synthetic_posterior(cm, 20, fill);
  const auto op = synthetic_posterior(om, 20, fill);
  const auto cells = grid_cells(8, 8, 1.2, 2);
  PredictionOptions opt;
  for (auto mode : {PredictionMode::independent, PredictionMode::sequential}) {
    opt.mode = mode;
    opt.threads = 1;
    const auto a = predict_two_stage(cells, cm, cp, om, op, opt);
    const auto b = predict_two_stage(cells, cm, cp, om, op, opt);
    opt.threads = 4;
    const auto c = predict_two_stage(cells, cm, cp, om, op, opt);
    EXPECT_EQ(a.y, b.y);
    EXPECT_EQ(a.y, c.y);
    EXPECT_EQ(a.x, c.x);
  }
  opt.max_draws = 5;
  EXPECT_EQ(predict_two_stage(cells, cm, cp, om, op, opt).y.rows(), 5);
}

TEST(Aggregate, ConstantDraws) {
  const auto cells = grid_cells(4, 5, 0.25, 2);
  const Eigen::MatrixXd y = Eigen::MatrixXd::Constant(30, Eigen::Index(cells.size()), 7.5);
  const auto e = aggregate(cells, y);
  const double area = 20 * 6.25;
  EXPECT_DOUBLE_EQ(e.area_ha, area);
  EXPECT_DOUBLE_EQ(e.density.mean, 7.5);
  EXPECT_DOUBLE_EQ(e.density.sd, 0.0);
  EXPECT_DOUBLE_EQ(e.total.mean, 7.5 * area);
  EXPECT_EQ(e.n_cells, 20u);
}

TEST(Aggregate, TwoCellsTwoDrawsByHand) {
  std::vector<PredictionCell> cells{{{0, 0, 0}, 0, 10, 5.0}, {{1, 0, 1}, 0, 10, 5.0}};
  Eigen::MatrixXd y(2, 2);
  y << 1, 3, 2, 6;
  const auto e = aggregate(cells, y);
  EXPECT_DOUBLE_EQ(e.density_draws(0), 2.0);
  EXPECT_DOUBLE_EQ(e.density_draws(1), 4.0);
  EXPECT_DOUBLE_EQ(e.density.mean, 3.0);
  EXPECT_DOUBLE_EQ(e.total.mean, 30.0);
  EXPECT_DOUBLE_EQ(e.total.mean, e.density.mean * e.area_ha);
}

TEST(Aggregate, StratumTotalsAddUpPerDraw) {
  const auto cells = grid_cells(12, 9, 0.25, 3);
  std::mt19937_64 gen(19);
  std::normal_distribution<double> z(50, 20);
  Eigen::MatrixXd y(40, Eigen::Index(cells.size()));
  for (auto& v : y.reshaped()) v = z(gen);
  const auto est = aggregate_by_stratum(cells, y);
  ASSERT_EQ(est.size(), 4u);
  EXPECT_EQ(est.back().scope, kAllStrata);
  for (Eigen::Index l = 0; l < 40; ++l) {
    double s = 0;
    for (std::size_t k = 0; k + 1 < est.size(); ++k) s += est[k].total_draws(l);
    EXPECT_EQ(s, est.back().total_draws(l));
  }
  for (const auto& e : est) {
    EXPECT_LE(e.density.lo, e.density.mean);
    EXPECT_LE(e.density.mean, e.density.hi);
    EXPECT_LE(e.total.lo, e.total.mean);
    EXPECT_LE(e.total.mean, e.total.hi);
  }
}

TEST(Aggregate, LinearInDraws) {
  const auto cells = grid_cells(5, 5, 0.5, 2);
  Eigen::MatrixXd y = Eigen::MatrixXd::Random(25, 25) * 30.0;
  const auto a = aggregate(cells, y, 1);
  const auto b = aggregate(cells, 2.5 * y, 1);
  for (Eigen::Index l = 0; l < 25; ++l) {
    EXPECT_NEAR(b.density_draws(l), 2.5 * a.density_draws(l), 1e-12 * std::abs(a.density_draws(l)) + 1e-12);
    EXPECT_NEAR(b.total_draws(l), 2.5 * a.total_draws(l), 1e-12 * std::abs(a.total_draws(l)) + 1e-12);
  }
}

TEST(Aggregate, NegativesRetainedAndCounted) {
  std::vector<PredictionCell> cells{{{0, 0, 0}, 0, 10, 1.0}, {{1, 0, 1}, 0, 10, 1.0}};
  Eigen::MatrixXd y(2, 2);
  y << -1, 3, 2, 6;
  const auto e = aggregate(cells, y);
  EXPECT_DOUBLE_EQ(e.density_draws(0), 1.0);
  EXPECT_DOUBLE_EQ(e.negative_fraction, 0.25);
}

TEST(Aggregate, EmptyScopeNamesStratum) {
  const auto cells = grid_cells(3, 3, 1.0, 2);
  try {
    aggregate(cells, Eigen::MatrixXd::Zero(2, 9), 5);
    FAIL();
  } catch (const InvalidArgument& e) {
    EXPECT_NE(std::string(e.what()).find("5"), std::string::npos);
  }
}

TEST(Stability, FullGridRowsMatchAggregate) {
  const auto cells = grid_cells(20, 20, 0.25, 2);
  const Eigen::MatrixXd y = Eigen::MatrixXd::Random(10, 400) * 5.0 + Eigen::MatrixXd::Constant(10, 400, 50.0);
  const auto rows = grid_stability_sweep(cells, y, {6.25, 6.25, 1.0});
  const auto all = aggregate(cells, y);
  ASSERT_EQ(rows.size(), 9u);
  for (std::size_t r = 0; r < 3; ++r) {
    EXPECT_EQ(rows[r].density_mean, rows[3 + r].density_mean);
    EXPECT_EQ(rows[r].density_mean, rows[6 + r].density_mean);
  }
  EXPECT_EQ(rows[2].scope, kAllStrata);
  EXPECT_EQ(rows[2].density_mean, all.density.mean);
  EXPECT_EQ(rows[2].density_sd, all.density.sd);
  EXPECT_EQ(rows[2].n_cells, 400u);
}

TEST(Stability, ThinningKeepsOnePerBin) {
  const auto cells = grid_cells(40, 40, 0.25, 1);  // 10 km x 10 km, 6.25 ha cells
  EXPECT_EQ(thin_cells(cells, 6.25).size(), 1600u);
  EXPECT_EQ(thin_cells(cells, 25.0).size(), 400u);
  EXPECT_EQ(thin_cells(cells, 100.0).size(), 100u);
  EXPECT_EQ(thin_cells(cells, 10000.0).size(), 1u);
  EXPECT_THROW(grid_stability_sweep(cells, Eigen::MatrixXd::Zero(2, 1600), {0.0}), InvalidArgument);
}

TEST(Compare, DifferencesAndRatios) {
  AreaEstimate e;
  e.scope = kAllStrata;
  e.density = {7.525, 0.4, 6.7, 8.3};
  e.total = {7525, 400, 6700, 8300};
  const auto r = compare(e, 4.624, 0.8, 4624, 800, "ALL");
  EXPECT_NEAR(r.density_diff, 2.901, 1e-12);
  EXPECT_NEAR(r.sd_ratio, 0.5, 1e-12);
  EXPECT_NEAR(r.total_diff, 2901, 1e-9);
  const auto same = compare(e, 7.525, 0.4, 7525, 400, "ALL");
  EXPECT_EQ(same.density_diff, 0.0);
  EXPECT_EQ(same.total_diff, 0.0);
  EXPECT_EQ(same.sd_ratio, 1.0);
  EXPECT_TRUE(std::isnan(compare(e, 7.0, 0.0, 7000, 0, "ALL").sd_ratio));
}

TEST(Compare, ScopeMismatchIsError) {
  AreaEstimate e;
  e.scope = 3;
  PostStratResult d;
  d.strata.push_back({0, 5, 10, 1, 2, 0.5, 20, 5});
  EXPECT_THROW(compare(std::vector<AreaEstimate>{e}, d), InvalidArgument);
}
