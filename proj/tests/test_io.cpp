#include <gtest/gtest.h>

#include <fstream>

#include "sae/io.hpp"
#include "sae/simulate.hpp"

using namespace sae;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = fs::temp_directory_path() / (std::string("sae_io_") + info->test_suite_name() + "_" + info->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  fs::path operator/(const std::string& f) const { return path_ / f; }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream(p, std::ios::binary) << s;
}

std::vector<std::string> issues_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const ValidationError& e) {
    return e.issues();
  }
  return {};
}

bool any_contains(const std::vector<std::string>& v, const std::string& needle) {
  for (const auto& s : v)
    if (s.find(needle) != std::string::npos) return true;
  return false;
}

}  // namespace

TEST(LoadPlots, ThreeRows) {
  TempDir d;
  write_text(d / "p.csv",
             "id,x_km,y_km,stratum,y_mgha,x_ch_m,v_tc_pct\n"
             "1,0.5,1.5,0,120.5,14.2,80\n"
             "2,1.5,2.5,1,90,11,60.5\n"
             "\n"
             "3,2.5,3.5,1,0,0.5,0\n");
  const auto p = load_plots(d / "p.csv");
  ASSERT_EQ(p.size(), 3u);
  EXPECT_EQ(p[1].location.id, 2);
  EXPECT_DOUBLE_EQ(p[1].v_tc, 60.5);
  EXPECT_DOUBLE_EQ(p[0].y, 120.5);
  EXPECT_EQ(p[2].stratum, 1);
}

TEST(LoadPlots, ColumnOrderAndBomTolerated) {
  TempDir d;
  write_text(d / "p.csv",
             "\xEF\xBB\xBFv_tc_pct,id,x_ch_m,y_km,x_km,stratum,y_mgha\n"
             "# comment line\n"
             "50,9,3.5,2,1,0,33\n");
  const auto p = load_plots(d / "p.csv");
  ASSERT_EQ(p.size(), 1u);
  EXPECT_DOUBLE_EQ(p[0].location.x, 1.0);
  EXPECT_DOUBLE_EQ(p[0].x_ch, 3.5);
  EXPECT_DOUBLE_EQ(p[0].y, 33.0);
}

TEST(LoadPlots, StratumOutOfRangeReportsLine) {
  TempDir d;
  write_text(d / "p.csv",
             "id,x_km,y_km,stratum,y_mgha,x_ch_m,v_tc_pct\n"
             "1,0,0,0,1,1,1\n"
             "2,1,1,3,1,1,1\n");
  const auto issues = issues_of([&] { load_plots(d / "p.csv", 3); });
  ASSERT_EQ(issues.size(), 1u);
  EXPECT_TRUE(any_contains(issues, ":3")) << issues[0];
  EXPECT_TRUE(any_contains(issues, "stratum 3"));
}

TEST(LoadPlots, AggregatedReport) {
  TempDir d;
  write_text(d / "p.csv",
             "id,x_km,y_km,stratum,y_mgha,x_ch_m,v_tc_pct\n"
             "1,abc,0,0,1,1,1\n"
             "2,1,1,0,1,1,150\n"
             "2,1,2,0,1,1,10\n"
             "4,1,1,0,1\n");
  const auto issues = issues_of([&] { load_plots(d / "p.csv"); });
  EXPECT_GE(issues.size(), 4u);
  EXPECT_TRUE(any_contains(issues, ":2"));
  EXPECT_TRUE(any_contains(issues, ":3"));
  EXPECT_TRUE(any_contains(issues, "duplicate id 2"));
  EXPECT_TRUE(any_contains(issues, ":5"));
}

TEST(LoadPlots, MissingColumn) {
  TempDir d;
  write_text(d / "p.csv", "id,x_km,y_km,stratum,x_ch_m,v_tc_pct\n1,0,0,0,1,1\n");
  const auto issues = issues_of([&] { load_plots(d / "p.csv"); });
  EXPECT_TRUE(any_contains(issues, "y_mgha"));
  EXPECT_THROW(load_plots(d / "nope.csv"), std::exception);
}

TEST(LoadCells, MissingCoverRejected) {
  TempDir d;
  write_text(d / "c.csv", "id,x_km,y_km,stratum,v_tc_pct,area_ha\n1,0,0,0,,6.25\n2,0,1,0,10,0\n");
  const auto issues = issues_of([&] { load_cells(d / "c.csv"); });
  EXPECT_EQ(issues.size(), 2u);
  EXPECT_TRUE(any_contains(issues, "area_ha"));
}

TEST(Io, SimulatedRoundTrip) {
  TempDir d;
  auto sc = SimScenario::defaults();
  sc.n_plots = 880;
  sc.n_lidar = 1200;
  sc.cell_spacing_km = 5.0;
  sc.cell_truth = false;
  const auto sim = simulate(sc);
  write_plots(d / "plots.csv", sim.plots, "abc");
  write_lidar(d / "lidar.csv", sim.lidar);
  write_cells(d / "cells.csv", sim.cells);
  const auto p = load_plots(d / "plots.csv", 3);
  const auto l = load_lidar(d / "lidar.csv", 3);
  const auto c = load_cells(d / "cells.csv", 3);
  ASSERT_EQ(p.size(), 880u);
  ASSERT_EQ(l.size(), sim.lidar.size());
  ASSERT_EQ(c.size(), sim.cells.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_EQ(p[i].location.id, sim.plots[i].location.id);
    EXPECT_EQ(p[i].location.x, sim.plots[i].location.x);
    EXPECT_EQ(p[i].location.y, sim.plots[i].location.y);
    EXPECT_EQ(p[i].y, sim.plots[i].y);
    EXPECT_EQ(p[i].x_ch, sim.plots[i].x_ch);
    EXPECT_EQ(p[i].v_tc, sim.plots[i].v_tc);
    EXPECT_EQ(p[i].stratum, sim.plots[i].stratum);
  }
  for (std::size_t i = 0; i < l.size(); ++i) EXPECT_EQ(l[i].x_ch, sim.lidar[i].x_ch);
  for (std::size_t i = 0; i < c.size(); ++i) {
    EXPECT_EQ(c[i].v_tc, sim.cells[i].v_tc);
    EXPECT_EQ(c[i].cell_area, sim.cells[i].cell_area);
  }
  std::ifstream in(d / "plots.csv");
  std::string first;
  std::getline(in, first);
  EXPECT_EQ(first, "# fingerprint: abc");
}

namespace {
json minimal_config() {
  return json::parse(R"({"schema_version": 1, "seed": 42, "data": {"plots": "plots.csv"}})");
}
}  // namespace

TEST(Config, Defaults) {
  const auto c = parse_config(minimal_config(), "/base");
  EXPECT_EQ(c.mcmc.seed, 42u);
  EXPECT_EQ(c.prediction.seed, 42u);
  EXPECT_EQ(*c.plots, fs::path("/base/plots.csv"));
  EXPECT_FALSE(c.lidar);
  EXPECT_EQ(c.outcome_spec.variant, Variant::full);
  EXPECT_EQ(c.graph.m, 15u);
  EXPECT_EQ(c.prediction.mode, PredictionMode::independent);
}

TEST(Config, FullDocument) {
  auto j = minimal_config();
  j["model"] = {{"variant", "SM2"}, {"neighbors", 10}, {"ordering", "maxmin"}, {"duplicates", "jitter"}};
  j["mcmc"] = {{"n_iter", 500}, {"n_burn", 100}, {"thin", 2}, {"n_chains", 2}};
  j["prediction"] = {{"mode", "sequential"}, {"max_draws", 50}};
  j["priors"] = {{"decay", "uniform_range"}, {"outcome", {{"noise_scales", {1.0, 2.0}}}}};
  j["survey"] = {{"stratum_areas_ha", {{"0", 10.0}, {"1", 30.0}}}};
  j["threads"] = 3;
  const auto c = parse_config(j);
  EXPECT_EQ(c.outcome_spec.variant, Variant::sm2);
  EXPECT_EQ(c.graph.m, 10u);
  EXPECT_EQ(c.graph.ordering, OrderingRule::maxmin);
  EXPECT_EQ(c.duplicates, DuplicatePolicy::jitter);
  EXPECT_EQ(c.mcmc.retained_per_chain(), 200);
  EXPECT_EQ(c.prediction.mode, PredictionMode::sequential);
  EXPECT_EQ(c.prediction.max_draws, 50u);
  EXPECT_EQ(c.prediction.threads, 3);
  EXPECT_EQ(c.decay, DecayPrior::uniform_range);
  ASSERT_TRUE(c.outcome_priors.noise_scales);
  EXPECT_EQ(c.outcome_priors.noise_scales->size(), 2u);
  EXPECT_EQ(c.stratum_areas_ha.at(1), 30.0);
}

TEST(Config, ValidationIssuesAggregated) {
  auto j = minimal_config();
  j.erase("seed");
  j["bogus"] = 1;
  j["model"] = {{"variant", "SM9"}};
  j["mcmc"] = {{"n_iter", 10}, {"n_burn", 20}};
  const auto issues = issues_of([&] { parse_config(j); });
  EXPECT_TRUE(any_contains(issues, "seed"));
  EXPECT_TRUE(any_contains(issues, "bogus"));
  EXPECT_TRUE(any_contains(issues, "SM9"));
  EXPECT_TRUE(any_contains(issues, "mcmc"));
  auto v = minimal_config();
  v["schema_version"] = 2;
  EXPECT_TRUE(any_contains(issues_of([&] { parse_config(v); }), "schema_version"));
}

TEST(Config, FingerprintIgnoresThreadsAndOutput) {
  auto a = minimal_config();
  auto b = a;
  b["threads"] = 8;
  b["output"] = "/elsewhere";
  auto c = a;
  c["seed"] = 43;
  EXPECT_EQ(parse_config(a).fingerprint(), parse_config(b).fingerprint());
  EXPECT_NE(parse_config(a).fingerprint(), parse_config(c).fingerprint());
  EXPECT_EQ(parse_config(a).fingerprint().size(), 16u);
}

TEST(Config, LoadWithOverrides) {
  TempDir d;
  write_text(d / "cfg.json", "{\"schema_version\": 1, \"seed\": 5, \"data\": {\"plots\": \"p.csv\"}}");
  const auto c = load_config(d / "cfg.json", 9, 2, d / "out");
  EXPECT_EQ(c.mcmc.seed, 9u);
  EXPECT_EQ(c.threads, 2);
  EXPECT_EQ(c.output, fs::absolute(d / "out"));
  EXPECT_EQ(*c.plots, d / "p.csv");
  write_text(d / "bad.json", "{ not json");
  EXPECT_THROW(load_config(d / "bad.json"), ValidationError);
}

TEST(Checkpoint, RoundTrip) {
  TempDir d;
  CheckpointFile f;
  f.fingerprint = "0123456789abcdef";
  f.stage = Stage::covariate;
  f.variant = "SM3";
  auto& c = f.chain;
  c.chain = 2;
  c.iteration = 77;
  c.state = StageState::zeros(3, 1, 5);
  c.state.spatial << 1, 2, 3, 4, 5;
  c.state.theta = {1.5, 0.25};
  Rng rng(3, 1);
  rng.normal();
  c.rng_state = rng.state();
  c.step_sd = 0.123;
  c.post_accepted = 4;
  c.post_proposed = 9;
  c.samples.draws = {c.state, c.state};
  c.samples.loglik = Eigen::MatrixXd::Random(2, 5);
  c.samples.acceptance = 0.4;
  write_checkpoint(d / "x.ckpt", f);
  const auto g = read_checkpoint(d / "x.ckpt");
  EXPECT_EQ(g.fingerprint, f.fingerprint);
  EXPECT_EQ(g.stage, Stage::covariate);
  EXPECT_EQ(g.variant, "SM3");
  EXPECT_EQ(g.chain.chain, 2);
  EXPECT_EQ(g.chain.iteration, 77);
  EXPECT_EQ(g.chain.state.spatial, c.state.spatial);
  EXPECT_EQ(g.chain.state.theta.phi, 0.25);
  EXPECT_EQ(g.chain.rng_state, c.rng_state);
  EXPECT_EQ(g.chain.samples.draws.size(), 2u);
  EXPECT_EQ(g.chain.samples.loglik, c.samples.loglik);
  EXPECT_EQ(g.chain.samples.acceptance, 0.4);
  write_text(d / "junk.ckpt", "hello");
  EXPECT_THROW(read_checkpoint(d / "junk.ckpt"), ValidationError);
}

TEST(Draws, RoundTrip) {
  TempDir d;
  PredictiveSamples ps;
  ps.draw_index = {0, 3, 6};
  ps.x = Eigen::MatrixXd::Random(3, 7);
  ps.y = Eigen::MatrixXd::Random(3, 7);
  write_draws(d / "d.bin", ps, "fedcba9876543210");
  const auto r = read_draws(d / "d.bin");
  EXPECT_EQ(r.draw_index, ps.draw_index);
  EXPECT_EQ(r.x, ps.x);
  EXPECT_EQ(r.y, ps.y);
}
