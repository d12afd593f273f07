#ifndef SAE_COMMANDS_HPP
#define SAE_COMMANDS_HPP

// The workflow commands: simulate, fit, select, predict, estimate, survey,
// compare and stability. Each reads a RunConfig and writes tables into the
// output directory.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "sae/diagnostics.hpp"
#include "sae/error.hpp"
#include "sae/io.hpp"
#include "sae/model.hpp"
#include "sae/predict.hpp"
#include "sae/sampler.hpp"
#include "sae/selection.hpp"
#include "sae/simulate.hpp"
#include "sae/survey.hpp"

namespace sae {

namespace detail {

inline fs::path require_path(const std::optional<fs::path>& p, const char* what) {
  if (!p) throw InvalidArgument(std::string("config.data.") + what + " is required for this command");
  if (!fs::exists(*p)) throw InvalidArgument(std::string("config.data.") + what + ": file not found: " + p->string());
  return *p;
}

inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string s((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(s);
}

/// Fingerprint of everything that determines the chains: seed, data content,
/// model and priors, and sampler settings.
inline std::string fit_fingerprint(const RunConfig& cfg) {
  json j;
  for (const char* k : {"seed", "model", "priors", "mcmc"})
    if (cfg.raw.contains(k)) j[k] = cfg.raw[k];
  if (cfg.plots && fs::exists(*cfg.plots)) j["plots"] = file_hash(*cfg.plots);
  if (cfg.lidar && fs::exists(*cfg.lidar)) j["lidar"] = file_hash(*cfg.lidar);
  j["num_strata"] = cfg.num_strata;
  return fnv1a_hex(j.dump());
}

inline void apply_overrides(Priors& pr, const StagePriorOverrides& o, const std::string& stage) {
  auto assign = [&](Eigen::VectorXd& dst, const std::vector<double>& src, const char* name) {
    if (static_cast<Eigen::Index>(src.size()) != dst.size())
      throw InvalidArgument("priors." + stage + "." + name + ": expected " + std::to_string(dst.size()) + " values");
    for (std::size_t k = 0; k < src.size(); ++k) dst(static_cast<Eigen::Index>(k)) = src[k];
  };
  if (o.noise_scales) assign(pr.noise_scales, *o.noise_scales, "noise_scales");
  if (o.effect_scales) assign(pr.effect_scales, *o.effect_scales, "effect_scales");
  if (o.spatial_scale) pr.spatial_scale = *o.spatial_scale;
}

inline Priors stage_priors(const RunConfig& cfg, const StageData& data, const StagePriorOverrides& o,
                           const std::string& stage) {
  Priors pr = default_priors(eda_summary(data), data.num_strata, data.p(), cfg.range_min_km, cfg.range_max_km);
  pr.decay = cfg.decay;
  apply_overrides(pr, o, stage);
  pr.validate();
  return pr;
}

template <class Rec>
void apply_duplicates(std::vector<Rec>& recs, DuplicatePolicy policy, std::uint64_t seed) {
  std::vector<Location> locs;
  for (const auto& r : recs) locs.push_back(r.location);
  apply_duplicate_policy(locs, policy, seed);
  for (std::size_t i = 0; i < recs.size(); ++i) recs[i].location = locs[i];
}

}  // namespace detail

/// Loaded and validated inputs with the stratum count resolved.
struct Workspace {
  std::vector<PlotRecord> plots;
  std::vector<LidarRecord> lidar;
  std::vector<PredictionCell> cells;
  int q = 0;
};

inline Workspace load_workspace(const RunConfig& cfg, bool plots, bool lidar, bool cells) {
  Workspace ws;
  if (plots) ws.plots = load_plots(detail::require_path(cfg.plots, "plots"), cfg.num_strata);
  if (lidar) ws.lidar = load_lidar(detail::require_path(cfg.lidar, "lidar"), cfg.num_strata);
  if (cells) ws.cells = load_cells(detail::require_path(cfg.cells, "cells"), cfg.num_strata);
  if (plots && ws.plots.empty()) throw ValidationError({"plots file has no records"});
  if (lidar && ws.lidar.empty()) throw ValidationError({"lidar file has no records"});
  if (cells && ws.cells.empty()) throw ValidationError({"cells file has no records"});
  ws.q = cfg.num_strata;
  if (ws.q <= 0) {
    int mx = -1;
    for (const auto& r : ws.plots) mx = std::max(mx, r.stratum);
    for (const auto& r : ws.lidar) mx = std::max(mx, r.stratum);
    for (const auto& r : ws.cells) mx = std::max(mx, r.stratum);
    ws.q = mx + 1;
  }
  detail::apply_duplicates(ws.plots, cfg.duplicates, cfg.mcmc.seed);
  detail::apply_duplicates(ws.lidar, cfg.duplicates, cfg.mcmc.seed + 1);
  return ws;
}

inline StageModel outcome_model(const RunConfig& cfg, const Workspace& ws, const SubmodelSpec& spec) {
  StageData d = outcome_data(ws.plots, ws.q, spec.include_x);
  Priors pr = detail::stage_priors(cfg, d, cfg.outcome_priors, "outcome");
  return StageModel(Stage::outcome, spec, std::move(d), std::move(pr), cfg.graph);
}

inline StageModel covariate_model(const RunConfig& cfg, const Workspace& ws) {
  StageData d = covariate_data(ws.lidar, ws.q);
  Priors pr = detail::stage_priors(cfg, d, cfg.covariate_priors, "covariate");
  SubmodelSpec spec = cfg.covariate_spec;
  spec.include_x = true;  // v_tc is the covariate stage predictor
  return StageModel(Stage::covariate, spec, std::move(d), std::move(pr), cfg.graph);
}

inline fs::path checkpoint_path(const fs::path& dir, Stage stage, int chain) {
  return dir / (std::string(stage_name(stage)) + "_chain" + std::to_string(chain) + ".ckpt");
}

/// Runs (or resumes) every chain of one stage, writing a checkpoint per chain.
inline Posterior fit_stage(const StageModel& model, const RunConfig& cfg, const std::string& fingerprint) {
  Posterior post;
  post.stage = model.stage();
  post.spec = model.spec();
  post.chains.resize(static_cast<std::size_t>(cfg.mcmc.n_chains));
  const std::string variant = model.spec().name();
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::mutex mu;
  auto work = [&] {
    for (int c = next++; c < cfg.mcmc.n_chains; c = next++) {
      try {
        const fs::path path = checkpoint_path(cfg.output, model.stage(), c);
        std::optional<ChainCheckpoint> resume;
        if (fs::exists(path)) {
          try {
            auto f = read_checkpoint(path);
            if (f.fingerprint == fingerprint && f.variant == variant && f.chain.chain == c &&
                f.chain.iteration <= cfg.mcmc.n_iter)
              resume = std::move(f.chain);
          } catch (const std::exception&) {
          }
        }
        auto runner = resume ? ChainRunner(model, cfg.mcmc, std::move(*resume)) : ChainRunner(model, cfg.mcmc, c);
        while (!runner.done()) {
          runner.advance(cfg.checkpoint_every > 0 ? cfg.checkpoint_every : -1);
          if (!runner.done()) write_checkpoint(path, {fingerprint, model.stage(), variant, runner.checkpoint()});
        }
        write_checkpoint(path, {fingerprint, model.stage(), variant, runner.checkpoint()});
        post.chains[static_cast<std::size_t>(c)] = runner.result();
      } catch (...) {
        std::lock_guard lock(mu);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int nt = std::clamp(cfg.threads, 1, cfg.mcmc.n_chains);
  if (nt == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < nt; ++t) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  if (error) std::rethrow_exception(error);
  return post;
}

/// Reads a finished stage fit back from its checkpoints.
inline Posterior load_stage(const StageModel& model, const RunConfig& cfg, const std::string& fingerprint) {
  Posterior post;
  post.stage = model.stage();
  post.spec = model.spec();
  for (int c = 0; c < cfg.mcmc.n_chains; ++c) {
    const fs::path path = checkpoint_path(cfg.output, model.stage(), c);
    if (!fs::exists(path)) throw InvalidArgument("missing checkpoint " + path.string() + " (run fit first)");
    auto f = read_checkpoint(path);
    if (f.fingerprint != fingerprint || f.variant != model.spec().name())
      throw InvalidArgument("checkpoint " + path.string() + " was produced by a different configuration (run fit again)");
    if (f.chain.iteration < cfg.mcmc.n_iter)
      throw InvalidArgument("checkpoint " + path.string() + " is incomplete (iteration " +
                            std::to_string(f.chain.iteration) + "); rerun fit to resume");
    post.chains.push_back(std::move(f.chain.samples));
  }
  return post;
}

namespace detail {

inline void write_param_rows(TableWriter& w, const Posterior& post) {
  for (const auto& p : summarize_posterior(post))
    w.row({stage_name(post.stage), p.name, fmt(p.summary.mean, 10), fmt(p.summary.sd, 10), fmt(p.summary.lo, 10),
           fmt(p.summary.hi, 10), p.has_rhat ? fmt(p.rhat.rhat, 6) : "NaN", p.rhat.degenerate ? "1" : "0"});
}

inline void write_chain_rows(TableWriter& w, const Posterior& post) {
  for (std::size_t c = 0; c < post.chains.size(); ++c) {
    const auto& ch = post.chains[c];
    w.row({stage_name(post.stage), std::to_string(c), std::to_string(ch.size()), fmt(ch.acceptance, 6),
           fmt(ch.burnin_acceptance, 6), fmt(ch.step_sd, 6)});
  }
}

}  // namespace detail

// -------------------------------------------------------------- commands

inline SimScenario scenario_from_config(const RunConfig& cfg) {
  SimScenario sc = SimScenario::defaults();
  sc.seed = cfg.mcmc.seed;
  if (!cfg.raw.contains("simulation")) return sc;
  const json& j = cfg.raw["simulation"];
  std::vector<std::string> issues;
  detail::reject_unknown(j, "config.simulation",
                         {"width_km", "height_km", "q", "n_seeds", "n_plots", "n_lidar", "flight_lines_x",
                          "line_half_width_km", "cell_spacing_km", "tree_cover_sigma2", "tree_cover_phi",
                          "tree_cover_logit_mean", "gp_mode", "nngp_m", "cell_truth", "outcome", "covariate"},
                         issues);
  const std::string w = "config.simulation";
  detail::get_to(j, "width_km", sc.width_km, w, issues);
  detail::get_to(j, "height_km", sc.height_km, w, issues);
  detail::get_to(j, "n_seeds", sc.n_seeds, w, issues);
  detail::get_to(j, "n_plots", sc.n_plots, w, issues);
  detail::get_to(j, "n_lidar", sc.n_lidar, w, issues);
  detail::get_to(j, "flight_lines_x", sc.flight_lines_x, w, issues);
  detail::get_to(j, "line_half_width_km", sc.line_half_width_km, w, issues);
  detail::get_to(j, "cell_spacing_km", sc.cell_spacing_km, w, issues);
  detail::get_to(j, "tree_cover_sigma2", sc.tree_cover_field.sigma2, w, issues);
  detail::get_to(j, "tree_cover_phi", sc.tree_cover_field.phi, w, issues);
  detail::get_to(j, "tree_cover_logit_mean", sc.tree_cover_logit_mean, w, issues);
  detail::get_to(j, "nngp_m", sc.nngp_m, w, issues);
  detail::get_to(j, "cell_truth", sc.cell_truth, w, issues);
  std::string mode = "auto";
  detail::get_to(j, "gp_mode", mode, w, issues);
  if (mode == "auto") sc.gp_mode = GpMode::automatic;
  else if (mode == "dense") sc.gp_mode = GpMode::dense;
  else if (mode == "nngp") sc.gp_mode = GpMode::nngp;
  else issues.push_back("config.simulation.gp_mode: expected auto, dense or nngp");
  if (j.contains("q")) {
    detail::get_to(j, "q", sc.q, w, issues);
    if (sc.q != 3 && !(j.contains("outcome") && j.contains("covariate")))
      issues.push_back("config.simulation: q other than 3 needs explicit outcome and covariate truth");
  }
  auto truth = [&](const char* key, StageState& st) {
    if (!j.contains(key)) return;
    const json& t = j[key];
    const std::string where = w + "." + key;
    detail::reject_unknown(t, where,
                           {"intercept", "stratum_intercepts", "slope", "stratum_slopes", "noise_variances", "sigma2", "phi"},
                           issues);
    StageState s = StageState::zeros(sc.q, 1, 0);
    double slope = st.slopes.size() ? st.slopes(0) : 0.0;
    std::vector<double> a(static_cast<std::size_t>(sc.q), 0.0), b = a, nv(static_cast<std::size_t>(sc.q), 1.0);
    s.intercept = st.intercept;
    s.theta = st.theta;
    if (st.q() == sc.q)
      for (int k = 0; k < sc.q; ++k) {
        a[static_cast<std::size_t>(k)] = st.stratum_intercepts(k);
        b[static_cast<std::size_t>(k)] = st.stratum_slopes(k);
        nv[static_cast<std::size_t>(k)] = st.noise_variances(k);
      }
    detail::get_to(t, "intercept", s.intercept, where, issues);
    detail::get_to(t, "slope", slope, where, issues);
    detail::get_to(t, "stratum_intercepts", a, where, issues);
    detail::get_to(t, "stratum_slopes", b, where, issues);
    detail::get_to(t, "noise_variances", nv, where, issues);
    detail::get_to(t, "sigma2", s.theta.sigma2, where, issues);
    detail::get_to(t, "phi", s.theta.phi, where, issues);
    if (a.size() != static_cast<std::size_t>(sc.q) || b.size() != a.size() || nv.size() != a.size()) {
      issues.push_back(where + ": stratum vectors need q entries");
      return;
    }
    s.slopes(0) = slope;
    for (int k = 0; k < sc.q; ++k) {
      s.stratum_intercepts(k) = a[static_cast<std::size_t>(k)];
      s.stratum_slopes(k) = b[static_cast<std::size_t>(k)];
      s.noise_variances(k) = nv[static_cast<std::size_t>(k)];
    }
    st = s;
  };
  truth("outcome", sc.outcome);
  truth("covariate", sc.covariate);
  if (!issues.empty()) throw ValidationError(issues);
  sc.validate();
  return sc;
}

inline void cmd_simulate(const RunConfig& cfg) {
  const SimScenario sc = scenario_from_config(cfg);
  const auto data = simulate(sc);
  const std::string fp = cfg.fingerprint();
  fs::create_directories(cfg.output);
  write_plots(cfg.output / "plots.csv", data.plots, fp);
  write_lidar(cfg.output / "lidar.csv", data.lidar, fp);
  write_cells(cfg.output / "cells.csv", data.cells, fp);
  {
    TableWriter w(cfg.output / "truth.csv", {"stage", "parameter", "value"}, fp);
    const auto full = SubmodelSpec::make(Variant::full);
    for (const auto& v : flatten_parameters(data.truth.outcome, Stage::outcome, full))
      w.row({"outcome", v.name, detail::fmt(v.value)});
    for (const auto& v : flatten_parameters(data.truth.covariate, Stage::covariate, full))
      w.row({"covariate", v.name, detail::fmt(v.value)});
  }
  if (sc.cell_truth) {
    TableWriter w(cfg.output / "cell_truth.csv", {"id", "x_ch_m", "y_mgha", "u", "w"}, fp);
    for (std::size_t k = 0; k < data.cells.size(); ++k) {
      const auto kk = static_cast<Eigen::Index>(k);
      w.row({std::to_string(data.cells[k].location.id), detail::fmt(data.truth.cell_x(kk)),
             detail::fmt(data.truth.cell_y(kk)), detail::fmt(data.truth.cell_u(kk)), detail::fmt(data.truth.cell_w(kk))});
    }
  }
}

inline void cmd_fit(const RunConfig& cfg) {
  const Workspace ws = load_workspace(cfg, true, cfg.outcome_spec.include_x, false);
  fs::create_directories(cfg.output);
  const std::string ffp = detail::fit_fingerprint(cfg);
  const StageModel out_model = outcome_model(cfg, ws, cfg.outcome_spec);
  const Posterior out_post = fit_stage(out_model, cfg, ffp);
  std::optional<Posterior> cov_post;
  if (cfg.outcome_spec.include_x) cov_post = fit_stage(covariate_model(cfg, ws), cfg, ffp);

  const std::string fp = cfg.fingerprint();
  {
    TableWriter w(cfg.output / "params_summary.csv",
                  {"stage", "parameter", "mean", "sd", "q2.5", "q97.5", "rhat", "rhat_degenerate"}, fp);
    detail::write_param_rows(w, out_post);
    if (cov_post) detail::write_param_rows(w, *cov_post);
  }
  TableWriter w(cfg.output / "chains.csv",
                {"stage", "chain", "retained", "acceptance", "burnin_acceptance", "step_sd"}, fp);
  detail::write_chain_rows(w, out_post);
  if (cov_post) detail::write_chain_rows(w, *cov_post);
}

inline void cmd_select(const RunConfig& cfg) {
  const Workspace ws = load_workspace(cfg, true, false, false);
  std::vector<FitReport> reports;
  for (Variant v : SubmodelSpec::all_variants()) {
    const StageModel m = outcome_model(cfg, ws, SubmodelSpec::make(v));
    reports.push_back(fit_report(m, run_chains(m, cfg.mcmc, cfg.threads)));
  }
  const Ranking rk = rank_models(reports);
  auto rank_of = [](const std::vector<std::size_t>& order, std::size_t i) {
    return std::to_string(std::find(order.begin(), order.end(), i) - order.begin() + 1);
  };
  fs::create_directories(cfg.output);
  TableWriter w(cfg.output / "selection.csv",
                {"model", "dic", "p_d", "waic1", "p1", "waic2", "p2", "lppd", "rmse", "rank_dic", "rank_waic1",
                 "rank_waic2", "rank_rmse"},
                cfg.fingerprint());
  using detail::fmt;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    const auto& r = reports[i];
    w.row({r.model, fmt(r.dic, 10), fmt(r.p_d, 10), fmt(r.waic1, 10), fmt(r.p1, 10), fmt(r.waic2, 10), fmt(r.p2, 10),
           fmt(r.lppd, 10), fmt(r.rmse, 10), rank_of(rk.dic, i), rank_of(rk.waic1, i), rank_of(rk.waic2, i),
           rank_of(rk.rmse, i)});
  }
}

inline void cmd_predict(const RunConfig& cfg) {
  const bool with_x = cfg.outcome_spec.include_x;
  const Workspace ws = load_workspace(cfg, true, with_x, true);
  const std::string ffp = detail::fit_fingerprint(cfg);
  const StageModel out_model = outcome_model(cfg, ws, cfg.outcome_spec);
  const Posterior out_post = load_stage(out_model, cfg, ffp);
  PredictiveSamples ps;
  if (with_x) {
    const StageModel cov_model = covariate_model(cfg, ws);
    const Posterior cov_post = load_stage(cov_model, cfg, ffp);
    ps = predict_two_stage(ws.cells, cov_model, cov_post, out_model, out_post, cfg.prediction);
  } else {
    ps.draw_index = select_draws(out_post.size(), cfg.prediction.max_draws);
    ps.x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(ps.draw_index.size()), static_cast<Eigen::Index>(ws.cells.size()));
    ps.y = predict_outcome(ws.cells, out_model, out_post, ps.draw_index, ps.x, cfg.prediction);
  }
  const std::string fp = cfg.fingerprint();
  write_draws(cfg.output / "prediction_draws.bin", ps, fp);
  const auto xs = cell_summaries(ps.x);
  const auto ys = cell_summaries(ps.y);
  TableWriter w(cfg.output / "predictions.csv",
                {"id", "x_km", "y_km", "stratum", "x_mean", "x_sd", "x_q2.5", "x_q97.5", "y_mean", "y_sd", "y_q2.5",
                 "y_q97.5"},
                fp);
  using detail::fmt;
  for (std::size_t k = 0; k < ws.cells.size(); ++k) {
    const auto& c = ws.cells[k];
    w.row({std::to_string(c.location.id), fmt(c.location.x), fmt(c.location.y), std::to_string(c.stratum),
           fmt(xs[k].mean, 10), fmt(xs[k].sd, 10), fmt(xs[k].lo, 10), fmt(xs[k].hi, 10), fmt(ys[k].mean, 10),
           fmt(ys[k].sd, 10), fmt(ys[k].lo, 10), fmt(ys[k].hi, 10)});
  }
}

namespace detail {

inline std::pair<std::vector<PredictionCell>, PredictiveSamples> load_predictions(const RunConfig& cfg) {
  auto cells = load_cells(require_path(cfg.cells, "cells"), cfg.num_strata);
  auto ps = read_draws(cfg.output / "prediction_draws.bin");
  if (ps.y.cols() != static_cast<Eigen::Index>(cells.size()))
    throw InvalidArgument("prediction_draws.bin does not match the cells file (rerun predict)");
  return {std::move(cells), std::move(ps)};
}

inline PostStratResult design_estimate(const RunConfig& cfg, const std::vector<PlotRecord>& plots,
                                       const std::vector<PredictionCell>& cells) {
  std::map<int, double> areas = cfg.stratum_areas_ha;
  if (areas.empty())
    for (const auto& c : cells) areas[c.stratum] += c.cell_area;
  if (areas.empty()) throw InvalidArgument("survey: stratum areas need config.survey.stratum_areas_ha or a cells file");
  std::map<int, std::vector<double>> values;
  for (const auto& p : plots) {
    if (!areas.count(p.stratum)) throw InvalidArgument("survey: plot stratum " + std::to_string(p.stratum) + " has no area");
    values[p.stratum].push_back(p.y);
  }
  std::vector<StratumData> strata;
  for (const auto& [j, a] : areas) strata.push_back({j, a, values[j]});
  return post_stratified(strata);
}

}  // namespace detail

inline void cmd_estimate(const RunConfig& cfg) {
  const auto [cells, ps] = detail::load_predictions(cfg);
  TableWriter w(cfg.output / "estimates.csv",
                {"scope", "n_cells", "area_ha", "density_mean", "density_sd", "density_q2.5", "density_q97.5",
                 "total_mean", "total_sd", "total_q2.5", "total_q97.5", "negative_fraction"},
                cfg.fingerprint());
  using detail::fmt;
  for (const auto& e : aggregate_by_stratum(cells, ps.y))
    w.row({e.scope_name(), std::to_string(e.n_cells), fmt(e.area_ha, 12), fmt(e.density.mean, 10),
           fmt(e.density.sd, 10), fmt(e.density.lo, 10), fmt(e.density.hi, 10), fmt(e.total.mean, 12),
           fmt(e.total.sd, 12), fmt(e.total.lo, 12), fmt(e.total.hi, 12), fmt(e.negative_fraction, 6)});
}

inline void cmd_survey(const RunConfig& cfg) {
  const auto plots = load_plots(detail::require_path(cfg.plots, "plots"), cfg.num_strata);
  std::vector<PredictionCell> cells;
  if (cfg.stratum_areas_ha.empty()) cells = load_cells(detail::require_path(cfg.cells, "cells"), cfg.num_strata);
  const auto r = detail::design_estimate(cfg, plots, cells);
  fs::create_directories(cfg.output);
  TableWriter w(cfg.output / "survey.csv", {"scope", "n", "area_ha", "weight", "mean", "se", "total", "total_se"},
                cfg.fingerprint());
  using detail::fmt;
  for (const auto& s : r.strata)
    w.row({std::to_string(s.stratum), std::to_string(s.n), fmt(s.area_ha, 12), fmt(s.weight, 12), fmt(s.mean, 10),
           fmt(s.se, 10), fmt(s.total, 12), fmt(s.total_se, 12)});
  w.row({"ALL", std::to_string(r.n), fmt(r.area_ha, 12), "1", fmt(r.mean, 10), fmt(r.se, 10), fmt(r.total, 12),
         fmt(r.total_se, 12)});
}

inline void cmd_compare(const RunConfig& cfg) {
  const auto [cells, ps] = detail::load_predictions(cfg);
  const auto plots = load_plots(detail::require_path(cfg.plots, "plots"), cfg.num_strata);
  const auto design = detail::design_estimate(cfg, plots, cells);
  const auto rows = compare(aggregate_by_stratum(cells, ps.y), design);
  TableWriter w(cfg.output / "comparison.csv",
                {"scope", "design_mean", "design_se", "model_mean", "model_sd", "density_diff", "sd_ratio",
                 "design_total", "design_total_se", "model_total", "model_total_sd", "total_diff"},
                cfg.fingerprint());
  using detail::fmt;
  for (const auto& r : rows)
    w.row({r.scope, fmt(r.design_mean, 10), fmt(r.design_se, 10), fmt(r.model_mean, 10), fmt(r.model_sd, 10),
           fmt(r.density_diff, 10), fmt(r.sd_ratio, 10), fmt(r.design_total, 12), fmt(r.design_total_se, 12),
           fmt(r.model_total, 12), fmt(r.model_total_sd, 12), fmt(r.total_diff, 12)});
}

inline void cmd_stability(const RunConfig& cfg) {
  const auto [cells, ps] = detail::load_predictions(cfg);
  TableWriter w(cfg.output / "stability.csv",
                {"ha_per_location", "spacing_m", "scope", "n_cells", "density_mean", "density_sd"}, cfg.fingerprint());
  using detail::fmt;
  for (const auto& r : grid_stability_sweep(cells, ps.y, cfg.stability_ha))
    w.row({fmt(r.ha_per_location, 10), fmt(r.spacing_m, 10), r.scope == kAllStrata ? "ALL" : std::to_string(r.scope),
           std::to_string(r.n_cells), fmt(r.density_mean, 10), fmt(r.density_sd, 10)});
}

inline const std::map<std::string, std::function<void(const RunConfig&)>>& command_table() {
  static const std::map<std::string, std::function<void(const RunConfig&)>> t{
      {"simulate", cmd_simulate}, {"fit", cmd_fit},         {"select", cmd_select},   {"predict", cmd_predict},
      {"estimate", cmd_estimate}, {"survey", cmd_survey},   {"compare", cmd_compare}, {"stability", cmd_stability}};
  return t;
}

/// Machine-readable error record for a failed command.
inline json error_record(const std::string& command, const std::exception& e) {
  json j;
  j["command"] = command;
  j["message"] = e.what();
  if (const auto* v = dynamic_cast<const ValidationError*>(&e)) {
    j["type"] = "validation";
    j["issues"] = v->issues();
  } else if (const auto* s = dynamic_cast<const SamplerError*>(&e)) {
    j["type"] = "sampler";
    j["iteration"] = s->iteration();
  } else if (dynamic_cast<const FactorizationError*>(&e)) {
    j["type"] = "factorization";
  } else if (dynamic_cast<const std::invalid_argument*>(&e)) {
    j["type"] = "invalid_argument";
  } else {
    j["type"] = "runtime";
  }
  return {{"error", j}};
}

inline int exit_code(const json& rec) {
  const std::string t = rec["error"]["type"];
  if (t == "validation" || t == "invalid_argument") return 2;
  if (t == "sampler" || t == "factorization") return 3;
  return 1;
}

/// Runs a command by name; failures print one JSON error line to `err` and
/// return a non-zero status.
inline int run_command(const std::string& name, const std::function<RunConfig()>& load, std::ostream& err = std::cerr) {
  const auto& t = command_table();
  auto it = t.find(name);
  try {
    if (it == t.end()) throw InvalidArgument("unknown command '" + name + "'");
    it->second(load());
    return 0;
  } catch (const std::exception& e) {
    const json rec = error_record(name, e);
    err << rec.dump() << std::endl;
    return exit_code(rec);
  }
}

}  // namespace sae

#endif  // SAE_COMMANDS_HPP
