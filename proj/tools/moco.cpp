// Command-line front end: simulate, train, correct, fit, evaluate, classify,
// sweep-lambda, gradcheck. Errors end the process with one line on stderr,
// "error: <kind>: <message>", and a nonzero status.

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "moco/io.hpp"
#include "moco/model_check.hpp"
#include "moco/pipeline.hpp"

namespace {

using namespace moco;

constexpr int kExitError = 2;
constexpr int kExitInternal = 3;
constexpr int kExitCheckFailed = 4;

std::string one_line(std::string s) {
  for (auto& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void log_config(const fs::path& out, const std::string& command, json cfg) {
  cfg["command"] = command;
  write_file_atomic(out / (command + "_config.json"), dump_json(cfg));
}

TrainConfig load_train_config(const std::string& path) {
  if (path.empty()) return desk_train_config();
  return train_config_from_json(read_json(path), desk_train_config());
}

// ---------------------------------------------------------------------------

struct SimulateOpts {
  std::string config, out;
  std::uint64_t seed = 0;
};

int cmd_simulate(const SimulateOpts& o) {
  json j = o.config.empty() ? json::object() : read_json(o.config);
  const auto x = experiment_from_json(j);
  const fs::path out = o.out;
  const auto truth = phantom_truth(x.phantom);
  const auto kin = x.kinetics();
  const auto series = simulate_frames(x.phantom, kin.ifn, x.timing(), x.noise_sigma, o.seed);
  MotionSpec motion = j.contains("motion") ? motion_from_json(j["motion"])
                                           : random_motion(series, x.reference(), x.max_shift_vox, x.max_strain,
                                                           x.motion_centre(), x.envelope_sigma, o.seed);
  const auto moved = inject_motion(series, motion);

  write_series(out / "motion_free.json", series);
  write_series(out / "motion.json", moved.moved);
  write_csv(out / "input_function.csv", input_function_table(kin.ifn));
  const auto mm = x.phantom.voxel_mm;
  write_volume(out / "truth" / "ki.json", stack_container<double>({truth.ki}, mm, "1/min"));
  write_volume(out / "truth" / "vb.json", stack_container<double>({truth.vb}, mm, "fraction"));
  write_volume(out / "truth" / "label.json", stack_container<std::uint8_t>({truth.label}, mm, "label"));
  write_volume(out / "truth" / "correct_fields.json", stack_container(moved.correct_fields, mm, "voxel"));
  write_volume(out / "truth" / "motion_fields.json", stack_container(moved.motion_fields, mm, "voxel"));

  json sim = to_json(x);
  sim["motion"] = to_json(motion);
  sim["seed"] = o.seed;
  write_file_atomic(out / "simulation.json", dump_json(sim));
  log_config(out, "simulate", {{"config", o.config}, {"out", o.out}, {"seed", o.seed}, {"resolved", sim}});
  std::cout << "simulated " << series.size() << " frames on " << extent_str(series.extent) << " into " << o.out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct TrainOpts {
  std::vector<std::string> series;
  std::string config, out, init = "random";
  std::optional<int> epochs;
  std::optional<double> lr, lambda;
  std::optional<std::uint64_t> seed;
};

int cmd_train(const TrainOpts& o) {
  auto tc = load_train_config(o.config);
  if (o.epochs) tc.epochs = *o.epochs;
  if (o.lr) tc.learning_rate = *o.lr;
  if (o.lambda) tc.lambda = *o.lambda;
  if (o.seed) tc.seed = *o.seed;
  tc.validate();
  std::vector<FrameSeries> data;
  for (const auto& p : o.series) data.push_back(read_series(p));
  for (const auto& s : data)
    if (s.extent != data.front().extent) throw DimensionError("training series have different grids");
  NetConfig nc;
  nc.variant = tc.variant;
  nc.extent = working_extent(data.front().extent, tc.downsample_factor);
  auto p0 = init_params<float>(nc, tc.seed);
  if (o.init == "identity") zero_flow_head(p0);
  const auto r = train(std::move(p0), data, tc);
  const fs::path out = o.out;
  write_checkpoint(out / "checkpoint.json", r.params);
  write_csv(out / "loss.csv", loss_table(r.trace));
  log_config(out, "train", {{"series", o.series}, {"config", o.config}, {"init", o.init}, {"out", o.out},
                            {"resolved", to_json(tc)}});
  std::cout << "trained " << r.steps << " steps";
  if (!r.trace.empty()) std::cout << ", final mean loss " << fmt_num(r.trace.back().mean_loss);
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct CorrectOpts {
  std::string checkpoint, series, config, out;
};

int cmd_correct(const CorrectOpts& o) {
  const auto tc = load_train_config(o.config);
  const auto params = read_checkpoint(o.checkpoint);
  if (params.config.variant != tc.variant)
    throw ConfigError(std::string("checkpoint variant ") + variant_name(params.config.variant) +
                      " differs from config variant " + variant_name(tc.variant));
  const auto s = read_series(o.series);
  const auto c = apply(params, s, tc);
  const fs::path out = o.out;
  write_series(out / "corrected.json", c.corrected);
  write_volume(out / "fields.json", stack_container(c.fields, s.voxel_mm, "voxel"));
  log_config(out, "correct", {{"checkpoint", o.checkpoint}, {"series", o.series}, {"config", o.config},
                              {"out", o.out}, {"resolved", to_json(tc)}});
  std::cout << "corrected " << c.corrected.size() << " frames\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct FitOpts {
  std::string series, input_function, out;
  double t_star = 20.0, half_life = 109.77, min_activity = 1e-6;
};

int cmd_fit(const FitOpts& o) {
  const auto s = read_series(o.series);
  const auto ifn = read_input_function(o.input_function);
  const WeightModel wm{o.half_life, true};
  if (!(o.half_life > 0.0)) throw ConfigError("half-life must be positive");
  const auto m = parametric_maps(s, ifn, o.t_star, wm, o.min_activity);
  const fs::path out = o.out;
  write_volume(out / "ki.json", stack_container<double>({m.ki}, s.voxel_mm, "1/min"));
  write_volume(out / "vb.json", stack_container<double>({m.vb}, s.voxel_mm, "fraction"));
  write_volume(out / "nfe.json", stack_container<double>({m.nfe}, s.voxel_mm, "ratio"));
  write_volume(out / "degenerate.json", stack_container<std::uint8_t>({m.degenerate}, s.voxel_mm, "mask"));
  log_config(out, "fit", {{"series", o.series}, {"input_function", o.input_function}, {"t_star", o.t_star},
                          {"half_life_min", o.half_life}, {"min_activity", o.min_activity}, {"out", o.out}});
  std::cout << "fitted " << m.valid_count() << " of " << s.extent.voxels() << " voxels\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct EvaluateOpts {
  std::string sim, corrected, fields, out;
  int ncc_window = 9;
};

int cmd_evaluate(const EvaluateOpts& o) {
  const fs::path sim = o.sim;
  const json sj = read_json(sim / "simulation.json");
  json sim_cfg = sj;
  sim_cfg.erase("motion");
  sim_cfg.erase("seed");
  const auto x = experiment_from_json(sim_cfg);
  const auto truth = phantom_truth(x.phantom);
  const KineticsSetup kin{read_input_function(sim / "input_function.csv"), x.t_star, WeightModel{}};
  const auto mf = read_series(sim / "motion_free.json");
  const auto mo = read_series(sim / "motion.json");
  if (mf.extent != x.phantom.extent) throw DimensionError("simulation grid differs from its phantom");

  std::vector<std::pair<std::string, FrameSeries>> conds{{"motion-free", mf}, {"motion", mo}};
  if (!o.corrected.empty()) conds.emplace_back("corrected", read_series(o.corrected));
  const fs::path out = o.out;
  json report;
  report["conditions"] = json::array();
  std::vector<ConditionMetrics> cms;
  for (const auto& [name, s] : conds) {
    if (s.extent != mf.extent || s.size() != mf.size()) throw DimensionError(name + " series does not match the simulation");
    ParametricMaps maps;
    cms.push_back(condition_metrics(name, s, kin, truth, &maps));
    report["conditions"].push_back(to_json(cms.back()));
    write_file_atomic(out / ("ki_" + name + ".pgm"), pgm_slice(maps.ki, 0.0, 0.03, "Ki " + name));
    write_file_atomic(out / ("vb_" + name + ".pgm"), pgm_slice(maps.vb, 0.0, 0.5, "Vb " + name));
    write_file_atomic(out / ("nfe_" + name + ".pgm"), pgm_slice(maps.nfe, 0.0, 1.0, "NFE " + name));
  }
  write_csv(out / "metrics.csv", condition_table(cms));

  const auto ref = x.reference();
  if (!o.fields.empty()) {
    const auto est = unstack_container(read_volume(o.fields));
    const auto tru = unstack_container(read_volume(sim / "truth" / "correct_fields.json"));
    const double epe = endpoint_error(tru, est, truth.body, ref);
    report["endpoint_error_vox"] = finite_or_null(epe);
    std::vector<Tensor<double>> zero(tru.size(), Tensor<double>(tru.front().shape()));
    report["uncorrected_endpoint_error_vox"] = finite_or_null(endpoint_error(tru, zero, truth.body, ref));
    if (!o.corrected.empty()) {
      // loss terms of every corrected frame against the reference, full resolution
      LossConfig lc;
      lc.ncc_window = o.ncc_window;
      lc.validate();
      const auto& cs = conds.back().second;
      CsvTable t{{"frame", "similarity_term", "smoothness_term"}, {}};
      json frames = json::array();
      for (std::size_t k = 0; k < cs.size(); ++k) {
        const double sim_t = -local_ncc(cs.frames[ref], cs.frames[k], lc);
        const double sm_t = smoothness(est.at(k));
        t.add({std::to_string(k), fmt_num(sim_t), fmt_num(sm_t)});
        frames.push_back({{"frame", k}, {"similarity_term", finite_or_null(sim_t)}, {"smoothness_term", finite_or_null(sm_t)}});
      }
      write_csv(out / "frame_loss.csv", t);
      report["frame_loss"] = frames;
    }
  }
  write_file_atomic(out / "metrics.json", dump_json(report));
  log_config(out, "evaluate", {{"sim", o.sim}, {"corrected", o.corrected}, {"fields", o.fields},
                               {"ncc_window", o.ncc_window}, {"out", o.out}});
  for (const auto& c : cms)
    std::cout << c.name << ": mean NFE " << fmt_num(c.mean_nfe) << ", tumour Ki mean " << fmt_num(c.tumour_ki.mean)
              << ", Ki/Vb NCC " << (c.ki_vb_ncc.defined ? fmt_num(c.ki_vb_ncc.value) : "undefined") << "\n";
  return 0;
}

// ---------------------------------------------------------------------------

struct ClassifyOpts {
  std::vector<std::string> features;  // name=path
  std::string out, checkpoint, sim_config;
  bool cohort = false;
  int folds = 5;
  std::uint64_t seed = 0;
};

int cmd_classify(const ClassifyOpts& o) {
  const fs::path out = o.out;
  std::map<std::string, std::vector<RoiRecord>> methods;
  if (o.cohort) {
    // phantom lesion cohort, corrected by the given network or one trained on the cohort
    const auto x = experiment_from_json(o.sim_config.empty() ? json::object() : read_json(o.sim_config));
    const CohortConfig cc;
    const auto subjects = cohort_subjects(x, cc, o.seed);
    NetParams<float> params;
    if (!o.checkpoint.empty()) {
      params = read_checkpoint(o.checkpoint);
    } else {
      params = train_on_cohort(x, cc, subjects, o.seed).params;
      write_checkpoint(out / "checkpoint.json", params);
    }
    auto co = cohort_rois(x, subjects, params, o.seed);
    for (auto& [name, rs] : co.methods) {
      write_csv(out / ("rois_" + name + ".csv"), roi_table(rs));
      methods[name] = std::move(rs);
    }
  }
  for (const auto& f : o.features) {
    const auto eq = f.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--features expects name=path, got '" + f + "'");
    methods[f.substr(0, eq)] = read_rois(f.substr(eq + 1));
  }
  if (methods.empty()) throw ConfigError("classify needs --features or --cohort");
  const auto res = evaluate_motion_methods(methods, o.folds, o.seed);
  CsvTable auc{{"method", "mean_auc", "std_auc", "folds_used"}, {}};
  CsvTable roc{{"method", "fpr", "tpr"}, {}};
  for (const auto& m : res) {
    auc.add({m.method, fmt_num(m.cv.mean_auc), fmt_num(m.cv.std_auc), std::to_string(m.cv.fold_auc.size())});
    for (std::size_t i = 0; i < m.cv.mean_fpr.size(); ++i)
      roc.add({m.method, fmt_num(m.cv.mean_fpr[i]), fmt_num(m.cv.mean_tpr[i])});
    std::cout << m.method << ": AUC " << fmt_num(m.cv.mean_auc) << " +- " << fmt_num(m.cv.std_auc) << "\n";
  }
  write_csv(out / "auc.csv", auc);
  write_csv(out / "roc.csv", roc);
  log_config(out, "classify", {{"features", o.features}, {"cohort", o.cohort}, {"checkpoint", o.checkpoint}, {"sim_config", o.sim_config},
                               {"folds", o.folds}, {"seed", o.seed}, {"out", o.out}});
  return 0;
}

// ---------------------------------------------------------------------------

struct SweepOpts {
  std::string config, sim_config, out;
  std::vector<double> lambdas = sweep_lambdas();
  std::uint64_t seed = 1;
};

int cmd_sweep(const SweepOpts& o) {
  auto x = experiment_from_json(o.sim_config.empty() ? json::object() : read_json(o.sim_config));
  const int ref = x.train.reference_index;
  x.train = load_train_config(o.config);
  x.train.reference_index = ref;
  const auto rows = sweep_lambda(x, o.seed, o.lambdas);
  CsvTable t{{"lambda", "mean_nfe", "max_nfe", "tumour_ki_mean", "tumour_ki_max", "ki_vb_nmi", "ki_vb_ncc",
              "endpoint_error_vox", "final_loss"},
             {}};
  for (const auto& r : rows) {
    const auto& c = r.report.conditions.at(2);
    t.add({fmt_num(r.lambda), fmt_num(c.mean_nfe), fmt_num(c.max_nfe), fmt_num(c.tumour_ki.mean),
           fmt_num(c.tumour_ki.max), fmt_num(c.ki_vb_nmi.value), fmt_num(c.ki_vb_ncc.value),
           fmt_num(r.report.endpoint_error), fmt_num(r.final_loss)});
    std::cout << "lambda " << fmt_num(r.lambda) << ": corrected mean NFE " << fmt_num(c.mean_nfe) << "\n";
  }
  const fs::path out = o.out;
  write_csv(out / "sweep.csv", t);
  log_config(out, "sweep-lambda", {{"config", o.config}, {"sim_config", o.sim_config}, {"lambdas", o.lambdas},
                                   {"seed", o.seed}, {"out", o.out}, {"resolved", to_json(x.train)},
                                   {"simulation", to_json(x)}});
  return 0;
}

// ---------------------------------------------------------------------------

struct GradcheckOpts {
  ModelCheckConfig mc;
  std::string variant = "b-convlstm", out;
  std::vector<std::size_t> extent{16, 16, 32};
  double tolerance = 1e-4;
};

int cmd_gradcheck(GradcheckOpts o) {
  o.mc.variant = parse_variant(o.variant);
  if (o.extent.size() != 3) throw ConfigError("--extent takes three sizes");
  o.mc.extent = {o.extent[0], o.extent[1], o.extent[2]};
  const auto rep = model_grad_check(o.mc);
  const auto& r = rep.result;
  const bool ok = r.max_rel_error <= o.tolerance && r.checked > 0;
  std::cout << "max_rel_error=" << fmt_num(r.max_rel_error) << " checked=" << r.checked << " skipped=" << r.skipped
            << " parameters=" << rep.parameters << " seconds=" << fmt_num(rep.seconds) << " tolerance="
            << fmt_num(o.tolerance) << " " << (ok ? "ok" : "exceeded") << "\n";
  if (!o.out.empty()) {
    const fs::path out = o.out;
    write_file_atomic(out / "gradcheck.json",
                      dump_json({{"max_rel_error", r.max_rel_error}, {"checked", r.checked}, {"skipped", r.skipped},
                                 {"parameters", rep.parameters}, {"worst_index", r.worst_index},
                                 {"worst_analytic", r.worst_analytic}, {"worst_numeric", r.worst_numeric},
                                 {"tolerance", o.tolerance}}));
    log_config(out, "gradcheck", {{"variant", o.variant}, {"extent", o.extent}, {"frames", o.mc.frames},
                                  {"samples", o.mc.samples}, {"step", o.mc.h}, {"seed", o.mc.seed},
                                  {"sample_seed", o.mc.sample_seed}, {"tolerance", o.tolerance}});
  }
  return ok ? 0 : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Inter-frame motion correction for dynamic PET: phantom simulation, training, Patlak evaluation"};
  app.require_subcommand(1);

  SimulateOpts so;
  auto* sim = app.add_subcommand("simulate", "simulate a phantom series, inject motion, write the truth bundle");
  sim->add_option("--config", so.config, "simulation config (JSON)")->check(CLI::ExistingFile);
  sim->add_option("--seed", so.seed, "noise and motion seed");
  sim->add_option("--out", so.out, "output directory")->required();

  TrainOpts to;
  auto* tr = app.add_subcommand("train", "train a network on one or more series");
  tr->add_option("--series", to.series, "training series header(s)")->required()->check(CLI::ExistingFile);
  tr->add_option("--config", to.config, "train config (JSON)")->check(CLI::ExistingFile);
  tr->add_option("--epochs", to.epochs);
  tr->add_option("--lr", to.lr);
  tr->add_option("--lambda", to.lambda);
  tr->add_option("--seed", to.seed);
  tr->add_option("--init", to.init, "random or identity (zero flow head)")
      ->check(CLI::IsMember({"random", "identity"}));
  tr->add_option("--out", to.out, "output directory")->required();

  CorrectOpts co;
  auto* cr = app.add_subcommand("correct", "apply a checkpoint to a series");
  cr->add_option("--checkpoint", co.checkpoint)->required()->check(CLI::ExistingFile);
  cr->add_option("--series", co.series)->required()->check(CLI::ExistingFile);
  cr->add_option("--config", co.config, "train config (JSON)")->check(CLI::ExistingFile);
  cr->add_option("--out", co.out)->required();

  FitOpts fo;
  auto* fi = app.add_subcommand("fit", "voxel-wise Patlak fit: Ki, Vb, NFE and degenerate mask");
  fi->add_option("--series", fo.series)->required()->check(CLI::ExistingFile);
  fi->add_option("--input-function", fo.input_function, "CSV time_min,plasma")->required()->check(CLI::ExistingFile);
  fi->add_option("--t-star", fo.t_star);
  fi->add_option("--half-life", fo.half_life, "minutes");
  fi->add_option("--min-activity", fo.min_activity, "fraction of the series maximum");
  fi->add_option("--out", fo.out)->required();

  EvaluateOpts eo;
  auto* ev = app.add_subcommand("evaluate", "metrics report and slice exports for a simulation");
  ev->add_option("--sim", eo.sim, "simulate output directory")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--corrected", eo.corrected)->check(CLI::ExistingFile);
  ev->add_option("--fields", eo.fields, "estimated fields from correct")->check(CLI::ExistingFile);
  ev->add_option("--ncc-window", eo.ncc_window);
  ev->add_option("--out", eo.out)->required();

  ClassifyOpts clo;
  auto* cl = app.add_subcommand("classify", "cross-validated ROI classification, AUC and mean ROC");
  cl->add_option("--features", clo.features, "name=path to an ROI feature CSV (repeatable)");
  cl->add_flag("--cohort", clo.cohort, "simulate the phantom lesion cohort and classify its tumour ROIs");
  cl->add_option("--checkpoint", clo.checkpoint, "network for the cohort (default: train one on the cohort)")
      ->check(CLI::ExistingFile);
  cl->add_option("--sim-config", clo.sim_config, "simulation config for the cohort")->check(CLI::ExistingFile);
  cl->add_option("--folds", clo.folds);
  cl->add_option("--seed", clo.seed);
  cl->add_option("--out", clo.out)->required();

  SweepOpts swo;
  auto* sw = app.add_subcommand("sweep-lambda", "train and evaluate over smoothness weights");
  sw->add_option("--config", swo.config, "train config (JSON)")->check(CLI::ExistingFile);
  sw->add_option("--sim-config", swo.sim_config)->check(CLI::ExistingFile);
  sw->add_option("--lambdas", swo.lambdas);
  sw->add_option("--seed", swo.seed);
  sw->add_option("--out", swo.out)->required();

  GradcheckOpts go;
  auto* gc = app.add_subcommand("gradcheck", "end-to-end gradient check against central differences");
  gc->add_option("--variant", go.variant);
  gc->add_option("--extent", go.extent)->expected(3);
  gc->add_option("--frames", go.mc.frames);
  gc->add_option("--samples", go.mc.samples);
  gc->add_option("--step", go.mc.h, "finite-difference step");
  gc->add_option("--seed", go.mc.seed);
  gc->add_option("--sample-seed", go.mc.sample_seed);
  gc->add_option("--tolerance", go.tolerance);
  gc->add_option("--out", go.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << one_line(e.what()) << "\n";
    return kExitError;
  }

  try {
    if (*sim) return cmd_simulate(so);
    if (*tr) return cmd_train(to);
    if (*cr) return cmd_correct(co);
    if (*fi) return cmd_fit(fo);
    if (*ev) return cmd_evaluate(eo);
    if (*cl) return cmd_classify(clo);
    if (*sw) return cmd_sweep(swo);
    if (*gc) return cmd_gradcheck(go);
  } catch (const moco::InternalError& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return kExitInternal;
  } catch (const moco::Error& e) {
    std::cerr << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return kExitError;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: format: " << one_line(e.what()) << "\n";
    return kExitError;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: io: " << one_line(e.what()) << "\n";
    return kExitError;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << one_line(e.what()) << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
