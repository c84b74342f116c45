#pragma once

// Desk-scale phantom experiment: simulate, inject motion, train, correct and
// evaluate; plus the lambda sweep and a labelled lesion cohort for the
// classification study.

#include <chrono>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "moco/classify.hpp"
#include "moco/phantom.hpp"
#include "moco/trainer.hpp"

namespace moco {

// Training defaults for the 16x16x32 phantom. The step budget (300 Adam steps)
// is too short for the 1e-4 rate to move the flow head off zero.
inline TrainConfig desk_train_config() {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.epochs = 75;  // 4 windows per series -> 300 steps
  c.downsample_factor = 2;
  c.reference_index = 3;
  c.window_length = 5;
  c.ncc_window = 9;
  c.variant = NetVariant::B_ConvLSTM;
  return c;
}

struct DeskExperiment {
  PhantomSpec phantom = PhantomSpec::desk_default();
  std::size_t frames = 8;
  double frame_start = 20.0, frame_duration = 5.0;  // minutes
  double noise_sigma = 0.1;                         // multiplicative
  double max_shift_vox = 4.0;                       // a quarter of the short grid axis
  double max_strain = 0.1;
  double envelope_sigma = 8.0;                      // voxels, about the tumour
  double t_star = 20.0;
  TrainConfig train = desk_train_config();

  std::size_t reference() const { return static_cast<std::size_t>(train.reference_index); }

  std::array<double, 3> motion_centre() const {
    for (const auto& r : phantom.regions)
      if (r.tumour) return r.centre;
    return {0.5 * (double(phantom.extent.d) - 1.0), 0.5 * (double(phantom.extent.h) - 1.0),
            0.5 * (double(phantom.extent.w) - 1.0)};
  }

  FrameTiming timing() const { return FrameTiming::uniform(frames, frame_start, frame_duration); }

  KineticsSetup kinetics() const {
    const auto t = timing();
    const double t_end = t.mid_times.back() + 0.5 * t.durations.back();
    return {InputFunctionModel{}.sampled(t_end), t_star, WeightModel{}};
  }
};

struct PhantomCase {
  PhantomTruth truth;
  KineticsSetup kinetics;
  FrameSeries motion_free;
  MotionSpec motion;
  MotionResult moved;
};

inline PhantomCase make_case(const DeskExperiment& x, std::uint64_t seed) {
  PhantomCase c;
  c.truth = phantom_truth(x.phantom);
  c.kinetics = x.kinetics();
  c.motion_free = simulate_frames(x.phantom, c.kinetics.ifn, x.timing(), x.noise_sigma, seed);
  c.motion = random_motion(c.motion_free, x.reference(), x.max_shift_vox, x.max_strain, x.motion_centre(),
                           x.envelope_sigma, seed);
  c.moved = inject_motion(c.motion_free, c.motion);
  return c;
}

inline NetParams<float> initial_params(const DeskExperiment& x, std::uint64_t seed) {
  NetConfig nc;
  nc.variant = x.train.variant;
  nc.extent = working_extent(x.phantom.extent, x.train.downsample_factor);
  return init_params<float>(nc, seed);
}

struct PhantomRun {
  PhantomCase data;
  TrainResult<float> trained;
  Correction correction;
  CorrectionReport report;
  double train_seconds = 0.0;
};

// Trains on the motion-corrupted series of one seeded case and corrects it.
inline PhantomRun run_phantom(const DeskExperiment& x, std::uint64_t seed) {
  PhantomRun r;
  r.data = make_case(x, seed);
  auto tc = x.train;
  tc.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  r.trained = train(initial_params(x, seed), {r.data.moved.moved}, tc);
  r.train_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  r.correction = apply(r.trained.params, r.data.moved.moved, tc);
  r.report = evaluate_correction(r.data.motion_free, r.data.moved.moved, r.correction.corrected, r.data.kinetics,
                                 r.data.truth, &r.data.moved.correct_fields, &r.correction.fields, x.reference());
  return r;
}

struct SweepRow {
  double lambda = 0.0;
  CorrectionReport report;
  double final_loss = 0.0;
};

inline const std::vector<double>& sweep_lambdas() {
  static const std::vector<double> l{0.1, 1.0, 10.0, 100.0};
  return l;
}

inline std::vector<SweepRow> sweep_lambda(DeskExperiment x, std::uint64_t seed,
                                          const std::vector<double>& lambdas = sweep_lambdas()) {
  std::vector<SweepRow> rows;
  for (double l : lambdas) {
    x.train.lambda = l;
    auto r = run_phantom(x, seed);
    rows.push_back({l, std::move(r.report), r.trained.trace.empty() ? 0.0 : r.trained.trace.back().mean_loss});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Lesion cohort

// Subjects share the phantom geometry; the tumour kinetics carry the label.
// Malignant lesions take up faster than benign ones, with overlapping spread.
struct CohortConfig {
  std::size_t benign = 8, malignant = 49;
  double malignant_ki = 0.0146, benign_ki = 0.009, ki_sd = 0.003, min_ki = 0.001;
  int folds = 5;
  std::size_t train_subjects = 8;
  std::size_t train_steps = 300;
};

struct CohortSubject {
  std::string id;
  int label = kBenign;
  PhantomCase data;
};

// Labels are shuffled with the cohort seed; every subject gets its own tumour
// Ki draw, noise and motion.
inline std::vector<CohortSubject> cohort_subjects(const DeskExperiment& x, const CohortConfig& cc, std::uint64_t seed) {
  std::vector<int> labels(cc.benign, kBenign);
  labels.insert(labels.end(), cc.malignant, kMalignant);
  std::mt19937_64 rng(seed);
  std::shuffle(labels.begin(), labels.end(), rng);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::size_t tumour = x.phantom.regions.size();
  for (std::size_t r = 0; r < x.phantom.regions.size(); ++r)
    if (x.phantom.regions[r].tumour) tumour = r;
  if (tumour == x.phantom.regions.size()) throw ConfigError("cohort needs a tumour region");
  std::vector<CohortSubject> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    DeskExperiment xi = x;
    const double mean = labels[i] == kMalignant ? cc.malignant_ki : cc.benign_ki;
    xi.phantom.regions[tumour].ki = std::max(cc.min_ki, mean + cc.ki_sd * nd(rng));
    out.push_back({"roi" + std::to_string(i), labels[i], make_case(xi, seed * 1000003ULL + i + 1)});
  }
  return out;
}

// One network for the whole cohort, trained on the motion-corrupted series of
// its first `cc.train_subjects` subjects.
inline TrainResult<float> train_on_cohort(const DeskExperiment& x, const CohortConfig& cc,
                                          const std::vector<CohortSubject>& subjects, std::uint64_t seed) {
  std::vector<FrameSeries> data;
  for (std::size_t i = 0; i < std::min(cc.train_subjects, subjects.size()); ++i)
    data.push_back(subjects[i].data.moved.moved);
  auto tc = x.train;
  tc.seed = seed;
  const std::size_t windows_per_series = x.frames - static_cast<std::size_t>(tc.window_length) + 1;
  tc.epochs = static_cast<int>((cc.train_steps + data.size() * windows_per_series - 1) / (data.size() * windows_per_series));
  return train(initial_params(x, seed), data, tc);
}

struct CohortRois {
  std::map<std::string, std::vector<RoiRecord>> methods;  // motion-free, motion, corrected
};

inline RoiRecord roi_record(const std::string& id, int label, const Tensor<double>& ki, const Tensor<std::uint8_t>& mask) {
  const auto s = roi_stats(ki, mask);
  return {id, label, {s.mean, s.max, s.std}};
}

// Tumour Ki statistics of every subject under each condition; `params`
// corrects the motion series.
inline CohortRois cohort_rois(const DeskExperiment& x, const std::vector<CohortSubject>& subjects,
                              const NetParams<float>& params, std::uint64_t seed) {
  CohortRois out;
  auto tc = x.train;
  tc.seed = seed;
  for (const auto& sub : subjects) {
    const auto& c = sub.data;
    const auto cor = apply(params, c.moved.moved, tc);
    const std::pair<const char*, const FrameSeries*> conds[] = {
        {"motion-free", &c.motion_free}, {"motion", &c.moved.moved}, {"corrected", &cor.corrected}};
    for (const auto& [name, s] : conds) {
      const auto maps = parametric_maps(*s, c.kinetics.ifn, c.kinetics.t_star, c.kinetics.weights);
      out.methods[name].push_back(roi_record(sub.id, sub.label, maps.ki, c.truth.tumour));
    }
  }
  return out;
}

}  // namespace moco
