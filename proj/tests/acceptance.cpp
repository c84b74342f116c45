// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed
// below. Exit status is 0 only when every selected criterion passes.
//
//   acceptance [--only 2,3,4] [--moco PATH] [--work DIR] [--seeds N]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "moco/classify.hpp"
#include "moco/convlstm.hpp"
#include "moco/io.hpp"
#include "moco/model_check.hpp"
#include "moco/net.hpp"
#include "moco/patlak.hpp"
#include "moco/pipeline.hpp"
#include "moco/warp.hpp"
#include "oracles.hpp"

namespace fs = std::filesystem;
using namespace moco;

namespace {

// criterion 1
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-4;
constexpr std::size_t kGradSamples = 200;
constexpr double kGradSeconds = 300.0;
// criterion 3
constexpr int kPatlakTrials = 1000;
constexpr double kPatlakRelTol = 1e-10;
constexpr double kPatlakNfeTol = 1e-12;
// criterion 5
constexpr int kLstmOracleInstances = 20;
constexpr double kLstmOracleTol = 1e-12;
constexpr int kLstmInvariantInputs = 10000;
// criterion 6
constexpr double kNfeInflation = 10.0;
constexpr std::size_t kMaxTrainSteps = 1000;
constexpr double kPhantomSeconds = 1800.0;
// criterion 8
constexpr int kAucInstances = 100;
constexpr double kAucTol = 1e-12;
constexpr double kSignTestAlpha = 0.05;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

Outcome gradient_check() {
  ModelCheckConfig c;
  c.variant = NetVariant::B_ConvLSTM;
  c.extent = {16, 16, 32};
  c.samples = kGradSamples;
  c.h = kGradStep;
  const auto r = model_grad_check(c);
  const bool ok = r.result.max_rel_error <= kGradTol && r.result.checked >= kGradSamples && r.seconds <= kGradSeconds;
  return {ok, fmt("max_rel_error=%.3g (<=%.0e) checked=%zu skipped=%zu seconds=%.1f (<=%.0f)", r.result.max_rel_error,
                  kGradTol, r.result.checked, r.result.skipped, r.seconds, kGradSeconds)};
}

Outcome parameter_counts() {
  const Extent3 full{128, 128, 256};
  const std::pair<NetVariant, std::size_t> want[] = {{NetVariant::Pairwise, 327331},
                                                     {NetVariant::MultiFrame, 327331},
                                                     {NetVariant::S_ConvLSTM, 501571},
                                                     {NetVariant::B_ConvLSTM, 548643}};
  bool ok = true;
  std::string d;
  for (const auto& [v, n] : want) {
    NetConfig nc;
    nc.variant = v;
    nc.extent = full;
    const auto p = init_params<float>(nc, 1);
    std::size_t built = 0;
    for (const auto& [name, t] : p.tensors) built += t.size();
    ok = ok && built == n && count_params(nc) == n;
    d += fmt("%s=%zu ", variant_name(v), built);
  }
  return {ok, d + "(exact)"};
}

Outcome patlak_exactness() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const auto timing = FrameTiming::uniform(8);
  const auto base = patlak_design(timing.mid_times, timing.durations, InputFunctionModel{}.sampled(60.0), 20.0, {});
  double worst_rel = 0.0, worst_nfe = 0.0;
  for (int trial = 0; trial < kPatlakTrials; ++trial) {
    std::vector<double> w;
    for (std::size_t i = 0; i < base.n(); ++i) w.push_back(0.05 + 5.0 * u(rng));
    const auto d = with_weights(base, w);
    const double ki = 0.001 + 0.05 * u(rng), vb = 0.02 + u(rng);
    std::vector<double> y;
    for (std::size_t i = 0; i < d.n(); ++i) y.push_back(ki * d.integral[i] + vb * d.plasma[i]);
    const auto f = patlak_fit(d, y.data());
    worst_rel = std::max({worst_rel, std::abs(f.ki - ki) / ki, std::abs(f.vb - vb) / vb});
    worst_nfe = std::max(worst_nfe, nfe(d, y.data(), f).value);
  }
  const bool ok = worst_rel <= kPatlakRelTol && worst_nfe <= kPatlakNfeTol;
  return {ok, fmt("trials=%d max_rel_error=%.3g (<=%.0e) max_nfe=%.3g (<=%.0e)", kPatlakTrials, worst_rel, kPatlakRelTol,
                  worst_nfe, kPatlakNfeTol)};
}

Tensor<double> constant_field(const Extent3& e, double dz, double dy, double dx) {
  Tensor<double> f(e.shape(3));
  const auto n = e.voxels();
  for (std::size_t i = 0; i < n; ++i) {
    f[i] = dz;
    f[n + i] = dy;
    f[2 * n + i] = dx;
  }
  return f;
}

Outcome warp_oracles() {
  std::mt19937_64 rng(7);
  std::size_t identity_fail = 0, shift_fail = 0, resample_fail = 0, shifts = 0;
  for (const Extent3 e : {Extent3{5, 6, 7}, Extent3{8, 8, 16}, Extent3{3, 9, 4}}) {
    const auto v = oracle::random_tensor(e.shape(), rng);
    if (!(warp(v, Tensor<double>(e.shape(3))) == v)) ++identity_fail;
    const auto vf = v.cast<float>();
    if (!(warp(vf, Tensor<float>(e.shape(3))) == vf)) ++identity_fail;
    std::uniform_int_distribution<long> s(-2, 2);
    for (int t = 0; t < 10; ++t, ++shifts) {
      const long sz = s(rng), sy = s(rng), sx = s(rng);
      const auto w = warp(v, constant_field(e, double(sz), double(sy), double(sx)));
      bool same = true;
      for (long z = 2; z + 2 < long(e.d); ++z)
        for (long y = 2; y + 2 < long(e.h); ++y)
          for (long x = 2; x + 2 < long(e.w); ++x) same = same && w.at(z, y, x) == v.at(z + sz, y + sy, x + sx);
      if (!same) ++shift_fail;
    }
  }
  for (int f : {2, 4})
    for (int t = 0; t < 5; ++t) {
      std::uniform_real_distribution<double> u(-3, 3);
      const auto c = constant_field({2, 3, 4}, u(rng), u(rng), u(rng));
      if (!(resample_field(resample_field(c, f, ResampleDirection::Up), f, ResampleDirection::Down) == c)) ++resample_fail;
    }
  const bool ok = identity_fail == 0 && shift_fail == 0 && resample_fail == 0;
  return {ok, fmt("zero-field mismatches=%zu integer-shift mismatches=%zu/%zu up-down mismatches=%zu/10", identity_fail,
                  shift_fail, shifts, resample_fail)};
}

ConvLstmParams<double> random_lstm(std::size_t C, std::size_t F, std::mt19937_64& rng, double scale) {
  ConvLstmParams<double> p;
  for (int g = 0; g < 4; ++g) {
    p.W[g] = oracle::random_tensor({F, C, 3, 3, 3}, rng, -scale, scale);
    p.U[g] = oracle::random_tensor({F, F, 3, 3, 3}, rng, -scale, scale);
    p.b[g] = oracle::random_tensor({F}, rng, -scale, scale);
  }
  return p;
}

Outcome convlstm_oracle() {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<std::size_t> dim(1, 4), ch(1, 3);
  double worst = 0.0;
  for (int n = 0; n < kLstmOracleInstances; ++n) {
    const std::size_t C = ch(rng), F = ch(rng);
    const Extent3 e{dim(rng), dim(rng), dim(rng)};
    const auto p = random_lstm(C, F, rng, 0.5);
    const auto x = oracle::random_tensor(e.shape(C), rng);
    ConvLstmState<double> s{oracle::random_tensor(e.shape(F), rng), oracle::random_tensor(e.shape(F), rng, -2, 2)};
    const auto out = convlstm_step(p, x, s);
    oracle::ScalarLstm sp;
    for (int g = 0; g < 4; ++g) {
      sp.W.push_back(p.W[g]);
      sp.U.push_back(p.U[g]);
      sp.b.push_back(p.b[g]);
    }
    Tensor<double> h, c;
    oracle::convlstm_step(sp, x, s.h, s.c, h, c);
    for (std::size_t i = 0; i < h.size(); ++i) worst = std::max({worst, std::abs(h[i] - out.h[i]), std::abs(c[i] - out.c[i])});
  }
  // Gate ranges are observable through the state update: i, f in (0,1) and
  // c~ in (-1,1) give |c1| < |c0| + 1; o in (0,1) gives |h1| <= |tanh c1| < 1.
  std::size_t violations = 0;
  const auto p = random_lstm(2, 2, rng, 1.0);
  for (int n = 0; n < kLstmInvariantInputs; ++n) {
    const auto x = oracle::random_tensor({2, 2, 2, 2}, rng, -3, 3);
    ConvLstmState<double> s{oracle::random_tensor({2, 2, 2, 2}, rng, -1, 1),
                            oracle::random_tensor({2, 2, 2, 2}, rng, -3, 3)};
    const auto out = convlstm_step(p, x, s);
    for (std::size_t i = 0; i < out.h.size(); ++i)
      if (!(std::abs(out.h[i]) < 1.0) || !(std::abs(out.c[i]) < std::abs(s.c[i]) + 1.0) ||
          !(std::abs(out.h[i]) <= std::abs(std::tanh(out.c[i]))))
        ++violations;
  }
  const bool ok = worst <= kLstmOracleTol && violations == 0;
  return {ok, fmt("instances=%d max_abs_error=%.3g (<=%.0e) invariant violations=%zu over %d inputs", kLstmOracleInstances,
                  worst, kLstmOracleTol, violations, kLstmInvariantInputs)};
}

const ConditionMetrics& cond(const CorrectionReport& r, const std::string& name) {
  for (const auto& c : r.conditions)
    if (c.name == name) return c;
  throw InternalError("report has no condition " + name);
}

Outcome phantom_direction(int seeds) {
  const DeskExperiment x;
  const std::size_t steps = static_cast<std::size_t>(x.train.epochs) * (x.frames - x.train.window_length + 1);
  const auto t0 = std::chrono::steady_clock::now();
  int nfe_ok = 0, ki_ok = 0, corr_ok = 0, ncc_ok = 0;
  std::string d;
  for (int s = 1; s <= seeds; ++s) {
    const auto r = run_phantom(x, static_cast<std::uint64_t>(s));
    const auto &mf = cond(r.report, "motion-free"), &mo = cond(r.report, "motion"), &co = cond(r.report, "corrected");
    nfe_ok += mo.mean_nfe >= kNfeInflation * mf.mean_nfe;
    ki_ok += mo.tumour_ki.mean > mf.tumour_ki.mean && mo.tumour_ki.max > mf.tumour_ki.max;
    corr_ok += co.mean_nfe < mo.mean_nfe;
    ncc_ok += co.ki_vb_ncc.defined && mo.ki_vb_ncc.defined && co.ki_vb_ncc.value > mo.ki_vb_ncc.value;
    std::printf(
        "  seed %d: nfe free/motion/corrected %.4f/%.4f/%.4f; tumour ki mean free/motion %.5f/%.5f, max %.5f/%.5f; "
        "ki-vb ncc motion/corrected %.3f/%.3f; train %.0fs\n",
        s, mf.mean_nfe, mo.mean_nfe, co.mean_nfe, mf.tumour_ki.mean, mo.tumour_ki.mean, mf.tumour_ki.max,
        mo.tumour_ki.max, mo.ki_vb_ncc.value, co.ki_vb_ncc.value, r.train_seconds);
    std::fflush(stdout);
  }
  const double secs = seconds_since(t0);
  const bool ok = nfe_ok == seeds && ki_ok == seeds && corr_ok == seeds && ncc_ok == seeds && steps <= kMaxTrainSteps &&
                  secs <= kPhantomSeconds;
  d = fmt("nfe x%.0f %d/%d; tumour ki up %d/%d; corrected nfe < motion %d/%d; ki-vb ncc up %d/%d; steps=%zu (<=%zu); "
          "seconds=%.0f (<=%.0f)",
          kNfeInflation, nfe_ok, seeds, ki_ok, seeds, corr_ok, seeds, ncc_ok, seeds, steps, kMaxTrainSteps, secs,
          kPhantomSeconds);
  return {ok, d};
}

Outcome lambda_direction() {
  const auto rows = sweep_lambda(DeskExperiment{}, 1);
  std::size_t best = 0;
  double nfe1 = 0.0, nfe100 = 0.0;
  std::string d;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const double v = cond(rows[i].report, "corrected").mean_nfe;
    if (v < cond(rows[best].report, "corrected").mean_nfe) best = i;
    if (rows[i].lambda == 1.0) nfe1 = v;
    if (rows[i].lambda == 100.0) nfe100 = v;
    d += fmt("lambda %g: %.4f; ", rows[i].lambda, v);
  }
  const double lbest = rows[best].lambda;
  const bool ok = (lbest == 1.0 || lbest == 0.1) && nfe100 > nfe1;
  return {ok, d + fmt("argmin lambda=%g", lbest)};
}

Outcome classification(int seeds) {
  // roc_auc against the pairwise-count oracle, with ties
  std::mt19937_64 rng(99);
  double worst = 0.0;
  for (int n = 0; n < kAucInstances; ++n) {
    std::uniform_int_distribution<int> len(2, 60), lvl(0, 9);
    std::vector<double> s;
    std::vector<int> y;
    const int m = len(rng);
    for (int i = 0; i < m; ++i) {
      s.push_back(lvl(rng) * 0.1);
      y.push_back(i < 1 ? 0 : i < 2 ? 1 : int(rng() & 1u));
    }
    worst = std::max(worst, std::abs(roc_auc(s, y).auc - oracle::mann_whitney(s, y)));
  }
  // fold balance for the 8/49 split
  std::vector<int> labels(8, kBenign);
  labels.insert(labels.end(), 49, kMalignant);
  std::size_t balance_fail = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto f = stratified_kfold(labels, 5, seed);
    for (int cls = 0; cls < 2; ++cls) {
      std::vector<int> cnt(5, 0);
      for (std::size_t i = 0; i < labels.size(); ++i)
        if (labels[i] == cls) ++cnt[static_cast<std::size_t>(f[i])];
      if (*std::max_element(cnt.begin(), cnt.end()) - *std::min_element(cnt.begin(), cnt.end()) > 1) ++balance_fail;
    }
    std::vector<int> size(5, 0);
    for (int k : f) ++size[static_cast<std::size_t>(k)];
    if (*std::max_element(size.begin(), size.end()) - *std::min_element(size.begin(), size.end()) > 1) ++balance_fail;
  }
  // cohort: AUC(corrected) >= AUC(motion) per seed, one-sided sign test
  const DeskExperiment x;
  const CohortConfig cc;
  std::size_t wins = 0;
  for (int s = 1; s <= seeds; ++s) {
    const auto seed = static_cast<std::uint64_t>(s);
    const auto subjects = cohort_subjects(x, cc, seed);
    const auto trained = train_on_cohort(x, cc, subjects, seed);
    const auto rois = cohort_rois(x, subjects, trained.params, seed);
    const auto aucs = evaluate_motion_methods(rois.methods, cc.folds, seed);
    std::map<std::string, double> a;
    for (const auto& m : aucs) a[m.method] = m.cv.mean_auc;
    wins += a.at("corrected") >= a.at("motion");
    std::printf("  seed %d: auc motion-free %.4f motion %.4f corrected %.4f\n", s, a.at("motion-free"), a.at("motion"),
                a.at("corrected"));
    std::fflush(stdout);
  }
  const double p = sign_test_p(wins, static_cast<std::size_t>(seeds));
  const bool ok = worst <= kAucTol && balance_fail == 0 && p <= kSignTestAlpha;
  return {ok, fmt("auc vs oracle max_abs_error=%.3g (<=%.0e); fold balance failures=%zu; corrected>=motion %zu/%d, "
                  "sign test p=%.4f (<=%.2f)",
                  worst, kAucTol, balance_fail, wins, seeds, p, kSignTestAlpha)};
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return rc;
}

Outcome determinism(const std::string& moco, const fs::path& work) {
  // Same seeds, two directories. The *_config.json records carry the output
  // path, so only volume containers and CSVs are compared.
  auto pipeline = [&](const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string m = "\"" + moco + "\"", o = dir.string();
    int rc = 0;
    rc |= run(m + " simulate --seed 7 --out " + o + "/sim");
    rc |= run(m + " train --series " + o + "/sim/motion.json --epochs 2 --seed 7 --out " + o + "/train");
    rc |= run(m + " correct --checkpoint " + o + "/train/checkpoint.json --series " + o + "/sim/motion.json --out " + o +
              "/correct");
    rc |= run(m + " fit --series " + o + "/correct/corrected.json --input-function " + o +
              "/sim/input_function.csv --out " + o + "/fit");
    rc |= run(m + " evaluate --sim " + o + "/sim --corrected " + o + "/correct/corrected.json --fields " + o +
              "/correct/fields.json --out " + o + "/evaluate");
    return rc;
  };
  const fs::path a = work / "run_a", b = work / "run_b";
  if (pipeline(a) != 0 || pipeline(b) != 0) return {false, "a pipeline stage exited non-zero (binary " + moco + ")"};
  std::size_t compared = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    const auto ext = e.path().extension();
    if (name.ends_with("_config.json") || (ext != ".json" && ext != ".raw" && ext != ".csv")) continue;
    const auto other = b / fs::relative(e.path(), a);
    ++compared;
    if (!fs::exists(other) || read_file(e.path()) != read_file(other)) {
      ++differ;
      std::printf("  differs: %s\n", fs::relative(e.path(), a).c_str());
    }
  }
  const bool ok = compared > 0 && differ == 0;
  return {ok, fmt("files compared=%zu differing=%zu", compared, differ)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string moco = MOCO_CLI_PATH;
  std::string work = (fs::temp_directory_path() / "moco_acceptance").string();
  int seeds = 5;
  app.add_option("--only", only, "criteria to run")->delimiter(',')->check(CLI::Range(1, 9));
  app.add_option("--moco", moco, "moco binary");
  app.add_option("--work", work, "scratch directory");
  app.add_option("--seeds", seeds, "phantom and cohort seeds")->check(CLI::PositiveNumber);
  CLI11_PARSE(app, argc, argv);
  const std::set<int> pick(only.begin(), only.end());

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"gradient correctness", gradient_check},
      {"parameter counts", parameter_counts},
      {"patlak oracle", patlak_exactness},
      {"warp and field oracles", warp_oracles},
      {"convlstm oracle and invariants", convlstm_oracle},
      {"phantom direction", [&] { return phantom_direction(seeds); }},
      {"lambda sensitivity", lambda_direction},
      {"classification properties", [&] { return classification(seeds); }},
      {"determinism", [&] { return determinism(moco, work); }},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!pick.empty() && !pick.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%s) [%.0fs]\n", id, o.pass ? "PASS" : "FAIL", criteria[i].first, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
