#include <gtest/gtest.h>

#include "moco/phantom.hpp"
#include "moco/pipeline.hpp"
#include "oracles.hpp"

using namespace moco;

namespace {

const KineticsSetup& kinetics() {
  static const KineticsSetup k = DeskExperiment{}.kinetics();
  return k;
}

Tensor<double> shift(const Tensor<double>& v, long sz, long sy, long sx) {
  const auto e = spatial_extent(v);
  Tensor<double> o(v.shape());
  for (long z = 0; z < long(e.d); ++z)
    for (long y = 0; y < long(e.h); ++y)
      for (long x = 0; x < long(e.w); ++x) {
        const long a = z + sz, b = y + sy, c = x + sx;
        if (a < 0 || b < 0 || c < 0 || a >= long(e.d) || b >= long(e.h) || c >= long(e.w)) continue;
        o.at(z, y, x) = v.at(a, b, c);
      }
  return o;
}

MotionSpec still(std::size_t frames) {
  MotionSpec m;
  m.frames.assign(frames, FrameMotion{});
  return m;
}

}  // namespace

TEST(Phantom, DefaultTimingIsEightLateFrames) {
  const auto t = FrameTiming::uniform(8);
  ASSERT_EQ(t.mid_times.size(), 8u);
  EXPECT_EQ(t.mid_times.front(), 22.5);
  EXPECT_EQ(t.mid_times.back(), 57.5);
}

TEST(Phantom, TumourKineticsMirrorMotionFreeScale) {
  const auto s = PhantomSpec::desk_default();
  int tumours = 0;
  for (const auto& r : s.regions)
    if (r.tumour) {
      ++tumours;
      EXPECT_EQ(r.ki, 0.0146);
    }
  EXPECT_EQ(tumours, 1);
}

TEST(Phantom, SpecValidation) {
  auto s = PhantomSpec::desk_default();
  s.regions[0].ki = -0.1;
  EXPECT_THROW(s.validate(), ConfigError);
  s = PhantomSpec::desk_default();
  s.regions[2].centre[2] = 31.0;
  EXPECT_THROW(s.validate(), ConfigError);
}

TEST(Phantom, NoiselessRoundTripRecoversInteriorKinetics) {
  const auto spec = PhantomSpec::desk_default();
  const auto s = simulate_frames(spec, kinetics().ifn, FrameTiming::uniform(8), 0.0, 0);
  const auto truth = phantom_truth(spec);
  const auto inner = interior_mask(truth.label);
  const auto m = parametric_maps(s, kinetics().ifn, 20.0);
  std::size_t checked = 0;
  for (std::size_t v = 0; v < inner.size(); ++v) {
    if (!inner[v]) continue;
    ++checked;
    EXPECT_NEAR(m.ki[v], truth.ki[v], 1e-8 * std::max(truth.ki[v], 1e-3));
    EXPECT_NEAR(m.vb[v], truth.vb[v], 1e-8 * truth.vb[v]);
  }
  EXPECT_GT(checked, 1000u);
}

TEST(Phantom, BackgroundTacIsProportionalToPlasma) {
  auto spec = PhantomSpec::desk_default();
  spec.regions.clear();
  const auto s = simulate_frames(spec, kinetics().ifn, FrameTiming::uniform(8), 0.0, 0);
  for (std::size_t k = 0; k < s.size(); ++k)
    EXPECT_NEAR(s.frames[k][0], spec.background_vb * kinetics().ifn.value_at(s.mid_times[k]), 1e-15);
}

TEST(Phantom, SeededSimulationIsDeterministic) {
  const auto spec = PhantomSpec::desk_default();
  const auto a = simulate_frames(spec, kinetics().ifn, FrameTiming::uniform(8), 0.1, 9);
  const auto b = simulate_frames(spec, kinetics().ifn, FrameTiming::uniform(8), 0.1, 9);
  const auto c = simulate_frames(spec, kinetics().ifn, FrameTiming::uniform(8), 0.1, 10);
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(oracle::values(a.frames[k]), oracle::values(b.frames[k]));
  EXPECT_NE(oracle::values(a.frames[0]), oracle::values(c.frames[0]));
}

TEST(Phantom, MotionFreeNfeIsOfOrderOnePercent) {
  const auto c = make_case(DeskExperiment{}, 1);
  const auto m = condition_metrics("motion-free", c.motion_free, kinetics(), c.truth);
  EXPECT_GT(m.mean_nfe, 0.005);
  EXPECT_LT(m.mean_nfe, 0.05);
}

TEST(InjectMotion, ZeroMotionIsIdentity) {
  const auto s = simulate_frames(PhantomSpec::desk_default(), kinetics().ifn, FrameTiming::uniform(4), 0.1, 2);
  const auto r = inject_motion(s, still(4));
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(oracle::values(r.moved.frames[k]), oracle::values(s.frames[k]));
    for (double v : r.correct_fields[k].data()) EXPECT_EQ(v, 0.0);
    for (double v : r.motion_fields[k].data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(InjectMotion, IntegerTranslationMatchesIndexShift) {
  const auto s = simulate_frames(PhantomSpec::desk_default(), kinetics().ifn, FrameTiming::uniform(3), 0.1, 3);
  auto m = still(3);
  m.frames[1].translation_mm = {0.0, 2.0 * s.voxel_mm[1], 0.0};
  const auto r = inject_motion(s, m);
  EXPECT_EQ(oracle::values(r.moved.frames[0]), oracle::values(s.frames[0]));
  EXPECT_EQ(oracle::values(r.moved.frames[1]), oracle::values(shift(s.frames[1], 0, 2, 0)));
}

TEST(InjectMotion, InverseTranslationRestoresInterior) {
  const auto s = simulate_frames(PhantomSpec::desk_default(), kinetics().ifn, FrameTiming::uniform(2), 0.1, 4);
  // whole-voxel shifts; trilinear resampling low-passes fractional ones
  const std::array<std::array<double, 3>, 3> shifts{{{1, -2, 3}, {-1, 0, 0}, {2, 1, -3}}};
  for (const auto& sv : shifts) {
    auto m = still(2);
    for (int a = 0; a < 3; ++a) m.frames[1].translation_mm[a] = sv[a] * s.voxel_mm[a];
    const auto r = inject_motion(s, m);
    const auto back = warp(r.moved.frames[1], r.correct_fields[1]);
    const auto e = s.extent;
    for (std::size_t z = 3; z + 3 < e.d; ++z)
      for (std::size_t y = 3; y + 3 < e.h; ++y)
        for (std::size_t x = 3; x + 3 < e.w; ++x) EXPECT_NEAR(back.at(z, y, x), s.frames[1].at(z, y, x), 1e-6);
  }
}

TEST(InjectMotion, RejectsOutOfBoundMotionAndBadScale) {
  const auto s = simulate_frames(PhantomSpec::desk_default(), kinetics().ifn, FrameTiming::uniform(2), 0.0, 0);
  auto m = still(2);
  m.bound_mm = 4.0;
  m.frames[1].translation_mm = {8.0, 0.0, 0.0};
  EXPECT_THROW(inject_motion(s, m), ConfigError);
  m.frames[1].translation_mm = {0.0, 0.0, 0.0};
  m.frames[1].scale = 0.5;  // strain reaches far past 4 mm at the grid corners
  EXPECT_THROW(inject_motion(s, m), ConfigError);
  m.frames[1].scale = 0.0;
  EXPECT_THROW(inject_motion(s, m), ConfigError);
  EXPECT_THROW(inject_motion(s, still(3)), ConfigError);
}

TEST(InjectMotion, RandomMotionLeavesReferenceAndStaysInBound) {
  const auto x = DeskExperiment{};
  const auto c = make_case(x, 5);
  EXPECT_EQ(oracle::values(c.moved.moved.frames[x.reference()]), oracle::values(c.motion_free.frames[x.reference()]));
  for (std::size_t k = 0; k < c.motion.frames.size(); ++k) {
    const auto& f = c.motion.frames[k];
    const double n = std::hypot(f.translation_mm[0], f.translation_mm[1], f.translation_mm[2]);
    EXPECT_LE(n, x.max_shift_vox * 4.0 + 1e-9);
    EXPECT_LE(std::abs(f.scale - 1.0), x.max_strain);
  }
}

TEST(InjectMotion, MotionInflatesMeanNfeOnEverySeed) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = make_case(DeskExperiment{}, seed);
    const auto mf = condition_metrics("motion-free", c.motion_free, kinetics(), c.truth);
    const auto mo = condition_metrics("motion", c.moved.moved, kinetics(), c.truth);
    EXPECT_GT(mo.mean_nfe, mf.mean_nfe) << "seed " << seed;
  }
}

TEST(EvaluateCorrection, PerfectCorrectionMatchesMotionFree) {
  const auto c = make_case(DeskExperiment{}, 1);
  const auto rep = evaluate_correction(c.motion_free, c.moved.moved, c.motion_free, kinetics(), c.truth,
                                       &c.moved.correct_fields, &c.moved.correct_fields, 3);
  ASSERT_EQ(rep.conditions.size(), 3u);
  EXPECT_EQ(rep.conditions[2].tumour_ki.mean, rep.conditions[0].tumour_ki.mean);
  EXPECT_EQ(rep.conditions[2].mean_nfe, rep.conditions[0].mean_nfe);
  EXPECT_TRUE(rep.has_endpoint_error);
  EXPECT_EQ(rep.endpoint_error, 0.0);
}
