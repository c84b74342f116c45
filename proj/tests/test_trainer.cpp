#include <gtest/gtest.h>

#include <random>

#include "moco/pipeline.hpp"
#include "moco/trainer.hpp"
#include "oracles.hpp"

using namespace moco;

namespace {

std::vector<Tensor<float>> dummy_frames(std::size_t n) {
  std::vector<Tensor<float>> f;
  for (std::size_t k = 0; k < n; ++k) f.emplace_back(Shape{2, 2, 2}, float(k));
  return f;
}

TrainConfig small_config() {
  auto c = desk_train_config();
  c.epochs = 2;
  c.seed = 3;
  return c;
}

const PhantomCase& phantom_case() {
  static const PhantomCase c = make_case(DeskExperiment{}, 2);
  return c;
}

}  // namespace

TEST(Preprocess, BelowCutoffIsUnchanged) {
  std::mt19937_64 rng(1), r2(1);
  auto f = oracle::random_tensor({4, 4, 4}, rng, 0.0, 1.8);
  TrainConfig c;
  EXPECT_EQ(oracle::values(preprocess(f, c, r2)), oracle::values(f));
}

TEST(Preprocess, HotVoxelsLandNearTheCutoff) {
  TrainConfig c;
  std::mt19937_64 rng(2);
  Tensor<double> f(Shape{10, 10, 10}, 7.0);
  f[0] = 1.0;
  const auto p = preprocess(f, c, rng);
  EXPECT_EQ(p[0], 1.0);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_NEAR(p[i], c.cutoff, 5 * c.noise_sigma);
  c.noise_sigma = 0.0;
  const auto q = preprocess(f, c, rng);
  for (std::size_t i = 1; i < q.size(); ++i) EXPECT_EQ(q[i], 2.5);
  c.noise_sigma = -1.0;
  EXPECT_THROW(preprocess(f, c, rng), ConfigError);
}

TEST(Preprocess, NeverTouchesVoxelsAtOrBelowCutoff) {
  TrainConfig c;
  std::mt19937_64 rng(3), r2(4);
  const auto f = oracle::random_tensor({6, 6, 6}, rng, 0.0, 5.0);
  const auto p = preprocess(f, c, r2);
  for (std::size_t i = 0; i < f.size(); ++i)
    if (f[i] <= c.cutoff) {
      EXPECT_EQ(p[i], f[i]);
    }
}

TEST(Downsample, MeanOverBlocks) {
  std::mt19937_64 rng(5);
  const auto v = oracle::random_tensor({4, 6, 8}, rng);
  const auto d = downsample(v, 2);
  ASSERT_EQ(d.shape(), (Shape{2, 3, 4}));
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 4; ++x) {
        double s = 0;
        for (int a = 0; a < 2; ++a)
          for (int b = 0; b < 2; ++b)
            for (int c = 0; c < 2; ++c) s += v.at(2 * z + a, 2 * y + b, 2 * x + c);
        EXPECT_NEAR(d.at(z, y, x), s / 8, 1e-15);
      }
  EXPECT_THROW(downsample(v, 3), DimensionError);
}

TEST(Padding, CropUndoesCentredPad) {
  std::mt19937_64 rng(6);
  const auto v = oracle::random_tensor({3, 8, 8, 16}, rng);
  const Extent3 big{16, 16, 16};
  const auto p = pad_centred(v, big);
  EXPECT_EQ(spatial_extent(p), big);
  EXPECT_EQ(oracle::values(crop_centred(p, Extent3{8, 8, 16})), oracle::values(v));
  EXPECT_EQ(working_extent({16, 16, 32}, 2), (Extent3{16, 16, 16}));
  EXPECT_EQ(working_extent({64, 64, 128}, 4), (Extent3{16, 16, 32}));
}

TEST(Windows, FifteenCorrectableFramesGiveElevenWindows) {
  TrainConfig c;
  c.first_frame = 4;
  c.last_frame = 18;
  c.reference_index = 11;
  const auto w = make_windows(dummy_frames(19), c);
  ASSERT_EQ(w.size(), 11u);
  for (const auto& x : w) {
    ASSERT_EQ(x.moving.size(), 5u);
    EXPECT_EQ(oracle::values(x.reference), oracle::values(dummy_frames(19)[11]));
    for (std::size_t j = 0; j < 5; ++j)
      if (x.frame_indices[j] == 11) {
        EXPECT_EQ(oracle::values(x.moving[j]), oracle::values(x.reference));
      }
  }
  EXPECT_EQ(w.front().frame_indices.front(), 4u);
  EXPECT_EQ(w.back().frame_indices.back(), 18u);
}

TEST(Windows, TooFewFramesIsAConfigError) {
  TrainConfig c;
  EXPECT_THROW(make_windows(dummy_frames(4), c), ConfigError);
  c.window_length = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Windows, ChunksCoverEachCorrectableFrameOnce) {
  TrainConfig c;
  c.first_frame = 1;
  const auto ch = make_chunks(dummy_frames(12), c);
  std::vector<std::size_t> seen;
  for (const auto& x : ch)
    for (auto k : x.frame_indices) seen.push_back(k);
  std::vector<std::size_t> want;
  for (std::size_t k = 1; k < 12; ++k) want.push_back(k);
  EXPECT_EQ(seen, want);
}

TEST(Adam, FirstStepMovesByLearningRateAgainstGradient) {
  NetConfig nc;
  nc.variant = NetVariant::Pairwise;
  nc.extent = {16, 16, 16};
  auto p = init_params<double>(nc, 1);
  const auto before = p.tensors.at("flow.b");
  AdamState<double> s(p);
  for (const auto& [k, t] : p.tensors) EXPECT_EQ(s.m.at(k).shape(), t.shape());
  Gradients<double> g;
  g.emplace("flow.b", Tensor<double>(Shape{3}, std::vector<double>{2.0, -0.5, 0.0}));
  adam_update(p, g, s, 0.01);
  const auto& after = p.tensors.at("flow.b");
  EXPECT_NEAR(after[0] - before[0], -0.01, 1e-9);
  EXPECT_NEAR(after[1] - before[1], 0.01, 1e-9);
  EXPECT_EQ(after[2], before[2]);
}

TEST(Train, ZeroFlowHeadWithoutTrainingIsIdentity) {
  const auto& c = phantom_case();
  auto cfg = small_config();
  cfg.epochs = 0;
  auto p = initial_params(DeskExperiment{}, 1);
  zero_flow_head(p);
  const auto r = train(p, {c.moved.moved}, cfg);
  EXPECT_TRUE(r.trace.empty());
  const auto out = apply(r.params, c.moved.moved, cfg);
  ASSERT_EQ(out.corrected.size(), c.moved.moved.size());
  for (std::size_t k = 0; k < out.corrected.size(); ++k) {
    EXPECT_EQ(oracle::values(out.corrected.frames[k]), oracle::values(c.moved.moved.frames[k]));
    for (double v : out.fields[k].data()) EXPECT_EQ(v, 0.0);
  }
}

TEST(Train, SeededRunsAreIdentical) {
  const auto& c = phantom_case();
  const auto cfg = small_config();
  const auto a = train(initial_params(DeskExperiment{}, 1), {c.moved.moved}, cfg);
  const auto b = train(initial_params(DeskExperiment{}, 1), {c.moved.moved}, cfg);
  ASSERT_EQ(a.trace.size(), 2u);
  for (std::size_t e = 0; e < a.trace.size(); ++e) {
    EXPECT_EQ(a.trace[e].mean_loss, b.trace[e].mean_loss);
    EXPECT_EQ(a.trace[e].similarity, b.trace[e].similarity);
    EXPECT_EQ(a.trace[e].smoothness, b.trace[e].smoothness);
  }
  EXPECT_EQ(a.steps, 8u);
  EXPECT_EQ(oracle::values(a.params.tensors.at("flow.w")), oracle::values(b.params.tensors.at("flow.w")));
}

TEST(Train, TwoHundredStepsLowerTheLoss) {
  const auto& c = phantom_case();
  auto cfg = small_config();
  cfg.epochs = 50;
  const auto r = train(initial_params(DeskExperiment{}, 2), {c.moved.moved}, cfg);
  EXPECT_EQ(r.steps, 200u);
  EXPECT_LT(r.trace.back().mean_loss, r.trace.front().mean_loss);
}

TEST(Train, NonFiniteInputAbortsWithDiagnostic) {
  auto s = phantom_case().moved.moved;
  s.frames[5][100] = std::numeric_limits<double>::quiet_NaN();
  auto cfg = small_config();
  cfg.epochs = 1;
  try {
    train(initial_params(DeskExperiment{}, 1), {s}, cfg);
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("non-finite"), std::string::npos) << e.what();
  }
}

TEST(Train, VariantMismatchIsAConfigError) {
  auto cfg = small_config();
  cfg.variant = NetVariant::Pairwise;
  EXPECT_THROW(train(initial_params(DeskExperiment{}, 1), {phantom_case().moved.moved}, cfg), ConfigError);
}

TEST(Apply, KeepsFrameCountAndReference) {
  const auto& c = phantom_case();
  const auto cfg = small_config();
  auto p = initial_params(DeskExperiment{}, 4);
  const auto out = apply(p, c.moved.moved, cfg);
  EXPECT_EQ(out.corrected.size(), c.moved.moved.size());
  EXPECT_EQ(oracle::values(out.corrected.frames[3]), oracle::values(c.moved.moved.frames[3]));
  EXPECT_EQ(out.fields[0].shape(), c.moved.moved.extent.shape(3));
}

TEST(Apply, ModelGridMismatchIsADimensionError) {
  const auto& c = phantom_case();
  auto cfg = small_config();
  cfg.downsample_factor = 1;  // working grid becomes 16x16x32
  EXPECT_THROW(apply(initial_params(DeskExperiment{}, 4), c.moved.moved, cfg), DimensionError);
}
