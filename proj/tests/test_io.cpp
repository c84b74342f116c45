#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "moco/io.hpp"

namespace fs = std::filesystem;
using namespace moco;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("moco_io_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

FrameSeries small_series(std::uint64_t seed) {
  FrameSeries s;
  s.extent = {3, 4, 5};
  s.voxel_mm = {2.0, 2.5, 3.0};
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int k = 0; k < 3; ++k) {
    Tensor<double> f({3, 4, 5});
    // float-representable, so the round trip is exact
    for (auto& v : f.data()) v = static_cast<float>(nd(rng));
    s.frames.push_back(f);
    s.mid_times.push_back(20.0 + 5.0 * k);
    s.durations.push_back(5.0);
  }
  return s;
}

template <class E, class F>
void expect_kind(F&& f, const std::string& kind) {
  try {
    f();
    ADD_FAILURE() << "no exception";
  } catch (const E& e) {
    EXPECT_EQ(e.kind(), kind);
  }
}

}  // namespace

TEST(VolumeIo, SeriesRoundTripIsBitExact) {
  TempDir t;
  const auto s = small_series(3);
  write_series(t.path / "s.json", s);
  EXPECT_TRUE(fs::exists(t.path / "s.raw"));
  const auto r = read_series(t.path / "s.json");
  EXPECT_EQ(r.extent, s.extent);
  EXPECT_EQ(r.voxel_mm, s.voxel_mm);
  EXPECT_EQ(r.mid_times, s.mid_times);
  EXPECT_EQ(r.durations, s.durations);
  EXPECT_EQ(r.units, s.units);
  ASSERT_EQ(r.size(), s.size());
  for (std::size_t k = 0; k < s.size(); ++k)
    for (std::size_t i = 0; i < s.frames[k].size(); ++i) EXPECT_EQ(r.frames[k].data()[i], s.frames[k].data()[i]);
}

TEST(VolumeIo, RewriteIsByteIdentical) {
  TempDir t;
  const auto s = small_series(4);
  write_series(t.path / "a.json", s);
  write_series(t.path / "b.json", read_series(t.path / "a.json"));
  EXPECT_EQ(read_file(t.path / "a.raw"), read_file(t.path / "b.raw"));
  auto ha = read_json(t.path / "a.json"), hb = read_json(t.path / "b.json");
  hb["payload"] = ha["payload"];
  EXPECT_EQ(ha, hb);
}

TEST(VolumeIo, PayloadIsLittleEndianFloat32) {
  TempDir t;
  VolumeContainer v;
  v.extent = {1, 1, 2};
  v.payload = {1.0f, -2.0f};
  write_volume(t.path / "v.json", v);
  const auto b = read_file(t.path / "v.raw");
  ASSERT_EQ(b.size(), 8u);
  // 1.0f = 0x3f800000, -2.0f = 0xc0000000
  const unsigned char expect[8] = {0, 0, 0x80, 0x3f, 0, 0, 0, 0xc0};
  for (int i = 0; i < 8; ++i) EXPECT_EQ(static_cast<unsigned char>(b[static_cast<std::size_t>(i)]), expect[i]);
}

TEST(VolumeIo, MultiChannelStackRoundTrip) {
  TempDir t;
  std::vector<Tensor<double>> fields;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1, 1);
  for (int k = 0; k < 2; ++k) {
    Tensor<double> f({3, 2, 3, 4});
    for (auto& v : f.data()) v = static_cast<float>(u(rng));
    fields.push_back(f);
  }
  write_volume(t.path / "f.json", stack_container(fields, {1.0, 1.0, 1.0}, "voxel"));
  const auto c = read_volume(t.path / "f.json");
  EXPECT_EQ(c.channels, 3u);
  EXPECT_EQ(c.frames, 2u);
  const auto back = unstack_container(c);
  ASSERT_EQ(back.size(), 2u);
  for (int k = 0; k < 2; ++k) {
    EXPECT_EQ(back[k].shape(), fields[k].shape());
    for (std::size_t i = 0; i < fields[k].size(); ++i) EXPECT_EQ(back[k].data()[i], fields[k].data()[i]);
  }
}

TEST(VolumeIo, TruncatedPayloadIsFormatError) {
  TempDir t;
  write_series(t.path / "s.json", small_series(1));
  auto b = read_file(t.path / "s.raw");
  b.resize(b.size() - 4);
  write_file_atomic(t.path / "s.raw", b);
  expect_kind<FormatError>([&] { read_series(t.path / "s.json"); }, "format");
}

TEST(VolumeIo, HeaderErrorsAreFormatErrors) {
  TempDir t;
  write_series(t.path / "s.json", small_series(1));
  const auto good = read_json(t.path / "s.json");
  auto with = [&](const char* key, json value) {
    auto h = good;
    if (value.is_null())
      h.erase(key);
    else
      h[key] = value;
    write_file_atomic(t.path / "s.json", dump_json(h));
  };
  with("dtype", "float64");
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
  with("endianness", "big");
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
  with("dims", json::array({3, 4}));
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
  with("mid_times_min", json::array({20.0, 20.0, 30.0}));
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
  with("payload", "../elsewhere.raw");
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
  with("units", nullptr);
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
  write_file_atomic(t.path / "s.json", "{not json");
  expect_kind<FormatError>([&] { read_volume(t.path / "s.json"); }, "format");
}

TEST(VolumeIo, WriteRejectsInconsistentContainer) {
  TempDir t;
  VolumeContainer v;
  v.extent = {2, 2, 2};
  v.payload.assign(7, 0.0f);
  EXPECT_THROW(write_volume(t.path / "v.json", v), FormatError);
  EXPECT_FALSE(fs::exists(t.path / "v.json"));
}

TEST(VolumeIo, AtomicWriteLeavesNoTempFile) {
  TempDir t;
  write_series(t.path / "s.json", small_series(2));
  for (const auto& e : fs::directory_iterator(t.path)) EXPECT_NE(e.path().extension(), ".tmp") << e.path();
}

TEST(CheckpointIo, RoundTripKeepsEveryValue) {
  TempDir t;
  for (auto v : {NetVariant::Pairwise, NetVariant::B_ConvLSTM}) {
    NetConfig nc;
    nc.variant = v;
    nc.extent = {16, 16, 16};
    const auto p = init_params<float>(nc, 9);
    write_checkpoint(t.path / "c.json", p);
    const auto r = read_checkpoint(t.path / "c.json");
    EXPECT_EQ(r.config.variant, v);
    EXPECT_EQ(r.config.extent, nc.extent);
    ASSERT_EQ(r.tensors.size(), p.tensors.size());
    for (const auto& [name, ten] : p.tensors) {
      const auto& o = r.tensors.at(name);
      ASSERT_EQ(o.shape(), ten.shape()) << name;
      for (std::size_t i = 0; i < ten.size(); ++i) ASSERT_EQ(o.data()[i], ten.data()[i]) << name;
    }
  }
}

TEST(CheckpointIo, VariantLayoutMismatchIsFormatError) {
  TempDir t;
  NetConfig nc;
  nc.variant = NetVariant::Pairwise;
  nc.extent = {16, 16, 16};
  write_checkpoint(t.path / "c.json", init_params<float>(nc, 1));
  auto h = read_json(t.path / "c.json");
  h["variant"] = "b-convlstm";
  write_file_atomic(t.path / "c.json", dump_json(h));
  expect_kind<FormatError>([&] { read_checkpoint(t.path / "c.json"); }, "format");
}

TEST(CsvIo, RoundTripAndNumbers) {
  TempDir t;
  CsvTable tab;
  tab.header = {"a", "b"};
  tab.add({"1", fmt_num(0.1)});
  tab.add({"2", fmt_num(1.0 / 3.0)});
  write_csv(t.path / "x.csv", tab);
  const auto r = read_csv(t.path / "x.csv");
  EXPECT_EQ(r.header, tab.header);
  EXPECT_EQ(r.rows, tab.rows);
  EXPECT_EQ(parse_number(r.rows[1][1], "x"), 1.0 / 3.0);
  EXPECT_EQ(fmt_num(0.1), "0.1");
  EXPECT_THROW(parse_number("abc", "x"), FormatError);
}

TEST(CsvIo, FmtNumRoundTrips) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> u(-10, 10);
  for (int i = 0; i < 1000; ++i) {
    const double v = std::ldexp(u(rng), static_cast<int>(u(rng) * 5));
    EXPECT_EQ(std::stod(fmt_num(v)), v);
  }
}

TEST(CsvIo, RaggedRowIsFormatError) {
  TempDir t;
  write_file_atomic(t.path / "x.csv", "a,b\n1,2\n3\n");
  EXPECT_THROW(read_csv(t.path / "x.csv"), FormatError);
}

TEST(CsvIo, RoiTableRoundTrip) {
  TempDir t;
  std::vector<RoiRecord> rs{{"r0", kBenign, {0.01, 0.02, 0.003}}, {"r1", kMalignant, {0.015, 0.03, 0.004}}};
  write_csv(t.path / "r.csv", roi_table(rs));
  const auto back = read_rois(t.path / "r.csv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].id, rs[i].id);
    EXPECT_EQ(back[i].label, rs[i].label);
    for (int f = 0; f < 3; ++f) EXPECT_EQ(back[i].features[f], rs[i].features[f]);
  }
}

TEST(CsvIo, InputFunctionRoundTrip) {
  TempDir t;
  const auto f = InputFunctionModel{}.sampled(60.0);
  write_csv(t.path / "p.csv", input_function_table(f));
  const auto g = read_input_function(t.path / "p.csv");
  EXPECT_EQ(g.times, f.times);
  EXPECT_EQ(g.values, f.values);
}

TEST(ConfigIo, UnknownKeyIsConfigError) {
  expect_kind<ConfigError>([] { train_config_from_json(json{{"learning_rat", 0.1}}); }, "config");
  expect_kind<ConfigError>([] { train_config_from_json(json{{"epochs", "many"}}); }, "config");
  expect_kind<ConfigError>([] { phantom_from_json(json{{"colour", 1}}); }, "config");
  expect_kind<ConfigError>([] { experiment_from_json(json{{"frame", 8}}); }, "config");
}

TEST(ConfigIo, TrainConfigRoundTrip) {
  auto c = desk_train_config();
  c.lambda = 10.0;
  c.seed = 77;
  const auto back = train_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(back.variant, NetVariant::B_ConvLSTM);
}

TEST(ConfigIo, ExperimentRoundTrip) {
  DeskExperiment x;
  x.noise_sigma = 0.05;
  x.train.epochs = 3;
  const auto back = experiment_from_json(to_json(x));
  EXPECT_EQ(to_json(back), to_json(x));
}

TEST(ConfigIo, MotionSpecRoundTrip) {
  const auto c = make_case(DeskExperiment{}, 3);
  const auto back = motion_from_json(to_json(c.motion));
  EXPECT_EQ(to_json(back), to_json(c.motion));
}

TEST(Pgm, HeaderAndWindowing) {
  Tensor<double> v({2, 2, 3});
  for (std::size_t i = 0; i < v.size(); ++i) v.data()[i] = double(i);
  const auto p = pgm_slice(v, 0.0, 11.0, "x");
  EXPECT_EQ(p.rfind("P5", 0), 0u);
  EXPECT_NE(p.find("\n3 2\n255\n"), std::string::npos);
  // middle slice d=1 holds 6..11; last pixel hits the top of the window
  EXPECT_EQ(static_cast<unsigned char>(p.back()), 255);
}
