#pragma once

// On-disk formats: the volume container (JSON sidecar + raw little-endian
// float32 payload), network checkpoints, CSV tables, PGM slice exports and
// JSON configuration. Every writer goes through a temp file and a rename.

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "moco/classify.hpp"
#include "moco/net.hpp"
#include "moco/patlak.hpp"
#include "moco/phantom.hpp"
#include "moco/pipeline.hpp"
#include "moco/series.hpp"
#include "moco/trainer.hpp"

namespace moco {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Atomic file writes

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw FormatError("cannot open " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Writes next to the destination and renames over it, so readers see either
// the old file or the complete new one.
inline void write_file_atomic(const fs::path& p, const std::string& bytes) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  fs::path tmp = p;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw FormatError("short write to " + tmp.string());
    }
  }
  fs::rename(tmp, p);
}

inline std::string dump_json(const json& j) { return j.dump(2) + "\n"; }

inline json read_json(const fs::path& p) {
  const auto text = read_file(p);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
}

// Shortest text that reads back to the same double.
inline std::string fmt_num(double v) {
  if (!std::isfinite(v)) return std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf");
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

// ---------------------------------------------------------------------------
// Volume container

// Frames outermost, then channels, then D, H, W (row-major).
struct VolumeContainer {
  Extent3 extent{};
  std::size_t channels = 1;
  std::size_t frames = 1;
  std::array<double, 3> voxel_mm{1.0, 1.0, 1.0};
  std::vector<double> mid_times, durations;  // empty, or one per frame
  std::string units = "SUV";
  std::vector<float> payload;

  std::size_t frame_values() const { return extent.voxels() * channels; }

  void validate() const {
    if (extent.d == 0 || extent.h == 0 || extent.w == 0 || channels == 0 || frames == 0)
      throw FormatError("volume dims must be positive");
    if (payload.size() != frame_values() * frames)
      throw FormatError("payload holds " + std::to_string(payload.size()) + " values, header implies " +
                        std::to_string(frame_values() * frames));
    if (!mid_times.empty() || !durations.empty()) {
      if (mid_times.size() != frames || durations.size() != frames)
        throw FormatError("frame timing must list one mid-time and duration per frame");
      for (std::size_t k = 0; k < frames; ++k) {
        if (!std::isfinite(mid_times[k]) || !(durations[k] > 0.0)) throw FormatError("invalid frame timing");
        if (k > 0 && !(mid_times[k] > mid_times[k - 1])) throw FormatError("frame mid-times must be strictly increasing");
      }
    }
    for (double s : voxel_mm)
      if (!(s > 0.0) || !std::isfinite(s)) throw FormatError("voxel size must be positive");
  }
};

namespace detail {

inline fs::path payload_path(const fs::path& header) {
  fs::path p = header;
  p.replace_extension(".raw");
  return p;
}

inline std::string payload_bytes(const std::vector<float>& v) {
  std::string b(v.size() * 4, '\0');
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = std::bit_cast<std::uint32_t>(v[i]);
    for (int k = 0; k < 4; ++k) b[4 * i + static_cast<std::size_t>(k)] = static_cast<char>((u >> (8 * k)) & 0xffu);
  }
  return b;
}

inline std::vector<float> payload_values(const std::string& b) {
  std::vector<float> v(b.size() / 4);
  for (std::size_t i = 0; i < v.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k)
      u |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[4 * i + static_cast<std::size_t>(k)])) << (8 * k);
    v[i] = std::bit_cast<float>(u);
  }
  return v;
}

template <class T>
T field(const json& j, const char* key, const fs::path& where) {
  if (!j.contains(key)) throw FormatError(where.string() + ": missing '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw FormatError(where.string() + ": bad value for '" + key + "'");
  }
}

}  // namespace detail

// `header` names the JSON sidecar; the payload sits beside it with a .raw
// extension. The payload is renamed into place first, the header last.
inline void write_volume(const fs::path& header, const VolumeContainer& v) {
  v.validate();
  const auto raw = detail::payload_path(header);
  json h;
  h["format"] = "moco-volume";
  h["version"] = 1;
  h["dims"] = {v.extent.d, v.extent.h, v.extent.w};
  h["channels"] = v.channels;
  h["frames"] = v.frames;
  h["voxel_mm"] = v.voxel_mm;
  h["mid_times_min"] = v.mid_times;
  h["durations_min"] = v.durations;
  h["units"] = v.units;
  h["endianness"] = "little";
  h["dtype"] = "float32";
  h["payload"] = raw.filename().string();
  write_file_atomic(raw, detail::payload_bytes(v.payload));
  write_file_atomic(header, dump_json(h));
}

inline VolumeContainer read_volume(const fs::path& header) {
  const json h = read_json(header);
  if (!h.is_object() || h.value("format", "") != "moco-volume") throw FormatError(header.string() + ": not a volume header");
  if (detail::field<std::string>(h, "dtype", header) != "float32")
    throw FormatError(header.string() + ": unsupported dtype " + h["dtype"].dump());
  if (detail::field<std::string>(h, "endianness", header) != "little")
    throw FormatError(header.string() + ": unsupported endianness");
  VolumeContainer v;
  const auto dims = detail::field<std::vector<long long>>(h, "dims", header);
  if (dims.size() != 3) throw FormatError(header.string() + ": dims must have three entries");
  for (auto d : dims)
    if (d <= 0) throw FormatError(header.string() + ": dims must be positive");
  v.extent = {static_cast<std::size_t>(dims[0]), static_cast<std::size_t>(dims[1]), static_cast<std::size_t>(dims[2])};
  const auto ch = detail::field<long long>(h, "channels", header), fr = detail::field<long long>(h, "frames", header);
  if (ch <= 0 || fr <= 0) throw FormatError(header.string() + ": channels and frames must be positive");
  v.channels = static_cast<std::size_t>(ch);
  v.frames = static_cast<std::size_t>(fr);
  v.voxel_mm = detail::field<std::array<double, 3>>(h, "voxel_mm", header);
  v.mid_times = detail::field<std::vector<double>>(h, "mid_times_min", header);
  v.durations = detail::field<std::vector<double>>(h, "durations_min", header);
  v.units = detail::field<std::string>(h, "units", header);
  const auto name = detail::field<std::string>(h, "payload", header);
  if (name.empty() || fs::path(name).filename() != fs::path(name))
    throw FormatError(header.string() + ": payload must be a file name beside the header");
  const auto bytes = read_file(header.parent_path() / name);
  const std::size_t expect = v.frame_values() * v.frames * 4;
  if (bytes.size() != expect)
    throw FormatError(header.string() + ": payload is " + std::to_string(bytes.size()) + " bytes, expected " +
                      std::to_string(expect));
  v.payload = detail::payload_values(bytes);
  v.validate();
  return v;
}

inline VolumeContainer to_container(const FrameSeries& s) {
  s.validate();
  VolumeContainer v;
  v.extent = s.extent;
  v.frames = s.size();
  v.voxel_mm = s.voxel_mm;
  v.mid_times = s.mid_times;
  v.durations = s.durations;
  v.units = s.units;
  for (const auto& f : s.frames)
    for (double x : f.data()) v.payload.push_back(static_cast<float>(x));
  return v;
}

inline FrameSeries to_series(const VolumeContainer& v) {
  v.validate();
  if (v.channels != 1) throw FormatError("a frame series needs single-channel frames");
  if (v.mid_times.empty()) throw FormatError("a frame series needs frame timing");
  FrameSeries s;
  s.extent = v.extent;
  s.voxel_mm = v.voxel_mm;
  s.mid_times = v.mid_times;
  s.durations = v.durations;
  s.units = v.units;
  const std::size_t n = v.frame_values();
  for (std::size_t k = 0; k < v.frames; ++k) {
    Tensor<double> f(v.extent.shape());
    for (std::size_t i = 0; i < n; ++i) f[i] = v.payload[k * n + i];
    s.frames.push_back(std::move(f));
  }
  s.validate();
  return s;
}

// Stack of same-shaped tensors ([D,H,W] or [C,D,H,W]) as the frames of one container.
template <class T>
VolumeContainer stack_container(const std::vector<Tensor<T>>& ts, const std::array<double, 3>& voxel_mm,
                                const std::string& units) {
  if (ts.empty()) throw DimensionError("nothing to store");
  VolumeContainer v;
  v.extent = spatial_extent(ts.front());
  v.channels = ts.front().rank() == 4 ? ts.front().dim(0) : 1;
  v.frames = ts.size();
  v.voxel_mm = voxel_mm;
  v.units = units;
  for (const auto& t : ts) {
    if (t.shape() != ts.front().shape()) throw DimensionError("stacked tensors differ in shape");
    for (std::size_t i = 0; i < t.size(); ++i) v.payload.push_back(static_cast<float>(t[i]));
  }
  return v;
}

inline std::vector<Tensor<double>> unstack_container(const VolumeContainer& v) {
  v.validate();
  const Shape sh = v.channels == 1 ? v.extent.shape() : v.extent.shape(v.channels);
  const std::size_t n = v.frame_values();
  std::vector<Tensor<double>> out;
  for (std::size_t k = 0; k < v.frames; ++k) {
    Tensor<double> t(sh);
    for (std::size_t i = 0; i < n; ++i) t[i] = v.payload[k * n + i];
    out.push_back(std::move(t));
  }
  return out;
}

inline void write_series(const fs::path& p, const FrameSeries& s) { write_volume(p, to_container(s)); }
inline FrameSeries read_series(const fs::path& p) { return to_series(read_volume(p)); }

// ---------------------------------------------------------------------------
// Checkpoints: JSON layout + raw float32 values in layout order.

template <class T>
void write_checkpoint(const fs::path& header, const NetParams<T>& p) {
  p.validate();
  json h;
  h["format"] = "moco-checkpoint";
  h["version"] = 1;
  h["variant"] = variant_name(p.config.variant);
  h["extent"] = {p.config.extent.d, p.config.extent.h, p.config.extent.w};
  h["slope"] = p.config.slope;
  h["dtype"] = "float32";
  h["endianness"] = "little";
  const auto raw = detail::payload_path(header);
  h["payload"] = raw.filename().string();
  std::vector<float> vals;
  json layout = json::array();
  for (const auto& [name, shape] : net_layout(p.config)) {
    layout.push_back({{"name", name}, {"shape", shape}});
    for (const auto x : p.tensors.at(name).data()) vals.push_back(static_cast<float>(x));
  }
  h["tensors"] = layout;
  write_file_atomic(raw, detail::payload_bytes(vals));
  write_file_atomic(header, dump_json(h));
}

inline NetParams<float> read_checkpoint(const fs::path& header) {
  const json h = read_json(header);
  if (!h.is_object() || h.value("format", "") != "moco-checkpoint")
    throw FormatError(header.string() + ": not a checkpoint");
  NetParams<float> p;
  p.config.variant = parse_variant(detail::field<std::string>(h, "variant", header));
  const auto e = detail::field<std::array<std::size_t, 3>>(h, "extent", header);
  p.config.extent = {e[0], e[1], e[2]};
  p.config.slope = detail::field<double>(h, "slope", header);
  const auto bytes = read_file(header.parent_path() / detail::field<std::string>(h, "payload", header));
  const auto vals = detail::payload_values(bytes);
  const auto layout = net_layout(p.config);
  if (vals.size() * 4 != bytes.size() || vals.size() != count_params(layout))
    throw FormatError(header.string() + ": payload size does not match the " +
                      std::string(variant_name(p.config.variant)) + " layout");
  std::size_t off = 0;
  const auto listed = detail::field<json>(h, "tensors", header);
  if (!listed.is_array() || listed.size() != layout.size()) throw FormatError(header.string() + ": tensor list mismatch");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& [name, shape] = layout[i];
    if (listed[i].value("name", "") != name || listed[i].value("shape", Shape{}) != shape)
      throw FormatError(header.string() + ": tensor " + std::to_string(i) + " is not " + name);
    Tensor<float> t(shape);
    std::copy(vals.begin() + static_cast<long>(off), vals.begin() + static_cast<long>(off + t.size()), t.ptr());
    off += t.size();
    p.tensors.emplace(name, std::move(t));
  }
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void add(std::vector<std::string> r) {
    if (r.size() != header.size()) throw InternalError("csv row width differs from header");
    rows.push_back(std::move(r));
  }
  std::string str() const {
    std::string s;
    auto line = [&](const std::vector<std::string>& r) {
      for (std::size_t i = 0; i < r.size(); ++i) s += (i ? "," : "") + r[i];
      s += "\n";
    };
    line(header);
    for (const auto& r : rows) line(r);
    return s;
  }
};

inline void write_csv(const fs::path& p, const CsvTable& t) { write_file_atomic(p, t.str()); }

inline CsvTable read_csv(const fs::path& p) {
  std::istringstream in(read_file(p));
  CsvTable t;
  std::string line;
  auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  if (!std::getline(in, line)) throw FormatError(p.string() + ": empty CSV");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  t.header = split(line);
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto r = split(line);
    if (r.size() != t.header.size()) throw FormatError(p.string() + ":" + std::to_string(n) + ": wrong column count");
    t.rows.push_back(std::move(r));
  }
  return t;
}

inline double parse_number(const std::string& s, const std::string& where) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    throw FormatError(where + ": '" + s + "' is not a number");
  }
  if (used != s.size()) throw FormatError(where + ": '" + s + "' is not a number");
  return v;
}

inline CsvTable loss_table(const std::vector<EpochLoss>& trace) {
  CsvTable t{{"epoch", "mean_loss", "similarity_term", "smoothness_term"}, {}};
  for (const auto& e : trace)
    t.add({std::to_string(e.epoch), fmt_num(e.mean_loss), fmt_num(e.similarity), fmt_num(e.smoothness)});
  return t;
}

inline CsvTable roi_table(const std::vector<RoiRecord>& rs) {
  CsvTable t{{"id", "label", "ki_mean", "ki_max", "ki_std"}, {}};
  for (const auto& r : rs)
    t.add({r.id, std::to_string(r.label), fmt_num(r.features[0]), fmt_num(r.features[1]), fmt_num(r.features[2])});
  return t;
}

inline std::vector<RoiRecord> read_rois(const fs::path& p) {
  const auto t = read_csv(p);
  const std::vector<std::string> want{"id", "label", "ki_mean", "ki_max", "ki_std"};
  if (t.header != want) throw FormatError(p.string() + ": expected header id,label,ki_mean,ki_max,ki_std");
  std::vector<RoiRecord> out;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto where = p.string() + ":" + std::to_string(i + 2);
    const auto& r = t.rows[i];
    RoiRecord rec;
    rec.id = r[0];
    const double lab = parse_number(r[1], where);
    if (lab != 0.0 && lab != 1.0) throw FormatError(where + ": label must be 0 or 1");
    rec.label = static_cast<int>(lab);
    for (std::size_t j = 0; j < 3; ++j) rec.features[j] = parse_number(r[2 + j], where);
    rec.validate();
    out.push_back(rec);
  }
  return out;
}

inline CsvTable input_function_table(const InputFunction& f) {
  CsvTable t{{"time_min", "plasma"}, {}};
  for (std::size_t i = 0; i < f.times.size(); ++i) t.add({fmt_num(f.times[i]), fmt_num(f.values[i])});
  return t;
}

inline InputFunction read_input_function(const fs::path& p) {
  const auto t = read_csv(p);
  if (t.header != std::vector<std::string>{"time_min", "plasma"})
    throw FormatError(p.string() + ": expected header time_min,plasma");
  InputFunction f;
  for (std::size_t i = 0; i < t.rows.size(); ++i) {
    const auto where = p.string() + ":" + std::to_string(i + 2);
    f.times.push_back(parse_number(t.rows[i][0], where));
    f.values.push_back(parse_number(t.rows[i][1], where));
  }
  try {
    f.validate();
  } catch (const Error& e) {
    throw FormatError(p.string() + ": " + e.what());
  }
  return f;
}

// ---------------------------------------------------------------------------
// PGM export of the central axial slice (fixed d index), 8-bit, linear
// window [lo, hi] recorded in a header comment.

inline std::string pgm_slice(const Tensor<double>& vol, double lo, double hi, const std::string& label) {
  if (vol.rank() != 3) throw DimensionError("pgm export expects a [D,H,W] volume");
  if (!(hi > lo)) throw ConfigError("pgm window must satisfy hi > lo");
  const auto e = spatial_extent(vol);
  const std::size_t z = e.d / 2;
  std::string s = "P5\n# " + label + " slice d=" + std::to_string(z) + " window " + fmt_num(lo) + " " + fmt_num(hi) +
                  "\n" + std::to_string(e.w) + " " + std::to_string(e.h) + "\n255\n";
  for (std::size_t y = 0; y < e.h; ++y)
    for (std::size_t x = 0; x < e.w; ++x) {
      double v = vol.at(z, y, x);
      v = std::isfinite(v) ? (v - lo) / (hi - lo) : 0.0;
      v = std::clamp(v, 0.0, 1.0);
      s.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  return s;
}

// ---------------------------------------------------------------------------
// JSON configuration. Unknown keys are rejected so typos do not silently fall
// back to defaults.

namespace detail {

inline void reject_unknown(const json& j, std::initializer_list<const char*> known, const std::string& what) {
  if (!j.is_object()) throw ConfigError(what + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError(what + ": unknown key '" + it.key() + "'");
  }
}

template <class T>
void take(const json& j, const char* key, T& out, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(what + ": bad value for '" + key + "'");
  }
}

}  // namespace detail

inline json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},               {"lambda", c.lambda},
          {"seed", c.seed},                   {"downsample_factor", c.downsample_factor},
          {"cutoff", c.cutoff},               {"noise_sigma", c.noise_sigma},
          {"window_length", c.window_length}, {"reference_index", c.reference_index},
          {"first_frame", c.first_frame},     {"last_frame", c.last_frame},
          {"ncc_window", c.ncc_window},       {"variant", variant_name(c.variant)}};
}

inline TrainConfig train_config_from_json(const json& j, TrainConfig c = {}) {
  const std::string w = "train config";
  detail::reject_unknown(j,
                         {"learning_rate", "batch_size", "epochs", "lambda", "seed", "downsample_factor", "cutoff",
                          "noise_sigma", "window_length", "reference_index", "first_frame", "last_frame", "ncc_window",
                          "variant"},
                         w);
  detail::take(j, "learning_rate", c.learning_rate, w);
  detail::take(j, "batch_size", c.batch_size, w);
  detail::take(j, "epochs", c.epochs, w);
  detail::take(j, "lambda", c.lambda, w);
  detail::take(j, "seed", c.seed, w);
  detail::take(j, "downsample_factor", c.downsample_factor, w);
  detail::take(j, "cutoff", c.cutoff, w);
  detail::take(j, "noise_sigma", c.noise_sigma, w);
  detail::take(j, "window_length", c.window_length, w);
  detail::take(j, "reference_index", c.reference_index, w);
  detail::take(j, "first_frame", c.first_frame, w);
  detail::take(j, "last_frame", c.last_frame, w);
  detail::take(j, "ncc_window", c.ncc_window, w);
  if (j.contains("variant")) {
    std::string v;
    detail::take(j, "variant", v, w);
    c.variant = parse_variant(v);
  }
  c.validate();
  return c;
}

inline json to_json(const PhantomSpec& s) {
  json regions = json::array();
  for (const auto& r : s.regions)
    regions.push_back({{"name", r.name},
                       {"shape", r.shape == RegionShape::Ellipsoid ? "ellipsoid" : "box"},
                       {"centre", r.centre},
                       {"radii", r.radii},
                       {"ki", r.ki},
                       {"vb", r.vb},
                       {"tumour", r.tumour}});
  return {{"extent", {s.extent.d, s.extent.h, s.extent.w}},
          {"voxel_mm", s.voxel_mm},
          {"background_ki", s.background_ki},
          {"background_vb", s.background_vb},
          {"regions", regions}};
}

inline PhantomSpec phantom_from_json(const json& j, PhantomSpec s = PhantomSpec::desk_default()) {
  const std::string w = "phantom config";
  detail::reject_unknown(j, {"extent", "voxel_mm", "background_ki", "background_vb", "regions"}, w);
  if (j.contains("extent")) {
    std::array<std::size_t, 3> e{};
    detail::take(j, "extent", e, w);
    s.extent = {e[0], e[1], e[2]};
  }
  detail::take(j, "voxel_mm", s.voxel_mm, w);
  detail::take(j, "background_ki", s.background_ki, w);
  detail::take(j, "background_vb", s.background_vb, w);
  if (j.contains("regions")) {
    if (!j["regions"].is_array()) throw ConfigError(w + ": regions must be an array");
    s.regions.clear();
    for (const auto& rj : j["regions"]) {
      const std::string rw = w + " region";
      detail::reject_unknown(rj, {"name", "shape", "centre", "radii", "ki", "vb", "tumour"}, rw);
      Region r;
      std::string shape = "ellipsoid";
      detail::take(rj, "name", r.name, rw);
      detail::take(rj, "shape", shape, rw);
      if (shape != "ellipsoid" && shape != "box") throw ConfigError(rw + ": shape must be ellipsoid or box");
      r.shape = shape == "box" ? RegionShape::Box : RegionShape::Ellipsoid;
      detail::take(rj, "centre", r.centre, rw);
      detail::take(rj, "radii", r.radii, rw);
      detail::take(rj, "ki", r.ki, rw);
      detail::take(rj, "vb", r.vb, rw);
      detail::take(rj, "tumour", r.tumour, rw);
      s.regions.push_back(r);
    }
  }
  s.validate();
  return s;
}

inline json to_json(const MotionSpec& m) {
  json frames = json::array();
  for (const auto& f : m.frames) frames.push_back({{"translation_mm", f.translation_mm}, {"scale", f.scale}});
  return {{"frames", frames},
          {"centre", m.centre},
          {"envelope_sigma", m.envelope_sigma},
          {"bound_mm", m.bound_mm},
          {"seed", m.seed}};
}

inline MotionSpec motion_from_json(const json& j) {
  const std::string w = "motion config";
  detail::reject_unknown(j, {"frames", "centre", "envelope_sigma", "bound_mm", "seed"}, w);
  MotionSpec m;
  detail::take(j, "centre", m.centre, w);
  detail::take(j, "envelope_sigma", m.envelope_sigma, w);
  detail::take(j, "bound_mm", m.bound_mm, w);
  detail::take(j, "seed", m.seed, w);
  if (j.contains("frames")) {
    if (!j["frames"].is_array()) throw ConfigError(w + ": frames must be an array");
    for (const auto& fj : j["frames"]) {
      detail::reject_unknown(fj, {"translation_mm", "scale"}, w + " frame");
      FrameMotion f;
      detail::take(fj, "translation_mm", f.translation_mm, w);
      detail::take(fj, "scale", f.scale, w);
      m.frames.push_back(f);
    }
  }
  return m;
}

// Simulation settings of the desk experiment (training settings live in their
// own file).
inline json to_json(const DeskExperiment& x) {
  return {{"phantom", to_json(x.phantom)},
          {"frames", x.frames},
          {"frame_start", x.frame_start},
          {"frame_duration", x.frame_duration},
          {"noise_sigma", x.noise_sigma},
          {"max_shift_vox", x.max_shift_vox},
          {"max_strain", x.max_strain},
          {"envelope_sigma", x.envelope_sigma},
          {"t_star", x.t_star},
          {"reference_index", x.train.reference_index}};
}

inline DeskExperiment experiment_from_json(const json& j, DeskExperiment x = {}) {
  const std::string w = "simulation config";
  detail::reject_unknown(j,
                         {"phantom", "frames", "frame_start", "frame_duration", "noise_sigma", "max_shift_vox",
                          "max_strain", "envelope_sigma", "t_star", "reference_index", "motion"},
                         w);
  if (j.contains("phantom")) x.phantom = phantom_from_json(j["phantom"], x.phantom);
  detail::take(j, "frames", x.frames, w);
  detail::take(j, "frame_start", x.frame_start, w);
  detail::take(j, "frame_duration", x.frame_duration, w);
  detail::take(j, "noise_sigma", x.noise_sigma, w);
  detail::take(j, "max_shift_vox", x.max_shift_vox, w);
  detail::take(j, "max_strain", x.max_strain, w);
  detail::take(j, "envelope_sigma", x.envelope_sigma, w);
  detail::take(j, "t_star", x.t_star, w);
  detail::take(j, "reference_index", x.train.reference_index, w);
  if (x.frames < 2) throw ConfigError(w + ": at least two frames are needed");
  if (!(x.frame_duration > 0.0) || x.frame_start < 0.0) throw ConfigError(w + ": invalid frame timing");
  if (x.noise_sigma < 0.0 || x.max_shift_vox < 0.0 || x.envelope_sigma < 0.0) throw ConfigError(w + ": negative magnitude");
  if (!(x.max_strain >= 0.0 && x.max_strain < 1.0)) throw ConfigError(w + ": max_strain must lie in [0, 1)");
  if (x.train.reference_index < 0 || static_cast<std::size_t>(x.train.reference_index) >= x.frames)
    throw ConfigError(w + ": reference_index out of range");
  return x;
}

// ---------------------------------------------------------------------------
// Metrics report

inline json flagged_json(const Flagged& f) { return f.defined ? json(f.value) : json(nullptr); }

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const ConditionMetrics& c) {
  return {{"name", c.name},
          {"mean_nfe", finite_or_null(c.mean_nfe)},
          {"max_nfe", finite_or_null(c.max_nfe)},
          {"tumour_nfe", finite_or_null(c.tumour_nfe)},
          {"tumour_ki_mean", finite_or_null(c.tumour_ki.mean)},
          {"tumour_ki_max", finite_or_null(c.tumour_ki.max)},
          {"tumour_ki_std", finite_or_null(c.tumour_ki.std)},
          {"ki_vb_nmi", flagged_json(c.ki_vb_nmi)},
          {"ki_vb_ncc", flagged_json(c.ki_vb_ncc)},
          {"fitted_voxels", c.fitted_voxels}};
}

inline CsvTable condition_table(const std::vector<ConditionMetrics>& cs) {
  CsvTable t{{"condition", "mean_nfe", "max_nfe", "tumour_nfe", "tumour_ki_mean", "tumour_ki_max", "tumour_ki_std",
              "ki_vb_nmi", "ki_vb_ncc", "fitted_voxels"},
             {}};
  auto fl = [](const Flagged& f) { return f.defined ? fmt_num(f.value) : std::string("undefined"); };
  for (const auto& c : cs)
    t.add({c.name, fmt_num(c.mean_nfe), fmt_num(c.max_nfe), fmt_num(c.tumour_nfe), fmt_num(c.tumour_ki.mean),
           fmt_num(c.tumour_ki.max), fmt_num(c.tumour_ki.std), fl(c.ki_vb_nmi), fl(c.ki_vb_ncc),
           std::to_string(c.fitted_voxels)});
  return t;
}

}  // namespace moco
