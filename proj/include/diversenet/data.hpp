// SPDX-License-Identifier: Apache-2.0
//
// Dataset machinery: raster tiling into fixed-size patches, deterministic
// labelled/unlabelled splitting, a synthetic segmentation set for desk-scale
// runs, the patch binary format, and the JSON dataset manifest.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diversenet/errors.hpp"
#include "diversenet/rng.hpp"
#include "diversenet/serialize.hpp"
#include "diversenet/tensor.hpp"
#include "diversenet/types.hpp"

namespace diversenet {

/// One raster: image [H, W, bands] with a spatially aligned label map.
/// `georeference` is opaque passthrough metadata.
struct RasterPair {
  Tensor<float> image;
  Tensor<std::int32_t> label;
  std::string georeference;
};

// ---------------------------------------------------------------------------
// Tiling

/// Window start offsets along one axis. The last window is clamped to end at
/// the raster edge, overlapping its predecessor when the extent is not a
/// multiple of the stride.
inline std::vector<std::int64_t> tile_offsets(std::int64_t extent, std::int64_t tile,
                                              std::int64_t stride) {
  if (tile > extent) throw ArgError("tile_raster: tile exceeds raster extent");
  if (stride < 1) throw ArgError("tile_raster: stride must be >= 1");
  std::vector<std::int64_t> offsets;
  for (std::int64_t p = 0; p + tile <= extent; p += stride) offsets.push_back(p);
  if (offsets.back() + tile < extent) offsets.push_back(extent - tile);
  return offsets;
}

inline std::vector<RasterPair> tile_raster(const RasterPair& pair, std::int64_t tile,
                                           std::int64_t stride) {
  const std::int64_t h = pair.image.dim(0), w = pair.image.dim(1), bands = pair.image.dim(2);
  if (pair.label.rank() != 2 || pair.label.dim(0) != h || pair.label.dim(1) != w)
    throw ShapeError("tile_raster: image and label are not spatially aligned");
  const auto ys = tile_offsets(h, tile, stride);
  const auto xs = tile_offsets(w, tile, stride);
  std::vector<RasterPair> patches;
  patches.reserve(ys.size() * xs.size());
  for (auto y0 : ys)
    for (auto x0 : xs) {
      RasterPair p;
      p.image = Tensor<float>({tile, tile, bands});
      p.label = Tensor<std::int32_t>({tile, tile});
      for (std::int64_t y = 0; y < tile; ++y) {
        const float* src = pair.image.data() + ((y0 + y) * w + x0) * bands;
        std::copy(src, src + tile * bands, p.image.data() + y * tile * bands);
        const std::int32_t* lsrc = pair.label.data() + (y0 + y) * w + x0;
        std::copy(lsrc, lsrc + tile, p.label.data() + y * tile);
      }
      p.georeference = pair.georeference;
      patches.push_back(std::move(p));
    }
  return patches;
}

// ---------------------------------------------------------------------------
// Splitting

/// Seed-deterministic uniform split into |labelled| = round(fraction * n)
/// items and the rest. Disjoint and exhaustive.
template <typename Item>
std::pair<std::vector<Item>, std::vector<Item>> split_dataset(const std::vector<Item>& items,
                                                              double labelled_fraction,
                                                              std::uint64_t seed) {
  if (items.empty()) throw ArgError("split_dataset: empty item list");
  if (!(labelled_fraction > 0.0 && labelled_fraction <= 1.0))
    throw ArgError("split_dataset: fraction must lie in (0, 1]");
  std::vector<std::size_t> order(items.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const auto n_lab = static_cast<std::size_t>(
      std::llround(labelled_fraction * static_cast<double>(items.size())));
  std::pair<std::vector<Item>, std::vector<Item>> out;
  out.first.reserve(n_lab);
  out.second.reserve(items.size() - n_lab);
  for (std::size_t i = 0; i < order.size(); ++i)
    (i < n_lab ? out.first : out.second).push_back(items[order[i]]);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

struct SynthParams {
  std::int64_t train_count = 220;
  std::int64_t val_count = 50;
  std::int64_t test_count = 100;
  std::int64_t size = 64;
  std::int64_t classes = 3;
  std::int64_t bands = 3;
  double noise = 0.15;
  std::uint64_t seed = 0;
  double min_class_fraction = 0.05;
};

inline void validate(const SynthParams& p) {
  if (p.classes < 2) throw ConfigError("synth: classes must be >= 2");
  if (p.size < 16) throw ConfigError("synth: size must be >= 16");
  if (p.bands < 1) throw ConfigError("synth: bands must be >= 1");
  if (p.train_count < 1 || p.val_count < 0 || p.test_count < 0)
    throw ConfigError("synth: counts must be positive");
  if (p.noise < 0.0 || !std::isfinite(p.noise)) throw ConfigError("synth: noise must be >= 0");
  if (p.min_class_fraction < 0.0 || p.min_class_fraction * static_cast<double>(p.classes) >= 1.0)
    throw ConfigError("synth: min_class_fraction infeasible for class count");
}

/// Class appearance model: band 0 carries evenly spaced class intensities;
/// all further bands are class-free nuisance. Per-image brightness jitter and
/// per-pixel texture stay inside the gap between adjacent class levels, so
/// with zero noise the per-class intensity intervals on band 0 are disjoint
/// and a nearest-level threshold classifier is exact.
inline double synth_class_level(std::int64_t cls, std::int64_t band, std::int64_t classes) {
  const double ramp =
      classes == 1 ? 0.5
                   : 0.2 + 0.6 * static_cast<double>(cls) / static_cast<double>(classes - 1);
  return band == 0 ? ramp : 0.5;
}

inline double synth_level_gap(std::int64_t classes) {
  return classes < 2 ? 0.6 : 0.6 / static_cast<double>(classes - 1);
}

/// One generated sample. Unlabelled training use hides `label`; the ground
/// truth stays available as an analysis sidecar.
struct Sample {
  Tensor<float> image;           // [S, S, bands]
  Tensor<std::int32_t> label;    // [S, S]
};

namespace detail {

struct SynthShape {
  std::int32_t cls;
  bool ellipse;
  double cy, cx, ry, rx, rot;
};

inline Sample synth_sample(const SynthParams& p, Rng& rng) {
  const std::int64_t s = p.size;
  const auto min_pixels =
      static_cast<std::int64_t>(p.min_class_fraction * static_cast<double>(s * s));
  Sample sample;
  sample.image = Tensor<float>({s, s, p.bands});
  sample.label = Tensor<std::int32_t>({s, s});

  for (int attempt = 0; attempt < 1000; ++attempt) {
    sample.label.fill(0);
    const std::int64_t shape_count = 2 + static_cast<std::int64_t>(rng.next_below(3));
    std::vector<SynthShape> shapes;
    for (std::int64_t k = 0; k < shape_count; ++k) {
      SynthShape sh;
      sh.cls = 1 + static_cast<std::int32_t>(rng.next_below(
                       static_cast<std::uint64_t>(p.classes - 1)));
      sh.ellipse = rng.next_bernoulli(0.5);
      sh.cy = rng.next_uniform(0.2, 0.8) * static_cast<double>(s);
      sh.cx = rng.next_uniform(0.2, 0.8) * static_cast<double>(s);
      sh.ry = rng.next_uniform(0.14, 0.34) * static_cast<double>(s);
      sh.rx = rng.next_uniform(0.14, 0.34) * static_cast<double>(s);
      sh.rot = rng.next_uniform(0.0, 3.14159265358979323846);
      shapes.push_back(sh);
    }
    for (std::int64_t y = 0; y < s; ++y)
      for (std::int64_t x = 0; x < s; ++x) {
        for (const auto& sh : shapes) {
          const double dy = static_cast<double>(y) + 0.5 - sh.cy;
          const double dx = static_cast<double>(x) + 0.5 - sh.cx;
          const double u = std::cos(sh.rot) * dx + std::sin(sh.rot) * dy;
          const double v = -std::sin(sh.rot) * dx + std::cos(sh.rot) * dy;
          const bool inside = sh.ellipse
                                  ? (u * u) / (sh.rx * sh.rx) + (v * v) / (sh.ry * sh.ry) <= 1.0
                                  : std::abs(u) <= sh.rx && std::abs(v) <= sh.ry;
          if (inside) sample.label.at(y, x) = sh.cls;
        }
      }
    std::vector<std::int64_t> counts(static_cast<std::size_t>(p.classes), 0);
    for (std::int64_t i = 0; i < sample.label.numel(); ++i)
      ++counts[static_cast<std::size_t>(sample.label[i])];
    const bool balanced = std::all_of(counts.begin(), counts.end(),
                                      [&](std::int64_t c) { return c >= min_pixels; });
    if (balanced) break;
    if (attempt == 999)
      throw ConfigError("synth: could not satisfy min_class_fraction; relax the bound");
  }

  // Appearance: per-image brightness jitter plus per-pixel texture, jointly
  // bounded to keep zero-noise class intervals disjoint on every
  // class-bearing band. Jitter carries most of the budget so that a small
  // labelled set cannot cover the appearance range by itself.
  const double gap = synth_level_gap(p.classes);
  const double jitter_amp = 0.30 * gap;
  const double texture_amp = 0.15 * gap;
  std::vector<double> band_offset(static_cast<std::size_t>(p.bands));
  for (auto& off : band_offset) off = rng.next_uniform(-jitter_amp, jitter_amp);
  for (std::int64_t y = 0; y < p.size; ++y)
    for (std::int64_t x = 0; x < p.size; ++x) {
      const std::int32_t cls = sample.label.at(y, x);
      for (std::int64_t b = 0; b < p.bands; ++b) {
        double value = synth_class_level(cls, b, p.classes) +
                       band_offset[static_cast<std::size_t>(b)] +
                       rng.next_uniform(-texture_amp, texture_amp);
        if (p.noise > 0.0) value += p.noise * rng.next_normal();
        sample.image.at(y, x, b) = static_cast<float>(value);
      }
    }
  return sample;
}

}  // namespace detail

/// In-memory dataset with the four split roles resolved.
struct SplitDataset {
  std::int64_t class_count = 0;
  std::int64_t band_count = 0;
  std::vector<Sample> train_labelled;
  std::vector<Sample> train_unlabelled;  // labels retained as analysis sidecars only
  std::vector<Sample> val;
  std::vector<Sample> test;
};

/// Deterministic synthetic segmentation set: randomly placed ellipses and
/// rectangles over a background class, per-class intensity levels, bounded
/// jitter/texture, optional Gaussian noise. Content is a pure function of
/// the parameters.
inline std::vector<Sample> synth_split(const SynthParams& p, const std::string& split_name,
                                       std::int64_t count) {
  validate(p);
  SeedFan fan(p.seed);
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    Rng rng = fan.rng("synth/" + split_name, static_cast<std::uint64_t>(i));
    out.push_back(detail::synth_sample(p, rng));
  }
  return out;
}

inline SplitDataset synth_dataset(const SynthParams& p, double labelled_fraction,
                                  std::uint64_t split_seed) {
  SplitDataset ds;
  ds.class_count = p.classes;
  ds.band_count = p.bands;
  auto train = synth_split(p, "train", p.train_count);
  auto [labelled, unlabelled] = split_dataset(train, labelled_fraction, split_seed);
  ds.train_labelled = std::move(labelled);
  ds.train_unlabelled = std::move(unlabelled);
  ds.val = synth_split(p, "val", p.val_count);
  ds.test = synth_split(p, "test", p.test_count);
  return ds;
}

// ---------------------------------------------------------------------------
// Patch binary format

inline constexpr char kPatchMagic[8] = {'D', 'N', 'P', 'A', 'T', 'C', 'H', '\0'};
inline constexpr std::uint32_t kPatchVersion = 1;

template <typename T>
void write_patch_file(const std::string& path, const Tensor<T>& t) {
  auto os = open_out(path);
  os.write(kPatchMagic, sizeof(kPatchMagic));
  write_pod<std::uint32_t>(os, kPatchVersion);
  write_tensor(os, t);
  if (!os) throw IoError("failed writing patch file: " + path);
}

template <typename T>
Tensor<T> read_patch_file(const std::string& path) {
  auto is = open_in(path);
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 8, kPatchMagic))
    throw IoError("not a patch file: " + path);
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kPatchVersion)
    throw SchemaError("unsupported patch version " + std::to_string(version) + " in " + path);
  return read_tensor<T>(is);
}

// ---------------------------------------------------------------------------
// Dataset manifest

enum class SplitTag { kTrainLabelled, kTrainUnlabelled, kVal, kTest };

inline std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::kTrainLabelled: return "train-labelled";
    case SplitTag::kTrainUnlabelled: return "train-unlabelled";
    case SplitTag::kVal: return "val";
    case SplitTag::kTest: return "test";
  }
  throw ArgError("unknown split tag");
}

inline SplitTag split_tag_from_string(const std::string& s) {
  if (s == "train-labelled") return SplitTag::kTrainLabelled;
  if (s == "train-unlabelled") return SplitTag::kTrainUnlabelled;
  if (s == "val") return SplitTag::kVal;
  if (s == "test") return SplitTag::kTest;
  throw SchemaError("manifest: unknown split tag '" + s + "'");
}

struct PatchRecord {
  std::string image;                         // path relative to the manifest
  std::optional<std::string> label;          // absent for train-unlabelled
  std::optional<std::string> sidecar_label;  // analysis-only ground truth
  SplitTag split = SplitTag::kTrainLabelled;

  friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

struct DatasetManifest {
  static constexpr std::int64_t kSchemaVersion = 1;

  std::string root;  // directory of the manifest file; not serialized
  std::int64_t class_count = 0;
  std::int64_t band_count = 0;
  std::vector<PatchRecord> patches;
  nlohmann::json provenance = nlohmann::json::object();

  std::vector<const PatchRecord*> split(SplitTag tag) const {
    std::vector<const PatchRecord*> out;
    for (const auto& p : patches)
      if (p.split == tag) out.push_back(&p);
    return out;
  }

  std::string resolve(const std::string& rel) const {
    return (std::filesystem::path(root) / rel).string();
  }
};

inline bool manifest_equal(const DatasetManifest& a, const DatasetManifest& b) {
  return a.class_count == b.class_count && a.band_count == b.band_count &&
         a.patches == b.patches && a.provenance == b.provenance;
}

inline void write_manifest(const DatasetManifest& m, const std::string& path) {
  nlohmann::json j;
  j["schema_version"] = DatasetManifest::kSchemaVersion;
  j["class_count"] = m.class_count;
  j["band_count"] = m.band_count;
  j["provenance"] = m.provenance;
  auto& arr = j["patches"] = nlohmann::json::array();
  for (const auto& p : m.patches) {
    nlohmann::json rec;
    rec["image"] = p.image;
    rec["label"] = p.label ? nlohmann::json(*p.label) : nlohmann::json(nullptr);
    if (p.sidecar_label) rec["sidecar_label"] = *p.sidecar_label;
    rec["split"] = to_string(p.split);
    arr.push_back(std::move(rec));
  }
  std::ofstream os(path);
  if (!os) throw IoError("cannot write manifest: " + path);
  os << j.dump(2) << '\n';
}

inline DatasetManifest read_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read manifest: " + path);
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest parse error in " + path + ": " + e.what());
  }
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
    throw SchemaError("manifest: missing schema_version");
  if (j["schema_version"].get<std::int64_t>() != DatasetManifest::kSchemaVersion)
    throw SchemaError("manifest: unsupported schema version " + j["schema_version"].dump());
  DatasetManifest m;
  m.root = std::filesystem::path(path).parent_path().string();
  try {
    m.class_count = j.at("class_count").get<std::int64_t>();
    m.band_count = j.at("band_count").get<std::int64_t>();
    if (j.contains("provenance")) m.provenance = j["provenance"];
    for (const auto& rec : j.at("patches")) {
      PatchRecord p;
      p.image = rec.at("image").get<std::string>();
      if (!rec.at("label").is_null()) p.label = rec["label"].get<std::string>();
      if (rec.contains("sidecar_label")) p.sidecar_label = rec["sidecar_label"].get<std::string>();
      p.split = split_tag_from_string(rec.at("split").get<std::string>());
      if (p.split == SplitTag::kTrainUnlabelled && p.label)
        throw SchemaError("manifest: train-unlabelled record carries a label: " + p.image);
      if (p.split != SplitTag::kTrainUnlabelled && !p.label)
        throw SchemaError("manifest: labelled record lacks a label: " + p.image);
      m.patches.push_back(std::move(p));
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("manifest schema violation in " + path + ": " + e.what());
  }
  if (m.class_count < 2) throw SchemaError("manifest: class_count must be >= 2");
  if (m.band_count < 1) throw SchemaError("manifest: band_count must be >= 1");
  return m;
}

/// Checks that every referenced patch file exists.
inline void validate_manifest_files(const DatasetManifest& m) {
  auto check = [&](const std::string& rel) {
    const std::string full = m.resolve(rel);
    if (!std::filesystem::exists(full))
      throw MissingFileError("manifest references missing file: " + full);
  };
  for (const auto& p : m.patches) {
    check(p.image);
    if (p.label) check(*p.label);
    if (p.sidecar_label) check(*p.sidecar_label);
  }
}

/// Writes every sample of a split dataset as patch files under `dir` and
/// returns the manifest describing them.
inline DatasetManifest write_dataset(const SplitDataset& ds, const std::string& dir,
                                     const nlohmann::json& provenance) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "patches");
  DatasetManifest m;
  m.root = dir;
  m.class_count = ds.class_count;
  m.band_count = ds.band_count;
  m.provenance = provenance;

  auto emit = [&](const std::vector<Sample>& samples, SplitTag tag, const std::string& stem) {
    for (std::size_t i = 0; i < samples.size(); ++i) {
      PatchRecord rec;
      rec.split = tag;
      const std::string base = "patches/" + stem + "_" + std::to_string(i);
      rec.image = base + ".img.bin";
      write_patch_file(m.resolve(rec.image), samples[i].image);
      if (tag == SplitTag::kTrainUnlabelled) {
        rec.sidecar_label = base + ".gt.bin";
        write_patch_file(m.resolve(*rec.sidecar_label), samples[i].label);
      } else {
        rec.label = base + ".lbl.bin";
        write_patch_file(m.resolve(*rec.label), samples[i].label);
      }
      m.patches.push_back(std::move(rec));
    }
  };
  emit(ds.train_labelled, SplitTag::kTrainLabelled, "trl");
  emit(ds.train_unlabelled, SplitTag::kTrainUnlabelled, "tru");
  emit(ds.val, SplitTag::kVal, "val");
  emit(ds.test, SplitTag::kTest, "test");
  write_manifest(m, (fs::path(dir) / "manifest.json").string());
  return m;
}

/// Generates the synthetic set, writes it under `dir`, and returns the manifest.
inline DatasetManifest synth_segmentation_set(const SynthParams& params, double labelled_fraction,
                                              std::uint64_t split_seed, const std::string& dir) {
  SplitDataset ds = synth_dataset(params, labelled_fraction, split_seed);
  nlohmann::json prov;
  prov["generator"] = "synth";
  prov["labelled_fraction"] = labelled_fraction;
  prov["split_seed"] = split_seed;
  prov["synth"] = {{"train_count", params.train_count}, {"val_count", params.val_count},
                   {"test_count", params.test_count},   {"size", params.size},
                   {"classes", params.classes},         {"bands", params.bands},
                   {"noise", params.noise},             {"seed", params.seed},
                   {"min_class_fraction", params.min_class_fraction}};
  return write_dataset(ds, dir, prov);
}

/// Loads a manifest-backed dataset into memory.
inline SplitDataset load_dataset(const DatasetManifest& m) {
  validate_manifest_files(m);
  SplitDataset ds;
  ds.class_count = m.class_count;
  ds.band_count = m.band_count;
  auto load_into = [&](SplitTag tag, std::vector<Sample>& out) {
    for (const auto* rec : m.split(tag)) {
      Sample s;
      s.image = read_patch_file<float>(m.resolve(rec->image));
      if (rec->label) {
        s.label = read_patch_file<std::int32_t>(m.resolve(*rec->label));
      } else if (rec->sidecar_label) {
        s.label = read_patch_file<std::int32_t>(m.resolve(*rec->sidecar_label));
      } else {
        s.label = Tensor<std::int32_t>({s.image.dim(0), s.image.dim(1)}, kIgnoreLabel);
      }
      out.push_back(std::move(s));
    }
  };
  load_into(SplitTag::kTrainLabelled, ds.train_labelled);
  load_into(SplitTag::kTrainUnlabelled, ds.train_unlabelled);
  load_into(SplitTag::kVal, ds.val);
  load_into(SplitTag::kTest, ds.test);
  return ds;
}

}  // namespace diversenet
