#pragma once

#include <array>
#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "densegrade/image.hpp"
#include "densegrade/rng.hpp"
#include "densegrade/tensor.hpp"

namespace densegrade {

enum class Fruit { Apple, Banana, Guava, Lime, Orange, Pomegranate };
enum class Quality { Bad, Good, Mixed };  // label order is alphabetical
enum class Split { Train, Val, Test };

constexpr std::array<const char*, 6> kFruitNames = {"Apple", "Banana", "Guava",
                                                    "Lime",  "Orange", "Pomegranate"};
constexpr std::array<const char*, 3> kQualityNames = {"Bad", "Good", "Mixed"};
constexpr std::array<const char*, 3> kSplitNames = {"Train", "Val", "Test"};

inline std::string to_string(Fruit f) { return kFruitNames[static_cast<int>(f)]; }
inline std::string to_string(Quality q) { return kQualityNames[static_cast<int>(q)]; }
inline std::string to_string(Split s) { return kSplitNames[static_cast<int>(s)]; }

namespace detail {
inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}
}  // namespace detail

inline std::optional<Fruit> parse_fruit(const std::string& s) {
  const std::string l = detail::lower(s);
  for (int i = 0; i < 6; ++i)
    if (l == detail::lower(kFruitNames[i])) return static_cast<Fruit>(i);
  return std::nullopt;
}

inline std::optional<Quality> parse_quality(const std::string& s) {
  const std::string l = detail::lower(s);
  for (int i = 0; i < 3; ++i)
    if (l == detail::lower(kQualityNames[i])) return static_cast<Quality>(i);
  return std::nullopt;
}

struct SampleRecord {
  std::filesystem::path path;
  Fruit fruit;
  Quality quality;
  Split split = Split::Train;
};

// fine-grained class index: fruit-major, quality-minor (Apple/Bad = 0 ...)
inline int fine_label(Fruit f, Quality q) {
  return static_cast<int>(f) * 3 + static_cast<int>(q);
}

// The three evaluation tasks; Fruit6 and Quality3 are projections of the
// 18-way fine-grained labeling.
struct TaskMode {
  enum class Kind { FineGrained18, Fruit6, Quality3 };
  Kind kind = Kind::FineGrained18;

  int num_classes() const {
    switch (kind) {
      case Kind::FineGrained18: return 18;
      case Kind::Fruit6: return 6;
      case Kind::Quality3: return 3;
    }
    return 0;
  }

  int label_of(Fruit f, Quality q) const {
    switch (kind) {
      case Kind::FineGrained18: return fine_label(f, q);
      case Kind::Fruit6: return static_cast<int>(f);
      case Kind::Quality3: return static_cast<int>(q);
    }
    return 0;
  }

  // projection of an 18-way label onto this task
  int project_fine(int fine) const {
    switch (kind) {
      case Kind::FineGrained18: return fine;
      case Kind::Fruit6: return fine / 3;
      case Kind::Quality3: return fine % 3;
    }
    return 0;
  }

  std::vector<std::string> class_names() const {
    std::vector<std::string> names;
    switch (kind) {
      case Kind::FineGrained18:
        for (int f = 0; f < 6; ++f)
          for (int q = 0; q < 3; ++q)
            names.push_back(std::string(kFruitNames[f]) + "_" + kQualityNames[q]);
        break;
      case Kind::Fruit6:
        names.assign(kFruitNames.begin(), kFruitNames.end());
        break;
      case Kind::Quality3:
        names.assign(kQualityNames.begin(), kQualityNames.end());
        break;
    }
    return names;
  }

  std::string name() const {
    switch (kind) {
      case Kind::FineGrained18: return "fine18";
      case Kind::Fruit6: return "fruit6";
      case Kind::Quality3: return "quality3";
    }
    return "";
  }

  static TaskMode parse(const std::string& s) {
    const std::string l = detail::lower(s);
    if (l == "fine18" || l == "finegrained18" || l == "fine") return {Kind::FineGrained18};
    if (l == "fruit6" || l == "fruit") return {Kind::Fruit6};
    if (l == "quality3" || l == "quality") return {Kind::Quality3};
    throw std::invalid_argument("unknown task '" + s + "' (expected fine18|fruit6|quality3)");
  }
};

// ---------------------------------------------------------------------------
// scanning
// ---------------------------------------------------------------------------

struct ScanResult {
  std::vector<SampleRecord> records;
  std::vector<std::string> unknown_dirs;             // reported, never silently skipped
  std::array<std::array<std::size_t, 3>, 6> counts{};  // [fruit][quality]

  std::size_t total() const { return records.size(); }
};

// Recognizes two layouts:
//   flat:   <root>/<Fruit>_<Quality>/*
//   nested: <root>/<Quality>/<Fruit>/*
inline ScanResult scan_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::exists(root))
    throw std::runtime_error("dataset root '" + root.string() + "' does not exist");

  ScanResult result;
  auto add_dir_files = [&result](const std::filesystem::path& dir, Fruit f, Quality q) {
    for (const auto& entry : std::filesystem::directory_iterator(dir)) {
      if (!entry.is_regular_file()) continue;
      result.records.push_back({entry.path(), f, q, Split::Train});
      result.counts[static_cast<int>(f)][static_cast<int>(q)]++;
    }
  };

  for (const auto& entry : std::filesystem::directory_iterator(root)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();

    const auto underscore = name.find('_');
    if (underscore != std::string::npos) {
      auto fruit = parse_fruit(name.substr(0, underscore));
      auto quality = parse_quality(name.substr(underscore + 1));
      if (fruit && quality) {
        add_dir_files(entry.path(), *fruit, *quality);
        continue;
      }
    }
    if (auto quality = parse_quality(name)) {
      for (const auto& sub : std::filesystem::directory_iterator(entry.path())) {
        if (!sub.is_directory()) {
          continue;
        }
        const std::string fruit_name = sub.path().filename().string();
        if (auto fruit = parse_fruit(fruit_name))
          add_dir_files(sub.path(), *fruit, *quality);
        else
          result.unknown_dirs.push_back(sub.path().string());
      }
      continue;
    }
    result.unknown_dirs.push_back(entry.path().string());
  }

  std::sort(result.records.begin(), result.records.end(),
            [](const SampleRecord& a, const SampleRecord& b) { return a.path < b.path; });
  std::sort(result.unknown_dirs.begin(), result.unknown_dirs.end());
  if (result.records.empty())
    throw std::runtime_error("dataset root '" + root.string() + "' contains no samples" +
                             (result.unknown_dirs.empty()
                                  ? ""
                                  : " (unrecognized entries: " + result.unknown_dirs[0] + " ...)"));
  return result;
}

// ---------------------------------------------------------------------------
// splitting / labeling
// ---------------------------------------------------------------------------

// Per-class shuffle + allocation: round(n * test) to Test, round(n * val) to
// Val, remainder to Train. Round-half-up, per class, keyed by (seed, class).
inline void stratified_split(std::vector<SampleRecord>& records,
                             std::array<double, 3> ratios = {0.6, 0.2, 0.2},
                             std::uint64_t seed = 0) {
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("stratified_split: ratios must sum to 1");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < records.size(); ++i)
    by_class[fine_label(records[i].fruit, records[i].quality)].push_back(i);

  for (auto& [cls, indices] : by_class) {
    const std::size_t n = indices.size();
    if (n < 3)
      throw std::runtime_error(
          "stratified_split: class " + std::string(kFruitNames[cls / 3]) + "/" +
          kQualityNames[cls % 3] + " has only " + std::to_string(n) +
          " samples; at least 3 are needed to populate train/val/test");
    // indices arrive in path order; shuffle deterministically per class
    RngStream rng = keyed_stream(seed, 0x73706c6974ull, static_cast<std::uint64_t>(cls));
    shuffle(indices, rng);
    const auto n_test = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[2]));
    const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * ratios[1]));
    for (std::size_t i = 0; i < n; ++i) {
      Split s = Split::Train;
      if (i < n_test)
        s = Split::Test;
      else if (i < n_test + n_val)
        s = Split::Val;
      records[indices[i]].split = s;
    }
  }
}

inline std::vector<int> relabel(std::span<const SampleRecord> records, TaskMode task) {
  std::vector<int> labels;
  labels.reserve(records.size());
  for (const auto& r : records) labels.push_back(task.label_of(r.fruit, r.quality));
  return labels;
}

inline void write_split_csv(std::span<const SampleRecord> records,
                            const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write split manifest '" + path.string() + "'");
  out << "path,fruit,quality,split\n";
  for (const auto& r : records)
    out << r.path.string() << ',' << to_string(r.fruit) << ',' << to_string(r.quality) << ','
        << to_string(r.split) << '\n';
}

// ---------------------------------------------------------------------------
// batch loading
// ---------------------------------------------------------------------------

struct LoadOptions {
  int resolution = 256;
  bool standardize = false;
  std::array<double, 3> channel_mean = {0, 0, 0};
  std::array<double, 3> channel_std = {1, 1, 1};
};

struct Batch {
  Tensor images;  // N x 3 x R x R, scaled to [0,1], optionally standardized
  std::vector<int> labels;
  std::vector<const SampleRecord*> records;
};

inline Tensor load_image_tensor(const std::filesystem::path& path, const LoadOptions& opts) {
  Image img;
  try {
    img = read_png(path);
  } catch (const std::exception& e) {
    throw std::runtime_error("undecodable image '" + path.string() + "': " + e.what());
  }
  auto t = image_to_tensor<float>(img);
  t = resize_bilinear(t, static_cast<std::size_t>(opts.resolution),
                      static_cast<std::size_t>(opts.resolution));
  if (opts.standardize) {
    const std::size_t plane = static_cast<std::size_t>(opts.resolution) * opts.resolution;
    float* p = t.data();
    for (int c = 0; c < 3; ++c) {
      const float m = static_cast<float>(opts.channel_mean[c]);
      const float inv = static_cast<float>(1.0 / opts.channel_std[c]);
      for (std::size_t i = 0; i < plane; ++i) p[c * plane + i] = (p[c * plane + i] - m) * inv;
    }
  }
  return t;
}

inline Batch load_batch(std::span<const SampleRecord* const> records, TaskMode task,
                        const LoadOptions& opts) {
  if (records.empty()) throw std::invalid_argument("load_batch: empty record slice");
  const auto r = static_cast<std::size_t>(opts.resolution);
  Batch batch;
  batch.images = Tensor::zeros({records.size(), 3, r, r});
  batch.records.assign(records.begin(), records.end());
  const std::size_t sample_size = 3 * r * r;
  for (std::size_t i = 0; i < records.size(); ++i) {
    auto t = load_image_tensor(records[i]->path, opts);
    std::copy(t.data(), t.data() + sample_size, batch.images.data() + i * sample_size);
    batch.labels.push_back(task.label_of(records[i]->fruit, records[i]->quality));
  }
  return batch;
}

// Per-channel mean/std over a record set (in [0,1] space, before
// standardization); cached in the run configuration by the CLI.
inline std::pair<std::array<double, 3>, std::array<double, 3>> compute_channel_stats(
    std::span<const SampleRecord* const> records, int resolution) {
  if (records.empty()) throw std::invalid_argument("compute_channel_stats: no records");
  LoadOptions opts;
  opts.resolution = resolution;
  std::array<double, 3> sum{}, sum_sq{};
  std::size_t count = 0;
  for (const auto* rec : records) {
    auto t = load_image_tensor(rec->path, opts);
    const std::size_t plane = static_cast<std::size_t>(resolution) * resolution;
    const float* p = t.data();
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        sum[c] += p[c * plane + i];
        sum_sq[c] += static_cast<double>(p[c * plane + i]) * p[c * plane + i];
      }
    count += plane;
  }
  std::array<double, 3> mean{}, stddev{};
  for (int c = 0; c < 3; ++c) {
    mean[c] = sum[c] / static_cast<double>(count);
    const double var = sum_sq[c] / static_cast<double>(count) - mean[c] * mean[c];
    stddev[c] = std::sqrt(std::max(var, 1e-8));
  }
  return {mean, stddev};
}

// ---------------------------------------------------------------------------
// synthetic dataset: 6 procedural shapes x 3 texture grades
// ---------------------------------------------------------------------------

struct SyntheticResult {
  std::size_t files_written = 0;
  std::filesystem::path meta_csv;  // per-file shape bounding boxes
};

namespace detail {

struct ShapeSpec {
  Fruit fruit;
  double cx, cy;       // pixels
  double radius;       // pixels
  double rotation;     // radians
  std::array<double, 3> color;
};

inline bool point_in_shape(const ShapeSpec& s, double px, double py) {
  const double dx = px - s.cx, dy = py - s.cy;
  // rotate into the shape frame
  const double ca = std::cos(-s.rotation), sa = std::sin(-s.rotation);
  const double x = ca * dx - sa * dy;
  const double y = sa * dx + ca * dy;
  const double r = s.radius;
  switch (s.fruit) {
    case Fruit::Apple:  // circle
      return x * x + y * y <= r * r;
    case Fruit::Banana: {  // crescent: circle minus an offset circle
      if (x * x + y * y > r * r) return false;
      const double ox = x - 0.55 * r;
      return ox * ox + y * y > 0.7225 * r * r;  // (0.85 r)^2
    }
    case Fruit::Guava: {  // ellipse, aspect ~1.8
      const double u = x / r, v = y / (0.55 * r);
      return u * u + v * v <= 1.0;
    }
    case Fruit::Lime:  // small circle
      return x * x + y * y <= 0.25 * r * r;
    case Fruit::Orange: {  // ring
      const double d2 = x * x + y * y;
      return d2 <= r * r && d2 >= 0.3025 * r * r;  // inner 0.55 r
    }
    case Fruit::Pomegranate: {  // regular triangle
      const double apothem = 0.5 * r;
      for (int i = 0; i < 3; ++i) {
        const double th = 2.0 * std::numbers::pi * i / 3.0;
        if (x * std::cos(th) + y * std::sin(th) > apothem) return false;
      }
      return true;
    }
  }
  return false;
}

// 2x2 supersampled coverage in [0,1]
inline double shape_coverage(const ShapeSpec& s, int px, int py) {
  int hits = 0;
  for (double oy : {0.25, 0.75})
    for (double ox : {0.25, 0.75})
      if (point_in_shape(s, px + ox, py + oy)) ++hits;
  return hits / 4.0;
}

struct Blotch {
  double cx, cy, radius;
};

}  // namespace detail

struct SyntheticSample {
  Image image;
  int bbox_x0 = 0, bbox_y0 = 0, bbox_x1 = 0, bbox_y1 = 0;  // inclusive pixel bounds
};

// Renders one synthetic sample. Class identity is carried by shape (fruit)
// and blotch texture (quality); size, position, orientation and color jitter
// are drawn from `rng`.
inline SyntheticSample render_synthetic_sample(Fruit fruit, Quality quality, int resolution,
                                               RngStream& rng) {
  const double S = resolution;
  detail::ShapeSpec shape;
  shape.fruit = fruit;
  const double qx = rng.bernoulli(0.5) ? 0.36 : 0.64;
  const double qy = rng.bernoulli(0.5) ? 0.36 : 0.64;
  shape.cx = (qx + rng.uniform(-0.04, 0.04)) * S;
  shape.cy = (qy + rng.uniform(-0.04, 0.04)) * S;
  shape.radius = rng.uniform(0.27, 0.33) * S;
  shape.rotation = rng.uniform(0.0, 2.0 * std::numbers::pi);

  static constexpr std::array<std::array<double, 3>, 6> kBaseColors = {{
      {0.78, 0.16, 0.12},  // Apple
      {0.88, 0.78, 0.18},  // Banana
      {0.55, 0.75, 0.30},  // Guava
      {0.20, 0.65, 0.22},  // Lime
      {0.95, 0.55, 0.10},  // Orange
      {0.60, 0.10, 0.30},  // Pomegranate
  }};
  for (int c = 0; c < 3; ++c)
    shape.color[c] =
        std::clamp(kBaseColors[static_cast<int>(fruit)][c] + rng.uniform(-0.06, 0.06), 0.0, 1.0);

  std::array<double, 3> bg;
  for (int c = 0; c < 3; ++c) bg[c] = std::clamp(0.42 + rng.uniform(-0.04, 0.04), 0.0, 1.0);

  // texture grades: Good = clean, Bad = dark blotches scattered over the
  // whole shape, Mixed = one solid spoiled half. Blotch centers are
  // rejection-sampled onto the visible shape so ring/crescent/small-disc
  // classes carry the same quality signal as filled shapes.
  std::vector<detail::Blotch> blotches;
  double half_dx = 0.0, half_dy = 0.0;
  static constexpr std::array<double, 6> kVisibleScale = {1.0, 0.9, 0.9, 0.5, 1.0, 0.8};
  const double r_eff = shape.radius * kVisibleScale[static_cast<int>(fruit)];
  if (quality == Quality::Mixed) {
    const double half_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    half_dx = std::cos(half_angle);
    half_dy = std::sin(half_angle);
  } else if (quality == Quality::Bad) {
    const double axis = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double ax = std::cos(axis), ay = std::sin(axis);
    const int target = 6 + static_cast<int>(rng.next_below(3));
    int attempts = 0;
    while (static_cast<int>(blotches.size()) < target && attempts < 600) {
      ++attempts;
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double dist = rng.uniform(0.0, 0.9) * shape.radius;
      const double bx = shape.cx + dist * std::cos(ang);
      const double by = shape.cy + dist * std::sin(ang);
      if (!detail::point_in_shape(shape, bx, by)) continue;
      // alternate sides of a random axis so coverage never looks half-sided
      const double side = (bx - shape.cx) * ax + (by - shape.cy) * ay;
      const bool want_positive = blotches.size() % 2 == 0;
      if (want_positive ? side <= 0.0 : side >= 0.0) continue;
      blotches.push_back({bx, by, std::max(1.3, rng.uniform(0.3, 0.45) * r_eff)});
    }
  }

  const std::uint64_t noise_key = rng.next_u64();

  SyntheticSample sample;
  sample.image.width = resolution;
  sample.image.height = resolution;
  sample.image.pixels.resize(static_cast<std::size_t>(resolution) * resolution * 3);
  bool any_inside = false;
  int x0 = resolution, y0 = resolution, x1 = -1, y1 = -1;

  for (int py = 0; py < resolution; ++py)
    for (int px = 0; px < resolution; ++px) {
      const double cov = detail::shape_coverage(shape, px, py);
      RngStream pixel_rng = keyed_stream(noise_key, static_cast<std::uint64_t>(py) * resolution + px);
      std::array<double, 3> color;
      for (int c = 0; c < 3; ++c) color[c] = bg[c] + pixel_rng.uniform(-0.03, 0.03);
      if (cov > 0.0) {
        std::array<double, 3> fg = shape.color;
        if (quality == Quality::Mixed) {
          // solid brown-rotted half with a ~1px soft boundary
          static constexpr std::array<double, 3> kRot = {0.45, 0.26, 0.10};
          const double side =
              (px + 0.5 - shape.cx) * half_dx + (py + 0.5 - shape.cy) * half_dy;
          const double dark = std::clamp(side + 0.5, 0.0, 1.0);
          for (int c = 0; c < 3; ++c) fg[c] = (1.0 - dark) * fg[c] + dark * kRot[c] * fg[c] * 1.6;
        }
        for (const auto& b : blotches) {
          const double dx = px + 0.5 - b.cx, dy = py + 0.5 - b.cy;
          if (dx * dx + dy * dy <= b.radius * b.radius) {
            for (int c = 0; c < 3; ++c) fg[c] *= 0.18;
            break;
          }
        }
        const double speckle = pixel_rng.uniform(-0.05, 0.05);
        for (int c = 0; c < 3; ++c) {
          const double v = std::clamp(fg[c] + speckle, 0.0, 1.0);
          color[c] = (1.0 - cov) * color[c] + cov * v;
        }
        if (cov >= 0.5) {
          any_inside = true;
          x0 = std::min(x0, px);
          y0 = std::min(y0, py);
          x1 = std::max(x1, px);
          y1 = std::max(y1, py);
        }
      }
      for (int c = 0; c < 3; ++c)
        sample.image.pixels[(static_cast<std::size_t>(py) * resolution + px) * 3 + c] =
            static_cast<std::uint8_t>(std::clamp(std::round(color[c] * 255.0), 0.0, 255.0));
    }

  if (!any_inside) {
    x0 = y0 = 0;
    x1 = y1 = resolution - 1;
  }
  sample.bbox_x0 = x0;
  sample.bbox_y0 = y0;
  sample.bbox_x1 = x1;
  sample.bbox_y1 = y1;
  return sample;
}

// Writes per_class files for each of the 18 classes under
// <root>/<Fruit>_<Quality>/ plus a meta.csv with shape bounding boxes.
inline SyntheticResult generate_synthetic(const std::filesystem::path& root, int per_class,
                                          int resolution, std::uint64_t seed) {
  if (per_class <= 0) throw std::invalid_argument("generate_synthetic: per_class must be > 0");
  if (resolution < 8) throw std::invalid_argument("generate_synthetic: resolution must be >= 8");
  std::filesystem::create_directories(root);

  SyntheticResult result;
  result.meta_csv = root / "meta.csv";
  std::ofstream meta(result.meta_csv, std::ios::trunc);
  if (!meta) throw std::runtime_error("cannot write '" + result.meta_csv.string() + "'");
  meta << "path,fruit,quality,bbox_x0,bbox_y0,bbox_x1,bbox_y1\n";

  for (int f = 0; f < 6; ++f)
    for (int q = 0; q < 3; ++q) {
      const auto fruit = static_cast<Fruit>(f);
      const auto quality = static_cast<Quality>(q);
      const std::string cls = to_string(fruit) + "_" + to_string(quality);
      const auto dir = root / cls;
      std::filesystem::create_directories(dir);
      for (int i = 0; i < per_class; ++i) {
        RngStream rng = keyed_stream(seed, static_cast<std::uint64_t>(fine_label(fruit, quality)),
                                     static_cast<std::uint64_t>(i));
        auto sample = render_synthetic_sample(fruit, quality, resolution, rng);
        const std::string name = cls + "_" + std::to_string(i) + ".png";
        write_png(dir / name, sample.image);
        meta << (std::filesystem::path(cls) / name).generic_string() << ',' << to_string(fruit)
             << ',' << to_string(quality) << ',' << sample.bbox_x0 << ',' << sample.bbox_y0 << ','
             << sample.bbox_x1 << ',' << sample.bbox_y1 << '\n';
        ++result.files_written;
      }
    }
  return result;
}

}  // namespace densegrade
