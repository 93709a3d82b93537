#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "densegrade/dataset.hpp"
#include "testutil.hpp"

using namespace densegrade;
using dgtest::TempDir;

namespace {

void touch(const std::filesystem::path& p) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream(p) << "x";
}

TEST(ScanDataset, FlatLayoutMockTree) {
  TempDir tmp("scan_flat");
  for (const char* fruit : kFruitNames)
    for (const char* quality : kQualityNames) {
      const std::string cls = std::string(fruit) + "_" + quality;
      touch(tmp.path() / cls / "a.png");
      touch(tmp.path() / cls / "b.png");
    }
  auto result = scan_dataset(tmp.path());
  EXPECT_EQ(result.total(), 36u);
  std::set<int> classes;
  for (const auto& r : result.records) classes.insert(fine_label(r.fruit, r.quality));
  EXPECT_EQ(classes.size(), 18u);
  for (int f = 0; f < 6; ++f)
    for (int q = 0; q < 3; ++q) EXPECT_EQ(result.counts[f][q], 2u);
  EXPECT_TRUE(result.unknown_dirs.empty());
}

TEST(ScanDataset, NestedLayout) {
  TempDir tmp("scan_nested");
  touch(tmp.path() / "Good" / "Apple" / "1.png");
  touch(tmp.path() / "Good" / "Banana" / "1.png");
  touch(tmp.path() / "Bad" / "Apple" / "1.png");
  auto result = scan_dataset(tmp.path());
  EXPECT_EQ(result.total(), 3u);
  EXPECT_EQ(result.counts[static_cast<int>(Fruit::Apple)][static_cast<int>(Quality::Good)], 1u);
  EXPECT_EQ(result.counts[static_cast<int>(Fruit::Apple)][static_cast<int>(Quality::Bad)], 1u);
}

TEST(ScanDataset, UnknownDirectoryReported) {
  TempDir tmp("scan_unknown");
  touch(tmp.path() / "Apple_Good" / "1.png");
  touch(tmp.path() / "Dragonfruit_Good" / "1.png");
  auto result = scan_dataset(tmp.path());
  EXPECT_EQ(result.total(), 1u);
  ASSERT_EQ(result.unknown_dirs.size(), 1u);
  EXPECT_NE(result.unknown_dirs[0].find("Dragonfruit_Good"), std::string::npos);
}

TEST(ScanDataset, EmptyDatasetIsError) {
  TempDir tmp("scan_empty");
  EXPECT_THROW(scan_dataset(tmp.path()), std::runtime_error);
  EXPECT_THROW(scan_dataset(tmp.path() / "missing"), std::runtime_error);
}

std::vector<SampleRecord> fake_class(Fruit f, Quality q, std::size_t n) {
  std::vector<SampleRecord> records;
  for (std::size_t i = 0; i < n; ++i)
    records.push_back({std::filesystem::path(to_string(f) + "_" + to_string(q)) /
                           (std::to_string(i) + ".png"),
                       f, q, Split::Train});
  return records;
}

std::size_t count_split(const std::vector<SampleRecord>& records, Split s) {
  std::size_t n = 0;
  for (const auto& r : records) n += r.split == s;
  return n;
}

TEST(StratifiedSplit, TestSupportsMatchClasswiseRounding) {
  // class sizes taken from the corpus distribution; expected test supports
  // are round(n * 0.2)
  struct Case {
    std::size_t n, expected_test;
  };
  for (auto [n, expected] : {Case{285, 57}, Case{5940, 1188}, Case{125, 25}, Case{148, 30}}) {
    auto records = fake_class(Fruit::Banana, Quality::Mixed, n);
    stratified_split(records, {0.6, 0.2, 0.2}, 42);
    EXPECT_EQ(count_split(records, Split::Test), expected) << "class size " << n;
    EXPECT_EQ(count_split(records, Split::Val), expected) << "class size " << n;
    EXPECT_EQ(count_split(records, Split::Train), n - 2 * expected);
  }
}

TEST(StratifiedSplit, PartitionPropertyPerClass) {
  std::vector<SampleRecord> records;
  const std::size_t sizes[] = {113, 285, 148, 278, 125, 57};
  for (int f = 0; f < 6; ++f) {
    auto cls = fake_class(static_cast<Fruit>(f), Quality::Good, sizes[f]);
    records.insert(records.end(), cls.begin(), cls.end());
  }
  stratified_split(records, {0.6, 0.2, 0.2}, 7);
  for (int f = 0; f < 6; ++f) {
    std::size_t n_test = 0, n_total = 0;
    for (const auto& r : records)
      if (r.fruit == static_cast<Fruit>(f)) {
        ++n_total;
        n_test += r.split == Split::Test;
      }
    EXPECT_EQ(n_total, sizes[f]);
    // within one sample of 20%
    EXPECT_LE(std::abs(static_cast<double>(n_test) - 0.2 * static_cast<double>(n_total)), 1.0);
  }
}

TEST(StratifiedSplit, DeterministicAndSeedSensitive) {
  auto records_a = fake_class(Fruit::Lime, Quality::Bad, 50);
  auto records_b = fake_class(Fruit::Lime, Quality::Bad, 50);
  stratified_split(records_a, {0.6, 0.2, 0.2}, 9);
  stratified_split(records_b, {0.6, 0.2, 0.2}, 9);
  for (std::size_t i = 0; i < records_a.size(); ++i)
    EXPECT_EQ(records_a[i].split, records_b[i].split);

  auto records_c = fake_class(Fruit::Lime, Quality::Bad, 50);
  stratified_split(records_c, {0.6, 0.2, 0.2}, 10);
  bool any_differs = false;
  for (std::size_t i = 0; i < records_a.size(); ++i)
    any_differs = any_differs || records_a[i].split != records_c[i].split;
  EXPECT_TRUE(any_differs);
}

TEST(StratifiedSplit, TinyClassIsDiagnosed) {
  auto records = fake_class(Fruit::Apple, Quality::Mixed, 2);
  try {
    stratified_split(records, {0.6, 0.2, 0.2}, 1);
    FAIL() << "expected a diagnostic";
  } catch (const std::runtime_error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("Apple"), std::string::npos);
    EXPECT_NE(msg.find("Mixed"), std::string::npos);
  }
}

TEST(StratifiedSplit, BadRatiosRejected) {
  auto records = fake_class(Fruit::Apple, Quality::Good, 10);
  EXPECT_THROW(stratified_split(records, {0.5, 0.2, 0.2}, 1), std::invalid_argument);
}

TEST(Relabel, OrderingContract) {
  EXPECT_EQ(TaskMode{}.label_of(Fruit::Apple, Quality::Bad), 0);
  EXPECT_EQ(TaskMode{}.label_of(Fruit::Pomegranate, Quality::Mixed), 17);
  TaskMode fruit6{TaskMode::Kind::Fruit6};
  for (auto q : {Quality::Bad, Quality::Good, Quality::Mixed})
    EXPECT_EQ(fruit6.label_of(Fruit::Guava, q), 2);
}

TEST(Relabel, Quality3CoversThreeLabelsEvenly) {
  TaskMode q3{TaskMode::Kind::Quality3};
  std::map<int, int> counts;
  for (int f = 0; f < 6; ++f)
    for (int q = 0; q < 3; ++q)
      counts[q3.label_of(static_cast<Fruit>(f), static_cast<Quality>(q))]++;
  ASSERT_EQ(counts.size(), 3u);
  for (const auto& [label, n] : counts) {
    EXPECT_GE(label, 0);
    EXPECT_LT(label, 3);
    EXPECT_EQ(n, 6);
  }
}

TEST(Relabel, ProjectionConsistency) {
  TaskMode fine{TaskMode::Kind::FineGrained18};
  TaskMode fruit6{TaskMode::Kind::Fruit6};
  TaskMode q3{TaskMode::Kind::Quality3};
  for (int f = 0; f < 6; ++f)
    for (int q = 0; q < 3; ++q) {
      const auto fruit = static_cast<Fruit>(f);
      const auto quality = static_cast<Quality>(q);
      const int fine_lbl = fine.label_of(fruit, quality);
      EXPECT_EQ(fruit6.project_fine(fine_lbl), fruit6.label_of(fruit, quality));
      EXPECT_EQ(q3.project_fine(fine_lbl), q3.label_of(fruit, quality));
    }
}

TEST(LoadBatch, SolidRedAtAnyResolution) {
  TempDir tmp("load_red");
  Image red;
  red.width = red.height = 10;
  red.pixels.assign(300, 0);
  for (int i = 0; i < 100; ++i) red.pixels[i * 3] = 255;
  const auto path = tmp.path() / "red.png";
  write_png(path, red);

  SampleRecord rec{path, Fruit::Apple, Quality::Good, Split::Train};
  const SampleRecord* recs[] = {&rec};
  for (int res : {4, 10, 16}) {
    LoadOptions opts;
    opts.resolution = res;
    auto batch = load_batch(recs, TaskMode{}, opts);
    EXPECT_EQ(batch.images.shape(),
              (Shape{1, 3, static_cast<std::size_t>(res), static_cast<std::size_t>(res)}));
    const std::size_t plane = static_cast<std::size_t>(res) * res;
    for (std::size_t i = 0; i < plane; ++i) {
      EXPECT_FLOAT_EQ(batch.images.values()[i], 1.0f);              // R
      EXPECT_FLOAT_EQ(batch.images.values()[plane + i], 0.0f);      // G
      EXPECT_FLOAT_EQ(batch.images.values()[2 * plane + i], 0.0f);  // B
    }
  }
}

// independent bilinear oracle: src = (dst + 0.5) * scale - 0.5, edge clamp
double oracle_bilinear(const std::vector<double>& src, int h, int w, int oy, int ox, int out_h,
                       int out_w) {
  const double sy = (oy + 0.5) * (static_cast<double>(h) / out_h) - 0.5;
  const double sx = (ox + 0.5) * (static_cast<double>(w) / out_w) - 0.5;
  const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
  const double fy = sy - y0, fx = sx - x0;
  auto px = [&](int y, int x) {
    return src[std::clamp(y, 0, h - 1) * w + std::clamp(x, 0, w - 1)];
  };
  return (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
         fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
}

TEST(Resize, CheckerboardUpscaleMatchesOracle) {
  std::vector<double> checker = {1, 0, 0, 1};
  auto t = Tensor64::from_vector({1, 2, 2}, checker);
  auto out = resize_bilinear(t, 4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x)
      EXPECT_NEAR(out.values()[y * 4 + x], oracle_bilinear(checker, 2, 2, y, x, 4, 4), 1e-6);
}

TEST(Resize, DownscaleMatchesOracle) {
  RngStream rng(14);
  std::vector<double> src(64);
  for (auto& v : src) v = rng.next_double();
  auto t = Tensor64::from_vector({1, 8, 8}, src);
  auto out = resize_bilinear(t, 3, 5);
  for (int y = 0; y < 3; ++y)
    for (int x = 0; x < 5; ++x)
      EXPECT_NEAR(out.values()[y * 5 + x], oracle_bilinear(src, 8, 8, y, x, 3, 5), 1e-6);
}

TEST(LoadBatch, BatchOf32) {
  TempDir tmp("load_batch32");
  generate_synthetic(tmp.path(), 2, 12, 99);
  auto scanned = scan_dataset(tmp.path());
  ASSERT_EQ(scanned.total(), 36u);
  std::vector<const SampleRecord*> recs;
  for (std::size_t i = 0; i < 32; ++i) recs.push_back(&scanned.records[i]);
  LoadOptions opts;
  opts.resolution = 12;
  auto batch = load_batch(recs, TaskMode{}, opts);
  EXPECT_EQ(batch.images.dim(0), 32u);
  EXPECT_EQ(batch.labels.size(), 32u);
}

TEST(LoadBatch, UndecodableFileNamesPath) {
  TempDir tmp("load_bad");
  const auto path = tmp.path() / "junk.png";
  std::ofstream(path) << "not a png";
  SampleRecord rec{path, Fruit::Apple, Quality::Good, Split::Train};
  const SampleRecord* recs[] = {&rec};
  try {
    load_batch(recs, TaskMode{}, LoadOptions{});
    FAIL() << "expected decode error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("junk.png"), std::string::npos);
  }
}

TEST(LoadBatch, DeterministicBitwise) {
  TempDir tmp("load_det");
  generate_synthetic(tmp.path(), 1, 10, 5);
  auto scanned = scan_dataset(tmp.path());
  std::vector<const SampleRecord*> recs;
  for (const auto& r : scanned.records) recs.push_back(&r);
  LoadOptions opts;
  opts.resolution = 8;
  opts.standardize = true;
  opts.channel_mean = {0.4, 0.4, 0.4};
  opts.channel_std = {0.2, 0.2, 0.2};
  auto a = load_batch(recs, TaskMode{}, opts);
  auto b = load_batch(recs, TaskMode{}, opts);
  EXPECT_EQ(a.images.values(), b.images.values());
  EXPECT_EQ(a.labels, b.labels);
}

TEST(Synthetic, CountContractAndLayout) {
  TempDir tmp("synth_count");
  auto result = generate_synthetic(tmp.path(), 2, 16, 1);
  EXPECT_EQ(result.files_written, 36u);
  std::size_t dirs = 0;
  for (const auto& e : std::filesystem::directory_iterator(tmp.path()))
    dirs += e.is_directory();
  EXPECT_EQ(dirs, 18u);
  EXPECT_TRUE(std::filesystem::exists(result.meta_csv));
  auto scanned = scan_dataset(tmp.path());
  EXPECT_EQ(scanned.total(), 36u);
  EXPECT_TRUE(scanned.unknown_dirs.empty());
}

TEST(Synthetic, SameSeedSameBytes) {
  TempDir a("synth_a"), b("synth_b");
  generate_synthetic(a.path(), 1, 16, 123);
  generate_synthetic(b.path(), 1, 16, 123);
  for (const char* rel : {"Apple_Good/Apple_Good_0.png", "Orange_Mixed/Orange_Mixed_0.png"}) {
    std::ifstream fa(a.path() / rel, std::ios::binary);
    std::ifstream fb(b.path() / rel, std::ios::binary);
    std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
    std::string db((std::istreambuf_iterator<char>(fb)), std::istreambuf_iterator<char>());
    EXPECT_FALSE(da.empty());
    EXPECT_EQ(da, db);
  }
  TempDir c("synth_c");
  generate_synthetic(c.path(), 1, 16, 124);
  std::ifstream fa(a.path() / "Apple_Good/Apple_Good_0.png", std::ios::binary);
  std::ifstream fc(c.path() / "Apple_Good/Apple_Good_0.png", std::ios::binary);
  std::string da((std::istreambuf_iterator<char>(fa)), std::istreambuf_iterator<char>());
  std::string dc((std::istreambuf_iterator<char>(fc)), std::istreambuf_iterator<char>());
  EXPECT_NE(da, dc);
}

TEST(Synthetic, BoundingBoxesCoverShapes) {
  TempDir tmp("synth_bbox");
  auto result = generate_synthetic(tmp.path(), 1, 32, 7);
  std::ifstream meta(result.meta_csv);
  std::string header, line;
  std::getline(meta, header);
  EXPECT_EQ(header, "path,fruit,quality,bbox_x0,bbox_y0,bbox_x1,bbox_y1");
  int rows = 0;
  while (std::getline(meta, line)) {
    ++rows;
    // bbox fields are the last four comma-separated values
    std::vector<std::string> parts;
    std::size_t pos = 0;
    while (true) {
      auto comma = line.find(',', pos);
      parts.push_back(line.substr(pos, comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
    ASSERT_EQ(parts.size(), 7u);
    const int x0 = std::stoi(parts[3]), y0 = std::stoi(parts[4]);
    const int x1 = std::stoi(parts[5]), y1 = std::stoi(parts[6]);
    EXPECT_LE(x0, x1);
    EXPECT_LE(y0, y1);
    EXPECT_GE(x0, 0);
    EXPECT_LT(x1, 32);
    // a recognizable shape, not a sliver
    EXPECT_GE(x1 - x0, 3);
    EXPECT_GE(y1 - y0, 3);
  }
  EXPECT_EQ(rows, 18);
}

TEST(ChannelStats, ComputedOverRecords) {
  TempDir tmp("stats");
  Image gray;
  gray.width = gray.height = 4;
  gray.pixels.assign(48, 128);
  write_png(tmp.path() / "g.png", gray);
  SampleRecord rec{tmp.path() / "g.png", Fruit::Apple, Quality::Good, Split::Train};
  const SampleRecord* recs[] = {&rec};
  auto [mean, stddev] = compute_channel_stats(recs, 4);
  for (int c = 0; c < 3; ++c) {
    EXPECT_NEAR(mean[c], 128.0 / 255.0, 1e-6);
    EXPECT_NEAR(stddev[c], 0.0, 1e-3);
  }
}

}  // namespace
