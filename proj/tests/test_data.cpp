#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "dsg/data.hpp"
#include "dsg/netpbm.hpp"

using namespace dsg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dsg_test_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

SegSample numbered_sample(int h, int w) {
  SegSample s;
  s.image = Tensor({3, h, w});
  s.mask = LabelMap({h, w});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) s.image[(c * h + y) * w + x] = float(c * 1000 + y * 10 + x);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) s.mask.data[y * w + x] = (y + x) % 4;
  return s;
}

}  // namespace

TEST(Data, RenderingIsDeterministicPerSeed) {
  Rng a = sample_rng(42, 3), b = sample_rng(42, 3), c = sample_rng(42, 4);
  const SegSample sa = render_base(a, 32), sb = render_base(b, 32), sc = render_base(c, 32);
  EXPECT_EQ(sa.image, sb.image);
  EXPECT_EQ(sa.mask, sb.mask);
  EXPECT_NE(sa.image, sc.image);
  EXPECT_EQ(sa.image.shape(), (Shape{3, 32, 32}));
  std::set<int> classes(sa.mask.data.begin(), sa.mask.data.end());
  for (int id : classes) EXPECT_TRUE(id >= 0 && id < kNumShapeClasses);
  EXPECT_TRUE(classes.count(0));
  EXPECT_GE(classes.size(), 2u);
  for (float v : sa.image.data()) EXPECT_TRUE(v >= 0 && v <= 1);
}

TEST(Data, DomainTransformsFollowTheirFormulas) {
  Rng r = sample_rng(7, 0);
  const SegSample base = render_base(r, 24);
  Rng n0(1);
  EXPECT_EQ(apply_domain(base.image, 0, n0), base.image);
  auto check = [&](int d, auto f) {
    Rng rng(1);
    const Tensor out = apply_domain(base.image, d, rng);
    for (std::size_t i = 0; i < out.numel(); ++i)
      ASSERT_EQ(out[i], static_cast<float>(std::clamp(f(double(base.image[i]), i), 0.0, 1.0))) << d << " " << i;
  };
  check(1, [](double v, std::size_t) { return v + 0.25; });
  check(2, [](double v, std::size_t) { return v - 0.25; });
  check(6, [](double v, std::size_t) { return 0.5 + 0.6 * (v - 0.5); });
  const std::size_t plane = base.image.numel() / 3;
  check(4, [&](double v, std::size_t i) { return 0.7 * v + 0.3 * std::vector<double>{0.10, 0.35, 1.00}[i / plane]; });

  Rng a(5), b(5);
  EXPECT_EQ(apply_domain(base.image, 3, a), apply_domain(base.image, 3, b));
  Rng c(6);
  EXPECT_NE(apply_domain(base.image, 3, a), apply_domain(base.image, 3, c));
  EXPECT_THROW(apply_domain(base.image, 7, a), std::invalid_argument);
}

TEST(Data, CropAndFlipExamples) {
  const SegSample s = numbered_sample(5, 6);
  const SegSample c = crop(s, 1, 2, 3);
  EXPECT_EQ(c.image.shape(), (Shape{3, 3, 3}));
  EXPECT_EQ(c.image[0], 12.0f);              // channel 0, y=1, x=2
  EXPECT_EQ(c.image[2 * 9 + 8], 2034.0f);    // channel 2, y=3, x=4
  EXPECT_EQ(c.mask.data[0], (1 + 2) % 4);
  EXPECT_EQ(c.mask.data[8], (3 + 4) % 4);
  EXPECT_THROW(crop(s, 3, 0, 3), std::invalid_argument);
  EXPECT_THROW(crop(s, 0, 0, 6), std::invalid_argument);

  const SegSample f = hflip(s);
  for (int y = 0; y < 5; ++y)
    for (int x = 0; x < 6; ++x) {
      EXPECT_EQ(f.image[(1 * 5 + y) * 6 + x], s.image[(1 * 5 + y) * 6 + (5 - x)]);
      EXPECT_EQ(f.mask.data[y * 6 + x], s.mask.data[y * 6 + (5 - x)]);
    }
  EXPECT_EQ(hflip(f).image, s.image);
}

TEST(Data, RandomCropUsesDrawnOffsets) {
  const SegSample s = numbered_sample(10, 12);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed), replay(seed);
    const SegSample c = random_crop(s, 4, rng);
    std::uniform_int_distribution<int> ty(0, 6), tx(0, 8);
    const int top = ty(replay);
    const int left = tx(replay);
    EXPECT_EQ(c.image, crop(s, top, left, 4).image);
    EXPECT_EQ(c.mask, crop(s, top, left, 4).mask);
    EXPECT_EQ(c.image[0], float(top * 10 + left));
  }
  Rng rng(1);
  EXPECT_THROW(random_crop(s, 11, rng), std::invalid_argument);
}

TEST(Data, RandomFlipKeepsImageAndMaskTogether) {
  const SegSample s = numbered_sample(4, 4);
  int flipped = 0;
  for (std::uint64_t seed = 0; seed < 64; ++seed) {
    Rng rng(seed);
    const SegSample r = random_hflip(s, rng);
    const bool is_flipped = r.image == hflip(s).image;
    EXPECT_TRUE(is_flipped || r.image == s.image);
    EXPECT_EQ(r.mask, is_flipped ? hflip(s).mask : s.mask);
    flipped += is_flipped;
  }
  EXPECT_GT(flipped, 10);
  EXPECT_LT(flipped, 54);
}

TEST(Netpbm, HandWrittenP6) {
  const std::string bytes = std::string("P6\n# two by two\n2 2\n255\n") +
                            std::string("\xff\x00\x00\x00\xff\x00\x00\x00\xff\x80\x80\x80", 12);
  const Raster r = parse_netpbm(bytes);
  EXPECT_EQ(r.width, 2);
  EXPECT_EQ(r.height, 2);
  EXPECT_EQ(r.channels, 3);
  const Tensor img = raster_to_image(r);
  EXPECT_EQ(img.at(0, 0, 0, 0), 1.0f);
  EXPECT_EQ(img[1 * 4 + 1], 1.0f);   // green, pixel (0,1)
  EXPECT_EQ(img[2 * 4 + 2], 1.0f);   // blue, pixel (1,0)
  EXPECT_EQ(img[3], 128.0f / 255);
  EXPECT_EQ(encode_netpbm(r).substr(0, 2), "P6");
  EXPECT_EQ(parse_netpbm(encode_netpbm(r)).pixels, r.pixels);
}

TEST(Netpbm, RejectsMalformedInput) {
  EXPECT_THROW(parse_netpbm("P3\n1 1\n255\n1 2 3"), ParseError);
  EXPECT_THROW(parse_netpbm("P6\n2 2\n255\n\x01\x02"), ParseError);
  EXPECT_THROW(parse_netpbm("P5\n2 2\n65535\n12345678"), ParseError);
  EXPECT_THROW(parse_netpbm("P5\n0 2\n255\n"), ParseError);
  EXPECT_THROW(parse_netpbm(""), ParseError);
  EXPECT_THROW(read_netpbm("/nonexistent/file.ppm"), std::runtime_error);
}

TEST(Netpbm, ImageAndMaskRoundTrip) {
  Rng rng = sample_rng(3, 3);
  const SegSample s = render_base(rng, 16);
  const fs::path dir = scratch("roundtrip");
  save_sample(dir / "a.ppm", dir / "a.pgm", s);
  const SegSample back = load_sample(dir / "a.ppm", dir / "a.pgm", 2);
  EXPECT_EQ(back.mask, s.mask);
  EXPECT_EQ(back.domain, 2);
  for (std::size_t i = 0; i < s.image.numel(); ++i) EXPECT_NEAR(back.image[i], s.image[i], 0.5 / 255 + 1e-7);
  // stored values are already on the 1/255 grid, so a second trip is exact
  save_sample(dir / "b.ppm", dir / "b.pgm", back);
  EXPECT_EQ(slurp(dir / "a.ppm"), slurp(dir / "b.ppm"));
  EXPECT_EQ(load_sample(dir / "b.ppm", dir / "b.pgm").image, back.image);
}

TEST(Dataset, GenerationIsDeterministicWithManifest) {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  GenerateOptions o;
  o.seed = 9;
  o.domains = 3;
  o.per_domain = 6;
  o.size = 16;
  const DatasetManifest m = generate_domain_dataset(a, o);
  generate_domain_dataset(b, o);
  EXPECT_EQ(slurp(a / "manifest.txt"), slurp(b / "manifest.txt"));
  for (int d = 0; d < 3; ++d)
    for (int n = 0; n < m.count("train", d); ++n)
      EXPECT_EQ(slurp(image_path(a, "train", m.domain_names[d], n)), slurp(image_path(b, "train", m.domain_names[d], n)));

  EXPECT_EQ(m.domain_names, (std::vector<std::string>{"identity", "bright_up", "bright_down"}));
  for (int d = 0; d < 3; ++d) {
    EXPECT_EQ(m.count("val", d), 1);  // max(1, 6 / 4)
    EXPECT_EQ(m.count("train", d), 5);
  }
  const DatasetManifest back = DatasetManifest::load(a);
  EXPECT_EQ(back.serialize(), m.serialize());
  EXPECT_EQ(DatasetManifest::parse(m.serialize()).serialize(), m.serialize());

  const auto val = load_split(a, m, "val");
  ASSERT_EQ(val.size(), 3u);
  for (int d = 0; d < 3; ++d) EXPECT_EQ(val[d].domain, d);
  const auto only = load_split(a, m, "train", {2});
  ASSERT_EQ(only.size(), 5u);
  for (const auto& s : only) EXPECT_EQ(s.domain, 2);

  const auto [imgs, masks] = stack_samples(only, {4, 0});
  EXPECT_EQ(imgs.shape(), (Shape{2, 3, 16, 16}));
  EXPECT_EQ(masks.shape, (Shape{2, 16, 16}));
  EXPECT_TRUE(std::equal(only[4].image.data().begin(), only[4].image.data().end(), imgs.data().begin()));
  EXPECT_THROW(stack_samples(only, {}), std::invalid_argument);
}

TEST(Dataset, RejectsBadOptions) {
  const fs::path a = scratch("gen_bad");
  GenerateOptions o;
  o.domains = 8;
  EXPECT_THROW(generate_domain_dataset(a, o), std::invalid_argument);
  o.domains = 0;
  EXPECT_THROW(generate_domain_dataset(a, o), std::invalid_argument);
  o.domains = 2;
  o.size = 15;
  EXPECT_THROW(generate_domain_dataset(a, o), std::invalid_argument);
}

TEST(Scheduler, AlternatesDomains) {
  const DomainBatchScheduler s({{0, {0, 1, 2, 3}}, {1, {4, 5, 6, 7}}}, 2, 1);
  EXPECT_EQ(s.batches_per_epoch(), 4u);
  const auto batches = s.epoch(0);
  ASSERT_EQ(batches.size(), 4u);
  const int expected[4] = {0, 1, 0, 1};
  for (int i = 0; i < 4; ++i) EXPECT_EQ(batches[i].domain, expected[i]);
}

TEST(Scheduler, BatchesAreSingleDomainAndCoverEverything) {
  std::vector<std::pair<int, std::vector<int>>> doms{{0, {}}, {1, {}}, {2, {}}, {3, {}}};
  int next = 0;
  const int sizes[4] = {7, 3, 5, 8};
  for (int d = 0; d < 4; ++d)
    for (int i = 0; i < sizes[d]; ++i) doms[d].second.push_back(next++);
  const DomainBatchScheduler s(doms, 3, 77);
  for (int e = 0; e < 3; ++e) {
    const auto batches = s.epoch(e);
    EXPECT_EQ(batches.size(), s.batches_per_epoch());
    std::multiset<int> seen;
    for (const auto& b : batches) {
      ASSERT_FALSE(b.samples.empty());
      EXPECT_LE(b.samples.size(), 3u);
      for (int id : b.samples) {
        seen.insert(id);
        const auto& own = doms[b.domain].second;
        EXPECT_NE(std::find(own.begin(), own.end(), id), own.end()) << "sample " << id << " in domain " << b.domain;
      }
    }
    EXPECT_EQ(seen.size(), std::size_t(next));
    EXPECT_EQ(std::set<int>(seen.begin(), seen.end()).size(), std::size_t(next));
  }
  EXPECT_NE(s.epoch(0)[0].samples, s.epoch(1)[0].samples);
  const DomainBatchScheduler again(doms, 3, 77);
  EXPECT_EQ(again.epoch(2)[3].samples, s.epoch(2)[3].samples);
}

TEST(Scheduler, RejectsEmptyDomain) {
  EXPECT_THROW(DomainBatchScheduler({{0, {1}}, {1, {}}}, 2, 0), std::invalid_argument);
  EXPECT_THROW(DomainBatchScheduler({}, 2, 0), std::invalid_argument);
  EXPECT_THROW(DomainBatchScheduler({{0, {1}}}, 0, 0), std::invalid_argument);
}
