#include "msat/pnm.hpp"
#include "msat/synth.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <set>

using namespace msat;
namespace fs = std::filesystem;

TEST(Synth, NoiselessImageIsPiecewiseConstant) {
  SynthSpec spec;
  spec.noise = 0.0;
  const auto palette = class_palette(spec.n_class);
  for (std::uint64_t i = 0; i < 5; ++i) {
    auto s = generate(spec, i);
    const Index hw = spec.height * spec.width;
    for (Index p = 0; p < hw; ++p) {
      const auto& c = palette[s.labels.data[std::size_t(p)]];
      for (Index ch = 0; ch < 3; ++ch) ASSERT_EQ(s.image[ch * hw + p], c[ch]);
    }
  }
}

TEST(Synth, DeterministicPerIndex) {
  SynthSpec spec;
  auto a = generate(spec, 7), b = generate(spec, 7), c = generate(spec, 8);
  EXPECT_EQ(a.image, b.image);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_NE(a.labels, c.labels);
  spec.seed = 99;
  EXPECT_NE(generate(spec, 7).labels, a.labels);
}

TEST(Synth, ClassHistogramCoversEveryClass) {
  SynthSpec spec;
  std::vector<long> hist(spec.n_class, 0);
  for (std::uint64_t i = 0; i < 100; ++i) {
    auto s = generate(spec, i);
    for (auto v : s.labels.data) {
      ASSERT_LT(v, spec.n_class);
      ++hist[v];
    }
  }
  for (int c = 0; c < spec.n_class; ++c) EXPECT_GT(hist[c], 0) << "class " << c;
}

TEST(Synth, EveryImageShowsLargeAndSmallClasses) {
  SynthSpec spec;
  for (std::uint64_t i = 0; i < 100; ++i) {
    auto s = generate(spec, i);
    std::set<int> seen(s.labels.data.begin(), s.labels.data.end());
    bool large = false, small = false;
    for (int c : seen) {
      if (c == 0) continue;
      (spec.is_small_class(c) ? small : large) = true;
    }
    EXPECT_TRUE(large && small) << "sample " << i;
    EXPECT_TRUE(s.image.all_finite());
    for (const auto& sh : s.shapes) {
      EXPECT_GE(sh.bbox.x0, 0);
      EXPECT_LE(sh.bbox.x1, spec.width);
      EXPECT_GE(sh.bbox.y0, 0);
      EXPECT_LE(sh.bbox.y1, spec.height);
      const Index side = std::max(sh.bbox.x1 - sh.bbox.x0, sh.bbox.y1 - sh.bbox.y0);
      if (sh.small) EXPECT_LE(side, Index(0.12 * spec.width));
      else EXPECT_GE(std::min(sh.bbox.x1 - sh.bbox.x0, sh.bbox.y1 - sh.bbox.y0), Index(0.40 * spec.width));
    }
  }
}

TEST(Synth, LabelsMatchVisibleGeometry) {
  SynthSpec spec;
  spec.noise = 0.0;
  auto s = generate(spec, 3);
  // The last-drawn shape is never occluded: every pixel of its rectangle (or
  // inscribed ellipse centre) carries its class.
  const auto& top = s.shapes.back();
  const Index cy = (top.bbox.y0 + top.bbox.y1) / 2, cx = (top.bbox.x0 + top.bbox.x1) / 2;
  EXPECT_EQ(s.labels(0, cy, cx), top.class_id);
  if (!top.ellipse) {
    for (Index y = top.bbox.y0; y < top.bbox.y1; ++y)
      for (Index x = top.bbox.x0; x < top.bbox.x1; ++x) EXPECT_EQ(s.labels(0, y, x), top.class_id);
  }
}

TEST(Synth, SpecValidation) {
  SynthSpec spec;
  spec.n_class = 2;
  EXPECT_THROW(generate(spec, 0), std::invalid_argument);
  spec = SynthSpec{};
  spec.noise = -1;
  EXPECT_THROW(generate(spec, 0), std::invalid_argument);
}

TEST(Synth, TrainValSplitIsDisjointAndExhaustive) {
  std::set<std::uint64_t> train, val;
  for (std::uint64_t i = 0; i < 64; ++i) (is_train_index(i) ? train : val).insert(i);
  EXPECT_EQ(train.size() + val.size(), 64u);
  for (auto i : train) EXPECT_FALSE(val.contains(i));
}

TEST(Pnm, WhitePixelBytes) {
  auto img = TensorF::constant({3, 1, 1}, 1.f);
  EXPECT_EQ(write_ppm(img), std::string("P6\n1 1\n255\n\xff\xff\xff", 14));
}

TEST(Pnm, ImageRoundTripWithinQuantization) {
  auto img = oracle::random_tensor({3, 5, 7}, 1, 0, 1).cast<float>();
  auto back = read_ppm(write_ppm(img));
  ASSERT_EQ(back.shape(), img.shape());
  EXPECT_LE((back.data() - img.data()).cwiseAbs().maxCoeff(), 1.0f / 255.0f);
  EXPECT_EQ(read_ppm(write_ppm(back)), back);
}

TEST(Pnm, LabelsRoundTripExactly) {
  LabelMap m(1, 3, 4);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = std::uint8_t(i * 21);
  EXPECT_EQ(read_pgm(write_pgm(m)), m);
}

TEST(Pnm, HeaderCommentsAndErrors) {
  auto img = read_ppm(std::string("P6 # comment\n1 1\n255\n\x10\x20\x30", 24));
  EXPECT_FLOAT_EQ(img[1], 32.f / 255.f);
  try {
    read_ppm("P5\n1 1\n255\n\x01");
    FAIL();
  } catch (const PnmError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  try {
    read_pgm("P5\n2 x\n255\n");
    FAIL();
  } catch (const PnmError& e) {
    EXPECT_EQ(e.offset(), 5u);
  }
  try {
    read_pgm("P5\n2 2\n65535\n");
    FAIL();
  } catch (const PnmError& e) {
    EXPECT_GT(e.offset(), 0u);
  }
  EXPECT_THROW(read_pgm("P5\n2 2\n255\n\x01"), PnmError);
}

TEST(Colorize, PaletteLookupAndInverse) {
  const auto palette = class_palette(5);
  LabelMap bg(1, 2, 3, 0);
  auto solid = colorize_mask(bg, palette);
  for (Index i = 0; i < 6; ++i) EXPECT_EQ(solid[i], palette[0][0]);

  SynthSpec spec;
  auto s = generate(spec, 2);
  auto img = colorize_mask(s.labels, palette);
  const Index hw = spec.height * spec.width;
  LabelMap recovered(1, spec.height, spec.width);
  for (Index p = 0; p < hw; ++p) {
    Eigen::Vector3f c(img[p], img[hw + p], img[2 * hw + p]);
    int found = -1;
    for (int k = 0; k < 5; ++k)
      if (palette[std::size_t(k)] == c) found = k;
    ASSERT_GE(found, 0);
    recovered.data[std::size_t(p)] = std::uint8_t(found);
  }
  EXPECT_EQ(recovered, s.labels);

  LabelMap bad(1, 1, 1, 7);
  EXPECT_THROW(colorize_mask(bad, palette), std::invalid_argument);
}

TEST(Dataset, WriteAndLoad) {
  const fs::path dir = fs::temp_directory_path() / "msat_test_dataset";
  fs::remove_all(dir);
  SynthSpec spec;
  spec.height = spec.width = 16;
  write_dataset(spec, 4, dir);
  EXPECT_TRUE(fs::exists(dir / "img_000003.ppm"));
  EXPECT_TRUE(fs::exists(dir / "lab_000000.pgm"));
  auto meta = read_dataset_meta(dir);
  EXPECT_EQ(meta.size, 16);
  EXPECT_EQ(meta.n_class, 5);
  EXPECT_EQ(meta.seed, spec.seed);
  EXPECT_EQ(meta.count, 4u);
  auto ds = load_dataset(dir);
  ASSERT_EQ(ds.images.size(), 4u);
  EXPECT_EQ(ds.labels[1], generate(spec, 1).labels);
  EXPECT_EQ(ds.split(true), (std::vector<std::uint64_t>{0, 2}));
  EXPECT_EQ(ds.split(false), (std::vector<std::uint64_t>{1, 3}));
  fs::remove_all(dir);
}
