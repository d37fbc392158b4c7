#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "p2i/dataset.hpp"
#include "p2i/file_util.hpp"
#include "p2i/image_io.hpp"
#include "p2i/imaging.hpp"
#include "p2i/synthetic.hpp"
#include "test_util.hpp"

namespace fs = std::filesystem;
using namespace p2i;
using p2i::test::random_tensor;

namespace {

fs::path scratch_dir(const std::string& name) {
  fs::path d = fs::temp_directory_path() / ("p2i_imaging_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

double stddev(const Tensor& t) {
  double mean = 0.0;
  for (float v : t.values()) mean += v;
  mean /= static_cast<double>(t.size());
  double s = 0.0;
  for (float v : t.values()) s += (v - mean) * (v - mean);
  return std::sqrt(s / static_cast<double>(t.size()));
}

// Independent CLAHE evaluation: each pixel recomputes the mappings of the
// tiles it blends, straight from the definition.
float reference_clahe_pixel(const Tensor& img, const ClaheParams& p, int y, int x) {
  const int H = img.h(), W = img.w(), B = p.bins;
  auto bounds = [](int t, int n, int extent) {
    return std::pair<int, int>(static_cast<int>(static_cast<long>(t) * extent / n),
                               static_cast<int>(static_cast<long>(t + 1) * extent / n));
  };
  auto quant = [&](float v) { return static_cast<int>(std::lround(std::clamp<double>(v, 0, 1) * (B - 1))); };
  auto mapping = [&](int ty, int tx, int bin) {
    auto [y0, y1] = bounds(ty, p.tiles_y, H);
    auto [x0, x1] = bounds(tx, p.tiles_x, W);
    std::vector<double> hist(B, 0.0);
    for (int yy = y0; yy < y1; ++yy)
      for (int xx = x0; xx < x1; ++xx) hist[quant(img.at(0, 0, yy, xx))] += 1;
    const double area = double(y1 - y0) * (x1 - x0);
    const double limit = std::max(1.0, p.clip * area / B);
    double excess = 0;
    for (double& h : hist) excess += std::max(0.0, h - limit), h = std::min(h, limit);
    double cdf = 0;
    for (int b = 0; b <= bin; ++b) cdf += hist[b] + excess / B;
    return std::min(1.0, cdf / area);
  };
  auto locate = [&](int i, int n, int extent, int& a, int& b, double& wa) {
    std::vector<double> c(n);
    for (int t = 0; t < n; ++t) {
      auto [lo, hi] = bounds(t, n, extent);
      c[t] = 0.5 * (lo + hi - 1);
    }
    if (i <= c[0]) {
      a = b = 0, wa = 1;
      return;
    }
    if (i >= c[n - 1]) {
      a = b = n - 1, wa = 1;
      return;
    }
    int t = 0;
    while (c[t + 1] <= i) ++t;
    a = t, b = t + 1, wa = (c[t + 1] - i) / (c[t + 1] - c[t]);
  };
  int ya, yb, xa, xb;
  double wy, wx;
  locate(y, p.tiles_y, H, ya, yb, wy);
  locate(x, p.tiles_x, W, xa, xb, wx);
  const int bin = quant(img.at(0, 0, y, x));
  const double top = wx * mapping(ya, xa, bin) + (1 - wx) * mapping(ya, xb, bin);
  const double bot = wx * mapping(yb, xa, bin) + (1 - wx) * mapping(yb, xb, bin);
  return static_cast<float>(wy * top + (1 - wy) * bot);
}

}  // namespace

TEST(Grayscale, Bt601Examples) {
  Tensor white(Shape{1, 3, 1, 1}, 1.0f);
  EXPECT_FLOAT_EQ(to_grayscale(white).at(0, 0, 0, 0), 1.0f);
  Tensor green(Shape{1, 3, 1, 1});
  green.at(0, 1, 0, 0) = 1.0f;
  EXPECT_FLOAT_EQ(to_grayscale(green).at(0, 0, 0, 0), 0.587f);
  const Tensor gray = to_grayscale(Tensor(Shape{1, 3, 2, 2}, 0.37f));
  for (float v : gray.values()) EXPECT_NEAR(v, 0.37f, 1e-7);
  EXPECT_THROW(to_grayscale(Tensor(Shape{1, 1, 2, 2})), Error);
}

TEST(Gamma, Examples) {
  Tensor t(Shape{1, 1, 1, 3}, std::vector<float>{0.0f, 1.0f, 0.25f});
  const Tensor g = gamma_correct(t, 1.7);
  EXPECT_EQ(g.at(0, 0, 0, 0), 0.0f);
  EXPECT_EQ(g.at(0, 0, 0, 1), 1.0f);
  EXPECT_NEAR(g.at(0, 0, 0, 2), 0.4423, 2e-4);
  EXPECT_NEAR(g.at(0, 0, 0, 2), std::pow(0.25, 1 / 1.7), 1e-6);
  EXPECT_EQ(gamma_correct(t, 1.0), t);
  EXPECT_NEAR(gamma_correct(t, 1.7, false).at(0, 0, 0, 2), std::pow(0.25, 1.7), 1e-6);
  EXPECT_THROW(gamma_correct(t, 0.0), Error);
  EXPECT_THROW(gamma_correct(t, -1.0), Error);
}

TEST(Clahe, ConstantImageStaysConstant) {
  Tensor c(Shape{1, 1, 40, 48}, 0.3f);
  const Tensor out = clahe(c);
  for (float v : out.values()) EXPECT_EQ(v, out.data()[0]);
}

TEST(Clahe, OutputRangeOnRandomInput) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor r = random_tensor<float>({1, 1, 37 + trial * 11, 64}, rng, -0.2, 1.2);
    const Tensor out = clahe(r);
    for (float v : out.values()) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
  }
}

TEST(Clahe, CheckerboardContrastDoesNotDecrease) {
  Tensor board(Shape{1, 1, 64, 64});
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) board.at(0, 0, y, x) = ((y / 4 + x / 4) % 2) ? 0.6f : 0.35f;
  EXPECT_GE(stddev(clahe(board)), stddev(board));
}

TEST(Clahe, MatchesReferenceEvaluation) {
  std::mt19937_64 rng(2);
  Tensor img = random_tensor<float>({1, 1, 45, 53}, rng, 0, 1);
  for (int y = 0; y < 45; ++y)
    for (int x = 0; x < 53; ++x) img.at(0, 0, y, x) *= 0.3f + 0.7f * x / 53.0f;
  const ClaheParams p{4, 5, 2.0, 64};
  const Tensor out = clahe(img, p);
  for (int y = 0; y < 45; y += 2)
    for (int x = 0; x < 53; x += 3) EXPECT_NEAR(out.at(0, 0, y, x), reference_clahe_pixel(img, p, y, x), 1e-5);
}

TEST(Clahe, RejectsImageSmallerThanTileGrid) {
  EXPECT_THROW(clahe(Tensor(Shape{1, 1, 4, 40})), Error);
}

TEST(Resize, PaperSizes) {
  const Tensor drive(Shape{1, 1, 584, 565}, 0.5f);
  const Tensor r = resize_bilinear(drive, {584, 568});
  EXPECT_EQ(r.shape(), (Shape{1, 1, 584, 568}));
  for (float v : r.values()) EXPECT_NEAR(v, 0.5f, 1e-6);
  const Tensor idrid(Shape{1, 1, 2848, 4288}, 0.25f);
  EXPECT_EQ(resize_bilinear(idrid, {284, 428}).shape(), (Shape{1, 1, 284, 428}));
  EXPECT_EQ(round_up({584, 565}, 4), (Size2{584, 568}));
}

TEST(Resize, IdentityAndErrors) {
  std::mt19937_64 rng(3);
  const Tensor t = random_tensor<float>({1, 1, 17, 23}, rng);
  EXPECT_EQ(resize_bilinear(t, {17, 23}), t);
  EXPECT_THROW(resize_bilinear(t, {0, 5}), Error);
  EXPECT_THROW(resize_mask(t, {5, 0}), Error);
}

TEST(Resize, BackRestoresOriginalShapeAndLinearRamps) {
  Tensor ramp(Shape{1, 1, 10, 30});
  for (int y = 0; y < 10; ++y)
    for (int x = 0; x < 30; ++x) ramp.at(0, 0, y, x) = static_cast<float>(x);
  const Tensor up = resize_bilinear(ramp, {20, 60});
  // Pixel-centre alignment: destination column i samples source (i + 0.5)/2 - 0.5.
  EXPECT_NEAR(up.at(0, 0, 3, 5), 2.25f, 1e-5);
  const Tensor back = resize_back(up, {10, 30});
  EXPECT_EQ(back.shape(), ramp.shape());
}

TEST(Resize, MaskStaysBinary) {
  std::mt19937_64 rng(4);
  const Tensor m = binarize(random_tensor<float>({1, 1, 31, 29}, rng, 0, 1));
  const Tensor r = resize_mask(m, {64, 48});
  for (float v : r.values()) EXPECT_TRUE(v == 0.0f || v == 1.0f);
}

TEST(Augment, FlipsAreInvolutionsAndPreserveMaskCount) {
  std::mt19937_64 rng(5);
  const Tensor t = random_tensor<float>({1, 1, 12, 9}, rng);
  const AugmentParams h{true, false, 0, 0}, v{false, true, 0, 0};
  EXPECT_EQ(apply_augment(apply_augment(t, h), h), t);
  EXPECT_EQ(apply_augment(apply_augment(t, v), v), t);
  EXPECT_EQ(apply_augment(t, AugmentParams{}), t);
  const Tensor m = binarize(t, 0.0f);
  auto count = [](const Tensor& x) { return std::count(x.values().begin(), x.values().end(), 1.0f); };
  EXPECT_EQ(count(apply_augment(m, h)), count(m));
  EXPECT_EQ(count(apply_augment(m, AugmentParams{true, true, 0, 0})), count(m));
}

TEST(Augment, TranslationZeroFillsAndPairsStayAligned) {
  std::mt19937_64 rng(6);
  const Tensor img = random_tensor<float>({1, 1, 20, 20}, rng, 0.1, 1);
  const Tensor mask = binarize(img);
  const AugmentParams a{false, true, 2, -1};
  const Tensor ai = apply_augment(img, a), am = apply_augment(mask, a);
  EXPECT_EQ(ai.at(0, 0, 0, 5), 0.0f);
  EXPECT_EQ(ai.at(0, 0, 5, 19), 0.0f);
  EXPECT_EQ(ai.at(0, 0, 2, 0), img.at(0, 0, 19, 1));
  EXPECT_EQ(am, binarize(ai));
}

TEST(Augment, SamplingIsSeededAndBounded) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const AugmentParams a = sample_augment({100, 50}, s);
    EXPECT_LE(std::abs(a.shift_y), 10);
    EXPECT_LE(std::abs(a.shift_x), 5);
    EXPECT_EQ(a, sample_augment({100, 50}, s));
  }
}

TEST(Preprocess, ChainOrderAndSingleChannelOutput) {
  std::mt19937_64 rng(7);
  const Tensor rgb = random_tensor<float>({1, 3, 32, 32}, rng, 0, 1);
  PreprocessConfig c;
  const Tensor expect = clahe(gamma_correct(to_grayscale(rgb), 1.7), ClaheParams{});
  EXPECT_EQ(preprocess(rgb, c), expect);
  c.grayscale = false;
  EXPECT_THROW(preprocess(rgb, c), Error);
  EXPECT_EQ(preprocess_from_json(preprocess_to_json(PreprocessConfig{})), PreprocessConfig{});
}

TEST(ImageIo, PngAndPnmRoundTrips) {
  const fs::path dir = scratch_dir("io");
  std::mt19937_64 rng(8);
  Tensor gray(Shape{1, 1, 7, 11}), rgb(Shape{1, 3, 5, 4});
  for (float& v : gray.values()) v = static_cast<float>(rng() % 256) / 255.0f;
  for (float& v : rgb.values()) v = static_cast<float>(rng() % 256) / 255.0f;
  for (const char* name : {"g.png", "g.pgm"}) {
    write_image(dir / name, gray);
    EXPECT_EQ(read_image(dir / name), gray) << name;
  }
  for (const char* name : {"c.png", "c.ppm"}) {
    write_image(dir / name, rgb);
    EXPECT_EQ(read_image(dir / name), rgb) << name;
  }
  write_text_atomic(dir / "a.pgm", "P2\n# comment\n2 1\n4\n0 4\n");
  const Tensor a = read_image(dir / "a.pgm");
  EXPECT_EQ(a.at(0, 0, 0, 1), 1.0f);
}

TEST(ImageIo, CorruptFilesNameThePath) {
  const fs::path dir = scratch_dir("corrupt");
  write_text_atomic(dir / "bad.png", "definitely not a png");
  try {
    read_image(dir / "bad.png");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("bad.png"), std::string::npos);
  }
  EXPECT_THROW(read_image(dir / "missing.png"), Error);
  write_text_atomic(dir / "short.pgm", "P5\n4 4\n255\nab");
  EXPECT_THROW(read_image(dir / "short.pgm"), Error);
}

TEST(ImageIo, TensorFilesAreBitExact) {
  const fs::path dir = scratch_dir("tensor");
  std::mt19937_64 rng(9);
  const Tensor t = random_tensor<float>({2, 3, 5, 7}, rng);
  save_tensor(dir / "t.p2t", t);
  EXPECT_EQ(load_tensor(dir / "t.p2t"), t);
  write_text_atomic(dir / "bad.p2t", "P2IX0000000000000000");
  EXPECT_THROW(load_tensor(dir / "bad.p2t"), Error);
}

TEST(Synthetic, DeterministicBinaryAndPlausible) {
  const SyntheticImage a = synth_vessel_image({128, 96}, 42), b = synth_vessel_image({128, 96}, 42);
  EXPECT_EQ(a.rgb, b.rgb);
  EXPECT_EQ(a.mask, b.mask);
  double fg = 0;
  for (float v : a.mask.values()) {
    EXPECT_TRUE(v == 0.0f || v == 1.0f);
    fg += v;
  }
  fg /= static_cast<double>(a.mask.size());
  EXPECT_GT(fg, 0.02);
  EXPECT_LT(fg, 0.35);
  EXPECT_NE(synth_vessel_image({128, 96}, 43).mask, a.mask);
}

TEST(Dataset, ManifestRoundTripAndValidation) {
  const fs::path dir = scratch_dir("manifest");
  SyntheticConfig cfg;
  cfg.count = 3;
  cfg.train = 2;
  cfg.size = {32, 36};
  const DatasetManifest m = write_synthetic_dataset(cfg, dir);
  const DatasetManifest back = load_manifest(dir / "manifest.json");
  ASSERT_EQ(back.entries.size(), 3u);
  EXPECT_EQ(back.entries[2].split, Split::kTest);
  EXPECT_EQ(back.target, (Size2{32, 36}));
  EXPECT_EQ(fs::weakly_canonical(back.entries[0].image), fs::weakly_canonical(m.entries[0].image));

  nlohmann::json j = manifest_to_json(back);
  j["target"] = {30, 36};
  EXPECT_THROW(manifest_from_json(j, dir), Error);
  j = manifest_to_json(back);
  j["entries"][0]["image"] = (dir / "nope.png").string();
  write_text_atomic(dir / "broken.json", j.dump());
  try {
    load_manifest(dir / "broken.json");
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("nope.png"), std::string::npos);
  }
}

TEST(Dataset, PrepareCachesAndRecordsProvenance) {
  const fs::path dir = scratch_dir("prepare");
  SyntheticConfig cfg;
  cfg.count = 2;
  cfg.train = 1;
  cfg.size = {40, 32};
  write_synthetic_dataset(cfg, dir / "raw");
  const DatasetManifest m = load_manifest(dir / "raw" / "manifest.json");
  EXPECT_FALSE(prepare_dataset(m, dir / "prep").cache_hit);
  const auto stamp = fs::last_write_time(dir / "prep" / "dataset.json");
  EXPECT_TRUE(prepare_dataset(m, dir / "prep").cache_hit);
  EXPECT_EQ(fs::last_write_time(dir / "prep" / "dataset.json"), stamp);

  const Dataset d = load_prepared(dir / "prep");
  EXPECT_EQ(d.provenance["preprocess"]["gamma"].get<double>(), 1.7);
  EXPECT_EQ(d.provenance["preprocess"]["clahe_clip"].get<double>(), 2.0);
  EXPECT_EQ(d.provenance["preprocess"]["clahe_tiles"], nlohmann::json({8, 8}));
  ASSERT_EQ(d.samples.size(), 2u);
  const ImageSample direct = load_sample(m.entries[1], m);
  EXPECT_EQ(d.samples[1].image, direct.image);
  EXPECT_EQ(d.samples[1].mask, direct.mask);
  EXPECT_EQ(d.samples[1].original_size, (Size2{40, 32}));
  EXPECT_EQ(d.split(Split::kTest).size(), 1u);

  DatasetManifest changed = m;
  changed.preprocess.gamma = 1.2;
  EXPECT_FALSE(prepare_dataset(changed, dir / "prep").cache_hit);
}

TEST(Dataset, SamplesAreResizedToMultiplesOfFour) {
  const fs::path dir = scratch_dir("resize");
  const SyntheticImage img = synth_vessel_image({30, 26}, 1);
  write_image(dir / "i.png", img.rgb);
  write_image(dir / "m.png", img.mask);
  DatasetManifest m;
  m.entries.push_back({"x", dir / "i.png", dir / "m.png", std::nullopt, Split::kTest});
  const ImageSample s = load_sample(m.entries[0], m);
  EXPECT_EQ(s.image.shape(), (Shape{1, 1, 32, 28}));
  EXPECT_EQ(s.mask.shape(), (Shape{1, 1, 32, 28}));
  EXPECT_EQ(s.original_mask.shape(), (Shape{1, 1, 30, 26}));
  EXPECT_EQ(s.original_mask, img.mask);
}
