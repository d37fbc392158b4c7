#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <random>

#include "p2i/checkpoint.hpp"
#include "p2i/grad_check.hpp"
#include "p2i/graph.hpp"
#include "p2i/reference_nets.hpp"
#include "p2i/spec_io.hpp"
#include "test_util.hpp"

using namespace p2i;
using p2i::test::random_tensor;

namespace {

NetworkSpec tiny_net() {
  SpecBuilder b("tiny");
  std::string x = b.conv_relu(std::string(kInputId), 2);
  const std::string skip = x;
  x = b.maxpool(x);
  x = b.conv_relu(x, 3);
  x = b.maxpool(x);
  x = b.conv(x, 2, 1);
  x = b.upsample(b.upsample(x));
  x = b.concat(x, skip);
  return b.finish(b.sigmoid(b.conv(x, 1)));
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("p2i_graph_test_" + name);
}

}  // namespace

TEST(ParameterCount, HandOracles) {
  NetworkSpec s1;
  s1.layers.push_back({"c", LayerKind::kConv, {"input"}, 8, 3, 3});
  EXPECT_EQ(parameter_count(s1), 80u);
  NetworkSpec s2;
  s2.input_channels = 8;
  s2.layers.push_back({"c", LayerKind::kConv, {"input"}, 1, 1, 1});
  EXPECT_EQ(parameter_count(s2), 9u);
  EXPECT_EQ(parameter_count(NetworkSpec{}), 0u);
}

TEST(ParameterCount, ReferenceFamilies) {
  // Light: 80 + 9*584 + 3*1160 + 73.
  EXPECT_EQ(parameter_count(build_reference(Family::kLight)), 8'889u);
  EXPECT_EQ(parameter_count(build_reference(Family::kMiniUnet)), 316'657u);
  // One above the published 1,032,588; see README.
  EXPECT_EQ(parameter_count(build_reference(Family::kDense)), 1'032'589u);
  for (Family f : {Family::kLight, Family::kMiniUnet, Family::kDense}) {
    const NetworkSpec s = build_reference(f);
    EXPECT_TRUE(s.strict_pooling);
    EXPECT_EQ(size_multiple(s), 4);
    EXPECT_EQ(init_params(s, 1).count(), parameter_count(s));
  }
}

TEST(ParameterCount, LightUsesEightFiltersPerHiddenLayer) {
  const NetworkSpec s = build_reference(Family::kLight);
  int single = 0;
  for (const LayerSpec& l : s.layers) {
    if (l.kind != LayerKind::kConv) continue;
    if (l.filters == 1) {
      ++single;
    } else {
      EXPECT_EQ(l.filters, 8) << l.id;
    }
  }
  EXPECT_EQ(single, 1);
}

TEST(DenseGrowth, RuleValues) {
  DenseGrowthRule r;
  EXPECT_EQ(r.omega, 8);
  EXPECT_EQ(r.delta(), 32);
  EXPECT_EQ(r.pi(), 4);
  r.grow();
  EXPECT_EQ(r.omega, 10);
  EXPECT_EQ(r.delta(), 40);
  EXPECT_EQ(r.pi(), 5);
}

TEST(Validate, RejectsForwardReferences) {
  NetworkSpec s;
  s.layers.push_back({"a", LayerKind::kRelu, {"b"}});
  s.layers.push_back({"b", LayerKind::kSigmoid, {"input"}});
  s.output = "b";
  s.strict_pooling = false;
  EXPECT_THROW(validate(s), Error);
}

TEST(Validate, RequiresSigmoidSingleChannelOutput) {
  SpecBuilder b("x");
  std::string c = b.conv(std::string(kInputId), 2);
  EXPECT_THROW(b.finish(b.sigmoid(c), false), Error);
  SpecBuilder b2("y");
  EXPECT_THROW(b2.finish(b2.conv(std::string(kInputId), 1), false), Error);
}

TEST(Validate, PaperCompatibleNeedsTwoPoolingLevels) {
  SpecBuilder b("one-pool");
  std::string x = b.upsample(b.maxpool(b.conv(std::string(kInputId), 1)));
  const std::string out = b.sigmoid(x);
  SpecBuilder copy = b;
  EXPECT_THROW(b.finish(out, true), Error);
  EXPECT_NO_THROW(copy.finish(out, false));
}

TEST(Validate, ConcatNeedsSameResolution) {
  SpecBuilder b("bad");
  std::string x = b.conv(std::string(kInputId), 1);
  std::string y = b.maxpool(x);
  const std::string cat = b.concat(x, y);
  EXPECT_THROW(b.finish(b.sigmoid(b.conv(cat, 1)), false), Error);
}

TEST(InitParams, DeterministicAndBounded) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto a = init_params(s, 42), b = init_params(s, 42), c = init_params(s, 43);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  const auto info = validate(s);
  for (const auto& [id, lp] : a.layers) {
    const double bound = std::sqrt(6.0 / (lp.in_channels * lp.kernel_h * lp.kernel_w));
    for (float w : lp.kernels) EXPECT_LE(std::abs(w), bound);
    for (float v : lp.biases) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Forward, ShapeContract) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 1);
  std::mt19937_64 rng(1);
  Tensor patch = random_tensor<float>({3, 1, 64, 64}, rng, 0, 1);
  auto r = forward(s, p, patch, false);
  EXPECT_EQ(r.output.shape(), (Shape{3, 1, 64, 64}));
  EXPECT_FALSE(r.tape.has_value());
  for (float v : r.output.values()) {
    EXPECT_GT(v, 0.0f);
    EXPECT_LT(v, 1.0f);
  }
  Tensor doubled = random_tensor<float>({6, 1, 64, 64}, rng, 0, 1);
  EXPECT_EQ(forward(s, p, doubled, true).output.shape(), (Shape{6, 1, 64, 64}));
}

TEST(Forward, FullDriveSizedImage) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 1);
  std::mt19937_64 rng(2);
  Tensor img = random_tensor<float>({1, 1, 584, 568}, rng, 0, 1);
  EXPECT_EQ(forward(s, p, img, false).output.shape(), (Shape{1, 1, 584, 568}));
}

TEST(Forward, RejectsSizesNotMultipleOfFour) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 1);
  EXPECT_THROW(forward(s, p, Tensor({1, 1, 62, 64}), false), Error);
  EXPECT_THROW(forward(s, p, Tensor({1, 2, 64, 64}), false), Error);
}

TEST(Forward, RecordedAndUnrecordedOutputsAgreeBitwise) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 5);
  std::mt19937_64 rng(3);
  Tensor x = random_tensor<float>({2, 1, 32, 48}, rng, 0, 1);
  auto a = forward(s, p, x, true);
  auto b = forward(s, p, x, false);
  EXPECT_EQ(0, std::memcmp(a.output.data(), b.output.data(), a.output.size() * sizeof(float)));
}

TEST(Backward, RequiresTape) {
  EXPECT_THROW(backward<float>(std::nullopt, Tensor({1, 1, 4, 4})), Error);
}

TEST(Backward, ZeroGradOutGivesZeroGradients) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 1);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor<float>({1, 1, 16, 16}, rng, 0, 1);
  auto r = forward(s, p, x, true);
  auto g = backward(r.tape, Tensor(r.output.shape()));
  EXPECT_EQ(g.params.layers.size(), p.layers.size());
  for (const auto& [id, lp] : g.params.layers) {
    for (float v : lp.kernels) EXPECT_EQ(v, 0.0f);
    for (float v : lp.biases) EXPECT_EQ(v, 0.0f);
  }
}

TEST(Backward, GradientsDeterministic) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 9);
  std::mt19937_64 rng(5);
  Tensor x = random_tensor<float>({2, 1, 32, 32}, rng, 0, 1);
  Tensor go = random_tensor<float>({2, 1, 32, 32}, rng);
  auto r1 = forward(s, p, x, true);
  auto r2 = forward(s, p, x, true);
  EXPECT_EQ(backward(r1.tape, go).params, backward(r2.tape, go).params);
}

TEST(Backward, TinyNetworkFiniteDifferences) {
  const NetworkSpec s = tiny_net();
  auto p = params_cast<double>(init_params(s, 3));
  std::mt19937_64 rng(6);
  for (auto& [id, lp] : p.layers)
    for (double& b : lp.biases) b = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  TensorD x = random_tensor<double>({2, 1, 8, 12}, rng, 0, 1);
  TensorD proj = random_tensor<double>({2, 1, 8, 12}, rng);
  auto rep = network_grad_check(s, p, x, proj, 1e-6);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error << " skipped " << rep.skipped;
}

TEST(Backward, LightWholeNetworkFiniteDifferences) {
  const NetworkSpec s = build_reference(Family::kLight);
  std::mt19937_64 rng(7);
  auto p = params_cast<double>(init_params(s, 11));
  for (auto& [id, lp] : p.layers)
    for (double& b : lp.biases) b = std::uniform_real_distribution<double>(-0.1, 0.1)(rng);
  TensorD x = random_tensor<double>({1, 1, 8, 8}, rng, 0, 1);
  TensorD proj = random_tensor<double>({1, 1, 8, 8}, rng);
  auto rep = network_grad_check(s, p, x, proj, 1e-5);
  EXPECT_TRUE(rep.passed) << rep.max_rel_error;
  EXPECT_LT(rep.skipped * 20, rep.checked + rep.skipped);
}

TEST(ReceptiveField, RadiusOfSimpleChains) {
  SpecBuilder b("chain");
  std::string x = b.conv(std::string(kInputId), 1, 3);
  x = b.conv(x, 1, 5);
  EXPECT_EQ(receptive_radius(b.finish(b.sigmoid(x), false)), 3);
  SpecBuilder c("pooled");
  std::string y = b.conv(std::string(kInputId), 1, 3);
  (void)y;
  std::string z = c.maxpool(std::string(kInputId));
  z = c.conv(z, 1, 3);  // 2 pixels at scale 2
  z = c.upsample(z);    // +1
  EXPECT_EQ(receptive_radius(c.finish(c.sigmoid(z), false)), 3);
}

TEST(ReceptiveField, PatchAndImageAgreeInsideValidRegion) {
  const NetworkSpec s = tiny_net();
  auto p = init_params(s, 21);
  const int r = receptive_radius(s);
  std::mt19937_64 rng(8);
  Tensor img = random_tensor<float>({1, 1, 40, 48}, rng, 0, 1);
  Tensor full = forward(s, p, img, false).output;
  const int oy = 8, ox = 12, P = 24;
  Tensor patch({1, 1, P, P});
  for (int y = 0; y < P; ++y)
    for (int x = 0; x < P; ++x) patch.at(0, 0, y, x) = img.at(0, 0, oy + y, ox + x);
  Tensor out = forward(s, p, patch, false).output;
  int compared = 0;
  for (int y = r; y < P - r; ++y)
    for (int x = r; x < P - r; ++x, ++compared)
      EXPECT_NEAR(out.at(0, 0, y, x), full.at(0, 0, oy + y, ox + x), 1e-6);
  EXPECT_GT(compared, 0);
}

TEST(SpecIo, JsonRoundTripAndStableHash) {
  for (Family f : {Family::kLight, Family::kMiniUnet, Family::kDense}) {
    const NetworkSpec s = build_reference(f);
    const auto path = temp_path(std::string(family_name(f)) + ".json");
    save_spec(s, path);
    const NetworkSpec back = load_spec(path);
    EXPECT_EQ(back, s);
    EXPECT_EQ(spec_hash(back), spec_hash(s));
    std::filesystem::remove(path);
  }
  EXPECT_NE(spec_hash(build_reference(Family::kLight)), spec_hash(build_reference(Family::kDense)));
  EXPECT_EQ(resolve_spec("light"), build_reference(Family::kLight));
}

TEST(SpecIo, RejectsMalformedSpec) {
  EXPECT_THROW(spec_from_json(nlohmann::json::parse(R"({"layers": []})")), Error);
  EXPECT_THROW(spec_from_json(nlohmann::json::parse(
                   R"({"output":"a","strict_pooling":false,"layers":[{"id":"a","kind":"bogus","inputs":["input"]}]})")),
               Error);
}

TEST(Checkpoint, BitExactRoundTrip) {
  const NetworkSpec s = build_reference(Family::kLight);
  auto p = init_params(s, 77);
  const auto path = temp_path("ck.p2i");
  save_checkpoint(path, s, p);
  auto ck = load_checkpoint(path);
  EXPECT_EQ(ck.spec_hash, spec_hash(s));
  EXPECT_EQ(ck.params.layers, p.layers);
  const auto bytes = encode_checkpoint(spec_hash(s), p);
  EXPECT_EQ(sha256_file(path), sha256(bytes));
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "P2I1");
  EXPECT_EQ(bytes.size(), 4 + 32 + [&] {
    std::size_t n = 0;
    for (const auto& [id, lp] : p.layers) n += 4 + id.size() + 16 + 4 * lp.count();
    return n;
  }());
  std::filesystem::remove(path);
}

TEST(Checkpoint, LittleEndianLayout) {
  ParameterSet<float> p;
  LayerParams<float> lp(1, 1, 1, 1);
  lp.kernels[0] = 1.0f;  // 0x3f800000
  lp.biases[0] = -2.0f;  // 0xc0000000
  p.layers.emplace("c", lp);
  Digest h{};
  const auto b = encode_checkpoint(h, p);
  const std::vector<std::uint8_t> tail = {1, 0, 0, 0, 'c', 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0,
                                          0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0xc0};
  ASSERT_EQ(b.size(), 36 + tail.size());
  EXPECT_TRUE(std::equal(tail.begin(), tail.end(), b.begin() + 36));
}

TEST(Checkpoint, RejectsCorruptionAndForeignSpec) {
  const NetworkSpec light = build_reference(Family::kLight);
  auto p = init_params(light, 1);
  auto bytes = encode_checkpoint(spec_hash(light), p);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), Error);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), Error);

  const auto path = temp_path("foreign.p2i");
  save_checkpoint(path, light, p);
  EXPECT_THROW(load_checkpoint_for(path, tiny_net()), Error);
  EXPECT_NO_THROW(load_checkpoint_for(path, light));
  std::filesystem::remove(path);
}
