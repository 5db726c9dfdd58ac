#include "muffin/bridge.hpp"

#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "test_support.hpp"

using namespace muffin;
using bridge::BridgeConfig;
using bridge::BridgeModel;
using bridge::embed_image;
using bridge::synthetic_image;

namespace {

BridgeConfig small_config() {
  BridgeConfig cfg;
  cfg.d = 8;
  cfg.n = 2;
  cfg.num_blocks = 1;
  cfg.num_heads = 2;
  cfg.patch_size = 8;
  cfg.image_size = 16;
  cfg.d_lm = 8;
  cfg.channels = 3;
  return cfg;
}

void zero_tensor(Tensor& t) {
  auto& d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  return std::memcmp(a.data().data(), b.data().data(),
                     a.numel() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

}  // namespace

TEST(EmbedImage, PatchCountArithmetic) {
  auto cfg = small_config();
  std::mt19937_64 rng(1);
  auto model = BridgeModel::init(cfg, rng);
  Tensor img = synthetic_image("img", 16, cfg.channels);
  Tensor patches = embed_image(img, cfg, model.patch);
  EXPECT_EQ(patches.shape(), (Shape{4, cfg.d}));
}

TEST(EmbedImage, ZeroImageZeroEmbedderLeavesPositionalTermsOnly) {
  auto cfg = small_config();
  std::mt19937_64 rng(2);
  auto model = BridgeModel::init(cfg, rng);
  zero_tensor(model.patch.w);
  zero_tensor(model.patch.b);
  Tensor img = Tensor::zeros({16, 16, cfg.channels});
  Tensor patches = embed_image(img, cfg, model.patch);
  // Grid 2x2 inside a 2x2 table: identity index mapping.
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t j = 0; j < cfg.d; ++j)
      EXPECT_DOUBLE_EQ(patches(r, j), model.patch.pos(r, j));
}

TEST(EmbedImage, SinglePatchChangeIsLocalPreAttention) {
  auto cfg = small_config();
  std::mt19937_64 rng(3);
  auto model = BridgeModel::init(cfg, rng);
  Tensor a = synthetic_image("a", 16, cfg.channels);
  std::vector<double> data(a.data().begin(), a.data().end());
  // Perturb only patch (1, 1): rows 8..15, cols 8..15.
  for (std::size_t y = 8; y < 16; ++y)
    for (std::size_t x = 8; x < 16; ++x)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        data[(y * 16 + x) * cfg.channels + c] = 0.123;
  Tensor b = Tensor::from_data({16, 16, cfg.channels}, std::move(data));

  Tensor pa = embed_image(a, cfg, model.patch);
  Tensor pb = embed_image(b, cfg, model.patch);
  for (std::size_t r = 0; r < 4; ++r) {
    bool differs = false;
    for (std::size_t j = 0; j < cfg.d; ++j)
      if (pa(r, j) != pb(r, j)) differs = true;
    EXPECT_EQ(differs, r == 3) << "patch row " << r;
  }
}

TEST(EmbedImage, RejectsMismatchedShapes) {
  auto cfg = small_config();
  std::mt19937_64 rng(4);
  auto model = BridgeModel::init(cfg, rng);
  EXPECT_THROW(embed_image(Tensor::zeros({15, 15, 3}), cfg, model.patch),
               ConfigError);
  EXPECT_THROW(embed_image(Tensor::zeros({32, 32, 3}), cfg, model.patch),
               ConfigError);  // exceeds configured maximum
  EXPECT_THROW(embed_image(Tensor::zeros({16, 16, 1}), cfg, model.patch),
               ConfigError);
}

TEST(FusionBlock, SingleKeyCrossAttentionIsIdentityWeight) {
  // With one query row and one key row the softmaxed score matrix is [[1]],
  // so attention reduces to the value projection alone.
  std::mt19937_64 rng(5);
  auto attn = nn::Attention::init(4, rng);
  Tensor q_in = Tensor::randn({1, 4}, rng);
  Tensor kv_in = Tensor::randn({1, 4}, rng);
  Tensor out = attn.forward(q_in, kv_in, 2);
  Tensor v = add_row_vector(matmul(kv_in, attn.wv), attn.bv);
  Tensor expect = add_row_vector(matmul(v, attn.wo), attn.bo);
  EXPECT_LT(max_abs_diff(out, expect), 1e-12);
}

TEST(FusionBlock, ZeroedCrossOutputMakesTextChannelImageIndependent) {
  auto cfg = small_config();
  std::mt19937_64 rng(6);
  auto model = BridgeModel::init(cfg, rng);
  for (auto& block : model.blocks) {
    zero_tensor(block.text.cross_attn.wo);
    zero_tensor(block.text.cross_attn.bo);
  }
  Tensor z1 = model.forward(synthetic_image("one", 16, cfg.channels));
  Tensor z2 = model.forward(synthetic_image("two", 16, cfg.channels));
  EXPECT_TRUE(bitwise_equal(z1, z2));
}

TEST(FusionBlock, PatchPermutationInvarianceWithoutPositions) {
  auto cfg = small_config();
  std::mt19937_64 rng(7);
  auto model = BridgeModel::init(cfg, rng);
  zero_tensor(model.patch.pos);

  Tensor a = synthetic_image("perm", 16, cfg.channels);
  // Swap patches (0,0) and (1,1) at the pixel level.
  std::vector<double> data(a.data().begin(), a.data().end());
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x)
      for (std::size_t c = 0; c < cfg.channels; ++c)
        std::swap(data[(y * 16 + x) * cfg.channels + c],
                  data[((y + 8) * 16 + (x + 8)) * cfg.channels + c]);
  Tensor b = Tensor::from_data({16, 16, cfg.channels}, std::move(data));

  Tensor za = model.forward(a);
  Tensor zb = model.forward(b);
  EXPECT_LT(max_abs_diff(za, zb), 1e-9);
}

TEST(BridgeForward, FixedLengthContract) {
  for (std::size_t n : {std::size_t{1}, std::size_t{8}}) {
    BridgeConfig cfg16 = small_config();
    cfg16.n = n;
    BridgeConfig cfg32 = cfg16;
    cfg32.image_size = 32;
    std::mt19937_64 rng(8);
    auto m16 = BridgeModel::init(cfg16, rng);
    auto m32 = BridgeModel::init(cfg32, rng);
    EXPECT_EQ(m16.forward(synthetic_image("x", 16, 3)).shape(),
              (Shape{n, cfg16.d}));
    EXPECT_EQ(m32.forward(synthetic_image("x", 32, 3)).shape(),
              (Shape{n, cfg32.d}));
    // The 32-config model also accepts the smaller stage resolution.
    EXPECT_EQ(m32.forward(synthetic_image("x", 16, 3)).shape(),
              (Shape{n, cfg32.d}));
  }
}

TEST(BridgeForward, QueryGradientsMatchFiniteDifferences) {
  auto cfg = small_config();
  cfg.channels = 1;
  std::mt19937_64 rng(9);
  auto model = BridgeModel::init(cfg, rng);
  Tensor img = synthetic_image("grad", 16, cfg.channels);
  auto f = [&] { return sum(model.forward(img)); };
  auto report = finite_diff_check(f, {{"q", model.queries.q}}, 1e-5);
  EXPECT_LT(report.max_rel_err, 1e-4);
}

TEST(BridgeForward, DistinctImagesGiveDistinctFeatures) {
  auto cfg = small_config();
  std::mt19937_64 rng(10);
  auto model = BridgeModel::init(cfg, rng);
  for (int i = 0; i < 20; ++i) {
    Tensor z1 = model.forward(
        synthetic_image("pair_a_" + std::to_string(i), 16, cfg.channels));
    Tensor z2 = model.forward(
        synthetic_image("pair_b_" + std::to_string(i), 16, cfg.channels));
    EXPECT_GT(max_abs_diff(z1, z2), 1e-12) << "pair " << i;
  }
}

TEST(BridgeForward, DeterministicAcrossRebuilds) {
  auto cfg = small_config();
  std::mt19937_64 rng1(11), rng2(11);
  auto m1 = BridgeModel::init(cfg, rng1);
  auto m2 = BridgeModel::init(cfg, rng2);
  Tensor img = synthetic_image("det", 16, cfg.channels);
  EXPECT_TRUE(bitwise_equal(m1.forward(img), m2.forward(img)));
}

TEST(Project, LinearityAndIdentity) {
  auto cfg = small_config();  // d == d_lm == 8
  std::mt19937_64 rng(12);
  auto model = BridgeModel::init(cfg, rng);

  zero_tensor(model.proj_b);
  Tensor zero_z = Tensor::zeros({cfg.n, cfg.d});
  Tensor h = model.project(zero_z);
  for (std::size_t i = 0; i < h.numel(); ++i) EXPECT_DOUBLE_EQ(h.at(i), 0.0);

  auto& w = model.proj_w.mutable_data();
  std::fill(w.begin(), w.end(), 0.0);
  for (std::size_t i = 0; i < cfg.d; ++i) w[i * cfg.d_lm + i] = 1.0;
  Tensor z = Tensor::randn({cfg.n, cfg.d}, rng);
  Tensor hz = model.project(z);
  EXPECT_TRUE(bitwise_equal(hz, z));
}

TEST(Project, WeightGradientsMatchFiniteDifferences) {
  auto cfg = small_config();
  cfg.channels = 1;
  std::mt19937_64 rng(13);
  auto model = BridgeModel::init(cfg, rng);
  Tensor img = synthetic_image("proj", 16, cfg.channels);
  auto f = [&] { return sum(model.project(model.forward(img))); };
  auto report = finite_diff_check(
      f, {{"w", model.proj_w}, {"b", model.proj_b}}, 1e-5);
  EXPECT_LT(report.max_rel_err, 1e-6);
}

TEST(BridgeConfig, ValidationAndJson) {
  BridgeConfig bad = small_config();
  bad.d = 9;  // not divisible by heads
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_config();
  bad.image_size = 20;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = small_config();
  bad.n = 0;
  EXPECT_THROW(bad.validate(), ConfigError);

  BridgeConfig cfg = small_config();
  nlohmann::json j = cfg;
  BridgeConfig back = j.get<BridgeConfig>();
  EXPECT_EQ(back.d, cfg.d);
  EXPECT_EQ(back.n, cfg.n);
  EXPECT_EQ(back.image_size, cfg.image_size);
  EXPECT_EQ(back.projection_bias, cfg.projection_bias);
}

TEST(SyntheticImage, DeterministicAndBounded) {
  Tensor a = synthetic_image("key", 16, 3);
  Tensor b = synthetic_image("key", 16, 3);
  EXPECT_TRUE(bitwise_equal(a, b));
  Tensor c = synthetic_image("other", 16, 3);
  EXPECT_GT(max_abs_diff(a, c), 0.0);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_GE(a.at(i), 0.0);
    EXPECT_LE(a.at(i), 1.0);
  }
}
