#include "muffin/decoder.hpp"

#include <gtest/gtest.h>

#include <random>

#include "muffin/bridge.hpp"
#include "test_support.hpp"

using namespace muffin;
using lm::ConversationTemplate;
using lm::DecoderConfig;
using lm::DecoderModel;
using lm::Turn;
using lm::Vocab;

namespace {

ConversationTemplate tmpl() {
  return ConversationTemplate::load(muffin::testing::golden_dir() /
                                    "conversation_preamble.txt");
}

DecoderConfig small_config() {
  DecoderConfig cfg;
  cfg.d_lm = 16;
  cfg.layers = 1;
  cfg.heads = 2;
  cfg.max_seq_len = 256;
  return cfg;
}

// Independent oracle: count maximal runs of 1s in a mask.
std::size_t count_mask_regions(const std::vector<int>& mask) {
  std::size_t regions = 0;
  for (std::size_t i = 0; i < mask.size(); ++i)
    if (mask[i] == 1 && (i == 0 || mask[i - 1] == 0)) ++regions;
  return regions;
}

}  // namespace

TEST(Vocab, RoundTripIdentityOnRandomByteStrings) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    std::size_t len = rng() % 64;
    std::string text(len, '\0');
    for (auto& c : text) c = static_cast<char>(rng() & 0xff);
    auto ids = Vocab::tokenize(text);
    EXPECT_EQ(Vocab::detokenize(ids), text);
  }
}

TEST(RenderConversation, SingleRoundMaskCoversAnswerAndEos) {
  auto t = tmpl();
  auto s = lm::render_conversation(
      {{"user", "hi"}, {"assistant", "hello"}}, t);
  // Collect the masked token ids; they must be the bytes of "hello" + EOS.
  std::vector<int> masked;
  for (std::size_t i = 0; i < s.token_ids.size(); ++i)
    if (s.loss_mask[i]) masked.push_back(s.token_ids[i]);
  ASSERT_EQ(masked.size(), 6u);
  EXPECT_EQ(Vocab::detokenize(std::span(masked.data(), 5)), "hello");
  EXPECT_EQ(masked.back(), Vocab::kEos);
  EXPECT_EQ(s.instruction, "hi");
  EXPECT_EQ(s.token_ids[0], Vocab::kBos);
  EXPECT_EQ(s.loss_mask[0], 0);
}

TEST(RenderConversation, EmptyAssistantMasksOnlyEos) {
  auto s =
      lm::render_conversation({{"user", "say nothing"}, {"assistant", ""}},
                              tmpl());
  std::size_t ones = 0;
  for (std::size_t i = 0; i < s.loss_mask.size(); ++i)
    if (s.loss_mask[i]) {
      ++ones;
      EXPECT_EQ(s.token_ids[i], Vocab::kEos);
    }
  EXPECT_EQ(ones, 1u);
}

TEST(RenderConversation, ThreeRoundsGiveThreeContiguousRegions) {
  auto s = lm::render_conversation({{"user", "a"},
                                    {"assistant", "one"},
                                    {"user", "b"},
                                    {"assistant", "two"},
                                    {"user", "c"},
                                    {"assistant", "three"}},
                                   tmpl());
  EXPECT_EQ(count_mask_regions(s.loss_mask), 3u);
  EXPECT_EQ(s.turns.size(), 6u);
}

TEST(RenderConversation, RoleOrderViolationsNameTheTurn) {
  try {
    lm::render_conversation({{"assistant", "hi"}}, tmpl());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("turn 0"), std::string::npos);
  }
  try {
    lm::render_conversation(
        {{"user", "a"}, {"user", "b"}, {"assistant", "c"}}, tmpl());
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("turn 1"), std::string::npos);
  }
  EXPECT_THROW(
      lm::render_conversation({{"user", "dangling question"}}, tmpl()),
      DataError);
  EXPECT_THROW(lm::render_conversation({}, tmpl()), DataError);
}

TEST(DecoderForward, LogitsShapeAndPrefixDependence) {
  auto cfg = small_config();
  std::mt19937_64 rng(19);
  auto model = DecoderModel::init(cfg, rng);
  std::vector<int> ids = Vocab::tokenize("hello world");
  Tensor prefix = Tensor::randn({4, cfg.d_lm}, rng, 0.5);

  Tensor logits = model.forward(prefix, ids);
  EXPECT_EQ(logits.shape(), (Shape{ids.size(), cfg.vocab}));

  // Perturbing H_v changes the logits at text position 0.
  std::vector<double> bumped(prefix.data().begin(), prefix.data().end());
  bumped[0] += 0.37;
  Tensor prefix2 = Tensor::from_data(prefix.shape(), std::move(bumped));
  Tensor logits2 = model.forward(prefix2, ids);
  bool changed = false;
  for (std::size_t v = 0; v < cfg.vocab; ++v)
    if (logits(0, v) != logits2(0, v)) changed = true;
  EXPECT_TRUE(changed);
}

TEST(DecoderForward, PrefixVisibleFromEveryTextPosition) {
  auto cfg = small_config();
  std::mt19937_64 rng(23);
  auto model = DecoderModel::init(cfg, rng);
  std::vector<int> ids = Vocab::tokenize("abcdef");
  Tensor p1 = Tensor::randn({2, cfg.d_lm}, rng, 0.5);
  std::vector<double> bumped(p1.data().begin(), p1.data().end());
  std::normal_distribution<double> noise(0.0, 0.1);
  for (auto& v : bumped) v += noise(rng);
  Tensor p2 = Tensor::from_data(p1.shape(), std::move(bumped));
  Tensor l1 = model.forward(p1, ids);
  Tensor l2 = model.forward(p2, ids);
  for (std::size_t t = 0; t < ids.size(); ++t) {
    double max_diff = 0.0;
    for (std::size_t v = 0; v < cfg.vocab; ++v)
      max_diff = std::max(max_diff, std::fabs(l1(t, v) - l2(t, v)));
    EXPECT_GT(max_diff, 1e-9) << "text position " << t;
  }
}

TEST(DecoderForward, CausalityUnderRandomizedTokenSwaps) {
  auto cfg = small_config();
  std::mt19937_64 rng(29);
  auto model = DecoderModel::init(cfg, rng);
  Tensor prefix = Tensor::randn({3, cfg.d_lm}, rng, 0.5);
  std::vector<int> ids = Vocab::tokenize("the quick brown fox");

  Tensor base = model.forward(prefix, ids);
  for (int trial = 0; trial < 10; ++trial) {
    // Change a token at position j; logits at all i < j must be bit-equal.
    std::size_t j = 1 + rng() % (ids.size() - 1);
    std::vector<int> mutated = ids;
    mutated[j] = static_cast<int>((mutated[j] + 1 + rng() % 200) % 256);
    Tensor swapped = model.forward(prefix, mutated);
    for (std::size_t i = 0; i < j; ++i)
      for (std::size_t v = 0; v < cfg.vocab; ++v)
        ASSERT_EQ(base(i, v), swapped(i, v))
            << "position " << i << " depends on later token " << j;
  }
}

TEST(DecoderForward, SequenceOverflowIsCapacityError) {
  auto cfg = small_config();
  cfg.max_seq_len = 8;
  std::mt19937_64 rng(31);
  auto model = DecoderModel::init(cfg, rng);
  Tensor prefix = Tensor::randn({4, cfg.d_lm}, rng, 0.5);
  EXPECT_THROW(model.forward(prefix, Vocab::tokenize("too long text")),
               DataError);
}

TEST(LmLoss, AllZeroMaskGivesZero) {
  auto cfg = small_config();
  std::mt19937_64 rng(37);
  auto model = DecoderModel::init(cfg, rng);
  lm::ConversationSnippet s;
  s.token_ids = Vocab::tokenize("xyz");
  s.loss_mask = {0, 0, 0};
  Tensor logits = model.forward(Tensor(), s.token_ids);
  EXPECT_DOUBLE_EQ(lm::lm_loss(logits, s).item(), 0.0);
}

TEST(LmLoss, SingleMaskedUniformLogitsIsLogVocab) {
  lm::ConversationSnippet s;
  s.token_ids = {Vocab::kBos, 42};
  s.loss_mask = {0, 1};
  Tensor logits = Tensor::zeros({2, Vocab::kSize});
  EXPECT_NEAR(lm::lm_loss(logits, s).item(), std::log(260.0), 1e-12);
}

TEST(LmLoss, MatchesBruteForceOracle) {
  std::mt19937_64 rng(41);
  lm::ConversationSnippet s;
  s.token_ids = {Vocab::kBos, 10, 20, 30, Vocab::kEos};
  s.loss_mask = {0, 0, 1, 1, 1};
  Tensor logits = Tensor::randn({5, Vocab::kSize}, rng);

  // Direct -sum log p over shifted answer positions.
  double expect = 0.0;
  for (std::size_t t = 0; t + 1 < s.token_ids.size(); ++t) {
    if (!s.loss_mask[t + 1]) continue;
    double denom = 0.0;
    for (std::size_t v = 0; v < Vocab::kSize; ++v)
      denom += std::exp(logits(t, v));
    expect -= std::log(
        std::exp(logits(t, static_cast<std::size_t>(s.token_ids[t + 1]))) /
        denom);
  }
  EXPECT_NEAR(lm::lm_loss(logits, s).item(), expect, 1e-10);
}

TEST(LmLoss, AlignmentMismatchIsContractError) {
  lm::ConversationSnippet s;
  s.token_ids = {Vocab::kBos, 1, 2};
  s.loss_mask = {0, 1, 1};
  Tensor logits = Tensor::zeros({2, Vocab::kSize});
  EXPECT_THROW(lm::lm_loss(logits, s), ContractError);
}

TEST(LmLoss, GradientExactlyZeroAtNonAnswerPositions) {
  auto cfg = small_config();
  std::mt19937_64 rng(43);
  auto model = DecoderModel::init(cfg, rng);
  auto s = lm::render_conversation(
      {{"user", "color?"}, {"assistant", "red"}}, tmpl());
  // Track the logits tensor itself; interior nodes keep grads.
  Tensor logits = model.forward(Tensor(), s.token_ids);
  Tensor loss = lm::lm_loss(logits, s);
  backward(loss);
  ASSERT_TRUE(logits.has_grad());
  auto g = logits.grad();
  const std::size_t V = logits.cols();
  const std::size_t k = s.token_ids.size();
  for (std::size_t t = 0; t < k; ++t) {
    const bool answer_pos = (t + 1 < k) && s.loss_mask[t + 1] == 1;
    double row_abs = 0.0;
    for (std::size_t v = 0; v < V; ++v) row_abs += std::fabs(g[t * V + v]);
    if (answer_pos)
      EXPECT_GT(row_abs, 0.0) << "answer position " << t;
    else
      EXPECT_EQ(row_abs, 0.0) << "non-answer position " << t;
  }
}

TEST(GreedyGenerate, ZeroBudgetAndDeterminism) {
  auto cfg = small_config();
  std::mt19937_64 rng(47);
  auto model = DecoderModel::init(cfg, rng);
  Tensor prefix = Tensor::randn({2, cfg.d_lm}, rng, 0.5);
  auto t = tmpl();
  EXPECT_EQ(lm::greedy_generate(model, prefix, "hi", t, 0), "");
  auto a = lm::greedy_generate(model, prefix, "hi", t, 8);
  auto b = lm::greedy_generate(model, prefix, "hi", t, 8);
  EXPECT_EQ(a, b);
}

TEST(GreedyGenerate, OversizedPromptIsError) {
  auto cfg = small_config();
  cfg.max_seq_len = 32;
  std::mt19937_64 rng(53);
  auto model = DecoderModel::init(cfg, rng);
  Tensor prefix = Tensor::randn({2, cfg.d_lm}, rng, 0.5);
  EXPECT_THROW(lm::greedy_generate(model, prefix,
                                   "an instruction that is far too long for "
                                   "this tiny context window",
                                   tmpl(), 4),
               DataError);
}

TEST(DecoderConfig, ValidationAndJsonRoundTrip) {
  DecoderConfig bad;
  bad.d_lm = 10;
  bad.heads = 4;
  EXPECT_THROW(bad.validate(), ConfigError);

  DecoderConfig cfg = small_config();
  nlohmann::json j = cfg;
  auto back = j.get<DecoderConfig>();
  EXPECT_EQ(back.d_lm, cfg.d_lm);
  EXPECT_EQ(back.max_seq_len, cfg.max_seq_len);
  EXPECT_EQ(back.vocab, Vocab::kSize);
}
