#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "muffin/errors.hpp"
#include "muffin/nn.hpp"
#include "muffin/tensor.hpp"

// Desk-scale decoder LM: byte-level vocabulary, Vicuna-style conversation
// rendering with answer-span loss masks, a causal transformer that consumes
// the projected visual prefix, and greedy generation.

namespace muffin::lm {

// ---------------------------------------------------------------------------
// Vocabulary: 256 raw bytes plus BOS/EOS/PAD/IMG specials. Specials are
// inserted programmatically, never parsed out of text, so the byte round
// trip is the identity.
struct Vocab {
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kPad = 258;
  static constexpr int kImg = 259;
  static constexpr std::size_t kSize = 260;

  static std::vector<int> tokenize(std::string_view text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (unsigned char c : text) ids.push_back(static_cast<int>(c));
    return ids;
  }

  static std::string detokenize(std::span<const int> ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids)
      if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
    return out;
  }
};

// ---------------------------------------------------------------------------
// Conversation rendering

struct Turn {
  std::string role;  // "user" | "assistant"
  std::string text;
};

inline void to_json(nlohmann::json& j, const Turn& t) {
  j = nlohmann::json{{"role", t.role}, {"text", t.text}};
}
inline void from_json(const nlohmann::json& j, Turn& t) {
  j.at("role").get_to(t.role);
  j.at("text").get_to(t.text);
}

/// Fixed system preamble, loaded from a golden file (newline-normalized,
/// one trailing newline stripped).
struct ConversationTemplate {
  std::string preamble;

  static ConversationTemplate load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
      throw ConfigError("conversation template: cannot open " + path.string());
    std::string text((std::istreambuf_iterator<char>(is)),
                     std::istreambuf_iterator<char>());
    std::string normalized;
    normalized.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (text[i] == '\r' && i + 1 < text.size() && text[i + 1] == '\n')
        continue;
      normalized.push_back(text[i]);
    }
    if (!normalized.empty() && normalized.back() == '\n')
      normalized.pop_back();
    return {std::move(normalized)};
  }
};

/// Tokenized dialogue whose loss mask selects exactly the assistant answer
/// spans plus each answer's terminating EOS.
struct ConversationSnippet {
  std::vector<int> token_ids;
  std::vector<int> loss_mask;
  std::vector<Turn> turns;
  std::string instruction;  // first user turn
};

namespace detail {

inline void append_text(ConversationSnippet& s, std::string_view text,
                        int mask) {
  for (unsigned char c : text) {
    s.token_ids.push_back(static_cast<int>(c));
    s.loss_mask.push_back(mask);
  }
}

inline void check_roles(const std::vector<Turn>& dialogue) {
  if (dialogue.empty())
    throw DataError("render_conversation: empty dialogue");
  for (std::size_t i = 0; i < dialogue.size(); ++i) {
    const std::string& want = (i % 2 == 0) ? "user" : "assistant";
    if (dialogue[i].role != want)
      throw DataError("render_conversation: turn " + std::to_string(i) +
                      " has role '" + dialogue[i].role + "', expected '" +
                      want + "'");
  }
}

}  // namespace detail

/// Renders `USER: {u} ASSISTANT: {a}<eos>` per round behind the fixed
/// preamble. Mask is 1 exactly on answer bytes and the trailing EOS of each
/// assistant turn; the EOS doubles as the separator before the next round.
inline ConversationSnippet render_conversation(
    const std::vector<Turn>& dialogue, const ConversationTemplate& tmpl) {
  detail::check_roles(dialogue);
  if (dialogue.size() % 2 != 0)
    throw DataError("render_conversation: turn " +
                    std::to_string(dialogue.size() - 1) +
                    " is an unanswered user turn");
  ConversationSnippet s;
  s.turns = dialogue;
  s.instruction = dialogue[0].text;
  s.token_ids.push_back(Vocab::kBos);
  s.loss_mask.push_back(0);
  detail::append_text(s, tmpl.preamble, 0);
  for (std::size_t r = 0; r + 1 < dialogue.size(); r += 2) {
    detail::append_text(s, r == 0 ? " USER: " : "USER: ", 0);
    detail::append_text(s, dialogue[r].text, 0);
    detail::append_text(s, " ASSISTANT: ", 0);
    detail::append_text(s, dialogue[r + 1].text, 1);
    s.token_ids.push_back(Vocab::kEos);
    s.loss_mask.push_back(1);
  }
  return s;
}

/// Prompt for generation: preamble + rendered rounds so far + the pending
/// user turn, ending right after "ASSISTANT: ".
inline std::vector<int> render_prompt(const std::string& instruction,
                                      const ConversationTemplate& tmpl) {
  ConversationSnippet s;
  s.token_ids.push_back(Vocab::kBos);
  s.loss_mask.push_back(0);
  detail::append_text(s, tmpl.preamble, 0);
  detail::append_text(s, " USER: ", 0);
  detail::append_text(s, instruction, 0);
  detail::append_text(s, " ASSISTANT: ", 0);
  return std::move(s.token_ids);
}

// ---------------------------------------------------------------------------
// Decoder transformer

struct DecoderConfig {
  std::size_t d_lm = 48;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t vocab = Vocab::kSize;
  std::size_t max_seq_len = 512;

  void validate() const {
    if (d_lm == 0 || heads == 0 || d_lm % heads != 0)
      throw ConfigError("decoder config: d_lm (" + std::to_string(d_lm) +
                        ") must be divisible by heads (" +
                        std::to_string(heads) + ")");
    if (layers == 0 || vocab == 0 || max_seq_len == 0)
      throw ConfigError("decoder config: layers/vocab/max_seq_len must be >0");
  }
};

inline void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = nlohmann::json{{"d_lm", c.d_lm},
                     {"layers", c.layers},
                     {"heads", c.heads},
                     {"vocab", c.vocab},
                     {"max_seq_len", c.max_seq_len}};
}
inline void from_json(const nlohmann::json& j, DecoderConfig& c) {
  j.at("d_lm").get_to(c.d_lm);
  j.at("layers").get_to(c.layers);
  j.at("heads").get_to(c.heads);
  c.vocab = j.value("vocab", Vocab::kSize);
  j.at("max_seq_len").get_to(c.max_seq_len);
}

struct DecoderBlock {
  nn::LayerNorm ln_attn;
  nn::Attention attn;
  nn::LayerNorm ln_ffn;
  nn::FeedForward ffn;

  static DecoderBlock init(std::size_t d, std::mt19937_64& rng) {
    return {nn::LayerNorm::init(d), nn::Attention::init(d, rng),
            nn::LayerNorm::init(d), nn::FeedForward::init(d, 2 * d, rng)};
  }
  void params(nn::NamedParams& out, const std::string& prefix) const {
    ln_attn.params(out, prefix + ".ln_attn");
    attn.params(out, prefix + ".attn");
    ln_ffn.params(out, prefix + ".ln_ffn");
    ffn.params(out, prefix + ".ffn");
  }
};

struct DecoderModel {
  DecoderConfig cfg;
  Tensor tok_embed;  // [V×d_lm]
  Tensor pos_embed;  // [max_seq_len×d_lm], covers prefix + text jointly
  std::vector<DecoderBlock> blocks;
  nn::LayerNorm final_ln;
  Tensor out_w;  // [d_lm×V]
  Tensor out_b;  // [V]

  static DecoderModel init(const DecoderConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    DecoderModel m;
    m.cfg = cfg;
    m.tok_embed =
        Tensor::randn({cfg.vocab, cfg.d_lm}, rng, nn::kInitStd, true);
    m.pos_embed =
        Tensor::randn({cfg.max_seq_len, cfg.d_lm}, rng, nn::kInitStd, true);
    for (std::size_t i = 0; i < cfg.layers; ++i)
      m.blocks.push_back(DecoderBlock::init(cfg.d_lm, rng));
    m.final_ln = nn::LayerNorm::init(cfg.d_lm);
    // Small output head keeps a fresh model's logits near-uniform (step-one
    // loss close to ln V) without starving upstream gradients.
    m.out_w = Tensor::randn({cfg.d_lm, cfg.vocab}, rng,
                            0.5 * nn::fan_in_std(cfg.d_lm), true);
    m.out_b = Tensor::zeros({cfg.vocab}, true);
    return m;
  }

  /// Forward with the visual prefix occupying positions 0..n-1 and text
  /// tokens behind it. The causal mask lets every text position attend to
  /// all prefix positions and to earlier text positions only. Returns
  /// logits for text positions, [k'×V].
  Tensor forward(const Tensor& prefix, const std::vector<int>& token_ids) const {
    const std::size_t n = prefix.defined() ? prefix.rows() : 0;
    const std::size_t k = token_ids.size();
    if (k == 0) throw ContractError("decoder forward: no text tokens");
    const std::size_t total = n + k;
    if (total > cfg.max_seq_len)
      throw DataError("decoder forward: sequence length " +
                      std::to_string(total) + " exceeds capacity " +
                      std::to_string(cfg.max_seq_len));
    if (n > 0 && prefix.cols() != cfg.d_lm)
      throw ShapeError("decoder forward: prefix width " +
                       shape_str(prefix.shape()) + " != d_lm " +
                       std::to_string(cfg.d_lm));

    std::vector<std::size_t> ids(k);
    for (std::size_t i = 0; i < k; ++i) {
      if (token_ids[i] < 0 ||
          static_cast<std::size_t>(token_ids[i]) >= cfg.vocab)
        throw ContractError("decoder forward: token id out of vocabulary");
      ids[i] = static_cast<std::size_t>(token_ids[i]);
    }
    Tensor text_embeds = gather_rows(tok_embed, ids);
    Tensor x = n > 0 ? concat_rows({prefix, text_embeds}) : text_embeds;

    std::vector<std::size_t> pos_idx(total);
    for (std::size_t i = 0; i < total; ++i) pos_idx[i] = i;
    x = add(x, gather_rows(pos_embed, pos_idx));

    Tensor causal = nn::causal_score_bias(total);
    for (const auto& block : blocks) {
      Tensor normed = block.ln_attn.forward(x);
      x = add(x, block.attn.forward(normed, normed, cfg.heads, &causal));
      x = add(x, block.ffn.forward(block.ln_ffn.forward(x)));
    }
    Tensor h = final_ln.forward(x);
    Tensor text_h = slice_rows(h, n, k);
    return add_row_vector(matmul(text_h, out_w), out_b);
  }

  nn::NamedParams params() const {
    nn::NamedParams out;
    nn::collect(out, "llm.tok_embed", tok_embed);
    nn::collect(out, "llm.pos_embed", pos_embed);
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].params(out, "llm.blocks." + std::to_string(i));
    final_ln.params(out, "llm.final_ln");
    nn::collect(out, "llm.out_w", out_w);
    nn::collect(out, "llm.out_b", out_b);
    return out;
  }
};

// ---------------------------------------------------------------------------
// Loss and generation

/// Number of positions the loss actually covers (mask 1 shifted by one).
inline std::size_t answer_token_count(const ConversationSnippet& s) {
  std::size_t count = 0;
  for (std::size_t t = 1; t < s.loss_mask.size(); ++t)
    if (s.loss_mask[t]) ++count;
  return count;
}

/// Answer-span log-likelihood loss under the shift-by-one convention:
/// logits row t scores token t+1 and inherits its mask, so the summation
/// runs only over answer-span tokens. Returns the negated sum.
inline Tensor lm_loss(const Tensor& logits, const ConversationSnippet& s) {
  const std::size_t k = s.token_ids.size();
  if (logits.rows() != k)
    throw ContractError("lm_loss: logits rows " +
                        std::to_string(logits.rows()) +
                        " != snippet length " + std::to_string(k));
  if (k < 2) return Tensor::scalar(0.0);  // nothing to predict
  Tensor scoring = slice_rows(logits, 0, k - 1);
  std::vector<int> targets(s.token_ids.begin() + 1, s.token_ids.end());
  std::vector<int> mask(s.loss_mask.begin() + 1, s.loss_mask.end());
  return cross_entropy(scoring, targets, mask);
}

/// Deterministic argmax decoding; stops at EOS or max_new_tokens, or when
/// the context window fills up.
inline std::string greedy_generate(const DecoderModel& model,
                                   const Tensor& prefix,
                                   const std::string& instruction,
                                   const ConversationTemplate& tmpl,
                                   std::size_t max_new_tokens) {
  std::vector<int> ids = render_prompt(instruction, tmpl);
  const std::size_t n = prefix.defined() ? prefix.rows() : 0;
  if (n + ids.size() + 1 > model.cfg.max_seq_len)
    throw DataError("greedy_generate: rendered prompt of " +
                    std::to_string(ids.size()) +
                    " tokens leaves no room in context of " +
                    std::to_string(model.cfg.max_seq_len));
  std::vector<int> generated;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    if (n + ids.size() >= model.cfg.max_seq_len) break;
    Tensor logits = model.forward(prefix, ids);
    const std::size_t last = logits.rows() - 1;
    const std::size_t V = logits.cols();
    std::size_t best = 0;
    double best_v = logits(last, 0);
    for (std::size_t v = 1; v < V; ++v)
      if (logits(last, v) > best_v) {
        best_v = logits(last, v);
        best = v;
      }
    if (best == static_cast<std::size_t>(Vocab::kEos)) break;
    generated.push_back(static_cast<int>(best));
    ids.push_back(static_cast<int>(best));
  }
  return Vocab::detokenize(generated);
}

}  // namespace muffin::lm
