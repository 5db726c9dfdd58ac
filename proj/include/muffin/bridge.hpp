#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "muffin/errors.hpp"
#include "muffin/nn.hpp"
#include "muffin/tensor.hpp"

// Two-channel vision-language bridge. Image patches enter the vision
// channel, a bank of trainable query vectors enters the text channel, and
// each block runs self-attention per channel plus cross-attention against
// the other channel's post-self-attention states. The final text-channel
// states are the fixed-length visual feature; a single affine projection
// maps them into the decoder LM's embedding space.

namespace muffin::bridge {

struct BridgeConfig {
  std::size_t d = 32;           // bridge hidden size
  std::size_t n = 8;            // trainable query vectors
  std::size_t num_blocks = 2;   // fusion blocks
  std::size_t num_heads = 4;
  std::size_t patch_size = 8;   // pixels per patch side
  std::size_t image_size = 32;  // maximum accepted input resolution
  std::size_t d_lm = 48;        // decoder-LM embedding size
  std::size_t channels = 3;
  // H_v = W·Z_v; the projection equation shows no bias term, so the bias is
  // configurable and documented, default on.
  bool projection_bias = true;

  void validate() const {
    if (n < 1) throw ConfigError("bridge config: n must be >= 1");
    if (d == 0 || num_heads == 0 || d % num_heads != 0)
      throw ConfigError("bridge config: d (" + std::to_string(d) +
                        ") must be divisible by num_heads (" +
                        std::to_string(num_heads) + ")");
    if (patch_size == 0 || image_size % patch_size != 0)
      throw ConfigError("bridge config: image_size (" +
                        std::to_string(image_size) +
                        ") must be divisible by patch_size (" +
                        std::to_string(patch_size) + ")");
    if (d_lm == 0 || channels == 0 || num_blocks == 0)
      throw ConfigError("bridge config: d_lm/channels/num_blocks must be >0");
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t max_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }
};

inline void to_json(nlohmann::json& j, const BridgeConfig& c) {
  j = nlohmann::json{{"d", c.d},
                     {"n", c.n},
                     {"num_blocks", c.num_blocks},
                     {"num_heads", c.num_heads},
                     {"patch_size", c.patch_size},
                     {"image_size", c.image_size},
                     {"d_lm", c.d_lm},
                     {"channels", c.channels},
                     {"projection_bias", c.projection_bias}};
}

inline void from_json(const nlohmann::json& j, BridgeConfig& c) {
  j.at("d").get_to(c.d);
  j.at("n").get_to(c.n);
  j.at("num_blocks").get_to(c.num_blocks);
  j.at("num_heads").get_to(c.num_heads);
  j.at("patch_size").get_to(c.patch_size);
  j.at("image_size").get_to(c.image_size);
  j.at("d_lm").get_to(c.d_lm);
  c.channels = j.value("channels", std::size_t{3});
  c.projection_bias = j.value("projection_bias", true);
}

/// Deterministic procedural image keyed by an image id: the pixel stream is
/// a splitmix64 sequence seeded from the key hash, scaled into [0,1].
inline Tensor synthetic_image(std::string_view key, std::size_t size,
                              std::size_t channels) {
  std::uint64_t h = 1469598103934665603ull;  // FNV-1a
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::vector<double> pixels(size * size * channels);
  std::uint64_t state = h;
  for (double& p : pixels) {
    state += 0x9e3779b97f4a7c15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    z ^= z >> 31;
    p = static_cast<double>(z >> 11) * 0x1.0p-53;
  }
  return Tensor::from_data({size, size, channels}, std::move(pixels));
}

/// Trainable query vectors plus learned positional offsets for the query
/// slots; their sum enters the text channel.
struct QueryBank {
  Tensor q;    // [n×d]
  Tensor pos;  // [n×d]

  static QueryBank init(const BridgeConfig& cfg, std::mt19937_64& rng) {
    return {Tensor::randn({cfg.n, cfg.d}, rng, nn::kInitStd, true),
            Tensor::randn({cfg.n, cfg.d}, rng, nn::kInitStd, true)};
  }
  Tensor states() const { return add(q, pos); }
  void params(nn::NamedParams& out, const std::string& prefix) const {
    nn::collect(out, prefix + ".q", q);
    nn::collect(out, prefix + ".pos", pos);
  }
};

struct PatchEmbed {
  Tensor w;    // [patch_dim×d]
  Tensor b;    // [d]
  Tensor pos;  // [max_patches×d], indexed by 2-D grid position

  static PatchEmbed init(const BridgeConfig& cfg, std::mt19937_64& rng) {
    PatchEmbed p;
    p.w = Tensor::randn({cfg.patch_dim(), cfg.d}, rng,
                        nn::fan_in_std(cfg.patch_dim()), true);
    p.b = Tensor::zeros({cfg.d}, true);
    p.pos = Tensor::randn({cfg.max_patches(), cfg.d}, rng, nn::kInitStd, true);
    return p;
  }
  void params(nn::NamedParams& out, const std::string& prefix) const {
    nn::collect(out, prefix + ".w", w);
    nn::collect(out, prefix + ".b", b);
    nn::collect(out, prefix + ".pos", pos);
  }
};

/// Patchify + linear embed + learned 2-D positional embedding. Accepts any
/// square image whose side divides into patches and fits the configured
/// grid; grid coordinates index the positional table so a patch at (r, c)
/// sees the same embedding at every resolution.
inline Tensor embed_image(const Tensor& image, const BridgeConfig& cfg,
                          const PatchEmbed& embed) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != s[1] || s[2] != cfg.channels)
    throw ConfigError("embed_image: image shape " + shape_str(s) +
                      " does not match config (square, " +
                      std::to_string(cfg.channels) + " channels)");
  const std::size_t side = s[0];
  if (side % cfg.patch_size != 0 || side > cfg.image_size)
    throw ConfigError("embed_image: image side " + std::to_string(side) +
                      " incompatible with patch_size " +
                      std::to_string(cfg.patch_size) + " and image_size " +
                      std::to_string(cfg.image_size));
  const std::size_t g = side / cfg.patch_size;
  const std::size_t p = g * g;
  const std::size_t pd = cfg.patch_dim();

  std::vector<double> patches(p * pd);
  const auto px = image.data();
  const std::size_t ch = cfg.channels;
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc) {
      double* row = &patches[(pr * g + pc) * pd];
      std::size_t k = 0;
      for (std::size_t y = 0; y < cfg.patch_size; ++y)
        for (std::size_t x = 0; x < cfg.patch_size; ++x)
          for (std::size_t c = 0; c < ch; ++c)
            row[k++] = px[((pr * cfg.patch_size + y) * side +
                           (pc * cfg.patch_size + x)) *
                              ch +
                          c];
    }
  Tensor patch_matrix = Tensor::from_data({p, pd}, std::move(patches));

  std::vector<std::size_t> pos_idx(p);
  const std::size_t grid_max = cfg.grid();
  for (std::size_t pr = 0; pr < g; ++pr)
    for (std::size_t pc = 0; pc < g; ++pc)
      pos_idx[pr * g + pc] = pr * grid_max + pc;

  Tensor embedded = add_row_vector(matmul(patch_matrix, embed.w), embed.b);
  return add(embedded, gather_rows(embed.pos, pos_idx));
}

struct FusionChannel {
  nn::LayerNorm ln_self;
  nn::Attention self_attn;
  nn::LayerNorm ln_cross_q;
  nn::LayerNorm ln_cross_kv;
  nn::Attention cross_attn;
  nn::LayerNorm ln_ffn;
  nn::FeedForward ffn;

  static FusionChannel init(const BridgeConfig& cfg, std::mt19937_64& rng) {
    FusionChannel c;
    c.ln_self = nn::LayerNorm::init(cfg.d);
    c.self_attn = nn::Attention::init(cfg.d, rng);
    c.ln_cross_q = nn::LayerNorm::init(cfg.d);
    c.ln_cross_kv = nn::LayerNorm::init(cfg.d);
    c.cross_attn = nn::Attention::init(cfg.d, rng);
    c.ln_ffn = nn::LayerNorm::init(cfg.d);
    c.ffn = nn::FeedForward::init(cfg.d, 2 * cfg.d, rng);
    return c;
  }
  void params(nn::NamedParams& out, const std::string& prefix) const {
    ln_self.params(out, prefix + ".ln_self");
    self_attn.params(out, prefix + ".self_attn");
    ln_cross_q.params(out, prefix + ".ln_cross_q");
    ln_cross_kv.params(out, prefix + ".ln_cross_kv");
    cross_attn.params(out, prefix + ".cross_attn");
    ln_ffn.params(out, prefix + ".ln_ffn");
    ffn.params(out, prefix + ".ffn");
  }
};

/// One deep-fusion block: per channel, pre-norm self-attention, then
/// cross-attention against the other channel's post-self-attention states
/// (both channels read the same-block states, no staggering), then a
/// feed-forward sublayer. Residual connections wrap every sublayer.
struct FusionBlock {
  FusionChannel vision;
  FusionChannel text;

  static FusionBlock init(const BridgeConfig& cfg, std::mt19937_64& rng) {
    return {FusionChannel::init(cfg, rng), FusionChannel::init(cfg, rng)};
  }

  std::pair<Tensor, Tensor> forward(const Tensor& vision_states,
                                    const Tensor& text_states,
                                    std::size_t heads) const {
    auto self_pass = [heads](const FusionChannel& ch, const Tensor& x) {
      Tensor normed = ch.ln_self.forward(x);
      return add(x, ch.self_attn.forward(normed, normed, heads));
    };
    Tensor v_self = self_pass(vision, vision_states);
    Tensor t_self = self_pass(text, text_states);

    auto cross_pass = [heads](const FusionChannel& ch, const Tensor& own,
                              const Tensor& other) {
      return add(own, ch.cross_attn.forward(ch.ln_cross_q.forward(own),
                                            ch.ln_cross_kv.forward(other),
                                            heads));
    };
    Tensor v_cross = cross_pass(vision, v_self, t_self);
    Tensor t_cross = cross_pass(text, t_self, v_self);

    auto ffn_pass = [](const FusionChannel& ch, const Tensor& x) {
      return add(x, ch.ffn.forward(ch.ln_ffn.forward(x)));
    };
    return {ffn_pass(vision, v_cross), ffn_pass(text, t_cross)};
  }

  void params(nn::NamedParams& out, const std::string& prefix) const {
    vision.params(out, prefix + ".vision");
    text.params(out, prefix + ".text");
  }
};

/// The bridge model: patch embedder, query bank, fusion blocks, and the
/// affine projection into the LM embedding space.
struct BridgeModel {
  BridgeConfig cfg;
  PatchEmbed patch;
  QueryBank queries;
  std::vector<FusionBlock> blocks;
  Tensor proj_w;  // [d×d_lm]
  Tensor proj_b;  // [d_lm], zeros when projection_bias is off

  static BridgeModel init(const BridgeConfig& cfg, std::mt19937_64& rng) {
    cfg.validate();
    BridgeModel m;
    m.cfg = cfg;
    m.patch = PatchEmbed::init(cfg, rng);
    m.queries = QueryBank::init(cfg, rng);
    for (std::size_t i = 0; i < cfg.num_blocks; ++i)
      m.blocks.push_back(FusionBlock::init(cfg, rng));
    m.proj_w = Tensor::randn({cfg.d, cfg.d_lm}, rng, nn::kInitStd, true);
    m.proj_b = Tensor::zeros({cfg.d_lm}, cfg.projection_bias);
    return m;
  }

  /// Z_v: final text-channel states at the query positions, [n×d].
  Tensor forward(const Tensor& image) const {
    Tensor v = embed_image(image, cfg, patch);
    Tensor t = queries.states();
    for (const auto& block : blocks) {
      auto [nv, nt] = block.forward(v, t, cfg.num_heads);
      v = nv;
      t = nt;
    }
    return t;
  }

  /// H_v = W·Z_v (+ bias when configured); no nonlinearity.
  Tensor project(const Tensor& z) const {
    if (z.cols() != cfg.d)
      throw ShapeError("project: feature width " + shape_str(z.shape()) +
                       " does not match bridge hidden size " +
                       std::to_string(cfg.d));
    Tensor h = matmul(z, proj_w);
    if (cfg.projection_bias) h = add_row_vector(h, proj_b);
    return h;
  }

  nn::NamedParams bridge_params() const {
    nn::NamedParams out;
    patch.params(out, "bridge.patch");
    queries.params(out, "bridge.queries");
    for (std::size_t i = 0; i < blocks.size(); ++i)
      blocks[i].params(out, "bridge.blocks." + std::to_string(i));
    return out;
  }

  nn::NamedParams projection_params() const {
    nn::NamedParams out;
    nn::collect(out, "projection.w", proj_w);
    if (cfg.projection_bias) nn::collect(out, "projection.b", proj_b);
    return out;
  }
};

}  // namespace muffin::bridge
