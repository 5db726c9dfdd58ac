#pragma once

#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "muffin/bridge.hpp"
#include "muffin/decoder.hpp"
#include "muffin/hash.hpp"
#include "muffin/tensor.hpp"

// The assembled model: bridge + projection feeding a decoder LM. The bridge
// summarizes an image into n query states, the projection lifts them into
// the LM embedding space, and the decoder scores answer spans conditioned
// on that prefix.

namespace muffin::model {

struct ModelConfig {
  bridge::BridgeConfig bridge;
  lm::DecoderConfig decoder;

  void validate() const {
    bridge.validate();
    decoder.validate();
    if (bridge.d_lm != decoder.d_lm)
      throw ConfigError("model config: bridge d_lm (" +
                        std::to_string(bridge.d_lm) + ") != decoder d_lm (" +
                        std::to_string(decoder.d_lm) + ")");
  }

  std::string hash() const;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"bridge", c.bridge}, {"decoder", c.decoder}};
}
inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("bridge").get_to(c.bridge);
  j.at("decoder").get_to(c.decoder);
}

inline std::string ModelConfig::hash() const {
  nlohmann::json j = *this;
  return muffin::hash::sha256_hex(j.dump());
}

struct Model {
  ModelConfig cfg;
  bridge::BridgeModel bridge;
  lm::DecoderModel decoder;

  static Model init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Model m;
    m.cfg = cfg;
    m.bridge = bridge::BridgeModel::init(cfg.bridge, rng);
    m.decoder = lm::DecoderModel::init(cfg.decoder, rng);
    return m;
  }

  /// H_v for one image: project the bridge's query states.
  Tensor visual_prefix(const Tensor& image) const {
    return bridge.project(bridge.forward(image));
  }

  /// Answer-span loss for one (image, snippet) pair.
  Tensor loss_for(const Tensor& image,
                  const lm::ConversationSnippet& snippet) const {
    Tensor prefix = visual_prefix(image);
    Tensor logits = decoder.forward(prefix, snippet.token_ids);
    return lm::lm_loss(logits, snippet);
  }

  nn::NamedParams bridge_params() const { return bridge.bridge_params(); }
  nn::NamedParams projection_params() const {
    return bridge.projection_params();
  }
  nn::NamedParams llm_params() const { return decoder.params(); }

  nn::NamedParams all_params() const {
    nn::NamedParams out = bridge_params();
    for (auto& p : projection_params()) out.push_back(std::move(p));
    for (auto& p : llm_params()) out.push_back(std::move(p));
    return out;
  }

  std::size_t trainable_count() const {
    std::size_t count = 0;
    for (const auto& [name, t] : all_params())
      if (t.requires_grad()) count += t.numel();
    return count;
  }
};

}  // namespace muffin::model
