#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "muffin/tensor.hpp"

// Shared transformer building blocks: biased linear attention with head
// splitting, pre-norm layer norms, and a GELU feed-forward. Both the fusion
// bridge and the decoder are assembled from these.

namespace muffin::nn {

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

inline constexpr double kLayerNormEps = 1e-5;
// Embedding-like tables use a small fixed std; weight matrices scale with
// fan-in so activations and gradients keep comparable magnitudes at the
// narrow desk-scale widths (vanishing upstream gradients would drown the
// finite-difference oracle in rounding noise).
inline constexpr double kInitStd = 0.02;
inline double fan_in_std(std::size_t fan_in) {
  return 1.0 / std::sqrt(static_cast<double>(fan_in));
}
// Large negative (but finite) additive score; exp underflows to exactly 0
// after max subtraction, so masked attention weights are exact zeros.
inline constexpr double kAttnMask = -1e30;

inline void collect(NamedParams& out, std::string name, const Tensor& t) {
  out.emplace_back(std::move(name), t);
}

struct LayerNorm {
  Tensor gamma, beta;

  static LayerNorm init(std::size_t d) {
    return {Tensor::full({d}, 1.0, true), Tensor::zeros({d}, true)};
  }
  Tensor forward(const Tensor& x) const {
    return layer_norm(x, gamma, beta, kLayerNormEps);
  }
  void params(NamedParams& out, const std::string& prefix) const {
    collect(out, prefix + ".gamma", gamma);
    collect(out, prefix + ".beta", beta);
  }
};

/// Multi-head attention over pre-projected inputs. Queries come from q_in,
/// keys/values from kv_in; an optional additive score bias implements
/// causal masking. The key projection carries no bias: a shared key offset
/// shifts every score in a row equally, which softmax cancels exactly.
struct Attention {
  Tensor wq, bq, wk, wv, bv, wo, bo;

  static Attention init(std::size_t d, std::mt19937_64& rng) {
    const double std = fan_in_std(d);
    Attention a;
    a.wq = Tensor::randn({d, d}, rng, std, true);
    a.bq = Tensor::zeros({d}, true);
    a.wk = Tensor::randn({d, d}, rng, std, true);
    a.wv = Tensor::randn({d, d}, rng, std, true);
    a.bv = Tensor::zeros({d}, true);
    a.wo = Tensor::randn({d, d}, rng, std, true);
    a.bo = Tensor::zeros({d}, true);
    return a;
  }

  Tensor forward(const Tensor& q_in, const Tensor& kv_in, std::size_t heads,
                 const Tensor* score_bias = nullptr) const {
    const std::size_t d = wq.rows();
    const std::size_t dh = d / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor q = add_row_vector(matmul(q_in, wq), bq);
    Tensor k = matmul(kv_in, wk);
    Tensor v = add_row_vector(matmul(kv_in, wv), bv);
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      Tensor qh = slice_cols(q, h * dh, dh);
      Tensor kh = slice_cols(k, h * dh, dh);
      Tensor vh = slice_cols(v, h * dh, dh);
      Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt_dh);
      if (score_bias) scores = add(scores, *score_bias);
      Tensor weights = softmax_rows(scores);
      head_outs.push_back(matmul(weights, vh));
    }
    return add_row_vector(matmul(concat_cols(head_outs), wo), bo);
  }

  void params(NamedParams& out, const std::string& prefix) const {
    collect(out, prefix + ".wq", wq);
    collect(out, prefix + ".bq", bq);
    collect(out, prefix + ".wk", wk);
    collect(out, prefix + ".wv", wv);
    collect(out, prefix + ".bv", bv);
    collect(out, prefix + ".wo", wo);
    collect(out, prefix + ".bo", bo);
  }
};

struct FeedForward {
  Tensor w1, b1, w2, b2;

  static FeedForward init(std::size_t d, std::size_t hidden,
                          std::mt19937_64& rng) {
    FeedForward f;
    f.w1 = Tensor::randn({d, hidden}, rng, fan_in_std(d), true);
    f.b1 = Tensor::zeros({hidden}, true);
    f.w2 = Tensor::randn({hidden, d}, rng, fan_in_std(hidden), true);
    f.b2 = Tensor::zeros({d}, true);
    return f;
  }

  Tensor forward(const Tensor& x) const {
    return add_row_vector(
        matmul(gelu(add_row_vector(matmul(x, w1), b1)), w2), b2);
  }

  void params(NamedParams& out, const std::string& prefix) const {
    collect(out, prefix + ".w1", w1);
    collect(out, prefix + ".b1", b1);
    collect(out, prefix + ".w2", w2);
    collect(out, prefix + ".b2", b2);
  }
};

/// Additive causal score bias for a sequence of the given length: position i
/// may attend to positions <= i.
inline Tensor causal_score_bias(std::size_t len) {
  std::vector<double> bias(len * len, 0.0);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j) bias[i * len + j] = kAttnMask;
  return Tensor::from_data({len, len}, std::move(bias));
}

}  // namespace muffin::nn
