#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "audiotf/tensor.hpp"

namespace audiotf {

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

// Glorot-uniform weight init; biases and shifts start at zero, scales at one.
template <typename T>
Tensor<T> glorot_uniform(int fan_in, int fan_out, Shape shape, Rng& rng) {
  const double limit = std::sqrt(6.0 / double(fan_in + fan_out));
  std::vector<T> vals(size_t(numel(shape)));
  for (auto& v : vals) v = T(rng.uniform(-limit, limit));
  return Tensor<T>::from(std::move(shape), std::move(vals), true);
}

// ---------------------------------------------------------------------------
// Affine layer applied identically at every leading position.
template <typename T>
struct DenseLayer {
  Tensor<T> W;  // [in, out]
  Tensor<T> b;  // [out]

  DenseLayer() = default;
  DenseLayer(int in, int out, Rng& rng)
      : W(glorot_uniform<T>(in, out, {in, out}, rng)), b(Tensor<T>::zeros({out}, true)) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.rank() < 1 || x.shape().back() != W.shape()[0])
      throw DimensionError("dense input " + shape_str(x.shape()) + " does not end in " +
                           std::to_string(W.shape()[0]));
    Tensor<T> in = x;
    bool flat = false;
    if (x.rank() == 1) {
      in = reshape(x, {1, x.shape()[0]});
      flat = true;
    }
    Tensor<T> y = add(matmul(in, W), b);
    if (flat) y = reshape(y, {W.shape()[1]});
    return y;
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".W", W);
    out.emplace_back(prefix + ".b", b);
  }
};

// ---------------------------------------------------------------------------
// Layer normalization over the feature (last) axis, fused forward/backward.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const int E = x.shape().back();
  if (gamma.size() != E || beta.size() != E)
    throw DimensionError("layer_norm parameter length does not match feature dim " +
                         std::to_string(E));
  const std::int64_t rows = x.size() / E;
  auto xhat = std::make_shared<std::vector<T>>(x.values().size());
  auto inv_std = std::make_shared<std::vector<T>>(size_t(rows));
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = &xv[r * E];
    T mean = T(0);
    for (int i = 0; i < E; ++i) mean += row[i];
    mean /= T(E);
    T var = T(0);
    for (int i = 0; i < E; ++i) {
      const T d = row[i] - mean;
      var += d * d;
    }
    var /= T(E);
    const T is = T(1) / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int i = 0; i < E; ++i) {
      const T h = (row[i] - mean) * is;
      (*xhat)[r * E + i] = h;
      out[r * E + i] = h * gamma.values()[i] + beta.values()[i];
    }
  }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, rows, E](TensorNode<T>& y) {
        auto xn = x.node();
        auto gn = gamma.node();
        auto bn = beta.node();
        if (gn->requires_grad) gn->ensure_grad();
        if (bn->requires_grad) bn->ensure_grad();
        if (xn->requires_grad) xn->ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* dy = &y.grad[r * E];
          const T* h = &(*xhat)[r * E];
          if (gn->requires_grad || bn->requires_grad) {
            for (int i = 0; i < E; ++i) {
              if (gn->requires_grad) gn->grad[i] += dy[i] * h[i];
              if (bn->requires_grad) bn->grad[i] += dy[i];
            }
          }
          if (xn->requires_grad) {
            T mean_dxh = T(0), mean_dxh_h = T(0);
            for (int i = 0; i < E; ++i) {
              const T dxh = dy[i] * gn->values[i];
              mean_dxh += dxh;
              mean_dxh_h += dxh * h[i];
            }
            mean_dxh /= T(E);
            mean_dxh_h /= T(E);
            const T is = (*inv_std)[r];
            for (int i = 0; i < E; ++i) {
              const T dxh = dy[i] * gn->values[i];
              xn->grad[r * E + i] += is * (dxh - mean_dxh - h[i] * mean_dxh_h);
            }
          }
        }
      });
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma;
  Tensor<T> beta;

  LayerNormParams() = default;
  explicit LayerNormParams(int dim)
      : gamma(Tensor<T>::from({dim}, std::vector<T>(size_t(dim), T(1)), true)),
        beta(Tensor<T>::zeros({dim}, true)) {}

  Tensor<T> forward(const Tensor<T>& x) const { return layer_norm(x, gamma, beta); }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

// ---------------------------------------------------------------------------
// Sinusoidal positional encoding, added to the front-end output.
template <typename T>
Tensor<T> positional_encoding(int time_len, int embed_dim) {
  if (embed_dim % 2 != 0)
    throw ContractError("positional encoding needs an even embedding dim, got " +
                        std::to_string(embed_dim));
  std::vector<T> vals(size_t(time_len) * embed_dim);
  for (int pos = 0; pos < time_len; ++pos)
    for (int i = 0; i < embed_dim / 2; ++i) {
      const double angle = double(pos) / std::pow(10000.0, (2.0 * i) / embed_dim);
      vals[size_t(pos) * embed_dim + 2 * i] = T(std::sin(angle));
      vals[size_t(pos) * embed_dim + 2 * i + 1] = T(std::cos(angle));
    }
  return Tensor<T>::from({time_len, embed_dim}, std::move(vals));
}

// Additive causal mask: 0 at j <= i, large negative above the diagonal.
template <typename T>
Tensor<T> causal_mask(int time_len) {
  std::vector<T> vals(size_t(time_len) * time_len, T(0));
  for (int i = 0; i < time_len; ++i)
    for (int j = i + 1; j < time_len; ++j) vals[size_t(i) * time_len + j] = T(-1e9);
  return Tensor<T>::from({time_len, time_len}, std::move(vals));
}

// ---------------------------------------------------------------------------
// Scaled dot-product attention with a causal mask, h heads, no projection
// biases.
template <typename T>
struct AttentionHead {
  Tensor<T> Wq, Wk, Wv;  // [E, d_k]

  AttentionHead() = default;
  AttentionHead(int embed_dim, int head_dim, Rng& rng)
      : Wq(glorot_uniform<T>(embed_dim, head_dim, {embed_dim, head_dim}, rng)),
        Wk(glorot_uniform<T>(embed_dim, head_dim, {embed_dim, head_dim}, rng)),
        Wv(glorot_uniform<T>(embed_dim, head_dim, {embed_dim, head_dim}, rng)) {}
};

template <typename T>
struct MultiHeadAttention {
  std::vector<AttentionHead<T>> heads;
  Tensor<T> Wo;  // [E, E]
  int embed_dim = 0;
  int head_dim = 0;

  MultiHeadAttention() = default;
  // head_width defaults to the embedding size, matching the reference
  // parameter budget; pass embed / num_heads for the narrow split.
  MultiHeadAttention(int embed, int num_heads, Rng& rng, int head_width = 0) : embed_dim(embed) {
    if (num_heads <= 0) throw ConfigError("attention needs at least one head");
    head_dim = head_width > 0 ? head_width : embed;
    for (int h = 0; h < num_heads; ++h) heads.emplace_back(embed, head_dim, rng);
    const int concat_dim = num_heads * head_dim;
    Wo = glorot_uniform<T>(concat_dim, embed, {concat_dim, embed}, rng);
  }

  // x: [B, T, E] or [T, E]
  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> in = x;
    bool squeeze = false;
    if (x.rank() == 2) {
      in = reshape(x, {1, x.shape()[0], x.shape()[1]});
      squeeze = true;
    }
    if (in.rank() != 3 || in.shape()[2] != embed_dim)
      throw DimensionError("attention input " + shape_str(x.shape()) + " does not match embed dim " +
                           std::to_string(embed_dim));
    const int time_len = in.shape()[1];
    const Tensor<T> mask = causal_mask<T>(time_len);
    const T inv_sqrt_dk = T(1) / std::sqrt(T(head_dim));
    std::vector<Tensor<T>> outs;
    outs.reserve(heads.size());
    for (const auto& h : heads) {
      Tensor<T> q = matmul(in, h.Wq);
      Tensor<T> k = matmul(in, h.Wk);
      Tensor<T> v = matmul(in, h.Wv);
      Tensor<T> scores = add(scale(matmul(q, k, /*transpose_b=*/true), inv_sqrt_dk), mask);
      Tensor<T> weights = softmax(scores, 2);
      outs.push_back(matmul(weights, v));
    }
    Tensor<T> y = matmul(concat(outs, 2), Wo);
    if (squeeze) y = reshape(y, {time_len, embed_dim});
    return y;
  }

  // Post-softmax attention weights of one head, for inspection/tests.
  Tensor<T> attention_weights(const Tensor<T>& x, int head) const {
    Tensor<T> in = x.rank() == 2 ? reshape(x, {1, x.shape()[0], x.shape()[1]}) : x;
    const int time_len = in.shape()[1];
    const auto& h = heads.at(size_t(head));
    Tensor<T> q = matmul(in, h.Wq);
    Tensor<T> k = matmul(in, h.Wk);
    Tensor<T> scores =
        add(scale(matmul(q, k, true), T(1) / std::sqrt(T(head_dim))), causal_mask<T>(time_len));
    return softmax(scores, 2);
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    for (size_t h = 0; h < heads.size(); ++h) {
      const std::string p = prefix + ".head" + std::to_string(h);
      out.emplace_back(p + ".Wq", heads[h].Wq);
      out.emplace_back(p + ".Wk", heads[h].Wk);
      out.emplace_back(p + ".Wv", heads[h].Wv);
    }
    out.emplace_back(prefix + ".Wo", Wo);
  }
};

// ---------------------------------------------------------------------------
// x -> LayerNorm(x + Attn(x)) -> LayerNorm(y + FF(y)), with a 3-layer
// position-wise feed forward (E -> d_ff -> d_ff -> E).
template <typename T>
struct TransformerBlock {
  MultiHeadAttention<T> attn;
  DenseLayer<T> ff1, ff2, ff3;
  LayerNormParams<T> ln1, ln2;

  TransformerBlock() = default;
  TransformerBlock(int embed, int num_heads, int ff_dim, Rng& rng, int head_width = 0)
      : attn(embed, num_heads, rng, head_width),
        ff1(embed, ff_dim, rng),
        ff2(ff_dim, ff_dim, rng),
        ff3(ff_dim, embed, rng),
        ln1(embed),
        ln2(embed) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    Tensor<T> y = ln1.forward(add(x, attn.forward(x)));
    Tensor<T> f = ff3.forward(relu(ff2.forward(relu(ff1.forward(y)))));
    return ln2.forward(add(y, f));
  }

  void collect(const std::string& prefix, NamedParams<T>& out) const {
    attn.collect(prefix + ".attn", out);
    ff1.collect(prefix + ".ff1", out);
    ff2.collect(prefix + ".ff2", out);
    ff3.collect(prefix + ".ff3", out);
    ln1.collect(prefix + ".ln1", out);
    ln2.collect(prefix + ".ln2", out);
  }
};

// ---------------------------------------------------------------------------
// Non-overlapping averaging along the time axis; halves (or more generally
// divides) the sequence length.
template <typename T>
Tensor<T> time_average_pool(const Tensor<T>& x, int factor, int time_axis) {
  std::int64_t outer, len, inner;
  detail::axis_strides(x.shape(), time_axis, outer, len, inner);
  if (factor <= 0 || len % factor != 0)
    throw ContractError("pool factor " + std::to_string(factor) + " does not divide time length " +
                        std::to_string(len));
  const std::int64_t olen = len / factor;
  Shape out_shape = x.shape();
  out_shape[time_axis] = int(olen);
  std::vector<T> out(size_t(outer * olen * inner), T(0));
  const auto& xv = x.values();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t l = 0; l < olen; ++l)
      for (int f = 0; f < factor; ++f) {
        const T* src = &xv[(o * len + l * factor + f) * inner];
        T* dst = &out[(o * olen + l) * inner];
        for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i] / T(factor);
      }
  return Tensor<T>::make_op(
      std::move(out_shape), std::move(out), {x},
      [x, outer, len, inner, factor, olen](TensorNode<T>& y) {
        auto xn = x.node();
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t l = 0; l < olen; ++l)
            for (int f = 0; f < factor; ++f) {
              const T* src = &y.grad[(o * olen + l) * inner];
              T* dst = &xn->grad[(o * len + l * factor + f) * inner];
              for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i] / T(factor);
            }
      });
}

// ---------------------------------------------------------------------------
// Wavelet-style multi-scale smoothing: per embedding dimension, replace each
// non-overlapping window of the chosen length with its mean, keeping the
// sequence length. Window 1 dims pass through untouched.
using MultiScaleSpec = std::vector<int>;

inline bool is_pow2(int x) { return x > 0 && (x & (x - 1)) == 0; }

// Geometric split: half of the dims keep window 1, a quarter get 2, an
// eighth get 4, and so on; the final dim takes the largest admissible
// window. Every window is clamped to the largest power of two dividing T.
inline MultiScaleSpec make_multiscale_spec(int time_len, int embed_dim) {
  auto clamp_to_divisor = [time_len](int w) {
    while (w > 1 && time_len % w != 0) w /= 2;
    return w;
  };
  MultiScaleSpec spec;
  spec.reserve(size_t(embed_dim));
  int level_count = (embed_dim + 1) / 2;
  int window = 1;
  while (int(spec.size()) < embed_dim - 1) {
    const int take = std::min(level_count, embed_dim - 1 - int(spec.size()));
    for (int i = 0; i < take; ++i) spec.push_back(clamp_to_divisor(window));
    window *= 2;
    level_count = std::max(1, level_count / 2);
  }
  int largest = 1;
  while (largest * 2 <= time_len) largest *= 2;
  spec.push_back(clamp_to_divisor(largest));
  return spec;
}

template <typename T>
Tensor<T> multi_scale_layer(const Tensor<T>& x, const MultiScaleSpec& spec) {
  if (x.rank() < 2) throw DimensionError("multi_scale_layer needs at least [T, E]");
  const int embed = x.shape().back();
  const int time_len = x.shape()[x.rank() - 2];
  if (int(spec.size()) != embed)
    throw ContractError("multi-scale spec length " + std::to_string(spec.size()) +
                        " != embed dim " + std::to_string(embed));
  for (int w : spec)
    if (!is_pow2(w) || time_len % w != 0)
      throw ContractError("multi-scale window " + std::to_string(w) +
                          " must be a power of two dividing T=" + std::to_string(time_len));
  const std::int64_t outer = x.size() / (std::int64_t(time_len) * embed);
  std::vector<T> out(x.values().begin(), x.values().end());
  // Pairwise summation over the power-of-two window keeps the layer exactly
  // idempotent: averaging an already-constant window reproduces it bit for bit.
  std::vector<T> scratch;
  for (std::int64_t o = 0; o < outer; ++o)
    for (int e = 0; e < embed; ++e) {
      const int w = spec[size_t(e)];
      if (w == 1) continue;
      for (int t0 = 0; t0 < time_len; t0 += w) {
        scratch.resize(size_t(w));
        for (int t = 0; t < w; ++t)
          scratch[size_t(t)] = x.values()[(o * time_len + t0 + t) * embed + e];
        for (int half = w / 2; half >= 1; half /= 2)
          for (int t = 0; t < half; ++t)
            scratch[size_t(t)] = scratch[size_t(2 * t)] + scratch[size_t(2 * t + 1)];
        const T mean = scratch[0] / T(w);
        for (int t = t0; t < t0 + w; ++t) out[(o * time_len + t) * embed + e] = mean;
      }
    }
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x}, [x, spec, outer, time_len, embed](TensorNode<T>& y) {
        auto xn = x.node();
        xn->ensure_grad();
        for (std::int64_t o = 0; o < outer; ++o)
          for (int e = 0; e < embed; ++e) {
            const int w = spec[size_t(e)];
            if (w == 1) {
              for (int t = 0; t < time_len; ++t)
                xn->grad[(o * time_len + t) * embed + e] += y.grad[(o * time_len + t) * embed + e];
              continue;
            }
            for (int t0 = 0; t0 < time_len; t0 += w) {
              T acc = T(0);
              for (int t = t0; t < t0 + w; ++t) acc += y.grad[(o * time_len + t) * embed + e];
              acc /= T(w);
              for (int t = t0; t < t0 + w; ++t) xn->grad[(o * time_len + t) * embed + e] += acc;
            }
          }
      });
}

}  // namespace audiotf
