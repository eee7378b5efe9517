// Parameterised layers shared by the encoders, fusion module and head.
//
// Every layer exposes visit(f, prefix), calling f(name, Tensor&) for each of
// its parameters in a fixed order. Optimizers, EMA, checkpoints and the
// gradient checker are all written against that single enumeration.
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "camchex/ops.hpp"
#include "camchex/tensor.hpp"

namespace camchex {

using Rng = std::mt19937_64;

/// Independent generator for (seed, stream); all 128 bits reach the seed.
inline Rng seeded_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream), std::uint32_t(stream >> 32)};
  return Rng(seq);
}

/// Joins a prefix and a child name with '.', dropping an empty prefix.
inline std::string join_name(const std::string& prefix, const std::string& child) {
  return prefix.empty() ? child : prefix + "." + child;
}

template <class T>
Tensor<T> normal_parameter(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = T(dist(rng));
  return Tensor<T>::parameter(std::move(shape), std::move(v));
}

template <class T>
Tensor<T> constant_parameter(Shape shape, T value) {
  return Tensor<T>::parameter(shape, std::vector<T>(numel(shape), value));
}

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out]

  static Linear init(std::size_t in, std::size_t out, Rng& rng) {
    return {normal_parameter<T>({in, out}, 1.0 / std::sqrt(double(in)), rng), constant_parameter<T>({out}, T(0))};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::add_bias_rows(ops::matmul(x, weight), bias); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(join_name(prefix, "weight"), weight);
    f(join_name(prefix, "bias"), bias);
  }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;

  static LayerNorm init(std::size_t dim) {
    return {constant_parameter<T>({dim}, T(1)), constant_parameter<T>({dim}, T(0))};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm_rows(x, gamma, beta); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(join_name(prefix, "gamma"), gamma);
    f(join_name(prefix, "beta"), beta);
  }
};

/// Scaled dot-product attention with `heads` heads over a shared model dim.
template <class T>
struct MultiHeadAttention {
  Linear<T> query, key, value, out;
  std::size_t heads = 1;

  static MultiHeadAttention init(std::size_t dim, std::size_t heads, Rng& rng) {
    if (heads == 0 || dim % heads != 0)
      throw InputError("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads) +
                       " heads");
    return {Linear<T>::init(dim, dim, rng), Linear<T>::init(dim, dim, rng), Linear<T>::init(dim, dim, rng),
            Linear<T>::init(dim, dim, rng), heads};
  }

  /// queries[Lq,D] attend over context[Lk,D] -> [Lq,D].
  Tensor<T> operator()(const Tensor<T>& queries, const Tensor<T>& context) const {
    const std::size_t dim = query.out_features(), dh = dim / heads;
    const Tensor<T> q = query(queries), k = key(context), v = value(context);
    const T scale = T(1.0 / std::sqrt(double(dh)));
    std::vector<Tensor<T>> parts;
    parts.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto qh = ops::slice_cols(q, h * dh, dh);
      const auto kh = ops::slice_cols(k, h * dh, dh);
      const auto vh = ops::slice_cols(v, h * dh, dh);
      const auto attn = ops::softmax_rows(ops::scale(ops::matmul_nt(qh, kh), scale));
      parts.push_back(ops::matmul(attn, vh));
    }
    return out(heads == 1 ? parts.front() : ops::concat_cols(parts));
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    query.visit(f, join_name(prefix, "query"));
    key.visit(f, join_name(prefix, "key"));
    value.visit(f, join_name(prefix, "value"));
    out.visit(f, join_name(prefix, "out"));
  }
};

/// Two-layer GELU MLP.
template <class T>
struct FeedForward {
  Linear<T> fc1, fc2;

  static FeedForward init(std::size_t dim, std::size_t hidden, Rng& rng) {
    return {Linear<T>::init(dim, hidden, rng), Linear<T>::init(hidden, dim, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(ops::gelu(fc1(x))); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    fc1.visit(f, join_name(prefix, "fc1"));
    fc2.visit(f, join_name(prefix, "fc2"));
  }
};

/// Pre-norm encoder layer: x + MHA(LN x), then x + FFN(LN x).
template <class T>
struct TransformerLayer {
  LayerNorm<T> norm1;
  MultiHeadAttention<T> attention;
  LayerNorm<T> norm2;
  FeedForward<T> ffn;

  static TransformerLayer init(std::size_t dim, std::size_t heads, std::size_t hidden, Rng& rng) {
    return {LayerNorm<T>::init(dim), MultiHeadAttention<T>::init(dim, heads, rng), LayerNorm<T>::init(dim),
            FeedForward<T>::init(dim, hidden, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const auto h = norm1(x);
    const auto y = ops::add(x, attention(h, h));
    return ops::add(y, ffn(norm2(y)));
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    norm1.visit(f, join_name(prefix, "norm1"));
    attention.visit(f, join_name(prefix, "attention"));
    norm2.visit(f, join_name(prefix, "norm2"));
    ffn.visit(f, join_name(prefix, "ffn"));
  }
};

/// (name, handle) pairs in visit order. Handles share storage with the module.
template <class T, class Module>
std::vector<std::pair<std::string, Tensor<T>>> named_parameters(Module& module) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  module.visit([&](const std::string& name, Tensor<T>& t) { out.emplace_back(name, t); }, "");
  return out;
}

/// Copy of a module whose parameters own fresh storage.
template <class Module>
Module deep_copy(const Module& module) {
  Module copy = module;
  copy.visit([](const std::string&, auto& t) { t = t.clone_parameter(); }, "");
  return copy;
}

template <class Module>
std::size_t parameter_count(Module& module) {
  std::size_t n = 0;
  module.visit([&](const std::string&, auto& t) { n += t.size(); }, "");
  return n;
}

template <class Module>
void zero_grad(Module& module) {
  module.visit([](const std::string&, auto& t) { t.zero_grad(); }, "");
}

/// Sets requires_grad on every parameter of the module.
template <class Module>
void set_trainable(Module& module, bool trainable) {
  module.visit([trainable](const std::string&, auto& t) { t.node()->requires_grad = trainable; }, "");
}

}  // namespace camchex
