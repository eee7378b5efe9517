// Image encoders, the text encoder and the CLS-to-spatial projection.
#pragma once

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "camchex/arch.hpp"
#include "camchex/data_model.hpp"
#include "camchex/nn.hpp"
#include "camchex/ops.hpp"

namespace camchex {

/// Stride-2 patch conv, then a residual block: depthwise 3x3, channel
/// LayerNorm, pointwise GELU expansion.
template <class T>
struct EncoderStage {
  Tensor<T> down_weight;  // [C_out, C_in, 2, 2]
  Tensor<T> down_bias;
  Tensor<T> depthwise_weight;  // [C_out, 1, 3, 3]
  Tensor<T> depthwise_bias;
  LayerNorm<T> norm;
  FeedForward<T> pointwise;

  static EncoderStage init(std::size_t in, std::size_t out, std::size_t ratio, Rng& rng) {
    return {normal_parameter<T>({out, in, 2, 2}, 1.0 / std::sqrt(4.0 * double(in)), rng),
            constant_parameter<T>({out}, T(0)),
            normal_parameter<T>({out, 1, 3, 3}, 1.0 / 3.0, rng),
            constant_parameter<T>({out}, T(0)),
            LayerNorm<T>::init(out),
            FeedForward<T>::init(out, ratio * out, rng)};
  }

  Tensor<T> operator()(const Tensor<T>& x) const {
    const auto down = ops::conv2d(x, down_weight, down_bias, 2, 0);
    const std::size_t b = down.dim(0), c = down.dim(1), h = down.dim(2), w = down.dim(3);
    const auto dw = ops::conv2d(down, depthwise_weight, depthwise_bias, 1, 1, c);
    const auto tokens = pointwise(norm(ops::nchw_to_tokens(dw)));
    return ops::add(down, ops::tokens_to_nchw(tokens, b, h, w));
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(join_name(prefix, "down.weight"), down_weight);
    f(join_name(prefix, "down.bias"), down_bias);
    f(join_name(prefix, "depthwise.weight"), depthwise_weight);
    f(join_name(prefix, "depthwise.bias"), depthwise_bias);
    norm.visit(f, join_name(prefix, "norm"));
    pointwise.visit(f, join_name(prefix, "pointwise"));
  }
};

/// One instance per role (joint, frontal, lateral).
template <class T>
struct ImageEncoder {
  std::vector<EncoderStage<T>> stages;
  std::size_t in_channels = 1;
  std::size_t resolution = 0;

  static ImageEncoder init(const ArchConfig& arch, Rng& rng) {
    arch.validate();
    ImageEncoder e;
    e.in_channels = arch.image_channels;
    e.resolution = arch.resolution;
    std::size_t in = arch.image_channels;
    for (std::size_t out : arch.stage_channels) {
      e.stages.push_back(EncoderStage<T>::init(in, out, arch.mlp_ratio, rng));
      in = out;
    }
    return e;
  }

  std::size_t out_channels() const { return stages.back().down_weight.dim(0); }
  std::size_t out_size() const { return resolution >> stages.size(); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    for (std::size_t i = 0; i < stages.size(); ++i) stages[i].visit(f, join_name(prefix, "stage" + std::to_string(i)));
  }
};

/// images[m,C,H,W] -> [m,C',H',W']. m = 0 yields an empty block.
template <class T>
Tensor<T> encode_view(const ImageEncoder<T>& enc, const Tensor<T>& images) {
  if (images.rank() != 4 || images.dim(1) != enc.in_channels || images.dim(2) != enc.resolution ||
      images.dim(3) != enc.resolution)
    throw InputError("encode_view: expected [m," + std::to_string(enc.in_channels) + "," +
                     std::to_string(enc.resolution) + "," + std::to_string(enc.resolution) + "], got " +
                     shape_string(images.shape()));
  if (images.dim(0) == 0) return Tensor<T>({0, enc.out_channels(), enc.out_size(), enc.out_size()});
  Tensor<T> x = images;
  for (const auto& stage : enc.stages) x = stage(x);
  return x;
}

/// Stacks images into [m,C,H,W]; all images must share dimensions.
template <class T>
Tensor<T> images_to_tensor(std::span<const ViewImage* const> images, std::size_t channels, std::size_t size) {
  std::vector<T> values;
  values.reserve(images.size() * channels * size * size);
  for (const ViewImage* im : images) {
    if (im->channels != channels || im->height != size || im->width != size)
      throw InputError("image of shape " + std::to_string(im->channels) + "x" + std::to_string(im->height) + "x" +
                       std::to_string(im->width) + " does not match configured resolution " + std::to_string(size));
    for (float p : im->pixels) values.push_back(T(p));
  }
  return Tensor<T>({images.size(), channels, size, size}, std::move(values));
}

// ---------------------------------------------------------------------------
// Text

template <class T>
struct TextEncoder {
  Tensor<T> token_embedding;  // [V, d]
  Tensor<T> position;         // [S_max, d]
  std::vector<TransformerLayer<T>> layers;
  LayerNorm<T> final_norm;

  static TextEncoder init(const ArchConfig& arch, Rng& rng) {
    TextEncoder t;
    t.token_embedding = normal_parameter<T>({arch.vocab_size, arch.text_dim}, 1.0, rng);
    t.position = normal_parameter<T>({arch.max_tokens, arch.text_dim}, 0.3, rng);
    for (std::size_t i = 0; i < arch.text_layers; ++i)
      t.layers.push_back(TransformerLayer<T>::init(arch.text_dim, arch.text_heads, 2 * arch.text_dim, rng));
    t.final_norm = LayerNorm<T>::init(arch.text_dim);
    return t;
  }

  std::size_t vocab_size() const { return token_embedding.dim(0); }
  std::size_t dim() const { return token_embedding.dim(1); }
  std::size_t max_tokens() const { return position.dim(0); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(join_name(prefix, "token_embedding"), token_embedding);
    f(join_name(prefix, "position"), position);
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(f, join_name(prefix, "layer" + std::to_string(i)));
    final_norm.visit(f, join_name(prefix, "final_norm"));
  }
};

template <class T>
struct TextEncoding {
  Tensor<T> sequence;  // [n, d]
  Tensor<T> cls;       // [d]
};

template <class T>
TextEncoding<T> encode_text(const TextEncoder<T>& enc, std::span<const std::size_t> tokens) {
  if (tokens.empty() || tokens.size() > enc.max_tokens())
    throw InputError("encode_text: sequence length " + std::to_string(tokens.size()) + " outside [1, " +
                     std::to_string(enc.max_tokens()) + "]");
  for (auto id : tokens)
    if (id >= enc.vocab_size())
      throw InputError("encode_text: token id " + std::to_string(id) + " >= vocabulary size " +
                       std::to_string(enc.vocab_size()));
  std::vector<std::size_t> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = i;
  Tensor<T> x = ops::add(ops::gather_rows(enc.token_embedding, tokens), ops::gather_rows(enc.position, positions));
  for (const auto& layer : enc.layers) x = layer(x);
  x = enc.final_norm(x);
  auto cls = ops::reshape(ops::slice_rows(x, 0, 1), {enc.dim()});
  return {x, cls};
}

// ---------------------------------------------------------------------------
// CLS -> feature-map-shaped block

enum class TextModality { indication, vitals };

template <class T>
struct SpatialProjection {
  Linear<T> projection;  // d -> C' * H'' * W''
  Tensor<T> indication_placeholder;
  Tensor<T> vitals_placeholder;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  static SpatialProjection init(const ArchConfig& arch, Rng& rng) {
    SpatialProjection p;
    p.channels = arch.feature_channels();
    p.height = p.width = arch.reduced_size();
    const std::size_t vol = arch.spatial_volume();
    p.projection = Linear<T>::init(arch.text_dim, vol, rng);
    p.indication_placeholder = normal_parameter<T>({vol}, 0.5, rng);
    p.vitals_placeholder = normal_parameter<T>({vol}, 0.5, rng);
    return p;
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    projection.visit(f, join_name(prefix, "projection"));
    f(join_name(prefix, "indication_placeholder"), indication_placeholder);
    f(join_name(prefix, "vitals_placeholder"), vitals_placeholder);
  }
};

/// cls[d] -> [1, C', H'', W''] by a learned affine map and reshape.
template <class T>
Tensor<T> cls_to_spatial(const SpatialProjection<T>& proj, const Tensor<T>& cls) {
  if (cls.size() != proj.projection.in_features())
    throw InputError("cls_to_spatial: cls dimension " + std::to_string(cls.size()) + " != " +
                     std::to_string(proj.projection.in_features()));
  if (proj.projection.out_features() != proj.channels * proj.height * proj.width)
    throw InputError("cls_to_spatial: projection width does not match the reduced feature volume");
  const auto flat = proj.projection(ops::reshape(cls, {1, cls.size()}));
  return ops::reshape(flat, {1, proj.channels, proj.height, proj.width});
}

/// The learned stand-in block used when a text modality is absent.
template <class T>
Tensor<T> placeholder_block(const SpatialProjection<T>& proj, TextModality modality) {
  const auto& p = modality == TextModality::indication ? proj.indication_placeholder : proj.vitals_placeholder;
  return ops::reshape(p, {1, proj.channels, proj.height, proj.width});
}

}  // namespace camchex
