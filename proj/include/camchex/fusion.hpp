// Spatial reduction, joint-sequence assembly and the fusion transformer.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "camchex/arch.hpp"
#include "camchex/nn.hpp"
#include "camchex/ops.hpp"

namespace camchex {

enum class Segment : std::size_t { image = 0, indication = 1, vitals = 2 };

inline constexpr std::size_t kSegmentCount = 3;

template <class T>
struct FusionParams {
  Tensor<T> reduce_weight;  // [C', C', r, r], shared by every image block
  Tensor<T> reduce_bias;
  Tensor<T> position;  // [H''*W'', C'], shared by all blocks
  Tensor<T> segment;   // [3, C']
  std::vector<TransformerLayer<T>> layers;
  std::size_t reduction = 2;
  std::size_t max_images = 4;

  static FusionParams init(const ArchConfig& arch, Rng& rng) {
    const std::size_t c = arch.feature_channels(), r = arch.reduction;
    FusionParams p;
    p.reduce_weight = normal_parameter<T>({c, c, r, r}, 1.0 / std::sqrt(double(c * r * r)), rng);
    p.reduce_bias = constant_parameter<T>({c}, T(0));
    p.position = normal_parameter<T>({arch.block_tokens(), c}, 0.3, rng);
    p.segment = normal_parameter<T>({kSegmentCount, c}, 0.3, rng);
    for (std::size_t i = 0; i < arch.fusion_layers; ++i)
      p.layers.push_back(TransformerLayer<T>::init(c, arch.fusion_heads, 2 * c, rng));
    p.reduction = r;
    p.max_images = arch.view_cap;
    return p;
  }

  std::size_t channels() const { return segment.dim(1); }
  std::size_t block_tokens() const { return position.dim(0); }
  std::size_t max_tokens() const { return (max_images + 2) * block_tokens(); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(join_name(prefix, "reduce.weight"), reduce_weight);
    f(join_name(prefix, "reduce.bias"), reduce_bias);
    f(join_name(prefix, "position"), position);
    f(join_name(prefix, "segment"), segment);
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i].visit(f, join_name(prefix, "layer" + std::to_string(i)));
  }
};

/// z[N,C',H',W'] -> [N,C',H'/r,W'/r] with the shared reduction conv.
template <class T>
Tensor<T> reduce_spatial(const FusionParams<T>& p, const Tensor<T>& z) {
  if (z.rank() != 4 || z.dim(1) != p.channels())
    throw InputError("reduce_spatial: expected [N," + std::to_string(p.channels()) + ",H',W'], got " +
                     shape_string(z.shape()));
  if (z.dim(2) % p.reduction != 0 || z.dim(3) % p.reduction != 0)
    throw InputError("reduce_spatial: spatial size " + std::to_string(z.dim(2)) + " not divisible by r=" +
                     std::to_string(p.reduction));
  const std::size_t r = p.reduction;
  if (z.dim(0) == 0) return Tensor<T>({0, z.dim(1), z.dim(2) / r, z.dim(3) / r});
  return ops::conv2d(z, p.reduce_weight, p.reduce_bias, r, 0);
}

struct TokenIndex {
  std::size_t slot;  // block number within the sequence
  std::size_t y;
  std::size_t x;
  Segment segment;
};

template <class T>
struct JointSequence {
  Tensor<T> tokens;  // [T, C']
  std::vector<TokenIndex> index;
  std::size_t block_tokens = 0;

  std::size_t length() const { return tokens.dim(0); }
};

/// Image blocks, then the indication block, then the vitals block; each block
/// flattened row-major over (H'', W''). Every token receives the positional
/// vector of its cell and its segment vector; there is no per-slot embedding,
/// so image blocks are interchangeable. Absent text blocks (std::nullopt)
/// are left out of the sequence entirely.
template <class T>
JointSequence<T> assemble_sequence(const FusionParams<T>& p, const Tensor<T>& z_images,
                                   const std::optional<Tensor<T>>& z_indication,
                                   const std::optional<Tensor<T>>& z_vitals) {
  const std::size_t c = p.channels();
  const std::size_t side = static_cast<std::size_t>(std::lround(std::sqrt(double(p.block_tokens()))));
  auto check = [&](const Tensor<T>& z, const char* what) {
    if (z.rank() != 4 || z.dim(1) != c || z.dim(2) != side || z.dim(3) != side)
      throw InputError(std::string("assemble_sequence: ") + what + " block " + shape_string(z.shape()) +
                       " does not match [*," + std::to_string(c) + "," + std::to_string(side) + "," +
                       std::to_string(side) + "]");
  };
  check(z_images, "image");
  if (z_indication) check(*z_indication, "indication");
  if (z_vitals) check(*z_vitals, "vitals");
  if (z_images.dim(0) == 0 && !z_indication && !z_vitals) throw InputError("assemble_sequence: empty sequence");

  JointSequence<T> seq;
  seq.block_tokens = p.block_tokens();
  std::vector<Tensor<T>> blocks;
  std::vector<std::size_t> pos_ids, seg_ids;
  std::size_t slot = 0;
  auto add_block = [&](const Tensor<T>& block, Segment segment) {
    const std::size_t count = block.dim(0);
    if (count == 0) return;
    blocks.push_back(ops::nchw_to_tokens(block));
    for (std::size_t b = 0; b < count; ++b, ++slot)
      for (std::size_t k = 0; k < seq.block_tokens; ++k) {
        pos_ids.push_back(k);
        seg_ids.push_back(static_cast<std::size_t>(segment));
        seq.index.push_back({slot, k / side, k % side, segment});
      }
  };
  add_block(z_images, Segment::image);
  if (z_indication) add_block(*z_indication, Segment::indication);
  if (z_vitals) add_block(*z_vitals, Segment::vitals);
  const auto features = blocks.size() == 1 ? blocks.front() : ops::concat_rows(blocks);
  const auto embed = ops::add(ops::gather_rows(p.position, pos_ids), ops::gather_rows(p.segment, seg_ids));
  seq.tokens = ops::add(features, embed);
  return seq;
}

/// Pre-norm transformer stack over the joint sequence -> O_j[T, C'].
template <class T>
Tensor<T> fuse(const FusionParams<T>& p, const JointSequence<T>& seq) {
  if (seq.length() > p.max_tokens())
    throw InputError("fuse: sequence of " + std::to_string(seq.length()) + " tokens exceeds the limit of " +
                     std::to_string(p.max_tokens()));
  Tensor<T> x = seq.tokens;
  for (const auto& layer : p.layers) x = layer(x);
  return x;
}

}  // namespace camchex
