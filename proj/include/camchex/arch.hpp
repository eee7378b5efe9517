// Architecture hyperparameters and the desk/paper presets.
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "camchex/tensor.hpp"
#include "json.hpp"

namespace camchex {

struct ArchConfig {
  std::size_t image_channels = 1;
  std::size_t resolution = 64;
  // One stride-2 stage per entry; the last entry is the feature width C'.
  std::vector<std::size_t> stage_channels = {8, 16, 32};
  std::size_t mlp_ratio = 2;
  std::size_t reduction = 2;
  std::size_t text_dim = 32;
  std::size_t text_layers = 2;
  std::size_t text_heads = 4;
  std::size_t max_tokens = 64;
  std::size_t vocab_size = 512;
  std::size_t fusion_layers = 2;
  std::size_t fusion_heads = 4;
  std::size_t head_heads = 4;
  std::size_t num_classes = 26;
  std::size_t view_cap = 4;

  std::size_t feature_channels() const { return stage_channels.back(); }
  std::size_t total_stride() const { return std::size_t{1} << stage_channels.size(); }
  std::size_t feature_size() const { return resolution / total_stride(); }
  std::size_t reduced_size() const { return feature_size() / reduction; }
  std::size_t block_tokens() const { return reduced_size() * reduced_size(); }
  std::size_t spatial_volume() const { return feature_channels() * block_tokens(); }
  std::size_t max_joint_tokens() const { return (view_cap + 2) * block_tokens(); }

  void validate() const {
    auto fail = [](const std::string& m) { throw InputError("architecture: " + m); };
    if (stage_channels.empty()) fail("at least one encoder stage required");
    if (resolution == 0 || resolution % total_stride() != 0)
      fail("resolution " + std::to_string(resolution) + " is not a multiple of the encoder stride " +
           std::to_string(total_stride()));
    if (reduction == 0 || feature_size() % reduction != 0)
      fail("feature size " + std::to_string(feature_size()) + " not divisible by reduction " +
           std::to_string(reduction));
    if (text_heads == 0 || text_dim % text_heads) fail("text_dim must be divisible by text_heads");
    if (fusion_heads == 0 || feature_channels() % fusion_heads) fail("C' must be divisible by fusion_heads");
    if (head_heads == 0 || feature_channels() % head_heads) fail("C' must be divisible by head_heads");
    if (num_classes == 0) fail("num_classes must be positive");
    if (vocab_size < 2) fail("vocab_size must cover CLS and UNK");
    if (max_tokens == 0 || view_cap == 0) fail("max_tokens and view_cap must be positive");
  }

  /// Miniature used for every acceptance run: 64 px, stride 8, C' = 32.
  static ArchConfig desk() { return ArchConfig{}; }

  /// Full-scale dimensions, recorded for interface parity only.
  static ArchConfig paper() {
    ArchConfig a;
    a.resolution = 1024;
    a.stage_channels = {96, 192, 384, 768, 1024};
    a.mlp_ratio = 4;
    a.reduction = 4;
    a.text_dim = 768;
    a.text_layers = 12;
    a.text_heads = 12;
    a.max_tokens = 128;
    a.vocab_size = 28996;
    a.fusion_layers = 4;
    a.fusion_heads = 8;
    a.head_heads = 8;
    return a;
  }

  nlohmann::json to_json() const {
    return {{"image_channels", image_channels}, {"resolution", resolution},   {"stage_channels", stage_channels},
            {"mlp_ratio", mlp_ratio},           {"reduction", reduction},     {"text_dim", text_dim},
            {"text_layers", text_layers},       {"text_heads", text_heads},   {"max_tokens", max_tokens},
            {"vocab_size", vocab_size},         {"fusion_layers", fusion_layers}, {"fusion_heads", fusion_heads},
            {"head_heads", head_heads},         {"num_classes", num_classes}, {"view_cap", view_cap}};
  }

  /// Overlays keys present in `j` onto `base`.
  static ArchConfig from_json(const nlohmann::json& j, ArchConfig base = desk()) {
    try {
      auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) field = it->get<std::decay_t<decltype(field)>>();
      };
      get("image_channels", base.image_channels);
      get("resolution", base.resolution);
      get("stage_channels", base.stage_channels);
      get("mlp_ratio", base.mlp_ratio);
      get("reduction", base.reduction);
      get("text_dim", base.text_dim);
      get("text_layers", base.text_layers);
      get("text_heads", base.text_heads);
      get("max_tokens", base.max_tokens);
      get("vocab_size", base.vocab_size);
      get("fusion_layers", base.fusion_layers);
      get("fusion_heads", base.fusion_heads);
      get("head_heads", base.head_heads);
      get("num_classes", base.num_classes);
      get("view_cap", base.view_cap);
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("architecture: ") + e.what());
    }
    return base;
  }

  bool operator==(const ArchConfig&) const = default;
};

}  // namespace camchex
