// Stage-1 image classifier and the stage-2 study-level model.
#pragma once

#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "camchex/arch.hpp"
#include "camchex/data_model.hpp"
#include "camchex/encoders.hpp"
#include "camchex/fusion.hpp"
#include "camchex/head_loss.hpp"

namespace camchex {

// ---------------------------------------------------------------------------
// Stage 1

template <class T>
struct Stage1Model {
  ImageEncoder<T> encoder;
  DecoderHead<T> head;

  static Stage1Model init(const ArchConfig& arch, Rng& rng) {
    auto encoder = ImageEncoder<T>::init(arch, rng);
    auto head = DecoderHead<T>::init(arch, rng);
    return {std::move(encoder), std::move(head)};
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    encoder.visit(f, join_name(prefix, "encoder"));
    head.visit(f, join_name(prefix, "head"));
  }
};

/// image[1,C,H,W] (or [C,H,W]) -> logits[Q]. A positive `feature_dropout`
/// drops feature tokens' channels before the head (student noise).
template <class T>
Tensor<T> stage1_forward(const Stage1Model<T>& m, const Tensor<T>& image, double feature_dropout = 0.0,
                         Rng* rng = nullptr) {
  Tensor<T> x = image;
  if (x.rank() == 3) x = ops::reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  if (x.rank() != 4 || x.dim(0) != 1)
    throw InputError("stage1_forward: expects a single image, got " + shape_string(image.shape()));
  auto tokens = ops::nchw_to_tokens(encode_view(m.encoder, x));
  if (feature_dropout > 0.0) {
    if (!rng) throw InputError("stage1_forward: feature dropout needs a generator");
    tokens = ops::dropout(tokens, feature_dropout, *rng);
  }
  return decode(m.head, tokens);
}

template <class T>
Tensor<T> stage1_forward(const Stage1Model<T>& m, const ViewImage& image) {
  const ViewImage* p = &image;
  return stage1_forward(m, images_to_tensor<T>(std::span<const ViewImage* const>(&p, 1), m.encoder.in_channels,
                                               m.encoder.resolution));
}

// ---------------------------------------------------------------------------
// Modalities and ablations

/// Which inputs reach the fusion transformer. Disabled modalities are left
/// out of the joint sequence; enabled-but-missing text uses its placeholder.
struct Modalities {
  bool images = true;
  bool multi_view = true;  // false: one image per study
  bool indication = true;
  bool vitals = true;

  void validate() const {
    if (!images && !indication && !vitals) throw InputError("modality flags exclude every input");
  }

  bool operator==(const Modalities&) const = default;
};

inline const std::vector<std::string>& ablation_names() {
  static const std::vector<std::string> n = {"single_view", "ci_only", "vs_only", "multi_view", "mv_ci", "full"};
  return n;
}

inline Modalities ablation(std::string_view name) {
  if (name == "single_view") return {true, false, false, false};
  if (name == "ci_only") return {false, false, true, false};
  if (name == "vs_only") return {false, false, false, true};
  if (name == "multi_view") return {true, true, false, false};
  if (name == "mv_ci") return {true, true, true, false};
  if (name == "full") return {true, true, true, true};
  throw InputError("unknown ablation '" + std::string(name) + "'");
}

/// Flag form used by config files: single_view, multi_view, use_ci, use_vs.
inline nlohmann::json modalities_to_json(const Modalities& m) {
  return {{"single_view", m.images && !m.multi_view},
          {"multi_view", m.images && m.multi_view},
          {"use_ci", m.indication},
          {"use_vs", m.vitals}};
}

inline Modalities modalities_from_json(const nlohmann::json& j, Modalities base = {}) {
  const bool sv = j.value("single_view", base.images && !base.multi_view);
  const bool mv = j.value("multi_view", base.images && base.multi_view);
  if (sv && mv) throw InputError("single_view and multi_view are mutually exclusive");
  Modalities m;
  m.images = sv || mv;
  m.multi_view = mv;
  m.indication = j.value("use_ci", base.indication);
  m.vitals = j.value("use_vs", base.vitals);
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Stage 2

/// One study after view capping and tokenization.
struct StudyInput {
  std::vector<const ViewImage*> images;  // acquisition order
  std::optional<std::vector<std::size_t>> indication;
  std::optional<std::vector<std::size_t>> vitals;
};

/// Applies the view cap and the modality flags. Single-view mode keeps the
/// first frontal image (first image if the study has no frontal).
template <class R>
StudyInput prepare_study(const Study& s, const Vocabulary& vocab, const Modalities& mods, std::size_t view_cap,
                         std::size_t max_tokens, R& rng) {
  StudyInput in;
  if (mods.images) {
    if (s.images.empty()) throw InputError("study " + s.study_id + " has no images");
    if (mods.multi_view) {
      for (std::size_t i : subsample_view_indices(s, view_cap, rng)) in.images.push_back(&s.images[i]);
    } else {
      const ViewImage* pick = &s.images.front();
      for (const auto& im : s.images)
        if (im.view == View::frontal) {
          pick = &im;
          break;
        }
      in.images.push_back(pick);
    }
  }
  if (mods.indication && s.indication) in.indication = tokenize(vocab, *s.indication, max_tokens);
  if (mods.vitals && s.vitals) in.vitals = tokenize(vocab, render_vitals_text(*s.vitals), max_tokens);
  return in;
}

template <class T>
struct CamchexModel {
  ImageEncoder<T> frontal;
  ImageEncoder<T> lateral;
  TextEncoder<T> text;
  SpatialProjection<T> projection;
  FusionParams<T> fusion;
  DecoderHead<T> head;
  Modalities modalities;

  static CamchexModel init(const ArchConfig& arch, Rng& rng, Modalities mods = {}) {
    CamchexModel m;
    m.frontal = ImageEncoder<T>::init(arch, rng);
    m.lateral = ImageEncoder<T>::init(arch, rng);
    m.text = TextEncoder<T>::init(arch, rng);
    m.projection = SpatialProjection<T>::init(arch, rng);
    m.fusion = FusionParams<T>::init(arch, rng);
    m.head = DecoderHead<T>::init(arch, rng);
    m.modalities = mods;
    return m;
  }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    frontal.visit(f, join_name(prefix, "frontal"));
    lateral.visit(f, join_name(prefix, "lateral"));
    text.visit(f, join_name(prefix, "text"));
    projection.visit(f, join_name(prefix, "projection"));
    fusion.visit(f, join_name(prefix, "fusion"));
    head.visit(f, join_name(prefix, "head"));
  }
};

template <class T>
struct StudyForward {
  JointSequence<T> sequence;
  Tensor<T> output;  // O_j
  Tensor<T> logits;
};

/// z_i[N,C',H'',W''] for the given images: each view goes through its own
/// encoder, the reduced blocks are returned in the input order.
template <class T>
Tensor<T> encode_images(const CamchexModel<T>& m, std::span<const ViewImage* const> images) {
  const std::size_t c = m.fusion.channels(), side = m.projection.height;
  if (images.empty()) return Tensor<T>({0, c, side, side});
  std::vector<const ViewImage*> group[2];
  std::vector<std::pair<int, std::size_t>> where;  // (view, row within its group)
  for (const ViewImage* im : images) {
    const int g = im->view == View::frontal ? 0 : 1;
    where.emplace_back(g, group[g].size());
    group[g].push_back(im);
  }
  Tensor<T> reduced[2];
  for (int g = 0; g < 2; ++g) {
    if (group[g].empty()) continue;
    const auto& enc = g == 0 ? m.frontal : m.lateral;
    const auto x = images_to_tensor<T>(group[g], enc.in_channels, enc.resolution);
    reduced[g] = reduce_spatial(m.fusion, encode_view(enc, x));
  }
  if (group[1].empty()) return reduced[0];
  if (group[0].empty()) return reduced[1];
  std::vector<Tensor<T>> rows;
  for (auto [g, r] : where) rows.push_back(ops::slice_rows(reduced[g], r, 1));
  return ops::concat_rows(rows);
}

template <class T>
StudyForward<T> forward_study(const CamchexModel<T>& m, const StudyInput& in) {
  const auto& mods = m.modalities;
  mods.validate();
  const auto z_images = encode_images(m, in.images);
  auto text_block = [&](bool enabled, const std::optional<std::vector<std::size_t>>& tokens,
                        TextModality which) -> std::optional<Tensor<T>> {
    if (!enabled) return std::nullopt;
    if (!tokens) return placeholder_block(m.projection, which);
    return cls_to_spatial(m.projection, encode_text(m.text, *tokens).cls);
  };
  StudyForward<T> out;
  out.sequence = assemble_sequence(m.fusion, z_images, text_block(mods.indication, in.indication, TextModality::indication),
                                   text_block(mods.vitals, in.vitals, TextModality::vitals));
  out.output = fuse(m.fusion, out.sequence);
  out.logits = decode(m.head, out.output);
  return out;
}

}  // namespace camchex
