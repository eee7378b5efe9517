// Query-based classification head and the weighted asymmetric loss.
#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "camchex/arch.hpp"
#include "camchex/data_model.hpp"
#include "camchex/nn.hpp"
#include "camchex/ops.hpp"

namespace camchex {

/// One learned query per class cross-attends to the feature tokens; query k
/// is then projected to logit k by its own weight vector.
template <class T>
struct DecoderHead {
  Tensor<T> queries;  // [Q, D]
  LayerNorm<T> memory_norm;
  MultiHeadAttention<T> attention;
  LayerNorm<T> norm;
  FeedForward<T> ffn;
  Tensor<T> class_weight;  // [Q, D]
  Tensor<T> class_bias;    // [Q]

  static DecoderHead init(std::size_t num_classes, std::size_t dim, std::size_t heads, Rng& rng) {
    return {normal_parameter<T>({num_classes, dim}, 1.0, rng),
            LayerNorm<T>::init(dim),
            MultiHeadAttention<T>::init(dim, heads, rng),
            LayerNorm<T>::init(dim),
            FeedForward<T>::init(dim, 2 * dim, rng),
            normal_parameter<T>({num_classes, dim}, 1.0 / std::sqrt(double(dim)), rng),
            constant_parameter<T>({num_classes}, T(0))};
  }

  static DecoderHead init(const ArchConfig& arch, Rng& rng) {
    return init(arch.num_classes, arch.feature_channels(), arch.head_heads, rng);
  }

  std::size_t num_classes() const { return queries.dim(0); }
  std::size_t dim() const { return queries.dim(1); }

  template <class F>
  void visit(F&& f, const std::string& prefix) {
    f(join_name(prefix, "queries"), queries);
    memory_norm.visit(f, join_name(prefix, "memory_norm"));
    attention.visit(f, join_name(prefix, "attention"));
    norm.visit(f, join_name(prefix, "norm"));
    ffn.visit(f, join_name(prefix, "ffn"));
    f(join_name(prefix, "class_weight"), class_weight);
    f(join_name(prefix, "class_bias"), class_bias);
  }
};

/// tokens[T, D] -> logits[Q]. Token order does not matter: the only
/// interaction with the tokens is attention pooling.
template <class T>
Tensor<T> decode(const DecoderHead<T>& head, const Tensor<T>& tokens) {
  if (tokens.rank() != 2 || tokens.dim(0) == 0 || tokens.dim(1) != head.dim())
    throw InputError("decode: expected [T>=1," + std::to_string(head.dim()) + "], got " + shape_string(tokens.shape()));
  const auto memory = head.memory_norm(tokens);
  auto h = ops::add(head.queries, head.attention(head.queries, memory));
  h = ops::add(h, head.ffn(head.norm(h)));
  return ops::add(ops::sum_cols(ops::mul(h, head.class_weight)), head.class_bias);
}

// ---------------------------------------------------------------------------
// Asymmetric loss

struct ASLParams {
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double margin = 0.05;
  std::vector<double> class_weights;  // empty = all ones

  double weight(std::size_t c) const { return class_weights.empty() ? 1.0 : class_weights.at(c); }

  void validate() const {
    if (!(gamma_pos >= 0.0) || !(gamma_neg >= 0.0)) throw InputError("asl: focusing exponents must be >= 0");
    if (!(margin >= 0.0 && margin < 1.0)) throw InputError("asl: margin must lie in [0,1)");
    for (double w : class_weights)
      if (!(w > 0.0) || !std::isfinite(w)) throw InputError("asl: class weights must be positive");
  }
};

namespace asl_detail {

inline double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

struct Term {
  double loss;
  double dlogit;
};

// Loss and d(loss)/d(logit) for one class entry with weight w.
inline Term term(double x, double y, double w, const ASLParams& prm) {
  const double p = 1.0 / (1.0 + std::exp(-x));
  const double log_p = -softplus(-x);
  Term t{0.0, 0.0};
  if (y > 0.0) {
    const double focus = prm.gamma_pos == 0.0 ? 1.0 : std::pow(1.0 - p, prm.gamma_pos);
    t.loss += -w * y * focus * log_p;
    t.dlogit += -w * y * focus * ((1.0 - p) - prm.gamma_pos * p * log_p);
  }
  if (y < 1.0) {
    const double pm = std::max(p - prm.margin, 0.0);
    if (pm > 0.0) {
      const double log_q = prm.margin == 0.0 ? -softplus(x) : std::log1p(-pm);
      const double focus = prm.gamma_neg == 0.0 ? 1.0 : std::pow(pm, prm.gamma_neg);
      t.loss += -w * (1.0 - y) * focus * log_q;
      const double dfocus = prm.gamma_neg == 0.0 ? 0.0 : prm.gamma_neg * std::pow(pm, prm.gamma_neg - 1.0);
      const double dloss_dpm = -w * (1.0 - y) * (dfocus * log_q - focus / (1.0 - pm));
      t.dlogit += dloss_dpm * p * (1.0 - p);
    }
  }
  return t;
}

}  // namespace asl_detail

/// Per-entry contribution −w[y(1−p)^γ+ log p + (1−y) p_m^γ− log(1−p_m)],
/// p = sigmoid(logit), p_m = max(p − m, 0).
inline double asl_term(double logit, double target, double weight, const ASLParams& params) {
  return asl_detail::term(logit, target, weight, params).loss;
}

/// Weighted ASL summed over the masked-true entries of `target`, multiplied by
/// `scale`. logits is [Q].
template <class T>
Tensor<T> asl_loss_sum(const Tensor<T>& logits, const LabelVector& target, const ASLParams& params, double scale = 1.0) {
  const std::size_t q = logits.size();
  if (target.values.size() != q || target.mask.size() != q)
    throw InputError("asl_loss: " + std::to_string(q) + " logits vs " + std::to_string(target.values.size()) +
                     " targets");
  if (!params.class_weights.empty() && params.class_weights.size() != q)
    throw InputError("asl_loss: class weight count does not match Q");
  double total = 0.0;
  std::vector<T> dlogit(q, T(0));
  for (std::size_t c = 0; c < q; ++c) {
    const double x = double(logits.data()[c]);
    if (!std::isfinite(x)) throw NumericalError("asl_loss: non-finite logit for class " + std::to_string(c));
    if (!target.mask[c]) continue;
    const double y = target.values[c];
    if (!(y >= 0.0 && y <= 1.0)) throw InputError("asl_loss: target outside [0,1]");
    const auto t = asl_detail::term(x, y, params.weight(c), params);
    total += t.loss * scale;
    dlogit[c] = T(t.dlogit * scale);
  }
  return Tensor<T>::from_op({1}, {T(total)}, {logits}, [dlogit = std::move(dlogit)](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t c = 0; c < g.size(); ++c) g[c] += self.grad[0] * dlogit[c];
  });
}

/// Mean ASL over all masked-true entries of a batch; 0 when nothing is masked.
template <class T>
Tensor<T> asl_loss(std::span<const Tensor<T>> logits, std::span<const LabelVector> targets, const ASLParams& params) {
  if (logits.size() != targets.size()) throw InputError("asl_loss: batch size mismatch");
  std::size_t count = 0;
  for (const auto& t : targets) count += t.masked_count();
  if (logits.empty()) return Tensor<T>({1});
  const double scale = count ? 1.0 / double(count) : 0.0;
  std::vector<Tensor<T>> parts;
  for (std::size_t i = 0; i < logits.size(); ++i) parts.push_back(asl_loss_sum(logits[i], targets[i], params, scale));
  return parts.size() == 1 ? parts.front() : ops::sum(ops::concat_rows(parts));
}

enum class WeightScheme { uniform, inverse_prevalence };

inline WeightScheme parse_weight_scheme(std::string_view s) {
  if (s == "uniform") return WeightScheme::uniform;
  if (s == "inverse_prevalence") return WeightScheme::inverse_prevalence;
  throw InputError("unknown class weight scheme '" + std::string(s) + "'");
}

/// uniform: all ones. inverse_prevalence: w_c ∝ 1/prevalence_c, mean 1.
inline std::vector<double> class_weights(const PrevalenceTable& prev, WeightScheme scheme) {
  const std::size_t q = prev.prevalence.size();
  if (scheme == WeightScheme::uniform) return std::vector<double>(q, 1.0);
  std::vector<double> w(q);
  double mean = 0.0;
  for (std::size_t c = 0; c < q; ++c) {
    if (!(prev.prevalence[c] > 0.0))
      throw InputError("class_weights: zero prevalence for class " + std::to_string(c) +
                       "; inverse weighting undefined");
    w[c] = 1.0 / prev.prevalence[c];
    mean += w[c];
  }
  mean /= double(q);
  for (auto& x : w) x /= mean;
  return w;
}

}  // namespace camchex
