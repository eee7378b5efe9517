// Optimisation: schedule, EMA, AdamW, the stage-1 / noisy-student / view
// fine-tuning / stage-2 loops, batched inference and the gradient checker.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <mutex>
#include <numbers>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "camchex/data_model.hpp"
#include "camchex/head_loss.hpp"
#include "camchex/metrics.hpp"
#include "camchex/model.hpp"
#include "json.hpp"

namespace camchex {

inline void warn(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

/// Student input noise: horizontal flip, Gaussian pixel jitter, dropout on
/// the feature tokens feeding the head.
struct NoiseConfig {
  double flip_prob = 0.5;
  double pixel_jitter = 0.02;
  double feature_dropout = 0.1;
};

struct TrainConfig {
  double peak_lr = 3e-5;
  double weight_decay = 1e-4;
  std::size_t batch_size = 16;
  double warmup_fraction = 0.05;
  std::size_t total_steps = 0;  // 0: epochs * batches per epoch
  std::size_t epochs = 10;
  double ema_decay = 0.999;
  std::size_t ns_iterations = 4;
  std::size_t view_cap = 4;
  bool stage2_freeze_encoders = false;
  bool stage2_init_from_ema = true;
  bool pseudo_label_from_ema = true;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 20231;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double gamma_pos = 0.0;
  double gamma_neg = 4.0;
  double margin = 0.05;
  WeightScheme class_weighting = WeightScheme::inverse_prevalence;
  NoiseConfig noise;

  void validate() const {
    auto fail = [](const std::string& m) { throw InputError("train config: " + m); };
    if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) fail("warmup_fraction must lie in (0,1)");
    if (ns_iterations < 1) fail("ns_iterations must be >= 1");
    if (batch_size == 0) fail("batch_size must be >= 1");
    if (view_cap == 0) fail("view_cap must be >= 1");
    if (!(peak_lr >= 0.0) || !(weight_decay >= 0.0)) fail("peak_lr and weight_decay must be >= 0");
    if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) fail("ema_decay must lie in [0,1]");
    if (total_steps == 0 && epochs == 0) fail("either epochs or total_steps must be positive");
    asl().validate();
  }

  ASLParams asl() const { return {gamma_pos, gamma_neg, margin, {}}; }

  /// Settings used for the miniature runs: the small model trains from
  /// scratch, so it needs a larger step size and a shorter EMA horizon.
  static TrainConfig desk() {
    TrainConfig c;
    c.peak_lr = 2e-3;
    c.batch_size = 8;
    c.ema_decay = 0.99;
    c.epochs = 20;
    return c;
  }

  static TrainConfig paper() { return TrainConfig{}; }

  nlohmann::json to_json() const {
    return {{"peak_lr", peak_lr},
            {"weight_decay", weight_decay},
            {"batch_size", batch_size},
            {"warmup_fraction", warmup_fraction},
            {"total_steps", total_steps},
            {"epochs", epochs},
            {"ema_decay", ema_decay},
            {"ns_iterations", ns_iterations},
            {"view_cap", view_cap},
            {"stage2_freeze_encoders", stage2_freeze_encoders},
            {"stage2_init_from_ema", stage2_init_from_ema},
            {"pseudo_label_from_ema", pseudo_label_from_ema},
            {"seed", seed},
            {"eval_seed", eval_seed},
            {"beta1", beta1},
            {"beta2", beta2},
            {"adam_eps", adam_eps},
            {"gamma_pos", gamma_pos},
            {"gamma_neg", gamma_neg},
            {"margin", margin},
            {"class_weighting", class_weighting == WeightScheme::uniform ? "uniform" : "inverse_prevalence"},
            {"flip_prob", noise.flip_prob},
            {"pixel_jitter", noise.pixel_jitter},
            {"feature_dropout", noise.feature_dropout}};
  }

  static TrainConfig from_json(const nlohmann::json& j, TrainConfig c = desk()) {
    try {
      auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) field = it->get<std::decay_t<decltype(field)>>();
      };
      get("peak_lr", c.peak_lr);
      get("weight_decay", c.weight_decay);
      get("batch_size", c.batch_size);
      get("warmup_fraction", c.warmup_fraction);
      get("total_steps", c.total_steps);
      get("epochs", c.epochs);
      get("ema_decay", c.ema_decay);
      get("ns_iterations", c.ns_iterations);
      get("view_cap", c.view_cap);
      get("stage2_freeze_encoders", c.stage2_freeze_encoders);
      get("stage2_init_from_ema", c.stage2_init_from_ema);
      get("pseudo_label_from_ema", c.pseudo_label_from_ema);
      get("seed", c.seed);
      get("eval_seed", c.eval_seed);
      get("beta1", c.beta1);
      get("beta2", c.beta2);
      get("adam_eps", c.adam_eps);
      get("gamma_pos", c.gamma_pos);
      get("gamma_neg", c.gamma_neg);
      get("margin", c.margin);
      get("flip_prob", c.noise.flip_prob);
      get("pixel_jitter", c.noise.pixel_jitter);
      get("feature_dropout", c.noise.feature_dropout);
      if (auto it = j.find("class_weighting"); it != j.end())
        c.class_weighting = parse_weight_scheme(it->get<std::string>());
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------
// Schedule

inline std::size_t warmup_steps(const TrainConfig& cfg) {
  return static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * double(cfg.total_steps) - 1e-9));
}

/// Linear warmup over W = ceil(warmup_fraction * total) steps, then cosine
/// decay to zero at total_steps.
inline double lr_at(std::size_t step, const TrainConfig& cfg) {
  if (cfg.total_steps == 0) throw InputError("lr_at: total_steps is zero");
  if (step > cfg.total_steps)
    throw InputError("lr_at: step " + std::to_string(step) + " beyond total_steps " + std::to_string(cfg.total_steps));
  const std::size_t w = warmup_steps(cfg);
  if (step < w) return cfg.peak_lr * double(step) / double(w);
  const double span = double(std::max<std::size_t>(cfg.total_steps - w, 1));
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * double(step - w) / span));
}

// ---------------------------------------------------------------------------
// EMA

template <class Model>
struct EMAState {
  Model shadow;
  double decay = 0.999;
};

template <class Model>
EMAState<Model> ema_init(const Model& live, double decay) {
  return {deep_copy(live), decay};
}

/// shadow <- decay * shadow + (1 - decay) * live, elementwise.
template <class Model>
void ema_update(EMAState<Model>& state, Model& live) {
  std::vector<std::pair<std::string, void*>> shadow;
  state.shadow.visit([&](const std::string& name, auto& t) { shadow.emplace_back(name, &t); }, "");
  std::size_t i = 0;
  const double d = state.decay;
  live.visit(
      [&](const std::string& name, auto& p) {
        using Tn = std::decay_t<decltype(p)>;
        if (i >= shadow.size() || shadow[i].first != name) throw InputError("ema_update: parameter lists differ at " + name);
        auto& s = *static_cast<Tn*>(shadow[i++].second);
        if (s.shape() != p.shape()) throw InputError("ema_update: shape mismatch for " + name);
        auto sv = s.data();
        auto pv = p.data();
        using V = typename Tn::value_type;
        for (std::size_t k = 0; k < sv.size(); ++k) sv[k] = V(d * double(sv[k]) + (1.0 - d) * double(pv[k]));
      },
      "");
  if (i != shadow.size()) throw InputError("ema_update: parameter counts differ");
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay

template <class T>
class AdamW {
 public:
  template <class Model>
  AdamW(Model& model, const TrainConfig& cfg)
      : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
    model.visit([&](const std::string&, Tensor<T>& t) { params_.push_back(t); }, "");
    m_.resize(params_.size());
    v_.resize(params_.size());
  }

  /// One update from the accumulated gradients, which are then cleared.
  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, double(t_));
    const double c2 = 1.0 - std::pow(beta2_, double(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.requires_grad() || p.grad().empty()) continue;
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.empty()) m.assign(p.size(), 0.0), v.assign(p.size(), 0.0);
      auto x = p.data();
      auto g = p.grad();
      for (std::size_t k = 0; k < x.size(); ++k) {
        const double gk = double(g[k]);
        m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
        v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
        const double update = (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_) + weight_decay_ * double(x[k]);
        x[k] = T(double(x[k]) - lr * update);
      }
      p.zero_grad();
    }
  }

  std::size_t steps() const { return t_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_, v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Logs

struct EpochLog {
  std::size_t epoch = 0;
  std::string split;
  double loss = 0.0;
  std::optional<double> mAP;
  std::optional<double> macro_auroc;
  double lr = 0.0;
};

struct FitTrace {
  std::vector<double> step_losses;
  std::vector<EpochLog> log;
  std::size_t steps = 0;
};

/// Called after each epoch's logs are complete; returning false stops training.
using EpochHook = std::function<bool(const std::vector<EpochLog>&)>;

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpochLog>& log) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  auto opt = [](const std::optional<double>& v) {
    char b[32] = "";
    if (v) std::snprintf(b, sizeof b, "%.6f", *v);
    return std::string(b);
  };
  out << "epoch,split,loss,mAP,macro_auroc,lr\n";
  char b[64];
  for (const auto& e : log) {
    out << e.epoch << ',' << e.split << ',';
    std::snprintf(b, sizeof b, "%.8g", e.loss);
    out << b << ',' << opt(e.mAP) << ',' << opt(e.macro_auroc) << ',';
    std::snprintf(b, sizeof b, "%.8g", e.lr);
    out << b << '\n';
  }
}

// ---------------------------------------------------------------------------
// Inference helpers

/// Worker count for inference; CAMCHEX_THREADS caps it.
inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("CAMCHEX_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min<std::size_t>(n, std::size_t(cap));
  }
  return n;
}

/// Runs f(i) for i in [0, n) on up to worker_threads() threads with graph
/// recording disabled. Results must be written to disjoint slots.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  const std::size_t workers = std::min(worker_threads(), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    NoGradGuard guard;
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w)
    threads.emplace_back([&, w] {
      NoGradGuard guard;
      try {
        for (std::size_t i = w; i < n; i += workers) f(i);
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

template <class T>
std::vector<double> to_doubles(const Tensor<T>& t) {
  return std::vector<double>(t.data().begin(), t.data().end());
}

/// Per-study probabilities from a stage-1 model: the mean over the study's
/// images of the per-image sigmoid outputs.
template <class T>
std::vector<std::vector<double>> predict_stage1(const Stage1Model<T>& m, const Dataset& d) {
  std::vector<std::vector<double>> out(d.size());
  parallel_for(d.size(), [&](std::size_t i) {
    const auto& s = d.studies[i];
    std::vector<double> acc;
    for (const auto& im : s.images) {
      const auto logits = stage1_forward(m, im);
      if (acc.empty()) acc.assign(logits.size(), 0.0);
      for (std::size_t c = 0; c < acc.size(); ++c) acc[c] += sigmoid(double(logits.data()[c]));
    }
    for (auto& a : acc) a /= double(s.images.size());
    out[i] = std::move(acc);
  });
  return out;
}

/// Stage-2 logits per study. Studies above the view cap use a subset drawn
/// from (eval_seed, study index), so results do not depend on threading.
template <class T>
std::vector<std::vector<double>> predict_stage2_logits(const CamchexModel<T>& m, const Dataset& d,
                                                       const Vocabulary& vocab, std::size_t view_cap,
                                                       std::size_t max_tokens, std::uint64_t eval_seed) {
  std::vector<std::vector<double>> out(d.size());
  parallel_for(d.size(), [&](std::size_t i) {
    auto rng = seeded_rng(eval_seed, i);
    const auto in = prepare_study(d.studies[i], vocab, m.modalities, view_cap, max_tokens, rng);
    out[i] = to_doubles(forward_study(m, in).logits);
  });
  return out;
}

inline std::vector<std::vector<double>> logits_to_probs(std::vector<std::vector<double>> v) {
  for (auto& row : v)
    for (auto& x : row) x = sigmoid(x);
  return v;
}

inline std::vector<LabelVector> labels_of(const Dataset& d) {
  std::vector<LabelVector> out;
  out.reserve(d.size());
  for (const auto& s : d.studies) out.push_back(s.labels);
  return out;
}

/// Report with groups taken from `prev`; nullopt when every class is skipped.
inline std::optional<MetricsReport> try_evaluate(const std::vector<std::vector<double>>& probs,
                                                 const std::vector<LabelVector>& labels, const PrevalenceTable& prev,
                                                 const std::vector<std::string>& names) {
  try {
    return evaluate(probs, labels, prev, names);
  } catch (const InputError&) {
    return std::nullopt;
  }
}

inline PrevalenceTable ungrouped(std::size_t q) { return PrevalenceTable::from_prevalence(std::vector<double>(q, 0.0)); }

/// Mean ASL of precomputed logits over all masked entries.
inline double mean_asl(const std::vector<std::vector<double>>& logits, const std::vector<LabelVector>& labels,
                       const ASLParams& asl) {
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t c = 0; c < labels[i].size(); ++c)
      if (labels[i].mask[c]) {
        total += asl_term(logits[i][c], labels[i].values[c], asl.weight(c), asl);
        ++count;
      }
  return count ? total / double(count) : 0.0;
}

/// Class weights for `labeled` under cfg; falls back to uniform (with a
/// warning) when inverse weighting is undefined.
inline ASLParams loss_params(const Dataset& labeled, const TrainConfig& cfg) {
  auto asl = cfg.asl();
  try {
    asl.class_weights = class_weights(compute_prevalence(labeled), cfg.class_weighting);
  } catch (const InputError& e) {
    warn(std::string(e.what()) + "; using uniform class weights");
    asl.class_weights.assign(labeled.num_classes(), 1.0);
  }
  return asl;
}

// ---------------------------------------------------------------------------
// Generic mini-batch loop

namespace train_detail {

/// Runs the schedule over n samples. forward(i) returns the logits of sample
/// i; epoch_start(e) runs before epoch e; epoch_end(log) may append logs and
/// returns false to stop early.
template <class T, class Model, class Forward, class EpochStart, class EpochEnd>
FitTrace fit(Model& live, EMAState<Model>& ema, const std::vector<const LabelVector*>& labels, const ASLParams& asl,
             const TrainConfig& cfg, Forward&& forward, EpochStart&& epoch_start, EpochEnd&& epoch_end) {
  const std::size_t n = labels.size();
  if (n == 0) throw InputError("training set is empty");
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  TrainConfig sched = cfg;
  sched.total_steps = cfg.total_steps ? cfg.total_steps : cfg.epochs * per_epoch;
  const std::size_t q = labels.front()->size();

  auto shuffle_rng = seeded_rng(cfg.seed, 101);
  AdamW<T> opt(live, cfg);
  zero_grad(live);
  FitTrace trace;
  std::vector<std::size_t> order(n);
  for (std::size_t epoch = 0; trace.steps < sched.total_steps; ++epoch) {
    epoch_start(epoch);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::vector<std::vector<double>> probs;
    std::vector<LabelVector> seen;
    double epoch_loss = 0.0, lr = 0.0;
    std::size_t batches = 0;
    for (std::size_t b = 0; b < per_epoch && trace.steps < sched.total_steps; ++b) {
      const std::size_t lo = b * cfg.batch_size, hi = std::min(n, lo + cfg.batch_size);
      std::size_t count = 0;
      for (std::size_t k = lo; k < hi; ++k) count += labels[order[k]]->masked_count();
      const double scale = count ? 1.0 / double(count) : 0.0;
      double batch_loss = 0.0;
      for (std::size_t k = lo; k < hi; ++k) {
        const std::size_t i = order[k];
        const Tensor<T> logits = forward(i);
        const auto loss = asl_loss_sum(logits, *labels[i], asl, scale);
        if (!std::isfinite(double(loss.item())))
          throw NumericalError("training diverged: non-finite loss at step " + std::to_string(trace.steps));
        loss.backward();
        batch_loss += double(loss.item());
        std::vector<double> p(q);
        for (std::size_t c = 0; c < q; ++c) p[c] = sigmoid(double(logits.data()[c]));
        probs.push_back(std::move(p));
        seen.push_back(*labels[i]);
      }
      lr = lr_at(trace.steps + 1, sched);
      opt.step(lr);
      ++trace.steps;
      ema_update(ema, live);
      trace.step_losses.push_back(batch_loss);
      epoch_loss += batch_loss;
      ++batches;
    }
    std::vector<EpochLog> logs(1);
    logs[0].epoch = epoch + 1;
    logs[0].split = "train";
    logs[0].loss = batches ? epoch_loss / double(batches) : 0.0;
    logs[0].lr = lr;
    // running metrics over this epoch's training forward passes
    std::vector<std::string> names(q);
    if (auto r = try_evaluate(probs, seen, ungrouped(q), names)) {
      logs[0].mAP = r->mAP;
      logs[0].macro_auroc = r->macro_auroc;
    }
    const bool go_on = epoch_end(logs);
    trace.log.insert(trace.log.end(), logs.begin(), logs.end());
    if (!go_on) break;
  }
  return trace;
}

}  // namespace train_detail

// ---------------------------------------------------------------------------
// Stage 1

template <class T>
struct Stage1Result {
  Stage1Model<T> live;
  Stage1Model<T> ema;
  FitTrace trace;
};

template <class T>
struct Stage1Options {
  const Stage1Model<T>* init = nullptr;  // start from a copy instead of fresh weights
  bool noise = false;
  const Dataset* val = nullptr;  // per-epoch EMA evaluation
  EpochHook on_epoch;
};

/// Flip / jitter applied to a copy of the pixels, clamped to [0,1].
template <class T>
Tensor<T> noisy_image(const ViewImage& im, const NoiseConfig& noise, Rng& rng) {
  std::vector<T> px(im.pixels.begin(), im.pixels.end());
  std::bernoulli_distribution flip(noise.flip_prob);
  if (flip(rng))
    for (std::size_t c = 0; c < im.channels; ++c)
      for (std::size_t y = 0; y < im.height; ++y) {
        auto row = px.begin() + std::ptrdiff_t((c * im.height + y) * im.width);
        std::reverse(row, row + std::ptrdiff_t(im.width));
      }
  if (noise.pixel_jitter > 0.0) {
    std::normal_distribution<double> jitter(0.0, noise.pixel_jitter);
    for (auto& p : px) p = T(std::clamp(double(p) + jitter(rng), 0.0, 1.0));
  }
  return Tensor<T>({1, im.channels, im.height, im.width}, std::move(px));
}

/// Image-level training: every image is a sample carrying its study's labels.
/// Class weights come from sets.front(); further sets (pseudo-labeled data)
/// only add samples.
template <class T>
Stage1Result<T> train_stage1(const std::vector<const Dataset*>& sets, const ArchConfig& arch, const TrainConfig& cfg,
                             const Stage1Options<T>& opt = {}) {
  cfg.validate();
  if (sets.empty()) throw InputError("train_stage1: no data");
  const Dataset& labeled = *sets.front();
  if (arch.num_classes != labeled.num_classes())
    throw InputError("train_stage1: model has " + std::to_string(arch.num_classes) + " classes, data has " +
                     std::to_string(labeled.num_classes()));
  std::vector<const ViewImage*> images;
  std::vector<const LabelVector*> labels;
  for (const Dataset* d : sets) {
    if (d->num_classes() != labeled.num_classes()) throw InputError("train_stage1: label sets differ between datasets");
    for (const auto& s : d->studies)
      for (const auto& im : s.images) {
        images.push_back(&im);
        labels.push_back(&s.labels);
      }
  }
  const auto asl = loss_params(labeled, cfg);

  Stage1Result<T> r;
  if (opt.init) {
    r.live = deep_copy(*opt.init);
  } else {
    auto init_rng = seeded_rng(cfg.seed, 1);
    r.live = Stage1Model<T>::init(arch, init_rng);
  }
  auto ema = ema_init(r.live, cfg.ema_decay);
  auto noise_rng = seeded_rng(cfg.seed, 3);
  const std::size_t c = arch.image_channels, res = arch.resolution;

  auto forward = [&](std::size_t i) {
    if (opt.noise)
      return stage1_forward(r.live, noisy_image<T>(*images[i], cfg.noise, noise_rng), cfg.noise.feature_dropout,
                            &noise_rng);
    const ViewImage* p = images[i];
    return stage1_forward(r.live, images_to_tensor<T>(std::span<const ViewImage* const>(&p, 1), c, res));
  };
  auto epoch_end = [&](std::vector<EpochLog>& logs) {
    if (opt.val) {
      const auto probs = predict_stage1(ema.shadow, *opt.val);
      EpochLog v = logs.front();
      v.split = "val";
      std::vector<std::vector<double>> logits = probs;
      for (auto& row : logits)
        for (auto& p : row) p = std::log(std::max(p, 1e-12) / std::max(1.0 - p, 1e-12));
      v.loss = mean_asl(logits, labels_of(*opt.val), asl);
      auto rep = try_evaluate(probs, labels_of(*opt.val), ungrouped(labeled.num_classes()), opt.val->label_names);
      v.mAP = rep ? std::optional(rep->mAP) : std::nullopt;
      v.macro_auroc = rep ? std::optional(rep->macro_auroc) : std::nullopt;
      logs.push_back(v);
    }
    return opt.on_epoch ? opt.on_epoch(logs) : true;
  };
  r.trace = train_detail::fit<T>(r.live, ema, labels, asl, cfg, forward, [](std::size_t) {}, epoch_end);
  r.ema = std::move(ema.shadow);
  return r;
}

template <class T>
Stage1Result<T> train_stage1(const Dataset& labeled, const ArchConfig& arch, const TrainConfig& cfg,
                             const Stage1Options<T>& opt = {}) {
  return train_stage1<T>(std::vector<const Dataset*>{&labeled}, arch, cfg, opt);
}

/// Merges per-study probabilities into a pool as soft labels. Entries already
/// masked true keep their value; every entry of the result is masked true.
inline Dataset merge_pseudo_labels(const Dataset& pool, const std::vector<std::vector<double>>& probs) {
  if (pool.split != Split::unlabeled_pool) throw InputError("pseudo_label: dataset is not the unlabeled pool");
  if (probs.size() != pool.size()) throw InputError("pseudo_label: one prediction per pool study required");
  Dataset out;
  out.label_names = pool.label_names;
  out.split = Split::train;
  out.studies = pool.studies;
  for (std::size_t i = 0; i < out.size(); ++i) {
    auto& lv = out.studies[i].labels;
    if (probs[i].size() != lv.size()) throw InputError("pseudo_label: prediction width does not match Q");
    for (std::size_t c = 0; c < lv.size(); ++c) {
      if (lv.mask[c]) continue;
      lv.values[c] = std::clamp(probs[i][c], 1e-6, 1.0 - 1e-6);
      lv.mask[c] = 1;
    }
    lv.kind = LabelKind::soft_pseudo;
  }
  return out;
}

/// Soft labels for an unlabeled pool: one study per pool study, values the
/// teacher's mean image probability.
template <class T>
Dataset pseudo_label(const Stage1Model<T>& teacher, const Dataset& pool) {
  if (pool.split != Split::unlabeled_pool) throw InputError("pseudo_label: dataset is not the unlabeled pool");
  return merge_pseudo_labels(pool, predict_stage1(teacher, pool));
}

/// FNV-1a over every parameter value, in visit order.
template <class Model>
std::uint64_t parameter_fingerprint(Model& m) {
  std::uint64_t h = 1469598103934665603ull;
  m.visit(
      [&](const std::string&, auto& t) {
        for (auto v : t.data()) {
          const auto* bytes = reinterpret_cast<const unsigned char*>(&v);
          for (std::size_t k = 0; k < sizeof v; ++k) h = (h ^ bytes[k]) * 1099511628211ull;
        }
      },
      "");
  return h;
}

template <class T>
struct NoisyStudentResult {
  Stage1Result<T> teacher0;
  std::vector<Stage1Result<T>> students;
  std::vector<std::uint64_t> teacher_fingerprints;  // model that labeled the pool in round i
  std::vector<std::uint64_t> student_fingerprints;
  std::vector<std::size_t> study_counts;  // training studies in round i

  const Stage1Result<T>& final_student() const { return students.back(); }
};

/// Teacher 0 is trained on `labeled` (unless given); then ns_iterations
/// rounds of: label the pool, train a fresh noised student on labeled plus
/// pseudo-labeled studies, promote it to teacher.
template <class T>
NoisyStudentResult<T> noisy_student_loop(const Dataset& labeled, const Dataset& pool, const ArchConfig& arch,
                                         const TrainConfig& cfg, const Stage1Model<T>* teacher = nullptr,
                                         EpochHook on_epoch = {}) {
  cfg.validate();
  NoisyStudentResult<T> r;
  Stage1Options<T> plain;
  plain.on_epoch = on_epoch;
  if (teacher) {
    r.teacher0.live = deep_copy(*teacher);
    r.teacher0.ema = deep_copy(*teacher);
  } else {
    r.teacher0 = train_stage1<T>(labeled, arch, cfg, plain);
  }
  if (pool.size() == 0)
    warn("noisy student: unlabeled pool is empty; each round is plain supervised training");
  for (std::size_t it = 0; it < cfg.ns_iterations; ++it) {
    auto& prev = it == 0 ? r.teacher0 : r.students.back();
    auto& t = cfg.pseudo_label_from_ema ? prev.ema : prev.live;
    r.teacher_fingerprints.push_back(parameter_fingerprint(t));
    if (pool.size() == 0) {
      r.students.push_back(train_stage1<T>(labeled, arch, cfg, plain));
      r.study_counts.push_back(labeled.size());
    } else {
      const Dataset pseudo = pseudo_label(t, pool);
      Stage1Options<T> noisy = plain;
      noisy.noise = true;
      r.students.push_back(train_stage1<T>({&labeled, &pseudo}, arch, cfg, noisy));
      r.study_counts.push_back(labeled.size() + pseudo.size());
    }
    r.student_fingerprints.push_back(parameter_fingerprint(r.students.back().ema));
  }
  return r;
}

/// Studies restricted to images of one view; studies without it are dropped.
inline Dataset view_subset(const Dataset& d, View v) {
  Dataset out;
  out.label_names = d.label_names;
  out.split = d.split;
  for (const auto& s : d.studies) {
    Study t = s;
    t.images.clear();
    for (const auto& im : s.images)
      if (im.view == v) t.images.push_back(im);
    if (!t.images.empty()) out.studies.push_back(std::move(t));
  }
  return out;
}

/// Fine-tunes a copy of `base` on single-view data; `base` is not modified.
template <class T>
Stage1Result<T> finetune_view_encoder(const Stage1Model<T>& base, const Dataset& subset, const ArchConfig& arch,
                                      const TrainConfig& cfg, EpochHook on_epoch = {}) {
  if (subset.image_count() == 0) throw InputError("finetune_view_encoder: no images");
  const View v = subset.studies.front().images.front().view;
  for (const auto& s : subset.studies)
    for (const auto& im : s.images)
      if (im.view != v)
        throw InputError("finetune_view_encoder: study " + s.study_id + " mixes frontal and lateral images");
  Stage1Options<T> opt;
  opt.init = &base;
  opt.on_epoch = std::move(on_epoch);
  return train_stage1<T>(subset, arch, cfg, opt);
}

// ---------------------------------------------------------------------------
// Stage 2

template <class T>
struct Stage2Result {
  CamchexModel<T> live;
  CamchexModel<T> ema;
  FitTrace trace;
};

template <class T>
struct Stage2Options {
  const ImageEncoder<T>* frontal = nullptr;  // null: fresh initialisation
  const ImageEncoder<T>* lateral = nullptr;
  Modalities modalities;
  const Dataset* val = nullptr;
  EpochHook on_epoch;
};

template <class T>
Stage2Result<T> train_stage2(const Dataset& train, const Vocabulary& vocab, const ArchConfig& arch,
                             const TrainConfig& cfg, const Stage2Options<T>& opt = {}) {
  cfg.validate();
  arch.validate();
  opt.modalities.validate();
  if (arch.num_classes != train.num_classes())
    throw InputError("train_stage2: model has " + std::to_string(arch.num_classes) + " classes, data has " +
                     std::to_string(train.num_classes()));
  if (vocab.size() > arch.vocab_size)
    throw InputError("train_stage2: vocabulary of " + std::to_string(vocab.size()) +
                     " tokens exceeds the embedding table (" + std::to_string(arch.vocab_size) + ")");
  const auto asl = loss_params(train, cfg);

  auto init_rng = seeded_rng(cfg.seed, 2);
  Stage2Result<T> r;
  r.live = CamchexModel<T>::init(arch, init_rng, opt.modalities);
  if (opt.frontal) r.live.frontal = deep_copy(*opt.frontal);
  if (opt.lateral) r.live.lateral = deep_copy(*opt.lateral);
  if (cfg.stage2_freeze_encoders) {
    set_trainable(r.live.frontal, false);
    set_trainable(r.live.lateral, false);
  }
  auto ema = ema_init(r.live, cfg.ema_decay);

  std::vector<const LabelVector*> labels;
  for (const auto& s : train.studies) labels.push_back(&s.labels);
  std::vector<StudyInput> inputs(train.size());
  auto epoch_start = [&](std::size_t epoch) {
    auto rng = seeded_rng(cfg.seed, 1000 + epoch);
    for (std::size_t i = 0; i < train.size(); ++i)
      inputs[i] = prepare_study(train.studies[i], vocab, opt.modalities, cfg.view_cap, arch.max_tokens, rng);
  };
  auto forward = [&](std::size_t i) { return forward_study(r.live, inputs[i]).logits; };
  auto epoch_end = [&](std::vector<EpochLog>& logs) {
    if (opt.val) {
      const auto logits = predict_stage2_logits(ema.shadow, *opt.val, vocab, cfg.view_cap, arch.max_tokens, cfg.eval_seed);
      EpochLog v = logs.front();
      v.split = "val";
      v.loss = mean_asl(logits, labels_of(*opt.val), asl);
      auto rep = try_evaluate(logits_to_probs(logits), labels_of(*opt.val), ungrouped(train.num_classes()),
                              opt.val->label_names);
      v.mAP = rep ? std::optional(rep->mAP) : std::nullopt;
      v.macro_auroc = rep ? std::optional(rep->macro_auroc) : std::nullopt;
      logs.push_back(v);
    }
    return opt.on_epoch ? opt.on_epoch(logs) : true;
  };
  r.trace = train_detail::fit<T>(r.live, ema, labels, asl, cfg, forward, epoch_start, epoch_end);
  r.ema = std::move(ema.shadow);
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradCheckOptions {
  double eps = 1e-5;
  std::size_t samples_per_group = 200;
  double floor = 1e-5;  // denominator floor for near-zero gradients
  std::uint64_t seed = 7;
  double corrupt_scale = 1.0;  // multiplies the analytic gradient (fault injection)
};

struct GradCheckGroup {
  std::string name;
  std::size_t samples = 0;
  double max_rel_error = 0.0;
  std::string worst_parameter;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t samples = 0;
  std::vector<GradCheckGroup> groups;
};

/// Compares reverse-mode gradients of loss() against central differences
/// for sampled entries of every parameter. Groups are the top-level names
/// of the module's parameters. Error is |analytic - numeric| divided by
/// max(|numeric|, floor).
template <class Module, class LossFn>
GradCheckResult grad_check(Module& module, LossFn&& loss, const GradCheckOptions& o = {}) {
  std::vector<std::pair<std::string, Tensor<double>>> params;
  module.visit([&](const std::string& name, Tensor<double>& t) { params.emplace_back(name, t); }, "");
  zero_grad(module);
  {
    const Tensor<double> l = loss();
    if (!std::isfinite(l.item())) throw NumericalError("grad_check: non-finite loss");
    l.backward();
  }
  std::map<std::string, std::vector<std::size_t>> groups;  // group -> parameter indices
  std::vector<std::string> group_order;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& name = params[i].first;
    const auto g = name.substr(0, name.find('.'));
    if (!groups.count(g)) group_order.push_back(g);
    groups[g].push_back(i);
  }
  auto rng = seeded_rng(o.seed, 0);
  auto eval = [&] {
    NoGradGuard guard;
    const double v = loss().item();
    if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite loss under perturbation");
    return v;
  };
  GradCheckResult out;
  for (const auto& gname : group_order) {
    const auto& members = groups[gname];
    std::size_t total = 0;
    for (auto i : members) total += params[i].second.size();
    // round-robin over the group's tensors, random entry within each
    std::set<std::pair<std::size_t, std::size_t>> picks;
    const std::size_t want = std::min(total, o.samples_per_group);
    for (std::size_t k = 0; picks.size() < want; ++k) {
      const std::size_t p = members[k % members.size()];
      const std::size_t sz = params[p].second.size();
      std::size_t taken = 0;
      for (auto& [pp, e] : picks) taken += pp == p ? 1 : 0;
      if (taken >= sz) continue;
      std::uniform_int_distribution<std::size_t> pick(0, sz - 1);
      while (!picks.insert({p, pick(rng)}).second) {
      }
    }
    GradCheckGroup g{gname, picks.size(), 0.0, {}};
    for (auto [p, e] : picks) {
      auto& t = params[p].second;
      const double analytic = (t.grad().empty() ? 0.0 : t.grad()[e]) * o.corrupt_scale;
      const double x0 = t.data()[e];
      t.data()[e] = x0 + o.eps;
      const double fp = eval();
      t.data()[e] = x0 - o.eps;
      const double fm = eval();
      t.data()[e] = x0;
      const double numeric = (fp - fm) / (2.0 * o.eps);
      const double err = std::abs(analytic - numeric) / std::max(std::abs(numeric), o.floor);
      if (err > g.max_rel_error) {
        g.max_rel_error = err;
        g.worst_parameter = params[p].first + "[" + std::to_string(e) + "]";
      }
    }
    out.max_rel_error = std::max(out.max_rel_error, g.max_rel_error);
    out.samples += g.samples;
    out.groups.push_back(std::move(g));
  }
  zero_grad(module);
  return out;
}

}  // namespace camchex
