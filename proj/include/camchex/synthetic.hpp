// Synthetic studies with planted per-modality signals.
//
// Each class is routed to one source of evidence: a Gaussian blob in frontal
// images (image), a blob only in lateral images (lateral), a keyword in the
// indication (text), a shifted vitals field (vitals), or blob plus keyword
// (multi). A model can only recover a class through the modality it is routed
// to, which gives modality ablations a measurable effect.
#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "camchex/data_model.hpp"
#include "camchex/nn.hpp"
#include "json.hpp"

namespace camchex {

enum class SignalRoute { image, lateral, text, vitals, multi };

inline std::string_view route_name(SignalRoute r) {
  switch (r) {
    case SignalRoute::image: return "image";
    case SignalRoute::lateral: return "lateral";
    case SignalRoute::text: return "text";
    case SignalRoute::vitals: return "vitals";
    case SignalRoute::multi: return "multi";
  }
  return "image";
}

inline SignalRoute parse_route(std::string_view s) {
  for (auto r : {SignalRoute::image, SignalRoute::lateral, SignalRoute::text, SignalRoute::vitals, SignalRoute::multi})
    if (route_name(r) == s) return r;
  throw InputError("unknown signal route '" + std::string(s) + "'");
}

/// View-count distribution with the long MIMIC-like tail: 191 of 227,827
/// studies have more than four images.
inline std::vector<double> mimic_like_view_count_probs() {
  const double tail = 191.0 / 227827.0;
  // N = 1..4 share the remaining mass; N = 5..11 split the tail.
  std::vector<double> p = {0.34, 0.55, 0.09, 0.0};
  p[3] = 1.0 - tail - (p[0] + p[1] + p[2]);
  const double per = tail / 7.0;
  for (int n = 5; n <= 11; ++n) p.push_back(per);
  return p;
}

struct SynthSpec {
  std::vector<std::string> label_names;
  std::vector<double> prevalence;
  std::vector<SignalRoute> routing;
  std::size_t n_train = 200;
  std::size_t n_val = 100;
  std::size_t n_test = 100;
  std::size_t n_pool = 0;
  std::size_t resolution = 64;
  std::size_t channels = 1;
  double noise_sigma = 0.05;
  double blob_amplitude = 0.5;
  double missing_indication = 0.1;
  double missing_vitals = 0.1;
  double missing_vitals_field = 0.0;
  double vitals_shift_sd = 4.0;
  double lateral_probability = 0.5;
  double keyword_false_rate = 0.0;
  std::vector<double> view_count_probs = {0.4, 0.5, 0.1};
  std::vector<std::size_t> pool_labeled_classes;

  std::size_t num_classes() const { return label_names.size(); }

  void validate() const {
    const std::size_t q = num_classes();
    if (q == 0) throw InputError("synthetic spec: no classes");
    if (prevalence.size() != q || routing.size() != q)
      throw InputError("synthetic spec: label_names, prevalence and routing must have equal length");
    for (double p : prevalence)
      if (!(p > 0.0 && p < 1.0)) throw InputError("synthetic spec: prevalence targets must lie in (0,1)");
    if (resolution < 8 || channels == 0) throw InputError("synthetic spec: resolution must be >= 8");
    if (view_count_probs.empty() || view_count_probs.size() > kMaxStudyImages)
      throw InputError("synthetic spec: view_count_probs must cover 1.." + std::to_string(kMaxStudyImages) + " images");
    for (double p : view_count_probs)
      if (!(p >= 0.0)) throw InputError("synthetic spec: negative view-count probability");
    for (double f : {missing_indication, missing_vitals, missing_vitals_field, lateral_probability, keyword_false_rate})
      if (!(f >= 0.0 && f <= 1.0)) throw InputError("synthetic spec: fractions must lie in [0,1]");
    for (auto c : pool_labeled_classes)
      if (c >= q) throw InputError("synthetic spec: pool_labeled_classes index out of range");
  }

  static SynthSpec from_json(const nlohmann::json& j) {
    SynthSpec s;
    try {
      if (j.contains("label_names") && j.at("label_names").is_string() && j.at("label_names") == "long_tail") {
        s.label_names = long_tail_label_names();
        s.prevalence = long_tail_nominal_prevalence();
      } else if (j.contains("label_names")) {
        s.label_names = j.at("label_names").get<std::vector<std::string>>();
      } else {
        const auto q = j.at("q").get<std::size_t>();
        for (std::size_t c = 0; c < q; ++c) s.label_names.push_back("class_" + std::to_string(c));
      }
      const std::size_t q = s.label_names.size();
      if (auto it = j.find("prevalence"); it != j.end()) {
        if (it->is_number()) s.prevalence.assign(q, it->get<double>());
        else s.prevalence = it->get<std::vector<double>>();
      }
      if (auto it = j.find("routing"); it != j.end()) {
        if (it->is_string()) s.routing.assign(q, parse_route(it->get<std::string>()));
        else
          for (const auto& r : *it) s.routing.push_back(parse_route(r.get<std::string>()));
      } else {
        s.routing.assign(q, SignalRoute::image);
      }
      auto get = [&](const char* key, auto& field) {
        if (auto it = j.find(key); it != j.end()) field = it->get<std::decay_t<decltype(field)>>();
      };
      get("n_train", s.n_train);
      get("n_val", s.n_val);
      get("n_test", s.n_test);
      get("n_pool", s.n_pool);
      get("resolution", s.resolution);
      get("channels", s.channels);
      get("noise_sigma", s.noise_sigma);
      get("blob_amplitude", s.blob_amplitude);
      get("missing_indication", s.missing_indication);
      get("missing_vitals", s.missing_vitals);
      get("missing_vitals_field", s.missing_vitals_field);
      get("vitals_shift_sd", s.vitals_shift_sd);
      get("lateral_probability", s.lateral_probability);
      get("keyword_false_rate", s.keyword_false_rate);
      get("pool_labeled_classes", s.pool_labeled_classes);
      if (auto it = j.find("view_count_probs"); it != j.end()) {
        if (it->is_string() && *it == "mimic_like") s.view_count_probs = mimic_like_view_count_probs();
        else s.view_count_probs = it->get<std::vector<double>>();
      }
    } catch (const nlohmann::json::exception& e) {
      throw InputError(std::string("synthetic spec: ") + e.what());
    }
    s.validate();
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json routes = nlohmann::json::array();
    for (auto r : routing) routes.push_back(std::string(route_name(r)));
    return {{"label_names", label_names},
            {"prevalence", prevalence},
            {"routing", routes},
            {"n_train", n_train},
            {"n_val", n_val},
            {"n_test", n_test},
            {"n_pool", n_pool},
            {"resolution", resolution},
            {"channels", channels},
            {"noise_sigma", noise_sigma},
            {"blob_amplitude", blob_amplitude},
            {"missing_indication", missing_indication},
            {"missing_vitals", missing_vitals},
            {"missing_vitals_field", missing_vitals_field},
            {"vitals_shift_sd", vitals_shift_sd},
            {"lateral_probability", lateral_probability},
            {"keyword_false_rate", keyword_false_rate},
            {"view_count_probs", view_count_probs},
            {"pool_labeled_classes", pool_labeled_classes}};
  }
};

struct SyntheticData {
  Dataset train, val, test, pool;
  Vocabulary vocab;
};

namespace synth_detail {

inline const std::vector<std::string>& keywords() {
  static const std::vector<std::string> k = {
      "cough",   "fever",     "dyspnea",   "trauma",  "hemoptysis", "orthopnea",    "wheezing", "chills",   "malaise",
      "syncope", "hypoxia",   "tachycardia", "swelling", "weakness", "fatigue",    "palpitations", "sepsis", "vomiting",
      "confusion", "dizziness", "lethargy", "anemia", "hypotension", "stridor",     "rigors",   "cyanosis"};
  return k;
}

inline const std::vector<std::string>& fillers() {
  static const std::vector<std::string> f = {"eval",    "for",     "acute",      "process", "history", "of",
                                             "chest",   "pain",    "evaluation", "possible", "new",    "worsening",
                                             "shortness", "breath", "check",     "line",    "placement", "follow",
                                             "up",      "s/p",     "r/o",        "pna",     "status",  "post"};
  return f;
}

struct VitalField {
  double mean, sd, sign;
};

// Order: o2 saturation, temperature, heart rate, respiratory rate, systolic, diastolic.
inline const std::array<VitalField, 6>& vital_fields() {
  static const std::array<VitalField, 6> f = {{{97.5, 1.2, -1.0},
                                               {98.4, 0.5, 1.0},
                                               {85.0, 8.0, 1.0},
                                               {17.0, 1.5, 1.0},
                                               {130.0, 10.0, 1.0},
                                               {75.0, 7.0, 1.0}}};
  return f;
}

inline std::optional<double>& vital_slot(VitalSigns& v, std::size_t field) {
  switch (field) {
    case 0: return v.o2_saturation;
    case 1: return v.temperature;
    case 2: return v.heart_rate;
    case 3: return v.respiratory_rate;
    case 4: return v.systolic_bp;
    default: return v.diastolic_bp;
  }
}

inline double round1(double x) { return std::round(x * 10.0) / 10.0; }

class Generator {
 public:
  explicit Generator(const SynthSpec& spec) : spec_(spec) {
    const std::size_t q = spec.num_classes();
    const std::size_t grid = static_cast<std::size_t>(std::ceil(std::sqrt(double(q))));
    const double cell = double(spec.resolution) / double(grid);
    blob_sigma_ = cell / 5.0;
    for (std::size_t c = 0; c < q; ++c) {
      centers_.push_back({(double(c % grid) + 0.5) * cell, (double(c / grid) + 0.5) * cell});
    }
    std::size_t vitals_rank = 0;
    for (std::size_t c = 0; c < q; ++c)
      vitals_field_.push_back(spec.routing[c] == SignalRoute::vitals ? vitals_rank++ % 6 : std::size_t(-1));
  }

  Study make_study(const std::string& id, Rng& rng, bool pool) const {
    const std::size_t q = spec_.num_classes();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Study s;
    s.study_id = id;
    s.labels.values.assign(q, 0.0);
    s.labels.mask.assign(q, pool ? 0 : 1);
    for (std::size_t c = 0; c < q; ++c) s.labels.values[c] = u(rng) < spec_.prevalence[c] ? 1.0 : 0.0;
    if (pool)
      for (auto c : spec_.pool_labeled_classes) s.labels.mask[c] = 1;

    std::discrete_distribution<std::size_t> count(spec_.view_count_probs.begin(), spec_.view_count_probs.end());
    const std::size_t n = count(rng) + 1;
    for (std::size_t k = 0; k < n; ++k) {
      const View view = (k > 0 && u(rng) < spec_.lateral_probability) ? View::lateral : View::frontal;
      s.images.push_back(make_image(view, s.labels.values, int(k), rng));
    }

    const bool female = u(rng) < 0.5;
    if (u(rng) >= spec_.missing_indication) s.indication = make_indication(s.labels.values, female, rng);
    if (u(rng) >= spec_.missing_vitals) s.vitals = make_vitals(s.labels.values, female, rng);
    return s;
  }

 private:
  ViewImage make_image(View view, const std::vector<double>& labels, int acq, Rng& rng) const {
    const std::size_t r = spec_.resolution;
    std::normal_distribution<double> noise(0.0, spec_.noise_sigma);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ViewImage im;
    im.view = view;
    im.channels = spec_.channels;
    im.height = im.width = r;
    im.acquisition_index = acq;
    std::vector<double> field(r * r, 0.0);
    const double base = 0.2 + 0.1 * u(rng);
    const double tilt = 0.1 * (u(rng) - 0.5);
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < r; ++x) field[y * r + x] = base + tilt * (double(y) / double(r) - 0.5);
    for (std::size_t c = 0; c < labels.size(); ++c) {
      if (labels[c] < 0.5) continue;
      const auto route = spec_.routing[c];
      bool draw = false;
      if (route == SignalRoute::image || route == SignalRoute::multi)
        draw = view == View::frontal || u(rng) < 0.5;
      else if (route == SignalRoute::lateral)
        draw = view == View::lateral;
      if (!draw) continue;
      const auto [cx, cy] = centers_[c];
      for (std::size_t y = 0; y < r; ++y)
        for (std::size_t x = 0; x < r; ++x) {
          const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
          field[y * r + x] += spec_.blob_amplitude * std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma_ * blob_sigma_));
        }
    }
    im.pixels.resize(im.channels * r * r);
    for (std::size_t ch = 0; ch < im.channels; ++ch)
      for (std::size_t i = 0; i < r * r; ++i)
        im.pixels[ch * r * r + i] = static_cast<float>(std::clamp(field[i] + noise(rng), 0.0, 1.0));
    return im;
  }

  std::string make_indication(const std::vector<double>& labels, bool female, Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const auto& f = fillers();
    std::uniform_int_distribution<std::size_t> pick(0, f.size() - 1);
    std::uniform_int_distribution<int> nfill(2, 4);
    std::vector<std::string> words;
    const int n = nfill(rng);
    for (int i = 0; i < n; ++i) words.push_back(f[pick(rng)]);
    for (std::size_t c = 0; c < labels.size(); ++c) {
      const auto route = spec_.routing[c];
      if (route != SignalRoute::text && route != SignalRoute::multi) continue;
      const bool mention = labels[c] >= 0.5 || u(rng) < spec_.keyword_false_rate;
      if (mention) words.push_back(keywords()[c % keywords().size()]);
    }
    std::shuffle(words.begin(), words.end(), rng);
    std::string text = female ? "year old woman with" : "year old man with";
    for (const auto& w : words) text += " " + w;
    return text + " .";
  }

  VitalSigns make_vitals(const std::vector<double>& labels, bool female, Rng& rng) const {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::normal_distribution<double> z(0.0, 1.0);
    VitalSigns v;
    v.gender = female ? Gender::female : Gender::male;
    std::array<double, 6> shift{};
    for (std::size_t c = 0; c < labels.size(); ++c)
      if (vitals_field_[c] != std::size_t(-1) && labels[c] >= 0.5) {
        const auto& fld = vital_fields()[vitals_field_[c]];
        shift[vitals_field_[c]] += fld.sign * spec_.vitals_shift_sd * fld.sd;
      }
    for (std::size_t i = 0; i < 6; ++i) {
      const auto& fld = vital_fields()[i];
      double value = fld.mean + fld.sd * z(rng) + shift[i];
      if (i == 0) value = std::min(value, 100.0);
      value = std::max(round1(value), 0.1);
      if (u(rng) >= spec_.missing_vitals_field) vital_slot(v, i) = value;
    }
    return v;
  }

  const SynthSpec& spec_;
  std::vector<std::pair<double, double>> centers_;
  std::vector<std::size_t> vitals_field_;
  double blob_sigma_ = 1.0;
};

inline Vocabulary build_vocabulary(const std::vector<const Dataset*>& splits) {
  std::vector<std::string> words;
  for (const char* p : {".", ",", ":", "|", "/", "-", "(", ")"}) words.emplace_back(p);
  for (const auto& w : split_words(render_vitals_text(VitalSigns{}))) words.push_back(w);
  for (const char* w : {"f", "m", "year", "old", "woman", "man", "with"}) words.emplace_back(w);
  for (const auto& f : fillers())
    for (const auto& w : split_words(f)) words.push_back(w);
  for (const auto& k : keywords()) words.push_back(k);
  for (int i = 0; i <= 300; ++i) words.push_back(std::to_string(i));
  for (const auto* d : splits)
    for (const auto& s : d->studies) {
      if (s.indication)
        for (const auto& w : split_words(*s.indication)) words.push_back(w);
    }
  return Vocabulary(words);
}

}  // namespace synth_detail

/// Generates train/val/test/pool splits and a vocabulary covering every
/// generated text. Equal seeds give bit-identical output.
inline SyntheticData generate_synthetic(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const synth_detail::Generator gen(spec);
  SyntheticData out;
  auto make = [&](Dataset& d, Split split, std::size_t n, std::uint64_t stream) {
    std::seed_seq seq{seed, stream};
    Rng rng(seq);
    d.split = split;
    d.label_names = spec.label_names;
    d.studies.reserve(n);
    const std::string prefix(split_name(split));
    for (std::size_t i = 0; i < n; ++i) {
      char id[32];
      std::snprintf(id, sizeof id, "%s%05zu", prefix.c_str(), i);
      d.studies.push_back(gen.make_study(id, rng, split == Split::unlabeled_pool));
    }
  };
  make(out.train, Split::train, spec.n_train, 1);
  make(out.val, Split::val, spec.n_val, 2);
  make(out.test, Split::test, spec.n_test, 3);
  make(out.pool, Split::unlabeled_pool, spec.n_pool, 4);
  out.vocab = synth_detail::build_vocabulary({&out.train, &out.val, &out.test, &out.pool});
  return out;
}

}  // namespace camchex
