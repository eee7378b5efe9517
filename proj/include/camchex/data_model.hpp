// Studies, labels, vitals, vocabularies and the JSON-lines manifest format.
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "camchex/tensor.hpp"
#include "json.hpp"

namespace camchex {

enum class View { frontal, lateral };

inline std::string_view view_name(View v) { return v == View::frontal ? "frontal" : "lateral"; }

inline View parse_view(std::string_view s) {
  if (s == "frontal") return View::frontal;
  if (s == "lateral") return View::lateral;
  throw InputError("unknown view '" + std::string(s) + "'");
}

struct ViewImage {
  View view = View::frontal;
  std::size_t channels = 1;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> pixels;  // channels x height x width
  int acquisition_index = 0;

  bool operator==(const ViewImage&) const = default;
};

enum class Gender { female, male, unknown };

struct VitalSigns {
  std::optional<double> temperature;
  std::optional<double> heart_rate;
  std::optional<double> respiratory_rate;
  std::optional<double> o2_saturation;
  std::optional<double> systolic_bp;
  std::optional<double> diastolic_bp;
  Gender gender = Gender::unknown;

  bool operator==(const VitalSigns&) const = default;
};

/// Single-line text form of a vitals record, e.g.
/// "Temperature: 97.9 | Heart rate: 109.0 | ... | Gender: F". Absent fields
/// render as NA.
inline std::string render_vitals_text(const VitalSigns& v) {
  auto num = [](const std::optional<double>& x) -> std::string {
    if (!x) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.1f", *x);
    return buf;
  };
  const char* g = v.gender == Gender::female ? "F" : v.gender == Gender::male ? "M" : "NA";
  return "Temperature: " + num(v.temperature) + " | Heart rate: " + num(v.heart_rate) +
         " | Respiratory rate: " + num(v.respiratory_rate) + " | O2 Saturation: " + num(v.o2_saturation) +
         " | Systolic BP: " + num(v.systolic_bp) + " | Diastolic BP: " + num(v.diastolic_bp) + " | Gender: " + g;
}

enum class LabelKind { hard, soft_pseudo };

struct LabelVector {
  std::vector<double> values;
  std::vector<std::uint8_t> mask;  // 1 = supervised
  LabelKind kind = LabelKind::hard;

  std::size_t size() const { return values.size(); }
  std::size_t masked_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }

  bool operator==(const LabelVector&) const = default;
};

struct Study {
  std::string study_id;
  std::vector<ViewImage> images;
  std::optional<std::string> indication;
  std::optional<VitalSigns> vitals;
  LabelVector labels;

  bool operator==(const Study&) const = default;
};

enum class Split { train, val, test, unlabeled_pool };

inline std::string_view split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    case Split::unlabeled_pool: return "pool";
  }
  return "train";
}

struct Dataset {
  std::vector<Study> studies;
  std::vector<std::string> label_names;
  Split split = Split::train;

  std::size_t num_classes() const { return label_names.size(); }
  std::size_t size() const { return studies.size(); }
  std::size_t image_count() const {
    std::size_t n = 0;
    for (const auto& s : studies) n += s.images.size();
    return n;
  }

  bool operator==(const Dataset&) const = default;
};

/// Maximum images per study accepted at ingestion.
inline constexpr std::size_t kMaxStudyImages = 11;

inline void validate_study(const Study& s, std::size_t num_classes) {
  if (s.images.empty()) throw InputError("study " + s.study_id + ": no images");
  if (s.images.size() > kMaxStudyImages)
    throw InputError("study " + s.study_id + ": " + std::to_string(s.images.size()) + " images exceeds " +
                     std::to_string(kMaxStudyImages));
  for (const auto& im : s.images) {
    if (im.pixels.size() != im.channels * im.height * im.width)
      throw InputError("study " + s.study_id + ": pixel count does not match image shape");
    for (float p : im.pixels)
      if (!std::isfinite(p)) throw InputError("study " + s.study_id + ": non-finite pixel");
  }
  const auto& l = s.labels;
  if (l.values.size() != num_classes || l.mask.size() != num_classes)
    throw InputError("study " + s.study_id + ": expected " + std::to_string(num_classes) + " labels, got " +
                     std::to_string(l.values.size()) + " values / " + std::to_string(l.mask.size()) + " mask");
  for (std::size_t c = 0; c < num_classes; ++c) {
    const double v = l.values[c];
    if (!(v >= 0.0 && v <= 1.0)) throw InputError("study " + s.study_id + ": label value outside [0,1]");
    if (l.kind == LabelKind::hard && l.mask[c] && v != 0.0 && v != 1.0)
      throw InputError("study " + s.study_id + ": hard label must be 0 or 1");
  }
  if (s.vitals) {
    const auto& v = *s.vitals;
    for (const auto* f : {&v.temperature, &v.heart_rate, &v.respiratory_rate, &v.o2_saturation, &v.systolic_bp,
                          &v.diastolic_bp})
      if (*f && !(std::isfinite(**f) && **f > 0.0))
        throw InputError("study " + s.study_id + ": vitals values must be finite and positive");
  }
}

// ---------------------------------------------------------------------------
// Prevalence and long-tail groups

enum class Group { head, body, tail };

inline std::string_view group_name(Group g) {
  switch (g) {
    case Group::head: return "head";
    case Group::body: return "body";
    case Group::tail: return "tail";
  }
  return "tail";
}

/// head > 10%, body 1-10% inclusive, tail < 1%.
inline Group group_for_prevalence(double p) {
  if (p > 0.10) return Group::head;
  if (p >= 0.01) return Group::body;
  return Group::tail;
}

struct PrevalenceTable {
  std::vector<double> prevalence;
  std::vector<Group> group;

  static PrevalenceTable from_prevalence(std::vector<double> prev) {
    PrevalenceTable t;
    t.group.reserve(prev.size());
    for (double p : prev) t.group.push_back(group_for_prevalence(p));
    t.prevalence = std::move(prev);
    return t;
  }
};

/// Mean target value over masked entries, per class. Soft labels count
/// fractionally.
inline PrevalenceTable compute_prevalence(const Dataset& d) {
  const std::size_t q = d.num_classes();
  std::vector<double> pos(q, 0.0);
  std::vector<std::size_t> count(q, 0);
  for (const auto& s : d.studies)
    for (std::size_t c = 0; c < q; ++c)
      if (s.labels.mask[c]) {
        pos[c] += s.labels.values[c];
        ++count[c];
      }
  std::vector<double> prev(q);
  for (std::size_t c = 0; c < q; ++c) {
    if (count[c] == 0) throw InputError("prevalence undefined for class '" + d.label_names[c] + "': no labeled entries");
    prev[c] = pos[c] / double(count[c]);
  }
  return PrevalenceTable::from_prevalence(std::move(prev));
}

/// The 26-label long-tail vocabulary, alphabetical.
inline const std::vector<std::string>& long_tail_label_names() {
  static const std::vector<std::string> names = {
      "Atelectasis",      "Calcification of the Aorta", "Cardiomegaly",       "Consolidation",
      "Edema",            "Emphysema",                  "Enlarged Cardiomediastinum", "Fibrosis",
      "Fracture",         "Hernia",                     "Infiltration",       "Lung Lesion",
      "Lung Opacity",     "Mass",                       "No Finding",         "Nodule",
      "Pleural Effusion", "Pleural Other",              "Pleural Thickening", "Pneumomediastinum",
      "Pneumonia",        "Pneumoperitoneum",           "Pneumothorax",       "Subcutaneous Emphysema",
      "Support Devices",  "Tortuous Aorta"};
  return names;
}

/// Nominal prevalences for the 26 labels, chosen so that each label lands in
/// its reported frequency group (8 head, 10 body, 8 tail).
inline const std::vector<double>& long_tail_nominal_prevalence() {
  static const std::vector<double> prev = {
      0.22,  0.020, 0.24,  0.050, 0.14,  0.025, 0.040, 0.006, 0.030, 0.015, 0.012, 0.007, 0.23,
      0.018, 0.28,  0.035, 0.26,  0.003, 0.008, 0.004, 0.15,  0.002, 0.045, 0.005, 0.30,  0.009};
  return prev;
}

// ---------------------------------------------------------------------------
// Vocabulary and tokenizer

inline constexpr std::size_t kClsId = 0;
inline constexpr std::size_t kUnkId = 1;

class Vocabulary {
 public:
  Vocabulary() : Vocabulary(std::vector<std::string>{}) {}

  /// Builds a vocabulary with [CLS] and [UNK] reserved at ids 0 and 1,
  /// followed by `words` in order (duplicates ignored).
  explicit Vocabulary(const std::vector<std::string>& words) {
    add("[CLS]");
    add("[UNK]");
    for (const auto& w : words) add(w);
  }

  /// One token per line; line number is the id.
  static Vocabulary load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open vocabulary " + path.string());
    Vocabulary v;
    v.tokens_.clear();
    v.index_.clear();
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      v.tokens_.push_back(line);
      v.index_.emplace(line, v.tokens_.size() - 1);
    }
    if (v.tokens_.size() < 2) throw InputError("vocabulary " + path.string() + " lacks the CLS/UNK lines");
    return v;
  }

  static Vocabulary from_tokens(std::vector<std::string> tokens) {
    if (tokens.size() < 2) throw InputError("vocabulary lacks the CLS/UNK entries");
    Vocabulary v;
    v.tokens_ = std::move(tokens);
    v.index_.clear();
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.index_.emplace(v.tokens_[i], i);
    return v;
  }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    for (const auto& t : tokens_) out << t << '\n';
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::size_t id(const std::string& word) const {
    auto it = index_.find(word);
    return it == index_.end() ? kUnkId : it->second;
  }

 private:
  void add(const std::string& w) {
    if (index_.count(w)) return;
    index_.emplace(w, tokens_.size());
    tokens_.push_back(w);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Lowercases and splits on whitespace; every punctuation character becomes
/// its own word.
inline std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) words.push_back(std::move(cur));
    cur.clear();
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u)) {
      flush();
    } else if (std::ispunct(u)) {
      flush();
      words.emplace_back(1, ch);
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  flush();
  return words;
}

inline constexpr std::size_t kDefaultMaxTokens = 64;

/// [CLS] followed by word ids, truncated to max_len tokens in total.
inline std::vector<std::size_t> tokenize(const Vocabulary& vocab, std::string_view text,
                                         std::size_t max_len = kDefaultMaxTokens) {
  if (max_len == 0) throw InputError("tokenize: max_len must be >= 1");
  std::vector<std::size_t> ids{kClsId};
  for (const auto& w : split_words(text)) {
    if (ids.size() >= max_len) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

// ---------------------------------------------------------------------------
// View cap

/// Indices into s.images of the views kept under `cap`, in acquisition order.
/// Studies within the cap keep every image; larger studies draw `cap` images
/// uniformly without replacement. With `stratified`, one image of each view
/// present is drawn first.
template <class Rng>
std::vector<std::size_t> subsample_view_indices(const Study& s, std::size_t cap, Rng& rng, bool stratified = false) {
  if (cap == 0) throw InputError("subsample_views: cap must be >= 1");
  const std::size_t n = s.images.size();
  std::vector<std::size_t> chosen;
  if (n <= cap) {
    chosen.resize(n);
    for (std::size_t i = 0; i < n; ++i) chosen[i] = i;
  } else {
    std::vector<std::size_t> pool(n);
    for (std::size_t i = 0; i < n; ++i) pool[i] = i;
    if (stratified) {
      for (View v : {View::frontal, View::lateral}) {
        std::vector<std::size_t> of_view;
        for (std::size_t i : pool)
          if (s.images[i].view == v) of_view.push_back(i);
        if (of_view.empty() || chosen.size() >= cap) continue;
        std::uniform_int_distribution<std::size_t> pick(0, of_view.size() - 1);
        const std::size_t sel = of_view[pick(rng)];
        chosen.push_back(sel);
        pool.erase(std::find(pool.begin(), pool.end(), sel));
      }
    }
    // partial Fisher-Yates over the remaining pool
    for (std::size_t i = 0; chosen.size() < cap; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
      chosen.push_back(pool[i]);
    }
  }
  std::stable_sort(chosen.begin(), chosen.end(), [&](std::size_t a, std::size_t b) {
    return s.images[a].acquisition_index < s.images[b].acquisition_index;
  });
  return chosen;
}

template <class Rng>
std::vector<ViewImage> subsample_views(const Study& s, std::size_t cap, Rng& rng, bool stratified = false) {
  std::vector<ViewImage> out;
  for (std::size_t i : subsample_view_indices(s, cap, rng, stratified)) out.push_back(s.images[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Image sidecars: "CXR1", u32 C, H, W, then C*H*W little-endian float32.

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw InputError("truncated binary header");
  return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f32(std::ostream& out, float f) {
  std::uint32_t u;
  std::memcpy(&u, &f, 4);
  put_u32(out, u);
}

inline float get_f32(std::istream& in) {
  const std::uint32_t u = get_u32(in);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

}  // namespace detail

inline void write_image_sidecar(const std::filesystem::path& path, const ViewImage& im) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write image " + path.string());
  out.write("CXR1", 4);
  detail::put_u32(out, std::uint32_t(im.channels));
  detail::put_u32(out, std::uint32_t(im.height));
  detail::put_u32(out, std::uint32_t(im.width));
  for (float p : im.pixels) detail::put_f32(out, p);
}

/// Pixels and dimensions only; view and acquisition index come from the manifest.
inline ViewImage read_image_sidecar(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image " + path.string());
  char magic[4];
  if (!in.read(magic, 4) || std::string_view(magic, 4) != "CXR1") throw InputError("bad image magic in " + path.string());
  ViewImage im;
  im.channels = detail::get_u32(in);
  im.height = detail::get_u32(in);
  im.width = detail::get_u32(in);
  im.pixels.resize(im.channels * im.height * im.width);
  for (auto& p : im.pixels) p = detail::get_f32(in);
  return im;
}

// ---------------------------------------------------------------------------
// JSON-lines manifest

inline Split split_from_stem(const std::string& stem) {
  if (stem == "val") return Split::val;
  if (stem == "test") return Split::test;
  if (stem == "pool" || stem == "unlabeled_pool") return Split::unlabeled_pool;
  return Split::train;
}

/// Label names stored next to a manifest, one per line.
inline std::filesystem::path label_names_path(const std::filesystem::path& manifest) {
  return manifest.parent_path() / "labels.txt";
}

namespace detail {

inline std::optional<double> opt_number(const nlohmann::json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end() || it->is_null()) return std::nullopt;
  if (!it->is_number()) throw InputError(std::string("vitals field '") + key + "' is not a number");
  return it->get<double>();
}

inline Study study_from_json(const nlohmann::json& j, const std::filesystem::path& base, std::size_t q) {
  Study s;
  s.study_id = j.at("study_id").get<std::string>();
  for (const auto& im : j.at("images")) {
    ViewImage v = read_image_sidecar(base / im.at("path").get<std::string>());
    v.view = parse_view(im.at("view").get<std::string>());
    v.acquisition_index = im.at("acq").get<int>();
    s.images.push_back(std::move(v));
  }
  if (auto it = j.find("indication"); it != j.end() && !it->is_null()) s.indication = it->get<std::string>();
  if (auto it = j.find("vitals"); it != j.end() && !it->is_null()) {
    VitalSigns v;
    v.temperature = opt_number(*it, "temperature");
    v.heart_rate = opt_number(*it, "heart_rate");
    v.respiratory_rate = opt_number(*it, "respiratory_rate");
    v.o2_saturation = opt_number(*it, "o2_saturation");
    v.systolic_bp = opt_number(*it, "systolic_bp");
    v.diastolic_bp = opt_number(*it, "diastolic_bp");
    if (auto g = it->find("gender"); g != it->end() && !g->is_null()) {
      const auto gs = g->get<std::string>();
      if (gs == "F") v.gender = Gender::female;
      else if (gs == "M") v.gender = Gender::male;
      else throw InputError("unknown gender '" + gs + "'");
    }
    s.vitals = v;
  }
  s.labels.values = j.at("labels").get<std::vector<double>>();
  s.labels.mask.clear();
  for (const auto& m : j.at("mask")) s.labels.mask.push_back(m.get<bool>() ? 1 : 0);
  if (auto it = j.find("kind"); it != j.end()) {
    const auto k = it->get<std::string>();
    if (k == "soft_pseudo") s.labels.kind = LabelKind::soft_pseudo;
    else if (k != "hard") throw InputError("unknown label kind '" + k + "'");
  }
  if (s.labels.values.size() < q) throw InputError("label array shorter than Q=" + std::to_string(q));
  validate_study(s, q);
  return s;
}

}  // namespace detail

/// Reads a JSON-lines manifest. Q comes from labels.txt next to the manifest
/// when present, otherwise from the first study. The split is inferred from
/// the file stem (train/val/test/pool).
inline Dataset parse_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path.string());
  Dataset d;
  d.split = split_from_stem(path.stem().string());
  const auto names_path = label_names_path(path);
  if (std::filesystem::exists(names_path)) {
    std::ifstream names(names_path);
    std::string line;
    while (std::getline(names, line))
      if (!line.empty()) d.label_names.push_back(line);
  }
  const auto base = path.parent_path();
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (d.label_names.empty()) {
        const std::size_t q = j.at("labels").size();
        for (std::size_t c = 0; c < q; ++c) d.label_names.push_back("class_" + std::to_string(c));
      }
      Study s = detail::study_from_json(j, base, d.num_classes());
      if (!seen.insert(s.study_id).second) throw InputError("duplicate study_id '" + s.study_id + "'");
      d.studies.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": malformed line: " + e.what());
    } catch (const InputError& e) {
      throw InputError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return d;
}

/// Writes `d` as a manifest at `path`, its images as sidecars under
/// `<stem>_images/`, and labels.txt alongside.
inline void write_manifest(const Dataset& d, const std::filesystem::path& path) {
  namespace fs = std::filesystem;
  const auto base = path.parent_path();
  const std::string image_dir = path.stem().string() + "_images";
  fs::create_directories(base / image_dir);
  {
    std::ofstream names(label_names_path(path), std::ios::binary);
    for (const auto& n : d.label_names) names << n << '\n';
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write manifest " + path.string());
  for (std::size_t si = 0; si < d.studies.size(); ++si) {
    const Study& s = d.studies[si];
    nlohmann::json j;
    j["study_id"] = s.study_id;
    j["images"] = nlohmann::json::array();
    for (std::size_t k = 0; k < s.images.size(); ++k) {
      const auto& im = s.images[k];
      const std::string rel = image_dir + "/" + std::to_string(si) + "_" + std::to_string(k) + ".cxr";
      write_image_sidecar(base / rel, im);
      j["images"].push_back({{"view", std::string(view_name(im.view))}, {"path", rel}, {"acq", im.acquisition_index}});
    }
    if (s.indication) j["indication"] = *s.indication;
    if (s.vitals) {
      const auto& v = *s.vitals;
      nlohmann::json vj = nlohmann::json::object();
      auto put = [&](const char* k, const std::optional<double>& x) {
        if (x) vj[k] = *x;
      };
      put("temperature", v.temperature);
      put("heart_rate", v.heart_rate);
      put("respiratory_rate", v.respiratory_rate);
      put("o2_saturation", v.o2_saturation);
      put("systolic_bp", v.systolic_bp);
      put("diastolic_bp", v.diastolic_bp);
      if (v.gender != Gender::unknown) vj["gender"] = v.gender == Gender::female ? "F" : "M";
      j["vitals"] = vj;
    }
    j["labels"] = s.labels.values;
    auto mask = nlohmann::json::array();
    for (auto m : s.labels.mask) mask.push_back(m != 0);
    j["mask"] = mask;
    if (s.labels.kind == LabelKind::soft_pseudo) j["kind"] = "soft_pseudo";
    out << j.dump() << '\n';
  }
}

}  // namespace camchex
