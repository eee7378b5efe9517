// Average precision, AUROC and the long-tail report.
#pragma once

#include <algorithm>
#include <cstdio>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "camchex/data_model.hpp"
#include "json.hpp"

namespace camchex {

/// Step-interpolated AP: sum over score thresholds of the recall increment
/// times the precision at that threshold. Tied scores form one threshold, so
/// the result does not depend on input order. nullopt if no positives.
inline std::optional<double> average_precision(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw InputError("average_precision: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t positives = 0;
  for (auto l : labels) positives += l ? 1 : 0;
  if (positives == 0) return std::nullopt;
  double sum = 0.0;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i, group_tp = 0;
    while (j < n && scores[order[j]] == scores[order[i]]) group_tp += labels[order[j++]] ? 1 : 0;
    tp += group_tp;
    sum += double(group_tp) * double(tp) / double(j);
    i = j;
  }
  return sum / double(positives);
}

/// Mann-Whitney AUROC with mid-rank ties; nullopt unless both classes occur.
inline std::optional<double> auroc(std::span<const double> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw InputError("auroc: length mismatch");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double pos_rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * double(i + 1 + j);  // average of ranks i+1..j
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]]) {
        pos_rank_sum += mid;
        ++pos;
      }
    i = j;
  }
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) return std::nullopt;
  const double u = pos_rank_sum - double(pos) * double(pos + 1) / 2.0;
  return u / (double(pos) * double(neg));
}

struct ClassMetrics {
  std::string name;
  std::optional<double> ap;
  std::optional<double> auroc;
  Group group = Group::tail;
  std::size_t positives = 0;
  std::size_t count = 0;
};

struct SkippedClass {
  std::string name;
  std::string reason;
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;
  double mAP = 0.0;
  double macro_auroc = 0.0;
  std::optional<double> group_map[3];  // indexed by Group
  std::vector<SkippedClass> skipped_classes;

  std::optional<double> group_mean(Group g) const { return group_map[static_cast<int>(g)]; }

  nlohmann::json to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    nlohmann::json classes = nlohmann::json::array();
    for (const auto& c : per_class)
      classes.push_back({{"name", c.name},
                         {"ap", opt(c.ap)},
                         {"auroc", opt(c.auroc)},
                         {"group", group_name(c.group)},
                         {"positives", c.positives},
                         {"count", c.count}});
    nlohmann::json skipped = nlohmann::json::array();
    for (const auto& s : skipped_classes) skipped.push_back({{"name", s.name}, {"reason", s.reason}});
    return {{"per_class", classes},
            {"mAP", mAP},
            {"macro_auroc", macro_auroc},
            {"group_map",
             {{"head", opt(group_map[0])}, {"body", opt(group_map[1])}, {"tail", opt(group_map[2])}}},
            {"skipped_classes", skipped}};
  }

  void print(std::ostream& out) const {
    char line[160];
    std::snprintf(line, sizeof line, "%-28s %-5s %5s %8s %8s\n", "class", "group", "pos", "AP", "AUROC");
    out << line;
    auto fmt = [](const std::optional<double>& v) {
      char b[16];
      if (v)
        std::snprintf(b, sizeof b, "%.4f", *v);
      else
        std::snprintf(b, sizeof b, "-");
      return std::string(b);
    };
    for (const auto& c : per_class) {
      std::snprintf(line, sizeof line, "%-28s %-5s %5zu %8s %8s\n", c.name.c_str(),
                    std::string(group_name(c.group)).c_str(), c.positives, fmt(c.ap).c_str(), fmt(c.auroc).c_str());
      out << line;
    }
    std::snprintf(line, sizeof line, "mAP %.4f  macro AUROC %.4f  head %s  body %s  tail %s\n", mAP, macro_auroc,
                  fmt(group_map[0]).c_str(), fmt(group_map[1]).c_str(), fmt(group_map[2]).c_str());
    out << line;
  }
};

/// predictions[i][c] scores study i on class c; only masked-true entries are
/// scored. Groups come from `prev`, normally the training split's table.
inline MetricsReport evaluate(const std::vector<std::vector<double>>& predictions,
                              const std::vector<LabelVector>& labels, const PrevalenceTable& prev,
                              const std::vector<std::string>& label_names) {
  const std::size_t q = label_names.size();
  if (predictions.size() != labels.size()) throw InputError("evaluate: predictions and labels differ in length");
  if (prev.group.size() != q) throw InputError("evaluate: prevalence table has the wrong number of classes");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (predictions[i].size() != q || labels[i].size() != q)
      throw InputError("evaluate: study " + std::to_string(i) + " does not have " + std::to_string(q) + " classes");

  MetricsReport r;
  double ap_sum = 0.0, auc_sum = 0.0;
  std::size_t ap_n = 0, auc_n = 0;
  double group_sum[3] = {0, 0, 0};
  std::size_t group_n[3] = {0, 0, 0};
  for (std::size_t c = 0; c < q; ++c) {
    std::vector<double> s;
    std::vector<std::uint8_t> y;
    for (std::size_t i = 0; i < labels.size(); ++i)
      if (labels[i].mask[c]) {
        s.push_back(predictions[i][c]);
        y.push_back(labels[i].values[c] >= 0.5 ? 1 : 0);
      }
    ClassMetrics m;
    m.name = label_names[c];
    m.group = prev.group[c];
    m.count = s.size();
    m.positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
    m.ap = average_precision(s, y);
    m.auroc = auroc(s, y);
    if (m.ap) {
      ap_sum += *m.ap;
      ++ap_n;
      group_sum[static_cast<int>(m.group)] += *m.ap;
      ++group_n[static_cast<int>(m.group)];
    } else {
      r.skipped_classes.push_back({m.name, "AP: no positive labels"});
    }
    if (m.auroc)
      auc_sum += *m.auroc, ++auc_n;
    else
      r.skipped_classes.push_back({m.name, "AUROC: needs both positive and negative labels"});
    r.per_class.push_back(std::move(m));
  }
  if (ap_n == 0) throw InputError("evaluate: every class was skipped (no positives anywhere)");
  r.mAP = ap_sum / double(ap_n);
  r.macro_auroc = auc_n ? auc_sum / double(auc_n) : 0.0;
  for (int g = 0; g < 3; ++g)
    if (group_n[g]) r.group_map[g] = group_sum[g] / double(group_n[g]);
  return r;
}

}  // namespace camchex
