#include <gtest/gtest.h>

#include <set>

#include "test_util.hpp"

using namespace camchex;

namespace {

using Scores = std::vector<double>;
using Labels = std::vector<std::uint8_t>;

// Precision/recall table over every distinct threshold, O(n^2).
std::optional<double> brute_ap(const Scores& s, const Labels& y) {
  const double p = double(std::count(y.begin(), y.end(), 1));
  if (p == 0) return std::nullopt;
  std::set<double, std::greater<>> thresholds(s.begin(), s.end());
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    double above = 0, hits = 0;
    for (std::size_t i = 0; i < s.size(); ++i)
      if (s[i] >= t) above += 1, hits += y[i];
    const double recall = hits / p, precision = hits / above;
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
std::optional<double> brute_auroc(const Scores& s, const Labels& y) {
  double good = 0, pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (!y[i] || y[j]) continue;
      pairs += 1;
      good += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  if (pairs == 0) return std::nullopt;
  return good / pairs;
}

void random_instance(std::mt19937_64& rng, Scores& s, Labels& y, bool ties) {
  std::uniform_int_distribution<std::size_t> len(1, 50);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> level(0, 5);
  const std::size_t n = len(rng);
  const double rate = u(rng);
  s.resize(n);
  y.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    s[i] = ties ? level(rng) / 5.0 : u(rng);
    y[i] = u(rng) < rate ? 1 : 0;
  }
}

}  // namespace

TEST(AveragePrecision, WorkedExamples) {
  EXPECT_NEAR(*average_precision(Scores{0.9, 0.8, 0.7}, Labels{1, 0, 1}), (1.0 + 2.0 / 3.0) / 2.0, 1e-15);
  EXPECT_EQ(*average_precision(Scores{0.9, 0.8, 0.2, 0.1}, Labels{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(*average_precision(Scores{0.9, 0.8, 0.7, 0.1}, Labels{0, 0, 0, 1}), 0.25);
  EXPECT_FALSE(average_precision(Scores{0.9, 0.1}, Labels{0, 0}));
  // one threshold: AP is the prevalence
  EXPECT_DOUBLE_EQ(*average_precision(Scores{0.5, 0.5, 0.5, 0.5}, Labels{1, 0, 0, 0}), 0.25);
  EXPECT_THROW(average_precision(Scores{0.5}, Labels{1, 0}), InputError);
}

TEST(Auroc, WorkedExamples) {
  EXPECT_EQ(*auroc(Scores{0.9, 0.8, 0.7}, Labels{1, 0, 1}), 0.5);
  EXPECT_EQ(*auroc(Scores{0.9, 0.8, 0.2, 0.1}, Labels{1, 1, 0, 0}), 1.0);
  EXPECT_EQ(*auroc(Scores{0.3, 0.3, 0.3, 0.3}, Labels{1, 0, 1, 0}), 0.5);
  EXPECT_FALSE(auroc(Scores{0.9, 0.1}, Labels{1, 1}));
}

TEST(Metrics, MatchBruteForceOracles) {
  std::mt19937_64 rng(1);
  Scores s;
  Labels y;
  std::size_t compared = 0;
  for (int k = 0; k < 1000; ++k) {
    random_instance(rng, s, y, k % 2 == 1);
    const auto ap = average_precision(s, y), ref_ap = brute_ap(s, y);
    ASSERT_EQ(ap.has_value(), ref_ap.has_value());
    if (ap) {
      EXPECT_NEAR(*ap, *ref_ap, 1e-9);
      ++compared;
    }
    const auto auc = auroc(s, y), ref_auc = brute_auroc(s, y);
    ASSERT_EQ(auc.has_value(), ref_auc.has_value());
    if (auc) {
      EXPECT_NEAR(*auc, *ref_auc, 1e-9);
    }
  }
  EXPECT_GT(compared, 800u);
}

TEST(Metrics, InvariantUnderIncreasingTransforms) {
  std::mt19937_64 rng(2);
  Scores s, t1, t2;
  Labels y;
  for (int k = 0; k < 200; ++k) {
    random_instance(rng, s, y, k % 2 == 1);
    t1 = s;
    t2 = s;
    for (auto& v : t1) v = std::exp(v);
    for (auto& v : t2) v = 3.0 * v - 7.0;
    const auto ap = average_precision(s, y);
    if (ap) {
      EXPECT_NEAR(*average_precision(t1, y), *ap, 1e-12);
      EXPECT_NEAR(*average_precision(t2, y), *ap, 1e-12);
    }
    if (const auto auc = auroc(s, y)) {
      EXPECT_NEAR(*auroc(t1, y), *auc, 1e-12);
      EXPECT_NEAR(*auroc(t2, y), *auc, 1e-12);
    }
  }
}

TEST(Auroc, ComplementWithoutTies) {
  std::mt19937_64 rng(3);
  Scores s, neg;
  Labels y;
  for (int k = 0; k < 200; ++k) {
    random_instance(rng, s, y, false);
    neg = s;
    for (auto& v : neg) v = -v;
    if (const auto a = auroc(s, y)) {
      EXPECT_NEAR(*a + *auroc(neg, y), 1.0, 1e-12);
    }
  }
}

TEST(Evaluate, OraclePredictionsScorePerfectly) {
  const auto spec = testutil::small_spec(60, 8);
  const auto d = generate_synthetic(spec, 4);
  std::vector<std::vector<double>> pred;
  for (const auto& s : d.train.studies) pred.push_back(s.labels.values);
  const auto r = evaluate(pred, labels_of(d.train), compute_prevalence(d.train), d.train.label_names);
  EXPECT_EQ(r.mAP, 1.0);
  EXPECT_EQ(r.macro_auroc, 1.0);
  EXPECT_TRUE(r.skipped_classes.empty());
}

TEST(Evaluate, NullDistribution) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const std::size_t n = 10000, q = 4;
  std::vector<std::vector<double>> pred(n, std::vector<double>(q));
  std::vector<LabelVector> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& p : pred[i]) p = u(rng);
    for (std::size_t c = 0; c < q; ++c) labels[i].values.push_back(double((i + c) % 2));
    labels[i].mask.assign(q, 1);
  }
  const auto r = evaluate(pred, labels, ungrouped(q), std::vector<std::string>(q, "c"));
  EXPECT_NEAR(r.macro_auroc, 0.5, 0.02);
  EXPECT_NEAR(r.mAP, 0.5, 0.02);
}

TEST(Evaluate, LongTailGroupsAndSkippedClasses) {
  const auto& names = long_tail_label_names();
  const auto prev = PrevalenceTable::from_prevalence(long_tail_nominal_prevalence());
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> pred(40, std::vector<double>(26));
  std::vector<LabelVector> labels(40);
  for (std::size_t i = 0; i < 40; ++i) {
    for (auto& p : pred[i]) p = u(rng);
    for (std::size_t c = 0; c < 26; ++c) labels[i].values.push_back(c == 25 ? 0.0 : double(i % 3 == 0));
    labels[i].mask.assign(26, 1);
  }
  const auto r = evaluate(pred, labels, prev, names);
  std::size_t groups[3] = {0, 0, 0};
  for (const auto& c : r.per_class) ++groups[int(c.group)];
  EXPECT_EQ(groups[0], 8u);
  EXPECT_EQ(groups[1], 10u);
  EXPECT_EQ(groups[2], 8u);
  // class 25 has no positives: skipped for both metrics, not zero-filled
  ASSERT_EQ(r.skipped_classes.size(), 2u);
  EXPECT_EQ(r.skipped_classes[0].name, names[25]);
  EXPECT_FALSE(r.per_class[25].ap);
  double sum = 0;
  for (std::size_t c = 0; c < 25; ++c) sum += *r.per_class[c].ap;
  EXPECT_NEAR(r.mAP, sum / 25.0, 1e-12);
  for (Group g : {Group::head, Group::body, Group::tail}) EXPECT_TRUE(r.group_mean(g));
}

TEST(Evaluate, IgnoresUnmaskedEntriesAndStudyOrder) {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> level(0, 4);
  const std::size_t n = 80, q = 3;
  std::vector<std::vector<double>> pred(n, std::vector<double>(q));
  std::vector<LabelVector> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& p : pred[i]) p = level(rng) / 4.0;  // many ties
    for (std::size_t c = 0; c < q; ++c) {
      labels[i].values.push_back(double(u(rng) < 0.4));
      labels[i].mask.push_back(u(rng) < 0.7);
    }
  }
  const std::vector<std::string> names = {"a", "b", "c"};
  const auto base = evaluate(pred, labels, ungrouped(q), names);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  auto p2 = pred;
  auto l2 = labels;
  for (std::size_t i = 0; i < n; ++i) p2[i] = pred[perm[i]], l2[i] = labels[perm[i]];
  const auto shuffled = evaluate(p2, l2, ungrouped(q), names);
  EXPECT_NEAR(shuffled.mAP, base.mAP, 1e-12);
  EXPECT_NEAR(shuffled.macro_auroc, base.macro_auroc, 1e-12);
  // scores of unmasked entries do not matter
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < q; ++c)
      if (!labels[i].mask[c]) pred[i][c] = 99.0;
  EXPECT_NEAR(evaluate(pred, labels, ungrouped(q), names).mAP, base.mAP, 1e-12);
}

TEST(Evaluate, ReportJsonInvariants) {
  const auto spec = testutil::small_spec(40, 8);
  const auto d = generate_synthetic(spec, 9);
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<std::vector<double>> pred(d.train.size(), std::vector<double>(8));
  for (auto& row : pred)
    for (auto& p : row) p = u(rng);
  const auto r = evaluate(pred, labels_of(d.train), compute_prevalence(d.train), d.train.label_names);
  const auto j = nlohmann::json::parse(r.to_json().dump());
  ASSERT_EQ(j.at("per_class").size(), 8u);
  double sum = 0;
  for (const auto& c : j.at("per_class")) {
    const double ap = c.at("ap").get<double>(), auc = c.at("auroc").get<double>();
    EXPECT_GE(ap, 0.0);
    EXPECT_LE(ap, 1.0);
    EXPECT_GE(auc, 0.0);
    EXPECT_LE(auc, 1.0);
    EXPECT_LE(c.at("positives").get<std::size_t>(), c.at("count").get<std::size_t>());
    sum += ap;
  }
  EXPECT_NEAR(j.at("mAP").get<double>(), sum / 8.0, 1e-12);
  EXPECT_TRUE(j.at("group_map").contains("head"));
  EXPECT_TRUE(j.at("skipped_classes").is_array());
  std::ostringstream table;
  r.print(table);
  EXPECT_NE(table.str().find("mAP"), std::string::npos);
}

TEST(Evaluate, AllClassesSkippedIsAnError) {
  std::vector<LabelVector> labels(3, LabelVector{{0.0}, {1}, LabelKind::hard});
  EXPECT_THROW(evaluate({{0.1}, {0.2}, {0.3}}, labels, ungrouped(1), {"a"}), InputError);
}
