#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "test_util.hpp"

using namespace camchex;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("camchex_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::size_t count_of(const std::string& s, const std::string& needle) {
  std::size_t n = 0;
  for (auto pos = s.find(needle); pos != std::string::npos; pos = s.find(needle, pos + needle.size())) ++n;
  return n;
}

Study study_with_views(std::size_t n, std::mt19937_64& rng) {
  Study s;
  s.study_id = "s";
  std::vector<int> acq(n);
  std::iota(acq.begin(), acq.end(), 0);
  std::shuffle(acq.begin(), acq.end(), rng);
  for (std::size_t i = 0; i < n; ++i)
    s.images.push_back(testutil::random_image(i % 3 == 2 ? View::lateral : View::frontal, 8, rng, acq[i]));
  s.labels.values = {0.0};
  s.labels.mask = {1};
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Vitals rendering

TEST(VitalsText, ReproducesStudy50000766) {
  VitalSigns v{97.9, 109.0, 22.0, 94.0, 136.0, 54.0, Gender::female};
  EXPECT_EQ(render_vitals_text(v),
            "Temperature: 97.9 | Heart rate: 109.0 | Respiratory rate: 22.0 | O2 Saturation: 94.0 | "
            "Systolic BP: 136.0 | Diastolic BP: 54.0 | Gender: F");
}

TEST(VitalsText, ReproducesStudy50000801) {
  VitalSigns v{98.8, 70.0, 18.0, 100.0, 99.0, 56.0, Gender::male};
  EXPECT_EQ(render_vitals_text(v),
            "Temperature: 98.8 | Heart rate: 70.0 | Respiratory rate: 18.0 | O2 Saturation: 100.0 | "
            "Systolic BP: 99.0 | Diastolic BP: 56.0 | Gender: M");
}

TEST(VitalsText, AbsentFieldsRenderAsNA) {
  EXPECT_EQ(render_vitals_text(VitalSigns{}),
            "Temperature: NA | Heart rate: NA | Respiratory rate: NA | O2 Saturation: NA | Systolic BP: NA | "
            "Diastolic BP: NA | Gender: NA");
}

TEST(VitalsText, AlwaysSixSeparators) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.1, 250.0);
  std::bernoulli_distribution present(0.6);
  for (int k = 0; k < 500; ++k) {
    VitalSigns v;
    for (auto* f : {&v.temperature, &v.heart_rate, &v.respiratory_rate, &v.o2_saturation, &v.systolic_bp,
                    &v.diastolic_bp})
      if (present(rng)) *f = u(rng);
    v.gender = static_cast<Gender>(k % 3);
    EXPECT_EQ(count_of(render_vitals_text(v), " | "), 6u);
  }
}

// ---------------------------------------------------------------------------
// Tokenizer

TEST(Tokenizer, LooksUpWordsAndPunctuation) {
  const Vocabulary vocab({"shortness", "of", "breath", "."});
  const auto ids = tokenize(vocab, "shortness of breath .");
  const std::vector<std::size_t> want = {kClsId, vocab.id("shortness"), vocab.id("of"), vocab.id("breath"),
                                         vocab.id(".")};
  EXPECT_EQ(ids, want);
  EXPECT_EQ(vocab.id("shortness"), 2u);
  EXPECT_EQ(tokenize(vocab, "Breath, cough")[1], vocab.id("breath"));
  EXPECT_EQ(tokenize(vocab, "Breath, cough")[3], kUnkId);
}

TEST(Tokenizer, EmptyTextIsClsOnly) {
  const Vocabulary vocab;
  EXPECT_EQ(tokenize(vocab, ""), (std::vector<std::size_t>{kClsId}));
}

TEST(Tokenizer, TruncatesToMaxLength) {
  const Vocabulary vocab({"word"});
  std::string text;
  for (int i = 0; i < 100; ++i) text += "word ";
  const auto ids = tokenize(vocab, text, 64);
  EXPECT_EQ(ids.size(), 64u);
  EXPECT_EQ(ids.front(), kClsId);
  EXPECT_EQ(tokenize(vocab, "word word", 64).size(), 3u);
}

TEST(Tokenizer, VocabularyFileRoundTrip) {
  const auto dir = scratch_dir("vocab");
  const Vocabulary v({"alpha", "beta", "."});
  v.save(dir / "vocab.txt");
  const auto back = Vocabulary::load(dir / "vocab.txt");
  EXPECT_EQ(back.tokens(), v.tokens());
  EXPECT_EQ(back.tokens()[0], "[CLS]");
  EXPECT_EQ(back.tokens()[1], "[UNK]");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// View cap

TEST(ViewCap, SmallStudiesPassThrough) {
  std::mt19937_64 rng(1);
  const auto s = study_with_views(2, rng);
  Rng r(5);
  const auto kept = subsample_views(s, 4, r);
  ASSERT_EQ(kept.size(), 2u);
  // acquisition order, not storage order
  const bool swapped = s.images[0].acquisition_index > s.images[1].acquisition_index;
  EXPECT_EQ(kept[0], s.images[swapped ? 1 : 0]);
  EXPECT_EQ(kept[1], s.images[swapped ? 0 : 1]);
}

TEST(ViewCap, FixedSeedGivesTheSameSubset) {
  std::mt19937_64 rng(2);
  const auto s = study_with_views(6, rng);
  Rng a(77), b(77);
  const auto first = subsample_view_indices(s, 4, a);
  EXPECT_EQ(first.size(), 4u);
  EXPECT_EQ(first, subsample_view_indices(s, 4, b));
}

TEST(ViewCap, KeepsAcquisitionOrderWithoutDuplicates) {
  std::mt19937_64 rng(3);
  Rng r(4);
  for (int k = 0; k < 300; ++k) {
    const std::size_t n = 1 + k % kMaxStudyImages;
    const auto s = study_with_views(n, rng);
    for (bool strat : {false, true}) {
      const auto idx = subsample_view_indices(s, 4, r, strat);
      EXPECT_EQ(idx.size(), std::min<std::size_t>(n, 4));
      EXPECT_EQ(std::set<std::size_t>(idx.begin(), idx.end()).size(), idx.size());
      for (std::size_t i = 1; i < idx.size(); ++i)
        EXPECT_LT(s.images[idx[i - 1]].acquisition_index, s.images[idx[i]].acquisition_index);
      if (strat && n > 4) {
        bool has_lat = false;
        for (auto i : idx) has_lat = has_lat || s.images[i].view == View::lateral;
        EXPECT_TRUE(has_lat);
      }
    }
  }
}

TEST(ViewCap, MimicLikeTailFraction) {
  const auto p = mimic_like_view_count_probs();
  double tail = 0.0, total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    total += p[i];
    if (i + 1 > 4) tail += p[i];
  }
  EXPECT_NEAR(total, 1.0, 1e-12);
  EXPECT_NEAR(tail, 191.0 / 227827.0, 1e-15);

  // empirical: studies touched by the cap in a generated corpus
  SynthSpec spec = testutil::small_spec(60000, 8);
  spec.n_val = spec.n_test = 0;
  spec.view_count_probs = p;
  const auto data = generate_synthetic(spec, 11);
  std::size_t affected = 0;
  for (const auto& s : data.train.studies) affected += s.images.size() > 4 ? 1 : 0;
  const double expected = 60000.0 * 191.0 / 227827.0;  // about 50
  EXPECT_NEAR(double(affected), expected, 4.0 * std::sqrt(expected));
}

// ---------------------------------------------------------------------------
// Prevalence

TEST(Prevalence, GroupThresholds) {
  Dataset d;
  d.label_names = {"a", "b", "c"};
  for (int i = 0; i < 200; ++i) {
    Study s;
    s.study_id = std::to_string(i);
    s.labels.values = {i < 15 ? 1.0 : 0.0, i < 5 ? 1.0 : 0.0, 0.0};
    // the first two classes are supervised for 100 studies only
    s.labels.mask = {std::uint8_t(i < 100), std::uint8_t(i < 100), 1};
    d.studies.push_back(s);
  }
  const auto t = compute_prevalence(d);
  EXPECT_DOUBLE_EQ(t.prevalence[0], 0.15);
  EXPECT_DOUBLE_EQ(t.prevalence[1], 0.05);
  EXPECT_DOUBLE_EQ(t.prevalence[2], 0.0);
  EXPECT_EQ(t.group[0], Group::head);
  EXPECT_EQ(t.group[1], Group::body);
  EXPECT_EQ(t.group[2], Group::tail);
  EXPECT_EQ(group_for_prevalence(0.10), Group::body);
  EXPECT_EQ(group_for_prevalence(0.01), Group::body);
  EXPECT_EQ(group_for_prevalence(0.0099), Group::tail);
}

TEST(Prevalence, LongTailVocabularyMatchesPublishedGroups) {
  const std::set<std::string> head = {"Atelectasis", "Cardiomegaly", "Edema", "Lung Opacity", "No Finding",
                                      "Pleural Effusion", "Pneumonia", "Support Devices"};
  const std::set<std::string> body = {"Calcification of the Aorta", "Consolidation", "Emphysema",
                                      "Enlarged Cardiomediastinum", "Fracture", "Hernia", "Infiltration", "Mass",
                                      "Nodule", "Pneumothorax"};
  const std::set<std::string> tail = {"Fibrosis", "Lung Lesion", "Pleural Other", "Pleural Thickening",
                                      "Pneumomediastinum", "Pneumoperitoneum", "Subcutaneous Emphysema",
                                      "Tortuous Aorta"};
  const auto& names = long_tail_label_names();
  ASSERT_EQ(names.size(), 26u);
  const auto t = PrevalenceTable::from_prevalence(long_tail_nominal_prevalence());
  std::size_t counts[3] = {0, 0, 0};
  for (std::size_t c = 0; c < names.size(); ++c) {
    const auto& want = t.group[c] == Group::head ? head : t.group[c] == Group::body ? body : tail;
    EXPECT_TRUE(want.count(names[c])) << names[c] << " landed in " << group_name(t.group[c]);
    ++counts[int(t.group[c])];
  }
  EXPECT_EQ(counts[0], 8u);
  EXPECT_EQ(counts[1], 10u);
  EXPECT_EQ(counts[2], 8u);
}

TEST(Prevalence, UndefinedWithoutLabels) {
  Dataset d;
  d.label_names = {"a"};
  Study s;
  s.labels.values = {0.0};
  s.labels.mask = {0};
  d.studies.push_back(s);
  EXPECT_THROW(compute_prevalence(d), InputError);
}

// ---------------------------------------------------------------------------
// Manifest

TEST(Manifest, RoundTripIsLossless) {
  SynthSpec spec = testutil::small_spec(30, 16);
  spec.missing_indication = 0.3;
  spec.missing_vitals = 0.3;
  spec.missing_vitals_field = 0.2;
  spec.n_pool = 12;
  spec.pool_labeled_classes = {0, 3};
  const auto data = generate_synthetic(spec, 5);
  const auto dir = scratch_dir("manifest");
  for (const auto* d : {&data.train, &data.pool}) {
    const auto path = dir / (std::string(d == &data.pool ? "pool" : "train") + ".jsonl");
    write_manifest(*d, path);
    const auto back = parse_manifest(path);
    EXPECT_TRUE(back == *d);
  }
  // soft labels and absent fields survive too
  Dataset soft = data.pool;
  soft.split = Split::train;
  soft.studies[0].labels.values[1] = 0.123456789012345;
  soft.studies[0].labels.mask[1] = 1;
  soft.studies[0].labels.kind = LabelKind::soft_pseudo;
  soft.studies[1].vitals.reset();
  soft.studies[1].indication.reset();
  write_manifest(soft, dir / "train.jsonl");
  EXPECT_TRUE(parse_manifest(dir / "train.jsonl") == soft);
  fs::remove_all(dir);
}

TEST(Manifest, ParsesOptionalFields) {
  const auto dir = scratch_dir("fields");
  std::mt19937_64 rng(1);
  write_image_sidecar(dir / "a.cxr", testutil::random_image(View::frontal, 8, rng));
  write_image_sidecar(dir / "b.cxr", testutil::random_image(View::frontal, 8, rng));
  {
    std::ofstream out(dir / "test.jsonl");
    out << R"({"study_id":"x","images":[{"view":"frontal","path":"a.cxr","acq":0},{"view":"lateral","path":"b.cxr","acq":1}],)"
        << R"("indication":"cough .","vitals":{"temperature":98.1,"heart_rate":80,"gender":"M"},"labels":[1,0],"mask":[true,true]})"
        << "\n";
    out << R"({"study_id":"y","images":[{"view":"frontal","path":"a.cxr","acq":0}],"labels":[0,1],"mask":[true,false]})"
        << "\n";
  }
  const auto d = parse_manifest(dir / "test.jsonl");
  EXPECT_EQ(d.split, Split::test);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d.studies[0].images.size(), 2u);
  EXPECT_EQ(d.studies[0].images[1].view, View::lateral);
  ASSERT_TRUE(d.studies[0].indication && d.studies[0].vitals);
  EXPECT_EQ(*d.studies[0].vitals->heart_rate, 80.0);
  EXPECT_FALSE(d.studies[0].vitals->respiratory_rate);
  EXPECT_EQ(d.studies[0].labels.kind, LabelKind::hard);
  EXPECT_FALSE(d.studies[1].vitals);
  EXPECT_FALSE(d.studies[1].indication);
  EXPECT_EQ(d.studies[1].labels.mask, (std::vector<std::uint8_t>{1, 0}));
  fs::remove_all(dir);
}

TEST(Manifest, ErrorsNameTheLine) {
  const auto dir = scratch_dir("errors");
  std::mt19937_64 rng(1);
  write_image_sidecar(dir / "a.cxr", testutil::random_image(View::frontal, 8, rng));
  const std::string good =
      R"({"study_id":"A","images":[{"view":"frontal","path":"a.cxr","acq":0}],"labels":[1,0],"mask":[true,true]})";
  auto expect_error = [&](const std::string& second, const std::string& fragment) {
    {
      std::ofstream out(dir / "train.jsonl");
      out << good << "\n" << second << "\n";
    }
    try {
      parse_manifest(dir / "train.jsonl");
      ADD_FAILURE() << "no error for " << second;
    } catch (const InputError& e) {
      const std::string msg = e.what();
      EXPECT_NE(msg.find("train.jsonl:2:"), std::string::npos) << msg;
      EXPECT_NE(msg.find(fragment), std::string::npos) << msg;
    }
  };
  expect_error(good, "duplicate study_id");
  expect_error("{not json", "malformed");
  expect_error(R"({"study_id":"B","images":[{"view":"oblique","path":"a.cxr","acq":0}],"labels":[1,0],"mask":[true,true]})",
               "oblique");
  expect_error(R"({"study_id":"B","images":[{"view":"frontal","path":"a.cxr","acq":0}],"labels":[1],"mask":[true]})",
               "Q=2");
  expect_error(R"({"study_id":"B","images":[{"view":"frontal","path":"a.cxr","acq":0}],"labels":[0.5,0],"mask":[true,true]})",
               "hard label");
  expect_error(R"({"study_id":"B","images":[],"labels":[1,0],"mask":[true,true]})", "no images");
  expect_error(R"({"study_id":"B","images":[{"view":"frontal","path":"missing.cxr","acq":0}],"labels":[1,0],"mask":[true,true]})",
               "missing.cxr");
  fs::remove_all(dir);
}

// ---------------------------------------------------------------------------
// Synthetic generator

TEST(Synthetic, SameSeedIsBitIdentical) {
  const auto spec = testutil::small_spec(40, 16);
  const auto a = generate_synthetic(spec, 3), b = generate_synthetic(spec, 3), c = generate_synthetic(spec, 4);
  EXPECT_TRUE(a.train == b.train && a.val == b.val && a.test == b.test);
  EXPECT_EQ(a.vocab.tokens(), b.vocab.tokens());
  EXPECT_FALSE(a.train == c.train);
}

TEST(Synthetic, PrevalenceWithinBinomialTolerance) {
  SynthSpec spec = testutil::small_spec(2000, 8);
  spec.prevalence.assign(8, 0.10);
  spec.n_val = spec.n_test = 0;
  for (std::uint64_t seed : {1, 2}) {
    const auto d = generate_synthetic(spec, seed);
    const auto t = compute_prevalence(d.train);
    for (double p : t.prevalence) EXPECT_NEAR(p, 0.10, 0.02);
  }
}

TEST(Synthetic, SignalsFollowTheRouting) {
  SynthSpec spec = testutil::small_spec(200, 16);
  spec.missing_indication = 0.0;
  spec.missing_vitals = 0.0;
  const auto d = generate_synthetic(spec, 8);
  const auto& kw = synth_detail::keywords();
  // text classes (5, 6) and the multi class (4) mention their keyword exactly when positive
  for (const auto& s : d.train.studies) {
    const auto words = split_words(*s.indication);
    for (std::size_t c : {4u, 5u, 6u}) {
      const bool mentioned = std::find(words.begin(), words.end(), kw[c]) != words.end();
      EXPECT_EQ(mentioned, s.labels.values[c] == 1.0);
    }
  }
  // the vitals class shifts O2 saturation down
  double pos = 0, neg = 0;
  std::size_t np = 0, nn = 0;
  for (const auto& s : d.train.studies) {
    const double o2 = *s.vitals->o2_saturation;
    if (s.labels.values[7] == 1.0) pos += o2, ++np;
    else neg += o2, ++nn;
  }
  ASSERT_GT(np, 10u);
  EXPECT_LT(pos / np, neg / nn - 3.0);
}

TEST(Synthetic, LongTailSpecUsesTheFixedVocabulary) {
  const auto spec = SynthSpec::from_json({{"label_names", "long_tail"}, {"n_train", 4}, {"resolution", 16}});
  EXPECT_EQ(spec.label_names, long_tail_label_names());
  EXPECT_EQ(spec.label_names.front(), "Atelectasis");
  EXPECT_EQ(spec.label_names.back(), "Tortuous Aorta");
  EXPECT_THROW(SynthSpec::from_json({{"q", 2}, {"prevalence", {0.5}}}), InputError);
  EXPECT_THROW(SynthSpec::from_json({{"q", 2}, {"prevalence", 0.3}, {"routing", "telepathy"}}), InputError);
}

TEST(Synthetic, PoolIsUnlabeledExceptConfiguredClasses) {
  SynthSpec spec = testutil::small_spec(4, 8);
  spec.n_pool = 20;
  spec.pool_labeled_classes = {2};
  const auto d = generate_synthetic(spec, 1);
  EXPECT_EQ(d.pool.split, Split::unlabeled_pool);
  for (const auto& s : d.pool.studies)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(s.labels.mask[c], c == 2 ? 1 : 0);
}
