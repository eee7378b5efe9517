#include <gtest/gtest.h>

#include <unistd.h>

#include "test_util.hpp"

using namespace camchex;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("camchex_ckpt_" + std::to_string(::getpid()));
  fs::create_directories(dir);
  return dir / name;
}

template <class M>
std::vector<double> flat_params(M& m) {
  std::vector<double> v;
  m.visit([&](const std::string&, auto& t) { v.insert(v.end(), t.data().begin(), t.data().end()); }, "");
  return v;
}

}  // namespace

TEST(Checkpoint, RoundTripsDoublePrecisionExactly) {
  auto arch = ArchConfig::desk();
  arch.num_classes = 5;
  Rng a(1), b(2);
  auto saved = CamchexModel<double>::init(arch, a);
  Checkpoint ck;
  ck.kind = "stage2";
  ck.arch = arch;
  ck.label_names = {"a", "b", "c", "d", "e"};
  ck.vocab = {"[CLS]", "[UNK]", "cough"};
  ck.meta = {{"seed", 3}};
  ck.double_precision = true;
  store_model(ck, "model", saved);
  save_checkpoint(scratch("f64.ckpt"), ck);

  const auto back = load_checkpoint(scratch("f64.ckpt"));
  EXPECT_EQ(back.kind, "stage2");
  EXPECT_EQ(back.label_names, ck.label_names);
  EXPECT_EQ(back.vocab, ck.vocab);
  EXPECT_EQ(back.meta.at("seed"), 3);
  EXPECT_EQ(back.arch.to_json(), arch.to_json());
  EXPECT_TRUE(back.has_prefix("model"));
  EXPECT_FALSE(back.has_prefix("mod"));
  auto loaded = CamchexModel<double>::init(arch, b);
  restore_model(back, "model", loaded);
  EXPECT_EQ(flat_params(loaded), flat_params(saved));
}

TEST(Checkpoint, SinglePrecisionKeepsFloatModelsExact) {
  const auto arch = testutil::small_arch(4, 20);
  Rng a(3), b(4);
  auto saved = Stage1Model<float>::init(arch, a);
  Checkpoint ck;
  ck.kind = "stage1";
  ck.arch = arch;
  ck.label_names = {"w", "x", "y", "z"};
  store_model(ck, "ema", saved);
  save_checkpoint(scratch("f32.ckpt"), ck);
  auto loaded = Stage1Model<float>::init(arch, b);
  restore_model(load_checkpoint(scratch("f32.ckpt")), "ema", loaded);
  EXPECT_EQ(flat_params(loaded), flat_params(saved));
  std::mt19937_64 rng(5);
  const auto im = testutil::random_image(View::frontal, 32, rng);
  EXPECT_EQ(to_doubles(stage1_forward(loaded, im)), to_doubles(stage1_forward(saved, im)));
}

TEST(Checkpoint, Errors) {
  EXPECT_THROW(load_checkpoint(scratch("absent.ckpt")), MissingDependency);
  {
    std::ofstream out(scratch("junk.ckpt"), std::ios::binary);
    out << "not a checkpoint at all";
  }
  EXPECT_THROW(load_checkpoint(scratch("junk.ckpt")), InputError);

  auto arch = testutil::small_arch(4, 20);
  Rng a(6);
  auto m = Stage1Model<float>::init(arch, a);
  Checkpoint ck;
  ck.arch = arch;
  store_model(ck, "live", m);
  arch.num_classes = 6;
  auto other = Stage1Model<float>::init(arch, a);
  EXPECT_THROW(restore_model(ck, "live", other), InputError);
  EXPECT_THROW(restore_model(ck, "ema", m), InputError);

  // truncated tensor data
  ck.kind = "stage1";
  save_checkpoint(scratch("cut.ckpt"), ck);
  fs::resize_file(scratch("cut.ckpt"), fs::file_size(scratch("cut.ckpt")) - 4);
  EXPECT_THROW(load_checkpoint(scratch("cut.ckpt")), InputError);
}
