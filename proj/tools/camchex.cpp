// camchex: generate synthetic data, train the pipeline stages, evaluate.
//
// Exit codes: 0 success, 2 config/input error, 3 missing prerequisite,
// 4 numerical failure.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "camchex/camchex.hpp"

namespace fs = std::filesystem;
using namespace camchex;
using json = nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// Run manifest

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InputError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string hex(const unsigned char* d, unsigned n) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (unsigned i = 0; i < n; ++i) s += digits[d[i] >> 4], s += digits[d[i] & 15];
  return s;
}

std::string sha1(const std::string& data) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
  EVP_DigestUpdate(ctx, data.data(), data.size());
  EVP_DigestFinal_ex(ctx, md, &len);
  EVP_MD_CTX_free(ctx);
  return hex(md, len);
}

/// Same digest `git hash-object` gives the file.
std::string git_blob_hash(const fs::path& p) {
  const std::string body = read_file(p);
  return sha1("blob " + std::to_string(body.size()) + '\0' + body);
}

struct RunManifest {
  std::string command;
  json config = json::object();
  std::uint64_t seed = 0;
  std::vector<fs::path> inputs;
  fs::path out;

  void write(const std::vector<std::string>& argv) const {
    json hashes = json::object();
    std::string all;
    for (const auto& p : inputs) {
      const auto h = git_blob_hash(p);
      hashes[p.string()] = h;
      all += h;
    }
    const json j = {{"command", command},         {"argv", argv},
                    {"config", config},           {"seed", seed},
                    {"input_hashes", hashes},     {"inputs_hash", sha1("blob " + std::to_string(all.size()) + '\0' + all)},
                    {"output_directory", out.string()}};
    std::ofstream(out / "run_manifest.json", std::ios::binary) << j.dump(2) << '\n';
  }
};

// ---------------------------------------------------------------------------
// Data directory

struct DataDir {
  fs::path root;
  fs::path manifest(const std::string& split) const { return root / (split + ".jsonl"); }
  fs::path vocab() const { return root / "vocab.txt"; }

  Dataset load(const std::string& split) const {
    const auto p = manifest(split);
    if (!fs::exists(p)) throw MissingDependency("data split missing: " + p.string());
    return parse_manifest(p);
  }
};

// ---------------------------------------------------------------------------
// Configuration

struct Resolved {
  ArchConfig arch;
  TrainConfig train;
  Modalities modalities;
  std::string preset = "desk";
  std::string ablation_name = "full";
  json to_json() const {
    json j = {{"preset", preset}, {"arch", arch.to_json()}, {"train", train.to_json()},
              {"modalities", modalities_to_json(modalities)}};
    j["ablation"] = ablation_name;
    return j;
  }
};

/// Preset, then the config file, then command-line overrides.
Resolved resolve_config(const std::string& config_path, const std::string& preset, const std::string& ablation_flag,
                        std::optional<std::uint64_t> seed) {
  Resolved r;
  json file = json::object();
  if (!config_path.empty()) {
    try {
      file = json::parse(read_file(config_path));
    } catch (const json::exception& e) {
      throw InputError("config " + config_path + ": " + e.what());
    }
  }
  r.preset = !preset.empty() ? preset : file.value("preset", std::string("desk"));
  if (r.preset == "desk") {
    r.arch = ArchConfig::desk();
    r.train = TrainConfig::desk();
  } else if (r.preset == "paper") {
    r.arch = ArchConfig::paper();
    r.train = TrainConfig::paper();
  } else {
    throw InputError("unknown preset '" + r.preset + "' (expected desk or paper)");
  }
  if (file.contains("arch")) r.arch = ArchConfig::from_json(file.at("arch"), r.arch);
  r.train = TrainConfig::from_json(file.contains("train") ? file.at("train") : file, r.train);
  if (!ablation_flag.empty()) {
    r.modalities = ablation(ablation_flag);
    r.ablation_name = ablation_flag;
  } else if (file.contains("ablation")) {
    r.ablation_name = file.at("ablation").get<std::string>();
    r.modalities = ablation(r.ablation_name);
  } else {
    r.modalities = modalities_from_json(file);
    r.ablation_name = "custom";
    for (const auto& n : ablation_names())
      if (ablation(n) == r.modalities) r.ablation_name = n;
  }
  if (seed) r.train.seed = *seed;
  return r;
}

/// Fits class count, vocabulary and input size to the data.
void fit_arch_to_data(ArchConfig& arch, const Dataset& d, const Vocabulary& vocab) {
  arch.num_classes = d.num_classes();
  arch.vocab_size = std::max<std::size_t>(vocab.size(), 2);
  for (const auto& s : d.studies)
    for (const auto& im : s.images)
      if (im.height != arch.resolution || im.width != arch.resolution || im.channels != arch.image_channels)
        throw InputError("images of " + std::to_string(im.height) + "x" + std::to_string(im.width) +
                         " do not match the configured resolution " + std::to_string(arch.resolution));
  arch.validate();
}

Vocabulary load_vocab(const DataDir& dir) {
  if (!fs::exists(dir.vocab())) throw MissingDependency("vocabulary missing: " + dir.vocab().string());
  return Vocabulary::load(dir.vocab());
}

Checkpoint new_checkpoint(const std::string& kind, const ArchConfig& arch, const Dataset& d, const Vocabulary& vocab,
                          const Resolved& cfg) {
  Checkpoint ck;
  ck.kind = kind;
  ck.arch = arch;
  ck.label_names = d.label_names;
  ck.vocab = vocab.tokens();
  ck.meta = {{"config", cfg.to_json()}};
  return ck;
}

/// Stage-1 model (encoder + head) stored under `prefix`.
Stage1Model<float> load_stage1(const Checkpoint& ck, const std::string& prefix) {
  Rng rng(0);
  auto m = Stage1Model<float>::init(ck.arch, rng);
  restore_model(ck, prefix, m);
  return m;
}

void write_log(const fs::path& out, const std::vector<EpochLog>& log) { write_training_log(out / "training_log.csv", log); }

EpochHook progress(const std::string& tag) {
  return [tag](const std::vector<EpochLog>& logs) {
    for (const auto& l : logs)
      std::fprintf(stderr, "[%s] epoch %zu %s loss %.5f mAP %.4f lr %.3g\n", tag.c_str(), l.epoch, l.split.c_str(),
                   l.loss, l.mAP.value_or(-1.0), l.lr);
    return true;
  };
}

void prefix_logs(std::vector<EpochLog>& all, const std::vector<EpochLog>& logs, const std::string& prefix) {
  for (auto l : logs) {
    l.split = prefix + l.split;
    all.push_back(std::move(l));
  }
}

// ---------------------------------------------------------------------------
// Commands

int cmd_generate(const std::string& spec_path, const fs::path& out, std::uint64_t seed,
                 const std::vector<std::string>& argv) {
  json j;
  try {
    j = json::parse(read_file(spec_path));
  } catch (const json::exception& e) {
    throw InputError("spec " + spec_path + ": " + e.what());
  }
  const auto spec = SynthSpec::from_json(j);
  const auto data = generate_synthetic(spec, seed);
  fs::create_directories(out);
  write_manifest(data.train, out / "train.jsonl");
  write_manifest(data.val, out / "val.jsonl");
  write_manifest(data.test, out / "test.jsonl");
  write_manifest(data.pool, out / "pool.jsonl");
  data.vocab.save(out / "vocab.txt");
  RunManifest rm{"generate", {{"spec", spec.to_json()}}, seed, {spec_path}, out};
  rm.write(argv);
  std::printf("wrote %zu/%zu/%zu/%zu studies to %s\n", data.train.size(), data.val.size(), data.test.size(),
              data.pool.size(), out.string().c_str());
  return 0;
}

struct TrainArgs {
  std::string stage, config, preset, ablation, teacher, base, encoders;
  fs::path data, out;
  std::optional<std::uint64_t> seed;
  bool fresh_encoders = false;
};

int cmd_train(const TrainArgs& a, const std::vector<std::string>& argv) {
  auto cfg = resolve_config(a.config, a.preset, a.ablation, a.seed);
  const DataDir dir{a.data};
  RunManifest rm{"train " + a.stage, {}, cfg.train.seed, {}, a.out};
  if (!a.config.empty()) rm.inputs.push_back(a.config);

  // prerequisites first, so a missing one fails before any work
  std::optional<Checkpoint> prereq;
  auto need = [&](const std::string& path, const std::string& what) {
    if (path.empty()) throw MissingDependency(a.stage + " requires " + what);
    prereq = load_checkpoint(path);
    rm.inputs.push_back(path);
  };
  if (a.stage == "finetune_views") need(a.base, "--base <stage1 or noisy_student checkpoint>");
  if (a.stage == "stage2" && !a.fresh_encoders)
    need(a.encoders, "--encoders <views checkpoint> (or --fresh-encoders)");
  if (a.stage == "noisy_student" && !a.teacher.empty()) need(a.teacher, "--teacher");

  const auto train = dir.load("train");
  const auto vocab = load_vocab(dir);
  rm.inputs.push_back(dir.manifest("train"));
  rm.inputs.push_back(dir.vocab());
  fit_arch_to_data(cfg.arch, train, vocab);
  if (prereq && prereq->label_names != train.label_names)
    throw InputError("checkpoint labels do not match the training data");
  std::optional<Dataset> val;
  if (fs::exists(dir.manifest("val"))) {
    val = dir.load("val");
    rm.inputs.push_back(dir.manifest("val"));
    if (val->size() == 0) val.reset();
  }
  fs::create_directories(a.out);
  rm.config = cfg.to_json();

  if (a.stage == "stage1") {
    Stage1Options<float> opt;
    opt.val = val ? &*val : nullptr;
    opt.on_epoch = progress("stage1");
    auto r = train_stage1<float>(train, cfg.arch, cfg.train, opt);
    auto ck = new_checkpoint("stage1", cfg.arch, train, vocab, cfg);
    store_model(ck, "live", r.live);
    store_model(ck, "ema", r.ema);
    save_checkpoint(a.out / "stage1.ckpt", ck);
    write_log(a.out, r.trace.log);
  } else if (a.stage == "noisy_student") {
    Dataset pool;
    pool.split = Split::unlabeled_pool;
    pool.label_names = train.label_names;
    if (fs::exists(dir.manifest("pool"))) {
      pool = dir.load("pool");
      rm.inputs.push_back(dir.manifest("pool"));
    }
    std::optional<Stage1Model<float>> teacher;
    if (prereq) teacher = load_stage1(*prereq, cfg.train.pseudo_label_from_ema ? "ema" : "live");
    auto r = noisy_student_loop<float>(train, pool, cfg.arch, cfg.train, teacher ? &*teacher : nullptr,
                                       progress("noisy_student"));
    std::vector<EpochLog> log;
    auto save_round = [&](Stage1Result<float>& s, const std::string& name) {
      auto ck = new_checkpoint("noisy_student", cfg.arch, train, vocab, cfg);
      store_model(ck, "live", s.live);
      store_model(ck, "ema", s.ema);
      save_checkpoint(a.out / name, ck);
    };
    save_round(r.teacher0, "round0_teacher.ckpt");
    prefix_logs(log, r.teacher0.trace.log, "round0/");
    for (std::size_t i = 0; i < r.students.size(); ++i) {
      save_round(r.students[i], "round" + std::to_string(i + 1) + "_student.ckpt");
      prefix_logs(log, r.students[i].trace.log, "round" + std::to_string(i + 1) + "/");
    }
    save_round(r.students.back(), "noisy_student.ckpt");
    write_log(a.out, log);
  } else if (a.stage == "finetune_views") {
    if (prereq->kind != "stage1" && prereq->kind != "noisy_student")
      throw InputError("--base must be a stage1 or noisy_student checkpoint, got " + prereq->kind);
    cfg.arch = prereq->arch;
    const auto base = load_stage1(*prereq, "ema");
    auto ck = new_checkpoint("views", cfg.arch, train, vocab, cfg);
    std::vector<EpochLog> log;
    for (View v : {View::frontal, View::lateral}) {
      const std::string name(view_name(v));
      const auto subset = view_subset(train, v);
      if (subset.size() == 0) {
        warn("no " + name + " images; " + name + " encoder is a copy of the base");
        auto copy = deep_copy(base);
        store_model(ck, name + "/live", copy);
        store_model(ck, name + "/ema", copy);
        continue;
      }
      auto r = finetune_view_encoder<float>(base, subset, cfg.arch, cfg.train, progress(name));
      store_model(ck, name + "/live", r.live);
      store_model(ck, name + "/ema", r.ema);
      prefix_logs(log, r.trace.log, name + "/");
    }
    save_checkpoint(a.out / "views.ckpt", ck);
    write_log(a.out, log);
  } else if (a.stage == "stage2") {
    Stage2Options<float> opt;
    opt.modalities = cfg.modalities;
    opt.val = val ? &*val : nullptr;
    opt.on_epoch = progress("stage2");
    std::optional<Stage1Model<float>> ef, el;
    if (prereq) {
      if (prereq->kind != "views") throw InputError("--encoders must be a views checkpoint, got " + prereq->kind);
      const std::string which = cfg.train.stage2_init_from_ema ? "/ema" : "/live";
      const auto& ea = prereq->arch;
      if (ea.stage_channels != cfg.arch.stage_channels || ea.resolution != cfg.arch.resolution ||
          ea.image_channels != cfg.arch.image_channels || ea.mlp_ratio != cfg.arch.mlp_ratio)
        throw InputError("views checkpoint encoder architecture differs from the stage-2 configuration");
      Rng rng(0);
      ef = Stage1Model<float>::init(prereq->arch, rng);
      el = Stage1Model<float>::init(prereq->arch, rng);
      restore_model(*prereq, "frontal" + which, *ef);
      restore_model(*prereq, "lateral" + which, *el);
      opt.frontal = &ef->encoder;
      opt.lateral = &el->encoder;
    }
    auto r = train_stage2<float>(train, vocab, cfg.arch, cfg.train, opt);
    auto ck = new_checkpoint("stage2", cfg.arch, train, vocab, cfg);
    ck.meta["modalities"] = modalities_to_json(cfg.modalities);
    ck.meta["view_cap"] = cfg.train.view_cap;
    ck.meta["eval_seed"] = cfg.train.eval_seed;
    store_model(ck, "live", r.live);
    store_model(ck, "ema", r.ema);
    save_checkpoint(a.out / "stage2.ckpt", ck);
    write_log(a.out, r.trace.log);
  } else {
    throw InputError("unknown stage '" + a.stage + "'");
  }
  rm.write(argv);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, manifest, train_manifest;
  fs::path out;
  bool use_live = false;
};

int cmd_evaluate(const EvalArgs& a, const std::vector<std::string>& argv) {
  const auto ck = load_checkpoint(a.checkpoint);
  const auto data = parse_manifest(a.manifest);
  if (data.num_classes() != ck.arch.num_classes)
    throw InputError("manifest has " + std::to_string(data.num_classes()) + " classes, checkpoint expects " +
                     std::to_string(ck.arch.num_classes));
  RunManifest rm{"evaluate", {}, 0, {a.checkpoint, a.manifest}, a.out};

  fs::path train_path = a.train_manifest;
  if (train_path.empty()) {
    train_path = fs::path(a.manifest).parent_path() / "train.jsonl";
    if (!fs::exists(train_path)) {
      warn("no training manifest found; grouping classes by the evaluated split's prevalence");
      train_path = a.manifest;
    }
  }
  const auto prev = compute_prevalence(parse_manifest(train_path));
  if (train_path != fs::path(a.manifest)) rm.inputs.push_back(train_path);
  const std::string weights = a.use_live ? "live" : "ema";

  std::vector<std::vector<double>> probs;
  if (ck.kind == "stage2") {
    Rng rng(0);
    auto m = CamchexModel<float>::init(ck.arch, rng);
    restore_model(ck, weights, m);
    m.modalities = modalities_from_json(ck.meta.value("modalities", json::object()));
    const auto vocab = Vocabulary::from_tokens(ck.vocab);
    const std::size_t cap = ck.meta.value("view_cap", ck.arch.view_cap);
    const std::uint64_t eval_seed = ck.meta.value("eval_seed", TrainConfig{}.eval_seed);
    rm.seed = eval_seed;
    probs = logits_to_probs(predict_stage2_logits(m, data, vocab, cap, ck.arch.max_tokens, eval_seed));
  } else if (ck.kind == "stage1" || ck.kind == "noisy_student") {
    probs = predict_stage1(load_stage1(ck, weights), data);
  } else {
    throw InputError("cannot evaluate a '" + ck.kind + "' checkpoint; use its stage1 base or a stage2 model");
  }
  const auto report = evaluate(probs, labels_of(data), prev, data.label_names);

  fs::create_directories(a.out);
  {
    std::ofstream csv(a.out / "predictions.csv", std::ios::binary);
    csv << "study_id";
    for (const auto& n : data.label_names) csv << ',' << n;
    csv << '\n';
    char b[32];
    for (std::size_t i = 0; i < data.size(); ++i) {
      csv << data.studies[i].study_id;
      for (double p : probs[i]) {
        std::snprintf(b, sizeof b, ",%.6f", p);
        csv << b;
      }
      csv << '\n';
    }
  }
  json j = report.to_json();
  j["weights"] = weights;
  j["checkpoint_kind"] = ck.kind;
  std::ofstream(a.out / "metrics.json", std::ios::binary) << j.dump(2) << '\n';
  report.print(std::cout);
  rm.config = {{"weights", weights}, {"checkpoint_kind", ck.kind}, {"train_manifest", train_path.string()}};
  rm.write(argv);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"CaMCheX desk-scale pipeline"};
  app.require_subcommand(1);

  std::string spec_path;
  fs::path gen_out;
  std::uint64_t gen_seed = 0;
  auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
  gen->add_option("--spec", spec_path, "synthetic spec JSON")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--seed", gen_seed, "generator seed");

  TrainArgs ta;
  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", ta.stage, "stage1 | noisy_student | finetune_views | stage2")
      ->required()
      ->check(CLI::IsMember({"stage1", "noisy_student", "finetune_views", "stage2"}));
  train->add_option("--config", ta.config, "JSON config");
  train->add_option("--data", ta.data, "directory with train/val/pool manifests and vocab.txt")->required();
  train->add_option("--out", ta.out, "output directory")->required();
  train->add_option("--seed", ta.seed, "overrides the config seed");
  train->add_option("--preset", ta.preset, "desk | paper")->check(CLI::IsMember({"desk", "paper"}));
  train->add_option("--ablation", ta.ablation, "single_view | ci_only | vs_only | multi_view | mv_ci | full")
      ->check(CLI::IsMember(ablation_names()));
  train->add_flag("--fresh-encoders", ta.fresh_encoders, "stage2: initialise image encoders from scratch");
  train->add_option("--teacher", ta.teacher, "noisy_student: initial teacher checkpoint");
  train->add_option("--base", ta.base, "finetune_views: stage1 or noisy_student checkpoint");
  train->add_option("--encoders", ta.encoders, "stage2: views checkpoint");

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "score a manifest and report metrics");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--manifest", ea.manifest)->required();
  ev->add_option("--out", ea.out)->required();
  ev->add_option("--train-manifest", ea.train_manifest, "split whose prevalence defines head/body/tail");
  auto* use_ema = ev->add_flag("--use-ema", "evaluate the EMA weights (default)");
  ev->add_flag("--use-live", ea.use_live, "evaluate the live weights")->excludes(use_ema);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  try {
    if (*gen) return cmd_generate(spec_path, gen_out, gen_seed, args);
    if (*train) return cmd_train(ta, args);
    if (*ev) return cmd_evaluate(ea, args);
  } catch (const MissingDependency& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
