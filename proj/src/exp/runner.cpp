#include <algorithm>
#include <cstdlib>
#include <random>

#include "modnet/error.hpp"
#include "modnet/exp/experiment.hpp"
#include "modnet/nn/checkpoint.hpp"

namespace modnet::exp {

namespace {

constexpr const char* kDone = "DONE";

void note(const RunOptions& opt, const std::string& line) {
  if (opt.log) *opt.log << line << std::endl;
}

std::string seed_dir_name(std::uint64_t seed) { return "seed-" + std::to_string(seed); }

// Rejects an existing experiment directory whose config differs from `cfg`.
void claim_experiment_dir(const fs::path& dir, const ExperimentConfig& cfg) {
  const auto path = dir / "config.json";
  const auto want = cfg.identity();
  if (fs::exists(path)) {
    if (io::read_json(path) != want)
      throw ConfigError("config hash collision: " + dir.string() + " holds a different config");
    return;
  }
  io::write_json(path, want);
}

struct CachedStage1 {
  mrm::Params params;
  io::json report;
};

// Stage 1 depends only on the data, the objective and the training schedule,
// so methods that share those reuse one trained network.
CachedStage1 cached_stage1(const ExperimentConfig& cfg, std::uint64_t seed, const mrm::Model& model,
                           const mrm::StageData& data, const mrm::MrmConfig& mc, const RunOptions& opt) {
  io::json key = {{"dataset", cfg.dataset.to_json()},
                  {"objective", mc.objective.to_json()},
                  {"model_optimizer", mrm::optimizer_to_json(mc.model_optimizer)},
                  {"batch_size", mc.batch_size},
                  {"n1", mc.n1},
                  {"eval_every", mc.eval_every},
                  {"widths", mc.net.widths},
                  {"seed", seed}};
  const auto dir = opt.out_root / "stage1" / io::fnv1a_hex(key.dump());
  if (!opt.force && fs::exists(dir / kDone)) {
    if (io::read_json(dir / "key.json") != key) throw ConfigError("stage-1 cache collision in " + dir.string());
    note(opt, "  stage1 reused from " + dir.string());
    auto ck = nn::load_checkpoint<float>(dir / "checkpoint");
    return {std::move(ck.params), io::read_json(dir / "report.json")};
  }
  auto s1 = mrm::stage1_train(model.arch, model.init, data, mc);
  fs::remove(dir / kDone);
  io::write_json(dir / "key.json", key);
  nn::save_checkpoint(s1.params, dir / "checkpoint", seed);
  auto rj = s1.report.to_json();
  io::write_json(dir / "report.json", rj);
  io::write_text(dir / kDone, "");
  note(opt, "  stage1 trained in " + std::to_string(s1.report.seconds) + " s");
  return {std::move(s1.params), std::move(rj)};
}

std::optional<double> opt_number(const io::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

struct Outcome {
  io::json stages = io::json::object();
  io::json final_stage;
  std::string final_name = "stage1";
  std::optional<mask::BinaryMask> mask;
  std::optional<mask::MaskLogits<float>> logits;
  std::optional<mrm::Params> params;
  std::optional<double> stage1_test;
  std::optional<double> no_stage3_test;
  std::vector<std::pair<std::string, std::string>> curves;  // stage name, CSV
};

void add_stage(Outcome& o, const mrm::StageReport& r) {
  o.stages[r.stage] = r.to_json();
  o.curves.emplace_back(r.stage, mrm::curves_csv(r));
}

std::string curves_csv_from_json(const io::json& stage) {
  mrm::StageReport r;
  for (const auto& c : stage.at("curve"))
    r.curve.push_back({c.at("step").get<std::int64_t>(), c.at("split").get<std::string>(),
                       c.at("accuracy").get<double>(), c.at("loss").get<double>()});
  return mrm::curves_csv(r);
}

Outcome execute(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt) {
  const auto prepared = prepare_data(cfg.dataset, seed, opt.assets);
  const auto& data = prepared.stage;
  auto mc = cfg.mrm;
  mc.seed = seed;
  const auto model = mrm::make_model(data.train.front(), mc.net, seed);
  Outcome o;

  auto take_stage1 = [&](Outcome& out) {
    auto s1 = cached_stage1(cfg, seed, model, data, mc, opt);
    out.stages["stage1"] = s1.report;
    out.curves.emplace_back("stage1", curves_csv_from_json(s1.report));
    out.stage1_test = opt_number(s1.report, "test_accuracy");
    return std::move(s1.params);
  };
  auto retrain = [&](const mask::BinaryMask& m, const std::string& name) {
    auto s3 = mrm::stage3_retrain(model.arch, model.init, m, data, mc);
    s3.report.stage = name;
    add_stage(o, s3.report);
    o.final_stage = s3.report.to_json();
    o.final_name = name;
    o.mask = m;
    o.params = std::move(s3.params);
  };

  switch (cfg.method) {
    case Method::erm:
    case Method::irm:
    case Method::rex:
    case Method::dro:
    case Method::unbias: {
      o.params = take_stage1(o);
      o.final_stage = o.stages["stage1"];
      break;
    }
    case Method::mrm:
    case Method::mod_irm:
    case Method::mod_rex:
    case Method::mod_dro: {
      if (!cfg.forced_mask.empty()) {
        retrain(mask::import_mask(cfg.forced_mask).as_binary(), "stage3");
        break;
      }
      const auto trained = take_stage1(o);
      auto s2 = mrm::stage2_probe(model.arch, trained, data, mc);
      if (data.eval) o.no_stage3_test = mrm::evaluate(model.arch, s2.params, &s2.mask, *data.eval).accuracy;
      add_stage(o, s2.report);
      o.logits = std::move(s2.logits);
      if (cfg.retrain) {
        retrain(s2.mask, "stage3");
      } else {
        o.final_stage = o.stages["stage2"];
        o.final_name = "stage2";
        o.mask = std::move(s2.mask);
        o.params = std::move(s2.params);
      }
      break;
    }
    case Method::oracle: {
      if (!prepared.probe) throw ConfigError("the oracle needs the out-domain in-split");
      const auto trained = take_stage1(o);
      auto s2 = mrm::oracle_probe(model.arch, trained, *prepared.probe, mc);
      add_stage(o, s2.report);
      o.logits = std::move(s2.logits);
      retrain(s2.mask, "stage3");
      break;
    }
    case Method::rand_whole:
    case Method::rand_layer: {
      // keep ratios come from the MRM mask of the same config and seed
      auto ref_cfg = cfg;
      ref_cfg.method = Method::mrm;
      ref_cfg.normalize();
      auto ref_opt = opt;
      ref_opt.force = false;
      const auto ref = run_seed(ref_cfg, seed, ref_opt);
      const auto reference = mask::import_mask(ref.run_dir / "mask").as_binary();
      o.stage1_test = ref.stage1_test_accuracy;
      std::mt19937_64 rng(data::derive_seed(seed, 0x7a4d));
      const double ratio = static_cast<double>(reference.ones()) / static_cast<double>(reference.total());
      auto whole = mask::random_mask_global(reference.names, reference.shapes(), ratio, rng);
      if (cfg.method == Method::rand_whole) {
        retrain(whole, "rand_whole");
      } else {
        retrain(mask::random_mask_layerwise(reference, rng), "rand_layer");
      }
      break;
    }
    case Method::magnitude: {
      const auto trained = take_stage1(o);
      retrain(mask::magnitude_mask(trained, cfg.target_keep_ratio), "magnitude");
      break;
    }
    case Method::joint_prune: {
      take_stage1(o);
      auto pr = mrm::joint_prune(model, data, mc, cfg.target_keep_ratio, cfg.prune_max_steps);
      pr.prune.stage = "joint_prune";
      add_stage(o, pr.prune);
      o.stages["joint_prune"]["reached"] = pr.reached;
      o.stages["joint_prune"]["prune_steps"] = pr.steps;
      pr.retrain.report.stage = "stage3";
      add_stage(o, pr.retrain.report);
      o.final_stage = pr.retrain.report.to_json();
      o.final_name = "stage3";
      o.mask = std::move(pr.mask);
      o.params = std::move(pr.retrain.params);
      break;
    }
  }
  return o;
}

double mean_of(const io::json& arr) {
  double s = 0;
  for (const auto& v : arr) s += v.get<double>();
  return arr.empty() ? 0.0 : s / static_cast<double>(arr.size());
}

}  // namespace

fs::path run_dir(const RunOptions& opt, const ExperimentConfig& cfg, std::uint64_t seed) {
  return opt.out_root / cfg.hash() / seed_dir_name(seed);
}

SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt) {
  cfg.validate();
  const auto exp_dir = opt.out_root / cfg.hash();
  claim_experiment_dir(exp_dir, cfg);
  const auto dir = exp_dir / seed_dir_name(seed);
  if (!opt.force && fs::exists(dir / kDone)) {
    note(opt, to_string(cfg.method) + " seed " + std::to_string(seed) + ": reusing " + dir.string());
    auto r = SeedResult::from_json(io::read_json(dir / "result.json"));
    r.run_dir = dir;
    r.reused = true;
    return r;
  }
  note(opt, to_string(cfg.method) + " seed " + std::to_string(seed) + " -> " + dir.string());
  fs::remove(dir / kDone);
  auto o = execute(cfg, seed, opt);

  SeedResult r;
  r.seed = seed;
  r.run_dir = dir;
  r.stages = o.stages;
  r.final_stage = o.final_name;
  r.train_accuracy = mean_of(o.final_stage.at("train_accuracy"));
  const char* key = cfg.reporting == Reporting::last_step ? "test_accuracy" : "best_test_accuracy";
  r.test_accuracy = opt_number(o.final_stage, key).value_or(0.0);
  r.keep_ratio = o.mask ? mask::keep_ratio(*o.mask) : 1.0;
  r.stage1_test_accuracy = o.stage1_test;
  r.no_stage3_test_accuracy = o.no_stage3_test;

  const mask::MaskMeta meta{seed, cfg.hash() + "/" + seed_dir_name(seed)};
  for (const auto& [stage, csv] : o.curves) io::write_text(dir / "curves" / (stage + ".csv"), csv);
  if (o.mask) mask::export_mask(*o.mask, dir / "mask", meta);
  if (o.logits) mask::export_logits(*o.logits, dir / "logits", meta);
  if (o.params) nn::save_checkpoint(*o.params, dir / "checkpoint", seed);
  io::write_json(dir / "result.json", r.to_json());
  io::write_text(dir / kDone, "");
  note(opt, "  train " + std::to_string(r.train_accuracy) + " test " + std::to_string(r.test_accuracy) + " keep " +
                std::to_string(r.keep_ratio));
  return r;
}

ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opt) {
  cfg.validate();
  ExperimentReport rep;
  rep.config = cfg;
  for (auto s : cfg.seeds()) rep.seeds.push_back(run_seed(cfg, s, opt));
  io::write_json(opt.out_root / cfg.hash() / "report.json", rep.to_json());
  return rep;
}

AblationResult run_ablation_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt) {
  if (cfg.dataset.generator != "full_colored_mnist") throw ConfigError("ablations need the biased environments");
  auto with_method = [&](Method m) {
    auto c = cfg;
    c.method = m;
    c.retrain = true;
    c.forced_mask.clear();
    c.normalize();
    return c;
  };
  const auto erm_cfg = with_method(Method::erm);
  const auto dir = opt.out_root / ("ablation-" + erm_cfg.hash()) / seed_dir_name(seed);
  if (!opt.force && fs::exists(dir / kDone)) {
    note(opt, "ablation seed " + std::to_string(seed) + ": reusing " + dir.string());
    auto r = AblationResult::from_json(io::read_json(dir / "result.json"));
    r.run_dir = dir;
    return r;
  }
  auto dep_opt = opt;
  dep_opt.force = false;
  const auto erm = run_seed(erm_cfg, seed, dep_opt);
  const auto oracle = run_seed(with_method(Method::oracle), seed, dep_opt);
  const auto mrm_run = run_seed(with_method(Method::mrm), seed, dep_opt);
  note(opt, "ablation seed " + std::to_string(seed) + " -> " + dir.string());
  fs::remove(dir / kDone);

  auto mc = cfg.mrm;
  mc.seed = seed;
  mc.objective.kind = risk::ObjectiveKind::erm;
  const auto prepared = prepare_data(cfg.dataset, seed, opt.assets);
  const auto model = mrm::make_model(prepared.stage.train.front(), mc.net, seed);
  std::uint64_t fresh = data::derive_seed(seed, 0x4e17);
  if (fresh == seed) ++fresh;
  const auto oracle_mask = mask::import_mask(oracle.run_dir / "mask").as_binary();
  auto reinit = mrm::ablation_reinit(model, prepared.stage, mc, oracle_mask, fresh);

  auto rebias_cfg = cfg.dataset;
  rebias_cfg.mapping = data::rearrange_bias(cfg.dataset.bias_spec(), data::derive_seed(seed, 0x2eb1)).mapping;
  const auto rebiased = prepare_data(rebias_cfg, seed, opt.assets);
  const auto mrm_mask = mask::import_mask(mrm_run.run_dir / "mask").as_binary();
  auto rebias = mrm::ablation_rebias(model, rebiased.stage, mc, mrm_mask);

  AblationResult r;
  r.seed = seed;
  r.erm = erm.test_accuracy;
  r.oracle = oracle.test_accuracy;
  r.mrm = mrm_run.test_accuracy;
  r.reinit = reinit.report.test_accuracy.value_or(0.0);
  r.rebias = rebias.report.test_accuracy.value_or(0.0);
  r.run_dir = dir;
  io::write_text(dir / "curves" / "ablation_reinit.csv", mrm::curves_csv(reinit.report));
  io::write_text(dir / "curves" / "ablation_rebias.csv", mrm::curves_csv(rebias.report));
  auto j = r.to_json();
  j["stages"] = {{"ablation_reinit", reinit.report.to_json()}, {"ablation_rebias", rebias.report.to_json()}};
  j["rebias_mapping"] = rebias_cfg.mapping;
  j["reinit_seed"] = fresh;
  io::write_json(dir / "result.json", j);
  io::write_text(dir / kDone, "");
  return r;
}

io::json AblationResult::to_json() const {
  return {{"seed", seed},     {"erm", erm},       {"oracle", oracle},        {"mrm", mrm},
          {"reinit", reinit}, {"rebias", rebias}, {"run_dir", run_dir.string()}};
}

AblationResult AblationResult::from_json(const io::json& j) {
  try {
    AblationResult r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.erm = j.at("erm").get<double>();
    r.oracle = j.at("oracle").get<double>();
    r.mrm = j.at("mrm").get<double>();
    r.reinit = j.at("reinit").get<double>();
    r.rebias = j.at("rebias").get<double>();
    r.run_dir = j.value("run_dir", std::string());
    return r;
  } catch (const io::json::exception& e) {
    throw FormatError(std::string("ablation result: ") + e.what());
  }
}

std::vector<ExperimentReport> collect_reports(const fs::path& out_root) {
  std::vector<ExperimentReport> out;
  if (!fs::is_directory(out_root)) return out;
  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(out_root))
    if (e.is_directory() && fs::exists(e.path() / "config.json")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  for (const auto& d : dirs) {
    ExperimentReport rep;
    rep.config = ExperimentConfig::from_json(io::read_json(d / "config.json"));
    std::vector<fs::path> seed_dirs;
    for (const auto& e : fs::directory_iterator(d))
      if (e.is_directory() && e.path().filename().string().starts_with("seed-") && fs::exists(e.path() / kDone))
        seed_dirs.push_back(e.path());
    std::sort(seed_dirs.begin(), seed_dirs.end(), [](const fs::path& a, const fs::path& b) {
      return std::stoull(a.filename().string().substr(5)) < std::stoull(b.filename().string().substr(5));
    });
    for (const auto& sd : seed_dirs) {
      auto r = SeedResult::from_json(io::read_json(sd / "result.json"));
      r.run_dir = sd;
      r.reused = true;
      rep.seeds.push_back(std::move(r));
    }
    rep.config.num_seeds = std::max<std::size_t>(1, rep.seeds.size());
    if (!rep.seeds.empty()) out.push_back(std::move(rep));
  }
  return out;
}

io::json SeedResult::to_json() const {
  io::json j = {{"seed", seed},
                {"train_accuracy", train_accuracy},
                {"test_accuracy", test_accuracy},
                {"keep_ratio", keep_ratio},
                {"final_stage", final_stage},
                {"run_dir", run_dir.string()},
                {"stages", stages}};
  j["stage1_test_accuracy"] = stage1_test_accuracy ? io::json(*stage1_test_accuracy) : io::json(nullptr);
  j["no_stage3_test_accuracy"] = no_stage3_test_accuracy ? io::json(*no_stage3_test_accuracy) : io::json(nullptr);
  return j;
}

SeedResult SeedResult::from_json(const io::json& j) {
  try {
    SeedResult r;
    r.seed = j.at("seed").get<std::uint64_t>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.keep_ratio = j.at("keep_ratio").get<double>();
    r.final_stage = j.value("final_stage", std::string("stage1"));
    r.run_dir = j.value("run_dir", std::string());
    r.stages = j.value("stages", io::json::object());
    r.stage1_test_accuracy = opt_number(j, "stage1_test_accuracy");
    r.no_stage3_test_accuracy = opt_number(j, "no_stage3_test_accuracy");
    return r;
  } catch (const io::json::exception& e) {
    throw FormatError(std::string("seed result: ") + e.what());
  }
}

namespace {

template <typename F>
Summary summarize_by(const std::vector<SeedResult>& seeds, F f) {
  std::vector<double> v;
  for (const auto& s : seeds) v.push_back(f(s));
  return summarize(v);
}

}  // namespace

Summary ExperimentReport::train() const {
  return summarize_by(seeds, [](const SeedResult& s) { return s.train_accuracy; });
}

Summary ExperimentReport::test() const {
  return summarize_by(seeds, [](const SeedResult& s) { return s.test_accuracy; });
}

io::json ExperimentReport::to_json() const {
  io::json per_seed = io::json::array();
  for (const auto& s : seeds) {
    auto j = s.to_json();
    j.erase("stages");
    per_seed.push_back(std::move(j));
  }
  const auto tr = train(), te = test();
  return {{"config", config.to_json()},
          {"config_hash", config.hash()},
          {"seeds", per_seed},
          {"train", {{"mean", tr.mean}, {"std", tr.std}}},
          {"test", {{"mean", te.mean}, {"std", te.std}}}};
}

}  // namespace modnet::exp
