#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>

#include "modnet/error.hpp"
#include "modnet/exp/experiment.hpp"
#include "modnet/linear/theory.hpp"

using namespace modnet;
namespace fs = std::filesystem;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string preset;
  std::string out = "runs";
  bool force = false;
};

io::json load_config_json(const Flags& f) {
  io::json j = io::json::object();
  if (!f.config.empty()) j = io::read_json(f.config);
  if (!j.is_object()) throw ConfigError(f.config + ": expected a JSON object");
  if (!f.preset.empty()) j["preset"] = f.preset;
  if (f.seed) {
    j["base_seed"] = *f.seed;
    j["num_seeds"] = 1;
  }
  return j;
}

exp::RunOptions run_options(const Flags& f) {
  exp::RunOptions o;
  o.out_root = f.out;
  o.assets = exp::Assets::from_environment();
  o.force = f.force;
  o.log = &std::cerr;
  return o;
}

// Applies `fallback` when the config names no method, and rejects methods outside `allowed`.
exp::ExperimentConfig config_for(io::json j, exp::Method fallback, const std::set<exp::Method>& allowed,
                                 const std::string& command) {
  if (!j.contains("method")) j["method"] = exp::to_string(fallback);
  auto cfg = exp::ExperimentConfig::from_json(j);
  if (!allowed.count(cfg.method))
    throw ConfigError("'" + command + "' does not run method " + exp::to_string(cfg.method));
  return cfg;
}

void print_summary(const exp::ExperimentReport& r) {
  const auto tr = r.train(), te = r.test();
  std::printf("%-12s train %.2f +- %.2f  test %.2f +- %.2f  (%zu seeds, %s)\n", exp::to_string(r.config.method).c_str(),
              100 * tr.mean, 100 * tr.std, 100 * te.mean, 100 * te.std, r.seeds.size(), r.config.hash().c_str());
}

fs::path write_tables(const std::vector<exp::ExperimentReport>& reports, const fs::path& dir, const std::string& name) {
  exp::emit_table(reports, exp::TableFormat::csv, dir / (name + ".csv"));
  exp::emit_table(reports, exp::TableFormat::markdown, dir / (name + ".md"));
  std::cout << exp::render_table(reports, exp::TableFormat::markdown);
  return dir / (name + ".md");
}

const std::set<exp::Method> kObjectives = {exp::Method::erm, exp::Method::irm, exp::Method::rex, exp::Method::dro,
                                           exp::Method::unbias};
const std::set<exp::Method> kMrmFamily = {exp::Method::mrm, exp::Method::mod_irm, exp::Method::mod_rex,
                                          exp::Method::mod_dro};

exp::ExperimentReport run_method(exp::ExperimentConfig cfg, exp::Method m, const exp::RunOptions& o) {
  cfg.method = m;
  cfg.retrain = true;
  cfg.forced_mask.clear();
  cfg.normalize();
  auto r = exp::run_experiment(cfg, o);
  print_summary(r);
  return r;
}

void cmd_generate(const Flags& f) {
  const auto cfg = exp::ExperimentConfig::from_json(load_config_json(f));
  const auto assets = exp::Assets::from_environment();
  for (auto s : cfg.seeds()) std::cout << exp::generate_data(cfg.dataset, s, assets).string() << "\n";
}

void cmd_experiment(const Flags& f, const std::string& command) {
  auto j = load_config_json(f);
  const auto o = run_options(f);
  exp::ExperimentConfig cfg;
  if (command == "train") {
    cfg = config_for(j, exp::Method::erm, kObjectives, command);
  } else if (command == "probe") {
    j["retrain"] = false;
    cfg = config_for(j, exp::Method::mrm, kMrmFamily, command);
  } else if (command == "retrain") {
    if (!j.contains("forced_mask")) throw ConfigError("retrain needs \"forced_mask\" (an exported mask directory)");
    cfg = config_for(j, exp::Method::mrm, kMrmFamily, command);
  } else if (command == "mrm") {
    cfg = config_for(j, exp::Method::mrm, kMrmFamily, command);
  } else {
    j["method"] = "oracle";
    cfg = config_for(j, exp::Method::oracle, {exp::Method::oracle}, command);
  }
  const auto rep = exp::run_experiment(cfg, o);
  print_summary(rep);
  if (command == "probe") {
    for (const auto& s : rep.seeds) {
      const auto imported = mask::import_mask(s.run_dir / "logits");
      for (const auto& layer : imported.logits->names)
        exp::emit_mask_heatmap(*imported.logits, layer, s.run_dir / "heatmaps" / layer);
      std::printf("seed %llu keep ratio %.4f, heatmaps in %s\n", static_cast<unsigned long long>(s.seed), s.keep_ratio,
                  (s.run_dir / "heatmaps").string().c_str());
    }
  }
}

void cmd_baselines(const Flags& f) {
  const auto base = exp::ExperimentConfig::from_json(load_config_json(f));
  const auto o = run_options(f);
  std::vector<exp::ExperimentReport> reps;
  for (auto m : {exp::Method::erm, exp::Method::mrm, exp::Method::rand_whole, exp::Method::rand_layer})
    reps.push_back(run_method(base, m, o));
  write_tables(reps, o.out_root / "tables", "baselines-" + base.hash());
}

void cmd_ablate(const Flags& f) {
  const auto cfg = exp::ExperimentConfig::from_json(load_config_json(f));
  const auto o = run_options(f);
  io::json all = io::json::array();
  double erm = 0, oracle = 0, mrm = 0, reinit = 0, rebias = 0;
  for (auto s : cfg.seeds()) {
    const auto r = exp::run_ablation_seed(cfg, s, o);
    std::printf("seed %llu: ERM %.2f oracle %.2f MRM %.2f reinit(oracle mask) %.2f rebias(MRM mask) %.2f\n",
                static_cast<unsigned long long>(s), 100 * r.erm, 100 * r.oracle, 100 * r.mrm, 100 * r.reinit,
                100 * r.rebias);
    erm += r.erm;
    oracle += r.oracle;
    mrm += r.mrm;
    reinit += r.reinit;
    rebias += r.rebias;
    all.push_back(r.to_json());
  }
  const double n = static_cast<double>(cfg.num_seeds);
  const double erased = (oracle - reinit) / (oracle - erm);
  const double retained = (rebias / n - erm / n) / (mrm / n - erm / n);
  std::printf("reinit erases %.0f%% of the oracle-ERM gap; rebias retains %.0f%% of the MRM-ERM gap\n", 100 * erased,
              100 * retained);
  io::write_json(o.out_root / "tables" / ("ablation-" + cfg.hash() + ".json"),
                 {{"seeds", all}, {"reinit_gap_erased", erased}, {"rebias_gap_retained", retained}});
}

void cmd_prune(const Flags& f) {
  auto j = load_config_json(f);
  if (!j.contains("dataset")) j["dataset"] = {{"generator", "mnist"}, {"holdout_fraction", 0.2}};
  const auto base = exp::ExperimentConfig::from_json(j);
  const auto o = run_options(f);
  std::vector<exp::ExperimentReport> reps;
  for (auto m : {exp::Method::erm, exp::Method::joint_prune, exp::Method::magnitude})
    reps.push_back(run_method(base, m, o));
  write_tables(reps, o.out_root / "tables", "prune-" + base.hash());
}

void cmd_linear(const Flags& f) {
  const auto j = load_config_json(f);
  const auto lin = j.value("linear", io::json::object());
  auto as_list = [](const io::json& v) { return v.is_array() ? v : io::json::array({v}); };
  const auto cs = as_list(lin.value("c", io::json(0.4)));
  const auto Ds = as_list(lin.value("D", io::json(50)));
  const auto n = lin.value("n", std::size_t{1000});
  const auto delta = lin.value("delta", 0.1);
  const auto trials = lin.value("trials", std::size_t{200});
  linear::VerifyOptions vo;
  vo.mc_samples = lin.value("mc_samples", vo.mc_samples);
  if (lin.value("ties", std::string("error")) == "half") vo.ties = linear::TieRule::half;
  const std::uint64_t seed = f.seed.value_or(j.value("base_seed", std::uint64_t{0}));
  std::vector<linear::PropositionReport> reps;
  for (const auto& c : cs)
    for (const auto& D : Ds) {
      reps.push_back(linear::verify_proposition(c.get<double>(), D.get<std::size_t>(), n, delta, trials, seed, vo));
      const auto& r = reps.back();
      std::printf("c=%.3g D=%zu: sparse zero error %s, seen within bound %s, unseen %.4f %s, margin %s (%.0f%% wins)\n",
                  r.c, r.D, r.sparse_zero_error ? "yes" : "no", r.seen_within_bound ? "yes" : "no",
                  r.regular_unseen_err, r.unseen_near_half ? "ok" : "off", r.margin_holds ? "holds" : "fails",
                  100 * r.margin_win_fraction);
    }
  const auto path = fs::path(f.out) / "linear_check.csv";
  fs::create_directories(path.parent_path());
  linear::write_proposition_csv(reps, path);
  std::cout << path.string() << "\n";
}

void cmd_grid(const Flags& f) {
  const auto j = load_config_json(f);
  if (!j.contains("grid")) throw ConfigError("grid needs a \"grid\" block in the config");
  const auto base = exp::ExperimentConfig::from_json(j);
  const auto o = run_options(f);
  const auto g = exp::grid_search(base, exp::grid_from_json(j.at("grid")), o);
  const auto path = o.out_root / "tables" / ("grid-" + base.hash() + ".csv");
  io::write_text(path, g.csv);
  std::cout << g.csv;
  std::printf("best cell %zu: ", g.best);
  print_summary(g.cells[g.best]);
}

void cmd_report(const Flags& f) {
  const fs::path out = f.out;
  const auto reports = exp::collect_reports(out);
  if (reports.empty()) throw ConfigError("no completed runs under " + out.string());
  // one table per dataset; unbias rows join the table of the matching biased data
  std::map<std::string, std::vector<exp::ExperimentReport>> groups;
  for (const auto& r : reports) {
    auto key = r.config.dataset.to_json();
    key.erase("bias_coefficients");
    key["preset"] = exp::to_string(r.config.preset);
    auto& g = groups[key.dump()];
    const bool dup = std::any_of(g.begin(), g.end(), [&](const auto& o) { return o.config.method == r.config.method; });
    if (dup) {
      groups[key.dump() + "/" + r.config.hash()].push_back(r);
    } else {
      g.push_back(r);
    }
  }
  int k = 0;
  for (const auto& [key, reps] : groups) {
    const auto dir = out / "report" / ("table-" + std::to_string(k++));
    io::write_text(dir / "dataset.json", key + "\n");
    try {
      write_tables(reps, dir, "results");
    } catch (const ConfigError& e) {
      std::cerr << "skipping table " << dir << ": " << e.what() << "\n";
      continue;
    }
    try {
      exp::emit_curves(reps, dir / "curves");
    } catch (const ConfigError&) {
    }
    std::vector<exp::KeepRatioPoint> points;
    for (const auto& r : reps)
      if (kMrmFamily.count(r.config.method)) points.push_back({std::max(r.seeds.front().keep_ratio, 1e-12), r.test().mean});
    if (points.size() > 1) exp::emit_keep_ratio_plot(points, dir / "keep_ratio.svg");
  }
  for (const auto& r : reports) {
    if (r.seeds.empty() || !fs::exists(r.seeds.front().run_dir / "logits")) continue;
    const auto imported = mask::import_mask(r.seeds.front().run_dir / "logits");
    for (const auto& layer : imported.logits->names)
      exp::emit_mask_heatmap(*imported.logits, layer, r.seeds.front().run_dir / "heatmaps" / layer);
  }
  std::cout << "report written under " << (out / "report").string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Modular risk minimization experiments"};
  app.require_subcommand(1);
  Flags f;
  app.add_option("--config", f.config, "experiment config (JSON)")->check(CLI::ExistingFile);
  app.add_option("--seed", f.seed, "run this single seed");
  app.add_option("--preset", f.preset, "desk or paper")->check(CLI::IsMember({"desk", "paper"}));
  app.add_option("--out", f.out, "output root for run directories");
  app.add_flag("--force", f.force, "recompute completed runs");
  app.fallthrough();

  const std::vector<std::pair<std::string, std::string>> commands = {
      {"generate-data", "build and cache the datasets"},
      {"train", "stage 1 with ERM, IRM, REx, DRO or unbias"},
      {"probe", "stages 1-2: learn a subnetwork mask on frozen weights"},
      {"retrain", "stage 3 under an exported mask"},
      {"mrm", "all three stages"},
      {"oracle", "probe on the out-domain in-split, then retrain"},
      {"baselines", "ERM, MRM and random masks of equal keep ratio"},
      {"ablate", "re-initialization and re-biasing ablations"},
      {"prune", "joint pruning vs magnitude pruning vs dense"},
      {"linear-check", "verify the linear max-margin claims"},
      {"grid", "hyperparameter grid search"},
      {"report", "tables and plots from completed runs"}};
  for (const auto& [name, help] : commands) app.add_subcommand(name, help);

  CLI11_PARSE(app, argc, argv);
  const auto name = app.get_subcommands().front()->get_name();
  try {
    if (name == "generate-data") cmd_generate(f);
    else if (name == "train" || name == "probe" || name == "retrain" || name == "mrm" || name == "oracle")
      cmd_experiment(f, name);
    else if (name == "baselines") cmd_baselines(f);
    else if (name == "ablate") cmd_ablate(f);
    else if (name == "prune") cmd_prune(f);
    else if (name == "linear-check") cmd_linear(f);
    else if (name == "grid") cmd_grid(f);
    else cmd_report(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
