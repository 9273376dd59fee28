#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "modnet/data/biased.hpp"
#include "modnet/io.hpp"
#include "modnet/mrm/pipeline.hpp"

namespace modnet::exp {

namespace fs = std::filesystem;

enum class Method { erm, irm, rex, dro, mrm, mod_irm, mod_rex, mod_dro, oracle, rand_whole, rand_layer, magnitude,
                    joint_prune, unbias };

/// Table names: ERM, IRM, REx, DRO, MRM, ModIRM, ModREx, ModDRO, oracle, rand_whole, ...
std::string to_string(Method m);
Method method_from_string(const std::string& s);
const std::vector<Method>& all_methods();

/// Objective family a method trains with in every stage.
risk::ObjectiveKind objective_of(Method m);
/// Methods that end with a masked retrain from w_0.
bool is_modular(Method m);

enum class Reporting { last_step, oracle_validation };
std::string to_string(Reporting r);
Reporting reporting_from_string(const std::string& s);

enum class Preset { desk, paper };
std::string to_string(Preset p);
Preset preset_from_string(const std::string& s);

struct DatasetConfig {
  /// "full_colored_mnist" (three biased environments) or "mnist" (plain digits, one environment).
  std::string generator = "full_colored_mnist";
  std::vector<double> bias_coefficients{1.0, 0.9, 0.0};
  std::vector<int> mapping{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::size_t num_seen = 2;
  std::size_t limit = 0;  // source images used, 0 = all
  /// Share of the held-out pool given to the oracle in-split (full_colored_mnist)
  /// or to the test split (mnist).
  double holdout_fraction = 0.5;

  void validate() const;
  io::json to_json() const;
  /// Fields absent from `j` keep their value in `defaults`.
  static DatasetConfig from_json(const io::json& j, DatasetConfig defaults);
  data::BiasSpec bias_spec() const;
};

struct ExperimentConfig {
  Preset preset = Preset::desk;
  DatasetConfig dataset;
  Method method = Method::mrm;
  mrm::MrmConfig mrm;
  std::size_t num_seeds = 3;
  std::uint64_t base_seed = 0;
  Reporting reporting = Reporting::last_step;
  double target_keep_ratio = 0.1;  // magnitude and joint_prune
  std::int64_t prune_max_steps = 5000;
  /// MRM-family methods: false stops after the structure probe.
  bool retrain = true;
  /// MRM-family methods: retrain under this exported mask instead of probing.
  std::string forced_mask;

  /// Preset defaults for a method.
  static ExperimentConfig defaults(Preset preset, Method method = Method::mrm);
  /// Fields absent from `j` fall back to the defaults of j["preset"].
  static ExperimentConfig from_json(const io::json& j);
  io::json to_json() const;
  void validate() const;
  /// Forces the method's objective family and, for unbias, zero bias coefficients.
  void normalize();
  /// to_json() without the seed list; what a run directory is keyed on.
  io::json identity() const;
  /// FNV-1a of the canonical (key-sorted) identity.
  std::string hash() const;
  /// Seeds base_seed .. base_seed + num_seeds - 1.
  std::vector<std::uint64_t> seeds() const;
};

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation, 0 for one value
};

Summary summarize(const std::vector<double>& values);

struct SeedResult {
  std::uint64_t seed = 0;
  double train_accuracy = 0.0;  // mean over training environments, final stage
  double test_accuracy = 0.0;   // per the reporting mode
  double keep_ratio = 1.0;
  std::string final_stage;  // key into `stages` the accuracies come from
  std::optional<double> stage1_test_accuracy;
  std::optional<double> no_stage3_test_accuracy;
  fs::path run_dir;
  bool reused = false;
  io::json stages;  // stage name -> StageReport JSON

  io::json to_json() const;
  static SeedResult from_json(const io::json& j);
};

struct ExperimentReport {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;

  Summary train() const;
  Summary test() const;
  io::json to_json() const;
};

/// Where source images and cached datasets live.
struct Assets {
  fs::path data_dir;

  /// $MODNET_DATA_DIR, else ./data.
  static Assets from_environment();
  /// MNIST IDX files under data_dir or data_dir/mnist. Throws ConfigError when missing.
  data::GrayImages load_mnist() const;
  fs::path cache_dir(const DatasetConfig& d, std::uint64_t seed) const;
};

struct RunOptions {
  fs::path out_root = "runs";
  Assets assets;
  bool force = false;
  std::ostream* log = nullptr;
};

/// Training environments, the out-domain in-split and the evaluation split.
struct PreparedData {
  mrm::StageData stage;
  std::optional<data::EnvironmentDataset> probe;
  data::BiasSpec spec;
};

/// Builds the datasets for one seed, or loads them from the asset cache.
PreparedData prepare_data(const DatasetConfig& d, std::uint64_t seed, const Assets& assets,
                          const data::GrayImages* mnist = nullptr);

/// Writes the generated environments of one seed to the asset cache.
fs::path generate_data(const DatasetConfig& d, std::uint64_t seed, const Assets& assets);

/// Plain digits on a white palette: one seen environment and an evaluation split.
std::vector<data::EnvironmentDataset> plain_mnist_task(const data::GrayImages& mnist, std::uint64_t seed,
                                                       std::size_t limit, double test_fraction);

fs::path run_dir(const RunOptions& opt, const ExperimentConfig& cfg, std::uint64_t seed);

/// Runs (or reuses) every seed of `cfg`. Each seed persists result.json, curves,
/// masks and checkpoints under out_root/<hash>/seed-<n>/ and a DONE marker last.
ExperimentReport run_experiment(const ExperimentConfig& cfg, const RunOptions& opt);

/// One seed; reuses the run directory when DONE is present and force is off.
SeedResult run_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt);

struct AblationResult {
  std::uint64_t seed = 0;
  double erm = 0.0;     // test accuracies
  double oracle = 0.0;
  double mrm = 0.0;
  double reinit = 0.0;  // oracle mask, fresh initialization
  double rebias = 0.0;  // MRM mask, rearranged class-to-color mapping
  fs::path run_dir;

  io::json to_json() const;
  static AblationResult from_json(const io::json& j);
};

/// Runs (or reuses) ERM, oracle and MRM for `seed`, then the two ablation retrains.
AblationResult run_ablation_seed(const ExperimentConfig& cfg, std::uint64_t seed, const RunOptions& opt);

/// Completed seeds found under out_root, grouped by config hash.
std::vector<ExperimentReport> collect_reports(const fs::path& out_root);

enum class TableFormat { csv, markdown };

/// One row per method; Train/Test as "mean ± std" in percent, two decimals.
std::string render_table(const std::vector<ExperimentReport>& reports, TableFormat format);
void emit_table(const std::vector<ExperimentReport>& reports, TableFormat format, const fs::path& path);

struct TableRow {
  std::string method;
  Summary train;
  Summary test;
};

std::vector<TableRow> parse_table_csv(const std::string& text);

/// Per-seed, per-stage CSVs plus one SVG of mean test accuracy vs step per method.
std::vector<fs::path> emit_curves(const std::vector<ExperimentReport>& reports, const fs::path& dir);

/// sigmoid(pi) of one layer as CSV and PGM grids.
std::pair<fs::path, fs::path> emit_mask_heatmap(const mask::MaskLogits<float>& logits, const std::string& layer,
                                                const fs::path& stem);

struct KeepRatioPoint {
  double keep_ratio = 0.0;
  double accuracy = 0.0;
};

/// Accuracy against keep ratio on a log-scaled x axis.
void emit_keep_ratio_plot(const std::vector<KeepRatioPoint>& points, const fs::path& path);

/// Ordered axes of JSON-pointer paths (e.g. "/mrm/alpha") and their values.
using GridSpec = std::vector<std::pair<std::string, std::vector<io::json>>>;

GridSpec grid_from_json(const io::json& j);

struct GridResult {
  std::vector<ExperimentReport> cells;  // Cartesian order, last axis fastest
  std::size_t best = 0;
  std::string csv;  // one row per cell and seed
};

/// Runs every cell and selects the best mean test accuracy.
GridResult grid_search(const ExperimentConfig& base, const GridSpec& grid, const RunOptions& opt);

}  // namespace modnet::exp
