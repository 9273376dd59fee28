#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "modnet/data/biased.hpp"
#include "modnet/io.hpp"
#include "modnet/mask/mask.hpp"
#include "modnet/nn/network.hpp"
#include "modnet/nn/optimizer.hpp"
#include "modnet/risk/objectives.hpp"

namespace modnet::mrm {

using Params = nn::ParameterSet<float>;
using Snapshot = nn::InitSnapshot<float>;
using Datasets = std::vector<data::EnvironmentDataset>;

struct MrmConfig {
  risk::ObjectiveSpec objective;
  double alpha = 1e-5;
  std::int64_t n1 = 2000;
  std::int64_t n2 = 2000;
  nn::OptimizerConfig model_optimizer = nn::OptimizerConfig::sgd(0.1, 0.9, 1e-4, 600, 0.1);
  nn::OptimizerConfig logit_optimizer = nn::OptimizerConfig::adam(0.1);
  std::size_t batch_size = 128;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  std::int64_t eval_every = 100;
  nn::ConvNetOptions net;

  void validate() const;
  io::json to_json() const;
  static MrmConfig from_json(const io::json& j);
};

io::json optimizer_to_json(const nn::OptimizerConfig& c);
nn::OptimizerConfig optimizer_from_json(const io::json& j);

struct CurvePoint {
  std::int64_t step = 0;
  std::string split;  // "train" or "test"
  double accuracy = 0.0;
  double loss = 0.0;
};

struct StageReport {
  std::string stage;
  std::vector<double> loss;            // objective per step
  std::vector<double> train_accuracy;  // per environment, final evaluation
  std::vector<CurvePoint> curve;
  double keep_ratio = 1.0;
  std::vector<double> layer_keep_ratio;
  double seconds = 0.0;
  std::optional<double> test_accuracy;       // last evaluation on the out-split
  std::optional<double> best_test_accuracy;  // max over evaluations

  io::json to_json() const;
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Eval-mode accuracy and mean cross-entropy. Rejects the oracle probe split.
EvalResult evaluate(const nn::Architecture& arch, const Params& params, const mask::BinaryMask* mask,
                    const data::EnvironmentDataset& ds, data::LabelChannel channel = data::LabelChannel::class_label);

/// Training environments, an optional evaluation split, and the label channel to fit.
struct StageData {
  Datasets train;
  std::optional<data::EnvironmentDataset> eval;
  data::LabelChannel channel = data::LabelChannel::class_label;
};

struct Model {
  nn::Architecture arch;
  Snapshot init;
};

/// Architecture sized for the data plus w_0 drawn from `seed`.
Model make_model(const data::EnvironmentDataset& like, const nn::ConvNetOptions& net, std::uint64_t seed);

struct Stage1Result {
  Params params;
  StageReport report;
};

Stage1Result stage1_train(const nn::Architecture& arch, const Snapshot& init, const StageData& data,
                          const MrmConfig& cfg);

struct Stage2Result {
  mask::MaskLogits<float> logits;
  mask::BinaryMask mask;
  Params params;  // the frozen weights with batch-norm statistics seen during probing
  StageReport report;
};

Stage2Result stage2_probe(const nn::Architecture& arch, const Params& frozen, const StageData& data,
                          const MrmConfig& cfg);

Stage1Result stage3_retrain(const nn::Architecture& arch, const Snapshot& init, const mask::BinaryMask& mask,
                            const StageData& data, const MrmConfig& cfg);

struct MrmReport {
  StageReport stage1;
  std::optional<StageReport> stage2;
  StageReport stage3;
  mask::BinaryMask mask;
  std::optional<mask::MaskLogits<float>> logits;
  Params stage1_params;
  Params final_params;
  std::optional<double> no_stage3_test_accuracy;  // hardened mask on the stage-1 weights

  io::json to_json() const;
};

/// Stages 1 -> 2 -> 3. With `forced_mask`, stage 2 is skipped and that mask is retrained.
MrmReport run_mrm(const Model& model, const StageData& data, const MrmConfig& cfg,
                  const mask::BinaryMask* forced_mask = nullptr);

/// Stage 2 on the out-domain in-split only (provenance probe_split).
Stage2Result oracle_probe(const nn::Architecture& arch, const Params& trained, const data::EnvironmentDataset& in_split,
                          const MrmConfig& cfg);

struct IntrospectionResult {
  mask::BinaryMask mask;
  mask::MaskLogits<float> logits;
  double accuracy = 0.0;
};

/// Probes a module for the class or the color labels of `train` and scores it on `eval`.
IntrospectionResult module_introspection(const nn::Architecture& arch, const Params& trained, const Datasets& train,
                                         const data::EnvironmentDataset& eval, data::LabelChannel target,
                                         const MrmConfig& cfg);

struct BaselineReports {
  mask::BinaryMask whole_mask;
  mask::BinaryMask layer_mask;
  Stage1Result rand_whole;
  Stage1Result rand_layer;
};

BaselineReports run_random_baselines(const Model& model, const StageData& data, const MrmConfig& cfg,
                                     const mask::BinaryMask& reference);

/// Stage 3 under `mask` from a new initialization drawn with `fresh_seed`.
Stage1Result ablation_reinit(const Model& model, const StageData& data, const MrmConfig& cfg,
                             const mask::BinaryMask& mask, std::uint64_t fresh_seed);

/// Stage 3 from the original w_0 on data generated under a rearranged bias.
Stage1Result ablation_rebias(const Model& model, const StageData& rebias_data, const MrmConfig& cfg,
                             const mask::BinaryMask& mask);

struct PruneResult {
  mask::BinaryMask mask;
  bool reached = false;
  std::int64_t steps = 0;
  StageReport prune;
  Stage1Result retrain;
};

/// Joint update of logits and weights until the hardened keep ratio drops to
/// `target`, then stage 3 from w_0. Gives up after `max_steps`, keeping the
/// sparsest mask seen.
PruneResult joint_prune(const Model& model, const StageData& data, const MrmConfig& cfg, double target,
                        std::int64_t max_steps);

/// Columns step, split, accuracy, loss.
std::string curves_csv(const StageReport& stage);

}  // namespace modnet::mrm
