#include "modnet/mrm/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>

#include "modnet/error.hpp"

namespace modnet::mrm {

namespace {

using Clock = std::chrono::steady_clock;

// evaluate() without the provenance guard, for training-set accuracy
EvalResult score_dataset(const nn::Architecture& arch, const Params& params, const mask::BinaryMask* m,
                         const data::EnvironmentDataset& ds, data::LabelChannel channel);

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void check_trainable_data(const Datasets& envs, bool allow_probe_split) {
  if (envs.empty()) throw ConfigError("no training environments");
  for (const auto& e : envs) {
    if (e.size() == 0) throw ConfigError("empty training environment " + std::to_string(e.env_id));
    if (e.provenance == data::Provenance::eval_split)
      throw ProvenanceError("the out-domain evaluation split cannot be used for training");
    if (e.provenance == data::Provenance::probe_split && !allow_probe_split)
      throw ProvenanceError("the oracle probe split is reserved for oracle probing");
  }
}

void check_channel(const Datasets& envs, data::LabelChannel ch) {
  if (ch == data::LabelChannel::color_label)
    for (const auto& e : envs)
      if (!e.has_color_labels()) throw ConfigError("dataset carries no color labels");
}

std::vector<risk::EnvBatch<float>> draw_batches(const Datasets& envs, std::size_t batch_size,
                                                data::LabelChannel ch, std::mt19937_64& rng) {
  const std::size_t per_env = std::max<std::size_t>(1, batch_size / envs.size());
  std::vector<risk::EnvBatch<float>> out;
  out.reserve(envs.size());
  for (const auto& e : envs) {
    std::uniform_int_distribution<std::size_t> pick(0, e.size() - 1);
    std::vector<std::size_t> idx(per_env);
    for (auto& i : idx) i = pick(rng);
    risk::EnvBatch<float> b;
    b.images = e.gather<float>(idx);
    const auto& labels = e.labels(ch);
    for (auto i : idx) b.labels.push_back(labels[i]);
    out.push_back(std::move(b));
  }
  return out;
}

std::vector<std::size_t> trainable_indices(const Params& p) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (nn::is_trainable(p[i].role)) out.push_back(i);
  return out;
}

void step_params(nn::OptimizerState<float>& opt, Params& p, const std::vector<std::size_t>& idx,
                 nn::Gradients<float>& g, std::int64_t t) {
  std::vector<Tensor<float>*> ptr;
  std::vector<const Tensor<float>*> gptr;
  for (auto i : idx) {
    ptr.push_back(&p[i].value);
    gptr.push_back(&g.params[i]);
  }
  opt.step(ptr, gptr, t);
}

void step_logits(nn::OptimizerState<float>& opt, mask::MaskLogits<float>& logits, std::vector<Tensor<float>>& g,
                 std::int64_t t) {
  std::vector<Tensor<float>*> ptr;
  std::vector<const Tensor<float>*> gptr;
  for (std::size_t i = 0; i < logits.layers.size(); ++i) {
    ptr.push_back(&logits.layers[i]);
    gptr.push_back(&g[i]);
  }
  opt.step(ptr, gptr, t);
}

// Accumulates batch statistics between evaluations and records curve points
// every `every` completed steps and after the last step.
class Recorder {
 public:
  Recorder(StageReport& r, const nn::Architecture& arch, const StageData& data, std::int64_t every, std::int64_t n)
      : r_(r), arch_(arch), data_(data), every_(every), n_(n) {}

  void after_step(std::int64_t done, double objective, const std::vector<double>& acc, const Params& p,
                  const mask::BinaryMask* m) {
    r_.loss.push_back(objective);
    double a = 0;
    for (double v : acc) a += v;
    sum_acc_ += a / static_cast<double>(acc.size());
    sum_loss_ += objective;
    ++count_;
    if (done % every_ == 0 || done == n_) record(done, p, m);
  }

  void finish(const Params& p, const mask::BinaryMask* m) {
    if (n_ == 0) record(0, p, m);
    r_.train_accuracy.clear();
    for (const auto& e : data_.train) r_.train_accuracy.push_back(evaluate_unchecked(p, m, e).accuracy);
    if (m) {
      r_.keep_ratio = mask::keep_ratio(*m);
      r_.layer_keep_ratio = mask::per_layer_keep_ratio(*m);
    }
  }

 private:
  EvalResult evaluate_unchecked(const Params& p, const mask::BinaryMask* m, const data::EnvironmentDataset& e) {
    return score_dataset(arch_, p, m, e, data_.channel);
  }

  void record(std::int64_t step, const Params& p, const mask::BinaryMask* m) {
    if (count_ > 0) {
      r_.curve.push_back({step, "train", sum_acc_ / count_, sum_loss_ / count_});
    }
    sum_acc_ = sum_loss_ = 0;
    count_ = 0;
    if (data_.eval) {
      const auto ev = evaluate(arch_, p, m, *data_.eval, data_.channel);
      r_.curve.push_back({step, "test", ev.accuracy, ev.loss});
      r_.test_accuracy = ev.accuracy;
      r_.best_test_accuracy = std::max(r_.best_test_accuracy.value_or(0.0), ev.accuracy);
    }
  }

  StageReport& r_;
  const nn::Architecture& arch_;
  const StageData& data_;
  std::int64_t every_, n_;
  double sum_acc_ = 0, sum_loss_ = 0;
  std::int64_t count_ = 0;
};

// Stage 1 and stage 3 share this loop; the batch stream depends only on the seed.
Stage1Result train_loop(const std::string& name, const nn::Architecture& arch, Params p,
                        const mask::BinaryMask* m, const StageData& data, const MrmConfig& cfg) {
  cfg.validate();
  check_trainable_data(data.train, false);
  check_channel(data.train, data.channel);
  const auto t0 = Clock::now();
  Stage1Result out;
  out.report.stage = name;
  std::optional<nn::MaskMultipliers<float>> mult;
  if (m) {
    if (m->names != p.maskable_names() || m->shapes() != p.maskable_shapes())
      throw ShapeError("mask does not match the model");
    mult = m->multipliers<float>();
  }
  const auto idx = trainable_indices(p);
  nn::OptimizerState<float> opt(cfg.model_optimizer);
  std::mt19937_64 rng(data::derive_seed(cfg.seed, 0x51a9e1));
  auto dro = risk::DroState::uniform(data.train.size());
  Recorder rec(out.report, arch, data, cfg.eval_every, cfg.n1);
  for (std::int64_t t = 0; t < cfg.n1; ++t) {
    const auto batches = draw_batches(data.train, cfg.batch_size, data.channel, rng);
    auto res = risk::objective_and_grads(arch, p, mult ? &*mult : nullptr, batches, cfg.objective, t, &dro, false);
    for (const auto& tr : res.traces) nn::update_running_stats(p, tr);
    step_params(opt, p, idx, res.grads, t);
    ++p.step_count;
    rec.after_step(t + 1, res.objective, res.accuracy, p, m);
  }
  rec.finish(p, m);
  out.report.seconds = seconds_since(t0);
  out.params = std::move(p);
  return out;
}

Stage2Result probe_loop(const std::string& name, const nn::Architecture& arch, const Params& frozen,
                        const StageData& data, const MrmConfig& cfg, bool allow_probe_split) {
  cfg.validate();
  check_trainable_data(data.train, allow_probe_split);
  check_channel(data.train, data.channel);
  const auto t0 = Clock::now();
  Stage2Result out;
  out.report.stage = name;
  out.params = frozen;
  auto& p = out.params;
  out.logits = mask::init_logits<float>(p, 0.0);
  nn::OptimizerState<float> opt(cfg.logit_optimizer);
  std::mt19937_64 rng(data::derive_seed(cfg.seed, 0x9e0be));
  std::mt19937_64 noise_rng(data::derive_seed(cfg.seed, 0x9e0be, 1));
  auto dro = risk::DroState::uniform(data.train.size());
  Recorder rec(out.report, arch, data, cfg.eval_every, cfg.n2);
  for (std::int64_t t = 0; t < cfg.n2; ++t) {
    const auto batches = draw_batches(data.train, cfg.batch_size, data.channel, rng);
    const auto relaxed = mask::gumbel_sigmoid_sample(out.logits, cfg.temperature, noise_rng);
    const auto mult = mask::straight_through(relaxed);
    auto res = risk::objective_and_grads(arch, p, &mult, batches, cfg.objective, t, &dro, true);
    for (const auto& tr : res.traces) nn::update_running_stats(p, tr);
    auto dpi = mask::straight_through_backward(relaxed, res.grads.mask);
    mask::add_sparsity_grad(dpi, cfg.alpha);
    const double total = res.objective + mask::sparsity_penalty(out.logits, cfg.alpha);
    step_logits(opt, out.logits, dpi, t);
    const bool eval_now = (t + 1) % cfg.eval_every == 0 || t + 1 == cfg.n2;
    if (eval_now) {
      const auto hard = mask::harden(out.logits);
      rec.after_step(t + 1, total, res.accuracy, p, &hard);
    } else {
      rec.after_step(t + 1, total, res.accuracy, p, nullptr);
    }
  }
  out.mask = mask::harden(out.logits);
  rec.finish(p, &out.mask);
  out.report.seconds = seconds_since(t0);
  return out;
}

}  // namespace

io::json optimizer_to_json(const nn::OptimizerConfig& c) {
  return {{"kind", nn::to_string(c.kind)},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_decay_every", c.lr_decay_every},
          {"lr_decay_factor", c.lr_decay_factor}};
}

nn::OptimizerConfig optimizer_from_json(const io::json& j) {
  const auto kind = nn::optimizer_kind_from_string(j.value("kind", std::string("sgd")));
  nn::OptimizerConfig c = kind == nn::OptimizerKind::adam ? nn::OptimizerConfig::adam(0.1) : nn::OptimizerConfig{};
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
  c.lr_decay_factor = j.value("lr_decay_factor", c.lr_decay_factor);
  c.validate();
  return c;
}

void MrmConfig::validate() const {
  objective.validate();
  if (n1 < 0 || n2 < 0) throw ConfigError("step counts must be non-negative");
  if (!(alpha >= 0)) throw ConfigError("alpha must be non-negative");
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (!(temperature > 0)) throw ConfigError("temperature must be positive");
  if (eval_every <= 0) throw ConfigError("eval_every must be positive");
  model_optimizer.validate();
  logit_optimizer.validate();
}

io::json MrmConfig::to_json() const {
  return {{"objective", objective.to_json()},
          {"alpha", alpha},
          {"n1", n1},
          {"n2", n2},
          {"model_optimizer", optimizer_to_json(model_optimizer)},
          {"logit_optimizer", optimizer_to_json(logit_optimizer)},
          {"batch_size", batch_size},
          {"seed", seed},
          {"temperature", temperature},
          {"eval_every", eval_every},
          {"widths", net.widths},
          {"image_size", net.image_size}};
}

MrmConfig MrmConfig::from_json(const io::json& j) {
  MrmConfig c;
  if (j.contains("objective")) c.objective = risk::ObjectiveSpec::from_json(j.at("objective"));
  c.alpha = j.value("alpha", c.alpha);
  c.n1 = j.value("n1", c.n1);
  c.n2 = j.value("n2", c.n2);
  if (j.contains("model_optimizer")) c.model_optimizer = optimizer_from_json(j.at("model_optimizer"));
  if (j.contains("logit_optimizer")) c.logit_optimizer = optimizer_from_json(j.at("logit_optimizer"));
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.temperature = j.value("temperature", c.temperature);
  c.eval_every = j.value("eval_every", c.eval_every);
  if (j.contains("widths")) c.net.widths = j.at("widths").get<std::array<std::size_t, 3>>();
  c.net.image_size = j.value("image_size", c.net.image_size);
  c.validate();
  return c;
}

io::json StageReport::to_json() const {
  io::json curve_j = io::json::array();
  for (const auto& c : curve)
    curve_j.push_back({{"step", c.step}, {"split", c.split}, {"accuracy", c.accuracy}, {"loss", c.loss}});
  io::json j = {{"stage", stage},
                {"train_accuracy", train_accuracy},
                {"keep_ratio", keep_ratio},
                {"layer_keep_ratio", layer_keep_ratio},
                {"seconds", seconds},
                {"curve", curve_j},
                {"final_loss", loss.empty() ? 0.0 : loss.back()},
                {"steps", loss.size()}};
  j["test_accuracy"] = test_accuracy ? io::json(*test_accuracy) : io::json(nullptr);
  j["best_test_accuracy"] = best_test_accuracy ? io::json(*best_test_accuracy) : io::json(nullptr);
  return j;
}

io::json MrmReport::to_json() const {
  io::json j = {{"stage1", stage1.to_json()},
                {"stage3", stage3.to_json()},
                {"keep_ratio", mask::keep_ratio(mask)},
                {"layer_keep_ratio", mask::per_layer_keep_ratio(mask)}};
  j["stage2"] = stage2 ? stage2->to_json() : io::json(nullptr);
  j["no_stage3_test_accuracy"] = no_stage3_test_accuracy ? io::json(*no_stage3_test_accuracy) : io::json(nullptr);
  return j;
}

EvalResult evaluate(const nn::Architecture& arch, const Params& params, const mask::BinaryMask* m,
                    const data::EnvironmentDataset& ds, data::LabelChannel channel) {
  if (ds.provenance == data::Provenance::probe_split)
    throw ProvenanceError("the oracle probe split cannot be used for evaluation");
  return score_dataset(arch, params, m, ds, channel);
}

namespace {

EvalResult score_dataset(const nn::Architecture& arch, const Params& params, const mask::BinaryMask* m,
                         const data::EnvironmentDataset& ds, data::LabelChannel channel) {
  if (channel == data::LabelChannel::color_label && !ds.has_color_labels())
    throw ConfigError("dataset carries no color labels");
  if (ds.size() == 0) return {};
  std::optional<nn::MaskMultipliers<float>> mult;
  if (m) mult = m->multipliers<float>();
  const auto& labels = ds.labels(channel);
  constexpr std::size_t chunk = 32;  // small chunks keep the im2col buffers in cache
  std::size_t hit = 0;
  double loss = 0;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < ds.size(); s += chunk) {
    const std::size_t e = std::min(ds.size(), s + chunk);
    idx.resize(e - s);
    for (std::size_t i = s; i < e; ++i) idx[i - s] = i;
    const auto scores = nn::forward(arch, params, mult ? &*mult : nullptr, ds.gather<float>(idx), nn::Mode::eval);
    const std::size_t C = scores.shape()[1];
    for (std::size_t n = 0; n < idx.size(); ++n) {
      const float* row = scores.data() + n * C;
      const int y = labels[s + n];
      hit += static_cast<int>(std::max_element(row, row + C) - row) == y;
      double mx = row[0];
      for (std::size_t c = 1; c < C; ++c) mx = std::max<double>(mx, row[c]);
      double z = 0;
      for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
      loss += mx + std::log(z) - row[y];
    }
  }
  return {static_cast<double>(hit) / ds.size(), loss / ds.size()};
}

}  // namespace

Model make_model(const data::EnvironmentDataset& like, const nn::ConvNetOptions& net, std::uint64_t seed) {
  nn::ConvNetOptions opt = net;
  opt.image_size = like.height;
  if (like.height != like.width) throw ShapeError("images must be square");
  Model m;
  m.arch = nn::convnet_architecture(like.channels, 10, opt);
  m.init = Snapshot::take(nn::init_parameters<float>(m.arch, seed), seed);
  return m;
}

Stage1Result stage1_train(const nn::Architecture& arch, const Snapshot& init, const StageData& data,
                          const MrmConfig& cfg) {
  return train_loop("stage1", arch, init.restore(), nullptr, data, cfg);
}

Stage2Result stage2_probe(const nn::Architecture& arch, const Params& frozen, const StageData& data,
                          const MrmConfig& cfg) {
  return probe_loop("stage2", arch, frozen, data, cfg, false);
}

Stage1Result stage3_retrain(const nn::Architecture& arch, const Snapshot& init, const mask::BinaryMask& m,
                            const StageData& data, const MrmConfig& cfg) {
  return train_loop("stage3", arch, init.restore(), &m, data, cfg);
}

MrmReport run_mrm(const Model& model, const StageData& data, const MrmConfig& cfg,
                  const mask::BinaryMask* forced_mask) {
  MrmReport r;
  auto s1 = stage1_train(model.arch, model.init, data, cfg);
  r.stage1 = s1.report;
  if (forced_mask) {
    r.mask = *forced_mask;
  } else {
    auto s2 = stage2_probe(model.arch, s1.params, data, cfg);
    r.mask = s2.mask;
    r.logits = std::move(s2.logits);
    if (data.eval) r.no_stage3_test_accuracy = evaluate(model.arch, s2.params, &r.mask, *data.eval, data.channel).accuracy;
    r.stage2 = std::move(s2.report);
  }
  auto s3 = stage3_retrain(model.arch, model.init, r.mask, data, cfg);
  r.stage3 = std::move(s3.report);
  r.stage1_params = std::move(s1.params);
  r.final_params = std::move(s3.params);
  return r;
}

Stage2Result oracle_probe(const nn::Architecture& arch, const Params& trained, const data::EnvironmentDataset& in_split,
                          const MrmConfig& cfg) {
  if (in_split.provenance != data::Provenance::probe_split)
    throw ProvenanceError("oracle probing needs the out-domain in-split, got " + data::to_string(in_split.provenance));
  StageData d;
  d.train = {in_split};
  return probe_loop("oracle_probe", arch, trained, d, cfg, true);
}

IntrospectionResult module_introspection(const nn::Architecture& arch, const Params& trained, const Datasets& train,
                                         const data::EnvironmentDataset& eval, data::LabelChannel target,
                                         const MrmConfig& cfg) {
  if (target == data::LabelChannel::color_label) {
    check_channel(train, target);
    if (!eval.has_color_labels()) throw ConfigError("evaluation data carries no color labels");
  }
  StageData d;
  d.train = train;
  d.channel = target;
  auto s2 = probe_loop("introspection", arch, trained, d, cfg, false);
  IntrospectionResult out;
  out.accuracy = evaluate(arch, s2.params, &s2.mask, eval, target).accuracy;
  out.mask = std::move(s2.mask);
  out.logits = std::move(s2.logits);
  return out;
}

BaselineReports run_random_baselines(const Model& model, const StageData& data, const MrmConfig& cfg,
                                     const mask::BinaryMask& reference) {
  std::mt19937_64 rng(data::derive_seed(cfg.seed, 0x7a4d));
  const double ratio = static_cast<double>(reference.ones()) / static_cast<double>(reference.total());
  auto whole = mask::random_mask_global(reference.names, reference.shapes(), ratio, rng);
  auto layer = mask::random_mask_layerwise(reference, rng);
  auto rw = stage3_retrain(model.arch, model.init, whole, data, cfg);
  rw.report.stage = "rand_whole";
  auto rl = stage3_retrain(model.arch, model.init, layer, data, cfg);
  rl.report.stage = "rand_layer";
  return {std::move(whole), std::move(layer), std::move(rw), std::move(rl)};
}

Stage1Result ablation_reinit(const Model& model, const StageData& data, const MrmConfig& cfg,
                             const mask::BinaryMask& m, std::uint64_t fresh_seed) {
  if (fresh_seed == model.init.seed) throw ConfigError("re-initialization needs a seed distinct from the original");
  const auto fresh = Snapshot::take(nn::init_parameters<float>(model.arch, fresh_seed), fresh_seed);
  auto r = stage3_retrain(model.arch, fresh, m, data, cfg);
  r.report.stage = "ablation_reinit";
  return r;
}

Stage1Result ablation_rebias(const Model& model, const StageData& rebias_data, const MrmConfig& cfg,
                             const mask::BinaryMask& m) {
  auto r = stage3_retrain(model.arch, model.init, m, rebias_data, cfg);
  r.report.stage = "ablation_rebias";
  return r;
}

PruneResult joint_prune(const Model& model, const StageData& data, const MrmConfig& cfg, double target,
                        std::int64_t max_steps) {
  if (!(target > 0.0) || target > 1.0) throw ConfigError("target keep ratio must lie in (0,1]");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  cfg.validate();
  check_trainable_data(data.train, false);
  const auto t0 = Clock::now();
  PruneResult out;
  out.prune.stage = "joint_prune";
  Params p = model.init.restore();
  // start with every weight kept so the ratio only falls as pressure builds
  auto logits = mask::init_logits<float>(p, 3.0);
  const auto idx = trainable_indices(p);
  nn::OptimizerState<float> wopt(cfg.model_optimizer);
  nn::OptimizerState<float> lopt(cfg.logit_optimizer);
  std::mt19937_64 rng(data::derive_seed(cfg.seed, 0x94a2e));
  std::mt19937_64 noise_rng(data::derive_seed(cfg.seed, 0x94a2e, 1));
  auto dro = risk::DroState::uniform(data.train.size());
  double best = std::numeric_limits<double>::infinity();
  std::int64_t t = 0;
  for (;; ++t) {
    auto hard = mask::harden(logits);
    const double kr = mask::keep_ratio(hard);
    if (kr < best) {
      best = kr;
      out.mask = hard;
    }
    if (kr <= target) {
      out.reached = true;
      out.mask = std::move(hard);
      break;
    }
    if (t >= max_steps) break;
    const auto batches = draw_batches(data.train, cfg.batch_size, data.channel, rng);
    const auto relaxed = mask::gumbel_sigmoid_sample(logits, cfg.temperature, noise_rng);
    const auto mult = mask::straight_through(relaxed);
    auto res = risk::objective_and_grads(model.arch, p, &mult, batches, cfg.objective, t, &dro, true);
    for (const auto& tr : res.traces) nn::update_running_stats(p, tr);
    step_params(wopt, p, idx, res.grads, t);
    auto dpi = mask::straight_through_backward(relaxed, res.grads.mask);
    mask::add_sparsity_grad(dpi, cfg.alpha);
    out.prune.loss.push_back(res.objective + mask::sparsity_penalty(logits, cfg.alpha));
    step_logits(lopt, logits, dpi, t);
  }
  out.steps = t;
  out.prune.keep_ratio = mask::keep_ratio(out.mask);
  out.prune.layer_keep_ratio = mask::per_layer_keep_ratio(out.mask);
  out.prune.seconds = seconds_since(t0);
  out.retrain = stage3_retrain(model.arch, model.init, out.mask, data, cfg);
  return out;
}

std::string curves_csv(const StageReport& stage) {
  std::string out = "step,split,accuracy,loss\n";
  char buf[128];
  for (const auto& c : stage.curve) {
    std::snprintf(buf, sizeof buf, "%lld,%s,%.6f,%.6f\n", static_cast<long long>(c.step), c.split.c_str(), c.accuracy,
                  c.loss);
    out += buf;
  }
  return out;
}

}  // namespace modnet::mrm
