#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "modnet/error.hpp"
#include "modnet/mrm/pipeline.hpp"

using namespace modnet;
using namespace modnet::mrm;
using data::EnvironmentDataset;
using data::Provenance;

namespace {

// 3x8x8 images; class k lights a 2x2 block at one of ten fixed positions,
// color k (when colored) tints the whole image.
EnvironmentDataset pattern_env(std::size_t n, std::uint64_t seed, std::size_t classes = 10,
                               Provenance prov = Provenance::seen) {
  EnvironmentDataset e;
  e.provenance = prov;
  e.seen = prov == Provenance::seen;
  e.channels = 3;
  e.height = e.width = 8;
  e.images.assign(n * 3 * 64, 0.0f);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> noise(0.0f, 0.1f);
  for (std::size_t i = 0; i < n; ++i) {
    const int k = static_cast<int>(i % classes);
    const int color = static_cast<int>(rng() % 10);
    e.class_labels.push_back(k);
    e.color_labels.push_back(color);
    e.source_index.push_back(i);
    const std::size_t py = 1 + (k / 5) * 4, px = 1 + (k % 5);
    for (std::size_t c = 0; c < 3; ++c) {
      float* img = e.images.data() + (i * 3 + c) * 64;
      for (std::size_t p = 0; p < 64; ++p) img[p] = noise(rng) + (c == static_cast<std::size_t>(color % 3) ? 0.2f : 0.0f);
      for (std::size_t dy = 0; dy < 2; ++dy)
        for (std::size_t dx = 0; dx < 2; ++dx) img[(py + dy) * 8 + px + dx] += 1.0f;
    }
  }
  return e;
}

MrmConfig tiny_config(std::int64_t n1, std::int64_t n2) {
  MrmConfig c;
  c.n1 = n1;
  c.n2 = n2;
  c.batch_size = 32;
  c.net.widths = {4, 8, 8};
  c.model_optimizer = nn::OptimizerConfig::sgd(0.05, 0.9, 1e-4, 1000, 0.1);
  c.eval_every = 10;
  c.seed = 3;
  return c;
}

StageData tiny_data(std::size_t classes = 10) {
  StageData d;
  d.train = {pattern_env(200, 1, classes), pattern_env(200, 2, classes)};
  auto ev = pattern_env(100, 3, classes, Provenance::eval_split);
  d.eval = ev;
  return d;
}

bool same_weights(const Params& a, const Params& b) {
  for (std::size_t i = 0; i < a.size(); ++i)
    if (nn::is_trainable(a[i].role) && !(a[i].value == b[i].value)) return false;
  return true;
}

}  // namespace

TEST_CASE("stage 1 basics") {
  auto d = tiny_data();
  auto model = make_model(d.train[0], tiny_config(0, 0).net, 5);

  SUBCASE("zero steps leave the snapshot untouched") {
    auto r = stage1_train(model.arch, model.init, d, tiny_config(0, 0));
    CHECK(r.params == model.init.params);
    REQUIRE(r.report.curve.size() == 1);
    CHECK(r.report.curve[0].split == "test");
  }

  SUBCASE("separable two-class set is fit exactly") {
    StageData two;
    two.train = {pattern_env(100, 4, 2), pattern_env(100, 5, 2)};
    auto cfg = tiny_config(200, 0);
    auto r = stage1_train(model.arch, model.init, two, cfg);
    for (double a : r.report.train_accuracy) CHECK(a == 1.0);
  }

  SUBCASE("curves follow the evaluation cadence") {
    auto cfg = tiny_config(25, 0);
    auto r = stage1_train(model.arch, model.init, d, cfg);
    std::vector<std::int64_t> steps;
    for (const auto& c : r.report.curve)
      if (c.split == "test") steps.push_back(c.step);
    CHECK(steps == std::vector<std::int64_t>{10, 20, 25});
    CHECK(r.report.loss.size() == 25);
    CHECK(*r.report.test_accuracy == r.report.curve.back().accuracy);
    auto csv = curves_csv(r.report);
    CHECK(csv.rfind("step,split,accuracy,loss\n", 0) == 0);
  }
}

TEST_CASE("evaluate") {
  auto d = tiny_data();
  auto model = make_model(d.train[0], tiny_config(0, 0).net, 7);
  auto trained = stage1_train(model.arch, model.init, d, tiny_config(30, 0)).params;

  SUBCASE("matches a per-item loop") {
    const auto& ev = *d.eval;
    auto r = evaluate(model.arch, trained, nullptr, ev);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < ev.size(); ++i) {
      std::vector<std::size_t> one{i};
      auto s = nn::forward(model.arch, trained, nullptr, ev.gather<float>(one), nn::Mode::eval);
      hit += static_cast<int>(std::max_element(s.data(), s.data() + 10) - s.data()) == ev.class_labels[i];
    }
    CHECK(r.accuracy == doctest::Approx(static_cast<double>(hit) / ev.size()).epsilon(1e-12));
  }

  SUBCASE("zero network on balanced data scores chance") {
    auto zero = trained;
    for (auto& e : zero.entries())
      if (nn::is_trainable(e.role))
        for (auto& v : e.value.values()) v = 0.0f;
    CHECK(evaluate(model.arch, zero, nullptr, *d.eval).accuracy == doctest::Approx(0.1));
  }

  SUBCASE("provenance guards") {
    auto probe = pattern_env(20, 9, 10, Provenance::probe_split);
    CHECK_THROWS_AS(evaluate(model.arch, trained, nullptr, probe), ProvenanceError);
    StageData bad;
    bad.train = {*d.eval};
    CHECK_THROWS_AS(stage1_train(model.arch, model.init, bad, tiny_config(1, 0)), ProvenanceError);
    bad.train = {probe};
    CHECK_THROWS_AS(stage1_train(model.arch, model.init, bad, tiny_config(1, 0)), ProvenanceError);
    CHECK_THROWS_AS(oracle_probe(model.arch, trained, d.train[0], tiny_config(0, 1)), ProvenanceError);
    CHECK_NOTHROW(oracle_probe(model.arch, trained, probe, tiny_config(0, 1)));
  }
}

TEST_CASE("probing and retraining") {
  auto d = tiny_data();
  auto cfg = tiny_config(40, 40);
  auto model = make_model(d.train[0], cfg.net, 11);

  SUBCASE("stage 2 leaves weights frozen") {
    auto s1 = stage1_train(model.arch, model.init, d, cfg);
    auto s2 = stage2_probe(model.arch, s1.params, d, cfg);
    CHECK(same_weights(s1.params, s2.params));
    CHECK(s2.mask == mask::harden(s2.logits));
    CHECK(s2.report.keep_ratio == doctest::Approx(mask::keep_ratio(s2.mask)));
  }

  SUBCASE("forced all-ones mask reproduces stage 1 bitwise") {
    auto s1 = model.init.params;
    auto ones = mask::BinaryMask::filled(s1.maskable_names(), s1.maskable_shapes(), true);
    auto r = run_mrm(model, d, cfg, &ones);
    CHECK(r.final_params == r.stage1_params);
    CHECK(r.stage1.loss == r.stage3.loss);
    CHECK_FALSE(r.stage2.has_value());
  }

  SUBCASE("all-zeros mask stays at chance") {
    auto zeros = mask::BinaryMask::filled(model.init.params.maskable_names(), model.init.params.maskable_shapes(), false);
    auto r = stage3_retrain(model.arch, model.init, zeros, d, cfg);
    CHECK(*r.report.test_accuracy < 0.2);
    // masked weights never reach the output
    auto a = nn::forward(model.arch, r.params, nullptr, d.eval->gather<float>(std::vector<std::size_t>{0, 1}), nn::Mode::eval);
    auto m = zeros.multipliers<float>();
    auto b = nn::forward(model.arch, r.params, &m, d.eval->gather<float>(std::vector<std::size_t>{0, 1}), nn::Mode::eval);
    CHECK(b[0] == b[10]);
    CHECK_FALSE(a == b);
  }

  SUBCASE("large alpha collapses the mask") {
    auto s1 = stage1_train(model.arch, model.init, d, cfg);
    auto strong = cfg;
    strong.alpha = 1e-1;
    auto s2 = stage2_probe(model.arch, s1.params, d, strong);
    CHECK(mask::keep_ratio(s2.mask) < 0.05);
  }

  SUBCASE("full run reports every stage") {
    auto r = run_mrm(model, d, cfg);
    REQUIRE(r.stage2.has_value());
    CHECK(r.no_stage3_test_accuracy.has_value());
    CHECK(r.stage3.keep_ratio == doctest::Approx(mask::keep_ratio(r.mask)));
    auto j = r.to_json();
    CHECK(j["stage3"]["curve"].size() == r.stage3.curve.size());
    CHECK(j["stage2"]["stage"] == "stage2");
  }
}

TEST_CASE("baselines and ablations") {
  auto d = tiny_data();
  auto cfg = tiny_config(10, 10);
  auto model = make_model(d.train[0], cfg.net, 13);
  std::mt19937_64 rng(2);
  auto ref = mask::random_mask_global(model.init.params.maskable_names(), model.init.params.maskable_shapes(), 0.3, rng);

  SUBCASE("random masks match the reference ratios") {
    auto b = run_random_baselines(model, d, cfg, ref);
    CHECK(b.whole_mask.ones() == ref.ones());
    CHECK(mask::per_layer_keep_ratio(b.layer_mask) == mask::per_layer_keep_ratio(ref));
    CHECK(b.rand_whole.report.stage == "rand_whole");
  }

  SUBCASE("reinit is deterministic and needs a fresh seed") {
    auto a = ablation_reinit(model, d, cfg, ref, 99);
    auto b = ablation_reinit(model, d, cfg, ref, 99);
    CHECK(a.params == b.params);
    CHECK_THROWS_AS(ablation_reinit(model, d, cfg, ref, 13), ConfigError);
    auto ones = mask::BinaryMask::filled(ref.names, ref.shapes(), true);
    auto c = ablation_reinit(model, d, cfg, ones, 99);
    auto erm = stage1_train(model.arch, Snapshot::take(nn::init_parameters<float>(model.arch, 99), 99), d, cfg);
    CHECK(c.params == erm.params);
  }

  SUBCASE("rebias retrains from the original initialization") {
    auto r = ablation_rebias(model, d, cfg, ref);
    auto direct = stage3_retrain(model.arch, model.init, ref, d, cfg);
    CHECK(r.params == direct.params);
  }

  SUBCASE("module introspection needs color labels") {
    auto plain = d.train;
    for (auto& e : plain) e.color_labels.clear();
    auto ev = *d.eval;
    CHECK_THROWS_AS(module_introspection(model.arch, model.init.params, plain, ev, data::LabelChannel::color_label, cfg),
                    ConfigError);
    auto r = module_introspection(model.arch, model.init.params, d.train, ev, data::LabelChannel::color_label, cfg);
    CHECK(r.accuracy >= 0.0);
    CHECK(r.accuracy <= 1.0);
  }
}

TEST_CASE("joint prune") {
  auto d = tiny_data();
  auto cfg = tiny_config(10, 0);
  cfg.alpha = 1e-2;
  auto model = make_model(d.train[0], cfg.net, 17);

  auto full = joint_prune(model, d, cfg, 1.0, 100);
  CHECK(full.reached);
  CHECK(full.steps == 0);
  CHECK(mask::keep_ratio(full.mask) == 1.0);

  auto half = joint_prune(model, d, cfg, 0.5, 300);
  auto third = joint_prune(model, d, cfg, 0.3, 300);
  CHECK(half.reached);
  CHECK(third.reached);
  CHECK(mask::keep_ratio(half.mask) <= 0.5);
  CHECK(mask::keep_ratio(third.mask) <= mask::keep_ratio(half.mask));
  CHECK(third.steps >= half.steps);

  auto stuck = joint_prune(model, d, cfg, 0.01, 3);
  CHECK_FALSE(stuck.reached);
  CHECK(stuck.steps == 3);
  CHECK_THROWS_AS(joint_prune(model, d, cfg, 0.0, 3), ConfigError);
}

TEST_CASE("config json round trip") {
  auto c = tiny_config(12, 34);
  c.objective.kind = risk::ObjectiveKind::dro;
  c.objective.eta_q = 0.5;
  c.alpha = 3e-6;
  auto back = MrmConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.objective.kind == risk::ObjectiveKind::dro);
  auto bad = c.to_json();
  bad["n1"] = -1;
  CHECK_THROWS_AS(MrmConfig::from_json(bad), ConfigError);
}
