#include <doctest.h>

#include <cmath>
#include <random>

#include "modnet/risk/objectives.hpp"

using namespace modnet;
using namespace modnet::risk;

namespace {

Tensor<double> random_scores(std::size_t n, std::size_t c, std::uint64_t seed, double scale = 2.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  Tensor<double> t({n, c});
  for (auto& v : t.values()) v = d(rng);
  return t;
}

std::vector<int> random_labels(std::size_t n, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng() % c);
  return y;
}

nn::Architecture mlp() {
  nn::Architecture a;
  a.input_channels = 1;
  a.input_height = 2;
  a.input_width = 2;
  a.layers = {{nn::LayerKind::flatten, "", 0, 0},
              {nn::LayerKind::linear, "l1", 4, 6},
              {nn::LayerKind::relu, "", 0, 0},
              {nn::LayerKind::linear, "l2", 6, 3}};
  return a;
}

EnvBatch<double> random_env(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d;
  EnvBatch<double> e{Tensor<double>({n, 1, 2, 2}), random_labels(n, 3, seed + 1)};
  for (auto& v : e.images.values()) v = d(rng);
  return e;
}

}  // namespace

TEST_CASE("cross entropy") {
  Tensor<double> uniform({4, 10}, 0.3);
  CHECK(std::abs(cross_entropy(uniform, std::vector<int>{0, 3, 9, 5}).value - std::log(10.0)) < 1e-12);
  Tensor<double> confident({1, 3}, std::vector<double>{0.0, 200.0, 0.0});
  CHECK(cross_entropy(confident, std::vector<int>{1}).value < 1e-60);
  CHECK(cross_entropy(confident, std::vector<int>{0}).value > 0.0);

  auto s = random_scores(7, 3, 1);
  auto y = random_labels(7, 3, 2);
  double ref = 0;
  for (std::size_t n = 0; n < 7; ++n) {
    double z = 0;
    for (int k = 0; k < 3; ++k) z += std::exp(s[n * 3 + k]);
    ref += -std::log(std::exp(s[n * 3 + y[n]]) / z);
  }
  auto ce = cross_entropy(s, y);
  CHECK(std::abs(ce.value - ref / 7) < 1e-10);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto up = s, down = s;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    CHECK(ce.dscores[i] == doctest::Approx((cross_entropy(up, y).value - cross_entropy(down, y).value) / 2e-6)
                               .epsilon(1e-6));
  }
  CHECK_THROWS_AS(cross_entropy(s, std::vector<int>{0, 1, 2, 3, 4, 5, 6}), ConfigError);
  CHECK_THROWS_AS(cross_entropy(s, std::vector<int>{0}), ShapeError);
}

TEST_CASE("per-environment risks") {
  auto arch = mlp();
  auto params = nn::init_parameters<double>(arch, 3);
  auto a = random_env(5, 1), b = random_env(9, 2);
  auto same = per_env_risks(arch, params, nullptr, {a, a});
  CHECK(same[0] == same[1]);

  auto zero = params;
  for (auto& e : zero.entries()) e.value.fill(0.0);
  for (double r : per_env_risks(arch, zero, nullptr, {a, b})) CHECK(r == doctest::Approx(std::log(3.0)).epsilon(1e-14));

  auto r = per_env_risks(arch, params, nullptr, {a, b});
  EnvBatch<double> cat{Tensor<double>({14, 1, 2, 2}), a.labels};
  std::copy(a.images.values().begin(), a.images.values().end(), cat.images.data());
  std::copy(b.images.values().begin(), b.images.values().end(), cat.images.data() + a.images.size());
  cat.labels.insert(cat.labels.end(), b.labels.begin(), b.labels.end());
  CHECK((5 * r[0] + 9 * r[1]) / 14 == doctest::Approx(per_env_risks(arch, params, nullptr, {cat})[0]).epsilon(1e-12));

  CHECK_THROWS_AS(per_env_risks(arch, params, nullptr, {EnvBatch<double>{a.images, {}}}), ConfigError);
}

TEST_CASE("IRMv1 penalty") {
  Tensor<double> zeros({4, 3}, 0.0);
  CHECK(irm_scale_gradient(zeros, std::vector<int>{0, 1, 2, 0}).g == 0.0);

  auto s = random_scores(6, 3, 5);
  auto y = random_labels(6, 3, 6);
  auto risk_at = [&](double k) {
    auto t = s;
    for (auto& v : t.values()) v *= k;
    return cross_entropy(t, y).value;
  };
  const double fd = (risk_at(1 + 1e-6) - risk_at(1 - 1e-6)) / 2e-6;
  auto ig = irm_scale_gradient(s, y);
  CHECK(std::abs(ig.g - fd) / std::abs(fd) < 1e-4);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto up = s, down = s;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double fdi = (irm_scale_gradient(up, y).g - irm_scale_gradient(down, y).g) / 2e-6;
    CHECK(ig.dg[i] == doctest::Approx(fdi).epsilon(1e-5));
  }

  auto arch = mlp();
  auto params = nn::init_parameters<double>(arch, 8);
  auto a = random_env(6, 3);
  const double single = irm_penalty(arch, params, nullptr, {a});
  CHECK(single >= 0.0);
  CHECK(irm_penalty(arch, params, nullptr, {a, a}) == 2 * single);
}

TEST_CASE("REx penalty") {
  std::vector<double> flat{1, 1, 1};
  CHECK(rex_penalty(flat) == 0.0);
  std::vector<double> two{1, 3};
  CHECK(rex_penalty(two) == 1.0);
  std::vector<double> r{0.3, 1.7, 0.9, 2.2};
  auto shifted = r, scaled = r;
  for (auto& v : shifted) v += 5.5;
  for (auto& v : scaled) v *= 3.0;
  CHECK(rex_penalty(shifted) == doctest::Approx(rex_penalty(r)).epsilon(1e-12));
  CHECK(rex_penalty(scaled) == doctest::Approx(9 * rex_penalty(r)).epsilon(1e-12));
  std::vector<double> one{1.0};
  CHECK_THROWS_AS(rex_penalty(one), ConfigError);
}

TEST_CASE("group DRO weights") {
  auto st = DroState::uniform(2);
  std::vector<double> r{1.0, 0.0};
  st.update(r, 1.0);
  const double e = std::exp(1.0);
  CHECK(st.q[0] == doctest::Approx(e / (e + 1)).epsilon(1e-14));
  CHECK(st.q[1] == doctest::Approx(1 / (e + 1)).epsilon(1e-14));

  auto eq = DroState{{0.2, 0.5, 0.3}};
  std::vector<double> same{0.7, 0.7, 0.7};
  eq.update(same, 0.3);
  CHECK(eq.q[0] == doctest::Approx(0.2).epsilon(1e-14));
  CHECK(eq.q[1] == doctest::Approx(0.5).epsilon(1e-14));

  auto tiny = DroState{{0.2, 0.8}};
  std::vector<double> rr{3.0, 1.0};
  tiny.update(rr, 1e-12);
  CHECK(tiny.q[0] == doctest::Approx(0.2).epsilon(1e-10));
  CHECK(tiny.loss(rr) == doctest::Approx(0.2 * 3 + 0.8).epsilon(1e-10));

  auto walk = DroState::uniform(3);
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 5.0);
  for (int t = 0; t < 10000; ++t) {
    std::vector<double> risks{u(rng), u(rng), u(rng)};
    walk.update(risks, 1.0);
    double s = 0;
    for (double q : walk.q) {
      REQUIRE(q >= 0.0);
      s += q;
    }
    REQUIRE(std::abs(s - 1.0) <= 1e-12);
  }
}

TEST_CASE("total objective with warmup and rescale") {
  std::vector<double> risks{1.5, 2.5};
  ObjectiveSpec erm;
  CHECK(total_objective(erm, 0, risks, 123.0) == 2.0);

  ObjectiveSpec irm{ObjectiveKind::irm, 100.0, 10, true, 0.01};
  CHECK(total_objective(irm, 10, risks, 0.01) == doctest::Approx(0.03).epsilon(1e-14));
  CHECK(total_objective(irm, 9, risks, 0.01) == doctest::Approx(2.01).epsilon(1e-14));
  ObjectiveSpec small{ObjectiveKind::rex, 0.5, 0, true, 0.01};
  CHECK(total_objective(small, 3, risks, 0.2) == doctest::Approx(2.1).epsilon(1e-14));

  ObjectiveSpec dro{ObjectiveKind::dro, 1.0, 0, false, 0.1};
  DroState st{{0.25, 0.75}};
  CHECK(total_objective(dro, 0, risks, 9.0, &st) == doctest::Approx(0.25 * 1.5 + 0.75 * 2.5));

  auto j = irm.to_json();
  auto back = ObjectiveSpec::from_json(j);
  CHECK(back.kind == ObjectiveKind::irm);
  CHECK(back.lambda == 100.0);
  CHECK(back.warmup_step == 10);
  CHECK(back.rescale);
  CHECK_THROWS_AS(objective_kind_from_string("VREX"), ConfigError);
}

TEST_CASE("objective gradients match finite differences for every objective") {
  auto arch = mlp();
  auto params = nn::init_parameters<double>(arch, 12);
  std::vector<EnvBatch<double>> envs{random_env(6, 20), random_env(5, 30)};
  for (auto kind : {ObjectiveKind::erm, ObjectiveKind::irm, ObjectiveKind::rex, ObjectiveKind::dro}) {
    ObjectiveSpec spec{kind, 7.0, 0, true, 0.5};
    auto dro = DroState::uniform(2);
    auto res = objective_and_grads(arch, params, nullptr, envs, spec, 3, &dro, false);
    const auto q = dro.q;  // weights frozen for the finite-difference pass
    auto value = [&](const nn::ParameterSet<double>& p) {
      auto risks = per_env_risks(arch, p, nullptr, envs);
      double pen = 0;
      if (kind == ObjectiveKind::irm) pen = irm_penalty(arch, p, nullptr, envs);
      if (kind == ObjectiveKind::rex) pen = rex_penalty(risks);
      DroState fixed{q};
      return total_objective(spec, 3, risks, pen, &fixed);
    };
    CHECK(res.objective == doctest::Approx(value(params)).epsilon(1e-12));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].value.size(); ++j) {
        auto up = params, down = params;
        up[i].value[j] += 1e-6;
        down[i].value[j] -= 1e-6;
        const double fd = (value(up) - value(down)) / 2e-6;
        INFO(to_string(kind), " ", params[i].name, "[", j, "]");
        CHECK(res.grads.params[i][j] == doctest::Approx(fd).epsilon(1e-4).scale(1e-3));
      }
    }
  }
}
