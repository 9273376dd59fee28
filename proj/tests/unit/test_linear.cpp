#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "modnet/error.hpp"
#include "modnet/linear/theory.hpp"

using namespace modnet;
using namespace modnet::linear;
namespace fs = std::filesystem;

namespace {

LinearDataset from_rows(std::size_t D, const std::vector<std::vector<int>>& rows) {
  LinearDataset ds;
  ds.D = D;
  for (const auto& r : rows) {
    ds.z_inv.push_back(static_cast<std::int8_t>(r[0]));
    for (std::size_t j = 1; j <= D; ++j) ds.z_sp.push_back(static_cast<std::int8_t>(r[j]));
  }
  return ds;
}

// exact P(Bin(D, p) <= D/2), the regular classifier's seen error with ties wrong
double regular_error_exact(std::size_t D, double p) {
  double total = 0.0;
  for (std::size_t k = 0; 2 * k <= D; ++k)
    total += std::exp(std::lgamma(D + 1.0) - std::lgamma(k + 1.0) - std::lgamma(D - k + 1.0) + k * std::log(p) +
                      (D - k) * std::log1p(-p));
  return total;
}

}  // namespace

TEST_CASE("linear env sampling") {
  auto ds = sample_linear_env({12, 300, 1.0, 4});
  for (std::size_t i = 0; i < ds.size(); ++i)
    for (std::size_t j = 0; j < 12; ++j) CHECK(ds.z_sp[i * 12 + j] == ds.label(i));

  auto half = sample_linear_env({100, 10000, 0.5, 7});
  std::size_t agree = 0;
  for (std::size_t i = 0; i < half.size(); ++i)
    for (std::size_t j = 0; j < 100; ++j) agree += half.z_sp[i * 100 + j] == half.label(i);
  CHECK(std::abs(agree / 1e6 - 0.5) < 0.02);

  auto a = sample_linear_env({10, 50, 0.7, 9}), b = sample_linear_env({10, 50, 0.7, 9});
  CHECK(a.z_inv == b.z_inv);
  CHECK(a.z_sp == b.z_sp);
  CHECK_THROWS_AS(sample_linear_env({10, 5, 1.2, 0}), ConfigError);
}

TEST_CASE("reference classifiers") {
  auto reg = regular_classifier(50);
  double sq = 0.0;
  for (double w : reg.w_sp) sq += w * w;
  CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-15);
  CHECK(reg.w_inv == 0.0);
  CHECK_THROWS_AS(regular_classifier(0), ConfigError);

  auto sp = sparse_classifier(50);
  CHECK(sp.nonzeros() == 1);
  CHECK(sp.w_inv == 1.0);
}

TEST_CASE("error rates and margins") {
  for (double p : {0.0, 0.3, 0.5, 0.9}) {
    auto ds = sample_linear_env({20, 2000, p, 11});
    CHECK(error_rate(sparse_classifier(20), ds) == 0.0);
    CHECK(min_margin(sparse_classifier(20), ds) == 1.0);
  }

  // odd D has no ties; even D adds half the tie mass P(Bin(50, 1/2) = 25) = 0.112275
  auto odd = sample_linear_env({51, 100000, 0.5, 3});
  CHECK(std::abs(error_rate(regular_classifier(51), odd) - 0.5) < 0.01);
  auto big = sample_linear_env({50, 100000, 0.5, 3});
  CHECK(std::abs(error_rate(regular_classifier(50), big) - (0.5 + 0.112275 / 2)) < 0.01);
  CHECK(std::abs(error_rate(regular_classifier(50), big, TieRule::half) - 0.5) < 0.01);

  // regular margins are multiples of 1/sqrt(D)
  auto ds = sample_linear_env({9, 500, 0.7, 5});
  const double m = min_margin(regular_classifier(9), ds) * 3.0;
  CHECK(std::abs(m - std::round(m)) < 1e-12);

  // a single tied sample: margin 0, counted as an error
  auto tie = from_rows(2, {{1, 1, -1}});
  CHECK(min_margin(regular_classifier(2), tie) == 0.0);
  CHECK(error_rate(regular_classifier(2), tie) == 1.0);
  CHECK(error_rate(regular_classifier(2), tie, TieRule::half) == 0.5);

  CHECK_THROWS_AS(min_margin(sparse_classifier(2), LinearDataset{2, {}, {}}), ConfigError);
  CHECK_THROWS_AS(error_rate(sparse_classifier(3), tie), ShapeError);
}

TEST_CASE("regular seen error matches the binomial tail") {
  // D = 10, p = 0.7: P(Bin(10, 0.7) <= 5) = 0.1502683...
  const double exact = regular_error_exact(10, 0.7);
  CHECK(std::abs(exact - 0.15026833) < 1e-7);
  auto ds = sample_linear_env({10, 200000, 0.7, 21});
  const double sd = std::sqrt(exact * (1 - exact) / 200000.0);
  CHECK(std::abs(error_rate(regular_classifier(10), ds) - exact) < 4 * sd);
}

TEST_CASE("max-margin sparse fit") {
  SUBCASE("closed-form hulls") {
    // signed vectors (1,1) and (1,-1): optimum direction e1 with margin 1
    auto ds = from_rows(1, {{1, 1}, {1, -1}, {-1, -1}});
    auto f = maxmargin_sparse_fit(ds, 2);
    CHECK(std::abs(min_margin(f, ds) - 1.0) < 1e-12);
    CHECK(std::abs(f.w_inv - 1.0) < 1e-12);

    // every coordinate agrees with y: direction (1,1)/sqrt2, margin sqrt2
    auto all = from_rows(1, {{1, 1}, {-1, -1}});
    auto g = maxmargin_sparse_fit(all, 2);
    CHECK(std::abs(min_margin(g, all) - std::sqrt(2.0)) < 1e-12);

    // (1,1,-1), (1,-1,-1): min-norm hull point (1,0,-1)
    auto three = from_rows(2, {{1, 1, -1}, {1, -1, -1}});
    auto h = maxmargin_sparse_fit(three, 3);
    CHECK(std::abs(min_margin(h, three) - std::sqrt(2.0)) < 1e-12);
    CHECK(std::abs(h.w_sp[1] + 1.0 / std::sqrt(2.0)) < 1e-12);
  }

  SUBCASE("recovers the sparse classifier on biased data") {
    for (std::uint64_t s = 0; s < 5; ++s) {
      auto ds = sample_linear_env({8, 200, 0.8, s});
      auto f = maxmargin_sparse_fit(ds, 2);
      CHECK(f.nonzeros() <= 2);
      CHECK(min_margin(f, ds) >= 1.0 - 1e-12);
      CHECK(error_rate(f, ds) == 0.0);
      auto fresh = sample_linear_env({8, 500, 0.5, s + 100});
      CHECK(error_rate(f, fresh) == 0.0);
    }
  }

  SUBCASE("relaxation monotonicity and random-direction bound") {
    auto ds = sample_linear_env({5, 60, 0.8, 13});
    auto f2 = maxmargin_sparse_fit(ds, 2);
    auto full = maxmargin_sparse_fit(ds, 6);
    const double m2 = min_margin(f2, ds), mf = min_margin(full, ds);
    CHECK(mf >= m2 - 1e-12);
    double sq = full.w_inv * full.w_inv;
    for (double w : full.w_sp) sq += w * w;
    CHECK(std::abs(sq - 1.0) < 1e-9);

    // no random unit direction does better than the fitted one
    std::mt19937_64 rng(1);
    std::normal_distribution<double> g;
    double best = -1e9;
    for (int t = 0; t < 20000; ++t) {
      LinearClassifier c{g(rng), std::vector<double>(5)};
      double nn = c.w_inv * c.w_inv;
      for (auto& w : c.w_sp) nn += (w = g(rng)) * w;
      nn = std::sqrt(nn);
      c.w_inv /= nn;
      for (auto& w : c.w_sp) w /= nn;
      best = std::max(best, min_margin(c, ds));
    }
    CHECK(best <= mf + 1e-12);
  }

  SUBCASE("degenerate and oversized inputs") {
    auto ds = sample_linear_env({4, 20, 0.6, 2});
    auto z = maxmargin_sparse_fit(ds, 0);
    CHECK(z.nonzeros() == 0);
    CHECK(min_margin(z, ds) == 0.0);
    CHECK_THROWS_AS(maxmargin_sparse_fit(sample_linear_env({16, 10, 0.6, 2}), 2), ConfigError);
  }
}

TEST_CASE("proposition report gating") {
  SUBCASE("vacuous bound at c = 0") {
    auto r = verify_proposition(0.0, 10, 100, 0.1, 5, 1, {20000, 0.02, 0.05});
    CHECK(r.vacuous_bound);
    CHECK(r.hoeffding_bound == 2.0);
    CHECK_FALSE(r.margin_checked);
    CHECK(r.seen_within_bound);
  }
  SUBCASE("margin unchecked below the dimension threshold") {
    // threshold (1/0.8) sqrt(2 ln 1000 / 0.1) = 14.6924
    auto r = verify_proposition(0.4, 11, 1000, 0.1, 5, 1, {20000, 0.02, 0.05});
    CHECK(std::abs(r.margin_threshold_D - 14.6924) < 1e-3);
    CHECK_FALSE(r.margin_checked);
    CHECK(r.margin_holds);
    CHECK(r.sparse_zero_error);
    CHECK(r.unseen_near_half);
  }
  SUBCASE("parameters and csv") {
    auto r = verify_proposition(0.4, 50, 200, 0.1, 3, 7, {20000, 0.02, 0.05});
    CHECK(r.p_seen == doctest::Approx(0.75));
    CHECK(r.hoeffding_bound == doctest::Approx(2 * std::exp(-16.0)));
    CHECK(r.trials.size() == 3);
    auto path = fs::temp_directory_path() / "modnet_linear.csv";
    write_proposition_csv({r}, path);
    std::ifstream in(path);
    std::string header;
    std::getline(in, header);
    CHECK(header == "c,D,n,p,empirical_err,hoeffding_bound,margin_sparse,margin_regular_min");
    int rows = 0;
    for (std::string line; std::getline(in, line);) ++rows;
    CHECK(rows == 3);
    fs::remove(path);
  }
  CHECK_THROWS_AS(verify_proposition(1.0, 10, 10, 0.1, 1, 0), ConfigError);
}
