#include "modnet/linear/theory.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "modnet/data/biased.hpp"
#include "modnet/error.hpp"
#include "modnet/io.hpp"

namespace modnet::linear {

double LinearClassifier::score(const LinearDataset& ds, std::size_t i) const {
  // positive and negative parts are summed separately so that equal-weight
  // ties cancel to exactly zero
  const std::int8_t* z = ds.z_sp.data() + i * ds.D;
  double pos = 0.0, neg = 0.0;
  for (std::size_t j = 0; j < ds.D; ++j) (z[j] > 0 ? pos : neg) += w_sp[j];
  return w_inv * ds.z_inv[i] + (pos - neg);
}

std::size_t LinearClassifier::nonzeros() const {
  return (w_inv != 0.0 ? 1 : 0) + static_cast<std::size_t>(std::count_if(w_sp.begin(), w_sp.end(), [](double w) {
           return w != 0.0;
         }));
}

LinearDataset sample_linear_env(const LinearEnvConfig& cfg) {
  if (cfg.p < 0.0 || cfg.p > 1.0) throw ConfigError("bias probability must lie in [0,1]");
  LinearDataset ds;
  ds.D = cfg.D;
  ds.z_inv.resize(cfg.n);
  ds.z_sp.resize(cfg.n * cfg.D);
  std::mt19937_64 rng(cfg.seed);
  std::bernoulli_distribution label(0.5), agree(cfg.p);
  for (std::size_t i = 0; i < cfg.n; ++i) {
    const std::int8_t y = label(rng) ? 1 : -1;
    ds.z_inv[i] = y;
    for (std::size_t j = 0; j < cfg.D; ++j) ds.z_sp[i * cfg.D + j] = agree(rng) ? y : static_cast<std::int8_t>(-y);
  }
  return ds;
}

LinearClassifier sparse_classifier(std::size_t D) {
  return {1.0, std::vector<double>(D, 0.0)};
}

LinearClassifier regular_classifier(std::size_t D) {
  if (D == 0) throw ConfigError("regular classifier needs D >= 1");
  return {0.0, std::vector<double>(D, 1.0 / std::sqrt(static_cast<double>(D)))};
}

namespace {

void check_dims(const LinearClassifier& clf, const LinearDataset& ds) {
  if (clf.w_sp.size() != ds.D) throw ShapeError("classifier dimension does not match dataset");
}

// Min-norm point of the convex hull of the columns of P (Wolfe's method).
Eigen::VectorXd min_norm_point(const Eigen::MatrixXd& P) {
  const double scale = P.colwise().squaredNorm().maxCoeff();
  const double eps = 1e-12 * std::max(scale, 1.0);
  Eigen::Index first;
  (void)P.colwise().squaredNorm().minCoeff(&first);
  std::vector<Eigen::Index> S{first};
  std::vector<double> lam{1.0};
  Eigen::VectorXd x = P.col(first);

  for (int outer = 0; outer < 1000; ++outer) {
    Eigen::Index j;
    const double best = (P.transpose() * x).minCoeff(&j);
    if (x.squaredNorm() - best <= eps) break;
    if (std::find(S.begin(), S.end(), j) != S.end()) break;
    S.push_back(j);
    lam.push_back(0.0);

    for (int inner = 0; inner < 1000; ++inner) {
      const Eigen::Index k = static_cast<Eigen::Index>(S.size());
      Eigen::MatrixXd A = Eigen::MatrixXd::Zero(k + 1, k + 1);
      for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = 0; b < k; ++b) A(a, b) = P.col(S[a]).dot(P.col(S[b]));
        A(a, k) = 1.0;
        A(k, a) = 1.0;
      }
      Eigen::VectorXd rhs = Eigen::VectorXd::Zero(k + 1);
      rhs(k) = 1.0;
      const Eigen::VectorXd sol = A.completeOrthogonalDecomposition().solve(rhs);
      const Eigen::VectorXd mu = sol.head(k);
      if ((mu.array() > 1e-12).all()) {
        for (Eigen::Index a = 0; a < k; ++a) lam[a] = mu(a);
        break;
      }
      double theta = 1.0;
      for (Eigen::Index a = 0; a < k; ++a)
        if (mu(a) <= 1e-12) theta = std::min(theta, lam[a] / (lam[a] - mu(a)));
      std::vector<Eigen::Index> S2;
      std::vector<double> lam2;
      for (Eigen::Index a = 0; a < k; ++a) {
        const double v = theta * mu(a) + (1.0 - theta) * lam[a];
        if (v > 1e-12) {
          S2.push_back(S[a]);
          lam2.push_back(v);
        }
      }
      S = std::move(S2);
      lam = std::move(lam2);
      if (S.size() == 1) {
        lam[0] = 1.0;
        break;
      }
    }
    double total = 0.0;
    for (double v : lam) total += v;
    x.setZero();
    for (std::size_t a = 0; a < S.size(); ++a) x += (lam[a] / total) * P.col(S[a]);
  }
  return x;
}

// Minimum of w . v over the deduped signed vectors (bit b set -> coordinate b is +1).
double pattern_margin(const std::vector<std::uint32_t>& patterns, const std::vector<double>& w) {
  double m = std::numeric_limits<double>::infinity();
  for (std::uint32_t pat : patterns) {
    double s = 0.0;
    for (std::size_t b = 0; b < w.size(); ++b) s += (pat >> b & 1u) ? w[b] : -w[b];
    m = std::min(m, s);
  }
  return m;
}

}  // namespace

double error_rate(const LinearClassifier& clf, const LinearDataset& ds, TieRule ties) {
  check_dims(clf, ds);
  if (ds.size() == 0) return 0.0;
  double wrong = 0.0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const double m = ds.label(i) * clf.score(ds, i);
    if (m < 0.0)
      wrong += 1.0;
    else if (m == 0.0)
      wrong += ties == TieRule::error ? 1.0 : 0.5;
  }
  return wrong / static_cast<double>(ds.size());
}

double min_margin(const LinearClassifier& clf, const LinearDataset& ds) {
  check_dims(clf, ds);
  if (ds.size() == 0) throw ConfigError("margin of an empty dataset");
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ds.size(); ++i) m = std::min(m, ds.label(i) * clf.score(ds, i));
  return m;
}

LinearClassifier maxmargin_sparse_fit(const LinearDataset& ds, std::size_t d) {
  const std::size_t dim = ds.D + 1;
  if (ds.D > 15) throw ConfigError("maxmargin_sparse_fit enumerates subsets and supports D <= 15");
  if (ds.size() == 0) throw ConfigError("maxmargin_sparse_fit on an empty dataset");
  LinearClassifier best{0.0, std::vector<double>(ds.D, 0.0)};
  if (d == 0) return best;
  d = std::min(d, dim);

  // y * x for coordinate c of sample i; coordinate 0 is the invariant one
  auto signed_coord = [&](std::size_t i, std::size_t c) {
    const int y = ds.label(i);
    return c == 0 ? y * ds.z_inv[i] : y * ds.z_sp[i * ds.D + c - 1];
  };

  double best_margin = -std::numeric_limits<double>::infinity();
  std::vector<std::size_t> subset;
  for (std::size_t k = 1; k <= d; ++k) {
    // iterate k-combinations of dim in lexicographic order
    subset.resize(k);
    for (std::size_t a = 0; a < k; ++a) subset[a] = a;
    while (true) {
      std::set<std::uint32_t> uniq;
      for (std::size_t i = 0; i < ds.size(); ++i) {
        std::uint32_t pat = 0;
        for (std::size_t b = 0; b < k; ++b)
          if (signed_coord(i, subset[b]) > 0) pat |= 1u << b;
        uniq.insert(pat);
      }
      const std::vector<std::uint32_t> patterns(uniq.begin(), uniq.end());

      Eigen::MatrixXd P(k, patterns.size());
      for (std::size_t c = 0; c < patterns.size(); ++c)
        for (std::size_t b = 0; b < k; ++b) P(b, c) = (patterns[c] >> b & 1u) ? 1.0 : -1.0;
      std::vector<double> w(k, 0.0);
      double margin = -std::numeric_limits<double>::infinity();
      const Eigen::VectorXd x = min_norm_point(P);
      if (x.norm() > 1e-9) {
        const Eigen::VectorXd u = x / x.norm();
        std::vector<double> cand(u.data(), u.data() + k);
        margin = pattern_margin(patterns, cand);
        w = cand;
      } else {
        // not separable on this subset: best balanced sign pattern
        const double inv = 1.0 / std::sqrt(static_cast<double>(k));
        for (std::uint32_t s = 0; s < (1u << k); ++s) {
          std::vector<double> cand(k);
          for (std::size_t b = 0; b < k; ++b) cand[b] = (s >> b & 1u) ? inv : -inv;
          const double mm = pattern_margin(patterns, cand);
          if (mm > margin) {
            margin = mm;
            w = cand;
          }
        }
      }
      if (margin > best_margin + 1e-12) {
        best_margin = margin;
        best = LinearClassifier{0.0, std::vector<double>(ds.D, 0.0)};
        for (std::size_t b = 0; b < k; ++b) {
          if (subset[b] == 0)
            best.w_inv = w[b];
          else
            best.w_sp[subset[b] - 1] = w[b];
        }
      }

      std::size_t a = k;
      while (a > 0 && subset[a - 1] == dim - k + a - 1) --a;
      if (a == 0) break;
      ++subset[a - 1];
      for (std::size_t b = a; b < k; ++b) subset[b] = subset[b - 1] + 1;
    }
  }
  return best;
}

PropositionReport verify_proposition(double c, std::size_t D, std::size_t n, double delta, std::size_t trials,
                                     std::uint64_t seed, const VerifyOptions& opt) {
  if (c < 0.0 || c >= 1.0) throw ConfigError("c must lie in [0,1)");
  if (delta <= 0.0 || delta >= 1.0) throw ConfigError("delta must lie in (0,1)");
  if (D == 0 || n == 0) throw ConfigError("D and n must be positive");

  PropositionReport r;
  r.c = c;
  r.D = D;
  r.n = n;
  r.delta = delta;
  r.p_seen = std::min(1.0, 0.5 + c / 2.0 + opt.p_offset);
  r.hoeffding_bound = 2.0 * std::exp(-2.0 * c * c * static_cast<double>(D));
  r.vacuous_bound = r.hoeffding_bound >= 1.0;
  const double b = std::min(r.hoeffding_bound, 1.0);
  r.seen_tolerance = r.hoeffding_bound + 3.0 * std::sqrt(b * (1.0 - b) / static_cast<double>(n));
  r.margin_threshold_D = c > 0.0 ? std::sqrt(2.0 * std::log(static_cast<double>(n)) / delta) / (2.0 * c)
                                 : std::numeric_limits<double>::infinity();
  r.margin_checked = static_cast<double>(D) >= r.margin_threshold_D;
  r.mc_samples = opt.mc_samples;
  r.unseen_tolerance = opt.unseen_tolerance;
  r.ties = opt.ties;

  const LinearClassifier sparse = sparse_classifier(D);
  const LinearClassifier regular = regular_classifier(D);

  std::size_t wins = 0;
  r.sparse_zero_error = true;
  r.seen_within_bound = true;
  for (std::size_t t = 0; t < trials; ++t) {
    const auto seen = sample_linear_env({D, n, r.p_seen, data::derive_seed(seed, t, 1)});
    const auto unseen = sample_linear_env({D, n, 0.5, data::derive_seed(seed, t, 2)});
    TrialResult tr;
    tr.sparse_err_seen = error_rate(sparse, seen, opt.ties);
    tr.sparse_err_unseen = error_rate(sparse, unseen, opt.ties);
    tr.regular_err_seen = error_rate(regular, seen, opt.ties);
    tr.sparse_margin = min_margin(sparse, seen);
    tr.regular_margin = min_margin(regular, seen);
    if (tr.sparse_err_seen != 0.0 || tr.sparse_err_unseen != 0.0) r.sparse_zero_error = false;
    if (!r.vacuous_bound && tr.regular_err_seen > r.seen_tolerance) r.seen_within_bound = false;
    if (tr.sparse_margin < tr.regular_margin) ++wins;
    r.trials.push_back(tr);
  }
  r.margin_win_fraction = trials ? static_cast<double>(wins) / static_cast<double>(trials) : 0.0;
  r.margin_holds = !r.margin_checked || r.margin_win_fraction >= 1.0 - delta;

  const auto mc = sample_linear_env({D, opt.mc_samples, 0.5, data::derive_seed(seed, 0x3c, 3)});
  r.regular_unseen_err = error_rate(regular, mc, opt.ties);
  r.unseen_near_half = std::abs(r.regular_unseen_err - 0.5) <= opt.unseen_tolerance;
  return r;
}

void write_proposition_csv(const std::vector<PropositionReport>& reports, const std::filesystem::path& path) {
  std::string out = "c,D,n,p,empirical_err,hoeffding_bound,margin_sparse,margin_regular_min\n";
  char buf[256];
  for (const auto& r : reports)
    for (const auto& t : r.trials) {
      std::snprintf(buf, sizeof buf, "%.6g,%zu,%zu,%.6g,%.9g,%.9g,%.9g,%.9g\n", r.c, r.D, r.n, r.p_seen,
                    t.regular_err_seen, r.hoeffding_bound, t.sparse_margin, t.regular_margin);
      out += buf;
    }
  io::write_text(path, out);
}

}  // namespace modnet::linear
