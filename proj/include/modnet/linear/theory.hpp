#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace modnet::linear {

struct LinearEnvConfig {
  std::size_t D = 50;
  std::size_t n = 1000;
  double p = 0.5;
  std::uint64_t seed = 0;
};

/// Row-major samples. z_sp holds n * D entries in {-1, +1}; y equals z_inv.
struct LinearDataset {
  std::size_t D = 0;
  std::vector<std::int8_t> z_inv;
  std::vector<std::int8_t> z_sp;

  std::size_t size() const { return z_inv.size(); }
  int label(std::size_t i) const { return z_inv[i]; }
};

struct LinearClassifier {
  double w_inv = 0.0;
  std::vector<double> w_sp;

  double score(const LinearDataset& ds, std::size_t i) const;
  std::size_t nonzeros() const;
};

LinearDataset sample_linear_env(const LinearEnvConfig& cfg);

LinearClassifier sparse_classifier(std::size_t D);
LinearClassifier regular_classifier(std::size_t D);

/// How a zero score is scored: a full mistake, or half (sign(0) = 0).
enum class TieRule { error, half };

/// Mean of (1 - y sign(score)) / 2. By default a zero score counts as a mistake.
double error_rate(const LinearClassifier& clf, const LinearDataset& ds, TieRule ties = TieRule::error);

/// Minimum of y * score over the samples. Throws on an empty dataset.
double min_margin(const LinearClassifier& clf, const LinearDataset& ds);

/// Best unit-norm classifier using at most d of the D+1 coordinates,
/// by exhaustive subset search. D is limited to 15.
LinearClassifier maxmargin_sparse_fit(const LinearDataset& ds, std::size_t d);

struct TrialResult {
  double sparse_err_seen = 0.0;
  double sparse_err_unseen = 0.0;
  double regular_err_seen = 0.0;
  double sparse_margin = 0.0;
  double regular_margin = 0.0;
};

struct PropositionReport {
  double c = 0.0;
  std::size_t D = 0;
  std::size_t n = 0;
  double delta = 0.0;
  double p_seen = 0.0;
  double hoeffding_bound = 0.0;
  double seen_tolerance = 0.0;  // bound + 3 binomial standard deviations at n
  bool vacuous_bound = false;
  double margin_threshold_D = 0.0;
  bool margin_checked = false;
  double regular_unseen_err = 0.0;  // Monte-Carlo estimate
  std::size_t mc_samples = 0;
  double unseen_tolerance = 0.0;
  double margin_win_fraction = 0.0;
  TieRule ties = TieRule::error;
  std::vector<TrialResult> trials;

  bool sparse_zero_error = false;
  bool seen_within_bound = false;
  bool unseen_near_half = false;
  bool margin_holds = false;  // true when unchecked

  bool all_pass() const { return sparse_zero_error && seen_within_bound && unseen_near_half && margin_holds; }
};

struct VerifyOptions {
  std::size_t mc_samples = 100000;
  double unseen_tolerance = 0.02;
  double p_offset = 0.05;
  TieRule ties = TieRule::error;
};

PropositionReport verify_proposition(double c, std::size_t D, std::size_t n, double delta, std::size_t trials,
                                     std::uint64_t seed, const VerifyOptions& opt = {});

/// Writes one row per trial: c, D, n, p, empirical_err, hoeffding_bound,
/// margin_sparse, margin_regular_min.
void write_proposition_csv(const std::vector<PropositionReport>& reports, const std::filesystem::path& path);

}  // namespace modnet::linear
