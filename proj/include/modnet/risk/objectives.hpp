#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "modnet/io.hpp"
#include "modnet/nn/network.hpp"

namespace modnet::risk {

enum class ObjectiveKind { erm, irm, rex, dro };

std::string to_string(ObjectiveKind k);
ObjectiveKind objective_kind_from_string(const std::string& s);

struct ObjectiveSpec {
  ObjectiveKind kind = ObjectiveKind::erm;
  double lambda = 1.0;
  std::int64_t warmup_step = 0;
  bool rescale = false;
  double eta_q = 0.01;

  void validate() const;
  io::json to_json() const;
  static ObjectiveSpec from_json(const io::json& j);
};

/// Mean of -log softmax(scores)[label]; dscores is the gradient of that mean.
template <typename T>
nn::ScoreLoss<T> cross_entropy(const Tensor<T>& scores, std::span<const int> labels);

/// IRMv1 term for one environment: g = dR(s*f)/ds at s = 1, and dg/dscores.
template <typename T>
struct IrmGrad {
  double g = 0.0;
  Tensor<T> dg;
};

template <typename T>
IrmGrad<T> irm_scale_gradient(const Tensor<T>& scores, std::span<const int> labels);

/// Population variance of the risks (divides by E).
double rex_penalty(std::span<const double> risks);

struct DroState {
  std::vector<double> q;

  static DroState uniform(std::size_t envs);
  /// q_e <- q_e exp(eta R_e), renormalized.
  void update(std::span<const double> risks, double eta_q);
  double loss(std::span<const double> risks) const;
};

/// Penalty multiplier c and overall scale s of J = s * (base + c * penalty).
struct PenaltySchedule {
  double coefficient = 0.0;
  double scale = 1.0;
};

PenaltySchedule penalty_schedule(const ObjectiveSpec& spec, std::int64_t step);

/// IRM/REx: s*(mean(risks) + c*penalty). DRO: sum q_e R_e (q from `dro`). ERM: mean.
double total_objective(const ObjectiveSpec& spec, std::int64_t step, std::span<const double> risks, double penalty,
                       const DroState* dro = nullptr);

template <typename T>
struct EnvBatch {
  Tensor<T> images;
  std::vector<int> labels;
};

template <typename T>
std::vector<double> per_env_risks(const nn::Architecture& arch, const nn::ParameterSet<T>& params,
                                  nn::MaskArg<T> mask, const std::vector<EnvBatch<T>>& envs,
                                  nn::Mode mode = nn::Mode::train);

template <typename T>
double irm_penalty(const nn::Architecture& arch, const nn::ParameterSet<T>& params, nn::MaskArg<T> mask,
                   const std::vector<EnvBatch<T>>& envs, nn::Mode mode = nn::Mode::train);

template <typename T>
struct ObjectiveResult {
  double objective = 0.0;
  double penalty = 0.0;
  std::vector<double> risks;
  std::vector<double> accuracy;  // per-environment batch accuracy
  nn::Gradients<T> grads;
  std::vector<nn::Trace<T>> traces;  // one per environment, for running statistics
};

/// One training-step evaluation: per-environment forward passes with shared
/// parameters, the chosen objective, and its gradients. For DRO, `dro` is
/// updated with this step's risks before the loss is formed.
template <typename T>
ObjectiveResult<T> objective_and_grads(const nn::Architecture& arch, const nn::ParameterSet<T>& params,
                                       nn::MaskArg<T> mask, const std::vector<EnvBatch<T>>& envs,
                                       const ObjectiveSpec& spec, std::int64_t step, DroState* dro,
                                       bool with_mask_grads);

}  // namespace modnet::risk
