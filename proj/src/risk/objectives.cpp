#include "modnet/risk/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace modnet::risk {

namespace {

template <typename T>
std::vector<double> softmax_row(const T* s, std::size_t C) {
  double mx = s[0];
  for (std::size_t k = 1; k < C; ++k) mx = std::max<double>(mx, s[k]);
  std::vector<double> p(C);
  double z = 0;
  for (std::size_t k = 0; k < C; ++k) z += (p[k] = std::exp(static_cast<double>(s[k]) - mx));
  for (auto& v : p) v /= z;
  return p;
}

template <typename T>
void check_labels(const Tensor<T>& scores, std::span<const int> labels) {
  if (scores.shape().size() != 2) throw ShapeError("scores must be a matrix");
  if (labels.size() != scores.shape()[0]) throw ShapeError("label count differs from batch size");
  const auto C = static_cast<int>(scores.shape()[1]);
  for (int y : labels)
    if (y < 0 || y >= C) throw ConfigError("label " + std::to_string(y) + " outside [0," + std::to_string(C) + ")");
}

}  // namespace

std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::erm: return "ERM";
    case ObjectiveKind::irm: return "IRM";
    case ObjectiveKind::rex: return "REx";
    case ObjectiveKind::dro: return "DRO";
  }
  return "?";
}

ObjectiveKind objective_kind_from_string(const std::string& s) {
  std::string u = s;
  std::transform(u.begin(), u.end(), u.begin(), [](unsigned char c) { return std::toupper(c); });
  if (u == "ERM") return ObjectiveKind::erm;
  if (u == "IRM") return ObjectiveKind::irm;
  if (u == "REX") return ObjectiveKind::rex;
  if (u == "DRO") return ObjectiveKind::dro;
  throw ConfigError("unknown objective '" + s + "'");
}

void ObjectiveSpec::validate() const {
  if (!(lambda >= 0.0)) throw ConfigError("penalty coefficient must be non-negative");
  if (warmup_step < 0) throw ConfigError("warmup step must be non-negative");
  if (kind == ObjectiveKind::dro && !(eta_q > 0.0)) throw ConfigError("DRO step size must be positive");
}

io::json ObjectiveSpec::to_json() const {
  return {{"kind", to_string(kind)}, {"lambda", lambda}, {"warmup_step", warmup_step}, {"rescale", rescale},
          {"eta_q", eta_q}};
}

ObjectiveSpec ObjectiveSpec::from_json(const io::json& j) {
  ObjectiveSpec s;
  s.kind = objective_kind_from_string(j.value("kind", std::string("ERM")));
  s.lambda = j.value("lambda", s.lambda);
  s.warmup_step = j.value("warmup_step", s.warmup_step);
  s.rescale = j.value("rescale", s.rescale);
  s.eta_q = j.value("eta_q", s.eta_q);
  s.validate();
  return s;
}

template <typename T>
nn::ScoreLoss<T> cross_entropy(const Tensor<T>& scores, std::span<const int> labels) {
  check_labels(scores, labels);
  const std::size_t N = scores.shape()[0], C = scores.shape()[1];
  nn::ScoreLoss<T> out{T{0}, Tensor<T>(scores.shape())};
  double total = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* s = scores.data() + n * C;
    double mx = s[0];
    for (std::size_t k = 1; k < C; ++k) mx = std::max<double>(mx, s[k]);
    double z = 0;
    for (std::size_t k = 0; k < C; ++k) z += std::exp(static_cast<double>(s[k]) - mx);
    const double lse = mx + std::log(z);
    total += lse - s[labels[n]];
    for (std::size_t k = 0; k < C; ++k) {
      const double p = std::exp(static_cast<double>(s[k]) - lse);
      out.dscores[n * C + k] = static_cast<T>((p - (static_cast<int>(k) == labels[n] ? 1.0 : 0.0)) / N);
    }
  }
  out.value = static_cast<T>(total / N);
  return out;
}

template <typename T>
IrmGrad<T> irm_scale_gradient(const Tensor<T>& scores, std::span<const int> labels) {
  check_labels(scores, labels);
  const std::size_t N = scores.shape()[0], C = scores.shape()[1];
  IrmGrad<T> out{0.0, Tensor<T>(scores.shape())};
  for (std::size_t n = 0; n < N; ++n) {
    const T* z = scores.data() + n * C;
    const auto p = softmax_row(z, C);
    double zbar = 0;
    for (std::size_t k = 0; k < C; ++k) zbar += p[k] * z[k];
    for (std::size_t k = 0; k < C; ++k) {
      const double y = static_cast<int>(k) == labels[n] ? 1.0 : 0.0;
      out.g += (p[k] - y) * z[k];
      out.dg[n * C + k] = static_cast<T>((p[k] - y + p[k] * (z[k] - zbar)) / N);
    }
  }
  out.g /= static_cast<double>(N);
  return out;
}

double rex_penalty(std::span<const double> risks) {
  if (risks.size() < 2) throw ConfigError("REx penalty needs at least two environments");
  const double mean = std::accumulate(risks.begin(), risks.end(), 0.0) / risks.size();
  double v = 0;
  for (double r : risks) v += (r - mean) * (r - mean);
  return v / risks.size();
}

DroState DroState::uniform(std::size_t envs) {
  if (envs == 0) throw ConfigError("DRO needs at least one environment");
  return {std::vector<double>(envs, 1.0 / envs)};
}

void DroState::update(std::span<const double> risks, double eta_q) {
  if (!(eta_q > 0.0)) throw ConfigError("DRO step size must be positive");
  if (risks.size() != q.size()) throw ShapeError("DRO state and risks differ in length");
  // Work in log space so long runs cannot overflow.
  std::vector<double> lq(q.size());
  double mx = -INFINITY;
  for (std::size_t e = 0; e < q.size(); ++e) {
    lq[e] = std::log(q[e]) + eta_q * risks[e];
    mx = std::max(mx, lq[e]);
  }
  double z = 0;
  for (auto& v : lq) z += (v = std::exp(v - mx));
  for (std::size_t e = 0; e < q.size(); ++e) q[e] = lq[e] / z;
}

double DroState::loss(std::span<const double> risks) const {
  if (risks.size() != q.size()) throw ShapeError("DRO state and risks differ in length");
  double s = 0;
  for (std::size_t e = 0; e < q.size(); ++e) s += q[e] * risks[e];
  return s;
}

PenaltySchedule penalty_schedule(const ObjectiveSpec& spec, std::int64_t step) {
  if (spec.kind != ObjectiveKind::irm && spec.kind != ObjectiveKind::rex) return {0.0, 1.0};
  if (step < spec.warmup_step) return {1.0, 1.0};
  return {spec.lambda, spec.rescale && spec.lambda > 1.0 ? 1.0 / spec.lambda : 1.0};
}

double total_objective(const ObjectiveSpec& spec, std::int64_t step, std::span<const double> risks, double penalty,
                       const DroState* dro) {
  if (risks.empty()) throw ConfigError("objective needs at least one environment risk");
  if (spec.kind == ObjectiveKind::dro) {
    return dro ? dro->loss(risks) : DroState::uniform(risks.size()).loss(risks);
  }
  const double mean = std::accumulate(risks.begin(), risks.end(), 0.0) / risks.size();
  const auto ps = penalty_schedule(spec, step);
  return ps.scale * (mean + ps.coefficient * penalty);
}

template <typename T>
std::vector<double> per_env_risks(const nn::Architecture& arch, const nn::ParameterSet<T>& params,
                                  nn::MaskArg<T> mask, const std::vector<EnvBatch<T>>& envs, nn::Mode mode) {
  std::vector<double> out;
  for (const auto& e : envs) {
    if (e.labels.empty()) throw ConfigError("empty environment batch");
    out.push_back(cross_entropy(nn::forward(arch, params, mask, e.images, mode), e.labels).value);
  }
  return out;
}

template <typename T>
double irm_penalty(const nn::Architecture& arch, const nn::ParameterSet<T>& params, nn::MaskArg<T> mask,
                   const std::vector<EnvBatch<T>>& envs, nn::Mode mode) {
  double p = 0;
  for (const auto& e : envs) {
    if (e.labels.empty()) throw ConfigError("empty environment batch");
    const double g = irm_scale_gradient(nn::forward(arch, params, mask, e.images, mode), e.labels).g;
    p += g * g;
  }
  return p;
}

template <typename T>
ObjectiveResult<T> objective_and_grads(const nn::Architecture& arch, const nn::ParameterSet<T>& params,
                                       nn::MaskArg<T> mask, const std::vector<EnvBatch<T>>& envs,
                                       const ObjectiveSpec& spec, std::int64_t step, DroState* dro,
                                       bool with_mask_grads) {
  if (envs.empty()) throw ConfigError("objective needs at least one environment batch");
  const std::size_t E = envs.size();
  ObjectiveResult<T> r;
  r.grads = nn::Gradients<T>::zeros_like(params, with_mask_grads);
  std::vector<nn::ScoreLoss<T>> ce;
  std::vector<IrmGrad<T>> irm;
  for (const auto& e : envs) {
    if (e.labels.empty()) throw ConfigError("empty environment batch");
    r.traces.push_back(nn::forward_trace(arch, params, mask, e.images, nn::Mode::train));
    const auto& scores = r.traces.back().scores();
    ce.push_back(cross_entropy(scores, e.labels));
    r.risks.push_back(ce.back().value);
    const std::size_t C = scores.shape()[1];
    std::size_t hit = 0;
    for (std::size_t n = 0; n < e.labels.size(); ++n) {
      const T* s = scores.data() + n * C;
      hit += static_cast<int>(std::max_element(s, s + C) - s) == e.labels[n];
    }
    r.accuracy.push_back(static_cast<double>(hit) / e.labels.size());
    if (spec.kind == ObjectiveKind::irm) irm.push_back(irm_scale_gradient(scores, e.labels));
  }

  std::vector<double> w(E, 1.0 / E);  // dJ/dR_e
  std::vector<double> wg(E, 0.0);     // dJ/dg_e (IRM)
  const auto ps = penalty_schedule(spec, step);
  switch (spec.kind) {
    case ObjectiveKind::erm:
      break;
    case ObjectiveKind::irm:
      for (std::size_t e = 0; e < E; ++e) {
        r.penalty += irm[e].g * irm[e].g;
        wg[e] = ps.scale * ps.coefficient * 2.0 * irm[e].g;
        w[e] *= ps.scale;
      }
      break;
    case ObjectiveKind::rex: {
      r.penalty = E >= 2 ? rex_penalty(r.risks) : 0.0;
      const double mean = std::accumulate(r.risks.begin(), r.risks.end(), 0.0) / E;
      for (std::size_t e = 0; e < E; ++e) {
        w[e] = ps.scale * (1.0 / E + ps.coefficient * 2.0 * (r.risks[e] - mean) / E);
      }
      break;
    }
    case ObjectiveKind::dro:
      if (!dro) throw ConfigError("DRO objective needs a DRO state");
      dro->update(r.risks, spec.eta_q);
      w = dro->q;
      break;
  }
  r.objective = total_objective(spec, step, r.risks, r.penalty, dro);
  if (!std::isfinite(r.objective)) throw NumericalError("non-finite objective", step);

  for (std::size_t e = 0; e < E; ++e) {
    Tensor<T> d = ce[e].dscores;
    const T a = static_cast<T>(w[e]);
    for (auto& v : d.values()) v *= a;
    if (spec.kind == ObjectiveKind::irm) {
      const T b = static_cast<T>(wg[e]);
      for (std::size_t i = 0; i < d.size(); ++i) d[i] += b * irm[e].dg[i];
    }
    nn::backward(r.traces[e], d, r.grads);
  }
  return r;
}

#define MODNET_INSTANTIATE(T)                                                                                      \
  template nn::ScoreLoss<T> cross_entropy<T>(const Tensor<T>&, std::span<const int>);                             \
  template IrmGrad<T> irm_scale_gradient<T>(const Tensor<T>&, std::span<const int>);                              \
  template std::vector<double> per_env_risks<T>(const nn::Architecture&, const nn::ParameterSet<T>&,              \
                                                nn::MaskArg<T>, const std::vector<EnvBatch<T>>&, nn::Mode);        \
  template double irm_penalty<T>(const nn::Architecture&, const nn::ParameterSet<T>&, nn::MaskArg<T>,             \
                                 const std::vector<EnvBatch<T>>&, nn::Mode);                                       \
  template ObjectiveResult<T> objective_and_grads<T>(const nn::Architecture&, const nn::ParameterSet<T>&,         \
                                                     nn::MaskArg<T>, const std::vector<EnvBatch<T>>&,              \
                                                     const ObjectiveSpec&, std::int64_t, DroState*, bool);

MODNET_INSTANTIATE(float)
MODNET_INSTANTIATE(double)

#undef MODNET_INSTANTIATE

}  // namespace modnet::risk
