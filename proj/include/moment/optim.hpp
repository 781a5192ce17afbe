#pragma once

#include <cmath>
#include <map>
#include <numbers>
#include <string>

#include "moment/autodiff.hpp"
#include "moment/errors.hpp"

namespace moment {

template <typename Scalar>
using ParameterMap = std::map<std::string, Matrix<Scalar>>;

struct CosineSchedule {
  double lr_init = 1e-4;
  double lr_final = 1e-5;
  long total_steps = 1;
};

// lr_final + (lr_init - lr_final) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(long step, const CosineSchedule& sched) {
  if (sched.total_steps <= 0) throw ContractError("cosine schedule needs total_steps > 0");
  if (step < 0 || step > sched.total_steps) {
    throw ContractError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                        std::to_string(sched.total_steps) + "]");
  }
  if (step == 0) return sched.lr_init;
  if (step == sched.total_steps) return sched.lr_final;
  const double progress = static_cast<double>(step) / static_cast<double>(sched.total_steps);
  return sched.lr_final + 0.5 * (sched.lr_init - sched.lr_final) * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename Scalar>
double global_norm(const ParameterMap<Scalar>& grads) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += g.template cast<double>().squaredNorm();
  return std::sqrt(sq);
}

// Rescales every gradient by max_norm / ||g|| when the global L2 norm exceeds
// max_norm. Returns the pre-clip norm.
template <typename Scalar>
double clip_global_norm(ParameterMap<Scalar>& grads, double max_norm = 5.0) {
  if (!(max_norm > 0.0)) throw ContractError("clip_global_norm: max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const auto factor = static_cast<Scalar>(max_norm / norm);
    for (auto& [name, g] : grads) g *= factor;
  }
  return norm;
}

struct AdamWHyper {
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
class AdamW {
 public:
  explicit AdamW(AdamWHyper hyper = {}) : hyper_(hyper) {}

  long step_count() const { return step_count_; }
  const AdamWHyper& hyper() const { return hyper_; }
  const ParameterMap<Scalar>& first_moment() const { return m_; }
  const ParameterMap<Scalar>& second_moment() const { return v_; }

  // Decoupled decay: theta <- theta - lr*lambda*theta, then the bias-corrected
  // Adam step. Only parameters present in `grads` are touched.
  void step(ParameterMap<Scalar>& params, const ParameterMap<Scalar>& grads, double lr) {
    if (!(lr > 0.0)) throw ContractError("adamw_step: learning rate must be positive");
    for (const auto& [name, g] : grads) {
      auto it = params.find(name);
      if (it == params.end()) throw ContractError("adamw_step: gradient for unknown parameter '" + name + "'");
      if (it->second.rows() != g.rows() || it->second.cols() != g.cols()) {
        throw DimensionError("adamw_step: gradient shape mismatch for '" + name + "'");
      }
      if (!g.allFinite()) throw TrainingError("non-finite gradient in parameter '" + name + "'");
    }
    ++step_count_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_count_));
    const auto b1 = static_cast<Scalar>(hyper_.beta1);
    const auto b2 = static_cast<Scalar>(hyper_.beta2);
    const auto decay = static_cast<Scalar>(1.0 - lr * hyper_.weight_decay);
    const auto step_size = static_cast<Scalar>(lr / bc1);
    const auto inv_sqrt_bc2 = static_cast<Scalar>(1.0 / std::sqrt(bc2));
    const auto eps = static_cast<Scalar>(hyper_.eps);
    for (const auto& [name, g] : grads) {
      auto& theta = params.at(name);
      auto& m = m_.try_emplace(name, Matrix<Scalar>::Zero(g.rows(), g.cols())).first->second;
      auto& v = v_.try_emplace(name, Matrix<Scalar>::Zero(g.rows(), g.cols())).first->second;
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
      theta *= decay;
      theta.array() -= step_size * m.array() / (v.array().sqrt() * inv_sqrt_bc2 + eps);
    }
  }

 private:
  AdamWHyper hyper_;
  long step_count_ = 0;
  ParameterMap<Scalar> m_;
  ParameterMap<Scalar> v_;
};

}  // namespace moment
