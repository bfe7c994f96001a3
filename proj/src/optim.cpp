#include "regenlab/optim.h"

#include <cmath>

#include "regenlab/errors.h"

namespace regenlab {

AdamW::AdamW(std::vector<Tensor> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(p.size(), 0.0);
  }
}

void AdamW::step() {
  for (const auto& p : params_) {
    if (!p.has_grad())
      throw ContractError("optimizer step: parameter has no populated gradient");
  }
  ++step_count_;
  const double t = static_cast<double>(step_count_);
  const double bc1 = 1.0 - std::pow(config_.beta1, t);
  const double bc2 = 1.0 - std::pow(config_.beta2, t);

  for (std::size_t pi = 0; pi < params_.size(); ++pi) {
    auto vals = params_[pi].mutable_data();
    const auto grads = params_[pi].grad();
    auto& m = m_[pi];
    auto& v = v_[pi];
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double g = grads[i];
      if (!std::isfinite(g)) continue;  // unreachable; backward already checks
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g * g;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      vals[i] -= config_.lr * (mhat / (std::sqrt(vhat) + config_.epsilon) +
                               config_.weight_decay * vals[i]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

const std::vector<double>& AdamW::first_moment(std::size_t param_index) const {
  return m_.at(param_index);
}

const std::vector<double>& AdamW::second_moment(std::size_t param_index) const {
  return v_.at(param_index);
}

}  // namespace regenlab
