#pragma once

#include <cstdint>
#include <vector>

#include "regenlab/tensor.h"

namespace regenlab {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // decoupled
};

/// Adam with decoupled weight decay over a fixed parameter list.
/// step() requires every parameter to have a populated gradient buffer
/// (zeroed counts; absent does not) and is deterministic given the state.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, AdamConfig config);

  void step();
  void zero_grad();

  std::uint64_t step_count() const { return step_count_; }
  const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }

  // Moment buffers exposed for tests and checkpointing.
  const std::vector<double>& first_moment(std::size_t param_index) const;
  const std::vector<double>& second_moment(std::size_t param_index) const;

 private:
  std::vector<Tensor> params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::uint64_t step_count_ = 0;
};

}  // namespace regenlab
