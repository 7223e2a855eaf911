#pragma once

// First-order optimizers over a named subset of a ParamStore. State is
// keyed by parameter name so it can be checkpointed alongside the weights.

#include <map>
#include <string>
#include <vector>

#include "tapir/nn/params.hpp"

namespace tapir {

using NamedParams = std::vector<std::pair<std::string, nn::Tensor>>;

// All parameters whose name starts with one of the prefixes, in name order.
NamedParams select_params(const nn::ParamStore& ps, const std::vector<std::string>& prefixes);

// Scales gradients so their global L2 norm is at most max_norm; returns the
// norm before clipping. Non-positive max_norm only measures.
double clip_grad_norm(const NamedParams& params, double max_norm);

class Optimizer {
 public:
  explicit Optimizer(NamedParams params) : params_(std::move(params)) {}
  virtual ~Optimizer() = default;
  virtual void step(double lr) = 0;
  void zero_grad();
  const NamedParams& params() const { return params_; }

  // State arrays are stored under "<prefix><param name>.<slot>".
  void save_state(nn::Checkpoint& ck, const std::string& prefix) const;
  void load_state(const nn::Checkpoint& ck, const std::string& prefix);

 protected:
  std::vector<double>& slot(const std::string& slot, size_t i);
  NamedParams params_;
  std::map<std::string, std::vector<std::vector<double>>> slots_;
  int64_t steps_ = 0;
};

// Heavy-ball SGD with L2 weight decay folded into the gradient:
// v = m v + (g + wd p); p -= lr v.
class Sgd : public Optimizer {
 public:
  Sgd(NamedParams params, double momentum, double weight_decay);
  void step(double lr) override;

 private:
  double momentum_, weight_decay_;
};

// Adam with decoupled weight decay.
class AdamW : public Optimizer {
 public:
  AdamW(NamedParams params, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step(double lr) override;

 private:
  double weight_decay_, beta1_, beta2_, eps_;
};

}  // namespace tapir
