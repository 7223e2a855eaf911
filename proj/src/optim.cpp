#include "tapir/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace tapir {

NamedParams select_params(const nn::ParamStore& ps, const std::vector<std::string>& prefixes) {
  NamedParams out;
  for (const auto& [name, t] : ps.all())
    for (const auto& p : prefixes)
      if (name.compare(0, p.size(), p) == 0) {
        out.emplace_back(name, t);
        break;
      }
  return out;
}

double clip_grad_norm(const NamedParams& params, double max_norm) {
  double sq = 0;
  for (const auto& [_, t] : params)
    if (t.has_grad())
      for (double g : t.grad()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const double s = max_norm / (norm + 1e-12);
    for (const auto& [_, t] : params)
      if (t.has_grad())
        for (double& g : t.node()->grad) g *= s;
  }
  return norm;
}

void Optimizer::zero_grad() {
  for (auto& [_, t] : params_) t.zero_grad();
}

std::vector<double>& Optimizer::slot(const std::string& name, size_t i) {
  auto& s = slots_[name];
  if (s.size() != params_.size()) s.resize(params_.size());
  auto& v = s[i];
  if (v.size() != static_cast<size_t>(params_[i].second.numel())) v.assign(static_cast<size_t>(params_[i].second.numel()), 0.0);
  return v;
}

void Optimizer::save_state(nn::Checkpoint& ck, const std::string& prefix) const {
  ck.meta["optimizer_steps"] = steps_;
  for (const auto& [sname, vecs] : slots_)
    for (size_t i = 0; i < vecs.size(); ++i)
      ck.arrays[prefix + params_[i].first + "." + sname] = {params_[i].second.shape(), vecs[i]};
}

void Optimizer::load_state(const nn::Checkpoint& ck, const std::string& prefix) {
  steps_ = ck.meta.value("optimizer_steps", int64_t{0});
  slots_.clear();
  for (const auto& [key, rec] : ck.arrays) {
    if (key.compare(0, prefix.size(), prefix) != 0) continue;
    const std::string rest = key.substr(prefix.size());
    const auto dot = rest.rfind('.');
    if (dot == std::string::npos) continue;
    const std::string pname = rest.substr(0, dot), sname = rest.substr(dot + 1);
    bool found = false;
    for (size_t i = 0; i < params_.size(); ++i)
      if (params_[i].first == pname) {
        if (static_cast<int64_t>(rec.values.size()) != params_[i].second.numel())
          throw std::runtime_error("optimizer state '" + key + "' has the wrong size");
        slot(sname, i) = rec.values;
        found = true;
      }
    if (!found) throw std::runtime_error("optimizer state '" + key + "' names an unknown parameter");
  }
}

Sgd::Sgd(NamedParams params, double momentum, double weight_decay)
    : Optimizer(std::move(params)), momentum_(momentum), weight_decay_(weight_decay) {}

void Sgd::step(double lr) {
  ++steps_;
  for (size_t i = 0; i < params_.size(); ++i) {
    nn::Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto& v = slot("momentum", i);
    auto& w = p.values();
    const auto g = p.grad();
    for (size_t k = 0; k < w.size(); ++k) {
      v[k] = momentum_ * v[k] + g[k] + weight_decay_ * w[k];
      w[k] -= lr * v[k];
    }
  }
}

AdamW::AdamW(NamedParams params, double weight_decay, double beta1, double beta2, double eps)
    : Optimizer(std::move(params)), weight_decay_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void AdamW::step(double lr) {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (size_t i = 0; i < params_.size(); ++i) {
    nn::Tensor& p = params_[i].second;
    if (!p.has_grad()) continue;
    auto& m = slot("m", i);
    auto& v = slot("v", i);
    auto& w = p.values();
    const auto g = p.grad();
    for (size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1 - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1 - beta2_) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1 / (std::sqrt(v[k] / c2) + eps_) + weight_decay_ * w[k]);
    }
  }
}

}  // namespace tapir
