#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "tapir/nn/tensor.hpp"

namespace tapir::nn {

// Named trainable parameters. Iteration order is the lexicographic name order,
// which fixes the layout of checkpoints and optimizer state.
class ParamStore {
 public:
  Tensor add(const std::string& name, const Shape& shape, std::vector<double> values);
  Tensor add_xavier(const std::string& name, int64_t fan_in, int64_t fan_out, std::mt19937_64& rng);
  Tensor add_normal(const std::string& name, const Shape& shape, double stddev, std::mt19937_64& rng);
  Tensor add_constant(const std::string& name, const Shape& shape, double value);

  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  Tensor get(const std::string& name) const;
  const std::map<std::string, Tensor>& all() const { return params_; }
  std::vector<std::string> names(const std::string& prefix = "") const;
  int64_t total_size() const;

  void zero_grad();
  // Overwrites the values (not the identity) of a parameter.
  void assign(const std::string& name, const std::vector<double>& values);

 private:
  std::map<std::string, Tensor> params_;
};

struct ArrayRecord {
  Shape shape;
  std::vector<double> values;
};

// Flat map name -> array plus a JSON config echo. The on-disk layout is a
// magic line, a JSON header (sorted keys) and little-endian float64 payload;
// identical contents produce identical bytes.
struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, ArrayRecord> arrays;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

void store_params(Checkpoint& ck, const ParamStore& params, const std::string& prefix = "");
// Copies every parameter of `params` whose name starts with `prefix` from the
// checkpoint. Throws listing all missing or shape-mismatched names.
void load_params(const Checkpoint& ck, ParamStore& params, const std::string& prefix = "");

// ---- layers ----------------------------------------------------------------

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out] or undefined
  Tensor operator()(const Tensor& x) const;
  int64_t in() const { return weight.dim(0); }
  int64_t out() const { return weight.dim(1); }
};

Linear make_linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng,
                   bool bias = true);

struct LayerNorm {
  Tensor gamma, beta;
  Tensor operator()(const Tensor& x) const;
};

LayerNorm make_layer_norm(ParamStore& ps, const std::string& name, int64_t dim);

}  // namespace tapir::nn
