#include "tapir/nn/params.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "tapir/nn/ops.hpp"

namespace tapir::nn {

namespace {
constexpr char kMagic[] = "TAPIR-CKPT/1\n";
static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian hosts");
}  // namespace

Tensor ParamStore::add(const std::string& name, const Shape& shape, std::vector<double> values) {
  if (params_.count(name)) throw std::logic_error("duplicate parameter " + name);
  Tensor t = Tensor::from(shape, std::move(values), true);
  params_.emplace(name, t);
  return t;
}

Tensor ParamStore::add_xavier(const std::string& name, int64_t fan_in, int64_t fan_out, std::mt19937_64& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> u(-a, a);
  std::vector<double> v(static_cast<size_t>(fan_in * fan_out));
  for (auto& x : v) x = u(rng);
  return add(name, {fan_in, fan_out}, std::move(v));
}

Tensor ParamStore::add_normal(const std::string& name, const Shape& shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  std::vector<double> v(static_cast<size_t>(numel_of(shape)));
  for (auto& x : v) x = std::clamp(n(rng), -2.0 * stddev, 2.0 * stddev);
  return add(name, shape, std::move(v));
}

Tensor ParamStore::add_constant(const std::string& name, const Shape& shape, double value) {
  return add(name, shape, std::vector<double>(static_cast<size_t>(numel_of(shape)), value));
}

Tensor ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
  return it->second;
}

std::vector<std::string> ParamStore::names(const std::string& prefix) const {
  std::vector<std::string> out;
  for (const auto& [n, _] : params_)
    if (n.rfind(prefix, 0) == 0) out.push_back(n);
  return out;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& [_, t] : params_) n += t.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [_, t] : params_) {
    Tensor p = t;
    p.zero_grad();
  }
}

void ParamStore::assign(const std::string& name, const std::vector<double>& values) {
  Tensor t = get(name);
  if (static_cast<int64_t>(values.size()) != t.numel())
    throw std::invalid_argument("assign " + name + ": size " + std::to_string(values.size()) + " vs " +
                                std::to_string(t.numel()));
  t.values().assign(values.begin(), values.end());
}

void Checkpoint::save(const std::string& path) const {
  nlohmann::json header;
  header["meta"] = meta;
  nlohmann::json index = nlohmann::json::array();
  uint64_t offset = 0;
  for (const auto& [name, rec] : arrays) {
    index.push_back({{"name", name}, {"shape", rec.shape}, {"offset", offset}, {"count", rec.values.size()}});
    offset += rec.values.size();
  }
  header["arrays"] = index;
  const std::string text = header.dump();

  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write(kMagic, sizeof(kMagic) - 1);
  const uint64_t len = text.size();
  os.write(reinterpret_cast<const char*>(&len), sizeof(len));
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [_, rec] : arrays)
    os.write(reinterpret_cast<const char*>(rec.values.data()), static_cast<std::streamsize>(rec.values.size() * sizeof(double)));
  if (!os) throw std::runtime_error("short write on checkpoint " + path);
}

Checkpoint Checkpoint::load(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[sizeof(kMagic) - 1];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) throw std::runtime_error("not a checkpoint: " + path);
  uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  is.read(text.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("truncated checkpoint header: " + path);
  const auto header = nlohmann::json::parse(text);
  Checkpoint ck;
  ck.meta = header.at("meta");
  for (const auto& entry : header.at("arrays")) {
    ArrayRecord rec;
    rec.shape = entry.at("shape").get<Shape>();
    rec.values.resize(entry.at("count").get<size_t>());
    is.read(reinterpret_cast<char*>(rec.values.data()), static_cast<std::streamsize>(rec.values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("truncated checkpoint payload: " + path);
    ck.arrays.emplace(entry.at("name").get<std::string>(), std::move(rec));
  }
  return ck;
}

void store_params(Checkpoint& ck, const ParamStore& params, const std::string& prefix) {
  for (const auto& [name, t] : params.all()) ck.arrays[prefix + name] = ArrayRecord{t.shape(), t.to_vector()};
}

void load_params(const Checkpoint& ck, ParamStore& params, const std::string& prefix) {
  std::vector<std::string> bad;
  for (const auto& name : params.names(prefix)) {
    auto it = ck.arrays.find(name);
    Tensor t = params.get(name);
    if (it == ck.arrays.end()) {
      bad.push_back(name + " (missing)");
    } else if (it->second.shape != t.shape()) {
      bad.push_back(name + " (checkpoint " + shape_str(it->second.shape) + ", model " + shape_str(t.shape()) + ")");
    }
  }
  if (!bad.empty()) {
    std::ostringstream os;
    os << "checkpoint incompatible with model:";
    for (const auto& b : bad) os << "\n  " << b;
    throw std::invalid_argument(os.str());
  }
  for (const auto& name : params.names(prefix)) params.assign(name, ck.arrays.at(name).values);
}

Tensor Linear::operator()(const Tensor& x) const { return linear(x, weight, bias); }

Linear make_linear(ParamStore& ps, const std::string& name, int64_t in, int64_t out, std::mt19937_64& rng, bool bias) {
  Linear l;
  l.weight = ps.add_xavier(name + ".weight", in, out, rng);
  if (bias) l.bias = ps.add_constant(name + ".bias", {out}, 0.0);
  return l;
}

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

LayerNorm make_layer_norm(ParamStore& ps, const std::string& name, int64_t dim) {
  return {ps.add_constant(name + ".gamma", {dim}, 1.0), ps.add_constant(name + ".beta", {dim}, 0.0)};
}

}  // namespace tapir::nn
