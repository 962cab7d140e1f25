#include "rm/params.hpp"

#include "json.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace rm {

using json = nlohmann::json;

void ParameterStore::add(const std::string& name, Index rows, Index cols, Init init, Rng& rng) {
  if (contains(name)) throw ConfigError("duplicate parameter '" + name + "'");
  if (rows <= 0 || cols <= 0) throw ShapeError("parameter '" + name + "' needs positive extents");
  Matrix<float> v(rows, cols);
  switch (init) {
    case Init::Zeros:
      v.setZero();
      break;
    case Init::Ones:
      v.setOnes();
      break;
    case Init::Glorot: {
      const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
      for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
      break;
    }
  }
  values_.emplace(name, std::move(v));
  m_.emplace(name, Matrix<float>::Zero(rows, cols));
  v_.emplace(name, Matrix<float>::Zero(rows, cols));
}

void ParameterStore::set(const std::string& name, Matrix<float> value) {
  auto& cur = at(name);
  if (cur.rows() != value.rows() || cur.cols() != value.cols())
    throw ShapeError("parameter '" + name + "': expected " + shape_string(cur) + ", got " + shape_string(value));
  cur = std::move(value);
}

const Matrix<float>& ParameterStore::at(const std::string& name) const {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

Matrix<float>& ParameterStore::at(const std::string& name) {
  auto it = values_.find(name);
  if (it == values_.end()) throw ConfigError("unknown parameter '" + name + "'");
  return it->second;
}

std::vector<std::string> ParameterStore::names() const {
  std::vector<std::string> out;
  for (const auto& kv : values_) out.push_back(kv.first);
  return out;
}

std::size_t ParameterStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& kv : values_) n += static_cast<std::size_t>(kv.second.size());
  return n;
}

void ParameterStore::adam_step(const ParamTable<float>& grads, const AdamConfig& cfg) {
  for (const auto& [name, g] : grads) {
    const auto& p = at(name);
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError("gradient for '" + name + "' has shape " + shape_string(g) + ", expected " + shape_string(p));
    if (!g.allFinite()) throw NumericError("non-finite gradient for parameter '" + name + "'");
  }
  ++step_;
  const double t = static_cast<double>(step_);
  const float c1 = static_cast<float>(1.0 - std::pow(cfg.beta1, t));
  const float c2 = static_cast<float>(1.0 - std::pow(cfg.beta2, t));
  // Complements are taken in double: 1 - 0.999f is off by 1e-5 relative.
  const float b1 = static_cast<float>(cfg.beta1), b2 = static_cast<float>(cfg.beta2);
  const float a1 = static_cast<float>(1.0 - cfg.beta1), a2 = static_cast<float>(1.0 - cfg.beta2);
  const float lr = static_cast<float>(cfg.lr), eps = static_cast<float>(cfg.eps);
  for (const auto& [name, g] : grads) {
    auto& p = values_.at(name);
    auto& m = m_.at(name);
    auto& v = v_.at(name);
    m = b1 * m + a1 * g;
    v = b2 * v + a2 * g.cwiseProduct(g);
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
}

bool ParameterStore::identical(const ParameterStore& other) const {
  if (values_.size() != other.values_.size()) return false;
  for (const auto& [name, v] : values_) {
    auto it = other.values_.find(name);
    if (it == other.values_.end()) return false;
    const auto& w = it->second;
    if (v.rows() != w.rows() || v.cols() != w.cols()) return false;
    if (std::memcmp(v.data(), w.data(), sizeof(float) * static_cast<std::size_t>(v.size())) != 0) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[5] = {'R', 'M', 'C', 'K', '1'};

void put_u32(std::vector<char>& out, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xFF));
}

std::uint32_t get_u32(const char* p) {
  std::uint32_t x = 0;
  for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return x;
}

void put_f32(std::vector<char>& out, float f) { put_u32(out, std::bit_cast<std::uint32_t>(f)); }

}  // namespace

std::vector<char> encode_checkpoint(const NamedTensors& t) {
  json manifest;
  manifest["meta"] = json::parse(t.meta_json);
  manifest["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, tensor] : t.tensors) {
    tensor.validate();
    manifest["tensors"].push_back({{"name", name}, {"shape", tensor.shape}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(tensor.numel()) * 4;
  }
  manifest["blob_bytes"] = offset;
  const std::string text = manifest.dump();

  std::vector<char> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const auto& [name, tensor] : t.tensors)
    for (Index i = 0; i < tensor.data.size(); ++i) put_f32(out, tensor.data.data()[i]);
  return out;
}

NamedTensors decode_checkpoint(const std::vector<char>& bytes) {
  if (bytes.size() < 9 || std::memcmp(bytes.data(), kMagic, 5) != 0) throw DataError("checkpoint: bad magic");
  const std::uint32_t mlen = get_u32(bytes.data() + 5);
  if (bytes.size() < 9 + static_cast<std::size_t>(mlen)) throw DataError("checkpoint: truncated manifest");
  json manifest;
  try {
    manifest = json::parse(bytes.begin() + 9, bytes.begin() + 9 + mlen);
  } catch (const json::exception& e) {
    throw DataError(std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }
  const std::size_t blob_start = 9 + mlen;
  const auto blob_bytes = manifest.at("blob_bytes").get<std::uint64_t>();
  if (bytes.size() - blob_start != blob_bytes)
    throw DataError("checkpoint: blob is " + std::to_string(bytes.size() - blob_start) + " bytes, manifest says " +
                    std::to_string(blob_bytes));
  NamedTensors out;
  out.meta_json = manifest.at("meta").dump();
  for (const auto& entry : manifest.at("tensors")) {
    auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    std::int64_t n = 1;
    for (auto e : shape) n *= e;
    if (offset + static_cast<std::uint64_t>(n) * 4 > blob_bytes)
      throw DataError("checkpoint: tensor '" + entry.at("name").get<std::string>() + "' exceeds blob");
    const Index cols = shape.empty() ? 1 : shape.back();
    Matrix<float> m(n / cols, cols);
    const char* p = bytes.data() + blob_start + offset;
    for (std::int64_t i = 0; i < n; ++i) m.data()[i] = std::bit_cast<float>(get_u32(p + 4 * i));
    out.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(m)));
  }
  return out;
}

void write_checkpoint(const std::string& path, const NamedTensors& t) {
  const auto bytes = encode_checkpoint(t);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "' for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("write failed for '" + path + "'");
}

NamedTensors read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

NamedTensors to_named(const ParameterStore& store, const std::string& meta_json) {
  NamedTensors out;
  out.meta_json = meta_json;
  for (const auto& [name, v] : store.values()) out.tensors.emplace_back(name, Tensor(v));
  return out;
}

void load_into(ParameterStore& store, const NamedTensors& t) {
  std::size_t matched = 0;
  for (const auto& [name, tensor] : t.tensors) {
    if (!store.contains(name)) continue;
    const auto& cur = store.at(name);
    if (cur.rows() != tensor.data.rows() || cur.cols() != tensor.data.cols())
      throw ShapeError("checkpoint tensor '" + name + "' has shape " + shape_string(tensor.data) +
                       " but the configured model expects " + shape_string(cur));
    store.set(name, tensor.data);
    ++matched;
  }
  if (matched != store.size())
    throw DataError("checkpoint provides " + std::to_string(matched) + " of " + std::to_string(store.size()) +
                    " model parameters");
}

}  // namespace rm
