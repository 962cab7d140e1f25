#pragma once

#include "rm/autodiff.hpp"
#include "rm/rng.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace rm {

enum class Init {
  Zeros,
  Ones,
  Glorot,  ///< uniform +-sqrt(6 / (fan_in + fan_out)), fan_in = rows, fan_out = cols
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named float parameters plus Adam moments and the shared step counter.
class ParameterStore {
 public:
  /// Registers a parameter. Names must be unique.
  void add(const std::string& name, Index rows, Index cols, Init init, Rng& rng);
  void set(const std::string& name, Matrix<float> value);

  bool contains(const std::string& name) const { return values_.count(name) != 0; }
  const Matrix<float>& at(const std::string& name) const;
  Matrix<float>& at(const std::string& name);

  const ParamTable<float>& values() const { return values_; }
  std::vector<std::string> names() const;
  std::size_t size() const { return values_.size(); }
  std::size_t parameter_count() const;

  /// Working-precision copy, e.g. the 64-bit shadow used by gradient checks.
  template <typename S>
  ParamTable<S> cast() const {
    ParamTable<S> out;
    for (const auto& [n, v] : values_) out.emplace(n, v.template cast<S>());
    return out;
  }

  /// One bias-corrected Adam update. Every gradient must match its parameter's
  /// shape; a non-finite entry aborts the whole step before anything changes.
  void adam_step(const ParamTable<float>& grads, const AdamConfig& cfg);

  std::int64_t step() const { return step_; }
  const Matrix<float>& first_moment(const std::string& name) const { return m_.at(name); }
  const Matrix<float>& second_moment(const std::string& name) const { return v_.at(name); }

  /// Bit-level equality of all values.
  bool identical(const ParameterStore& other) const;

 private:
  ParamTable<float> values_;
  ParamTable<float> m_;
  ParamTable<float> v_;
  std::int64_t step_ = 0;
};

/// Named tensors as stored on disk.
struct NamedTensors {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string meta_json = "{}";  ///< free-form metadata carried in the manifest
};

/// Checkpoint layout: the 5-byte magic "RMCK1", a little-endian uint32 manifest
/// length, the JSON manifest ({"meta":..., "blob_bytes":n, "tensors":[{name,
/// shape, offset}]}) and a blob of little-endian float32 values.
void write_checkpoint(const std::string& path, const NamedTensors& t);
NamedTensors read_checkpoint(const std::string& path);
std::vector<char> encode_checkpoint(const NamedTensors& t);
NamedTensors decode_checkpoint(const std::vector<char>& bytes);

NamedTensors to_named(const ParameterStore& store, const std::string& meta_json = "{}");
/// Loads values into `store`; every stored parameter must be present with the
/// same shape.
void load_into(ParameterStore& store, const NamedTensors& t);

}  // namespace rm
