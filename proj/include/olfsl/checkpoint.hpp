#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "olfsl/adam.hpp"
#include "olfsl/errors.hpp"
#include "olfsl/model.hpp"

namespace olfsl {

// Versioned binary container. Layout (all integers and IEEE-754 payloads
// little-endian):
//
//   magic "OLCK" | u32 version | u8 dtype (0=f32, 1=f64)
//   | lp model-config text | u64 episode | f64 best_val_acc | lp rng state
//   | u32 n_stats | (f64 mean, f64 std) * n_stats
//   | f64 lr, beta1, beta2, epsilon | u64 adam_t
//   | u32 n_tensors | { lp name | u8 dtype | u32 rank | u32 dims[] | payload }*
//
// where lp is a u32 length-prefixed byte string.
template <typename T>
struct Checkpoint {
  ModelConfig model;
  ModelParams<T> params;
  AdamState<T> adam;
  std::uint64_t episode = 0;
  double best_val_acc = -1.0;
  std::string rng_state;
  std::vector<double> standardize_mean;
  std::vector<double> standardize_std;
};

enum class CheckpointDType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr CheckpointDType checkpoint_dtype() {
  static_assert(sizeof(T) == 4 || sizeof(T) == 8);
  return sizeof(T) == 4 ? CheckpointDType::f32 : CheckpointDType::f64;
}

namespace ckpt_detail {

inline constexpr char kMagic[4] = {'O', 'L', 'C', 'K'};
inline constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
    if (!out_) throw DataError("cannot create checkpoint file: " + path);
  }

  void bytes(const void* p, std::size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

  void u8(std::uint8_t v) { bytes(&v, 1); }

  void u32(std::uint32_t v) {
    std::uint8_t b[4] = {static_cast<std::uint8_t>(v), static_cast<std::uint8_t>(v >> 8),
                         static_cast<std::uint8_t>(v >> 16), static_cast<std::uint8_t>(v >> 24)};
    bytes(b, 4);
  }

  void u64(std::uint64_t v) {
    u32(static_cast<std::uint32_t>(v));
    u32(static_cast<std::uint32_t>(v >> 32));
  }

  void f64(double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }

  void lp_string(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  template <typename T>
  void payload(const std::vector<T>& data) {
    for (T v : data) {
      if constexpr (sizeof(T) == 4) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
      } else {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
      }
    }
  }

  void close() {
    out_.flush();
    if (!out_) throw DataError("checkpoint write failed");
    out_.close();
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
    if (!in_) throw DataError("cannot open checkpoint file: " + path);
  }

  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint " + path_ + " is truncated");
    }
  }

  std::uint8_t u8() {
    std::uint8_t v;
    bytes(&v, 1);
    return v;
  }

  std::uint32_t u32() {
    std::uint8_t b[4];
    bytes(b, 4);
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  }

  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    const std::uint64_t hi = u32();
    return lo | hi << 32;
  }

  double f64() {
    const std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string lp_string() {
    const std::uint32_t n = u32();
    if (n > (1u << 24)) {
      throw CheckpointError(CheckpointError::Kind::truncated,
                            "checkpoint " + path_ + ": implausible string length");
    }
    std::string s(n, '\0');
    if (n) bytes(s.data(), n);
    return s;
  }

  template <typename T>
  std::vector<T> payload(std::size_t count) {
    std::vector<T> data(count);
    for (auto& v : data) {
      if constexpr (sizeof(T) == 4) {
        const std::uint32_t bits = u32();
        std::memcpy(&v, &bits, 4);
      } else {
        const std::uint64_t bits = u64();
        std::memcpy(&v, &bits, 8);
      }
    }
    return data;
  }

 private:
  std::ifstream in_;
  std::string path_;
};

// Names and shapes every tensor record must carry for a given config.
template <typename T>
std::map<std::string, Shape> expected_tensor_shapes(const ModelConfig& cfg) {
  std::map<std::string, Shape> shapes;
  const ModelParams<T> proto = init_params<T>(cfg, 0);
  for (const auto& [name, t] : proto.flat()) {
    shapes.emplace(name, t.shape);
    shapes.emplace("adam.m." + name, t.shape);
    shapes.emplace("adam.v." + name, t.shape);
  }
  return shapes;
}

}  // namespace ckpt_detail

template <typename T>
void save_checkpoint(const Checkpoint<T>& cp, const std::string& path) {
  using namespace ckpt_detail;
  Writer w(path);
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u8(static_cast<std::uint8_t>(checkpoint_dtype<T>()));
  w.lp_string(serialize_model_config(cp.model));
  w.u64(cp.episode);
  w.f64(cp.best_val_acc);
  w.lp_string(cp.rng_state);
  if (cp.standardize_mean.size() != cp.standardize_std.size()) {
    throw LogicError("checkpoint: standardization mean/std lengths differ");
  }
  w.u32(static_cast<std::uint32_t>(cp.standardize_mean.size()));
  for (std::size_t i = 0; i < cp.standardize_mean.size(); ++i) {
    w.f64(cp.standardize_mean[i]);
    w.f64(cp.standardize_std[i]);
  }
  w.f64(cp.adam.hyper.lr);
  w.f64(cp.adam.hyper.beta1);
  w.f64(cp.adam.hyper.beta2);
  w.f64(cp.adam.hyper.epsilon);
  w.u64(static_cast<std::uint64_t>(cp.adam.t));

  NamedTensors<T> tensors = cp.params.flat();
  for (const auto& [name, t] : cp.adam.m) tensors.emplace("adam.m." + name, t);
  for (const auto& [name, t] : cp.adam.v) tensors.emplace("adam.v." + name, t);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.lp_string(name);
    w.u8(static_cast<std::uint8_t>(checkpoint_dtype<T>()));
    w.u32(static_cast<std::uint32_t>(t.shape.size()));
    for (int dim : t.shape) w.u32(static_cast<std::uint32_t>(dim));
    w.payload(t.data);
  }
  w.close();
}

inline CheckpointDType peek_checkpoint_dtype(const std::string& path) {
  using namespace ckpt_detail;
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint file: " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint8_t tag = r.u8();
  if (tag > 1) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unknown dtype tag " + std::to_string(tag));
  }
  return static_cast<CheckpointDType>(tag);
}

// Loads and validates a checkpoint. Every tensor shape is checked against the
// embedded model config; when `expected` is given it must match the embedded
// config exactly (a d/c/stack mismatch means the file belongs to a different
// model).
template <typename T>
Checkpoint<T> load_checkpoint(const std::string& path, const ModelConfig* expected = nullptr) {
  using namespace ckpt_detail;
  Reader r(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::bad_magic, "not a checkpoint file: " + path);
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version) + " in " + path);
  }
  const std::uint8_t tag = r.u8();
  if (tag != static_cast<std::uint8_t>(checkpoint_dtype<T>())) {
    throw CheckpointError(CheckpointError::Kind::bad_version,
                          "checkpoint dtype tag " + std::to_string(tag) +
                              " does not match the requested precision");
  }

  Checkpoint<T> cp;
  cp.model = parse_model_config_text(r.lp_string());
  if (expected && !(cp.model == *expected)) {
    std::string detail = "checkpoint model config differs from the run config";
    if (cp.model.d != expected->d) {
      detail += ": d=" + std::to_string(cp.model.d) + " (checkpoint) vs d=" +
                std::to_string(expected->d) + " (expected)";
    } else if (cp.model.c != expected->c) {
      detail += ": c=" + std::to_string(cp.model.c) + " vs c=" + std::to_string(expected->c);
    }
    throw CheckpointError(CheckpointError::Kind::shape_mismatch, detail);
  }
  cp.episode = r.u64();
  cp.best_val_acc = r.f64();
  cp.rng_state = r.lp_string();
  const std::uint32_t n_stats = r.u32();
  for (std::uint32_t i = 0; i < n_stats; ++i) {
    cp.standardize_mean.push_back(r.f64());
    cp.standardize_std.push_back(r.f64());
  }
  cp.adam.hyper.lr = r.f64();
  cp.adam.hyper.beta1 = r.f64();
  cp.adam.hyper.beta2 = r.f64();
  cp.adam.hyper.epsilon = r.f64();
  cp.adam.t = static_cast<std::int64_t>(r.u64());

  const auto expected_shapes = expected_tensor_shapes<T>(cp.model);
  const std::uint32_t n_tensors = r.u32();
  if (n_tensors != expected_shapes.size()) {
    throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                          "checkpoint holds " + std::to_string(n_tensors) + " tensors, expected " +
                              std::to_string(expected_shapes.size()));
  }
  NamedTensors<T> params_flat;
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.lp_string();
    const std::uint8_t ttag = r.u8();
    if (ttag != tag) {
      throw CheckpointError(CheckpointError::Kind::bad_version,
                            "tensor '" + name + "' has a mismatched dtype tag");
    }
    const std::uint32_t rank = r.u32();
    if (rank > 8) {
      throw CheckpointError(CheckpointError::Kind::truncated, "tensor '" + name + "': implausible rank");
    }
    Shape shape;
    for (std::uint32_t k = 0; k < rank; ++k) shape.push_back(static_cast<int>(r.u32()));
    const auto eit = expected_shapes.find(name);
    if (eit == expected_shapes.end()) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "unexpected tensor '" + name + "' in checkpoint");
    }
    if (eit->second != shape) {
      throw CheckpointError(CheckpointError::Kind::shape_mismatch,
                            "tensor '" + name + "' has shape " + shape_str(shape) + ", expected " +
                                shape_str(eit->second));
    }
    Tensor<T> t(shape, r.payload<T>(static_cast<std::size_t>(numel(shape))));
    if (name.rfind("adam.m.", 0) == 0) {
      cp.adam.m.emplace(name.substr(7), std::move(t));
    } else if (name.rfind("adam.v.", 0) == 0) {
      cp.adam.v.emplace(name.substr(7), std::move(t));
    } else {
      params_flat.emplace(name, std::move(t));
    }
  }
  cp.params.assign_flat(params_flat);
  return cp;
}

}  // namespace olfsl
