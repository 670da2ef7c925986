#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "piattnp/errors.hpp"
#include "piattnp/nn/tensor.hpp"

namespace piattnp::nn {

struct CheckpointError : MissingArtifact {
  explicit CheckpointError(const std::string& what) : MissingArtifact(what) {}
};

/// Model weights plus free-form string metadata (hyperparameters, flags).
struct CheckpointData {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Matrix>> params;  // manifest order
};

namespace detail {

inline void put_u32(std::ofstream& f, uint32_t v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

inline uint32_t get_u32(std::ifstream& f) {
  uint32_t v = 0;
  f.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!f) throw CheckpointError("checkpoint truncated");
  return v;
}

inline void put_str(std::ofstream& f, const std::string& s) {
  put_u32(f, static_cast<uint32_t>(s.size()));
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline std::string get_str(std::ifstream& f) {
  const uint32_t n = get_u32(f);
  if (n > (1u << 20)) throw CheckpointError("checkpoint string length implausible");
  std::string s(n, '\0');
  f.read(s.data(), n);
  if (!f) throw CheckpointError("checkpoint truncated");
  return s;
}

}  // namespace detail

constexpr char kCheckpointMagic[9] = "PIATNPCK";
constexpr uint32_t kCheckpointVersion = 1;

/// Layout: magic(8) | version(u32) | n_meta(u32) | n_meta * (key, value)
/// | n_params(u32) | manifest (name, rows, cols) | weights, row-major
/// 64-bit, in manifest order. Strings are u32 length + bytes.
inline void save_checkpoint(const std::string& path, const CheckpointData& data) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw MissingArtifact("cannot open " + path + " for writing");
  f.write(kCheckpointMagic, 8);
  detail::put_u32(f, kCheckpointVersion);
  detail::put_u32(f, static_cast<uint32_t>(data.meta.size()));
  for (const auto& [k, v] : data.meta) {
    detail::put_str(f, k);
    detail::put_str(f, v);
  }
  detail::put_u32(f, static_cast<uint32_t>(data.params.size()));
  for (const auto& [name, m] : data.params) {
    detail::put_str(f, name);
    detail::put_u32(f, static_cast<uint32_t>(m.rows()));
    detail::put_u32(f, static_cast<uint32_t>(m.cols()));
  }
  for (const auto& [name, m] : data.params) {
    (void)name;
    for (long r = 0; r < m.rows(); ++r)
      for (long c = 0; c < m.cols(); ++c) {
        const double x = m(r, c);
        f.write(reinterpret_cast<const char*>(&x), sizeof(x));
      }
  }
}

inline CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact("checkpoint not found at " + path);
  char magic[8];
  f.read(magic, 8);
  if (!f || std::string(magic, 8) != std::string(kCheckpointMagic, 8))
    throw CheckpointError("bad checkpoint magic in " + path);
  const uint32_t version = detail::get_u32(f);
  if (version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));

  CheckpointData data;
  const uint32_t n_meta = detail::get_u32(f);
  for (uint32_t i = 0; i < n_meta; ++i) {
    std::string k = detail::get_str(f);
    data.meta[k] = detail::get_str(f);
  }
  const uint32_t n_params = detail::get_u32(f);
  std::vector<std::pair<uint32_t, uint32_t>> shapes;
  for (uint32_t i = 0; i < n_params; ++i) {
    std::string name = detail::get_str(f);
    const uint32_t rows = detail::get_u32(f);
    const uint32_t cols = detail::get_u32(f);
    data.params.emplace_back(std::move(name), Matrix());
    shapes.emplace_back(rows, cols);
  }
  for (uint32_t i = 0; i < n_params; ++i) {
    Matrix m(shapes[i].first, shapes[i].second);
    for (long r = 0; r < m.rows(); ++r)
      for (long c = 0; c < m.cols(); ++c) {
        double x = 0;
        f.read(reinterpret_cast<char*>(&x), sizeof(x));
        if (!f) throw CheckpointError("checkpoint weight block truncated");
        m(r, c) = x;
      }
    data.params[i].second = std::move(m);
  }
  return data;
}

/// Copies checkpoint weights into live parameters, matching by name.
inline void restore_params(const CheckpointData& data, const std::vector<Param*>& params) {
  std::map<std::string, const Matrix*> by_name;
  for (const auto& [name, m] : data.params) by_name[name] = &m;
  for (Param* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) throw CheckpointError("checkpoint lacks parameter " + p->name);
    if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols())
      throw CheckpointError("checkpoint shape mismatch on " + p->name);
    p->value = *it->second;
  }
}

}  // namespace piattnp::nn
