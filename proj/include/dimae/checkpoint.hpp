#pragma once

// Single-file checkpoint archive:
//
//   8 bytes   magic "DIMAECKP"
//   u32       format version
//   u64       header length N
//   N bytes   JSON header {format_version, config, meta, tensors: [{name, rows, cols, dtype, offset}]}
//   payload   little-endian tensor data, offsets relative to payload start
//
// Model tensors are named encoder.*, decoder.{i}.*, mask_token.{i}; optimizer
// moments, when present, are optim.m.<name> / optim.v.<name>.

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

#include "dimae/model.hpp"

namespace dimae::checkpoint {

using nn::Index;
using nn::Matrix;
using nn::ParamId;

inline constexpr std::uint32_t kFormatVersion = 1;

struct Tensor {
  std::string name;
  Index rows = 0;
  Index cols = 0;
  bool is_double = false;
  std::vector<double> values;  // float tensors round-trip exactly through double
};

struct Archive {
  nlohmann::json config;
  nlohmann::json meta;
  std::vector<Tensor> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

template <typename T>
Tensor to_tensor(const std::string& name, const Matrix<T>& m) {
  Tensor t{name, m.rows(), m.cols(), std::is_same_v<T, double>, {}};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

template <typename T>
void from_tensor(const Tensor& t, Matrix<T>& m) {
  require(t.rows == m.rows() && t.cols == m.cols(), "checkpoint tensor " + t.name + " has the wrong shape");
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.values[static_cast<std::size_t>(i)]);
}

/// Model parameters plus the model config under config["model"].
template <typename T>
Archive model_archive(const model::MaskedAutoencoder<T>& model);

/// Rebuilds a model from an archive written by model_archive().
template <typename T>
model::MaskedAutoencoder<T> load_model(const Archive& archive);

template <typename T>
void save_model(const std::filesystem::path& path, const model::MaskedAutoencoder<T>& model,
                const nlohmann::json& meta = nlohmann::json::object()) {
  Archive a = model_archive(model);
  a.meta = meta;
  write_archive(path, a);
}

}  // namespace dimae::checkpoint
