#pragma once

// Run configuration ({seed, data, model, stylemix, train, eval}) and the
// per-output-directory run manifest.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dimae/eval.hpp"
#include "dimae/fourier_aug.hpp"
#include "dimae/model.hpp"
#include "dimae/objective.hpp"
#include "dimae/train.hpp"

namespace dimae::config {

struct DataSection {
  /// Pretraining domains; empty means every domain not listed in target_domains.
  std::vector<std::string> domains;
  /// Held-out domains for cross-domain evaluation.
  std::vector<std::string> target_domains;
};

struct EvalSection {
  eval::ProtocolConfig protocol;
  double label_fraction = 1.0;
  /// In-domain probe: per-class share of each domain held out for testing.
  double test_fraction = 0.3;
  std::vector<fourier::MixMode> ablation_modes{fourier::MixMode::StyleMix, fourier::MixMode::MixupBaseline,
                                              fourier::MixMode::CutMixBaseline, fourier::MixMode::None};
  std::vector<bool> ablation_single_decoder{false, true};
  std::vector<int> ablation_depths{8};
  std::vector<std::uint64_t> ablation_seeds{0, 1, 2};
};

struct RunConfig {
  std::uint64_t seed = 0;
  DataSection data;
  model::ModelConfig model;
  /// Share of patches kept visible to the encoder.
  double p_visible = 0.25;
  fourier::StyleMixConfig stylemix;
  train::TrainConfig train;
  EvalSection eval;

  objective::ObjectiveConfig objective() const;
  /// Named substream seeds derived from the root seed.
  std::uint64_t init_seed() const;
  std::uint64_t train_seed() const;
  std::uint64_t eval_seed() const;

  void validate() const;
};

/// Unknown top-level sections are rejected; missing fields take defaults.
RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
nlohmann::json to_json(const RunConfig& c);

/// Pretraining domains of `all` under `cfg` (explicit list, or everything but the targets).
std::vector<std::string> pretrain_domains(const DataSection& cfg, const std::vector<std::string>& all);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  nlohmann::json config;
  nlohmann::json seeds;
  std::vector<std::string> outputs;
};

std::string version_string();

inline constexpr const char* kManifestName = "manifest.json";

/// Creates `dir` and writes dir/manifest.json once; an existing manifest is an error.
void write_manifest(const std::filesystem::path& dir, const RunManifest& manifest);
/// Fails early when `dir` already holds a manifest.
void require_fresh_output(const std::filesystem::path& dir);

}  // namespace dimae::config
