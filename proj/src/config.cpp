#include "dimae/config.hpp"

#include <algorithm>
#include <chrono>
#include <ctime>
#include <fstream>
#include <set>

#include "dimae/errors.hpp"
#include "dimae/rng.hpp"

#ifndef DIMAE_VERSION
#define DIMAE_VERSION "0.0.0"
#endif
#ifndef DIMAE_GIT
#define DIMAE_GIT "unknown"
#endif

namespace dimae::config {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items()) {
    require(ok.contains(key), "unknown key '" + key + "' in " + where);
  }
}

}  // namespace

objective::ObjectiveConfig RunConfig::objective() const {
  return {stylemix, p_visible, model.encoder.patch_size};
}

std::uint64_t RunConfig::init_seed() const { return derive_seed(seed, "init"); }
std::uint64_t RunConfig::train_seed() const { return derive_seed(seed, "train"); }
std::uint64_t RunConfig::eval_seed() const { return derive_seed(seed, "eval"); }

void RunConfig::validate() const {
  model.validate();
  stylemix.validate();
  train.validate();
  require(p_visible > 0.0 && p_visible < 1.0, "p_visible must be in (0, 1)");
  require(eval.label_fraction > 0.0 && eval.label_fraction <= 1.0, "label fraction must be in (0, 1]");
  require(eval.test_fraction > 0.0 && eval.test_fraction < 1.0, "test_fraction must be in (0, 1)");
  for (const auto& t : data.target_domains) {
    for (const auto& d : data.domains) require(t != d, "domain " + t + " is both a pretraining and a target domain");
  }
}

RunConfig parse_run_config(const json& j) {
  try {
    reject_unknown(j, {"seed", "data", "model", "stylemix", "train", "eval"}, "config");
    RunConfig c;
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("data")) {
      const auto& d = j.at("data");
      reject_unknown(d, {"domains", "target_domains"}, "data");
      c.data.domains = d.value("domains", std::vector<std::string>{});
      c.data.target_domains = d.value("target_domains", std::vector<std::string>{});
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      reject_unknown(m, {"encoder", "decoder", "num_domains", "single_decoder", "p_visible"}, "model");
      c.model = m.get<model::ModelConfig>();
      c.p_visible = m.value("p_visible", c.p_visible);
    }
    if (j.contains("stylemix")) c.stylemix = j.at("stylemix").get<fourier::StyleMixConfig>();
    if (j.contains("train")) c.train = j.at("train").get<train::TrainConfig>();
    if (j.contains("eval")) {
      const auto& e = j.at("eval");
      reject_unknown(e,
                     {"probe", "finetune", "method", "label_fraction", "test_fraction", "ablation"},
                     "eval");
      c.eval.protocol = e.get<eval::ProtocolConfig>();
      c.eval.label_fraction = e.value("label_fraction", c.eval.label_fraction);
      c.eval.test_fraction = e.value("test_fraction", c.eval.test_fraction);
      if (e.contains("ablation")) {
        const auto& a = e.at("ablation");
        reject_unknown(a, {"modes", "decoders", "decoder_depths", "seeds"}, "eval.ablation");
        if (a.contains("modes")) {
          c.eval.ablation_modes.clear();
          for (const auto& m : a.at("modes")) {
            c.eval.ablation_modes.push_back(fourier::mix_mode_from_string(m.get<std::string>()));
          }
        }
        if (a.contains("decoders")) {
          c.eval.ablation_single_decoder.clear();
          for (const auto& m : a.at("decoders")) {
            const auto name = m.get<std::string>();
            require(name == "single" || name == "multi", "eval.ablation.decoders entries must be single or multi");
            c.eval.ablation_single_decoder.push_back(name == "single");
          }
        }
        c.eval.ablation_depths = a.value("decoder_depths", c.eval.ablation_depths);
        c.eval.ablation_seeds = a.value("seeds", c.eval.ablation_seeds);
      }
    }
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ValidationError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

json to_json(const RunConfig& c) {
  json model = c.model;
  model["p_visible"] = c.p_visible;
  std::vector<std::string> modes;
  for (auto m : c.eval.ablation_modes) modes.push_back(fourier::to_string(m));
  std::vector<std::string> decoders;
  for (bool s : c.eval.ablation_single_decoder) decoders.push_back(s ? "single" : "multi");
  json ev = c.eval.protocol;
  ev["label_fraction"] = c.eval.label_fraction;
  ev["test_fraction"] = c.eval.test_fraction;
  ev["ablation"] = {{"modes", modes},
                    {"decoders", decoders},
                    {"decoder_depths", c.eval.ablation_depths},
                    {"seeds", c.eval.ablation_seeds}};
  return json{{"seed", c.seed},
              {"data", {{"domains", c.data.domains}, {"target_domains", c.data.target_domains}}},
              {"model", model},
              {"stylemix", c.stylemix},
              {"train", c.train},
              {"eval", ev}};
}

std::vector<std::string> pretrain_domains(const DataSection& cfg, const std::vector<std::string>& all) {
  std::vector<std::string> out;
  if (!cfg.domains.empty()) {
    for (const auto& d : cfg.domains) {
      require(std::find(all.begin(), all.end(), d) != all.end(), "unknown domain '" + d + "' in data.domains");
    }
    out = cfg.domains;
  } else {
    for (const auto& d : all) {
      if (std::find(cfg.target_domains.begin(), cfg.target_domains.end(), d) == cfg.target_domains.end()) {
        out.push_back(d);
      }
    }
  }
  for (const auto& t : cfg.target_domains) {
    require(std::find(all.begin(), all.end(), t) != all.end(), "unknown domain '" + t + "' in data.target_domains");
  }
  return out;
}

std::string version_string() { return std::string(DIMAE_VERSION) + "+" + DIMAE_GIT; }

void require_fresh_output(const fs::path& dir) {
  require(!fs::exists(dir / kManifestName),
          "output directory " + dir.string() + " already holds a manifest; choose a new --out");
}

void write_manifest(const fs::path& dir, const RunManifest& manifest) {
  require_fresh_output(dir);
  fs::create_directories(dir);
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", &tm);
  const json j{{"tool", "dimae"},
               {"version", version_string()},
               {"command", manifest.command},
               {"argv", manifest.argv},
               {"config", manifest.config},
               {"seeds", manifest.seeds},
               {"outputs", manifest.outputs},
               {"created_at", stamp}};
  const auto path = dir / kManifestName;
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
  fs::permissions(path, fs::perms::owner_write | fs::perms::group_write | fs::perms::others_write,
                  fs::perm_options::remove);
}

}  // namespace dimae::config
