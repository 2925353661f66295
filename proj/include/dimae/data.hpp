#pragma once

// Multi-domain datasets: a folder loader (root/<domain>/<class>/<image>.png), a
// synthetic generator whose domains differ only in rendering style, and a
// domain-stratified batch sampler.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dimae/image.hpp"

namespace dimae::data {

class DomainRegistry {
 public:
  DomainRegistry() = default;
  explicit DomainRegistry(std::vector<std::string> names);

  /// Sorted names of the sub-directories of `root`.
  static DomainRegistry from_directory(const std::filesystem::path& root);

  int size() const { return static_cast<int>(names_.size()); }
  const std::vector<std::string>& names() const { return names_; }
  const std::string& name(DomainId id) const;
  std::optional<DomainId> find(std::string_view name) const;
  /// Throws ValidationError for unknown names.
  DomainId id(std::string_view name) const;

 private:
  std::vector<std::string> names_;
};

struct Sample {
  ImageTensor image;
  DomainId domain = kNoDomain;
  int label = -1;
  std::string path;
};

struct Dataset {
  DomainRegistry registry;
  std::vector<std::string> class_names;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  int num_classes() const { return static_cast<int>(class_names.size()); }
  std::vector<std::size_t> indices_of(DomainId domain) const;
};

/// Loads root/<domain>/<class>/*.png in sorted order. Every domain directory must
/// be in `registry`; class ids index the sorted union of class directory names.
Dataset load_folder(const std::filesystem::path& root, const DomainRegistry& registry);
Dataset load_folder(const std::filesystem::path& root);

/// Writes root/<domain>/<class>/<index>.png.
void save_folder(const Dataset& dataset, const std::filesystem::path& root);

/// Keeps the named domains, renumbered densely in the given order.
Dataset select_domains(const Dataset& dataset, const std::vector<std::string>& names);

/// Rendering styles available to the synthetic generator.
std::vector<std::string> synthetic_styles();
/// Shape names, one per class, available to the synthetic generator.
std::vector<std::string> synthetic_shapes();

struct SyntheticSpec {
  int num_classes = 10;
  int image_size = 32;
  /// Style recipe per domain; names from synthetic_styles().
  std::vector<std::string> domains{"solid", "stripes", "sketch"};
  int samples_per_class_per_domain = 15;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& s);
void from_json(const nlohmann::json& j, SyntheticSpec& s);

/// Class = shape geometry, domain = rendering style. Pixels are quantized to
/// 8 bits so a save/load round trip is exact.
Dataset generate_synthetic(const SyntheticSpec& spec);

/// One epoch of batches; each batch holds `batch_per_domain` indices from every
/// domain (domain-major). The epoch has ceil(min_d |domain d| / batch_per_domain)
/// batches; each domain walks its own shuffled order, wrapping when exhausted.
std::vector<std::vector<std::size_t>> stratified_batches(const Dataset& dataset, int batch_per_domain,
                                                         std::uint64_t seed);

}  // namespace dimae::data
