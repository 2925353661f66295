#pragma once

// Cross-domain masked reconstruction: augment, mask, encode the visible patches of
// the augmented view, decode with the source domain's decoder, and regress the
// ORIGINAL image's pixels at the masked positions.

#include <cstdint>
#include <span>
#include <vector>

#include "dimae/fourier_aug.hpp"
#include "dimae/model.hpp"
#include "dimae/patching.hpp"

namespace dimae::objective {

/// Original-image patches at the plan's masked positions.
struct ReconTarget {
  patching::PatchSequence target_patches;
  patching::MaskPlan plan;
  DomainId domain = kNoDomain;
};

ReconTarget make_target(const ImageTensor& original, const patching::MaskPlan& plan, int patch_size);

/// Mean squared error over masked patches and pixels. `pred` covers every grid position.
double masked_mse(const patching::PatchSequence& pred, const ReconTarget& target);

struct ObjectiveConfig {
  fourier::StyleMixConfig stylemix;
  double p_visible = 0.25;
  int patch_size = 4;
};

void to_json(nlohmann::json& j, const ObjectiveConfig& c);
void from_json(const nlohmann::json& j, ObjectiveConfig& c);

/// One image ready for the model: visible patches of the augmented view plus its target.
struct PreparedSample {
  patching::PatchSequence visible;
  ReconTarget target;
  ImageTensor augmented;
  fourier::MixRecord mix;
};

struct BatchEntry {
  const ImageTensor* image = nullptr;
  DomainId domain = kNoDomain;
  /// Per-sample seed; augmentation and masking draw from named substreams of it.
  std::uint64_t seed = 0;
};

/// pools[d]: images of domain d usable as auxiliary style sources.
using DomainPools = std::vector<std::vector<const ImageTensor*>>;

/// Augments (one random auxiliary image per other domain) and masks one image.
PreparedSample prepare_sample(const BatchEntry& entry, const DomainPools& pools, const ObjectiveConfig& cfg);

/// Mean masked MSE over the batch; accumulates dL/dparams into `grads` when given.
template <typename T>
double reconstruction_loss(const model::MaskedAutoencoder<T>& model, std::span<const PreparedSample> batch,
                           nn::Gradients<T>* grads);

/// prepare_sample on every entry followed by reconstruction_loss.
template <typename T>
double batch_loss(const model::MaskedAutoencoder<T>& model, std::span<const BatchEntry> batch,
                  const DomainPools& pools, const ObjectiveConfig& cfg, nn::Gradients<T>* grads);

}  // namespace dimae::objective
