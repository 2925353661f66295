#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dimae/image.hpp"

namespace dimae::patching {

/// Visible/masked partition of a patch grid. Both index lists are sorted ascending;
/// `permutation` is the shuffle whose first |visible| entries were kept.
struct MaskPlan {
  int num_patches = 0;
  std::vector<int> visible_idx;
  std::vector<int> masked_idx;
  std::vector<int> permutation;
  std::uint64_t seed = 0;

  /// Every patch visible (used for mask-free feature extraction).
  static MaskPlan full(int num_patches);
};

/// Rows of flattened patches (channel-major, then row-major within the patch),
/// tagged with their grid positions.
struct PatchSequence {
  int patch_size = 0;
  int channels = 0;
  int grid_h = 0;
  int grid_w = 0;
  std::vector<int> positions;
  std::vector<double> values;

  int rows() const { return static_cast<int>(positions.size()); }
  int patch_dim() const { return channels * patch_size * patch_size; }
  int num_grid_patches() const { return grid_h * grid_w; }
  std::span<const double> patch(int row) const {
    return std::span<const double>(values).subspan(static_cast<std::size_t>(row) * patch_dim(), patch_dim());
  }
  std::span<double> patch(int row) {
    return std::span<double>(values).subspan(static_cast<std::size_t>(row) * patch_dim(), patch_dim());
  }
};

inline constexpr double kMaskedFill = 0.5;

PatchSequence patchify(const ImageTensor& img, int patch_size);

/// Rows of `patches` at the given grid positions (which must be present).
PatchSequence select(const PatchSequence& patches, std::span<const int> positions);

/// Fixed-count uniform subset of round(p_visible * num_patches) visible patches.
MaskPlan sample_mask(int num_patches, double p_visible, std::uint64_t seed);

/// Scatters rows back to their grid positions; missing positions take `fill`.
ImageTensor unpatchify(const PatchSequence& patches, double fill = kMaskedFill);

/// As above, additionally checking that the rows are exactly the plan's visible set.
ImageTensor unpatchify(const PatchSequence& patches, const MaskPlan& plan, double fill = kMaskedFill);

}  // namespace dimae::patching
