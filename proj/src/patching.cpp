#include "dimae/patching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dimae/errors.hpp"
#include "dimae/rng.hpp"

namespace dimae::patching {

MaskPlan MaskPlan::full(int num_patches) {
  require(num_patches > 0, "MaskPlan::full: num_patches must be positive");
  MaskPlan plan;
  plan.num_patches = num_patches;
  plan.visible_idx.resize(num_patches);
  std::iota(plan.visible_idx.begin(), plan.visible_idx.end(), 0);
  plan.permutation = plan.visible_idx;
  return plan;
}

PatchSequence patchify(const ImageTensor& img, int patch_size) {
  require(patch_size > 0, "patchify: patch size must be positive");
  require(img.height() % patch_size == 0 && img.width() % patch_size == 0,
          "patchify: image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
              " not divisible by patch size " + std::to_string(patch_size));
  PatchSequence seq;
  seq.patch_size = patch_size;
  seq.channels = img.channels();
  seq.grid_h = img.height() / patch_size;
  seq.grid_w = img.width() / patch_size;
  const int n = seq.grid_h * seq.grid_w;
  seq.positions.resize(n);
  std::iota(seq.positions.begin(), seq.positions.end(), 0);
  seq.values.resize(static_cast<std::size_t>(n) * seq.patch_dim());
  for (int p = 0; p < n; ++p) {
    const int gy = p / seq.grid_w;
    const int gx = p % seq.grid_w;
    auto out = seq.patch(p);
    std::size_t k = 0;
    for (int c = 0; c < img.channels(); ++c) {
      for (int y = 0; y < patch_size; ++y) {
        for (int x = 0; x < patch_size; ++x) out[k++] = img.at(c, gy * patch_size + y, gx * patch_size + x);
      }
    }
  }
  return seq;
}

PatchSequence select(const PatchSequence& patches, std::span<const int> positions) {
  PatchSequence out = patches;
  out.positions.assign(positions.begin(), positions.end());
  out.values.assign(static_cast<std::size_t>(positions.size()) * patches.patch_dim(), 0.0);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    auto it = std::find(patches.positions.begin(), patches.positions.end(), positions[r]);
    require(it != patches.positions.end(), "select: position " + std::to_string(positions[r]) + " not present");
    auto src = patches.patch(static_cast<int>(it - patches.positions.begin()));
    std::copy(src.begin(), src.end(), out.patch(static_cast<int>(r)).begin());
  }
  return out;
}

MaskPlan sample_mask(int num_patches, double p_visible, std::uint64_t seed) {
  require(num_patches > 0, "sample_mask: num_patches must be positive");
  require(p_visible > 0.0 && p_visible < 1.0, "sample_mask: p_visible must be in (0, 1)");
  const int keep = static_cast<int>(std::lround(p_visible * num_patches));
  require(keep >= 1 && keep < num_patches,
          "sample_mask: p_visible=" + std::to_string(p_visible) + " leaves " + std::to_string(keep) + " of " +
              std::to_string(num_patches) + " patches visible");
  MaskPlan plan;
  plan.num_patches = num_patches;
  plan.seed = seed;
  plan.permutation.resize(num_patches);
  std::iota(plan.permutation.begin(), plan.permutation.end(), 0);
  Rng rng(seed);
  rng.shuffle(plan.permutation.begin(), plan.permutation.end());
  plan.visible_idx.assign(plan.permutation.begin(), plan.permutation.begin() + keep);
  plan.masked_idx.assign(plan.permutation.begin() + keep, plan.permutation.end());
  std::sort(plan.visible_idx.begin(), plan.visible_idx.end());
  std::sort(plan.masked_idx.begin(), plan.masked_idx.end());
  return plan;
}

ImageTensor unpatchify(const PatchSequence& patches, double fill) {
  const int P = patches.patch_size;
  require(P > 0 && patches.grid_h > 0 && patches.grid_w > 0, "unpatchify: empty patch grid");
  require(patches.values.size() == static_cast<std::size_t>(patches.rows()) * patches.patch_dim(),
          "unpatchify: value buffer does not match row count");
  ImageTensor img(patches.channels, patches.grid_h * P, patches.grid_w * P, fill);
  for (int r = 0; r < patches.rows(); ++r) {
    const int pos = patches.positions[r];
    require(pos >= 0 && pos < patches.num_grid_patches(), "unpatchify: position out of range");
    const int gy = pos / patches.grid_w;
    const int gx = pos % patches.grid_w;
    auto src = patches.patch(r);
    std::size_t k = 0;
    for (int c = 0; c < patches.channels; ++c) {
      for (int y = 0; y < P; ++y) {
        for (int x = 0; x < P; ++x) img.at(c, gy * P + y, gx * P + x) = src[k++];
      }
    }
  }
  return img;
}

ImageTensor unpatchify(const PatchSequence& patches, const MaskPlan& plan, double fill) {
  require(plan.num_patches == patches.num_grid_patches(), "unpatchify: plan grid size differs from patches");
  require(static_cast<std::size_t>(patches.rows()) == plan.visible_idx.size(),
          "unpatchify: " + std::to_string(patches.rows()) + " patches given, plan has " +
              std::to_string(plan.visible_idx.size()) + " visible");
  std::vector<int> sorted = patches.positions;
  std::sort(sorted.begin(), sorted.end());
  require(sorted == plan.visible_idx, "unpatchify: patch positions differ from the plan's visible set");
  return unpatchify(patches, fill);
}

}  // namespace dimae::patching
