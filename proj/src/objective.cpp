#include "dimae/objective.hpp"

#include <string>

#include "dimae/errors.hpp"
#include "dimae/parallel.hpp"
#include "dimae/rng.hpp"

namespace dimae::objective {

using model::Index;
using model::Matrix;

ReconTarget make_target(const ImageTensor& original, const patching::MaskPlan& plan, int patch_size) {
  auto all = patching::patchify(original, patch_size);
  require(all.rows() == plan.num_patches, "make_target: plan grid size differs from the image");
  return ReconTarget{patching::select(all, plan.masked_idx), plan, original.domain};
}

double masked_mse(const patching::PatchSequence& pred, const ReconTarget& target) {
  const auto& tp = target.target_patches;
  require(pred.num_grid_patches() == target.plan.num_patches && pred.rows() == target.plan.num_patches,
          "masked_mse: prediction must cover all " + std::to_string(target.plan.num_patches) + " patches");
  require(pred.patch_dim() == tp.patch_dim(), "masked_mse: patch dimension mismatch");
  require(tp.positions == target.plan.masked_idx, "masked_mse: target patches do not match the plan's masked set");
  require(!tp.positions.empty(), "masked_mse: plan has no masked patches");
  const int dim = pred.patch_dim();
  double total = 0.0;
  for (int r = 0; r < tp.rows(); ++r) {
    const int pos = tp.positions[r];
    require(pred.positions[pos] == pos, "masked_mse: predictions must be in grid order");
    auto p = pred.patch(pos);
    auto t = tp.patch(r);
    for (int k = 0; k < dim; ++k) {
      const double d = p[k] - t[k];
      total += d * d;
    }
  }
  return total / (static_cast<double>(tp.rows()) * dim);
}

PreparedSample prepare_sample(const BatchEntry& entry, const DomainPools& pools, const ObjectiveConfig& cfg) {
  require(entry.image != nullptr, "batch entry has no image");
  require(entry.domain != kNoDomain, "batch entry is missing its domain tag");
  const ImageTensor& x = *entry.image;

  Rng aug_rng(derive_seed(entry.seed, "augment"));
  std::vector<ImageTensor> aux;
  if (cfg.stylemix.mode != fourier::MixMode::None) {
    for (std::size_t d = 0; d < pools.size(); ++d) {
      if (static_cast<DomainId>(d) == entry.domain) continue;
      require(!pools[d].empty(), "domain " + std::to_string(d) + " has no images to draw auxiliary styles from");
      const int pick = aug_rng.uniform_int(0, static_cast<int>(pools[d].size()) - 1);
      aux.push_back(*pools[d][pick]);
      aux.back().domain = static_cast<DomainId>(d);
    }
  }
  ImageTensor source = x;
  source.domain = entry.domain;

  PreparedSample out;
  out.augmented = fourier::augment(source, aux, cfg.stylemix, aug_rng, &out.mix);
  const auto all = patching::patchify(out.augmented, cfg.patch_size);
  const auto plan = patching::sample_mask(all.rows(), cfg.p_visible, derive_seed(entry.seed, "mask"));
  out.visible = patching::select(all, plan.visible_idx);
  out.target = make_target(source, plan, cfg.patch_size);
  return out;
}

template <typename T>
double reconstruction_loss(const model::MaskedAutoencoder<T>& model, std::span<const PreparedSample> batch,
                           nn::Gradients<T>* grads) {
  require(!batch.empty(), "reconstruction_loss: empty batch");
  const auto& ecfg = model.config().encoder;
  const int dim = ecfg.patch_dim();
  const int n = ecfg.num_patches();

  Index rows = 0;
  for (const auto& s : batch) rows += s.visible.rows();
  Matrix<T> patches(rows, dim);
  std::vector<std::vector<int>> positions;
  Index row = 0;
  for (const auto& s : batch) {
    require(s.visible.patch_dim() == dim, "reconstruction_loss: patch dimension differs from the model");
    require(s.target.plan.num_patches == n, "reconstruction_loss: plan grid size differs from the model");
    patches.middleRows(row, s.visible.rows()) = model::to_matrix<T>(s.visible);
    row += s.visible.rows();
    positions.push_back(s.visible.positions);
  }
  auto enc = model.encoder_forward(std::move(patches), positions);

  // Route samples to decoders, preserving batch order within each group.
  std::vector<std::vector<std::size_t>> groups(model.config().num_decoders());
  for (std::size_t i = 0; i < batch.size(); ++i) groups[model.route(batch[i].target.domain)].push_back(i);

  std::size_t masked_total = 0;
  for (const auto& s : batch) masked_total += s.target.target_patches.positions.size();
  const double denom = static_cast<double>(masked_total) * dim;

  double total = 0.0;
  Matrix<T> d_latent;
  if (grads) d_latent = Matrix<T>::Zero(enc.output.rows(), enc.output.cols());
  for (std::size_t g = 0; g < groups.size(); ++g) {
    if (groups[g].empty()) continue;
    Index group_rows = 0;
    for (auto i : groups[g]) group_rows += enc.offsets[i + 1] - enc.offsets[i];
    Matrix<T> latent(group_rows, enc.output.cols());
    std::vector<Index> offsets{0};
    std::vector<std::vector<int>> visible;
    for (auto i : groups[g]) {
      const Index len = enc.offsets[i + 1] - enc.offsets[i];
      latent.middleRows(offsets.back(), len) = enc.output.middleRows(enc.offsets[i], len);
      offsets.push_back(offsets.back() + len);
      visible.push_back(positions[i]);
    }
    auto dec = model.decoder_forward(static_cast<int>(g), std::move(latent), std::move(offsets), std::move(visible));

    Matrix<T> d_pred;
    if (grads) d_pred = Matrix<T>::Zero(dec.prediction.rows(), dec.prediction.cols());
    for (std::size_t k = 0; k < groups[g].size(); ++k) {
      const auto& target = batch[groups[g][k]].target.target_patches;
      for (int r = 0; r < target.rows(); ++r) {
        const Index pred_row = static_cast<Index>(k) * n + target.positions[r];
        auto t = target.patch(r);
        for (int c = 0; c < dim; ++c) {
          const double diff = static_cast<double>(dec.prediction(pred_row, c)) - t[c];
          total += diff * diff;
          if (grads) d_pred(pred_row, c) = static_cast<T>(2.0 * diff / denom);
        }
      }
    }
    if (grads) {
      Matrix<T> d_group = model.decoder_backward(dec, d_pred, *grads);
      Index src = 0;
      for (auto i : groups[g]) {
        const Index len = enc.offsets[i + 1] - enc.offsets[i];
        d_latent.middleRows(enc.offsets[i], len) += d_group.middleRows(src, len);
        src += len;
      }
    }
  }
  if (grads) model.encoder_backward(enc, d_latent, *grads);
  return total / denom;
}

template <typename T>
double batch_loss(const model::MaskedAutoencoder<T>& model, std::span<const BatchEntry> batch, const DomainPools& pools,
                  const ObjectiveConfig& cfg, nn::Gradients<T>* grads) {
  std::vector<PreparedSample> prepared(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) { prepared[i] = prepare_sample(batch[i], pools, cfg); });
  return reconstruction_loss(model, std::span<const PreparedSample>(prepared), grads);
}

template double reconstruction_loss<float>(const model::MaskedAutoencoder<float>&, std::span<const PreparedSample>,
                                           nn::Gradients<float>*);
template double reconstruction_loss<double>(const model::MaskedAutoencoder<double>&, std::span<const PreparedSample>,
                                            nn::Gradients<double>*);
template double batch_loss<float>(const model::MaskedAutoencoder<float>&, std::span<const BatchEntry>,
                                  const DomainPools&, const ObjectiveConfig&, nn::Gradients<float>*);
template double batch_loss<double>(const model::MaskedAutoencoder<double>&, std::span<const BatchEntry>,
                                   const DomainPools&, const ObjectiveConfig&, nn::Gradients<double>*);

void to_json(nlohmann::json& j, const ObjectiveConfig& c) {
  j = nlohmann::json{{"stylemix", c.stylemix}, {"p_visible", c.p_visible}, {"patch_size", c.patch_size}};
}

void from_json(const nlohmann::json& j, ObjectiveConfig& c) {
  ObjectiveConfig d;
  c.stylemix = j.contains("stylemix") ? j.at("stylemix").get<fourier::StyleMixConfig>() : d.stylemix;
  c.p_visible = j.value("p_visible", d.p_visible);
  c.patch_size = j.value("patch_size", d.patch_size);
  require(c.p_visible > 0.0 && c.p_visible < 1.0, "p_visible must be in (0, 1)");
  require(c.patch_size > 0, "patch_size must be positive");
}

}  // namespace dimae::objective
