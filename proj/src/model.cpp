#include "dimae/model.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "dimae/errors.hpp"
#include "dimae/rng.hpp"

namespace dimae::model {

void ModelConfig::validate() const {
  const auto& e = encoder;
  require(e.depth >= 1 && e.width > 0 && e.heads > 0, "encoder depth, width and heads must be positive");
  require(e.width % e.heads == 0, "encoder width must be divisible by encoder heads");
  require(e.width % 4 == 0, "encoder width must be divisible by 4 (2-D sine-cosine embedding)");
  require(e.patch_size > 0 && e.image_size > 0 && e.image_size % e.patch_size == 0,
          "image_size must be a positive multiple of patch_size");
  require(e.channels > 0 && e.feature_dim > 0 && e.mlp_ratio > 0, "channels, feature_dim and mlp_ratio must be positive");
  require(decoder.depth >= 1 && decoder.depth <= 12, "decoder depth must be in [1, 12]");
  require(decoder.width > 0 && decoder.heads > 0 && decoder.width % decoder.heads == 0,
          "decoder width must be divisible by decoder heads");
  require(decoder.width % 4 == 0, "decoder width must be divisible by 4 (2-D sine-cosine embedding)");
  require(decoder.mlp_ratio > 0, "decoder mlp_ratio must be positive");
  require(num_domains >= 1, "num_domains must be at least 1");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"depth", c.depth},           {"width", c.width},       {"heads", c.heads},
       {"patch_size", c.patch_size}, {"image_size", c.image_size}, {"channels", c.channels},
       {"feature_dim", c.feature_dim}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.patch_size = j.value("patch_size", c.patch_size);
  c.image_size = j.value("image_size", c.image_size);
  c.channels = j.value("channels", c.channels);
  c.feature_dim = j.value("feature_dim", c.feature_dim);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const DecoderConfig& c) {
  j = {{"depth", c.depth}, {"width", c.width}, {"heads", c.heads}, {"mlp_ratio", c.mlp_ratio}};
}

void from_json(const nlohmann::json& j, DecoderConfig& c) {
  c.depth = j.value("depth", c.depth);
  c.width = j.value("width", c.width);
  c.heads = j.value("heads", c.heads);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"encoder", c.encoder},
       {"decoder", c.decoder},
       {"num_domains", c.num_domains},
       {"single_decoder", c.single_decoder}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("encoder")) c.encoder = j.at("encoder").get<EncoderConfig>();
  if (j.contains("decoder")) c.decoder = j.at("decoder").get<DecoderConfig>();
  c.num_domains = j.value("num_domains", c.num_domains);
  c.single_decoder = j.value("single_decoder", c.single_decoder);
}

template <typename T>
Matrix<T> to_matrix(const patching::PatchSequence& seq) {
  Matrix<T> m(seq.rows(), seq.patch_dim());
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(seq.values[static_cast<std::size_t>(i)]);
  return m;
}

template <typename T>
MaskedAutoencoder<T>::MaskedAutoencoder(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const auto& e = config_.encoder;
  const auto& d = config_.decoder;

  patch_embed_ = nn::Linear<T>::create(params_, "encoder.patch_embed", e.patch_dim(), e.width, rng);
  for (int k = 0; k < e.depth; ++k) {
    encoder_blocks_.push_back(nn::Block<T>::create(params_, "encoder.blocks." + std::to_string(k), e.width, e.heads,
                                                   static_cast<Index>(e.width) * e.mlp_ratio, rng));
  }
  encoder_norm_ = nn::LayerNorm<T>::create(params_, "encoder.norm", e.width);
  encoder_end_ = params_.size();
  feature_proj_ = nn::Linear<T>::create(params_, "encoder.feature_proj", e.width, e.feature_dim, rng);

  for (int i = 0; i < config_.num_decoders(); ++i) {
    Decoder dec;
    const std::string prefix = "decoder." + std::to_string(i);
    dec.first_param = params_.size();
    dec.embed = nn::Linear<T>::create(params_, prefix + ".embed", e.width, d.width, rng);
    dec.mask_token = params_.add("mask_token." + std::to_string(i), 1, d.width, false);
    auto& token = params_.value(dec.mask_token);
    for (Index k = 0; k < token.size(); ++k) token.data()[k] = static_cast<T>(rng.truncated_normal(0.02));
    for (int k = 0; k < d.depth; ++k) {
      dec.blocks.push_back(nn::Block<T>::create(params_, prefix + ".blocks." + std::to_string(k), d.width, d.heads,
                                                static_cast<Index>(d.width) * d.mlp_ratio, rng));
    }
    dec.norm = nn::LayerNorm<T>::create(params_, prefix + ".norm", d.width);
    dec.head = nn::Linear<T>::create(params_, prefix + ".head", d.width, e.patch_dim(), rng);
    dec.end_param = params_.size();
    decoders_.push_back(std::move(dec));
  }

  encoder_pos_ = nn::sincos_position_embedding<T>(e.width, e.grid(), e.grid());
  decoder_pos_ = nn::sincos_position_embedding<T>(d.width, e.grid(), e.grid());
}

template <typename T>
int MaskedAutoencoder<T>::route(DomainId domain) const {
  require(domain >= 0 && domain < config_.num_domains,
          "unknown domain id " + std::to_string(domain) + " (model has " + std::to_string(config_.num_domains) +
              " domains)");
  return config_.single_decoder ? 0 : domain;
}

template <typename T>
EncoderTrace<T> MaskedAutoencoder<T>::encoder_forward(Matrix<T> patches,
                                                      const std::vector<std::vector<int>>& positions) const {
  const auto& e = config_.encoder;
  require(patches.cols() == e.patch_dim(), "encoder: patch dimension " + std::to_string(patches.cols()) +
                                               " does not match config " + std::to_string(e.patch_dim()));
  EncoderTrace<T> trace;
  trace.offsets.assign(1, 0);
  for (const auto& pos : positions) trace.offsets.push_back(trace.offsets.back() + static_cast<Index>(pos.size()));
  require(trace.offsets.back() == patches.rows(), "encoder: row count does not match positions");

  Matrix<T> x = patch_embed_.forward(params_, patches);
  Index row = 0;
  for (const auto& pos : positions) {
    for (int p : pos) {
      require(p >= 0 && p < e.num_patches(), "encoder: position out of range");
      x.row(row++) += encoder_pos_.row(p);
    }
  }
  trace.patches = std::move(patches);
  trace.blocks.resize(encoder_blocks_.size());
  for (std::size_t k = 0; k < encoder_blocks_.size(); ++k) {
    x = encoder_blocks_[k].forward(params_, x, trace.offsets, trace.blocks[k]);
  }
  trace.output = encoder_norm_.forward(params_, x, trace.norm);
  return trace;
}

template <typename T>
void MaskedAutoencoder<T>::encoder_backward(const EncoderTrace<T>& trace, const Matrix<T>& d_output,
                                            nn::Gradients<T>& grads) const {
  Matrix<T> d = encoder_norm_.backward(params_, d_output, trace.norm, grads);
  for (std::size_t k = encoder_blocks_.size(); k-- > 0;) {
    d = encoder_blocks_[k].backward(params_, d, trace.offsets, trace.blocks[k], grads);
  }
  patch_embed_.backward(params_, trace.patches, d, grads, false);
}

template <typename T>
DecoderTrace<T> MaskedAutoencoder<T>::decoder_forward(int decoder, Matrix<T> latent, std::vector<Index> latent_offsets,
                                                      std::vector<std::vector<int>> visible) const {
  require(decoder >= 0 && decoder < static_cast<int>(decoders_.size()), "decoder index out of range");
  const Decoder& dec = decoders_[decoder];
  const int n = config_.encoder.num_patches();
  const auto samples = visible.size();
  require(latent_offsets.size() == samples + 1 && latent_offsets.back() == latent.rows(),
          "decoder: latent offsets do not match samples");

  DecoderTrace<T> trace;
  trace.decoder = decoder;
  trace.num_patches = n;
  Matrix<T> embedded = dec.embed.forward(params_, latent);
  Matrix<T> x(static_cast<Index>(samples) * n, config_.decoder.width);
  const auto& token = params_.value(dec.mask_token);
  for (std::size_t s = 0; s < samples; ++s) {
    const Index base = static_cast<Index>(s) * n;
    for (int p = 0; p < n; ++p) x.row(base + p) = token.row(0);
    require(static_cast<Index>(visible[s].size()) == latent_offsets[s + 1] - latent_offsets[s],
            "decoder: token count differs from visible count");
    for (std::size_t k = 0; k < visible[s].size(); ++k) {
      require(visible[s][k] >= 0 && visible[s][k] < n, "decoder: visible position out of range");
      x.row(base + visible[s][k]) = embedded.row(latent_offsets[s] + static_cast<Index>(k));
    }
    x.middleRows(base, n) += decoder_pos_;
  }
  trace.offsets.resize(samples + 1);
  for (std::size_t s = 0; s <= samples; ++s) trace.offsets[s] = static_cast<Index>(s) * n;
  trace.blocks.resize(dec.blocks.size());
  for (std::size_t k = 0; k < dec.blocks.size(); ++k) {
    x = dec.blocks[k].forward(params_, x, trace.offsets, trace.blocks[k]);
  }
  trace.normed = dec.norm.forward(params_, x, trace.norm);
  trace.prediction = dec.head.forward(params_, trace.normed);
  trace.latent = std::move(latent);
  trace.latent_offsets = std::move(latent_offsets);
  trace.visible = std::move(visible);
  return trace;
}

template <typename T>
Matrix<T> MaskedAutoencoder<T>::decoder_backward(const DecoderTrace<T>& trace, const Matrix<T>& d_prediction,
                                                 nn::Gradients<T>& grads) const {
  const Decoder& dec = decoders_[trace.decoder];
  const int n = trace.num_patches;
  Matrix<T> d = dec.head.backward(params_, trace.normed, d_prediction, grads);
  d = dec.norm.backward(params_, d, trace.norm, grads);
  for (std::size_t k = dec.blocks.size(); k-- > 0;) {
    d = dec.blocks[k].backward(params_, d, trace.offsets, trace.blocks[k], grads);
  }
  Matrix<T> d_embedded(trace.latent.rows(), config_.decoder.width);
  auto& d_token = grads[dec.mask_token];
  std::vector<char> is_visible(n);
  for (std::size_t s = 0; s < trace.visible.size(); ++s) {
    const Index base = static_cast<Index>(s) * n;
    std::fill(is_visible.begin(), is_visible.end(), 0);
    for (std::size_t k = 0; k < trace.visible[s].size(); ++k) {
      const int p = trace.visible[s][k];
      is_visible[p] = 1;
      d_embedded.row(trace.latent_offsets[s] + static_cast<Index>(k)) = d.row(base + p);
    }
    for (int p = 0; p < n; ++p) {
      if (!is_visible[p]) d_token.row(0) += d.row(base + p);
    }
  }
  return dec.embed.backward(params_, trace.latent, d_embedded, grads);
}

template <typename T>
FeatureTrace<T> MaskedAutoencoder<T>::features_forward(Matrix<T> patches, int num_images) const {
  const int n = config_.encoder.num_patches();
  require(patches.rows() == static_cast<Index>(num_images) * n, "features: expected num_patches rows per image");
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::vector<std::vector<int>> positions(num_images, all);
  FeatureTrace<T> trace;
  trace.encoder = encoder_forward(std::move(patches), positions);
  trace.pooled.resize(num_images, config_.encoder.width);
  for (int s = 0; s < num_images; ++s) {
    trace.pooled.row(s) = trace.encoder.output.middleRows(static_cast<Index>(s) * n, n).colwise().mean();
  }
  trace.features = feature_proj_.forward(params_, trace.pooled);
  return trace;
}

template <typename T>
void MaskedAutoencoder<T>::features_backward(const FeatureTrace<T>& trace, const Matrix<T>& d_features,
                                             nn::Gradients<T>& grads) const {
  const int n = config_.encoder.num_patches();
  Matrix<T> d_pooled = feature_proj_.backward(params_, trace.pooled, d_features, grads);
  Matrix<T> d_tokens(trace.encoder.output.rows(), trace.encoder.output.cols());
  for (Index s = 0; s < d_pooled.rows(); ++s) {
    d_tokens.middleRows(s * n, n) = (d_pooled.row(s) / static_cast<T>(n)).replicate(n, 1);
  }
  encoder_backward(trace.encoder, d_tokens, grads);
}

template <typename T>
LatentSequence<T> MaskedAutoencoder<T>::encode(const patching::PatchSequence& visible,
                                               const patching::MaskPlan& plan) const {
  require(plan.num_patches == config_.encoder.num_patches(), "encode: plan grid size differs from config");
  require(static_cast<std::size_t>(visible.rows()) == plan.visible_idx.size(),
          "encode: " + std::to_string(visible.rows()) + " patches given, plan has " +
              std::to_string(plan.visible_idx.size()) + " visible");
  require(visible.patch_dim() == config_.encoder.patch_dim(), "encode: patch dimension differs from config");
  auto trace = encoder_forward(to_matrix<T>(visible), {visible.positions});
  return LatentSequence<T>{std::move(trace.output), visible.positions, plan};
}

template <typename T>
patching::PatchSequence MaskedAutoencoder<T>::decode(const LatentSequence<T>& z, DomainId domain) const {
  const int decoder = route(domain);
  require(static_cast<std::size_t>(z.tokens.rows()) == z.plan.visible_idx.size() &&
              z.positions.size() == z.plan.visible_idx.size(),
          "decode: token count differs from the plan's visible count");
  auto trace = decoder_forward(decoder, z.tokens, {0, z.tokens.rows()}, {z.positions});
  const auto& e = config_.encoder;
  patching::PatchSequence out;
  out.patch_size = e.patch_size;
  out.channels = e.channels;
  out.grid_h = out.grid_w = e.grid();
  out.positions.resize(e.num_patches());
  std::iota(out.positions.begin(), out.positions.end(), 0);
  out.values.resize(static_cast<std::size_t>(trace.prediction.size()));
  for (Index i = 0; i < trace.prediction.size(); ++i) out.values[i] = static_cast<double>(trace.prediction.data()[i]);
  return out;
}

template <typename T>
std::vector<double> MaskedAutoencoder<T>::forward_features(const ImageTensor& img) const {
  const auto& e = config_.encoder;
  require(img.channels() == e.channels && img.height() == e.image_size && img.width() == e.image_size,
          "forward_features: image shape does not match the encoder config");
  auto trace = features_forward(to_matrix<T>(patching::patchify(img, e.patch_size)), 1);
  std::vector<double> out(static_cast<std::size_t>(trace.features.cols()));
  for (Index i = 0; i < trace.features.cols(); ++i) out[i] = static_cast<double>(trace.features(0, i));
  return out;
}

template <typename T>
std::vector<ParamId> MaskedAutoencoder<T>::encoder_parameters() const {
  std::vector<ParamId> ids(encoder_end_);
  std::iota(ids.begin(), ids.end(), ParamId{0});
  return ids;
}

template <typename T>
std::vector<ParamId> MaskedAutoencoder<T>::feature_head_parameters() const {
  return {feature_proj_.weight, feature_proj_.bias};
}

template <typename T>
std::vector<ParamId> MaskedAutoencoder<T>::decoder_parameters(int decoder) const {
  const Decoder& dec = decoders_.at(decoder);
  std::vector<ParamId> ids(dec.end_param - dec.first_param);
  std::iota(ids.begin(), ids.end(), dec.first_param);
  return ids;
}

template Matrix<float> to_matrix<float>(const patching::PatchSequence&);
template Matrix<double> to_matrix<double>(const patching::PatchSequence&);
template class MaskedAutoencoder<float>;
template class MaskedAutoencoder<double>;

}  // namespace dimae::model
