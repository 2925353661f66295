#pragma once

// Content encoder over visible patches plus a bank of structurally identical
// per-domain decoders, each with its own parameters and learnable mask token.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <span>
#include <vector>

#include "dimae/image.hpp"
#include "dimae/nn.hpp"
#include "dimae/patching.hpp"

namespace dimae::model {

using nn::Index;
using nn::Matrix;
using nn::ParamId;

struct EncoderConfig {
  int depth = 6;
  int width = 192;
  int heads = 3;
  int patch_size = 4;
  int image_size = 32;
  int channels = 3;
  int feature_dim = 1024;
  int mlp_ratio = 4;

  int grid() const { return image_size / patch_size; }
  int num_patches() const { return grid() * grid(); }
  int patch_dim() const { return channels * patch_size * patch_size; }
};

struct DecoderConfig {
  int depth = 8;
  int width = 128;
  int heads = 4;
  int mlp_ratio = 4;
};

struct ModelConfig {
  EncoderConfig encoder;
  DecoderConfig decoder;
  /// Number of training domains N_d.
  int num_domains = 3;
  /// Route every domain to decoder 0 (the plain-MAE ablation).
  bool single_decoder = false;

  int num_decoders() const { return single_decoder ? 1 : num_domains; }
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);
void to_json(nlohmann::json& j, const DecoderConfig& c);
void from_json(const nlohmann::json& j, DecoderConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Encoder output: one token per visible patch; `positions[k]` is token k's grid slot.
template <typename T>
struct LatentSequence {
  Matrix<T> tokens;
  std::vector<int> positions;
  patching::MaskPlan plan;
};

template <typename T>
struct EncoderTrace {
  Matrix<T> patches;
  std::vector<Index> offsets;
  std::vector<nn::BlockCache<T>> blocks;
  nn::LayerNormCache<T> norm;
  Matrix<T> output;
};

template <typename T>
struct DecoderTrace {
  int decoder = 0;
  int num_patches = 0;
  Matrix<T> latent;
  std::vector<Index> latent_offsets;
  std::vector<std::vector<int>> visible;
  std::vector<Index> offsets;
  std::vector<nn::BlockCache<T>> blocks;
  nn::LayerNormCache<T> norm;
  Matrix<T> normed;
  /// num_samples * num_patches rows of patch_dim predictions.
  Matrix<T> prediction;
};

template <typename T>
struct FeatureTrace {
  EncoderTrace<T> encoder;
  Matrix<T> pooled;
  Matrix<T> features;
};

template <typename T>
class MaskedAutoencoder {
 public:
  MaskedAutoencoder(const ModelConfig& config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  nn::ParameterStore<T>& params() { return params_; }
  const nn::ParameterStore<T>& params() const { return params_; }

  /// Decoder index serving `domain`; throws on unknown domains.
  int route(DomainId domain) const;

  /// Encodes visible patches only. `visible` rows must be the plan's visible set.
  LatentSequence<T> encode(const patching::PatchSequence& visible, const patching::MaskPlan& plan) const;
  /// Predictions for every grid position through the decoder serving `domain`.
  patching::PatchSequence decode(const LatentSequence<T>& z, DomainId domain) const;
  /// Mask-free feature vector: mean-pooled encoder tokens projected to feature_dim.
  std::vector<double> forward_features(const ImageTensor& img) const;

  // Batched passes. `positions[s]` lists the grid positions of sample s's rows.
  EncoderTrace<T> encoder_forward(Matrix<T> patches, const std::vector<std::vector<int>>& positions) const;
  void encoder_backward(const EncoderTrace<T>& trace, const Matrix<T>& d_output, nn::Gradients<T>& grads) const;

  DecoderTrace<T> decoder_forward(int decoder, Matrix<T> latent, std::vector<Index> latent_offsets,
                                  std::vector<std::vector<int>> visible) const;
  /// Returns dL/d(latent).
  Matrix<T> decoder_backward(const DecoderTrace<T>& trace, const Matrix<T>& d_prediction,
                             nn::Gradients<T>& grads) const;

  /// `patches` holds num_patches rows per image, in grid order.
  FeatureTrace<T> features_forward(Matrix<T> patches, int num_images) const;
  void features_backward(const FeatureTrace<T>& trace, const Matrix<T>& d_features, nn::Gradients<T>& grads) const;

  std::vector<ParamId> encoder_parameters() const;
  std::vector<ParamId> feature_head_parameters() const;
  std::vector<ParamId> decoder_parameters(int decoder) const;
  ParamId mask_token(int decoder) const { return decoders_.at(decoder).mask_token; }

 private:
  struct Decoder {
    nn::Linear<T> embed;
    ParamId mask_token = 0;
    std::vector<nn::Block<T>> blocks;
    nn::LayerNorm<T> norm;
    nn::Linear<T> head;
    ParamId first_param = 0;
    ParamId end_param = 0;
  };

  ModelConfig config_;
  nn::ParameterStore<T> params_;
  nn::Linear<T> patch_embed_;
  std::vector<nn::Block<T>> encoder_blocks_;
  nn::LayerNorm<T> encoder_norm_;
  nn::Linear<T> feature_proj_;
  ParamId encoder_end_ = 0;
  std::vector<Decoder> decoders_;
  Matrix<T> encoder_pos_;
  Matrix<T> decoder_pos_;
};

/// Row-major patch matrix of a PatchSequence.
template <typename T>
Matrix<T> to_matrix(const patching::PatchSequence& seq);

extern template class MaskedAutoencoder<float>;
extern template class MaskedAutoencoder<double>;

}  // namespace dimae::model
