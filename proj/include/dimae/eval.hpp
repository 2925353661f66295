#pragma once

// Downstream evaluation of a pretrained encoder: linear probing on frozen
// features, full fine-tuning, the cross-domain label-fraction protocol, the
// ablation grid, feature export and reconstruction grids.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dimae/data.hpp"
#include "dimae/model.hpp"
#include "dimae/objective.hpp"
#include "dimae/train.hpp"

namespace dimae::eval {

using Model = model::MaskedAutoencoder<float>;
using nn::Matrix;

/// Mask-free encoder features, one row per selected sample.
struct FeatureTable {
  Eigen::MatrixXd features;
  std::vector<int> labels;
  std::vector<DomainId> domains;
};

FeatureTable extract_features(const Model& model, const data::Dataset& dataset);
FeatureTable extract_features(const Model& model, const data::Dataset& dataset,
                              const std::vector<std::size_t>& indices);

struct ProbeConfig {
  int steps = 500;
  double lr = 0.1;
  /// Standardize features with the training split's mean and std.
  bool standardize = true;
  /// Run the descent in whitened principal coordinates of the training features.
  bool whiten = true;
};

void to_json(nlohmann::json& j, const ProbeConfig& c);
void from_json(const nlohmann::json& j, ProbeConfig& c);

/// Multinomial logistic regression on (optionally standardized) features.
struct LinearClassifier {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;
  Eigen::MatrixXd weight;  // features x classes
  Eigen::RowVectorXd bias;

  Eigen::MatrixXd logits(const Eigen::MatrixXd& x) const;
  std::vector<int> predict(const Eigen::MatrixXd& x) const;
};

/// Full-batch gradient descent from zero weights on mean cross-entropy, optionally
/// preconditioned by whitening.
/// Throws if some class in [0, num_classes) has no training example.
LinearClassifier fit_linear_classifier(const Eigen::MatrixXd& x, const std::vector<int>& labels, int num_classes,
                                       const ProbeConfig& cfg);

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels);

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  LinearClassifier classifier;
};

ProbeResult linear_probe(const Eigen::MatrixXd& train_x, const std::vector<int>& train_y,
                         const Eigen::MatrixXd& test_x, const std::vector<int>& test_y, int num_classes,
                         const ProbeConfig& cfg = {});

struct FinetuneConfig {
  int epochs = 30;
  int batch_size = 32;
  double lr = 5e-4;
  double weight_decay = 0.05;
};

void to_json(nlohmann::json& j, const FinetuneConfig& c);
void from_json(const nlohmann::json& j, FinetuneConfig& c);

/// Encoder, feature projection and a linear classifier trained end to end. Features
/// are batch-standardized during training; inference uses the training set's
/// statistics under the final encoder.
struct FinetunedClassifier {
  Model model;
  nn::ParameterStore<float> head_params;
  nn::Linear<float> head;
  Eigen::RowVectorXf feature_mean;
  Eigen::RowVectorXf feature_scale;

  Matrix<float> standardize(const Matrix<float>& features) const;

  std::vector<int> predict(const data::Dataset& dataset, const std::vector<std::size_t>& indices) const;
};

/// Fine-tunes a copy of `model`; the input model is left untouched.
FinetunedClassifier finetune(const Model& model, const data::Dataset& dataset,
                             const std::vector<std::size_t>& indices, const FinetuneConfig& cfg,
                             std::uint64_t seed);

enum class Method { Auto, Probe, Finetune };

/// Fractions below this train only a linear classifier; at or above it the whole
/// network is fine-tuned.
inline constexpr double kFinetuneThreshold = 0.10;

Method method_for_fraction(double label_fraction);
std::string to_string(Method m);

struct ProtocolConfig {
  ProbeConfig probe;
  FinetuneConfig finetune;
  Method method = Method::Auto;
  std::uint64_t seed = 0;
};

void to_json(nlohmann::json& j, const ProtocolConfig& c);
void from_json(const nlohmann::json& j, ProtocolConfig& c);

struct DomainScore {
  std::string domain;
  std::size_t correct = 0;
  std::size_t total = 0;

  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

/// Arithmetic mean of per-domain accuracies.
double average_accuracy(const std::vector<DomainScore>& scores);
/// Accuracy over all pooled test samples.
double overall_accuracy(const std::vector<DomainScore>& scores);

struct ProtocolResult {
  double label_fraction = 1.0;
  Method method = Method::Probe;
  std::size_t labelled = 0;
  std::vector<DomainScore> per_domain;
  double avg = 0.0;
  double overall = 0.0;
};

void to_json(nlohmann::json& j, const ProtocolResult& r);

/// Class-stratified subset: per class, max(1, round(fraction * n_c)) samples.
std::vector<std::size_t> labelled_subset(const data::Dataset& dataset, double fraction, std::uint64_t seed);

/// Trains on a labelled fraction of `source` and scores every domain of `target`.
/// `pretrain_domains`, when given, must not contain any target domain name.
ProtocolResult cross_domain_protocol(const Model& model, const data::Dataset& source, const data::Dataset& target,
                                     double label_fraction, const ProtocolConfig& cfg,
                                     const std::vector<std::string>& pretrain_domains = {});

/// Per-domain linear evaluation: each domain is split class-stratified into
/// train/test, a classifier is trained per domain.
ProtocolResult in_domain_probe(const Model& model, const data::Dataset& dataset, double test_fraction,
                               const ProtocolConfig& cfg);

struct AblationCell {
  fourier::MixMode mode = fourier::MixMode::StyleMix;
  bool single_decoder = false;
  int decoder_depth = 8;
};

struct AblationSpec {
  std::vector<fourier::MixMode> modes{fourier::MixMode::StyleMix};
  std::vector<bool> single_decoder{false};
  std::vector<int> decoder_depths{8};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  model::ModelConfig model;
  train::TrainConfig train;
  objective::ObjectiveConfig objective;
  ProbeConfig probe;
  double label_fraction = 1.0;

  std::vector<AblationCell> cells() const;
};

void to_json(nlohmann::json& j, const AblationSpec& s);
void from_json(const nlohmann::json& j, AblationSpec& s);

struct AblationRow {
  AblationCell cell;
  std::vector<std::uint64_t> seeds;
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Pretrains every cell on `pretrain` for each seed and reports the cross-domain
/// linear-probe accuracy on `target` (classifier trained on labelled `pretrain`).
/// Model init uses the "init" substream of each seed; training uses the seed.
std::vector<AblationRow> ablation_runner(const AblationSpec& spec, const data::Dataset& pretrain,
                                         const data::Dataset& target,
                                         const std::function<void(const std::string&)>& log = {});

void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

/// CSV: domain_id,class_id,domain,class,f0..f{D-1}; one row per sample. Returns the row count.
std::size_t export_features(const Model& model, const data::Dataset& dataset, const std::filesystem::path& path);

struct Reconstruction {
  ImageTensor input;
  ImageTensor masked;
  std::vector<int> decoders;
  std::vector<ImageTensor> outputs;
};

/// Masks `img` and decodes it with each requested decoder.
Reconstruction reconstruct(const Model& model, const ImageTensor& img, const std::vector<int>& decoders,
                           double p_visible, std::uint64_t seed);

/// Images side by side separated by `gap` columns of `fill`.
ImageTensor tile_row(const std::vector<ImageTensor>& images, int gap = 2, double fill = 1.0);
/// Rows stacked vertically, same convention.
ImageTensor tile_column(const std::vector<ImageTensor>& rows, int gap = 2, double fill = 1.0);

}  // namespace dimae::eval
