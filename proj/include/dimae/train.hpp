#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

#include "dimae/checkpoint.hpp"
#include "dimae/data.hpp"
#include "dimae/model.hpp"
#include "dimae/objective.hpp"

namespace dimae::train {

using nn::Matrix;
using nn::ParamId;

struct TrainConfig {
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  int epochs = 100;
  /// Defaults to 5% of `epochs`.
  std::optional<double> warmup_epochs;
  int batch_per_domain = 16;
  std::uint64_t seed = 0;
  /// Write an intermediate checkpoint every N epochs (0 = final only).
  int checkpoint_every = 0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;

  double warmup() const { return warmup_epochs.value_or(0.05 * epochs); }
  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Linear warmup to base_lr over round(total_steps * warmup / epochs) steps, then a
/// half cosine to zero.
double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg);
std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& cfg);

/// Adam with decoupled weight decay over a chosen subset of parameters. Weight
/// decay only touches parameters the store marks as decaying (linear weights);
/// biases, norm parameters and mask tokens are exempt.
template <typename T>
class AdamW {
 public:
  AdamW(const nn::ParameterStore<T>& store, std::vector<ParamId> trainable, double beta1, double beta2, double eps,
        double weight_decay)
      : trainable_(std::move(trainable)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
    for (auto id : trainable_) {
      m_.emplace_back(Matrix<T>::Zero(store.value(id).rows(), store.value(id).cols()));
      v_.emplace_back(Matrix<T>::Zero(store.value(id).rows(), store.value(id).cols()));
    }
  }

  void step(nn::ParameterStore<T>& store, const nn::Gradients<T>& grads, double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
    const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
    for (std::size_t k = 0; k < trainable_.size(); ++k) {
      const ParamId id = trainable_[k];
      auto& p = store.value(id);
      if (const Matrix<T>* g = grads.find(id)) {
        m_[k] = b1 * m_[k] + (T(1) - b1) * *g;
        v_[k] = b2 * v_[k] + (T(1) - b2) * g->cwiseProduct(*g);
      } else {
        m_[k] *= b1;
        v_[k] *= b2;
      }
      if (applies_decay(store, id)) p *= static_cast<T>(1.0 - lr * weight_decay_);
      const T step_size = static_cast<T>(lr / bc1);
      const T denom_scale = static_cast<T>(1.0 / std::sqrt(bc2));
      p.array() -= step_size * m_[k].array() / (v_[k].array().sqrt() * denom_scale + static_cast<T>(eps_));
    }
  }

  bool applies_decay(const nn::ParameterStore<T>& store, ParamId id) const {
    return weight_decay_ > 0.0 && store.decays(id);
  }

  std::int64_t steps() const { return steps_; }
  const std::vector<ParamId>& trainable() const { return trainable_; }

  void save(const nn::ParameterStore<T>& store, checkpoint::Archive& archive) const {
    for (std::size_t k = 0; k < trainable_.size(); ++k) {
      archive.tensors.push_back(checkpoint::to_tensor("optim.m." + store.name(trainable_[k]), m_[k]));
      archive.tensors.push_back(checkpoint::to_tensor("optim.v." + store.name(trainable_[k]), v_[k]));
    }
    archive.meta["optimizer_steps"] = steps_;
  }

  void load(const nn::ParameterStore<T>& store, const checkpoint::Archive& archive) {
    for (std::size_t k = 0; k < trainable_.size(); ++k) {
      const auto* m = archive.find("optim.m." + store.name(trainable_[k]));
      const auto* v = archive.find("optim.v." + store.name(trainable_[k]));
      if (!m || !v) throw IoError("checkpoint lacks optimizer state for " + store.name(trainable_[k]));
      checkpoint::from_tensor(*m, m_[k]);
      checkpoint::from_tensor(*v, v_[k]);
    }
    steps_ = archive.meta.at("optimizer_steps").get<std::int64_t>();
  }

 private:
  std::vector<ParamId> trainable_;
  std::vector<Matrix<T>> m_;
  std::vector<Matrix<T>> v_;
  double beta1_, beta2_, eps_, weight_decay_;
  std::int64_t steps_ = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
};

/// The JSON-lines record: {"epoch":..,"loss":..,"lr":..}.
std::string metrics_line(const EpochMetrics& m);

struct PretrainOptions {
  TrainConfig train;
  objective::ObjectiveConfig objective;
  /// Checkpoints and metrics.jsonl go here when non-empty.
  std::filesystem::path out_dir;
  /// Stop after this many epochs of the schedule (testing resume); 0 = run all.
  int stop_after_epoch = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct PretrainResult {
  std::vector<EpochMetrics> metrics;
  std::filesystem::path final_checkpoint;
};

/// Parameters updated during pretraining: encoder, every decoder and mask token.
/// The feature projection used for probing is not part of the reconstruction path.
std::vector<ParamId> pretrain_parameters(const model::MaskedAutoencoder<float>& model);

/// Checkpoint written by pretrain(); resume_checkpoint continues from it.
checkpoint::Archive training_archive(const model::MaskedAutoencoder<float>& model, const AdamW<float>& optimizer,
                                     const PretrainOptions& options, const data::DomainRegistry& registry,
                                     int epochs_done);

/// Cross-domain masked reconstruction pretraining over every domain of `dataset`.
/// With `resume`, parameters, optimizer moments and the epoch counter come from
/// that checkpoint and training continues with the next epoch.
PretrainResult pretrain(const data::Dataset& dataset, model::MaskedAutoencoder<float>& model,
                        const PretrainOptions& options, const checkpoint::Archive* resume = nullptr);

}  // namespace dimae::train
