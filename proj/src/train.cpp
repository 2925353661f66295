#include "dimae/train.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "dimae/errors.hpp"
#include "dimae/parallel.hpp"
#include "dimae/rng.hpp"

namespace dimae::train {

namespace fs = std::filesystem;

void TrainConfig::validate() const {
  require(base_lr > 0.0 && std::isfinite(base_lr), "base_lr must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(epochs >= 1, "epochs must be at least 1");
  require(warmup() >= 0.0 && warmup() <= epochs, "warmup_epochs must be in [0, epochs]");
  require(batch_per_domain >= 1, "batch_per_domain must be at least 1");
  require(checkpoint_every >= 0, "checkpoint_every must be non-negative");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "Adam betas must be in [0, 1)");
  require(eps > 0.0, "eps must be positive");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"base_lr", c.base_lr},
                     {"weight_decay", c.weight_decay},
                     {"epochs", c.epochs},
                     {"warmup_epochs", c.warmup()},
                     {"batch_per_domain", c.batch_per_domain},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"eps", c.eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.base_lr = j.value("base_lr", d.base_lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.epochs = j.value("epochs", d.epochs);
  c.warmup_epochs = j.contains("warmup_epochs") ? std::optional<double>(j.at("warmup_epochs").get<double>())
                                                : std::nullopt;
  c.batch_per_domain = j.value("batch_per_domain", d.batch_per_domain);
  c.seed = j.value("seed", d.seed);
  c.checkpoint_every = j.value("checkpoint_every", d.checkpoint_every);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  c.validate();
}

std::int64_t warmup_steps(std::int64_t total_steps, const TrainConfig& cfg) {
  return std::llround(static_cast<double>(total_steps) * cfg.warmup() / cfg.epochs);
}

double lr_at(std::int64_t step, std::int64_t total_steps, const TrainConfig& cfg) {
  require(total_steps >= 1, "lr_at: total_steps must be positive");
  require(step >= 0 && step < total_steps, "lr_at: step out of range");
  const std::int64_t warm = warmup_steps(total_steps, cfg);
  if (step < warm) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warm);
  const std::int64_t span = total_steps - warm;
  const double t = span > 0 ? static_cast<double>(step - warm) / static_cast<double>(span) : 0.0;
  return 0.5 * cfg.base_lr * (1.0 + std::cos(std::numbers::pi * t));
}

std::string metrics_line(const EpochMetrics& m) {
  return nlohmann::json{{"epoch", m.epoch}, {"loss", m.loss}, {"lr", m.lr}}.dump();
}

std::vector<ParamId> pretrain_parameters(const model::MaskedAutoencoder<float>& model) {
  auto ids = model.encoder_parameters();
  for (int d = 0; d < model.config().num_decoders(); ++d) {
    const auto dec = model.decoder_parameters(d);
    ids.insert(ids.end(), dec.begin(), dec.end());
  }
  return ids;
}

checkpoint::Archive training_archive(const model::MaskedAutoencoder<float>& model, const AdamW<float>& optimizer,
                                     const PretrainOptions& options, const data::DomainRegistry& registry,
                                     int epochs_done) {
  auto archive = checkpoint::model_archive(model);
  archive.config["train"] = options.train;
  archive.config["objective"] = options.objective;
  archive.meta["epochs_done"] = epochs_done;
  archive.meta["domains"] = registry.names();
  optimizer.save(model.params(), archive);
  return archive;
}

namespace {

std::string epoch_tag(int epoch) {
  std::ostringstream os;
  os << "checkpoint_epoch_" << std::setw(4) << std::setfill('0') << epoch << ".ckpt";
  return os.str();
}

}  // namespace

PretrainResult pretrain(const data::Dataset& dataset, model::MaskedAutoencoder<float>& model,
                        const PretrainOptions& options, const checkpoint::Archive* resume) {
  const auto& tcfg = options.train;
  tcfg.validate();
  options.objective.stylemix.validate();
  const auto& mcfg = model.config();
  require(dataset.registry.size() == mcfg.num_domains,
          "dataset has " + std::to_string(dataset.registry.size()) + " domains but the model expects " +
              std::to_string(mcfg.num_domains));
  require(options.objective.patch_size == mcfg.encoder.patch_size, "objective and model patch sizes differ");
  if (options.objective.stylemix.mode != fourier::MixMode::None) {
    require(mcfg.num_domains >= 2, "style mixing needs at least 2 domains (N_d >= 2)");
  }

  objective::DomainPools pools(static_cast<std::size_t>(mcfg.num_domains));
  for (const auto& s : dataset.samples) {
    require(s.image.channels() == mcfg.encoder.channels && s.image.height() == mcfg.encoder.image_size &&
                s.image.width() == mcfg.encoder.image_size,
            "image " + s.path + " does not match the model input shape");
    pools[static_cast<std::size_t>(s.domain)].push_back(&s.image);
  }
  for (std::size_t d = 0; d < pools.size(); ++d) {
    require(!pools[d].empty(), "domain " + dataset.registry.name(static_cast<DomainId>(d)) + " has no images");
  }

  const auto steps_per_epoch =
      static_cast<std::int64_t>(data::stratified_batches(dataset, tcfg.batch_per_domain, 0).size());
  const std::int64_t total_steps = steps_per_epoch * tcfg.epochs;

  AdamW<float> optimizer(model.params(), pretrain_parameters(model), tcfg.beta1, tcfg.beta2, tcfg.eps,
                         tcfg.weight_decay);
  int first_epoch = 1;
  if (resume) {
    first_epoch = resume->meta.at("epochs_done").get<int>() + 1;
    optimizer.load(model.params(), *resume);
    const auto& p = model.params();
    for (ParamId id = 0; id < p.size(); ++id) {
      const auto* t = resume->find(p.name(id));
      if (!t) throw IoError("resume checkpoint is missing tensor " + p.name(id));
      checkpoint::from_tensor(*t, model.params().value(id));
    }
  }

  std::ofstream metrics_file;
  if (!options.out_dir.empty()) {
    fs::create_directories(options.out_dir);
    metrics_file.open(options.out_dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
    if (!metrics_file) throw IoError("cannot open " + (options.out_dir / "metrics.jsonl").string());
  }

  PretrainResult result;
  const int last_epoch = options.stop_after_epoch > 0 ? std::min(options.stop_after_epoch, tcfg.epochs) : tcfg.epochs;
  std::int64_t step = (first_epoch - 1) * steps_per_epoch;
  for (int epoch = first_epoch; epoch <= last_epoch; ++epoch) {
    const auto batches = data::stratified_batches(dataset, tcfg.batch_per_domain,
                                                  derive_seed(tcfg.seed, "data", {static_cast<std::uint64_t>(epoch)}));
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < batches.size(); ++b, ++step) {
      lr = lr_at(step, total_steps, tcfg);
      std::vector<objective::BatchEntry> entries;
      entries.reserve(batches[b].size());
      for (std::size_t k = 0; k < batches[b].size(); ++k) {
        const auto& s = dataset.samples[batches[b][k]];
        entries.push_back({&s.image, s.domain,
                           derive_seed(tcfg.seed, "sample",
                                       {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(b),
                                        static_cast<std::uint64_t>(k)})});
      }
      nn::Gradients<float> grads(model.params());
      const double loss = objective::batch_loss<float>(model, entries, pools, options.objective, &grads);
      if (!std::isfinite(loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at epoch " << epoch << " batch " << b << " (lr " << lr << ")";
        throw NumericError(msg.str());
      }
      optimizer.step(model.params(), grads, lr);
      loss_sum += loss;
    }
    EpochMetrics m{epoch, loss_sum / static_cast<double>(batches.size()), lr};
    result.metrics.push_back(m);
    if (metrics_file.is_open()) {
      metrics_file << metrics_line(m) << '\n';
      metrics_file.flush();
    }
    if (options.on_epoch) options.on_epoch(m);
    if (!options.out_dir.empty() && tcfg.checkpoint_every > 0 && epoch % tcfg.checkpoint_every == 0) {
      checkpoint::write_archive(options.out_dir / epoch_tag(epoch),
                                training_archive(model, optimizer, options, dataset.registry, epoch));
    }
  }
  if (!options.out_dir.empty()) {
    result.final_checkpoint = options.out_dir / "checkpoint_final.ckpt";
    checkpoint::write_archive(result.final_checkpoint,
                              training_archive(model, optimizer, options, dataset.registry, last_epoch));
  }
  return result;
}

}  // namespace dimae::train
