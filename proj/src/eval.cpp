#include "dimae/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "dimae/errors.hpp"
#include "dimae/parallel.hpp"
#include "dimae/patching.hpp"
#include "dimae/rng.hpp"

namespace dimae::eval {

namespace fs = std::filesystem;
using nn::Index;
using nn::Matrix;
using nn::ParamId;

namespace {

constexpr int kFeatureChunk = 32;
// Principal directions below this fraction of the top singular value are dropped.
constexpr double kWhitenRelTol = 1e-4;

Matrix<float> image_patches(const Model& model, const data::Dataset& dataset,
                            std::span<const std::size_t> indices) {
  const auto& e = model.config().encoder;
  const Index n = e.num_patches();
  Matrix<float> out(static_cast<Index>(indices.size()) * n, e.patch_dim());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& img = dataset.samples.at(indices[k]).image;
    require(img.channels() == e.channels && img.height() == e.image_size && img.width() == e.image_size,
            "image " + dataset.samples[indices[k]].path + " does not match the encoder input shape");
    out.middleRows(static_cast<Index>(k) * n, n) = model::to_matrix<float>(patching::patchify(img, e.patch_size));
  }
  return out;
}

std::vector<std::size_t> all_indices(const data::Dataset& ds) {
  std::vector<std::size_t> idx(ds.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return idx;
}

Eigen::MatrixXd softmax_rows(Eigen::MatrixXd logits) {
  for (Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    logits.row(i) = (logits.row(i).array() - m).exp();
    logits.row(i) /= logits.row(i).sum();
  }
  return logits;
}

int argmax(const auto& row) {
  int best = 0;
  for (Index c = 1; c < row.size(); ++c) {
    if (row(c) > row(best)) best = static_cast<int>(c);
  }
  return best;
}

constexpr double kBatchNormEps = 1e-12;

/// Per-column standardization with batch statistics (no affine), as in batch norm.
struct BatchStandardizer {
  Eigen::RowVectorXf inv_std;
  Matrix<float> z;

  const Matrix<float>& forward(const Matrix<float>& x) {
    const Eigen::RowVectorXf mean = x.colwise().mean();
    const Matrix<float> centered = x.rowwise() - mean;
    const Eigen::RowVectorXf var = centered.colwise().squaredNorm() / static_cast<float>(x.rows());
    inv_std = (var.array() + static_cast<float>(kBatchNormEps)).rsqrt().matrix();
    z = (centered.array().rowwise() * inv_std.array()).matrix();
    return z;
  }

  Matrix<float> backward(const Matrix<float>& dz) const {
    const Eigen::RowVectorXf mean_dz = dz.colwise().mean();
    const Eigen::RowVectorXf mean_dz_z = dz.cwiseProduct(z).colwise().mean();
    Matrix<float> dx = dz.rowwise() - mean_dz;
    dx -= (z.array().rowwise() * mean_dz_z.array()).matrix();
    return (dx.array().rowwise() * inv_std.array()).matrix();
  }
};

std::vector<int> gather_labels(const data::Dataset& ds, const std::vector<std::size_t>& idx) {
  std::vector<int> y;
  y.reserve(idx.size());
  for (auto i : idx) y.push_back(ds.samples[i].label);
  return y;
}

}  // namespace

FeatureTable extract_features(const Model& model, const data::Dataset& dataset) {
  return extract_features(model, dataset, all_indices(dataset));
}

FeatureTable extract_features(const Model& model, const data::Dataset& dataset,
                              const std::vector<std::size_t>& indices) {
  FeatureTable table;
  const int dim = model.config().encoder.feature_dim;
  table.features.resize(static_cast<Index>(indices.size()), dim);
  for (std::size_t start = 0; start < indices.size(); start += kFeatureChunk) {
    const std::size_t count = std::min<std::size_t>(kFeatureChunk, indices.size() - start);
    std::span<const std::size_t> chunk(indices.data() + start, count);
    auto trace = model.features_forward(image_patches(model, dataset, chunk), static_cast<int>(count));
    table.features.middleRows(static_cast<Index>(start), static_cast<Index>(count)) =
        trace.features.cast<double>();
  }
  for (auto i : indices) {
    table.labels.push_back(dataset.samples[i].label);
    table.domains.push_back(dataset.samples[i].domain);
  }
  return table;
}

void to_json(nlohmann::json& j, const ProbeConfig& c) {
  j = nlohmann::json{{"steps", c.steps}, {"lr", c.lr}, {"standardize", c.standardize}, {"whiten", c.whiten}};
}

void from_json(const nlohmann::json& j, ProbeConfig& c) {
  ProbeConfig d;
  c.steps = j.value("steps", d.steps);
  c.lr = j.value("lr", d.lr);
  c.standardize = j.value("standardize", d.standardize);
  c.whiten = j.value("whiten", d.whiten);
  require(c.steps >= 1 && c.lr > 0.0, "probe needs steps >= 1 and lr > 0");
}

Eigen::MatrixXd LinearClassifier::logits(const Eigen::MatrixXd& x) const {
  require(x.cols() == weight.rows(), "classifier: feature dimension mismatch");
  Eigen::MatrixXd z = (x.rowwise() - mean).array().rowwise() / scale.array();
  Eigen::MatrixXd out = z * weight;
  out.rowwise() += bias;
  return out;
}

std::vector<int> LinearClassifier::predict(const Eigen::MatrixXd& x) const {
  const Eigen::MatrixXd z = logits(x);
  std::vector<int> out(static_cast<std::size_t>(z.rows()));
  for (Index i = 0; i < z.rows(); ++i) out[i] = argmax(z.row(i));
  return out;
}

LinearClassifier fit_linear_classifier(const Eigen::MatrixXd& x, const std::vector<int>& labels, int num_classes,
                                       const ProbeConfig& cfg) {
  require(num_classes >= 2, "linear probe needs at least 2 classes");
  require(x.rows() == static_cast<Index>(labels.size()) && x.rows() > 0, "linear probe: features and labels differ");
  require(x.allFinite(), "linear probe: non-finite features");
  std::vector<int> count(num_classes, 0);
  for (int y : labels) {
    require(y >= 0 && y < num_classes, "linear probe: label out of range");
    ++count[y];
  }
  for (int c = 0; c < num_classes; ++c) {
    require(count[c] > 0, "linear probe: class " + std::to_string(c) + " is absent from the training split");
  }

  const Index n = x.rows();
  const Index f = x.cols();
  LinearClassifier clf;
  clf.mean = Eigen::RowVectorXd::Zero(f);
  clf.scale = Eigen::RowVectorXd::Ones(f);
  if (cfg.standardize) {
    clf.mean = x.colwise().mean();
    const Eigen::MatrixXd centered = x.rowwise() - clf.mean;
    clf.scale = (centered.colwise().squaredNorm() / static_cast<double>(n)).cwiseSqrt();
    for (Index k = 0; k < f; ++k) {
      if (!(clf.scale(k) > 1e-12)) clf.scale(k) = 1.0;
    }
  }
  const Eigen::MatrixXd z = (x.rowwise() - clf.mean).array().rowwise() / clf.scale.array();
  Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, num_classes);
  for (Index i = 0; i < n; ++i) onehot(i, labels[i]) = 1.0;

  // Encoder features are strongly collinear, which stalls plain gradient descent.
  // Descend in whitened principal coordinates instead and map back at the end.
  Eigen::MatrixXd basis = Eigen::MatrixXd::Identity(f, f);
  if (cfg.whiten) {
    Eigen::BDCSVD<Eigen::MatrixXd> svd(z, Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    Index keep = 0;
    while (keep < sv.size() && sv(keep) > kWhitenRelTol * sv(0)) ++keep;
    basis = svd.matrixV().leftCols(keep) *
            (std::sqrt(static_cast<double>(n)) * sv.head(keep).cwiseInverse()).asDiagonal();
  }
  const Eigen::MatrixXd u = z * basis;

  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(u.cols(), num_classes);
  clf.bias = Eigen::RowVectorXd::Zero(num_classes);
  for (int step = 0; step < cfg.steps; ++step) {
    Eigen::MatrixXd logits = u * w;
    logits.rowwise() += clf.bias;
    const Eigen::MatrixXd g = (softmax_rows(std::move(logits)) - onehot) / static_cast<double>(n);
    w.noalias() -= cfg.lr * (u.transpose() * g);
    clf.bias -= cfg.lr * g.colwise().sum();
  }
  clf.weight = basis * w;
  return clf;
}

double accuracy(const std::vector<int>& predicted, const std::vector<int>& labels) {
  require(predicted.size() == labels.size() && !labels.empty(), "accuracy: size mismatch or empty");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predicted[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

ProbeResult linear_probe(const Eigen::MatrixXd& train_x, const std::vector<int>& train_y,
                         const Eigen::MatrixXd& test_x, const std::vector<int>& test_y, int num_classes,
                         const ProbeConfig& cfg) {
  ProbeResult r;
  r.classifier = fit_linear_classifier(train_x, train_y, num_classes, cfg);
  r.predictions = r.classifier.predict(test_x);
  r.accuracy = accuracy(r.predictions, test_y);
  return r;
}

void to_json(nlohmann::json& j, const FinetuneConfig& c) {
  j = nlohmann::json{
      {"epochs", c.epochs}, {"batch_size", c.batch_size}, {"lr", c.lr}, {"weight_decay", c.weight_decay}};
}

void from_json(const nlohmann::json& j, FinetuneConfig& c) {
  FinetuneConfig d;
  c.epochs = j.value("epochs", d.epochs);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  require(c.epochs >= 1 && c.batch_size >= 1 && c.lr > 0.0 && c.weight_decay >= 0.0,
          "finetune needs epochs >= 1, batch_size >= 1, lr > 0, weight_decay >= 0");
}

std::vector<int> FinetunedClassifier::predict(const data::Dataset& dataset,
                                              const std::vector<std::size_t>& indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t start = 0; start < indices.size(); start += kFeatureChunk) {
    const std::size_t count = std::min<std::size_t>(kFeatureChunk, indices.size() - start);
    std::span<const std::size_t> chunk(indices.data() + start, count);
    auto trace = model.features_forward(image_patches(model, dataset, chunk), static_cast<int>(count));
    const Matrix<float> logits = head.forward(head_params, standardize(trace.features));
    for (Index i = 0; i < logits.rows(); ++i) out.push_back(argmax(logits.row(i)));
  }
  return out;
}

Matrix<float> FinetunedClassifier::standardize(const Matrix<float>& features) const {
  return ((features.rowwise() - feature_mean).array().rowwise() / feature_scale.array()).matrix();
}

FinetunedClassifier finetune(const Model& model, const data::Dataset& dataset,
                             const std::vector<std::size_t>& indices, const FinetuneConfig& cfg,
                             std::uint64_t seed) {
  require(!indices.empty(), "finetune: no labelled samples");
  const int classes = dataset.num_classes();
  require(classes >= 2, "finetune needs at least 2 classes");
  FinetunedClassifier out{model, {}, {}, {}, {}};
  Rng init_rng(derive_seed(seed, "init", {1}));
  out.head = nn::Linear<float>::create(out.head_params, "classifier", model.config().encoder.feature_dim, classes,
                                       init_rng);

  auto body_ids = out.model.encoder_parameters();
  for (auto id : out.model.feature_head_parameters()) body_ids.push_back(id);
  std::vector<ParamId> head_ids{out.head.weight, out.head.bias};
  train::AdamW<float> body_opt(out.model.params(), body_ids, 0.9, 0.999, 1e-8, cfg.weight_decay);
  train::AdamW<float> head_opt(out.head_params, head_ids, 0.9, 0.999, 1e-8, cfg.weight_decay);

  train::TrainConfig sched;
  sched.base_lr = cfg.lr;
  sched.epochs = cfg.epochs;
  sched.warmup_epochs = 0.0;
  const std::size_t batches_per_epoch = (indices.size() + cfg.batch_size - 1) / cfg.batch_size;
  const auto total = static_cast<std::int64_t>(batches_per_epoch * cfg.epochs);
  std::int64_t step = 0;

  std::vector<std::size_t> order = indices;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(derive_seed(seed, "data", {static_cast<std::uint64_t>(epoch)}));
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size, ++step) {
      const std::size_t count = std::min<std::size_t>(cfg.batch_size, order.size() - start);
      std::span<const std::size_t> chunk(order.data() + start, count);
      auto trace = out.model.features_forward(image_patches(out.model, dataset, chunk), static_cast<int>(count));
      BatchStandardizer norm;
      const Matrix<float> z = norm.forward(trace.features);
      Matrix<float> logits = out.head.forward(out.head_params, z);
      Matrix<float> d_logits(logits.rows(), logits.cols());
      for (Index i = 0; i < logits.rows(); ++i) {
        const float m = logits.row(i).maxCoeff();
        auto p = (logits.row(i).array() - m).exp().eval();
        p /= p.sum();
        d_logits.row(i) = p.matrix() / static_cast<float>(count);
        d_logits(i, dataset.samples[chunk[i]].label) -= 1.0f / static_cast<float>(count);
      }
      nn::Gradients<float> head_grads(out.head_params);
      nn::Gradients<float> body_grads(out.model.params());
      const Matrix<float> d_z = out.head.backward(out.head_params, z, d_logits, head_grads);
      out.model.features_backward(trace, norm.backward(d_z), body_grads);
      const double lr = train::lr_at(step, total, sched);
      head_opt.step(out.head_params, head_grads, lr);
      body_opt.step(out.model.params(), body_grads, lr);
    }
  }
  // Inference uses the training set's statistics under the final encoder.
  const auto table = extract_features(out.model, dataset, indices);
  const Eigen::RowVectorXd mean = table.features.colwise().mean();
  const Eigen::RowVectorXd var =
      (table.features.rowwise() - mean).colwise().squaredNorm() / static_cast<double>(indices.size());
  out.feature_mean = mean.cast<float>();
  out.feature_scale = (var.array() + kBatchNormEps).sqrt().matrix().cast<float>();
  return out;
}

Method method_for_fraction(double label_fraction) {
  require(label_fraction > 0.0 && label_fraction <= 1.0, "label fraction must be in (0, 1]");
  return label_fraction < kFinetuneThreshold ? Method::Probe : Method::Finetune;
}

std::string to_string(Method m) {
  switch (m) {
    case Method::Auto: return "auto";
    case Method::Probe: return "probe";
    case Method::Finetune: return "finetune";
  }
  return "unknown";
}

void to_json(nlohmann::json& j, const ProtocolConfig& c) {
  j = nlohmann::json{{"probe", c.probe}, {"finetune", c.finetune}, {"method", to_string(c.method)}, {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, ProtocolConfig& c) {
  c.probe = j.value("probe", ProbeConfig{});
  c.finetune = j.value("finetune", FinetuneConfig{});
  const auto m = j.value("method", std::string("auto"));
  if (m == "auto") {
    c.method = Method::Auto;
  } else if (m == "probe") {
    c.method = Method::Probe;
  } else if (m == "finetune") {
    c.method = Method::Finetune;
  } else {
    throw ValidationError("eval method must be auto, probe or finetune");
  }
  c.seed = j.value("seed", std::uint64_t{0});
}

double average_accuracy(const std::vector<DomainScore>& scores) {
  require(!scores.empty(), "no domain scores");
  double sum = 0.0;
  for (const auto& s : scores) sum += s.accuracy();
  return sum / static_cast<double>(scores.size());
}

double overall_accuracy(const std::vector<DomainScore>& scores) {
  std::size_t hit = 0, total = 0;
  for (const auto& s : scores) {
    hit += s.correct;
    total += s.total;
  }
  require(total > 0, "no test samples");
  return static_cast<double>(hit) / static_cast<double>(total);
}

void to_json(nlohmann::json& j, const ProtocolResult& r) {
  auto per = nlohmann::json::array();
  for (const auto& s : r.per_domain) {
    per.push_back({{"domain", s.domain}, {"correct", s.correct}, {"total", s.total}, {"accuracy", s.accuracy()}});
  }
  j = nlohmann::json{{"label_fraction", r.label_fraction},
                     {"method", to_string(r.method)},
                     {"labelled", r.labelled},
                     {"per_domain", per},
                     {"avg", r.avg},
                     {"overall", r.overall}};
}

std::vector<std::size_t> labelled_subset(const data::Dataset& dataset, double fraction, std::uint64_t seed) {
  require(fraction > 0.0 && fraction <= 1.0, "label fraction must be in (0, 1]");
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < dataset.size(); ++i) by_class[dataset.samples[i].label].push_back(i);
  std::vector<std::size_t> out;
  for (auto& [label, idx] : by_class) {
    Rng rng(derive_seed(seed, "labels", {static_cast<std::uint64_t>(label)}));
    rng.shuffle(idx);
    const auto keep = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(fraction * static_cast<double>(idx.size()))), 1, idx.size());
    out.insert(out.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep));
  }
  std::sort(out.begin(), out.end());
  return out;
}

namespace {

std::vector<DomainScore> score_by_domain(const data::Dataset& ds, const std::vector<std::size_t>& idx,
                                         const std::vector<int>& predicted) {
  std::vector<DomainScore> scores(static_cast<std::size_t>(ds.registry.size()));
  for (int d = 0; d < ds.registry.size(); ++d) scores[d].domain = ds.registry.name(d);
  for (std::size_t k = 0; k < idx.size(); ++k) {
    const auto& s = ds.samples[idx[k]];
    auto& sc = scores[static_cast<std::size_t>(s.domain)];
    ++sc.total;
    sc.correct += predicted[k] == s.label;
  }
  std::erase_if(scores, [](const DomainScore& s) { return s.total == 0; });
  return scores;
}

}  // namespace

ProtocolResult cross_domain_protocol(const Model& model, const data::Dataset& source, const data::Dataset& target,
                                     double label_fraction, const ProtocolConfig& cfg,
                                     const std::vector<std::string>& pretrain_domains) {
  const Method dispatched = method_for_fraction(label_fraction);
  require(source.class_names == target.class_names, "source and target datasets must share class names");
  require(!target.samples.empty(), "target dataset is empty");
  for (const auto& name : target.registry.names()) {
    require(std::find(pretrain_domains.begin(), pretrain_domains.end(), name) == pretrain_domains.end(),
            "target domain " + name + " was seen during pretraining");
  }

  ProtocolResult result;
  result.label_fraction = label_fraction;
  result.method = cfg.method == Method::Auto ? dispatched : cfg.method;
  const auto labelled = labelled_subset(source, label_fraction, cfg.seed);
  result.labelled = labelled.size();
  const auto test_idx = all_indices(target);

  std::vector<int> predicted;
  if (result.method == Method::Probe) {
    const auto train = extract_features(model, source, labelled);
    const auto test = extract_features(model, target, test_idx);
    predicted = fit_linear_classifier(train.features, train.labels, source.num_classes(), cfg.probe)
                    .predict(test.features);
  } else {
    std::set<int> present;
    for (auto i : labelled) present.insert(source.samples[i].label);
    require(static_cast<int>(present.size()) == source.num_classes(),
            "finetune: some class is absent from the labelled split");
    const auto tuned = finetune(model, source, labelled, cfg.finetune, cfg.seed);
    predicted = tuned.predict(target, test_idx);
  }
  result.per_domain = score_by_domain(target, test_idx, predicted);
  result.avg = average_accuracy(result.per_domain);
  result.overall = overall_accuracy(result.per_domain);
  return result;
}

ProtocolResult in_domain_probe(const Model& model, const data::Dataset& dataset, double test_fraction,
                               const ProtocolConfig& cfg) {
  require(test_fraction > 0.0 && test_fraction < 1.0, "test fraction must be in (0, 1)");
  ProtocolResult result;
  result.label_fraction = 1.0 - test_fraction;
  result.method = Method::Probe;
  const auto table = extract_features(model, dataset);
  for (int d = 0; d < dataset.registry.size(); ++d) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (auto i : dataset.indices_of(d)) by_class[dataset.samples[i].label].push_back(i);
    std::vector<std::size_t> train_idx, test_idx;
    for (auto& [label, idx] : by_class) {
      Rng rng(derive_seed(cfg.seed, "split", {static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(label)}));
      rng.shuffle(idx);
      const auto n_test = std::clamp<std::size_t>(
          static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(idx.size()))), 1,
          idx.size() - 1);
      require(idx.size() >= 2, "in-domain probe: every class needs at least 2 samples per domain");
      test_idx.insert(test_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
      train_idx.insert(train_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
    }
    if (test_idx.empty()) continue;
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(test_idx.begin(), test_idx.end());
    Eigen::MatrixXd train_x(static_cast<Index>(train_idx.size()), table.features.cols());
    Eigen::MatrixXd test_x(static_cast<Index>(test_idx.size()), table.features.cols());
    for (std::size_t k = 0; k < train_idx.size(); ++k) train_x.row(k) = table.features.row(train_idx[k]);
    for (std::size_t k = 0; k < test_idx.size(); ++k) test_x.row(k) = table.features.row(test_idx[k]);
    const auto pred = fit_linear_classifier(train_x, gather_labels(dataset, train_idx), dataset.num_classes(),
                                            cfg.probe)
                          .predict(test_x);
    DomainScore score{dataset.registry.name(d), 0, test_idx.size()};
    for (std::size_t k = 0; k < test_idx.size(); ++k) score.correct += pred[k] == dataset.samples[test_idx[k]].label;
    result.per_domain.push_back(score);
    result.labelled += train_idx.size();
  }
  result.avg = average_accuracy(result.per_domain);
  result.overall = overall_accuracy(result.per_domain);
  return result;
}

std::vector<AblationCell> AblationSpec::cells() const {
  std::vector<AblationCell> out;
  for (auto mode : modes) {
    for (bool single : single_decoder) {
      for (int depth : decoder_depths) out.push_back({mode, single, depth});
    }
  }
  return out;
}

void to_json(nlohmann::json& j, const AblationSpec& s) {
  std::vector<std::string> modes;
  for (auto m : s.modes) modes.push_back(fourier::to_string(m));
  std::vector<std::string> decoders;
  for (bool single : s.single_decoder) decoders.push_back(single ? "single" : "multi");
  j = nlohmann::json{{"modes", modes},         {"decoders", decoders},   {"decoder_depths", s.decoder_depths},
                     {"seeds", s.seeds},       {"model", s.model},       {"train", s.train},
                     {"objective", s.objective}, {"probe", s.probe},     {"label_fraction", s.label_fraction}};
}

void from_json(const nlohmann::json& j, AblationSpec& s) {
  AblationSpec d;
  if (j.contains("modes")) {
    s.modes.clear();
    for (const auto& m : j.at("modes")) s.modes.push_back(fourier::mix_mode_from_string(m.get<std::string>()));
  } else {
    s.modes = d.modes;
  }
  if (j.contains("decoders")) {
    s.single_decoder.clear();
    for (const auto& m : j.at("decoders")) {
      const auto name = m.get<std::string>();
      require(name == "single" || name == "multi", "ablation decoders must be single or multi");
      s.single_decoder.push_back(name == "single");
    }
  } else {
    s.single_decoder = d.single_decoder;
  }
  s.decoder_depths = j.value("decoder_depths", d.decoder_depths);
  s.seeds = j.value("seeds", d.seeds);
  s.model = j.value("model", d.model);
  s.train = j.value("train", d.train);
  s.objective = j.value("objective", d.objective);
  s.probe = j.value("probe", d.probe);
  s.label_fraction = j.value("label_fraction", d.label_fraction);
  require(!s.modes.empty() && !s.single_decoder.empty() && !s.decoder_depths.empty() && !s.seeds.empty(),
          "ablation grid axes must be non-empty");
}

std::vector<AblationRow> ablation_runner(const AblationSpec& spec, const data::Dataset& pretrain,
                                         const data::Dataset& target,
                                         const std::function<void(const std::string&)>& log) {
  std::vector<AblationRow> rows;
  for (const auto& cell : spec.cells()) {
    AblationRow row;
    row.cell = cell;
    for (auto seed : spec.seeds) {
      model::ModelConfig mcfg = spec.model;
      mcfg.num_domains = pretrain.registry.size();
      mcfg.single_decoder = cell.single_decoder;
      mcfg.decoder.depth = cell.decoder_depth;
      mcfg.validate();
      Model m(mcfg, derive_seed(seed, "init"));
      train::PretrainOptions opts;
      opts.train = spec.train;
      opts.train.seed = seed;
      opts.objective = spec.objective;
      opts.objective.stylemix.mode = cell.mode;
      train::pretrain(pretrain, m, opts);

      ProtocolConfig pc;
      pc.probe = spec.probe;
      pc.method = Method::Probe;
      pc.seed = seed;
      const auto r = cross_domain_protocol(m, pretrain, target, spec.label_fraction, pc, pretrain.registry.names());
      row.seeds.push_back(seed);
      row.accuracies.push_back(r.overall);
      if (log) {
        std::ostringstream os;
        os << fourier::to_string(cell.mode) << (cell.single_decoder ? " single" : " multi") << " depth "
           << cell.decoder_depth << " seed " << seed << ": " << r.overall;
        log(os.str());
      }
    }
    const double n = static_cast<double>(row.accuracies.size());
    row.mean = std::accumulate(row.accuracies.begin(), row.accuracies.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : row.accuracies) ss += (a - row.mean) * (a - row.mean);
    row.stddev = row.accuracies.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const fs::path& path, const std::vector<AblationRow>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  std::size_t max_seeds = 0;
  for (const auto& r : rows) max_seeds = std::max(max_seeds, r.accuracies.size());
  out << "mode,decoder,decoder_depth";
  for (std::size_t k = 0; k < max_seeds; ++k) out << ",seed_" << k << ",acc_" << k;
  out << ",mean,std\n";
  char buf[64];
  for (const auto& r : rows) {
    out << fourier::to_string(r.cell.mode) << ',' << (r.cell.single_decoder ? "single" : "multi") << ','
        << r.cell.decoder_depth;
    for (std::size_t k = 0; k < max_seeds; ++k) {
      if (k < r.accuracies.size()) {
        std::snprintf(buf, sizeof buf, "%.6f", r.accuracies[k]);
        out << ',' << r.seeds[k] << ',' << buf;
      } else {
        out << ",,";
      }
    }
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f\n", r.mean, r.stddev);
    out << buf;
  }
}

std::size_t export_features(const Model& model, const data::Dataset& dataset, const fs::path& path) {
  const auto table = extract_features(model, dataset);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "domain_id,class_id,domain,class";
  for (Index k = 0; k < table.features.cols(); ++k) out << ",f" << k;
  out << '\n';
  char buf[32];
  for (Index i = 0; i < table.features.rows(); ++i) {
    const auto& s = dataset.samples[static_cast<std::size_t>(i)];
    out << s.domain << ',' << s.label << ',' << dataset.registry.name(s.domain) << ','
        << dataset.class_names.at(static_cast<std::size_t>(s.label));
    for (Index k = 0; k < table.features.cols(); ++k) {
      std::snprintf(buf, sizeof buf, ",%.9g", table.features(i, k));
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
  return static_cast<std::size_t>(table.features.rows());
}

Reconstruction reconstruct(const Model& model, const ImageTensor& img, const std::vector<int>& decoders,
                           double p_visible, std::uint64_t seed) {
  const auto& e = model.config().encoder;
  require(!decoders.empty(), "reconstruct: no decoder selected");
  const auto all = patching::patchify(img, e.patch_size);
  const auto plan = patching::sample_mask(all.rows(), p_visible, derive_seed(seed, "mask"));
  const auto visible = patching::select(all, plan.visible_idx);
  Reconstruction r;
  r.input = img;
  r.masked = patching::unpatchify(visible, plan);
  const auto z = model.encode(visible, plan);
  for (int d : decoders) {
    require(d >= 0 && d < model.config().num_decoders(), "reconstruct: decoder " + std::to_string(d) +
                                                              " does not exist (model has " +
                                                              std::to_string(model.config().num_decoders()) + ")");
    auto out = patching::unpatchify(model.decode(z, d));
    out.clamp(0.0, 1.0);
    r.decoders.push_back(d);
    r.outputs.push_back(std::move(out));
  }
  return r;
}

ImageTensor tile_row(const std::vector<ImageTensor>& images, int gap, double fill) {
  require(!images.empty(), "tile_row: nothing to tile");
  const int c = images[0].channels(), h = images[0].height();
  int w = 0;
  for (const auto& im : images) {
    require(im.channels() == c && im.height() == h, "tile_row: images must share channels and height");
    w += im.width();
  }
  w += gap * static_cast<int>(images.size() - 1);
  ImageTensor out(c, h, w, fill);
  int x0 = 0;
  for (const auto& im : images) {
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < im.width(); ++x) out.at(ch, y, x0 + x) = im.at(ch, y, x);
      }
    }
    x0 += im.width() + gap;
  }
  return out;
}

ImageTensor tile_column(const std::vector<ImageTensor>& rows, int gap, double fill) {
  require(!rows.empty(), "tile_column: nothing to tile");
  const int c = rows[0].channels();
  int w = 0, h = 0;
  for (const auto& r : rows) {
    require(r.channels() == c, "tile_column: rows must share channels");
    w = std::max(w, r.width());
    h += r.height();
  }
  h += gap * static_cast<int>(rows.size() - 1);
  ImageTensor out(c, h, w, fill);
  int y0 = 0;
  for (const auto& r : rows) {
    for (int ch = 0; ch < c; ++ch) {
      for (int y = 0; y < r.height(); ++y) {
        for (int x = 0; x < r.width(); ++x) out.at(ch, y0 + y, x) = r.at(ch, y, x);
      }
    }
    y0 += r.height() + gap;
  }
  return out;
}

}  // namespace dimae::eval
