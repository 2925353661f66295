#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unistd.h>

#include "dimae/errors.hpp"
#include "dimae/eval.hpp"
#include "dimae/rng.hpp"

using namespace dimae;
using namespace dimae::eval;
namespace fs = std::filesystem;

namespace {

model::ModelConfig small_model(int num_domains = 3) {
  model::ModelConfig c;
  c.encoder.depth = 1;
  c.encoder.width = 32;
  c.encoder.heads = 2;
  c.encoder.patch_size = 4;
  c.encoder.image_size = 16;
  c.encoder.feature_dim = 32;
  c.decoder.depth = 1;
  c.decoder.width = 16;
  c.decoder.heads = 2;
  c.num_domains = num_domains;
  return c;
}

data::Dataset synthetic(std::vector<std::string> domains, int per_class, int classes = 3) {
  data::SyntheticSpec s;
  s.num_classes = classes;
  s.image_size = 16;
  s.samples_per_class_per_domain = per_class;
  s.domains = std::move(domains);
  return data::generate_synthetic(s);
}

// Gaussian blobs, one per class, `spread` controls overlap.
void blobs(Rng& rng, int n, int dim, int classes, double spread, Eigen::MatrixXd& x, std::vector<int>& y) {
  Eigen::MatrixXd centers(classes, dim);
  for (int c = 0; c < classes; ++c)
    for (int k = 0; k < dim; ++k) centers(c, k) = 3.0 * rng.normal();
  x.resize(n, dim);
  y.resize(n);
  for (int i = 0; i < n; ++i) {
    y[i] = i % classes;
    for (int k = 0; k < dim; ++k) x(i, k) = centers(y[i], k) + spread * rng.normal();
  }
}

// Reference multinomial logistic regression: standardize, whiten through an
// eigendecomposition of the covariance, then plain full-batch gradient descent
// from zero with explicit loops.
std::vector<int> reference_probe(const Eigen::MatrixXd& xtr, const std::vector<int>& ytr, const Eigen::MatrixXd& xte,
                                 int classes, int steps, double lr) {
  const int n = static_cast<int>(xtr.rows()), d = static_cast<int>(xtr.cols());
  std::vector<double> mu(d, 0.0), sd(d, 0.0);
  for (int k = 0; k < d; ++k) {
    for (int i = 0; i < n; ++i) mu[k] += xtr(i, k) / n;
    for (int i = 0; i < n; ++i) sd[k] += (xtr(i, k) - mu[k]) * (xtr(i, k) - mu[k]) / n;
    sd[k] = std::sqrt(sd[k]);
    if (sd[k] < 1e-12) sd[k] = 1.0;
  }
  auto standardized = [&](const Eigen::MatrixXd& x) {
    Eigen::MatrixXd z(x.rows(), d);
    for (int i = 0; i < x.rows(); ++i)
      for (int k = 0; k < d; ++k) z(i, k) = (x(i, k) - mu[k]) / sd[k];
    return z;
  };
  const Eigen::MatrixXd ztr = standardized(xtr);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(ztr.transpose() * ztr / n);
  const double top = eig.eigenvalues().maxCoeff();
  std::vector<Eigen::VectorXd> dirs;
  for (int k = 0; k < d; ++k) {
    const double ev = eig.eigenvalues()(k);
    if (ev > 1e-8 * top) dirs.push_back(eig.eigenvectors().col(k) / std::sqrt(ev));
  }
  const int r = static_cast<int>(dirs.size());
  auto whiten = [&](const Eigen::MatrixXd& z) {
    std::vector<std::vector<double>> u(z.rows(), std::vector<double>(r));
    for (int i = 0; i < z.rows(); ++i)
      for (int k = 0; k < r; ++k) u[i][k] = z.row(i).dot(dirs[k]);
    return u;
  };
  const auto utr = whiten(ztr);
  const auto ute = whiten(standardized(xte));
  std::vector<std::vector<double>> w(r, std::vector<double>(classes, 0.0));
  std::vector<double> b(classes, 0.0);
  auto probs = [&](const std::vector<double>& u) {
    std::vector<double> s(classes, 0.0);
    for (int c = 0; c < classes; ++c) {
      s[c] = b[c];
      for (int k = 0; k < r; ++k) s[c] += u[k] * w[k][c];
    }
    const double mx = *std::max_element(s.begin(), s.end());
    double tot = 0;
    for (auto& v : s) tot += (v = std::exp(v - mx));
    for (auto& v : s) v /= tot;
    return s;
  };
  for (int t = 0; t < steps; ++t) {
    std::vector<std::vector<double>> gw(r, std::vector<double>(classes, 0.0));
    std::vector<double> gb(classes, 0.0);
    for (int i = 0; i < n; ++i) {
      auto p = probs(utr[i]);
      p[ytr[i]] -= 1.0;
      for (int c = 0; c < classes; ++c) {
        gb[c] += p[c] / n;
        for (int k = 0; k < r; ++k) gw[k][c] += utr[i][k] * p[c] / n;
      }
    }
    for (int c = 0; c < classes; ++c) {
      b[c] -= lr * gb[c];
      for (int k = 0; k < r; ++k) w[k][c] -= lr * gw[k][c];
    }
  }
  std::vector<int> out;
  for (const auto& u : ute) {
    const auto p = probs(u);
    out.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  }
  return out;
}

std::uint64_t param_hash(const Model& m) {
  std::uint64_t h = 1469598103934665603ull;
  for (nn::ParamId id = 0; id < m.params().size(); ++id) {
    const auto& v = m.params().value(id);
    const auto* bytes = reinterpret_cast<const unsigned char*>(v.data());
    for (std::size_t i = 0; i < sizeof(float) * static_cast<std::size_t>(v.size()); ++i) h = (h ^ bytes[i]) * 1099511628211ull;
  }
  return h;
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("linearly separable features reach perfect accuracy") {
    Rng rng(1);
    Eigen::MatrixXd x, xt;
    std::vector<int> y, yt;
    blobs(rng, 120, 8, 4, 0.1, x, y);
    Rng rng2(1);
    blobs(rng2, 120, 8, 4, 0.1, xt, yt);  // same centers
    CHECK(linear_probe(x, y, xt, yt, 4).accuracy == 1.0);
  }

  TEST_CASE("shuffled labels give chance accuracy") {
    Rng rng(2);
    Eigen::MatrixXd x, xt;
    std::vector<int> y, yt;
    blobs(rng, 2000, 6, 5, 1.0, x, y);
    blobs(rng, 2000, 6, 5, 1.0, xt, yt);
    rng.shuffle(y.begin(), y.end());
    rng.shuffle(yt.begin(), yt.end());
    const double acc = linear_probe(x, y, xt, yt, 5).accuracy;
    CHECK(std::abs(acc - 0.2) < 0.05);
  }

  TEST_CASE("probe agrees with an independent gradient-descent solver") {
    Rng rng(3);
    Eigen::MatrixXd x, xt;
    std::vector<int> y, yt;
    blobs(rng, 300, 5, 3, 2.5, x, y);
    Rng rng2(3);
    blobs(rng2, 300, 5, 3, 2.5, xt, yt);
    for (int i = 0; i < xt.rows(); ++i) xt.row(i) += 0.5 * Eigen::RowVectorXd::Ones(5);
    // Redundant, nearly collinear copies like a wide projection of a narrow encoder.
    const Eigen::MatrixXd mix = Eigen::MatrixXd::Random(5, 12);
    x = (Eigen::MatrixXd(x.rows(), 17) << x, x * mix).finished();
    xt = (Eigen::MatrixXd(xt.rows(), 17) << xt, xt * mix).finished();
    ProbeConfig cfg;
    cfg.steps = 200;
    const auto r = linear_probe(x, y, xt, yt, 3, cfg);
    const double ref = accuracy(reference_probe(x, y, xt, 3, 200, cfg.lr), yt);
    MESSAGE("probe " << r.accuracy << " reference " << ref);
    CHECK(std::abs(r.accuracy - ref) <= 0.005);
  }

  TEST_CASE("a class without training examples is an error") {
    Eigen::MatrixXd x = Eigen::MatrixXd::Random(6, 3);
    CHECK_THROWS_AS(fit_linear_classifier(x, {0, 1, 0, 1, 0, 1}, 3, {}), ValidationError);
    CHECK_THROWS_AS(fit_linear_classifier(x, {0, 1, 0}, 2, {}), ValidationError);
  }

  TEST_CASE("average and overall accuracy definitions") {
    std::vector<DomainScore> s{{"a", 9, 10}, {"b", 10, 100}};
    CHECK(average_accuracy(s) == doctest::Approx((0.9 + 0.1) / 2));
    CHECK(overall_accuracy(s) == doctest::Approx(19.0 / 110.0));
  }

  TEST_CASE("label fraction selects the evaluation method") {
    CHECK(method_for_fraction(0.01) == Method::Probe);
    CHECK(method_for_fraction(0.0999) == Method::Probe);
    CHECK(method_for_fraction(0.10) == Method::Finetune);
    CHECK(method_for_fraction(1.0) == Method::Finetune);
    CHECK_THROWS_AS(method_for_fraction(0.0), ValidationError);
    CHECK_THROWS_AS(method_for_fraction(1.5), ValidationError);
    CHECK_THROWS_AS(method_for_fraction(-0.1), ValidationError);
  }

  TEST_CASE("labelled subsets are class-stratified") {
    const auto ds = synthetic({"solid", "sketch"}, 10, 3);  // 20 per class
    const auto sub = labelled_subset(ds, 0.1, 4);
    std::vector<int> per_class(3, 0);
    for (auto i : sub) ++per_class[ds.samples[i].label];
    CHECK(per_class == std::vector<int>{2, 2, 2});
    const auto tiny = labelled_subset(ds, 0.01, 4);
    CHECK(tiny.size() == 3);
    CHECK(labelled_subset(ds, 0.1, 4) == sub);
    CHECK(labelled_subset(ds, 1.0, 4).size() == ds.size());
  }

  TEST_CASE("probing never changes the encoder parameters") {
    const Model m(small_model(2), 4);
    const auto before = param_hash(m);
    const auto src = synthetic({"solid", "stripes"}, 4);
    const auto tgt = synthetic({"sketch"}, 4);
    ProtocolConfig cfg;
    cfg.probe.steps = 50;
    const auto r = cross_domain_protocol(m, src, tgt, 0.05, cfg, {"solid", "stripes"});
    CHECK(r.method == Method::Probe);
    CHECK(r.per_domain.size() == 1);
    CHECK(r.per_domain[0].total == 12);
    CHECK(param_hash(m) == before);
    cfg.finetune.epochs = 1;
    const auto f = cross_domain_protocol(m, src, tgt, 0.5, cfg);
    CHECK(f.method == Method::Finetune);
    CHECK(param_hash(m) == before);
  }

  TEST_CASE("targets seen in pretraining are rejected") {
    const Model m(small_model(2), 4);
    const auto src = synthetic({"solid", "stripes"}, 2);
    const auto tgt = synthetic({"stripes"}, 2);
    CHECK_THROWS_AS(cross_domain_protocol(m, src, tgt, 1.0, {}, {"solid", "stripes"}), ValidationError);
  }

  TEST_CASE("fine-tuning fits its training images and leaves the input model alone") {
    const Model m(small_model(1), 5);
    const auto before = param_hash(m);
    const auto ds = synthetic({"solid"}, 20, 3);
    std::vector<std::size_t> all(ds.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    FinetuneConfig cfg;
    cfg.epochs = 100;
    cfg.lr = 2e-3;
    const auto ft = finetune(m, ds, all, cfg, 1);
    std::vector<int> labels;
    for (const auto& s : ds.samples) labels.push_back(s.label);
    const double acc = accuracy(ft.predict(ds, all), labels);
    MESSAGE("fine-tune training accuracy " << acc);
    CHECK(acc > 0.9);
    CHECK(param_hash(m) == before);
  }

  TEST_CASE("a 2x2x1 ablation grid yields four rows of three seeds") {
    AblationSpec spec;
    spec.modes = {fourier::MixMode::StyleMix, fourier::MixMode::None};
    spec.single_decoder = {false, true};
    spec.decoder_depths = {1};
    spec.model = small_model(2);
    spec.train.epochs = 1;
    spec.train.batch_per_domain = 4;
    spec.objective.patch_size = 4;
    spec.probe.steps = 20;
    const auto src = synthetic({"solid", "stripes"}, 2);
    const auto tgt = synthetic({"sketch"}, 2);
    const auto rows = ablation_runner(spec, src, tgt);
    REQUIRE(rows.size() == 4);
    for (const auto& r : rows) {
      CHECK(r.seeds.size() == 3);
      CHECK(r.accuracies.size() == 3);
      double mean = 0;
      for (double a : r.accuracies) mean += a / 3;
      CHECK(r.mean == doctest::Approx(mean));
      CHECK(r.cell.decoder_depth == 1);
    }
    const auto path = fs::temp_directory_path() / ("dimae_ablation_" + std::to_string(::getpid()) + ".csv");
    write_ablation_csv(path, rows);
    std::ifstream f(path);
    int lines = 0;
    for (std::string line; std::getline(f, line);) ++lines;
    CHECK(lines == 5);
    fs::remove(path);
  }

  TEST_CASE("feature export writes one row per sample and round-trips") {
    const Model m(small_model(2), 6);
    const auto ds = synthetic({"solid", "stripes"}, 2);
    const auto path = fs::temp_directory_path() / ("dimae_features_" + std::to_string(::getpid()) + ".csv");
    CHECK(export_features(m, ds, path) == ds.size());
    const auto table = extract_features(m, ds);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    CHECK(line.rfind("domain_id,class_id,domain,class,f0,", 0) == 0);
    std::size_t row = 0;
    while (std::getline(f, line)) {
      std::stringstream ss(line);
      std::string cell;
      std::vector<std::string> cells;
      while (std::getline(ss, cell, ',')) cells.push_back(cell);
      REQUIRE(cells.size() == 4 + static_cast<std::size_t>(table.features.cols()));
      CHECK(std::stoi(cells[0]) == table.domains[row]);
      CHECK(std::stoi(cells[1]) == table.labels[row]);
      CHECK(cells[2] == ds.registry.name(table.domains[row]));
      for (Eigen::Index k = 0; k < table.features.cols(); ++k) {
        const double v = std::stod(cells[4 + k]);
        CHECK(static_cast<float>(v) == static_cast<float>(table.features(row, k)));
      }
      ++row;
    }
    CHECK(row == ds.size());
    fs::remove(path);
  }

  TEST_CASE("reconstruction keeps visible patches and decodes per decoder") {
    const Model m(small_model(2), 7);
    const auto ds = synthetic({"solid", "stripes"}, 1);
    const auto r = reconstruct(m, ds.samples[0].image, {0, 1}, 0.25, 3);
    CHECK(r.outputs.size() == 2);
    CHECK(!std::equal(r.outputs[0].data().begin(), r.outputs[0].data().end(), r.outputs[1].data().begin()));
    const auto grid = tile_row({r.input, r.masked, r.outputs[0]});
    CHECK(grid.width() == 3 * 16 + 2 * 2);
    CHECK(grid.height() == 16);
    CHECK_THROWS_AS(reconstruct(m, ds.samples[0].image, {2}, 0.25, 3), ValidationError);
  }
}
