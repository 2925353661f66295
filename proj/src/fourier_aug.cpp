#include "dimae/fourier_aug.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <mutex>
#include <tuple>

#include "dimae/errors.hpp"

namespace dimae::fourier {
namespace {

// fftw_plan_* is not reentrant; execution through the new-array interface is.
class PlanCache {
 public:
  static PlanCache& instance() {
    static PlanCache cache;
    return cache;
  }

  fftw_plan get(int height, int width, int sign) {
    std::lock_guard lock(mutex_);
    auto key = std::make_tuple(height, width, sign);
    if (auto it = plans_.find(key); it != plans_.end()) return it->second;
    auto n = static_cast<std::size_t>(height) * width;
    auto* in = fftw_alloc_complex(n);
    auto* out = fftw_alloc_complex(n);
    fftw_plan plan = fftw_plan_dft_2d(height, width, in, out, sign, FFTW_ESTIMATE | FFTW_UNALIGNED);
    fftw_free(in);
    fftw_free(out);
    plans_.emplace(key, plan);
    return plan;
  }

  ~PlanCache() {
    for (auto& [key, plan] : plans_) fftw_destroy_plan(plan);
  }

 private:
  std::mutex mutex_;
  std::map<std::tuple<int, int, int>, fftw_plan> plans_;
};

using Complex = std::complex<double>;

void transform(std::vector<Complex>& buffer, int height, int width, int sign) {
  std::vector<Complex> out(buffer.size());
  fftw_plan plan = PlanCache::instance().get(height, width, sign);
  fftw_execute_dft(plan, reinterpret_cast<fftw_complex*>(buffer.data()),
                   reinterpret_cast<fftw_complex*>(out.data()));
  buffer.swap(out);
}

bool in_band(int ky, int kx, int height, int width, double band_fraction) {
  if (band_fraction >= 1.0) return true;
  int fy = ky <= height / 2 ? ky : ky - height;
  int fx = kx <= width / 2 ? kx : kx - width;
  return std::abs(fy) <= band_fraction * height / 2.0 && std::abs(fx) <= band_fraction * width / 2.0;
}

void require_same_shape(const ImageTensor& a, const ImageTensor& b, const char* what) {
  require(a.same_shape(b), std::string(what) + ": image shapes differ");
}

double sample_lambda(const StyleMixConfig& cfg, Rng& rng) {
  return rng.uniform(cfg.lambda_min, cfg.lambda_max);
}

void validate_aux(const ImageTensor& x, std::span<const ImageTensor> aux) {
  require(!aux.empty(), "style mixing needs at least 2 domains (N_d >= 2): no auxiliary image given");
  for (std::size_t i = 0; i < aux.size(); ++i) {
    require_same_shape(x, aux[i], "cp_style_mix");
    if (x.domain != kNoDomain && aux[i].domain != kNoDomain) {
      require(aux[i].domain != x.domain, "auxiliary image must come from a domain other than the source");
    }
    for (std::size_t k = 0; k < i; ++k) {
      if (aux[i].domain != kNoDomain) {
        require(aux[k].domain != aux[i].domain, "one auxiliary image per other domain expected");
      }
    }
  }
}

ImageTensor stylecut_compose(const std::vector<ImageTensor>& views, const StyleMixConfig& cfg, Rng& rng,
                             MixRecord* record) {
  ImageTensor out = views.front();
  const int h = out.height();
  const int w = out.width();
  std::vector<int> owner(static_cast<std::size_t>(h) * w, 0);
  for (std::size_t k = 1; k < views.size(); ++k) {
    Box box = sample_box(h, w, rng.beta(cfg.cut_beta, cfg.cut_beta), rng);
    if (record) record->boxes.push_back(box);
    for (int c = 0; c < out.channels(); ++c) {
      for (int y = box.y0; y < box.y1; ++y) {
        for (int x = box.x0; x < box.x1; ++x) out.at(c, y, x) = views[k].at(c, y, x);
      }
    }
    for (int y = box.y0; y < box.y1; ++y) {
      for (int x = box.x0; x < box.x1; ++x) owner[static_cast<std::size_t>(y) * w + x] = static_cast<int>(k);
    }
  }
  if (record) {
    record->mu.assign(views.size(), 0.0);
    for (int o : owner) record->mu[o] += 1.0 / static_cast<double>(owner.size());
  }
  return out;
}

}  // namespace

std::string to_string(MixMode mode) {
  switch (mode) {
    case MixMode::StyleMix: return "stylemix";
    case MixMode::StyleCut: return "stylecut";
    case MixMode::MixupBaseline: return "mixup";
    case MixMode::CutMixBaseline: return "cutmix";
    case MixMode::StyleTransferOnly: return "styletransfer";
    case MixMode::None: return "none";
  }
  return "unknown";
}

MixMode mix_mode_from_string(const std::string& name) {
  for (auto mode : {MixMode::StyleMix, MixMode::StyleCut, MixMode::MixupBaseline, MixMode::CutMixBaseline,
                    MixMode::StyleTransferOnly, MixMode::None}) {
    if (to_string(mode) == name) return mode;
  }
  throw ValidationError("unknown augmentation mode '" + name +
                        "' (expected stylemix|stylecut|mixup|cutmix|styletransfer|none)");
}

void StyleMixConfig::validate() const {
  require(0.0 <= lambda_min && lambda_min <= lambda_max && lambda_max <= 1.0,
          "lambda range must satisfy 0 <= lambda_min <= lambda_max <= 1");
  require(dirichlet_alpha > 0.0, "dirichlet_alpha must be positive");
  require(cut_beta > 0.0, "cut_beta must be positive");
  require(band_fraction > 0.0 && band_fraction <= 1.0, "band_fraction must be in (0, 1]");
}

FourierPlanes fft_decompose(const ImageTensor& img) {
  require(img.height() >= 2 && img.width() >= 2, "fft_decompose: image must be at least 2x2");
  img.require_finite();
  FourierPlanes planes;
  planes.channels = img.channels();
  planes.height = img.height();
  planes.width = img.width();
  const std::size_t n = img.plane_size();
  planes.amplitude.resize(n * img.channels());
  planes.phase.resize(n * img.channels());

  std::vector<Complex> buffer(n);
  for (int c = 0; c < img.channels(); ++c) {
    auto plane = img.plane(c);
    std::transform(plane.begin(), plane.end(), buffer.begin(), [](double v) { return Complex(v, 0.0); });
    transform(buffer, img.height(), img.width(), FFTW_FORWARD);
    for (std::size_t i = 0; i < n; ++i) {
      planes.amplitude[c * n + i] = std::abs(buffer[i]);
      planes.phase[c * n + i] = std::arg(buffer[i]);
    }
  }
  return planes;
}

ImageTensor fft_compose(const FourierPlanes& planes) {
  const std::size_t n = planes.plane_size();
  require(planes.channels > 0 && n > 0, "fft_compose: empty planes");
  require(planes.amplitude.size() == n * planes.channels && planes.phase.size() == n * planes.channels,
          "fft_compose: amplitude and phase shapes disagree");

  ImageTensor out(planes.channels, planes.height, planes.width);
  const double max_amp =
      planes.amplitude.empty() ? 0.0 : *std::max_element(planes.amplitude.begin(), planes.amplitude.end());
  const double scale = 1.0 / static_cast<double>(n);
  std::vector<Complex> buffer(n);
  for (int c = 0; c < planes.channels; ++c) {
    for (std::size_t i = 0; i < n; ++i) buffer[i] = std::polar(planes.amplitude[c * n + i], planes.phase[c * n + i]);
    transform(buffer, planes.height, planes.width, FFTW_BACKWARD);
    auto plane = out.plane(c);
    double worst_imag = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      plane[i] = buffer[i].real() * scale;
      worst_imag = std::max(worst_imag, std::abs(buffer[i].imag() * scale));
    }
    if (worst_imag > 1e-5 * std::max(max_amp, 1e-12)) {
      throw ValidationError("fft_compose: spectrum is not Hermitian; inverse has imaginary residual " +
                            std::to_string(worst_imag));
    }
  }
  return out;
}

ImageTensor style_view(const ImageTensor& x, const ImageTensor& x_aux, double lambda, double band_fraction) {
  require_same_shape(x, x_aux, "style_view");
  require(lambda >= 0.0 && lambda <= 1.0, "style_view: lambda must be in [0, 1]");
  require(band_fraction > 0.0 && band_fraction <= 1.0, "style_view: band_fraction must be in (0, 1]");
  FourierPlanes source = fft_decompose(x);
  FourierPlanes aux = fft_decompose(x_aux);
  const std::size_t n = source.plane_size();
  for (int c = 0; c < source.channels; ++c) {
    for (int ky = 0; ky < source.height; ++ky) {
      for (int kx = 0; kx < source.width; ++kx) {
        if (!in_band(ky, kx, source.height, source.width, band_fraction)) continue;
        std::size_t i = c * n + static_cast<std::size_t>(ky) * source.width + kx;
        source.amplitude[i] = lambda * aux.amplitude[i] + (1.0 - lambda) * source.amplitude[i];
      }
    }
  }
  ImageTensor out = fft_compose(source);
  out.domain = x.domain;
  return out;
}

std::vector<double> sample_mu(int num_views, const StyleMixConfig& cfg, Rng& rng) {
  require(num_views >= 1, "sample_mu: need at least one view");
  if (num_views == 1) return {1.0};
  if (cfg.mu_law == MuLaw::Dirichlet) return rng.dirichlet(cfg.dirichlet_alpha, num_views);
  return std::vector<double>(num_views, 1.0 / num_views);
}

Box sample_box(int height, int width, double area_fraction, Rng& rng) {
  area_fraction = std::clamp(area_fraction, 0.0, 1.0);
  const double side = std::sqrt(area_fraction);
  const int cut_h = static_cast<int>(std::lround(height * side));
  const int cut_w = static_cast<int>(std::lround(width * side));
  const int cy = rng.uniform_int(0, height - 1);
  const int cx = rng.uniform_int(0, width - 1);
  Box box;
  box.y0 = std::clamp(cy - cut_h / 2, 0, height);
  box.y1 = std::clamp(cy - cut_h / 2 + cut_h, 0, height);
  box.x0 = std::clamp(cx - cut_w / 2, 0, width);
  box.x1 = std::clamp(cx - cut_w / 2 + cut_w, 0, width);
  return box;
}

ImageTensor mixup(const ImageTensor& x, const ImageTensor& x_aux, double weight) {
  require_same_shape(x, x_aux, "mixup");
  require(weight >= 0.0 && weight <= 1.0, "mixup: weight must be in [0, 1]");
  ImageTensor out = x;
  auto dst = out.data();
  auto src = x_aux.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = weight * dst[i] + (1.0 - weight) * src[i];
  return out;
}

ImageTensor cutmix(const ImageTensor& x, const ImageTensor& x_aux, const Box& box) {
  require_same_shape(x, x_aux, "cutmix");
  require(0 <= box.y0 && box.y0 <= box.y1 && box.y1 <= x.height() && 0 <= box.x0 && box.x0 <= box.x1 &&
              box.x1 <= x.width(),
          "cutmix: box out of bounds");
  ImageTensor out = x;
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = box.y0; y < box.y1; ++y) {
      for (int xx = box.x0; xx < box.x1; ++xx) out.at(c, y, xx) = x_aux.at(c, y, xx);
    }
  }
  return out;
}

ImageTensor content_mix_baseline(const ImageTensor& x, const ImageTensor& x_aux, ContentMixMode mode,
                                 const StyleMixConfig& cfg, Rng& rng, MixRecord* record) {
  require_same_shape(x, x_aux, "content_mix_baseline");
  const double draw = rng.beta(cfg.cut_beta, cfg.cut_beta);
  if (mode == ContentMixMode::Mixup) {
    if (record) record->content_weight = draw;
    return mixup(x, x_aux, draw);
  }
  Box box = sample_box(x.height(), x.width(), draw, rng);
  if (record) {
    record->boxes.push_back(box);
    record->content_weight = 1.0 - static_cast<double>(box.area()) / static_cast<double>(x.plane_size());
  }
  return cutmix(x, x_aux, box);
}

ImageTensor cp_style_mix(const ImageTensor& x, std::span<const ImageTensor> aux, const StyleMixConfig& cfg,
                         Rng& rng, MixRecord* record) {
  cfg.validate();
  validate_aux(x, aux);
  x.require_finite();

  const int num_views = static_cast<int>(aux.size());
  std::vector<double> lambdas(num_views);
  if (cfg.shared_lambda) {
    std::fill(lambdas.begin(), lambdas.end(), sample_lambda(cfg, rng));
  } else {
    for (auto& l : lambdas) l = sample_lambda(cfg, rng);
  }

  std::vector<ImageTensor> views;
  views.reserve(num_views);
  for (int i = 0; i < num_views; ++i) views.push_back(style_view(x, aux[i], lambdas[i], cfg.band_fraction));
  if (record) record->lambdas = lambdas;

  ImageTensor out;
  if (cfg.mode == MixMode::StyleCut) {
    out = stylecut_compose(views, cfg, rng, record);
  } else {
    std::vector<double> mu = sample_mu(num_views, cfg, rng);
    if (num_views == 1) {
      out = views.front();
    } else {
      out = ImageTensor(x.channels(), x.height(), x.width());
      auto dst = out.data();
      for (int i = 0; i < num_views; ++i) {
        auto src = views[i].data();
        for (std::size_t p = 0; p < dst.size(); ++p) dst[p] += mu[i] * src[p];
      }
    }
    if (record) record->mu = mu;
  }
  out.clamp(0.0, 1.0);
  out.domain = x.domain;
  return out;
}

ImageTensor augment(const ImageTensor& x, std::span<const ImageTensor> aux, const StyleMixConfig& cfg, Rng& rng,
                    MixRecord* record) {
  switch (cfg.mode) {
    case MixMode::None:
      return x;
    case MixMode::StyleMix:
    case MixMode::StyleCut:
      return cp_style_mix(x, aux, cfg, rng, record);
    case MixMode::StyleTransferOnly: {
      validate_aux(x, aux);
      const int pick = rng.uniform_int(0, static_cast<int>(aux.size()) - 1);
      const double lambda = sample_lambda(cfg, rng);
      ImageTensor out = style_view(x, aux[pick], lambda, cfg.band_fraction);
      out.clamp(0.0, 1.0);
      if (record) {
        record->aux_used = pick;
        record->lambdas = {lambda};
      }
      return out;
    }
    case MixMode::MixupBaseline:
    case MixMode::CutMixBaseline: {
      validate_aux(x, aux);
      const int pick = rng.uniform_int(0, static_cast<int>(aux.size()) - 1);
      if (record) record->aux_used = pick;
      auto mode = cfg.mode == MixMode::MixupBaseline ? ContentMixMode::Mixup : ContentMixMode::CutMix;
      ImageTensor out = content_mix_baseline(x, aux[pick], mode, cfg, rng, record);
      out.domain = x.domain;
      return out;
    }
  }
  return x;
}

void to_json(nlohmann::json& j, const StyleMixConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"lambda_min", c.lambda_min},
                     {"lambda_max", c.lambda_max},
                     {"shared_lambda", c.shared_lambda},
                     {"mu_law", c.mu_law == MuLaw::Dirichlet ? "dirichlet" : "uniform"},
                     {"dirichlet_alpha", c.dirichlet_alpha},
                     {"cut_beta", c.cut_beta},
                     {"band_fraction", c.band_fraction}};
}

void from_json(const nlohmann::json& j, StyleMixConfig& c) {
  StyleMixConfig d;
  c.mode = mix_mode_from_string(j.value("mode", to_string(d.mode)));
  c.lambda_min = j.value("lambda_min", d.lambda_min);
  c.lambda_max = j.value("lambda_max", d.lambda_max);
  c.shared_lambda = j.value("shared_lambda", d.shared_lambda);
  const auto law = j.value("mu_law", std::string("uniform"));
  require(law == "uniform" || law == "dirichlet", "mu_law must be uniform or dirichlet");
  c.mu_law = law == "dirichlet" ? MuLaw::Dirichlet : MuLaw::Uniform;
  c.dirichlet_alpha = j.value("dirichlet_alpha", d.dirichlet_alpha);
  c.cut_beta = j.value("cut_beta", d.cut_beta);
  c.band_fraction = j.value("band_fraction", d.band_fraction);
  c.validate();
}

void to_json(nlohmann::json& j, const MixRecord& r) {
  j = nlohmann::json{{"lambdas", r.lambdas}, {"mu", r.mu}, {"content_weight", r.content_weight}};
  auto boxes = nlohmann::json::array();
  for (const auto& b : r.boxes) boxes.push_back({b.y0, b.x0, b.y1, b.x1});
  j["boxes"] = boxes;
  if (r.aux_used >= 0) j["aux_used"] = r.aux_used;
}

}  // namespace dimae::fourier
