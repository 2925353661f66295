#pragma once

// Content-preserved style mixing in the Fourier domain.
//
// An image's 2-D DFT is split into amplitude (style) and phase (content). A style
// view keeps the source phase and interpolates its amplitude towards an auxiliary
// image from another domain; the final augmented view blends the style views of
// every other domain.

#include <nlohmann/json.hpp>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dimae/image.hpp"
#include "dimae/rng.hpp"

namespace dimae::fourier {

/// Per-channel amplitude and phase of the unnormalized forward DFT, row-major H x W.
struct FourierPlanes {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> amplitude;
  std::vector<double> phase;

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
};

enum class MixMode { StyleMix, StyleCut, MixupBaseline, CutMixBaseline, StyleTransferOnly, None };
enum class MuLaw { Uniform, Dirichlet };
enum class ContentMixMode { Mixup, CutMix };

std::string to_string(MixMode mode);
MixMode mix_mode_from_string(const std::string& name);

struct StyleMixConfig {
  MixMode mode = MixMode::StyleMix;
  /// lambda ~ Uniform[lambda_min, lambda_max].
  double lambda_min = 0.0;
  double lambda_max = 1.0;
  /// One lambda for all style views of an image instead of one per view.
  bool shared_lambda = false;
  MuLaw mu_law = MuLaw::Uniform;
  double dirichlet_alpha = 1.0;
  double cut_beta = 1.0;
  /// Fraction of the (centered) spectrum whose amplitude is mixed; 1 mixes everything.
  double band_fraction = 1.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const StyleMixConfig& c);
void from_json(const nlohmann::json& j, StyleMixConfig& c);
/// Axis-aligned pixel box [y0, y1) x [x0, x1).
struct Box {
  int y0 = 0, x0 = 0, y1 = 0, x1 = 0;
  int area() const { return (y1 - y0) * (x1 - x0); }
};

/// What cp_style_mix sampled, for sidecars and tests.
struct MixRecord {
  std::vector<double> lambdas;
  std::vector<double> mu;
  std::vector<Box> boxes;
  double content_weight = 1.0;
  int aux_used = -1;
};

void to_json(nlohmann::json& j, const MixRecord& r);

FourierPlanes fft_decompose(const ImageTensor& img);
ImageTensor fft_compose(const FourierPlanes& planes);

/// Source phase, amplitude mixed as lambda * A(aux) + (1 - lambda) * A(x). Not clamped.
ImageTensor style_view(const ImageTensor& x, const ImageTensor& x_aux, double lambda,
                       double band_fraction = 1.0);

/// Blends style views of `x` built from one auxiliary image per other domain.
/// `aux` must hold one image per domain other than x.domain, in the order the
/// mixing weights are assigned. Output is clamped to [0, 1].
ImageTensor cp_style_mix(const ImageTensor& x, std::span<const ImageTensor> aux,
                         const StyleMixConfig& cfg, Rng& rng, MixRecord* record = nullptr);

/// Mixing weights: Sum(mu) = 1 over the aux views.
std::vector<double> sample_mu(int num_views, const StyleMixConfig& cfg, Rng& rng);

/// CutMix box covering roughly `area_fraction` of an H x W image, clipped to bounds.
Box sample_box(int height, int width, double area_fraction, Rng& rng);

ImageTensor mixup(const ImageTensor& x, const ImageTensor& x_aux, double weight);
ImageTensor cutmix(const ImageTensor& x, const ImageTensor& x_aux, const Box& box);

/// Raw-image Mixup / CutMix across domains (the content-mixing baselines).
ImageTensor content_mix_baseline(const ImageTensor& x, const ImageTensor& x_aux, ContentMixMode mode,
                                 const StyleMixConfig& cfg, Rng& rng, MixRecord* record = nullptr);

/// Dispatches on cfg.mode. `aux` holds one image per other domain.
ImageTensor augment(const ImageTensor& x, std::span<const ImageTensor> aux, const StyleMixConfig& cfg,
                    Rng& rng, MixRecord* record = nullptr);

}  // namespace dimae::fourier
