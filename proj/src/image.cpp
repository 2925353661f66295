#include "dimae/image.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dimae/errors.hpp"

namespace dimae {

ImageTensor::ImageTensor(int channels, int height, int width, double fill, DomainId domain_id)
    : domain(domain_id), channels_(channels), height_(height), width_(width) {
  require(channels > 0 && height > 0 && width > 0,
          "image dimensions must be positive, got " + std::to_string(channels) + "x" +
              std::to_string(height) + "x" + std::to_string(width));
  data_.assign(static_cast<std::size_t>(channels) * height * width, fill);
}

void ImageTensor::require_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) throw ValidationError("image contains non-finite pixel values");
  }
}

void ImageTensor::clamp(double lo, double hi) {
  for (double& v : data_) v = std::clamp(v, lo, hi);
}

double max_abs_diff(const ImageTensor& a, const ImageTensor& b) {
  require(a.same_shape(b), "max_abs_diff: shape mismatch");
  double worst = 0.0;
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < da.size(); ++i) worst = std::max(worst, std::abs(da[i] - db[i]));
  return worst;
}

}  // namespace dimae
