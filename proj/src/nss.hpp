#pragma once

#include <memory>

#include "tensor.hpp"

namespace slkd {

struct MscnParams {
  int radius = 3;                 // 7x7 window
  float sigma_w = 7.0f / 6.0f;
  float c = 1e-3f;                // Eq-style stabilizer in the denominator
  void validate() const;
};

// Fits are kept as scalar tensors so gradients can flow back into the samples.
struct GgdFit {
  Tensor alpha;     // shape parameter, within the lookup range [0.2, 10]
  Tensor sigma_sq;  // variance
};

struct AggdFit {
  Tensor alpha;
  Tensor eta;       // mean offset (signed)
  Tensor beta_l;    // left-side scale
  Tensor beta_r;    // right-side scale
};

// [channels, 18 * scales]; per channel and scale: 2 GGD features followed by
// 4 orientations x 4 AGGD features, scales concatenated along the feature axis.
struct BrisqueFeatures {
  Tensor features;
  int channels = 0;
  int scales = 0;
};

struct PiqeBlockMap {
  Tensor scores;    // [channels, Bh, Bw] in [0,1]
  Tensor activity;  // same shape, soft activity mask
};

// Inverse of r(a) = Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)) tabulated on 1024
// uniform knots over a in [0.2, 10]; frozen at first use.
std::shared_ptr<const InterpTable> alpha_inverse_table();
// Gamma(2/a) / Gamma(1/a) over the same knots, used for the AGGD mean offset.
std::shared_ptr<const InterpTable> gamma_ratio_table();

// Mean Subtracted Contrast Normalized coefficients: (x - mu) / (sigma + C)
// with Gaussian-weighted local moments, reflect padding.
Tensor mscn(const Tensor& map, const MscnParams& p = {});

GgdFit fit_ggd(const Tensor& samples);
AggdFit fit_aggd(const Tensor& samples);

BrisqueFeatures brisque_features(const Tensor& map, int scales, const MscnParams& p = {});
PiqeBlockMap piqe_features(const Tensor& map, int block, const MscnParams& p = {});

}  // namespace slkd
