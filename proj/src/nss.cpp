#include "nss.hpp"

#include <cmath>

namespace slkd {

void MscnParams::validate() const {
  require(radius >= 1, "mscn: window radius must be >= 1");
  require(sigma_w > 0.0f, "mscn: window sigma must be positive");
  require(c > 0.0f, "mscn: stabilizer C must be positive");
}

namespace {

constexpr int kAlphaKnots = 1024;
constexpr double kAlphaLo = 0.2, kAlphaHi = 10.0;
constexpr float kSideTau = 1e-2f;  // AGGD soft side-membership temperature

double ggd_ratio(double a) {
  // r(a) = Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)), strictly increasing in a
  return std::exp(2.0 * std::lgamma(2.0 / a) - std::lgamma(1.0 / a) - std::lgamma(3.0 / a));
}

std::shared_ptr<const InterpTable> build_alpha_inverse() {
  std::vector<double> rs(kAlphaKnots), as(kAlphaKnots);
  for (int i = 0; i < kAlphaKnots; ++i) {
    const double a = kAlphaLo + (kAlphaHi - kAlphaLo) * i / (kAlphaKnots - 1);
    as[i] = a;
    rs[i] = ggd_ratio(a);
  }
  return std::make_shared<const InterpTable>(std::move(rs), std::move(as));
}

std::shared_ptr<const InterpTable> build_gamma_ratio() {
  std::vector<double> as(kAlphaKnots), gs(kAlphaKnots);
  for (int i = 0; i < kAlphaKnots; ++i) {
    const double a = kAlphaLo + (kAlphaHi - kAlphaLo) * i / (kAlphaKnots - 1);
    as[i] = a;
    gs[i] = std::exp(std::lgamma(2.0 / a) - std::lgamma(1.0 / a));
  }
  return std::make_shared<const InterpTable>(std::move(as), std::move(gs));
}

Tensor flatten(const Tensor& t) {
  return reshape(t, {static_cast<int>(t.numel())});
}

}  // namespace

std::shared_ptr<const InterpTable> alpha_inverse_table() {
  static const std::shared_ptr<const InterpTable> t = build_alpha_inverse();
  return t;
}

std::shared_ptr<const InterpTable> gamma_ratio_table() {
  static const std::shared_ptr<const InterpTable> t = build_gamma_ratio();
  return t;
}

Tensor mscn(const Tensor& map, const MscnParams& p) {
  p.validate();
  require(map.rank() == 3, "mscn: input must be [C,H,W], got " + shape_str(map.shape()));
  const int c = map.shape()[0], h = map.shape()[1], w = map.shape()[2];
  const int k = 2 * p.radius + 1;
  require(h >= k && w >= k, "mscn: map " + shape_str(map.shape()) +
                                " smaller than the " + std::to_string(k) + "x" +
                                std::to_string(k) + " window");

  // normalized Gaussian window, one copy per channel (depthwise conv)
  std::vector<float> kern(static_cast<size_t>(k) * k);
  double sum = 0.0;
  for (int y = 0; y < k; ++y)
    for (int x = 0; x < k; ++x) {
      const double dy = y - p.radius, dx = x - p.radius;
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * p.sigma_w * p.sigma_w));
      kern[y * k + x] = static_cast<float>(v);
      sum += v;
    }
  for (float& v : kern) v = static_cast<float>(v / sum);
  std::vector<float> wdata;
  wdata.reserve(static_cast<size_t>(c) * k * k);
  for (int ch = 0; ch < c; ++ch) wdata.insert(wdata.end(), kern.begin(), kern.end());
  const Tensor window = Tensor::from_data({c, 1, k, k}, std::move(wdata));

  const Tensor mu = conv2d_nobias(map, window, 1, p.radius, c, /*reflect=*/true);
  const Tensor ex2 = conv2d_nobias(square(map), window, 1, p.radius, c, /*reflect=*/true);
  const Tensor var = clamp_min(ex2 - square(mu), 0.0);
  const Tensor sigma = sqrt(var);
  return (map - mu) / add_scalar(sigma, p.c);
}

GgdFit fit_ggd(const Tensor& samples) {
  require(samples.numel() >= 16, "fit_ggd: need >= 16 samples, got " +
                                     std::to_string(samples.numel()));
  const Tensor flat = flatten(samples);
  const Tensor mean_abs = mean_all(abs(flat));
  const Tensor mean_sq = mean_all(square(flat));

  if (mean_abs.item() == 0.0f) {
    // degenerate all-zero input: fixed convention, detached
    GgdFit fit;
    fit.alpha = Tensor::scalar(static_cast<float>((kAlphaLo + kAlphaHi) / 2.0));
    fit.sigma_sq = Tensor::scalar(1e-8f);
    return fit;
  }

  const Tensor r = square(mean_abs) / clamp_min(mean_sq, 1e-8);
  GgdFit fit;
  fit.alpha = lookup_interp1d(r, alpha_inverse_table());
  fit.sigma_sq = mean_sq;
  return fit;
}

AggdFit fit_aggd(const Tensor& samples) {
  require(samples.numel() >= 16, "fit_aggd: need >= 16 samples, got " +
                                     std::to_string(samples.numel()));
  const Tensor flat = flatten(samples);

  bool has_pos = false, has_neg = false;
  for (float v : flat.data()) {
    has_pos |= v > 0.0f;
    has_neg |= v < 0.0f;
  }
  if (!has_pos || !has_neg) {
    AggdFit fit;
    fit.alpha = Tensor::scalar(static_cast<float>((kAlphaLo + kAlphaHi) / 2.0));
    fit.eta = Tensor::scalar(0.0f);
    const float s = std::sqrt(std::max(mean_all(square(flat)).item(), 1e-8f));
    fit.beta_l = Tensor::scalar(s);
    fit.beta_r = Tensor::scalar(s);
    return fit;
  }

  // soft side membership keeps the estimator differentiable at the boundary
  const Tensor w_pos = sigmoid(mul_scalar(flat, 1.0f / kSideTau));
  const Tensor w_neg = sub(Tensor::scalar(1.0f), w_pos);
  const Tensor sq = square(flat);

  const Tensor m2_pos = sum_all(w_pos * sq) / clamp_min(sum_all(w_pos), 1e-8);
  const Tensor m2_neg = sum_all(w_neg * sq) / clamp_min(sum_all(w_neg), 1e-8);
  const Tensor beta_r = sqrt(clamp_min(m2_pos, 1e-12));
  const Tensor beta_l = sqrt(clamp_min(m2_neg, 1e-12));

  const Tensor gamma_hat = beta_l / clamp_min(beta_r, 1e-8);
  const Tensor r_hat = square(mean_all(abs(flat))) / clamp_min(mean_all(sq), 1e-8);
  const Tensor g2 = square(gamma_hat);
  const Tensor num = (g2 * gamma_hat + Tensor::scalar(1.0f)) * add_scalar(gamma_hat, 1.0f);
  const Tensor den = square(add_scalar(g2, 1.0f));
  const Tensor r_norm = r_hat * num / clamp_min(den, 1e-8);

  AggdFit fit;
  fit.alpha = lookup_interp1d(r_norm, alpha_inverse_table());
  fit.beta_l = beta_l;
  fit.beta_r = beta_r;
  fit.eta = (beta_r - beta_l) * lookup_interp1d(fit.alpha, gamma_ratio_table());
  return fit;
}

BrisqueFeatures brisque_features(const Tensor& map, int scales, const MscnParams& p) {
  require(map.rank() == 3, "brisque_features: input must be [C,H,W]");
  require(scales >= 1, "brisque_features: scales must be >= 1");
  const int c = map.shape()[0];
  const int k = 2 * p.radius + 1;

  // per channel: one feature row per scale, scales concatenated scale-minor
  std::vector<std::vector<Tensor>> rows(c);  // rows[ch] = 18-vectors per scale
  Tensor cur = map;
  for (int s = 0; s < scales; ++s) {
    const int h = cur.shape()[1], w = cur.shape()[2];
    require(h >= k && w >= k && h >= 2 && w >= 2,
            "brisque_features: map too small at scale " + std::to_string(s) + " (" +
                shape_str(cur.shape()) + ")");
    const Tensor m = mscn(cur, p);

    // neighboring-product maps: horizontal, vertical, main- and anti-diagonal
    const Tensor ph = slice(m, {0, 0, 0}, {c, h, w - 1}) * slice(m, {0, 0, 1}, {c, h, w - 1});
    const Tensor pv = slice(m, {0, 0, 0}, {c, h - 1, w}) * slice(m, {0, 1, 0}, {c, h - 1, w});
    const Tensor pd1 =
        slice(m, {0, 0, 0}, {c, h - 1, w - 1}) * slice(m, {0, 1, 1}, {c, h - 1, w - 1});
    const Tensor pd2 =
        slice(m, {0, 0, 1}, {c, h - 1, w - 1}) * slice(m, {0, 1, 0}, {c, h - 1, w - 1});

    for (int ch = 0; ch < c; ++ch) {
      std::vector<Tensor> feats;
      feats.reserve(18);
      const GgdFit g = fit_ggd(slice(m, {ch, 0, 0}, {1, h, w}));
      feats.push_back(g.alpha);
      feats.push_back(g.sigma_sq);
      for (const Tensor* prod : {&ph, &pv, &pd1, &pd2}) {
        const Shape& ps = prod->shape();
        const AggdFit a = fit_aggd(slice(*prod, {ch, 0, 0}, {1, ps[1], ps[2]}));
        feats.push_back(a.alpha);
        feats.push_back(a.eta);
        feats.push_back(a.beta_l);
        feats.push_back(a.beta_r);
      }
      rows[ch].push_back(concat_axis(feats, 0));  // [18]
    }
    if (s + 1 < scales) cur = avgpool2d(cur, 2, 2);
  }

  std::vector<Tensor> mat_rows;
  mat_rows.reserve(c);
  for (int ch = 0; ch < c; ++ch)
    mat_rows.push_back(reshape(concat_axis(rows[ch], 0), {1, 18 * scales}));

  BrisqueFeatures out;
  out.features = concat_axis(mat_rows, 0);
  out.channels = c;
  out.scales = scales;
  return out;
}

PiqeBlockMap piqe_features(const Tensor& map, int block, const MscnParams& p) {
  require(map.rank() == 3, "piqe_features: input must be [C,H,W]");
  require(block >= 4, "piqe_features: block must be >= 4");
  const int c = map.shape()[0], h = map.shape()[1], w = map.shape()[2];
  require(h >= block && w >= block, "piqe_features: block " + std::to_string(block) +
                                        " exceeds map " + shape_str(map.shape()));
  const int bh = h / block, bw = w / block;

  constexpr float kVarThresh = 0.1f;   // T
  constexpr float kEdgeThresh = 0.1f;  // T_e
  constexpr float kSoftTau = 0.02f;    // tau_a

  const Tensor m = slice(mscn(map, p), {0, 0, 0}, {c, bh * block, bw * block});

  // block variance of the MSCN coefficients -> soft activity
  const Tensor tile_mean = avgpool2d(m, block, block);
  const Tensor tile_mean_sq = avgpool2d(square(m), block, block);
  const Tensor variance = clamp_min(tile_mean_sq - square(tile_mean), 0.0);
  const Tensor activity = sigmoid(mul_scalar(add_scalar(variance, -kVarThresh), 1.0f / kSoftTau));

  // per-tile border means of |mscn|; the max over the four borders is the
  // edge-segment distortion proxy
  const Tensor am = abs(m);
  const Tensor cols = reshape(avgpool2d(am, 1, block, 1, block), {c, bh, block, bw});
  const Tensor top = reshape(slice(cols, {0, 0, 0, 0}, {c, bh, 1, bw}), {1, c, bh, bw});
  const Tensor bottom = reshape(slice(cols, {0, 0, block - 1, 0}, {c, bh, 1, bw}), {1, c, bh, bw});
  const Tensor rws = reshape(avgpool2d(am, block, 1, block, 1), {c, bh, bw, block});
  const Tensor left = reshape(slice(rws, {0, 0, 0, 0}, {c, bh, bw, 1}), {1, c, bh, bw});
  const Tensor right = reshape(slice(rws, {0, 0, 0, block - 1}, {c, bh, bw, 1}), {1, c, bh, bw});
  const Tensor borders = concat_axis({top, bottom, left, right}, 0);
  const Tensor edge = reshape(max_axes(borders, {0}), {c, bh, bw});
  const Tensor edge_score =
      sigmoid(mul_scalar(add_scalar(edge, -kEdgeThresh), 1.0f / kSoftTau));

  PiqeBlockMap out;
  out.activity = activity;
  out.scores = activity * edge_score;
  return out;
}

}  // namespace slkd
