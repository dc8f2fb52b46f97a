#pragma once

// Similarity metrics and the authentication decision rule.
//
// SSIM follows Wang et al. (2004): per window position
//
//   SSIM = (2 mu_x mu_y + c1)(2 sigma_xy + c2) / ((mu_x^2 + mu_y^2 + c1)(sigma_x^2 + sigma_y^2 + c2))
//
// with c1 = (k1 L)^2, c2 = (k2 L)^2. Local statistics come from an 11x11 Gaussian
// window (sigma 1.5, "valid" positions only) or from the whole image (global).
// Per-image SSIM is the mean over window positions and then over channels.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "sslauth/error.hpp"
#include "sslauth/tensor.hpp"

namespace sslauth {

enum class SsimWindow { gaussian, global };
enum class ChannelMode { per_channel_mean, luminance_only };

inline const char* to_string(SsimWindow w) { return w == SsimWindow::gaussian ? "gaussian_11x11_sigma1.5" : "global"; }
inline const char* to_string(ChannelMode m) {
  return m == ChannelMode::per_channel_mean ? "per_channel_mean" : "luminance_only";
}

struct SsimConfig {
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
  SsimWindow window = SsimWindow::gaussian;
  ChannelMode channel_mode = ChannelMode::per_channel_mean;

  double c1() const { return (k1 * dynamic_range) * (k1 * dynamic_range); }
  double c2() const { return (k2 * dynamic_range) * (k2 * dynamic_range); }
  double c3() const { return c2() / 2.0; }

  void validate() const {
    require(k1 > 0 && k2 > 0 && dynamic_range > 0, ErrorCode::config, "SSIM constants k1, k2, L must be positive");
  }

  static constexpr int kWindowSize = 11;
  static constexpr double kWindowSigma = 1.5;

  friend bool operator==(const SsimConfig&, const SsimConfig&) = default;
};

inline void to_json(nlohmann::json& j, const SsimConfig& c) {
  j = {{"k1", c.k1}, {"k2", c.k2}, {"L", c.dynamic_range}, {"window", to_string(c.window)},
       {"channel_mode", to_string(c.channel_mode)}};
}

inline void from_json(const nlohmann::json& j, SsimConfig& c) {
  c.k1 = j.at("k1").get<double>();
  c.k2 = j.at("k2").get<double>();
  c.dynamic_range = j.at("L").get<double>();
  const auto w = j.at("window").get<std::string>();
  if (w == "global") c.window = SsimWindow::global;
  else if (w == "gaussian_11x11_sigma1.5" || w == "gaussian") c.window = SsimWindow::gaussian;
  else fail(ErrorCode::config, "unknown SSIM window '" + w + "'");
  const auto m = j.at("channel_mode").get<std::string>();
  if (m == "per_channel_mean") c.channel_mode = ChannelMode::per_channel_mean;
  else if (m == "luminance_only") c.channel_mode = ChannelMode::luminance_only;
  else fail(ErrorCode::config, "unknown SSIM channel mode '" + m + "'");
  c.validate();
}

enum class DecisionMode { relative_to_alpha0, absolute };

inline const char* to_string(DecisionMode m) { return m == DecisionMode::relative_to_alpha0 ? "relative_to_alpha0" : "absolute"; }

inline DecisionMode decision_mode_from_string(const std::string& s) {
  if (s == "relative_to_alpha0" || s == "relative") return DecisionMode::relative_to_alpha0;
  if (s == "absolute") return DecisionMode::absolute;
  fail(ErrorCode::config, "unknown decision mode '" + s + "'");
}

struct AuthDecisionConfig {
  double epsilon = 0.10;
  DecisionMode mode = DecisionMode::relative_to_alpha0;

  void validate() const {
    require(epsilon >= 0.0 && epsilon <= 1.0, ErrorCode::config, "fault tolerance epsilon must lie in [0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Cosine similarity

template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  require(!a.empty() && a.size() == b.size(), ErrorCode::shape_mismatch,
          "cosine_similarity: vectors must be non-empty and of equal length");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += double(a[i]) * double(b[i]);
    na += double(a[i]) * double(a[i]);
    nb += double(b[i]) * double(b[i]);
  }
  require(na > 0 && nb > 0, ErrorCode::invalid_argument, "cosine_similarity: zero-norm vector");
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  return cosine_similarity<double>(std::span<const double>(a), std::span<const double>(b));
}

/// Row-wise cosine between two (B, d) feature batches.
inline std::vector<double> rowwise_cosine(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && a.shape() == b.shape(), ErrorCode::shape_mismatch, "rowwise_cosine: shapes differ");
  const int n = a.dim(0), d = a.dim(1);
  std::vector<double> out(n);
  for (int i = 0; i < n; ++i)
    out[i] = cosine_similarity<float>(std::span<const float>(a.data() + i * d, d),
                                      std::span<const float>(b.data() + i * d, d));
  return out;
}

/// Cosine confidence as a percentage: raw cosine * 100 clamped to [0, 100].
inline double cosine_percent(double cos) { return std::clamp(cos * 100.0, 0.0, 100.0); }

// ---------------------------------------------------------------------------
// SSIM

namespace detail {

/// One image plane in double precision.
struct Plane {
  int h = 0, w = 0;
  std::vector<double> v;
};

inline std::vector<double> gaussian_kernel_1d() {
  constexpr int n = SsimConfig::kWindowSize;
  std::vector<double> k(n);
  double sum = 0;
  for (int i = 0; i < n; ++i) {
    const double x = i - n / 2;
    k[i] = std::exp(-(x * x) / (2 * SsimConfig::kWindowSigma * SsimConfig::kWindowSigma));
    sum += k[i];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Weighted local averaging: separable Gaussian over valid positions, or one global mean.
class LocalMean {
 public:
  LocalMean(SsimWindow window, int h, int w) : window_(window), h_(h), w_(w) {
    if (window_ == SsimWindow::gaussian) {
      require(h >= SsimConfig::kWindowSize && w >= SsimConfig::kWindowSize, ErrorCode::shape_mismatch,
              "gaussian SSIM window needs images of at least 11x11; use the global window for smaller images");
      k_ = gaussian_kernel_1d();
      oh_ = h - SsimConfig::kWindowSize + 1;
      ow_ = w - SsimConfig::kWindowSize + 1;
    } else {
      oh_ = ow_ = 1;
    }
  }

  int out_h() const { return oh_; }
  int out_w() const { return ow_; }
  std::size_t out_size() const { return static_cast<std::size_t>(oh_) * ow_; }

  std::vector<double> apply(const std::vector<double>& in) const {
    if (window_ == SsimWindow::global) {
      double s = 0;
      for (double v : in) s += v;
      return {s / static_cast<double>(in.size())};
    }
    const int n = SsimConfig::kWindowSize;
    std::vector<double> tmp(static_cast<std::size_t>(h_) * ow_);
    for (int r = 0; r < h_; ++r)
      for (int c = 0; c < ow_; ++c) {
        double s = 0;
        for (int t = 0; t < n; ++t) s += k_[t] * in[r * w_ + c + t];
        tmp[r * ow_ + c] = s;
      }
    std::vector<double> out(out_size());
    for (int r = 0; r < oh_; ++r)
      for (int c = 0; c < ow_; ++c) {
        double s = 0;
        for (int t = 0; t < n; ++t) s += k_[t] * tmp[(r + t) * ow_ + c];
        out[r * ow_ + c] = s;
      }
    return out;
  }

  /// Adjoint of apply(): scatters a gradient on window positions back onto pixels.
  std::vector<double> adjoint(const std::vector<double>& g) const {
    std::vector<double> out(static_cast<std::size_t>(h_) * w_, 0.0);
    if (window_ == SsimWindow::global) {
      const double v = g[0] / static_cast<double>(out.size());
      std::fill(out.begin(), out.end(), v);
      return out;
    }
    const int n = SsimConfig::kWindowSize;
    std::vector<double> tmp(static_cast<std::size_t>(h_) * ow_, 0.0);
    for (int r = 0; r < oh_; ++r)
      for (int c = 0; c < ow_; ++c)
        for (int t = 0; t < n; ++t) tmp[(r + t) * ow_ + c] += k_[t] * g[r * ow_ + c];
    for (int r = 0; r < h_; ++r)
      for (int c = 0; c < ow_; ++c)
        for (int t = 0; t < n; ++t) out[r * w_ + c + t] += k_[t] * tmp[r * ow_ + c];
    return out;
  }

 private:
  SsimWindow window_;
  int h_, w_, oh_ = 0, ow_ = 0;
  std::vector<double> k_;
};

inline constexpr double kLumaWeights[3] = {0.299, 0.587, 0.114};

/// Splits an HxWx3 image into planes according to the channel mode.
inline std::vector<Plane> planes_of(const float* px, int h, int w, ChannelMode mode) {
  const std::size_t n = static_cast<std::size_t>(h) * w;
  if (mode == ChannelMode::luminance_only) {
    Plane p{h, w, std::vector<double>(n)};
    for (std::size_t i = 0; i < n; ++i)
      p.v[i] = kLumaWeights[0] * px[3 * i] + kLumaWeights[1] * px[3 * i + 1] + kLumaWeights[2] * px[3 * i + 2];
    return {std::move(p)};
  }
  std::vector<Plane> out(3, Plane{h, w, std::vector<double>(n)});
  for (std::size_t i = 0; i < n; ++i)
    for (int c = 0; c < 3; ++c) out[c].v[i] = px[3 * i + c];
  return out;
}

inline void check_range(const float* px, std::size_t n, double range) {
  for (std::size_t i = 0; i < n; ++i)
    if (!(px[i] >= 0.0f && px[i] <= range))
      fail(ErrorCode::out_of_range, "SSIM input value outside [0, L]: " + std::to_string(px[i]));
}

struct PlaneStats {
  std::vector<double> mx, my, vx, vy, cxy;
};

inline PlaneStats plane_stats(const LocalMean& win, const Plane& x, const Plane& y) {
  const std::size_t n = x.v.size();
  std::vector<double> xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    xx[i] = x.v[i] * x.v[i];
    yy[i] = y.v[i] * y.v[i];
    xy[i] = x.v[i] * y.v[i];
  }
  PlaneStats s{win.apply(x.v), win.apply(y.v), win.apply(xx), win.apply(yy), win.apply(xy)};
  for (std::size_t i = 0; i < s.mx.size(); ++i) {
    s.vx[i] -= s.mx[i] * s.mx[i];
    s.vy[i] -= s.my[i] * s.my[i];
    s.cxy[i] -= s.mx[i] * s.my[i];
  }
  return s;
}

/// SSIM of one plane pair; optionally accumulates scale * dSSIM/dy into grad_y.
inline double plane_ssim(const LocalMean& win, const Plane& x, const Plane& y, double c1, double c2,
                         std::vector<double>* grad_y, double scale) {
  const PlaneStats st = plane_stats(win, x, y);
  const std::size_t m = st.mx.size();
  double total = 0;
  std::vector<double> g_my, g_yy, g_xy;
  if (grad_y) g_my.resize(m), g_yy.resize(m), g_xy.resize(m);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double a1 = 2 * st.mx[i] * st.my[i] + c1;
    const double a2 = 2 * st.cxy[i] + c2;
    const double b1 = st.mx[i] * st.mx[i] + st.my[i] * st.my[i] + c1;
    const double b2 = st.vx[i] + st.vy[i] + c2;
    const double s = (a1 * a2) / (b1 * b2);
    total += s;
    if (grad_y) {
      // Partials with respect to the raw moments E[y], E[y^2], E[xy].
      const double d_cxy = 2 * s / a2;
      const double d_vy = -s / b2;
      const double d_my = s * (2 * st.mx[i] / a1 - 2 * st.my[i] / b1);
      g_xy[i] = scale * inv_m * d_cxy;
      g_yy[i] = scale * inv_m * d_vy;
      g_my[i] = scale * inv_m * (d_my - d_cxy * st.mx[i] - 2 * d_vy * st.my[i]);
    }
  }
  if (grad_y) {
    const auto a_my = win.adjoint(g_my);
    const auto a_yy = win.adjoint(g_yy);
    const auto a_xy = win.adjoint(g_xy);
    for (std::size_t p = 0; p < y.v.size(); ++p)
      (*grad_y)[p] += a_my[p] + 2 * y.v[p] * a_yy[p] + x.v[p] * a_xy[p];
  }
  return total * inv_m;
}

inline void check_pair(const Tensor& x, const Tensor& y, const SsimConfig& cfg) {
  cfg.validate();
  require(x.rank() == 3 && x.dim(2) == 3, ErrorCode::shape_mismatch,
          "ssim: expected an (H, W, 3) image, got " + shape_str(x.shape()));
  require(x.shape() == y.shape(), ErrorCode::shape_mismatch,
          "ssim: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  check_range(x.data(), x.size(), cfg.dynamic_range);
  check_range(y.data(), y.size(), cfg.dynamic_range);
}

/// SSIM of two HxWx3 images given as raw pixel pointers (already validated).
inline double image_ssim(const float* x, const float* y, int h, int w, const SsimConfig& cfg, float* grad_y = nullptr,
                         double grad_scale = 1.0) {
  const LocalMean win(cfg.window, h, w);
  const auto px = planes_of(x, h, w, cfg.channel_mode);
  const auto py = planes_of(y, h, w, cfg.channel_mode);
  const double per_plane = 1.0 / static_cast<double>(px.size());
  double total = 0;
  std::vector<double> g;
  for (std::size_t c = 0; c < px.size(); ++c) {
    if (grad_y) g.assign(px[c].v.size(), 0.0);
    total += plane_ssim(win, px[c], py[c], cfg.c1(), cfg.c2(), grad_y ? &g : nullptr, grad_scale * per_plane);
    if (grad_y) {
      const std::size_t n = g.size();
      if (cfg.channel_mode == ChannelMode::luminance_only) {
        for (std::size_t i = 0; i < n; ++i)
          for (int k = 0; k < 3; ++k) grad_y[3 * i + k] += static_cast<float>(kLumaWeights[k] * g[i]);
      } else {
        for (std::size_t i = 0; i < n; ++i) grad_y[3 * i + c] += static_cast<float>(g[i]);
      }
    }
  }
  return total * per_plane;
}

}  // namespace detail

/// SSIM between two (H, W, 3) images with values in [0, L].
inline double ssim(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {}) {
  detail::check_pair(x, y, cfg);
  return detail::image_ssim(x.data(), y.data(), x.dim(0), x.dim(1), cfg);
}

/// Per-window luminance, contrast and structure maps for every plane.
struct SsimComponentMaps {
  std::vector<std::vector<double>> luminance, contrast, structure, ssim;
};

struct SsimComponents {
  double luminance = 0, contrast = 0, structure = 0;
};

inline SsimComponentMaps ssim_component_maps(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {}) {
  detail::check_pair(x, y, cfg);
  const int h = x.dim(0), w = x.dim(1);
  const detail::LocalMean win(cfg.window, h, w);
  const auto px = detail::planes_of(x.data(), h, w, cfg.channel_mode);
  const auto py = detail::planes_of(y.data(), h, w, cfg.channel_mode);
  SsimComponentMaps out;
  const double c1 = cfg.c1(), c2 = cfg.c2(), c3 = cfg.c3();
  for (std::size_t c = 0; c < px.size(); ++c) {
    const auto st = detail::plane_stats(win, px[c], py[c]);
    const std::size_t m = st.mx.size();
    std::vector<double> l(m), con(m), s(m), full(m);
    for (std::size_t i = 0; i < m; ++i) {
      const double vx = std::max(st.vx[i], 0.0), vy = std::max(st.vy[i], 0.0);
      const double sx = std::sqrt(vx), sy = std::sqrt(vy);
      l[i] = (2 * st.mx[i] * st.my[i] + c1) / (st.mx[i] * st.mx[i] + st.my[i] * st.my[i] + c1);
      con[i] = (2 * sx * sy + c2) / (vx + vy + c2);
      s[i] = (st.cxy[i] + c3) / (sx * sy + c3);
      full[i] = l[i] * con[i] * s[i];
    }
    out.luminance.push_back(std::move(l));
    out.contrast.push_back(std::move(con));
    out.structure.push_back(std::move(s));
    out.ssim.push_back(std::move(full));
  }
  return out;
}

/// Mean luminance, contrast and structure factors. Their product equals ssim()
/// exactly when there is a single window position and a single plane (global
/// window with luminance_only); otherwise the identity holds per position, see
/// ssim_component_maps().
inline SsimComponents ssim_components(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {}) {
  const auto maps = ssim_component_maps(x, y, cfg);
  auto mean_of = [](const std::vector<std::vector<double>>& planes) {
    double s = 0;
    std::size_t n = 0;
    for (const auto& p : planes) {
      double ps = 0;
      for (double v : p) ps += v;
      s += ps / static_cast<double>(p.size());
      ++n;
    }
    return s / static_cast<double>(n);
  };
  return {mean_of(maps.luminance), mean_of(maps.contrast), mean_of(maps.structure)};
}

inline void check_batch_pair(const Tensor& x, const Tensor& y, const SsimConfig& cfg) {
  cfg.validate();
  require_images(x, "ssim batch");
  require(x.shape() == y.shape(), ErrorCode::shape_mismatch,
          "ssim batch: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  require(x.dim(0) > 0, ErrorCode::invalid_argument, "ssim batch: empty batch");
  detail::check_range(x.data(), x.size(), cfg.dynamic_range);
  detail::check_range(y.data(), y.size(), cfg.dynamic_range);
}

/// SSIM of each image pair in two (B, H, W, 3) batches.
inline std::vector<double> ssim_per_sample(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {}) {
  check_batch_pair(x, y, cfg);
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t stride = static_cast<std::size_t>(h) * w * 3;
  std::vector<double> out(b);
  for (int i = 0; i < b; ++i) out[i] = detail::image_ssim(x.data() + i * stride, y.data() + i * stride, h, w, cfg);
  return out;
}

inline double ssim_batch_mean(const Tensor& x, const Tensor& y, const SsimConfig& cfg = {}) {
  const auto v = ssim_per_sample(x, y, cfg);
  double s = 0;
  for (double d : v) s += d;
  return s / static_cast<double>(v.size());
}

/// Mean batch SSIM and its gradient with respect to `pred` (same shape as pred).
inline double ssim_batch_mean_grad(const Tensor& target, const Tensor& pred, Tensor& grad_pred,
                                   const SsimConfig& cfg = {}) {
  check_batch_pair(target, pred, cfg);
  const int b = target.dim(0), h = target.dim(1), w = target.dim(2);
  const std::size_t stride = static_cast<std::size_t>(h) * w * 3;
  grad_pred = Tensor(pred.shape());
  double s = 0;
  for (int i = 0; i < b; ++i)
    s += detail::image_ssim(target.data() + i * stride, pred.data() + i * stride, h, w, cfg,
                            grad_pred.data() + i * stride, 1.0 / b);
  return s / b;
}

// ---------------------------------------------------------------------------
// Decision rule

struct AuthResult {
  double rate = 0;
  int passed = 0;
  std::vector<bool> pass;
};

/// Fraction of samples whose SSIM degradation stays under the fault tolerance.
/// Relative mode: pass iff 1 - s_i / alpha0 < epsilon. Absolute: pass iff 1 - s_i < epsilon.
inline AuthResult auth_success_rate(std::span<const double> per_sample_ssim, double alpha0,
                                    const AuthDecisionConfig& cfg) {
  cfg.validate();
  require(alpha0 > 0, ErrorCode::invalid_argument, "alpha0 must be positive");
  require(!per_sample_ssim.empty(), ErrorCode::invalid_argument, "auth_success_rate: no samples");
  AuthResult r;
  r.pass.resize(per_sample_ssim.size());
  for (std::size_t i = 0; i < per_sample_ssim.size(); ++i) {
    const double drop = cfg.mode == DecisionMode::relative_to_alpha0 ? 1.0 - per_sample_ssim[i] / alpha0
                                                                    : 1.0 - per_sample_ssim[i];
    r.pass[i] = drop < cfg.epsilon;
    r.passed += r.pass[i] ? 1 : 0;
  }
  r.rate = static_cast<double>(r.passed) / static_cast<double>(per_sample_ssim.size());
  return r;
}

/// Confidence alpha = mean SSIM / alpha0.
inline double confidence(std::span<const double> per_sample_ssim, double alpha0) {
  require(alpha0 > 0, ErrorCode::invalid_argument, "alpha0 must be positive");
  require(!per_sample_ssim.empty(), ErrorCode::invalid_argument, "confidence: no samples");
  double s = 0;
  for (double v : per_sample_ssim) s += v;
  return s / static_cast<double>(per_sample_ssim.size()) / alpha0;
}

}  // namespace sslauth
