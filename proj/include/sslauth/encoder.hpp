#pragma once

// Protected encoders: a compact residual backbone trained with SimCLR.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "sslauth/container.hpp"
#include "sslauth/data.hpp"
#include "sslauth/error.hpp"
#include "sslauth/hash.hpp"
#include "sslauth/nn/layers.hpp"
#include "sslauth/nn/optim.hpp"
#include "sslauth/random.hpp"

namespace sslauth {

struct EncoderArch {
  int width = 16;         // channels of the first stage; doubled at each downsampling
  int feature_dim = 512;  // d

  std::string id() const { return "sslresnet8-w" + std::to_string(width) + "-d" + std::to_string(feature_dim); }

  static EncoderArch parse(const std::string& id) {
    EncoderArch a;
    if (std::sscanf(id.c_str(), "sslresnet8-w%d-d%d", &a.width, &a.feature_dim) != 2 || a.width < 1 ||
        a.feature_dim < 1)
      fail(ErrorCode::config, "unknown encoder architecture '" + id + "'");
    return a;
  }
};

class EncoderModel {
 public:
  static constexpr int kProjectionHidden = 256;
  static constexpr int kProjectionDim = 128;

  /// Freshly initialised encoder (backbone plus SimCLR projection head).
  static EncoderModel create(const EncoderArch& arch, std::uint64_t seed) {
    EncoderModel m;
    m.arch_ = arch;
    Rng rng(seed);
    using namespace nn;
    const int w = arch.width;
    auto groups = [](int c) { return std::max(1, c / 8); };
    m.backbone_.add("stem", std::make_unique<Conv2d>(3, w, 3, 1, 1, rng))
        .add("stem_norm", std::make_unique<GroupNorm>(w, groups(w)))
        .add("stem_relu", std::make_unique<ReLU>())
        .add("stage1", std::make_unique<ResidualBlock>(w, rng))
        .add("down1", std::make_unique<Conv2d>(w, 2 * w, 3, 2, 1, rng))
        .add("down1_norm", std::make_unique<GroupNorm>(2 * w, groups(2 * w)))
        .add("down1_relu", std::make_unique<ReLU>())
        .add("stage2", std::make_unique<ResidualBlock>(2 * w, rng))
        .add("down2", std::make_unique<Conv2d>(2 * w, 4 * w, 3, 2, 1, rng))
        .add("down2_norm", std::make_unique<GroupNorm>(4 * w, groups(4 * w)))
        .add("down2_relu", std::make_unique<ReLU>())
        .add("stage3", std::make_unique<ResidualBlock>(4 * w, rng))
        .add("expand", std::make_unique<Conv2d>(4 * w, arch.feature_dim, 1, 1, 0, rng))
        .add("expand_relu", std::make_unique<ReLU>())
        .add("pool", std::make_unique<GlobalAvgPool>());
    m.head_.add("fc1", std::make_unique<Linear>(arch.feature_dim, kProjectionHidden, rng))
        .add("bn1", std::make_unique<BatchNorm1d>(kProjectionHidden))
        .add("relu", std::make_unique<ReLU>())
        .add("fc2", std::make_unique<Linear>(kProjectionHidden, kProjectionDim, rng));
    return m;
  }

  const EncoderArch& arch() const { return arch_; }
  std::string arch_id() const { return arch_.id(); }
  int feature_dim() const { return arch_.feature_dim; }

  nn::Sequential& backbone() { return backbone_; }
  nn::Sequential& head() { return head_; }
  nn::ParamList backbone_parameters() { return backbone_.parameters(); }

  /// SHA-256 over every backbone parameter (name, shape, bytes) in canonical order.
  std::string fingerprint() const {
    Sha256 h;
    h.update("sslauth.encoder.v1");
    h.update(arch_.id());
    for (const auto& p : const_cast<nn::Sequential&>(backbone_).parameters()) {
      h.update(p.name);
      for (int d : p.param->value.shape()) h.update_u64(static_cast<std::uint64_t>(d));
      h.update(p.param->value.span());
    }
    return h.hex();
  }

  /// Features F(X) for a (B, 32, 32, 3) batch in [0, 1]. Runs on a private copy of
  /// the backbone, so concurrent calls on one model are safe.
  Tensor encode(const Tensor& x, int chunk = 64) const {
    require_images(x, "encode");
    require(x.dim(1) == kImageSize && x.dim(2) == kImageSize, ErrorCode::shape_mismatch,
            "encode: expected 32x32 images, got " + shape_str(x.shape()));
    for (float v : x.vec())
      require(v >= 0.0f && v <= 1.0f, ErrorCode::out_of_range, "encode: pixel outside [0, 1]");
    nn::Sequential net = backbone_;
    const int b = x.dim(0), d = arch_.feature_dim;
    Tensor out({b, d});
    for (int s = 0; s < b; s += chunk) {
      const int e = std::min(b, s + chunk);
      const Tensor f = net.forward(x.slice(s, e));
      std::copy(f.data(), f.data() + f.size(), out.data() + static_cast<std::size_t>(s) * d);
    }
    return out;
  }

  Container to_container(const nlohmann::json& tags = nlohmann::json::object()) const {
    Container c;
    c.meta = {{"kind", "encoder"}, {"arch_id", arch_.id()}, {"feature_dim", arch_.feature_dim},
              {"fingerprint", fingerprint()}, {"tags", tags}};
    for (const auto& p : const_cast<nn::Sequential&>(backbone_).parameters()) c.put("backbone/" + p.name, p.param->value);
    for (const auto& p : const_cast<nn::Sequential&>(head_).parameters()) c.put("head/" + p.name, p.param->value);
    return c;
  }

  static EncoderModel from_container(const Container& c, const std::optional<std::string>& expected_arch = {}) {
    require(c.meta.value("kind", "") == "encoder", ErrorCode::parse, "container does not hold an encoder");
    const auto arch_id = c.meta.at("arch_id").get<std::string>();
    if (expected_arch && *expected_arch != arch_id)
      fail(ErrorCode::config, "encoder architecture mismatch: file has '" + arch_id + "', expected '" + *expected_arch + "'");
    EncoderModel m = create(EncoderArch::parse(arch_id), 0);
    auto load = [&](nn::Sequential& net, const std::string& prefix, bool required) {
      for (auto& p : net.parameters()) {
        const auto key = prefix + p.name;
        if (!c.has(key)) {
          require(!required, ErrorCode::parse, "encoder checkpoint lacks parameter '" + key + "'");
          continue;
        }
        Tensor t = c.tensor(key);
        require(t.shape() == p.param->value.shape(), ErrorCode::parse, "parameter shape mismatch for '" + key + "'");
        p.param->value = std::move(t);
      }
    };
    load(m.backbone_, "backbone/", true);
    load(m.head_, "head/", false);
    if (m.fingerprint() != c.meta.at("fingerprint").get<std::string>())
      fail(ErrorCode::tamper, "encoder fingerprint mismatch: parameters were modified");
    return m;
  }

 private:
  EncoderArch arch_;
  nn::Sequential backbone_;
  nn::Sequential head_;
};

inline void save_encoder(const EncoderModel& enc, const std::filesystem::path& path,
                         const nlohmann::json& tags = nlohmann::json::object()) {
  enc.to_container(tags).write(path);
}

inline EncoderModel load_encoder(const std::filesystem::path& path,
                                 const std::optional<std::string>& expected_arch = {}) {
  return EncoderModel::from_container(Container::read(path), expected_arch);
}

inline Tensor encode(const EncoderModel& enc, const Tensor& x) { return enc.encode(x); }

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentConfig {
  double crop_scale_min = 0.35;
  bool flip = true;
  double jitter_prob = 0.8;
  double jitter_strength = 0.8;  // brightness, contrast and saturation factors in [1 - s, 1 + s]
  double hue = 0.2;              // hue rotation of up to this fraction of a turn
  double grayscale_prob = 0.2;
};

namespace detail {

inline float bilinear_at(const float* img, double y, double x, int c) {
  y = std::clamp(y, 0.0, kImageSize - 1.0);
  x = std::clamp(x, 0.0, kImageSize - 1.0);
  const int y0 = static_cast<int>(y), x0 = static_cast<int>(x);
  const int y1 = std::min(y0 + 1, kImageSize - 1), x1 = std::min(x0 + 1, kImageSize - 1);
  const double fy = y - y0, fx = x - x0;
  auto at = [&](int yy, int xx) { return img[(yy * kImageSize + xx) * 3 + c]; };
  return static_cast<float>((1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) +
                            fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1)));
}

inline void augment_one(const float* src, float* dst, const AugmentConfig& cfg, Rng& rng) {
  constexpr int S = kImageSize;
  const double scale = rng.uniform(cfg.crop_scale_min, 1.0);
  const double ratio = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
  const double cw = std::min<double>(S, S * std::sqrt(scale * ratio));
  const double ch = std::min<double>(S, S * std::sqrt(scale / ratio));
  const double x0 = rng.uniform(0.0, S - cw), y0 = rng.uniform(0.0, S - ch);
  const bool flip = cfg.flip && rng.bernoulli(0.5);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const double sx = x0 + (x + 0.5) * cw / S - 0.5;
      const double sy = y0 + (y + 0.5) * ch / S - 0.5;
      const int ox = flip ? S - 1 - x : x;
      for (int c = 0; c < 3; ++c) dst[(y * S + ox) * 3 + c] = bilinear_at(src, sy, sx, c);
    }
  const int n = S * S;
  auto gray = [&](int i) { return 0.299f * dst[3 * i] + 0.587f * dst[3 * i + 1] + 0.114f * dst[3 * i + 2]; };
  if (rng.bernoulli(cfg.jitter_prob)) {
    const double s = cfg.jitter_strength;
    const float bright = static_cast<float>(rng.uniform(1 - s, 1 + s));
    const float contrast = static_cast<float>(rng.uniform(1 - s, 1 + s));
    const float sat = static_cast<float>(rng.uniform(1 - s, 1 + s));
    for (int i = 0; i < 3 * n; ++i) dst[i] = std::clamp(dst[i] * bright, 0.0f, 1.0f);
    double mean = 0;
    for (int i = 0; i < n; ++i) mean += gray(i);
    mean /= n;
    for (int i = 0; i < 3 * n; ++i)
      dst[i] = std::clamp(static_cast<float>(mean + contrast * (dst[i] - mean)), 0.0f, 1.0f);
    for (int i = 0; i < n; ++i) {
      const float g = gray(i);
      for (int c = 0; c < 3; ++c) dst[3 * i + c] = std::clamp(g + sat * (dst[3 * i + c] - g), 0.0f, 1.0f);
    }
    // Hue: rotate the chroma plane of YIQ.
    const double ang = 2 * M_PI * rng.uniform(-cfg.hue, cfg.hue);
    const float ca = static_cast<float>(std::cos(ang)), sa = static_cast<float>(std::sin(ang));
    for (int i = 0; i < n; ++i) {
      float* p = dst + 3 * i;
      const float yy = 0.299f * p[0] + 0.587f * p[1] + 0.114f * p[2];
      const float ii = 0.596f * p[0] - 0.274f * p[1] - 0.322f * p[2];
      const float qq = 0.211f * p[0] - 0.523f * p[1] + 0.312f * p[2];
      const float i2 = ca * ii - sa * qq, q2 = sa * ii + ca * qq;
      p[0] = std::clamp(yy + 0.956f * i2 + 0.621f * q2, 0.0f, 1.0f);
      p[1] = std::clamp(yy - 0.272f * i2 - 0.647f * q2, 0.0f, 1.0f);
      p[2] = std::clamp(yy - 1.106f * i2 + 1.703f * q2, 0.0f, 1.0f);
    }
  }
  if (rng.bernoulli(cfg.grayscale_prob))
    for (int i = 0; i < n; ++i) {
      const float g = gray(i);
      for (int c = 0; c < 3; ++c) dst[3 * i + c] = g;
    }
}

}  // namespace detail

inline Tensor augment_batch(const Tensor& x, const AugmentConfig& cfg, Rng& rng) {
  Tensor out(x.shape());
  const std::size_t stride = x.row_size();
  for (int i = 0; i < x.dim(0); ++i) detail::augment_one(x.data() + i * stride, out.data() + i * stride, cfg, rng);
  return out;
}

// ---------------------------------------------------------------------------
// Contrastive objective

/// NT-Xent over 2B projections where rows i and i + B are positives. Returns the
/// mean loss and writes dLoss/dz.
inline double nt_xent(const Tensor& z, double temperature, Tensor& grad) {
  require(z.rank() == 2 && z.dim(0) % 2 == 0 && z.dim(0) >= 2, ErrorCode::shape_mismatch,
          "nt_xent expects (2B, p) projections");
  const int n = z.dim(0), p = z.dim(1), half = n / 2;
  using Mat = Eigen::MatrixXd;
  Mat zd = nn::as_matrix(z, n, p).cast<double>();
  Eigen::VectorXd norms = zd.rowwise().norm().cwiseMax(1e-12);
  Mat u = norms.cwiseInverse().asDiagonal() * zd;
  Mat s = (u * u.transpose()) / temperature;
  Mat ds = Mat::Zero(n, n);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    const int pos = i < half ? i + half : i - half;
    double mx = -1e300;
    for (int k = 0; k < n; ++k)
      if (k != i) mx = std::max(mx, s(i, k));
    double denom = 0;
    for (int k = 0; k < n; ++k)
      if (k != i) denom += std::exp(s(i, k) - mx);
    loss += -s(i, pos) + mx + std::log(denom);
    for (int k = 0; k < n; ++k)
      if (k != i) ds(i, k) = std::exp(s(i, k) - mx) / denom / n;
    ds(i, pos) -= 1.0 / n;
  }
  Mat du = ((ds + ds.transpose()) * u) / temperature;
  Mat dz(n, p);
  for (int i = 0; i < n; ++i) {
    const double proj = u.row(i).dot(du.row(i));
    dz.row(i) = (du.row(i) - proj * u.row(i)) / norms(i);
  }
  grad = Tensor({n, p});
  nn::as_matrix(grad, n, p) = dz.cast<float>();
  return loss / n;
}

struct ContrastiveTrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double temperature = 0.5;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const {
    require(epochs >= 1, ErrorCode::config, "contrastive training needs epochs >= 1");
    require(temperature > 0, ErrorCode::config, "temperature must be positive");
    require(batch_size >= 2, ErrorCode::config, "batch_size must be at least 2");
    require(learning_rate > 0, ErrorCode::config, "learning rate must be positive");
  }
};

/// Continues the contrastive objective on `enc` in place. `after_step`, when set, runs
/// after every optimizer update (used to keep pruned weights at zero). Returns the
/// mean loss of each epoch.
inline std::vector<double> contrastive_epochs(EncoderModel& enc, const Dataset& ds, const ContrastiveTrainConfig& cfg,
                                              const std::function<void()>& after_step = {}) {
  require(ds.size() >= 2, ErrorCode::invalid_argument, "contrastive training needs at least two images");
  Rng rng(cfg.seed);
  nn::ParamList params = enc.backbone().parameters();
  for (auto& p : enc.head().parameters()) params.push_back(p);
  nn::Adam opt(params, {.learning_rate = cfg.learning_rate});
  std::vector<double> history;
  const int bs = std::min(cfg.batch_size, ds.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = rng.permutation(ds.size());
    double total = 0;
    int steps = 0;
    for (int s = 0; s + 2 <= ds.size(); s += bs) {
      const int e = std::min(ds.size(), s + bs);
      if (e - s < 2) break;
      const Tensor batch = ds.images.gather(std::span<const int>(order.data() + s, e - s));
      const Tensor a = augment_batch(batch, cfg.augment, rng);
      const Tensor b = augment_batch(batch, cfg.augment, rng);
      const Tensor views = concat({&a, &b});
      opt.zero_grad();
      const Tensor h = enc.backbone().forward(views);
      const Tensor z = enc.head().forward(h);
      Tensor gz;
      const double loss = nt_xent(z, cfg.temperature, gz);
      require(std::isfinite(loss), ErrorCode::numeric, "contrastive loss is not finite");
      enc.backbone().backward(enc.head().backward(gz));
      opt.step();
      if (after_step) after_step();
      total += loss;
      ++steps;
    }
    history.push_back(steps ? total / steps : 0.0);
  }
  return history;
}

/// Trains a fresh encoder with SimCLR on the (label-free) images of `ds`.
inline EncoderModel train_contrastive_encoder(const Dataset& ds, const ContrastiveTrainConfig& cfg,
                                              const EncoderArch& arch = {}, std::vector<double>* loss_history = nullptr) {
  cfg.validate();
  require(ds.size() > 0, ErrorCode::invalid_argument, "cannot train an encoder on an empty dataset");
  EncoderModel enc = EncoderModel::create(arch, cfg.seed ^ 0xe1c0de5ULL);
  auto hist = contrastive_epochs(enc, ds, cfg);
  if (loss_history) *loss_history = std::move(hist);
  return enc;
}

}  // namespace sslauth
