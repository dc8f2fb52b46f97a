#pragma once

// Verification network G: reconstructs key samples from encoder features. Its
// reconstructions of F(T) are the fragile watermark.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "sslauth/container.hpp"
#include "sslauth/data.hpp"
#include "sslauth/encoder.hpp"
#include "sslauth/error.hpp"
#include "sslauth/metrics.hpp"
#include "sslauth/nn/layers.hpp"
#include "sslauth/nn/optim.hpp"

namespace sslauth {

struct GeneratorArch {
  int input_dim = 512;  // encoder feature dimension d
  int width = 256;      // channels of the 4x4 seed; halved at each upsampling

  std::string id() const { return "gen32-d" + std::to_string(input_dim) + "-w" + std::to_string(width); }

  static GeneratorArch parse(const std::string& id) {
    GeneratorArch a;
    if (std::sscanf(id.c_str(), "gen32-d%d-w%d", &a.input_dim, &a.width) != 2 || a.input_dim < 1 || a.width < 4)
      fail(ErrorCode::config, "unknown generator architecture '" + id + "'");
    return a;
  }
};

/// d -> 4x4xW -> 8x8xW/2 -> 16x16xW/4 -> 32x32x3, sigmoid output.
inline nn::Sequential make_generator(const GeneratorArch& arch, std::uint64_t seed) {
  require(arch.width % 4 == 0, ErrorCode::config, "generator width must be a multiple of 4");
  Rng rng(seed);
  using namespace nn;
  const int w = arch.width;
  Sequential g;
  g.add("fc", std::make_unique<Linear>(arch.input_dim, 4 * 4 * w, rng))
      .add("fc_relu", std::make_unique<ReLU>())
      .add("seed", std::make_unique<Reshape>(Shape{4, 4, w}))
      .add("up1", std::make_unique<ConvTranspose2d>(w, w / 2, 4, 2, 1, rng))
      .add("up1_relu", std::make_unique<ReLU>())
      .add("up2", std::make_unique<ConvTranspose2d>(w / 2, w / 4, 4, 2, 1, rng))
      .add("up2_relu", std::make_unique<ReLU>())
      .add("up3", std::make_unique<ConvTranspose2d>(w / 4, 3, 4, 2, 1, rng, 0.5f))
      .add("out", std::make_unique<Sigmoid>());
  return g;
}

enum class LrSchedule { constant, cosine };

inline const char* to_string(LrSchedule s) { return s == LrSchedule::constant ? "constant" : "cosine"; }

inline LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  fail(ErrorCode::config, "unknown learning-rate schedule '" + s + "'");
}

struct VerifierTrainConfig {
  int epochs = 1000;
  double learning_rate = 1e-3;
  LrSchedule schedule = LrSchedule::constant;  // cosine: decays to 0 at the last epoch
  std::uint64_t seed = 0;
  int width = 256;
  double whitening_reg = 0.1;  // added to the covariance eigenvalues, relative to their mean
  SsimConfig ssim;

  void validate() const {
    require(epochs >= 1, ErrorCode::config, "verifier training needs epochs >= 1");
    require(learning_rate > 0, ErrorCode::config, "learning rate must be positive");
    require(whitening_reg > 0, ErrorCode::config, "whitening regulariser must be positive");
    ssim.validate();
  }
};

struct WatermarkRecord {
  GeneratorArch arch;
  nn::Sequential generator;
  double alpha0 = 0;
  std::string key_digest;
  std::string encoder_fingerprint;
  std::string encoder_arch;
  SsimConfig ssim;
  std::string created_at;
  std::vector<double> train_log;  // loss 1 - mean SSIM after each epoch's update
  // Fixed input whitening (f - input_mean) * input_whiten, computed once from F(T).
  Tensor input_mean;    // (d)
  Tensor input_whiten;  // (d, d)

  Tensor standardize(const Tensor& feats) const {
    require(feats.rank() == 2 && feats.dim(1) == arch.input_dim, ErrorCode::shape_mismatch,
            "reconstruct: expected features (B, " + std::to_string(arch.input_dim) + "), got " +
                shape_str(feats.shape()));
    using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const int b = feats.dim(0), d = arch.input_dim;
    Tensor z({b, d});
    Eigen::Map<const RowMat> f(feats.data(), b, d), w(input_whiten.data(), d, d);
    Eigen::Map<const Eigen::RowVectorXf> mu(input_mean.data(), d);
    Eigen::Map<RowMat>(z.data(), b, d).noalias() = (f.rowwise() - mu) * w;
    return z;
  }

  /// G(feats) for a (B, d) batch; images in [0, 1]. Safe to call concurrently.
  Tensor reconstruct(const Tensor& feats) const {
    nn::Sequential g = generator;
    return g.forward(standardize(feats));
  }

  /// SSIM of every key sample against its reconstruction from `feats`.
  std::vector<double> per_sample_ssim(const Tensor& key_images, const Tensor& feats) const {
    return ssim_per_sample(key_images, reconstruct(feats), ssim);
  }

  Container to_container() const {
    Container c;
    c.meta = {{"kind", "watermark"},
              {"generator_arch", arch.id()},
              {"alpha0", alpha0},
              {"key_digest", key_digest},
              {"encoder_fingerprint", encoder_fingerprint},
              {"encoder_arch", encoder_arch},
              {"ssim_config", ssim},
              {"created_at", created_at}};
    for (const auto& p : const_cast<nn::Sequential&>(generator).parameters()) c.put("generator/" + p.name, p.param->value);
    c.put("input/mean", input_mean);
    c.put("input/whiten", input_whiten);
    c.put_f64("alpha0", {alpha0});
    c.put_f64("train_log", train_log);
    return c;
  }

  static WatermarkRecord from_container(const Container& c) {
    require(c.meta.value("kind", "") == "watermark", ErrorCode::parse, "container does not hold a watermark record");
    WatermarkRecord r;
    try {
      r.arch = GeneratorArch::parse(c.meta.at("generator_arch").get<std::string>());
      r.key_digest = c.meta.at("key_digest").get<std::string>();
      r.encoder_fingerprint = c.meta.at("encoder_fingerprint").get<std::string>();
      r.encoder_arch = c.meta.at("encoder_arch").get<std::string>();
      r.ssim = c.meta.at("ssim_config").get<SsimConfig>();
      r.created_at = c.meta.at("created_at").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::parse, std::string("malformed watermark header: ") + e.what());
    }
    const auto a0 = c.f64("alpha0");
    require(a0.size() == 1, ErrorCode::parse, "watermark alpha0 must be a scalar");
    r.alpha0 = a0[0];  // the JSON copy is informational; the binary copy is exact
    require(r.alpha0 > 0 && r.alpha0 <= 1, ErrorCode::parse, "watermark alpha0 outside (0, 1]");
    r.train_log = c.f64("train_log");
    r.input_mean = c.tensor("input/mean");
    require(r.input_mean.shape() == Shape{r.arch.input_dim}, ErrorCode::parse, "watermark input mean has wrong shape");
    r.input_whiten = c.tensor("input/whiten");
    require(r.input_whiten.shape() == (Shape{r.arch.input_dim, r.arch.input_dim}), ErrorCode::parse,
            "watermark whitening matrix has wrong shape");
    r.generator = make_generator(r.arch, 0);
    for (auto& p : r.generator.parameters()) {
      const auto key = "generator/" + p.name;
      require(c.has(key), ErrorCode::parse, "watermark lacks generator parameter '" + key + "'");
      Tensor t = c.tensor(key);
      require(t.shape() == p.param->value.shape(), ErrorCode::parse, "generator shape mismatch for '" + key + "'");
      p.param->value = std::move(t);
    }
    return r;
  }
};

namespace detail {

/// ZCA whitening of the rows of `x`: W = U (L + reg * mean(L))^-1/2 U^T, rescaled so the
/// whitened rows have unit RMS. Returns (mean, W).
inline std::pair<Tensor, Tensor> zca_whitening(const Tensor& x, double reg) {
  const int n = x.dim(0), d = x.dim(1);
  Eigen::MatrixXd m(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) m(i, j) = x[static_cast<std::size_t>(i) * d + j];
  const Eigen::RowVectorXd mu = m.colwise().mean();
  m.rowwise() -= mu;
  const Eigen::MatrixXd cov = m.transpose() * m / n;
  const double floor = reg * std::max(cov.trace() / d, 1e-12);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  const Eigen::VectorXd inv = (es.eigenvalues().array().max(0.0) + floor).rsqrt();
  Eigen::MatrixXd w = es.eigenvectors() * inv.asDiagonal() * es.eigenvectors().transpose();
  const double rms = std::sqrt((m * w).squaredNorm() / (double(n) * d));
  if (rms > 1e-12) w /= rms;
  Tensor mean({d}), white({d, d});
  for (int j = 0; j < d; ++j) mean[j] = static_cast<float>(mu(j));
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) white[static_cast<std::size_t>(i) * d + j] = static_cast<float>(w(i, j));
  return {mean, white};
}

}  // namespace detail

/// Trains G on the fixed features F(T) to minimise 1 - mean SSIM(T, G(F(T))).
/// The encoder is only read.
inline WatermarkRecord train_verifier(const EncoderModel& enc, const KeySampleSet& ks, const VerifierTrainConfig& cfg,
                                      const std::function<void(int, double)>& on_epoch = {}) {
  cfg.validate();
  require(ks.size() > 0, ErrorCode::invalid_argument, "train_verifier: empty key sample set");
  require(ks.digest_valid(), ErrorCode::tamper, "train_verifier: key sample digest mismatch");
  WatermarkRecord rec;
  rec.arch = {enc.feature_dim(), cfg.width};
  rec.generator = make_generator(rec.arch, cfg.seed ^ 0x6e4e7a70ULL);
  rec.key_digest = ks.digest;
  rec.encoder_fingerprint = enc.fingerprint();
  rec.encoder_arch = enc.arch_id();
  rec.ssim = cfg.ssim;

  const Tensor raw = enc.encode(ks.images);
  std::tie(rec.input_mean, rec.input_whiten) = detail::zca_whitening(raw, cfg.whitening_reg);
  const Tensor feats = rec.standardize(raw);
  nn::Adam opt(rec.generator.parameters(), {.learning_rate = cfg.learning_rate});
  auto record = [&](int epoch, double mean_ssim) {
    const double loss = 1.0 - mean_ssim;
    require(std::isfinite(loss), ErrorCode::numeric,
            "verifier loss became non-finite at epoch " + std::to_string(epoch) + "; lower the learning rate");
    if (epoch > 0) {
      rec.train_log.push_back(loss);
      if (on_epoch) on_epoch(epoch, loss);
    }
  };
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.schedule == LrSchedule::cosine)
      opt.set_learning_rate(cfg.learning_rate * 0.5 * (1 + std::cos(M_PI * epoch / cfg.epochs)));
    opt.zero_grad();
    const Tensor g = rec.generator.forward(feats);
    for (float v : g.vec())
      require(std::isfinite(v), ErrorCode::numeric,
              "verifier output became non-finite at epoch " + std::to_string(epoch) + "; lower the learning rate");
    Tensor grad;
    const double s = ssim_batch_mean_grad(ks.images, g, grad, cfg.ssim);
    record(epoch, s);
    for (auto& v : grad.vec()) v = -v;  // d(1 - SSIM)
    rec.generator.backward(grad);
    opt.step();
  }
  rec.alpha0 = ssim_batch_mean(ks.images, rec.reconstruct(raw), cfg.ssim);
  record(cfg.epochs, rec.alpha0);
  require(rec.alpha0 > 0, ErrorCode::numeric, "verifier reached non-positive alpha0; training failed");
  rec.created_at = utc_timestamp();
  require(enc.fingerprint() == rec.encoder_fingerprint, ErrorCode::binding, "encoder changed during verifier training");
  return rec;
}

inline void save_watermark(const WatermarkRecord& rec, const std::filesystem::path& path) { rec.to_container().write(path); }

/// Loads a record and, when given, checks its binding to an encoder and key set.
/// With both present, alpha0 is recomputed and must match within 1e-6.
inline WatermarkRecord load_watermark(const std::filesystem::path& path, const EncoderModel* enc = nullptr,
                                      const KeySampleSet* ks = nullptr) {
  WatermarkRecord rec = WatermarkRecord::from_container(Container::read(path));
  if (enc) {
    require(enc->fingerprint() == rec.encoder_fingerprint, ErrorCode::binding,
            "watermark is bound to encoder " + rec.encoder_fingerprint.substr(0, 12) + ", not " +
                enc->fingerprint().substr(0, 12));
  }
  if (ks) {
    require(ks->digest == rec.key_digest && ks->digest_valid(), ErrorCode::binding,
            "watermark is bound to a different key sample set");
  }
  if (enc && ks) {
    const double a = ssim_batch_mean(ks->images, rec.reconstruct(enc->encode(ks->images)), rec.ssim);
    require(std::abs(a - rec.alpha0) <= 1e-6, ErrorCode::binding,
            "recomputed alpha0 " + std::to_string(a) + " differs from recorded " + std::to_string(rec.alpha0));
  }
  return rec;
}

}  // namespace sslauth
