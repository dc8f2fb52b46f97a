#pragma once

// Encoder modifications used to exercise the fragile watermark: fine-tuning all
// layers, magnitude pruning with masked retraining, and a single-target backdoor.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "sslauth/container.hpp"
#include "sslauth/data.hpp"
#include "sslauth/encoder.hpp"
#include "sslauth/error.hpp"
#include "sslauth/metrics.hpp"

namespace sslauth {

enum class AttackKind { finetune_ftal, prune_retrain, backdoor };

inline const char* to_string(AttackKind k) {
  switch (k) {
    case AttackKind::finetune_ftal: return "finetune_ftal";
    case AttackKind::prune_retrain: return "prune_retrain";
    case AttackKind::backdoor: return "backdoor";
  }
  return "unknown";
}

inline AttackKind attack_kind_from_string(const std::string& s) {
  if (s == "finetune_ftal" || s == "finetune" || s == "ftal") return AttackKind::finetune_ftal;
  if (s == "prune_retrain" || s == "prune") return AttackKind::prune_retrain;
  if (s == "backdoor") return AttackKind::backdoor;
  fail(ErrorCode::config, "unknown attack kind '" + s + "'");
}

/// A modified encoder together with what the attack measured about itself.
struct AttackResult {
  EncoderModel encoder;
  json metrics = json::object();
};

// ---------------------------------------------------------------------------
// Fine-tuning all layers

struct FinetuneConfig {
  int epochs = 1;
  double learning_rate = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

/// Continues the contrastive objective on `ds` for every layer. Zero epochs returns
/// an unchanged copy.
inline AttackResult finetune_ftal(const EncoderModel& enc, const Dataset& ds, const FinetuneConfig& cfg) {
  require(cfg.learning_rate > 0, ErrorCode::config, "fine-tuning learning rate must be positive");
  require(cfg.epochs >= 0, ErrorCode::config, "fine-tuning epochs must be >= 0");
  AttackResult out{enc};
  out.metrics = {{"epochs", cfg.epochs}, {"learning_rate", cfg.learning_rate}};
  if (cfg.epochs == 0) return out;
  ContrastiveTrainConfig tc;
  tc.epochs = cfg.epochs;
  tc.batch_size = cfg.batch_size;
  tc.learning_rate = cfg.learning_rate;
  tc.seed = cfg.seed;
  out.metrics["loss_history"] = contrastive_epochs(out.encoder, ds, tc);
  return out;
}

// ---------------------------------------------------------------------------
// Magnitude pruning

struct PruneConfig {
  double rate = 0.2;
  int retrain_epochs = 1;
  double learning_rate = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 0;
};

struct LayerMask {
  std::string name;
  std::vector<std::size_t> zeroed;  // pruned positions, ascending
  std::size_t total = 0;
};

/// Zeroes the floor(rate * n) smallest-magnitude weights of every prunable backbone
/// tensor (ties broken by position). Biases and normalisation parameters are kept.
inline std::vector<LayerMask> magnitude_prune(EncoderModel& enc, double rate) {
  require(rate > 0 && rate <= 0.99, ErrorCode::config, "prune rate must lie in (0, 0.99]");
  std::vector<LayerMask> masks;
  for (auto& p : enc.backbone_parameters()) {
    if (!p.param->prunable) continue;
    Tensor& w = p.param->value;
    const std::size_t n = w.size();
    const auto k = static_cast<std::size_t>(std::floor(rate * static_cast<double>(n)));
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    auto by_mag = [&](std::size_t a, std::size_t b) {
      const float ma = std::abs(w[a]), mb = std::abs(w[b]);
      return ma < mb || (ma == mb && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), by_mag);
    LayerMask m{p.name, std::vector<std::size_t>(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k)), n};
    std::sort(m.zeroed.begin(), m.zeroed.end());
    for (std::size_t i : m.zeroed) w[i] = 0.0f;
    masks.push_back(std::move(m));
  }
  return masks;
}

inline void apply_masks(EncoderModel& enc, const std::vector<LayerMask>& masks) {
  auto params = enc.backbone_parameters();
  for (const auto& m : masks)
    for (auto& p : params)
      if (p.name == m.name)
        for (std::size_t i : m.zeroed) p.param->value[i] = 0.0f;
}

/// Prunes, then retrains with the masks re-applied after every optimizer step.
inline AttackResult prune_retrain(const EncoderModel& enc, const Dataset& ds, const PruneConfig& cfg) {
  require(cfg.retrain_epochs >= 0, ErrorCode::config, "retrain epochs must be >= 0");
  AttackResult out{enc};
  const auto masks = magnitude_prune(out.encoder, cfg.rate);
  if (cfg.retrain_epochs > 0) {
    ContrastiveTrainConfig tc;
    tc.epochs = cfg.retrain_epochs;
    tc.batch_size = cfg.batch_size;
    tc.learning_rate = cfg.learning_rate;
    tc.seed = cfg.seed;
    out.metrics["loss_history"] = contrastive_epochs(out.encoder, ds, tc, [&] { apply_masks(out.encoder, masks); });
  }
  json layers = json::array();
  auto params = out.encoder.backbone_parameters();
  for (const auto& m : masks) {
    std::size_t zeros_at_mask = 0;
    for (auto& p : params)
      if (p.name == m.name)
        for (std::size_t i : m.zeroed) zeros_at_mask += p.param->value[i] == 0.0f;
    layers.push_back({{"name", m.name},
                      {"total", m.total},
                      {"pruned", m.zeroed.size()},
                      {"zero_at_mask", zeros_at_mask},
                      {"sparsity", static_cast<double>(m.zeroed.size()) / static_cast<double>(m.total)}});
  }
  out.metrics["rate"] = cfg.rate;
  out.metrics["retrain_epochs"] = cfg.retrain_epochs;
  out.metrics["layers"] = layers;
  out.metrics["exempt"] = "biases and normalisation parameters are not pruned";
  return out;
}

// ---------------------------------------------------------------------------
// Backdoor injection

struct TriggerPatch {
  Tensor pattern;  // (h, w, 3) in [0, 1]
  int x = 0, y = 0;
  Tensor reference_inputs;  // (R, 32, 32, 3) images of the target class

  void validate() const {
    require(pattern.rank() == 3 && pattern.dim(2) == 3, ErrorCode::shape_mismatch, "trigger pattern must be (h, w, 3)");
    require(x >= 0 && y >= 0 && x + pattern.dim(1) <= kImageSize && y + pattern.dim(0) <= kImageSize,
            ErrorCode::out_of_range, "trigger patch does not fit inside the image");
    require(reference_inputs.rank() == 4 && reference_inputs.dim(0) > 0, ErrorCode::invalid_argument,
            "trigger needs at least one reference input");
    require_images(reference_inputs, "trigger references");
  }

  /// Copies `images` with the pattern pasted at (x, y).
  Tensor stamp(const Tensor& images) const {
    Tensor out = images;
    const int ph = pattern.dim(0), pw = pattern.dim(1);
    const std::size_t stride = images.row_size();
    for (int n = 0; n < images.dim(0); ++n)
      for (int r = 0; r < ph; ++r)
        for (int c = 0; c < pw; ++c)
          for (int ch = 0; ch < 3; ++ch)
            out[n * stride + ((y + r) * kImageSize + (x + c)) * 3 + ch] = pattern[(r * pw + c) * 3 + ch];
    return out;
  }

  /// A 4x4 black/white checker in the bottom-right corner; references are the first
  /// `refs` images of `target_class` in `ds`.
  static TriggerPatch corner_checker(const Dataset& ds, int target_class, int refs = 8) {
    TriggerPatch t;
    t.pattern = Tensor({4, 4, 3});
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c)
        for (int ch = 0; ch < 3; ++ch) t.pattern[(r * 4 + c) * 3 + ch] = (r + c) % 2 ? 1.0f : 0.0f;
    t.x = t.y = kImageSize - 5;
    std::vector<int> rows;
    for (int i = 0; i < ds.size() && static_cast<int>(rows.size()) < refs; ++i)
      if (ds.labels.at(i) == target_class) rows.push_back(i);
    require(!rows.empty(), ErrorCode::invalid_argument, "no reference images for the target class");
    t.reference_inputs = ds.images.gather(rows);
    return t;
  }
};

struct BackdoorConfig {
  int epochs = 3;
  double learning_rate = 1e-3;
  int batch_size = 32;
  double utility_weight = 1.0;  // lambda: weight of the clean-feature term
  double holdout_fraction = 0.2;
  std::uint64_t seed = 0;
};

namespace detail {

/// Adds d(-w * cos(a, b)) to ga and gb.
inline double neg_cos_grad(const float* a, const float* b, int d, double w, float* ga, float* gb) {
  double ab = 0, aa = 0, bb = 0;
  for (int k = 0; k < d; ++k) {
    ab += double(a[k]) * b[k];
    aa += double(a[k]) * a[k];
    bb += double(b[k]) * b[k];
  }
  const double na = std::max(std::sqrt(aa), 1e-12), nb = std::max(std::sqrt(bb), 1e-12);
  const double c = ab / (na * nb);
  for (int k = 0; k < d; ++k) {
    if (ga) ga[k] -= static_cast<float>(w * (b[k] / (na * nb) - c * a[k] / (na * na)));
    if (gb) gb[k] -= static_cast<float>(w * (a[k] / (na * nb) - c * b[k] / (nb * nb)));
  }
  return -w * c;
}

/// Mean cosine over all (row of a, row of b) pairs.
inline double mean_pairwise_cos(const Tensor& a, const Tensor& b) {
  const int d = a.dim(1);
  double s = 0;
  for (int i = 0; i < a.dim(0); ++i)
    for (int j = 0; j < b.dim(0); ++j)
      s += cosine_similarity(std::span<const float>(a.data() + static_cast<std::size_t>(i) * d, d),
                             std::span<const float>(b.data() + static_cast<std::size_t>(j) * d, d));
  return s / (double(a.dim(0)) * b.dim(0));
}

}  // namespace detail

/// Simplified BadEncoder. Per batch the loss is
///   -mean cos(F'(x + t), F'(r)) - mean cos(F'(r), F(r)) - lambda * mean cos(F'(x), F(x))
/// over shadow images x, trigger t and reference images r; F is the original encoder.
/// Metrics are measured on a held-out part of the shadow set.
inline AttackResult inject_backdoor(const EncoderModel& enc, const Dataset& shadow, const TriggerPatch& trigger,
                                    const BackdoorConfig& cfg) {
  require(shadow.size() >= 2, ErrorCode::invalid_argument, "backdoor injection needs a non-empty shadow set");
  trigger.validate();
  require(cfg.epochs >= 0 && cfg.learning_rate > 0 && cfg.batch_size >= 1, ErrorCode::config,
          "invalid backdoor configuration");
  Rng rng(cfg.seed);
  auto order = rng.permutation(shadow.size());
  const int held = std::clamp(static_cast<int>(shadow.size() * cfg.holdout_fraction), 1, shadow.size() - 1);
  const std::vector<int> held_rows(order.begin(), order.begin() + held);
  const std::vector<int> train_rows(order.begin() + held, order.end());
  const Tensor train_x = shadow.images.gather(train_rows);
  const Tensor held_x = shadow.images.gather(held_rows);

  const Tensor clean_train = enc.encode(train_x);
  const Tensor clean_refs = enc.encode(trigger.reference_inputs);
  AttackResult out{enc};
  EncoderModel& bad = out.encoder;
  nn::Adam opt(bad.backbone_parameters(), {.learning_rate = cfg.learning_rate});
  const int d = enc.feature_dim(), nr = trigger.reference_inputs.dim(0);
  std::vector<double> history;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto perm = rng.permutation(train_x.dim(0));
    double total = 0;
    int steps = 0;
    for (int s = 0; s < train_x.dim(0); s += cfg.batch_size) {
      const int b = std::min(cfg.batch_size, train_x.dim(0) - s);
      const std::span<const int> rows(perm.data() + s, b);
      const Tensor x = train_x.gather(rows);
      const Tensor xt = trigger.stamp(x);
      const Tensor views = concat({&xt, &trigger.reference_inputs, &x});
      opt.zero_grad();
      const Tensor h = bad.backbone().forward(views);
      Tensor gh(h.shape());
      auto row = [&](const Tensor& t, int i) { return t.data() + static_cast<std::size_t>(i) * d; };
      auto grow = [&](int i) { return gh.data() + static_cast<std::size_t>(i) * d; };
      double loss = 0;
      for (int i = 0; i < b; ++i)
        for (int j = 0; j < nr; ++j)
          loss += detail::neg_cos_grad(row(h, i), row(h, b + j), d, 1.0 / (b * nr), grow(i), grow(b + j));
      for (int j = 0; j < nr; ++j)
        loss += detail::neg_cos_grad(row(h, b + j), row(clean_refs, j), d, 1.0 / nr, grow(b + j), nullptr);
      for (int i = 0; i < b; ++i)
        loss += detail::neg_cos_grad(row(h, b + nr + i), row(clean_train, rows[i]), d, cfg.utility_weight / b,
                                     grow(b + nr + i), nullptr);
      require(std::isfinite(loss), ErrorCode::numeric, "backdoor loss is not finite");
      bad.backbone().backward(gh);
      opt.step();
      total += loss;
      ++steps;
    }
    history.push_back(total / std::max(steps, 1));
  }

  // Effectiveness on held-out images. Clean alignment is the same measure without the
  // trigger; the gap between the two is what the trigger adds.
  const Tensor stamped = trigger.stamp(held_x);
  const double before = detail::mean_pairwise_cos(enc.encode(stamped), clean_refs);
  const Tensor bad_refs = bad.encode(trigger.reference_inputs);
  const double alignment = detail::mean_pairwise_cos(bad.encode(stamped), bad_refs);
  const double clean_alignment = detail::mean_pairwise_cos(bad.encode(held_x), bad_refs);
  const auto utility = rowwise_cosine(bad.encode(held_x), enc.encode(held_x));
  out.metrics = {{"epochs", cfg.epochs},
                 {"loss_history", history},
                 {"trigger_alignment", alignment},
                 {"trigger_alignment_before", before},
                 {"clean_alignment", clean_alignment},
                 {"clean_utility", std::accumulate(utility.begin(), utility.end(), 0.0) / utility.size()},
                 {"heldout_images", held}};
  return out;
}

// ---------------------------------------------------------------------------
// Attack specs, as they appear in manifests

struct AttackSpec {
  std::string name;
  AttackKind kind = AttackKind::finetune_ftal;
  json params = json::object();
  std::uint64_t seed = 0;

  void validate() const {
    switch (kind) {
      case AttackKind::finetune_ftal:
        require(params.value("epochs", 1) >= 0, ErrorCode::config, name + ": epochs must be >= 0");
        break;
      case AttackKind::prune_retrain: {
        const double r = params.value("rate", 0.2);
        require(r >= 0 && r <= 0.99, ErrorCode::config, name + ": prune rate must lie in [0, 0.99]");
        require(params.value("retrain_epochs", 1) >= 0, ErrorCode::config, name + ": epochs must be >= 0");
        break;
      }
      case AttackKind::backdoor:
        require(params.value("epochs", 3) >= 0, ErrorCode::config, name + ": epochs must be >= 0");
        break;
    }
  }

  json to_json() const { return {{"name", name}, {"kind", to_string(kind)}, {"params", params}, {"seed", seed}}; }
};

/// Runs one attack. `ds` is the attacker's data (fine-tune corpus, retraining set or
/// shadow set); for backdoors the target class is params.target_class (default 0).
inline AttackResult run_attack(const AttackSpec& spec, const EncoderModel& enc, const Dataset& ds) {
  spec.validate();
  const json& p = spec.params;
  AttackResult r{enc};
  switch (spec.kind) {
    case AttackKind::finetune_ftal:
      r = finetune_ftal(enc, ds,
                        {p.value("epochs", 1), p.value("learning_rate", 1e-3), p.value("batch_size", 32), spec.seed});
      break;
    case AttackKind::prune_retrain: {
      const double rate = p.value("rate", 0.2);
      if (rate == 0) {
        r.metrics = {{"rate", 0.0}};
        break;
      }
      r = prune_retrain(enc, ds,
                        {rate, p.value("retrain_epochs", 1), p.value("learning_rate", 1e-3), p.value("batch_size", 32),
                         spec.seed});
      break;
    }
    case AttackKind::backdoor: {
      const auto trigger = TriggerPatch::corner_checker(ds, p.value("target_class", 0), p.value("references", 8));
      BackdoorConfig bc;
      bc.epochs = p.value("epochs", 3);
      bc.learning_rate = p.value("learning_rate", 1e-3);
      bc.batch_size = p.value("batch_size", 32);
      bc.utility_weight = p.value("utility_weight", 1.0);
      bc.seed = spec.seed;
      r = inject_backdoor(enc, ds, trigger, bc);
      break;
    }
  }
  r.metrics["attack"] = spec.to_json();
  r.metrics["fingerprint_before"] = enc.fingerprint();
  r.metrics["fingerprint_after"] = r.encoder.fingerprint();
  return r;
}

}  // namespace sslauth
