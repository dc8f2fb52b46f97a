#pragma once

// Dataset ingestion, preprocessing and key-sample selection.
//
// Supported datasets:
//   tinytoy   bundled 2-class synthetic shapes (200 train / 200 test images)
//   toy10     bundled 10-class synthetic shapes, a stand-in when CIFAR-10 is absent
//   cifar10   CIFAR-10 binary batches under <root>/cifar-10-batches-bin/
//   stl10     STL-10 binary files under <root>/stl10_binary/ (96x96, resized to 32x32)
//   any other name: pre-converted container <root>/<name>/<split>.ssa with arrays
//             "images" (B, H, W, 3) f32 in [0,1] and "labels" i64 (e.g. svhn, gtsrb)

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "sslauth/container.hpp"
#include "sslauth/error.hpp"
#include "sslauth/hash.hpp"
#include "sslauth/random.hpp"
#include "sslauth/tensor.hpp"

namespace sslauth {

inline constexpr int kImageSize = 32;

enum class Split { train, test, unlabeled };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::unlabeled: return "unlabeled";
  }
  return "?";
}

inline Split split_from_string(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "test") return Split::test;
  if (s == "unlabeled") return Split::unlabeled;
  fail(ErrorCode::config, "unknown split '" + s + "'");
}

struct Dataset {
  std::string name;
  Split split = Split::train;
  Tensor images;            // (B, 32, 32, 3) in [0, 1]
  std::vector<int> labels;  // empty for unlabeled splits
  int num_classes = 0;

  int size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  bool labeled() const { return !labels.empty(); }

  Dataset subset(std::span<const int> rows) const {
    Dataset d{name, split, images.gather(rows), {}, num_classes};
    if (labeled())
      for (int r : rows) d.labels.push_back(labels[r]);
    return d;
  }
};

struct LoadOptions {
  /// Keep at most this many images per class (0 keeps everything), in file order.
  int max_per_class = 0;
  /// Restrict to these class ids (empty keeps all).
  std::vector<int> classes;
  /// Size of the synthetic train split (toy10 only; 0 uses the default).
  int synthetic_train_size = 0;
};

// ---------------------------------------------------------------------------
// Resizing

namespace detail {

/// 1D antialiased linear resampling weights (triangle filter widened by the downscale factor).
struct ResampleTap {
  int first = 0;
  std::vector<double> w;
};

inline std::vector<ResampleTap> resample_taps(int in, int out) {
  const double scale = static_cast<double>(in) / out;
  const double support = std::max(1.0, scale);
  std::vector<ResampleTap> taps(out);
  for (int o = 0; o < out; ++o) {
    const double center = (o + 0.5) * scale;
    const int lo = std::max(0, static_cast<int>(std::floor(center - support)));
    const int hi = std::min(in - 1, static_cast<int>(std::ceil(center + support)));
    double sum = 0;
    taps[o].first = lo;
    for (int i = lo; i <= hi; ++i) {
      const double x = (i + 0.5 - center) / support;
      const double w = std::max(0.0, 1.0 - std::abs(x));
      taps[o].w.push_back(w);
      sum += w;
    }
    for (double& w : taps[o].w) w /= sum;
  }
  return taps;
}

}  // namespace detail

/// Antialiased bilinear resize of one (H, W, 3) image stored at `src`.
inline void resize_image(const float* src, int h, int w, float* dst, int oh, int ow) {
  const auto ty = detail::resample_taps(h, oh);
  const auto tx = detail::resample_taps(w, ow);
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow * 3, 0.0);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < ow; ++c)
      for (std::size_t k = 0; k < tx[c].w.size(); ++k)
        for (int ch = 0; ch < 3; ++ch)
          tmp[(r * ow + c) * 3 + ch] += tx[c].w[k] * src[(r * w + tx[c].first + static_cast<int>(k)) * 3 + ch];
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c)
      for (int ch = 0; ch < 3; ++ch) {
        double s = 0;
        for (std::size_t k = 0; k < ty[r].w.size(); ++k)
          s += ty[r].w[k] * tmp[((ty[r].first + static_cast<int>(k)) * ow + c) * 3 + ch];
        dst[(r * ow + c) * 3 + ch] = static_cast<float>(std::clamp(s, 0.0, 1.0));
      }
}

inline Tensor resize_batch(const Tensor& x, int oh, int ow) {
  require_images(x, "resize");
  if (x.dim(1) == oh && x.dim(2) == ow) return x;
  const int b = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({b, oh, ow, 3});
  for (int i = 0; i < b; ++i)
    resize_image(x.data() + static_cast<std::size_t>(i) * h * w * 3, h, w,
                 out.data() + static_cast<std::size_t>(i) * oh * ow * 3, oh, ow);
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

namespace detail {

using Rgb = std::array<float, 3>;

inline Rgb random_color(Rng& rng) {
  return {static_cast<float>(rng.uniform(0.1, 1.0)), static_cast<float>(rng.uniform(0.1, 1.0)),
          static_cast<float>(rng.uniform(0.1, 1.0))};
}

/// Shape membership for class `cls` at offset (dx, dy) from the centre, radius r, rotation th.
inline bool shape_contains(int cls, double dx, double dy, double r, double th) {
  const double cs = std::cos(th), sn = std::sin(th);
  const double u = cs * dx + sn * dy, v = -sn * dx + cs * dy;
  const double d = std::sqrt(dx * dx + dy * dy);
  switch (cls) {
    case 0: return d <= r;                                                     // disc
    case 1: return std::abs(u) <= r * 0.85 && std::abs(v) <= r * 0.85;          // square
    case 2: return v <= r * 0.6 && v >= -r * 0.9 + 1.6 * std::abs(u);          // triangle
    case 3: return (std::abs(u) <= r * 0.3 && std::abs(v) <= r) || (std::abs(v) <= r * 0.3 && std::abs(u) <= r);
    case 4: return d <= r && d >= r * 0.55;                                    // ring
    case 5: return std::abs(u) <= r && std::abs(v) <= r && static_cast<int>(std::floor((v + r) / (r / 2.5))) % 2 == 0;
    case 6: return std::abs(u) + std::abs(v) <= r;                             // diamond
    case 7: return std::abs(u) <= r && std::abs(v) <= r &&
                   (static_cast<int>(std::floor((u + r) / (r / 2))) + static_cast<int>(std::floor((v + r) / (r / 2)))) % 2 == 0;
    case 8: return std::abs(std::abs(u) - std::abs(v)) <= r * 0.25 && std::abs(u) <= r;  // X
    case 9: return std::abs(v) <= r * 0.35 && std::abs(u) <= r;               // bar
    default: return false;
  }
}

/// One synthetic image: coloured shape over a noisy gradient background.
inline void render_shape(int cls, Rng& rng, float* px) {
  const Rgb fg = random_color(rng);
  auto luma = [](const Rgb& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; };
  auto contrasting = [&] {
    Rgb c = random_color(rng);
    while (std::abs(luma(c) - luma(fg)) < 0.3) c = random_color(rng);
    return c;
  };
  const Rgb bg0 = contrasting(), bg1 = contrasting();
  const double r = rng.uniform(8.0, 13.0);
  const double cx = rng.uniform(r * 0.7, kImageSize - r * 0.7), cy = rng.uniform(r * 0.7, kImageSize - r * 0.7);
  const double th = rng.uniform(0.0, 2 * M_PI);
  const double noise = rng.uniform(0.03, 0.12);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      const double t = (x + y) / (2.0 * (kImageSize - 1));
      const bool in = shape_contains(cls, x + 0.5 - cx, y + 0.5 - cy, r, th);
      for (int c = 0; c < 3; ++c) {
        double v = in ? fg[c] : (1 - t) * bg0[c] + t * bg1[c];
        v += noise * (rng.uniform() - 0.5) * 2;
        px[(y * kImageSize + x) * 3 + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
}

inline Dataset synthetic_shapes(const std::string& name, Split split, const std::vector<int>& shape_ids, int per_class,
                                std::uint64_t seed) {
  const int classes = static_cast<int>(shape_ids.size());
  Dataset ds{name, split, Tensor({classes * per_class, kImageSize, kImageSize, 3}), {}, classes};
  Rng rng(seed);
  const std::size_t stride = kImageSize * kImageSize * 3;
  // Interleaved class order so any prefix is balanced.
  for (int i = 0; i < classes * per_class; ++i) {
    const int cls = i % classes;
    render_shape(shape_ids[cls], rng, ds.images.data() + i * stride);
    ds.labels.push_back(cls);
  }
  return ds;
}

inline std::vector<unsigned char> read_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) fail(ErrorCode::not_found, "dataset file not found: " + p.string());
  return std::vector<unsigned char>((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

inline Dataset load_cifar10(const std::filesystem::path& root, Split split) {
  require(split != Split::unlabeled, ErrorCode::config, "cifar10 has no unlabeled split");
  const auto dir = root / "cifar-10-batches-bin";
  std::vector<std::string> files;
  if (split == Split::train)
    for (int i = 1; i <= 5; ++i) files.push_back("data_batch_" + std::to_string(i) + ".bin");
  else
    files.push_back("test_batch.bin");
  constexpr std::size_t record = 1 + 3072;
  FloatBuffer px;
  std::vector<int> labels;
  for (const auto& f : files) {
    const auto bytes = read_bytes(dir / f);
    require(!bytes.empty() && bytes.size() % record == 0, ErrorCode::parse, "corrupt CIFAR-10 batch: " + f);
    for (std::size_t off = 0; off < bytes.size(); off += record) {
      const int label = bytes[off];
      require(label < 10, ErrorCode::parse, "CIFAR-10 label out of range in " + f);
      labels.push_back(label);
      for (int p = 0; p < 1024; ++p)
        for (int c = 0; c < 3; ++c) px.push_back(bytes[off + 1 + c * 1024 + p] / 255.0f);
    }
  }
  const int n = static_cast<int>(labels.size());
  return {"cifar10", split, Tensor({n, 32, 32, 3}, std::move(px)), std::move(labels), 10};
}

inline Dataset load_stl10(const std::filesystem::path& root, Split split) {
  const auto dir = root / "stl10_binary";
  const std::string stem = split == Split::train ? "train" : split == Split::test ? "test" : "unlabeled";
  const auto xb = read_bytes(dir / (stem + "_X.bin"));
  constexpr int side = 96;
  constexpr std::size_t per = side * side * 3;
  require(!xb.empty() && xb.size() % per == 0, ErrorCode::parse, "corrupt STL-10 image file");
  const int n = static_cast<int>(xb.size() / per);
  Tensor big({1, side, side, 3});
  Tensor out({n, kImageSize, kImageSize, 3});
  for (int i = 0; i < n; ++i) {
    // Stored channel-major, column-major within a channel.
    for (int c = 0; c < 3; ++c)
      for (int x = 0; x < side; ++x)
        for (int y = 0; y < side; ++y)
          big[(y * side + x) * 3 + c] = xb[i * per + c * side * side + x * side + y] / 255.0f;
    resize_image(big.data(), side, side, out.data() + static_cast<std::size_t>(i) * kImageSize * kImageSize * 3,
                 kImageSize, kImageSize);
  }
  Dataset ds{"stl10", split, std::move(out), {}, 10};
  if (split != Split::unlabeled) {
    const auto yb = read_bytes(dir / (stem + "_y.bin"));
    require(static_cast<int>(yb.size()) == n, ErrorCode::parse, "STL-10 label count mismatch");
    for (unsigned char v : yb) {
      require(v >= 1 && v <= 10, ErrorCode::parse, "STL-10 label out of range");
      ds.labels.push_back(v - 1);
    }
  }
  return ds;
}

inline Dataset load_converted(const std::string& name, const std::filesystem::path& root, Split split) {
  const auto path = root / name / (std::string(to_string(split)) + ".ssa");
  if (!std::filesystem::exists(path))
    fail(ErrorCode::not_found, "unknown dataset '" + name + "' (no converted container at " + path.string() + ")");
  const Container c = Container::read(path);
  Dataset ds{name, split, resize_batch(c.tensor("images"), kImageSize, kImageSize), {}, 0};
  if (c.has("labels")) {
    for (auto v : c.i64("labels")) ds.labels.push_back(static_cast<int>(v));
    require(static_cast<int>(ds.labels.size()) == ds.size(), ErrorCode::parse, "label count mismatch in " + path.string());
    ds.num_classes = c.meta.value("num_classes", 0);
    for (int l : ds.labels) ds.num_classes = std::max(ds.num_classes, l + 1);
  }
  return ds;
}

inline void check_dataset(const Dataset& ds) {
  require_images(ds.images, "dataset");
  require(ds.images.dim(1) == kImageSize && ds.images.dim(2) == kImageSize, ErrorCode::shape_mismatch,
          "dataset images must be 32x32x3");
  for (float v : ds.images.vec())
    require(v >= 0.0f && v <= 1.0f, ErrorCode::out_of_range, "dataset pixel outside [0, 1]");
  for (int l : ds.labels)
    require(l >= 0 && l < ds.num_classes, ErrorCode::out_of_range, "dataset label outside [0, num_classes)");
}

}  // namespace detail

/// Root directory for dataset files: SSLAUTH_DATA_ROOT wins over the given path.
inline std::filesystem::path resolve_data_root(const std::filesystem::path& root = {}) {
  if (const char* env = std::getenv("SSLAUTH_DATA_ROOT"); env && *env) return env;
  return root.empty() ? std::filesystem::path("data") : root;
}

inline Dataset restrict_dataset(Dataset ds, const LoadOptions& opt) {
  if (opt.classes.empty() && opt.max_per_class <= 0) return ds;
  require(ds.labeled(), ErrorCode::config, "class filtering needs a labeled split");
  std::map<int, int> remap, seen;
  for (std::size_t i = 0; i < opt.classes.size(); ++i) {
    require(opt.classes[i] >= 0 && opt.classes[i] < ds.num_classes, ErrorCode::config, "class filter id out of range");
    remap[opt.classes[i]] = static_cast<int>(i);
  }
  std::vector<int> rows;
  for (int i = 0; i < ds.size(); ++i) {
    const int l = ds.labels[i];
    if (!opt.classes.empty() && !remap.count(l)) continue;
    if (opt.max_per_class > 0 && seen[l] >= opt.max_per_class) continue;
    ++seen[l];
    rows.push_back(i);
  }
  Dataset out = ds.subset(rows);
  if (!opt.classes.empty()) {
    for (int& l : out.labels) l = remap[l];
    out.num_classes = static_cast<int>(opt.classes.size());
  }
  return out;
}

/// Loads a dataset split, normalised to [0, 1] and resized to 32x32x3, in deterministic order.
inline Dataset load_dataset(const std::string& name, Split split, const std::filesystem::path& root = {},
                            const LoadOptions& opt = {}) {
  Dataset ds;
  if (name == "tinytoy") {
    require(split != Split::unlabeled, ErrorCode::config, "tinytoy has no unlabeled split");
    ds = detail::synthetic_shapes("tinytoy", split, {0, 7}, 100, split == Split::train ? 0x7e57ULL : 0x7e58ULL);
  } else if (name == "toy10") {
    require(split != Split::unlabeled, ErrorCode::config, "toy10 has no unlabeled split");
    const int per = split == Split::train ? (opt.synthetic_train_size > 0 ? opt.synthetic_train_size / 10 : 60) : 30;
    ds = detail::synthetic_shapes("toy10", split, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9}, per,
                                  split == Split::train ? 0x10a1ULL : 0x10a2ULL);
  } else {
    const auto r = resolve_data_root(root);
    if (name == "cifar10") ds = detail::load_cifar10(r, split);
    else if (name == "stl10") ds = detail::load_stl10(r, split);
    else ds = detail::load_converted(name, r, split);
  }
  ds = restrict_dataset(std::move(ds), opt);
  detail::check_dataset(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// Key samples

inline std::string image_digest(const Tensor& images) {
  Sha256 h;
  h.update("sslauth.images.v1");
  for (int d : images.shape()) h.update_u64(static_cast<std::uint64_t>(d));
  h.update(images.span());
  return h.hex();
}

struct KeySampleSet {
  Tensor images;  // (C * N, 32, 32, 3), class-major
  std::vector<int> class_ids;
  std::vector<int> source_indices;
  std::string source_dataset;
  std::uint64_t selection_seed = 0;
  int classes = 0;
  int per_class = 0;
  std::string digest;

  int size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  bool digest_valid() const { return image_digest(images) == digest; }

  std::map<int, int> class_histogram() const {
    std::map<int, int> h;
    for (int c : class_ids) ++h[c];
    return h;
  }
};

/// N uniformly random samples (without replacement) from each of C randomly chosen classes.
inline KeySampleSet select_key_samples(const Dataset& ds, int classes, int per_class, std::uint64_t seed) {
  require(ds.labeled(), ErrorCode::invalid_argument, "key-sample selection needs a labeled dataset");
  require(classes >= 1 && per_class >= 1, ErrorCode::invalid_argument, "C and N must be at least 1");
  std::vector<std::vector<int>> by_class(ds.num_classes);
  for (int i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);
  std::vector<int> available;
  for (int c = 0; c < ds.num_classes; ++c)
    if (!by_class[c].empty()) available.push_back(c);
  require(classes <= static_cast<int>(available.size()), ErrorCode::invalid_argument,
          "C = " + std::to_string(classes) + " exceeds the " + std::to_string(available.size()) + " available classes");
  Rng rng(seed);
  rng.shuffle(available);
  std::vector<int> chosen(available.begin(), available.begin() + classes);
  std::sort(chosen.begin(), chosen.end());

  KeySampleSet ks;
  for (int c : chosen) {
    auto pool = by_class[c];
    require(static_cast<int>(pool.size()) >= per_class, ErrorCode::invalid_argument,
            "class " + std::to_string(c) + " has only " + std::to_string(pool.size()) + " samples, need " +
                std::to_string(per_class));
    // Partial Fisher-Yates.
    for (int k = 0; k < per_class; ++k) {
      const auto j = k + static_cast<int>(rng.below(pool.size() - k));
      std::swap(pool[k], pool[j]);
      ks.source_indices.push_back(pool[k]);
      ks.class_ids.push_back(c);
    }
  }
  ks.images = ds.images.gather(ks.source_indices);
  ks.source_dataset = ds.name;
  ks.selection_seed = seed;
  ks.classes = classes;
  ks.per_class = per_class;
  ks.digest = image_digest(ks.images);
  return ks;
}

inline Container key_samples_container(const KeySampleSet& ks) {
  Container c;
  c.meta = {{"kind", "key_samples"}, {"source_dataset", ks.source_dataset}, {"selection_seed", ks.selection_seed},
            {"C", ks.classes}, {"N", ks.per_class}, {"digest", ks.digest}};
  c.put("images", ks.images);
  c.put_i64("class_ids", {ks.class_ids.begin(), ks.class_ids.end()});
  c.put_i64("source_indices", {ks.source_indices.begin(), ks.source_indices.end()});
  return c;
}

inline KeySampleSet key_samples_from_container(const Container& c) {
  require(c.meta.value("kind", "") == "key_samples", ErrorCode::parse, "container does not hold key samples");
  KeySampleSet ks;
  ks.images = c.tensor("images");
  for (auto v : c.i64("class_ids")) ks.class_ids.push_back(static_cast<int>(v));
  for (auto v : c.i64("source_indices")) ks.source_indices.push_back(static_cast<int>(v));
  ks.source_dataset = c.meta.at("source_dataset").get<std::string>();
  ks.selection_seed = c.meta.at("selection_seed").get<std::uint64_t>();
  ks.classes = c.meta.at("C").get<int>();
  ks.per_class = c.meta.at("N").get<int>();
  ks.digest = c.meta.at("digest").get<std::string>();
  if (!ks.digest_valid()) fail(ErrorCode::tamper, "key-sample digest mismatch: images were modified");
  return ks;
}

inline void save_key_samples(const KeySampleSet& ks, const std::filesystem::path& path) {
  require(ks.digest_valid(), ErrorCode::tamper, "refusing to save key samples whose digest does not match");
  key_samples_container(ks).write(path);
}

inline KeySampleSet load_key_samples(const std::filesystem::path& path) {
  return key_samples_from_container(Container::read(path));
}

}  // namespace sslauth
