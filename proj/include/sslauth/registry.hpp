#pragma once

// Third-party registry: stores watermark records with their key samples, runs the
// challenge-response protocol and keeps verification reports.

#include <fcntl.h>
#include <openssl/rand.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include "sslauth/container.hpp"
#include "sslauth/data.hpp"
#include "sslauth/metrics.hpp"
#include "sslauth/watermark.hpp"

namespace sslauth {

inline const std::vector<double>& standard_epsilons() {
  static const std::vector<double> e{0.0, 0.1, 0.2, 0.3};
  return e;
}

struct RegistryEntry {
  std::string entry_id;
  std::string owner_id;
  std::string created_at;
  WatermarkRecord record;
  KeySampleSet key_samples;
  std::optional<Tensor> reference_features;  // F(T); only present when baseline mode was enabled
};

struct VerificationChallenge {
  std::string entry_id;
  std::string nonce;
  Tensor images;
  std::vector<int> indices;  // rows of T sent; all of them unless subset mode was asked for
};

struct VerificationResponse {
  std::string entry_id;
  std::string nonce;
  Tensor features;
  std::string claimed_fingerprint;  // informational, the server cannot check it
};

struct VerifyOptions {
  AuthDecisionConfig decision;        // epsilon 0.10, relative mode
  double pass_threshold = 1.0;        // verified iff r >= threshold at decision.epsilon
  std::vector<double> extra_epsilons;  // reported next to the standard grid
  bool baseline = false;
  json tags = json::object();  // copied into the report metadata

  void validate() const {
    decision.validate();
    require(pass_threshold >= 0 && pass_threshold <= 1, ErrorCode::config, "pass threshold must lie in [0, 1]");
    for (double e : extra_epsilons) AuthDecisionConfig{e, decision.mode}.validate();
  }

  std::vector<double> epsilon_grid() const {
    std::vector<double> g = standard_epsilons();
    g.insert(g.end(), extra_epsilons.begin(), extra_epsilons.end());
    g.push_back(decision.epsilon);
    std::sort(g.begin(), g.end());
    g.erase(std::unique(g.begin(), g.end()), g.end());
    return g;
  }
};

enum class Verdict { verified, tampered };

inline const char* to_string(Verdict v) { return v == Verdict::verified ? "verified" : "tampered"; }

struct EpsilonRate {
  double epsilon = 0;
  double r = 0;
  int passed = 0;
};

struct BaselineSection {
  std::vector<double> per_sample_cosine;
  double mean_cosine = 0;
  double confidence_percent = 0;
  std::vector<EpsilonRate> r_by_epsilon;
  Verdict verdict = Verdict::tampered;
};

struct VerificationReport {
  std::string report_id;
  std::string entry_id;
  std::string created_at;
  std::vector<int> sample_indices;
  std::vector<double> per_sample_ssim;
  double alpha0 = 0;
  double alpha = 0;
  DecisionMode mode = DecisionMode::relative_to_alpha0;
  double epsilon = 0;
  double pass_threshold = 1;
  std::vector<EpsilonRate> r_by_epsilon;
  Verdict verdict = Verdict::tampered;
  std::optional<BaselineSection> baseline;
  json metadata = json::object();

  double rate_at(double eps) const {
    for (const auto& e : r_by_epsilon)
      if (e.epsilon == eps) return e.r;
    fail(ErrorCode::not_found, "report has no rate for epsilon " + std::to_string(eps));
  }

  /// With `volatile_fields` false the report id and timestamp are left out, so repeated
  /// verifications of the same response compare equal.
  json to_json(bool volatile_fields = true) const {
    auto rates = [](const std::vector<EpsilonRate>& v) {
      json a = json::array();
      for (const auto& e : v) a.push_back({{"epsilon", e.epsilon}, {"r", e.r}, {"passed", e.passed}});
      return a;
    };
    json j = {{"entry_id", entry_id},
              {"sample_indices", sample_indices},
              {"per_sample_ssim", per_sample_ssim},
              {"alpha0", alpha0},
              {"alpha", alpha},
              {"decision_mode", to_string(mode)},
              {"epsilon", epsilon},
              {"pass_threshold", pass_threshold},
              {"r_by_epsilon", rates(r_by_epsilon)},
              {"verdict", to_string(verdict)},
              {"metadata", metadata}};
    if (baseline) {
      j["baseline_cosine"] = {{"per_sample_cosine", baseline->per_sample_cosine},
                              {"mean_cosine", baseline->mean_cosine},
                              {"confidence_percent", baseline->confidence_percent},
                              {"r_by_epsilon", rates(baseline->r_by_epsilon)},
                              {"verdict", to_string(baseline->verdict)}};
    } else {
      j["baseline_cosine"] = nullptr;
    }
    if (volatile_fields) {
      j["report_id"] = report_id;
      j["created_at"] = created_at;
    }
    return j;
  }

  static VerificationReport from_json(const json& j) {
    auto rates = [](const json& a) {
      std::vector<EpsilonRate> v;
      for (const auto& e : a) v.push_back({e.at("epsilon").get<double>(), e.at("r").get<double>(), e.at("passed").get<int>()});
      return v;
    };
    auto verdict_of = [](const json& v) { return v.get<std::string>() == "verified" ? Verdict::verified : Verdict::tampered; };
    VerificationReport r;
    try {
      r.report_id = j.value("report_id", "");
      r.entry_id = j.at("entry_id").get<std::string>();
      r.created_at = j.value("created_at", "");
      r.sample_indices = j.at("sample_indices").get<std::vector<int>>();
      r.per_sample_ssim = j.at("per_sample_ssim").get<std::vector<double>>();
      r.alpha0 = j.at("alpha0").get<double>();
      r.alpha = j.at("alpha").get<double>();
      r.mode = decision_mode_from_string(j.at("decision_mode").get<std::string>());
      r.epsilon = j.at("epsilon").get<double>();
      r.pass_threshold = j.at("pass_threshold").get<double>();
      r.r_by_epsilon = rates(j.at("r_by_epsilon"));
      r.verdict = verdict_of(j.at("verdict"));
      r.metadata = j.at("metadata");
      if (const auto& b = j.at("baseline_cosine"); !b.is_null()) {
        BaselineSection s;
        s.per_sample_cosine = b.at("per_sample_cosine").get<std::vector<double>>();
        s.mean_cosine = b.at("mean_cosine").get<double>();
        s.confidence_percent = b.at("confidence_percent").get<double>();
        s.r_by_epsilon = rates(b.at("r_by_epsilon"));
        s.verdict = verdict_of(b.at("verdict"));
        r.baseline = std::move(s);
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::parse, std::string("malformed report: ") + e.what());
    }
    return r;
  }

  /// Two tables: (method, epsilon, r) rows, then (sample, index, ssim[, cosine]) rows.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(17);
    os << "method,epsilon,r\n";
    for (const auto& e : r_by_epsilon) os << "ssl_auth," << e.epsilon << ',' << e.r << '\n';
    if (baseline)
      for (const auto& e : baseline->r_by_epsilon) os << "baseline," << e.epsilon << ',' << e.r << '\n';
    os << "\nsample,index,ssim" << (baseline ? ",cosine" : "") << '\n';
    for (std::size_t i = 0; i < per_sample_ssim.size(); ++i) {
      os << i << ',' << sample_indices[i] << ',' << per_sample_ssim[i];
      if (baseline) os << ',' << baseline->per_sample_cosine[i];
      os << '\n';
    }
    return os.str();
  }
};

/// Cosine comparison of suspect features against the registered F(T).
inline BaselineSection baseline_verify(const Tensor& reference, const Tensor& features, const VerifyOptions& opt) {
  opt.validate();
  require(!reference.empty(), ErrorCode::not_found, "baseline verification needs registered reference features");
  require(reference.shape() == features.shape(), ErrorCode::shape_mismatch,
          "baseline: reference " + shape_str(reference.shape()) + " vs response " + shape_str(features.shape()));
  BaselineSection b;
  b.per_sample_cosine = rowwise_cosine(reference, features);
  for (double c : b.per_sample_cosine) b.mean_cosine += c;
  b.mean_cosine /= static_cast<double>(b.per_sample_cosine.size());
  b.confidence_percent = cosine_percent(b.mean_cosine);
  auto rate = [&](double eps) {
    int passed = 0;
    for (double c : b.per_sample_cosine) passed += (1.0 - c < eps) ? 1 : 0;
    return EpsilonRate{eps, static_cast<double>(passed) / static_cast<double>(b.per_sample_cosine.size()), passed};
  };
  for (double e : opt.epsilon_grid()) b.r_by_epsilon.push_back(rate(e));
  b.verdict = rate(opt.decision.epsilon).r >= opt.pass_threshold ? Verdict::verified : Verdict::tampered;
  return b;
}

/// Pure verification of `features` = F'(T[indices]) against an entry. No registry state involved.
inline VerificationReport compute_report(const RegistryEntry& entry, const std::vector<int>& indices,
                                         const Tensor& features, const VerifyOptions& opt) {
  opt.validate();
  const auto& rec = entry.record;
  require(features.rank() == 2 && features.dim(0) == static_cast<int>(indices.size()) &&
              features.dim(1) == rec.arch.input_dim,
          ErrorCode::shape_mismatch,
          "response features must be (" + std::to_string(indices.size()) + ", " + std::to_string(rec.arch.input_dim) +
              "), got " + shape_str(features.shape()));
  for (float v : features.vec()) require(std::isfinite(v), ErrorCode::numeric, "response features contain NaN or Inf");

  VerificationReport r;
  r.entry_id = entry.entry_id;
  r.sample_indices = indices;
  r.per_sample_ssim = rec.per_sample_ssim(entry.key_samples.images.gather(indices), features);
  r.alpha0 = rec.alpha0;
  r.alpha = confidence(r.per_sample_ssim, rec.alpha0);
  r.mode = opt.decision.mode;
  r.epsilon = opt.decision.epsilon;
  r.pass_threshold = opt.pass_threshold;
  for (double e : opt.epsilon_grid()) {
    const auto a = auth_success_rate(r.per_sample_ssim, rec.alpha0, {e, opt.decision.mode});
    r.r_by_epsilon.push_back({e, a.rate, a.passed});
  }
  r.verdict = r.rate_at(r.epsilon) >= opt.pass_threshold ? Verdict::verified : Verdict::tampered;
  if (opt.baseline) {
    require(entry.reference_features.has_value(), ErrorCode::not_found,
            "entry " + entry.entry_id + " has no registered reference features; baseline mode was not enabled");
    r.baseline = baseline_verify(entry.reference_features->gather(indices), features, opt);
  }
  r.metadata = {{"registered_encoder_fingerprint", rec.encoder_fingerprint},
                {"encoder_arch", rec.encoder_arch},
                {"generator_arch", rec.arch.id()},
                {"key_digest", rec.key_digest},
                {"response_digest", Sha256().update(features.span()).hex()},
                {"ssim_config", rec.ssim},
                {"subset", indices.size() != static_cast<std::size_t>(entry.key_samples.size())},
                {"tool_version", SSLAUTH_VERSION}};
  for (const auto& [k, v] : opt.tags.items()) r.metadata[k] = v;
  return r;
}

namespace detail {

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(os), ErrorCode::io, "cannot write " + tmp);
    os << text;
    require(static_cast<bool>(os), ErrorCode::io, "write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::not_found, "file not found: " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline std::string random_hex(std::size_t bytes) {
  std::vector<unsigned char> b(bytes);
  require(RAND_bytes(b.data(), static_cast<int>(bytes)) == 1, ErrorCode::io, "random source failed");
  static constexpr char digits[] = "0123456789abcdef";
  std::string s;
  for (unsigned char c : b) {
    s.push_back(digits[c >> 4]);
    s.push_back(digits[c & 15]);
  }
  return s;
}

// Exclusive advisory lock on a file; serialises writers across processes.
class FileLock {
 public:
  explicit FileLock(const std::filesystem::path& p) : fd_(::open(p.c_str(), O_RDWR | O_CREAT, 0644)) {
    require(fd_ >= 0, ErrorCode::io, "cannot open lock file " + p.string());
    ::flock(fd_, LOCK_EX);
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

 private:
  int fd_;
};

}  // namespace detail

struct RegistryOptions {
  std::chrono::milliseconds challenge_ttl{std::chrono::minutes(5)};
};

/// Append-only on-disk registry:
///   index.json                        entry list and id counters
///   entries/<id>/{entry.json, watermark.ssa, keys.ssa[, reference.ssa]}
///   reports/<id>.ssa plus .json and .csv exports
/// Readers and verifications run concurrently; writes take an exclusive lock.
class Registry {
 public:
  explicit Registry(std::filesystem::path root, RegistryOptions opt = {}) : root_(std::move(root)), opt_(opt) {
    std::filesystem::create_directories(root_ / "entries");
    std::filesystem::create_directories(root_ / "reports");
    detail::FileLock lock(root_ / ".lock");
    if (!std::filesystem::exists(index_path()))
      detail::write_text_atomic(index_path(), json{{"version", 1}, {"next_entry", 1}, {"next_report", 1},
                                                   {"entries", json::array()}}
                                                  .dump(2));
  }

  const std::filesystem::path& root() const { return root_; }

  /// Stores a new entry. Re-registering the same pair yields a new id; both remain.
  std::string register_entry(const WatermarkRecord& rec, const KeySampleSet& ks, const std::string& owner_id,
                             const Tensor* reference_features = nullptr, const json& tags = json::object()) {
    require(!owner_id.empty(), ErrorCode::invalid_argument, "owner id must not be empty");
    require(ks.digest_valid(), ErrorCode::tamper, "key-sample images do not match their digest");
    require(rec.key_digest == ks.digest, ErrorCode::binding, "watermark key digest does not match the key samples");
    if (reference_features)
      require(reference_features->rank() == 2 && reference_features->dim(0) == ks.size() &&
                  reference_features->dim(1) == rec.arch.input_dim,
              ErrorCode::shape_mismatch, "reference features must be (|T|, d)");

    std::lock_guard guard(write_mu_);
    detail::FileLock lock(root_ / ".lock");
    json index = read_index();
    const int n = index.at("next_entry").get<int>();
    const std::string id = format_id("ent", n);
    const auto dir = root_ / "entries" / id;
    require(!std::filesystem::exists(dir), ErrorCode::io, "entry directory already exists: " + dir.string());
    const std::string created = utc_timestamp();
    save_watermark(rec, dir / "watermark.ssa");
    save_key_samples(ks, dir / "keys.ssa");
    if (reference_features) {
      Container c;
      c.meta = {{"kind", "reference_features"}, {"key_digest", ks.digest}};
      c.put("features", *reference_features);
      c.write(dir / "reference.ssa");
    }
    json meta = {{"entry_id", id},
                       {"owner_id", owner_id},
                       {"created_at", created},
                       {"key_digest", ks.digest},
                       {"encoder_fingerprint", rec.encoder_fingerprint},
                       {"baseline_enabled", reference_features != nullptr}};
    if (!tags.empty()) meta["tags"] = tags;
    detail::write_text_atomic(dir / "entry.json", meta.dump(2));
    index["entries"].push_back(meta);
    index["next_entry"] = n + 1;
    detail::write_text_atomic(index_path(), index.dump(2));
    return id;
  }

  std::vector<json> list_entries() const {
    const json index = read_index();
    return {index.at("entries").begin(), index.at("entries").end()};
  }

  /// Loads an entry from disk, re-checking digests.
  RegistryEntry entry(const std::string& id) const {
    require(valid_id(id, "ent"), ErrorCode::not_found, "unknown entry '" + id + "'");
    const auto dir = root_ / "entries" / id;
    require(std::filesystem::exists(dir / "entry.json"), ErrorCode::not_found, "unknown entry '" + id + "'");
    {
      std::shared_lock lk(cache_mu_);
      if (auto it = cache_.find(id); it != cache_.end()) return it->second;
    }
    json meta;
    try {
      meta = json::parse(detail::read_text(dir / "entry.json"));
    } catch (const json::exception& e) {
      fail(ErrorCode::parse, "corrupt entry metadata for " + id + ": " + e.what());
    }
    RegistryEntry e;
    e.entry_id = id;
    e.owner_id = meta.at("owner_id").get<std::string>();
    e.created_at = meta.at("created_at").get<std::string>();
    e.key_samples = load_key_samples(dir / "keys.ssa");
    e.record = load_watermark(dir / "watermark.ssa", nullptr, &e.key_samples);
    if (std::filesystem::exists(dir / "reference.ssa")) e.reference_features = Container::read(dir / "reference.ssa").tensor("features");
    std::unique_lock lk(cache_mu_);
    return cache_.emplace(id, std::move(e)).first->second;
  }

  /// Fresh single-use challenge. subset > 0 sends k rows of T chosen from the nonce.
  VerificationChallenge issue_challenge(const std::string& entry_id, int subset = 0) {
    const RegistryEntry e = entry(entry_id);
    const int n = e.key_samples.size();
    require(subset >= 0 && subset <= n, ErrorCode::invalid_argument,
            "subset size must lie in [0, " + std::to_string(n) + "]");
    VerificationChallenge c;
    c.entry_id = entry_id;
    c.nonce = detail::random_hex(16);
    c.indices.resize(n);
    std::iota(c.indices.begin(), c.indices.end(), 0);
    if (subset > 0 && subset < n) {
      Rng rng(std::stoull(c.nonce.substr(0, 16), nullptr, 16));
      rng.shuffle(c.indices);
      c.indices.resize(subset);
      std::sort(c.indices.begin(), c.indices.end());
    }
    c.images = e.key_samples.images.gather(c.indices);
    std::lock_guard lk(nonce_mu_);
    prune_expired();
    pending_[c.nonce] = {entry_id, c.indices, std::chrono::steady_clock::now() + opt_.challenge_ttl};
    return c;
  }

  /// Consumes the nonce, scores the response and persists the report.
  VerificationReport verify(const VerificationResponse& resp, const VerifyOptions& opt = {}) {
    opt.validate();
    Pending p;
    {
      std::lock_guard lk(nonce_mu_);
      auto it = pending_.find(resp.nonce);
      require(it != pending_.end(), ErrorCode::protocol, "unknown or already used nonce");
      p = std::move(it->second);
      pending_.erase(it);
      require(std::chrono::steady_clock::now() <= p.expires, ErrorCode::protocol, "challenge expired");
    }
    require(p.entry_id == resp.entry_id, ErrorCode::protocol, "nonce was issued for a different entry");
    VerificationReport r = compute_report(entry(resp.entry_id), p.indices, resp.features, opt);
    if (!resp.claimed_fingerprint.empty()) r.metadata["claimed_encoder_fingerprint"] = resp.claimed_fingerprint;
    persist(r);
    return r;
  }

  VerificationReport report(const std::string& report_id) const {
    require(valid_id(report_id, "rep"), ErrorCode::not_found, "unknown report '" + report_id + "'");
    const auto path = root_ / "reports" / (report_id + ".ssa");
    require(std::filesystem::exists(path), ErrorCode::not_found, "unknown report '" + report_id + "'");
    const Container c = Container::read(path);
    require(c.meta.value("kind", "") == "verification_report", ErrorCode::parse, "not a report container");
    return VerificationReport::from_json(c.meta.at("report"));
  }

  std::filesystem::path report_path(const std::string& report_id, const std::string& ext) const {
    return root_ / "reports" / (report_id + ext);
  }

 private:
  struct Pending {
    std::string entry_id;
    std::vector<int> indices;
    std::chrono::steady_clock::time_point expires;
  };

  std::filesystem::path root_;
  RegistryOptions opt_;
  std::mutex write_mu_;
  std::mutex nonce_mu_;
  std::map<std::string, Pending> pending_;
  mutable std::shared_mutex cache_mu_;
  mutable std::map<std::string, RegistryEntry> cache_;

  std::filesystem::path index_path() const { return root_ / "index.json"; }

  json read_index() const {
    try {
      return json::parse(detail::read_text(index_path()));
    } catch (const json::exception& e) {
      fail(ErrorCode::parse, std::string("corrupt registry index: ") + e.what());
    }
  }

  static std::string format_id(const char* prefix, int n) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%06d", prefix, n);
    return buf;
  }

  static bool valid_id(const std::string& id, const char* prefix) {
    if (id.size() != 10 || id.compare(0, 4, std::string(prefix) + "-") != 0) return false;
    return std::all_of(id.begin() + 4, id.end(), [](char c) { return c >= '0' && c <= '9'; });
  }

  void prune_expired() {
    const auto now = std::chrono::steady_clock::now();
    std::erase_if(pending_, [&](const auto& kv) { return kv.second.expires < now; });
  }

  void persist(VerificationReport& r) {
    std::lock_guard guard(write_mu_);
    detail::FileLock lock(root_ / ".lock");
    json index = read_index();
    const int n = index.at("next_report").get<int>();
    r.report_id = format_id("rep", n);
    r.created_at = utc_timestamp();
    Container c;
    c.meta = {{"kind", "verification_report"}, {"report", r.to_json()}};
    c.put_f64("per_sample_ssim", r.per_sample_ssim);
    c.write(report_path(r.report_id, ".ssa"));
    detail::write_text_atomic(report_path(r.report_id, ".json"), r.to_json().dump(2));
    detail::write_text_atomic(report_path(r.report_id, ".csv"), r.to_csv());
    index["next_report"] = n + 1;
    detail::write_text_atomic(index_path(), index.dump(2));
  }
};

}  // namespace sslauth
