// Acceptance run: one PASS/FAIL line per criterion. Pass criterion numbers as
// arguments to run a subset (e.g. `acceptance 1 2 9`).
//
// Desk-scale fixtures come from manifests/tinytoy.toml and manifests/toy10.toml, so
// the settings checked here are the ones the CLI ships with.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>

#include "sslauth/attacks.hpp"
#include "sslauth/manifest.hpp"
#include "sslauth/registry.hpp"
#include "sslauth/service.hpp"
#include "ssim_oracle.hpp"
#include "test_util.hpp"

using namespace sslauth;
using Clock = std::chrono::steady_clock;

namespace {

const std::filesystem::path kManifests = SSLAUTH_SOURCE_DIR "/manifests";

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------------------
// Fixtures

// Encoder, keys and verifier trained with a manifest's settings.
struct Protected {
  ExperimentManifest m;
  Dataset train;
  EncoderModel enc = EncoderModel::create({}, 0);
  std::string fp_before_watermark;
  KeySampleSet ks;
  WatermarkRecord rec;
  double encoder_seconds = 0, verifier_seconds = 0;

  explicit Protected(const std::string& manifest) : m(load_manifest(kManifests / manifest)) {
    train = load_dataset(m.encoder_dataset, Split::train, {}, m.load_options(m.encoder_dataset));
    auto t0 = Clock::now();
    enc = train_contrastive_encoder(train, m.encoder_train, m.encoder_arch);
    encoder_seconds = seconds_since(t0);
    ks = select_key_samples(load_dataset(m.keys_dataset, Split::train, {}, m.load_options(m.keys_dataset)), m.classes, m.per_class, m.keys_seed);
    fp_before_watermark = enc.fingerprint();
    t0 = Clock::now();
    rec = train_verifier(enc, ks, m.verifier);
    verifier_seconds = seconds_since(t0);
    std::fprintf(stderr, "  [%s] encoder %.0fs, verifier %.0fs, alpha0 %.6f\n", m.name.c_str(), encoder_seconds,
                 verifier_seconds, rec.alpha0);
  }
};

Protected& tinytoy() {
  static Protected p("tinytoy.toml");
  return p;
}
Protected& toy10() {
  static Protected p("toy10.toml");
  return p;
}

// Every attack of the toy10 manifest, verified through a registry with baseline
// reference features registered.
struct AttackRun {
  const AttackSpec* spec;
  AttackResult result;
  VerificationReport report;
  double seconds = 0;
};

struct Grid {
  testutil::TempDir dir{"acceptance_grid"};
  std::unique_ptr<Registry> reg;
  std::string entry;
  VerificationReport original;
  std::vector<AttackRun> runs;
  std::vector<std::string> fingerprints_after_verify;

  VerificationReport verify(const EncoderModel& e) {
    const auto ch = reg->issue_challenge(entry);
    VerifyOptions opt = toy10().m.decision;
    opt.baseline = true;
    return reg->verify({entry, ch.nonce, e.encode(ch.images), e.fingerprint()}, opt);
  }

  Grid() {
    Protected& p = toy10();
    reg = std::make_unique<Registry>(dir.path());
    const Tensor ref = p.enc.encode(p.ks.images);
    entry = reg->register_entry(p.rec, p.ks, p.m.owner_id, &ref);
    original = verify(p.enc);
    fingerprints_after_verify.push_back(p.enc.fingerprint());
    for (int i = 0; i < 3; ++i) {
      verify(p.enc);
      fingerprints_after_verify.push_back(p.enc.fingerprint());
    }
    const Dataset atk = load_dataset(p.m.attack_dataset, Split::train, {}, p.m.load_options(p.m.attack_dataset));
    for (const auto& spec : p.m.attacks) {
      const auto t0 = Clock::now();
      AttackResult r = run_attack(spec, p.enc, atk);
      VerificationReport rep = verify(r.encoder);
      runs.push_back({&spec, std::move(r), std::move(rep), seconds_since(t0)});
      std::fprintf(stderr, "  [attack %s] alpha %.4f r@eps %.2f baseline cos %.4f (%.0fs)\n", spec.name.c_str(),
                   runs.back().report.alpha, runs.back().report.rate_at(runs.back().report.epsilon),
                   runs.back().report.baseline->mean_cosine, runs.back().seconds);
    }
  }

  std::vector<const AttackRun*> of_kind(AttackKind k) const {
    std::vector<const AttackRun*> out;
    for (const auto& r : runs)
      if (r.spec->kind == k) out.push_back(&r);
    return out;
  }

  const AttackRun* find(AttackKind k, const char* key, double value) const {
    for (const auto* r : of_kind(k))
      if (r->spec->params.contains(key) && r->spec->params.at(key).get<double>() == value) return r;
    return nullptr;
  }
};

Grid& grid() {
  static Grid g;
  return g;
}

double baseline_rate(const VerificationReport& r, double eps) {
  for (const auto& e : r.baseline->r_by_epsilon)
    if (e.epsilon == eps) return e.r;
  fail(ErrorCode::not_found, "no baseline rate");
}

// ---------------------------------------------------------------------------
// Criteria

Outcome c1_ssim() {
  const auto t0 = Clock::now();
  SsimConfig global;
  global.window = SsimWindow::global;
  double max_diff = 0, max_self = 0, max_ident = 0;
  for (int t = 0; t < 200; ++t) {
    // 8x8 is smaller than the 11x11 Gaussian window, so it uses the global window.
    const Tensor x8 = testutil::random_image(8, 8, 1000 + t), y8 = testutil::random_image(8, 8, 5000 + t);
    oracle::Params pg;
    pg.gaussian = false;
    max_diff = std::max(max_diff, std::abs(ssim(x8, y8, global) - oracle::ssim(x8.data(), y8.data(), 8, 8, pg)));
    const Tensor x = testutil::random_image(32, 32, 9000 + t), y = testutil::random_image(32, 32, 13000 + t);
    max_diff = std::max(max_diff, std::abs(ssim(x, y) - oracle::ssim(x.data(), y.data(), 32, 32)));
    max_self = std::max({max_self, std::abs(ssim(x, x) - 1.0), std::abs(ssim(x8, x8, global) - 1.0)});

    // l*c*s at every window position, and the mean-factor product for a single plane
    // with a single window.
    const auto maps = ssim_component_maps(x, y);
    for (std::size_t p = 0; p < maps.ssim.size(); ++p)
      for (std::size_t i = 0; i < maps.ssim[p].size(); ++i)
        max_ident = std::max(max_ident, std::abs(maps.luminance[p][i] * maps.contrast[p][i] * maps.structure[p][i] -
                                                 maps.ssim[p][i]));
    SsimConfig single = global;
    single.channel_mode = ChannelMode::luminance_only;
    const auto c = ssim_components(x8, y8, single);
    max_ident = std::max(max_ident, std::abs(c.luminance * c.contrast * c.structure - ssim(x8, y8, single)));
  }
  const double secs = seconds_since(t0);
  return {max_diff <= 1e-6 && max_self <= 1e-9 && max_ident <= 1e-9 && secs < 10,
          fmt("max |ssim - oracle| %.2e (tol 1e-6), max |ssim(x,x)-1| %.2e, max |l*c*s - ssim| %.2e (tol 1e-9), %.2fs",
              max_diff, max_self, max_ident, secs)};
}

Outcome c2_decision() {
  std::mt19937_64 gen(42);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int mismatches = 0, non_monotone = 0;
  for (int t = 0; t < 1000; ++t) {
    const int n = 1 + static_cast<int>(u(gen) * 40);
    std::vector<double> s(n);
    for (double& v : s) v = u(gen);
    const double alpha0 = 0.05 + 0.95 * u(gen), eps = u(gen);
    const DecisionMode mode = t % 2 ? DecisionMode::absolute : DecisionMode::relative_to_alpha0;
    int cnt = 0;
    for (double v : s) {
      const double drop = mode == DecisionMode::absolute ? 1.0 - v : 1.0 - v / alpha0;
      if (drop < eps) ++cnt;
    }
    const double naive = static_cast<double>(cnt) / n;
    if (auth_success_rate(s, alpha0, {eps, mode}).rate != naive) ++mismatches;
    double prev = -1;
    for (double e = 0; e <= 1.0; e += 0.05) {
      const double r = auth_success_rate(s, alpha0, {e, mode}).rate;
      if (r < prev) ++non_monotone;
      prev = r;
    }
  }
  return {mismatches == 0 && non_monotone == 0,
          fmt("1000 triples: %d mismatches against the naive loop, %d monotonicity violations", mismatches, non_monotone)};
}

Outcome c3_self_verification() {
  bool ok = true;
  std::string detail;
  for (Protected* p : {&tinytoy(), &toy10()}) {
    const auto t0 = Clock::now();
    const auto s = p->rec.per_sample_ssim(p->ks.images, p->enc.encode(p->ks.images));
    const double alpha = confidence(s, p->rec.alpha0);
    const double r1 = auth_success_rate(s, p->rec.alpha0, {0.01, DecisionMode::relative_to_alpha0}).rate;
    const double secs = p->verifier_seconds + seconds_since(t0);
    const double worst = *std::min_element(s.begin(), s.end()) / p->rec.alpha0;
    const bool pass = p->rec.alpha0 >= 0.75 && std::abs(alpha - 1.0) <= 1e-6 && r1 == 1.0 && secs < 600;
    ok = ok && pass;
    detail += fmt("%s%s: alpha0 %.4f, alpha %.9f, r@1%% %.2f (min s/alpha0 %.4f), %.0fs", detail.empty() ? "" : "; ",
                  p->m.name.c_str(), p->rec.alpha0, alpha, r1, worst, secs);
  }
  return {ok, detail};
}

Outcome c4_fidelity() {
  Protected& p = toy10();
  const Grid& g = grid();
  bool same = p.enc.fingerprint() == p.fp_before_watermark;
  for (const auto& f : g.fingerprints_after_verify) same = same && f == p.fp_before_watermark;
  same = same && tinytoy().enc.fingerprint() == tinytoy().fp_before_watermark;
  return {same, fmt("fingerprint %s unchanged by watermark training and %zu verifications",
                    p.fp_before_watermark.substr(0, 16).c_str(), g.fingerprints_after_verify.size())};
}

Outcome c5_pruning() {
  const Grid& g = grid();
  const AttackRun* p20 = g.find(AttackKind::prune_retrain, "rate", 0.2);
  if (!p20) return {false, "manifest has no 20% pruning attack"};
  const double r = p20->report.rate_at(0.10);
  auto sweep = g.of_kind(AttackKind::prune_retrain);
  std::sort(sweep.begin(), sweep.end(), [](const AttackRun* a, const AttackRun* b) {
    return a->spec->params.at("rate").get<double>() < b->spec->params.at("rate").get<double>();
  });
  const std::set<double> want{0.2, 0.4, 0.6, 0.8, 0.95};
  std::set<double> have;
  int inversions = 0;
  double secs = 0;
  std::string alphas;
  for (std::size_t i = 0; i < sweep.size(); ++i) {
    have.insert(sweep[i]->spec->params.at("rate").get<double>());
    secs += sweep[i]->seconds;
    alphas += fmt("%s%.4f", i ? " " : "", sweep[i]->report.alpha);
    if (i > 0 && sweep[i]->report.alpha > sweep[i - 1]->report.alpha) ++inversions;
  }
  const bool pass = r <= 0.20 && have == want && inversions <= 1 && secs < 1200;
  return {pass, fmt("20%% pruned: r@10%% = %.2f (max 0.20); alpha over {20,40,60,80,95}%%: %s, %d inversion(s); %.0fs",
                    r, alphas.c_str(), inversions, secs)};
}

Outcome c6_finetune() {
  const Grid& g = grid();
  const AttackRun* f1 = g.find(AttackKind::finetune_ftal, "epochs", 1);
  const AttackRun* f5 = g.find(AttackKind::finetune_ftal, "epochs", 5);
  if (!f1 || !f5) return {false, "manifest needs 1- and 5-epoch fine-tuning attacks"};
  const bool changed = f1->result.encoder.fingerprint() != toy10().enc.fingerprint();
  const double a1 = f1->report.alpha, r5 = f5->report.rate_at(0.10);
  return {changed && a1 < 1.0 && r5 < 1.0,
          fmt("1 epoch: fingerprint %s, alpha %.4f; 5 epochs: r@10%% = %.2f", changed ? "changed" : "UNCHANGED", a1, r5)};
}

Outcome c7_backdoor() {
  const auto bd = grid().of_kind(AttackKind::backdoor);
  if (bd.empty()) return {false, "manifest has no backdoor attack"};
  const auto& m = bd.front()->result.metrics;
  const auto& rep = bd.front()->report;
  const double trig = m.at("trigger_alignment").get<double>(), util = m.at("clean_utility").get<double>();
  const double r0 = rep.rate_at(0.0);
  const bool pass = trig > 0.9 && util > 0.9 && rep.verdict == Verdict::tampered && r0 == 0.0 &&
                    rep.mode == DecisionMode::relative_to_alpha0;
  return {pass, fmt("trigger alignment %.4f (clean %.4f, before %.4f), utility %.4f, verdict %s, r@0 = %.2f", trig,
                    m.at("clean_alignment").get<double>(), m.at("trigger_alignment_before").get<double>(), util,
                    to_string(rep.verdict), r0)};
}

Outcome c8_sensitivity() {
  const Grid& g = grid();
  int worse = 0;
  double min_gap = INFINITY;
  for (const auto& run : g.runs) {
    const double ssl_drop = 1.0 - run.report.alpha, base_drop = 1.0 - run.report.baseline->mean_cosine;
    min_gap = std::min(min_gap, ssl_drop - base_drop);
    if (ssl_drop < base_drop) ++worse;
  }
  const AttackRun* p20 = g.find(AttackKind::prune_retrain, "rate", 0.2);
  if (!p20) return {false, "manifest has no 20% pruning attack"};
  const double base_r = baseline_rate(p20->report, 0.10), ssl_r = p20->report.rate_at(0.10);
  return {worse == 0 && base_r > 0.80 && ssl_r <= 0.20,
          fmt("%d/%zu attacks where SSL-Auth drops less than baseline (min gap %.4f); 20%% pruned: baseline r@10%% "
              "%.2f (> 0.80), SSL-Auth r@10%% %.2f",
              worse, g.runs.size(), min_gap, base_r, ssl_r)};
}

Outcome c9_orthogonality() {
  std::mt19937_64 gen(9);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> abs_cos;
  for (int t = 0; t < 1000; ++t) {
    double ab = 0, aa = 0, bb = 0;
    for (int k = 0; k < 512; ++k) {
      const double a = nd(gen), b = nd(gen);
      ab += a * b;
      aa += a * a;
      bb += b * b;
    }
    abs_cos.push_back(std::abs(ab / std::sqrt(aa * bb)));
  }
  double mean = 0;
  for (double c : abs_cos) mean += c / abs_cos.size();
  std::sort(abs_cos.begin(), abs_cos.end());
  const double p99 = abs_cos[static_cast<std::size_t>(std::ceil(0.99 * abs_cos.size())) - 1];
  // Same pairs through the library cosine.
  std::mt19937_64 gen2(9);
  std::normal_distribution<double> nd2(0.0, 1.0);
  double max_diff = 0;
  for (int t = 0; t < 50; ++t) {
    std::vector<double> a(512), b(512);
    for (int k = 0; k < 512; ++k) {
      a[k] = nd2(gen2);
      b[k] = nd2(gen2);
    }
    double ab = 0, aa = 0, bb = 0;
    for (int k = 0; k < 512; ++k) ab += a[k] * b[k], aa += a[k] * a[k], bb += b[k] * b[k];
    max_diff = std::max(max_diff, std::abs(cosine_similarity(a, b) - ab / std::sqrt(aa * bb)));
  }
  return {mean < 0.1 && p99 < 0.2 && max_diff < 1e-12,
          fmt("mean |cos| %.4f (< 0.1), p99 %.4f (< 0.2), library vs hand cosine %.1e", mean, p99, max_diff)};
}

Outcome c10_protocol() {
  Protected& p = tinytoy();
  const json watermark = container_to_wire(p.rec.to_container());
  const json keys = container_to_wire(key_samples_container(p.ks));

  auto round_trip = [&](json& report, std::string& csv) {
    testutil::TempDir dir("acceptance_protocol");
    Registry reg(dir.path());
    Service svc(reg);
    auto call = [&](const json& req) { return json::parse(svc.handle_text(req.dump())); };
    const json reg_reply = call({{"op", "REGISTER"},
                                 {"owner_id", p.m.owner_id},
                                 {"watermark", watermark},
                                 {"key_samples", keys},
                                 {"encoder_fingerprint", p.enc.fingerprint()},
                                 {"reference_features", tensor_to_wire(p.enc.encode(p.ks.images))}});
    if (!reg_reply.value("ok", false)) return reg_reply.dump();
    const std::string id = reg_reply.at("entry_id");
    const json ch = call({{"op", "CHALLENGE"}, {"entry_id", id}});
    if (!ch.value("ok", false)) return ch.dump();
    const Tensor images = tensor_from_wire(ch.at("images"));
    const json v = call({{"op", "VERIFY"},
                         {"entry_id", id},
                         {"nonce", ch.at("nonce")},
                         {"features", tensor_to_wire(p.enc.encode(images))},
                         {"encoder_fingerprint", p.enc.fingerprint()},
                         {"baseline", true}});
    if (!v.value("ok", false)) return v.dump();
    report = v.at("report");
    const json fetched = call({{"op", "GET_REPORT"}, {"report_id", report.at("report_id")}});
    if (fetched.at("report") != report) return std::string("GET_REPORT differs from VERIFY reply");
    report.erase("created_at");
    csv = detail::read_text(reg.report_path(v.at("report").at("report_id").get<std::string>(), ".csv"));
    return std::string();
  };
  json r1, r2;
  std::string csv1, csv2;
  for (const std::string& err : {round_trip(r1, csv1), round_trip(r2, csv2)})
    if (!err.empty()) return {false, "round trip failed: " + err};
  const bool identical = r1.dump() == r2.dump() && csv1 == csv2;
  const bool verified = r1.at("verdict") == "verified";

  // Rejections.
  testutil::TempDir dir("acceptance_reject");
  Registry reg(dir.path());
  Service svc(reg);
  Container bad_keys = key_samples_container(p.ks);
  Tensor imgs = bad_keys.tensor("images");
  imgs[0] = 1.0f - imgs[0];
  bad_keys.put("images", imgs);
  const json tampered = svc.handle({{"op", "REGISTER"},
                                    {"owner_id", "x"},
                                    {"watermark", watermark},
                                    {"key_samples", container_to_wire(bad_keys)}});
  const json mismatch = svc.handle({{"op", "REGISTER"},
                                    {"owner_id", "x"},
                                    {"watermark", watermark},
                                    {"key_samples", keys},
                                    {"encoder_fingerprint", toy10().enc.fingerprint()}});
  const std::string tcode = tampered.value("ok", true) ? "accepted" : tampered.at("error").at("code").get<std::string>();
  const std::string mcode = mismatch.value("ok", true) ? "accepted" : mismatch.at("error").at("code").get<std::string>();
  return {identical && verified && tcode == "tamper" && mcode == "binding",
          fmt("two runs %s (%zu-byte report), verdict %s; tampered keys -> %s, mismatched fingerprint -> %s",
              identical ? "byte-identical" : "DIFFER", r1.dump().size(), r1.at("verdict").get<std::string>().c_str(),
              tcode.c_str(), mcode.c_str())};
}

}  // namespace

int main(int argc, char** argv) {
  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria = {
      {1, {"SSIM correctness", c1_ssim}},
      {2, {"decision-rule oracle", c2_decision}},
      {3, {"self-verification", c3_self_verification}},
      {4, {"fidelity", c4_fidelity}},
      {5, {"fragility: pruning", c5_pruning}},
      {6, {"fragility: fine-tuning", c6_finetune}},
      {7, {"fragility: backdoor", c7_backdoor}},
      {8, {"sensitivity vs baseline", c8_sensitivity}},
      {9, {"orthogonality", c9_orthogonality}},
      {10, {"protocol round trip", c10_protocol}},
  };
  std::set<int> wanted;
  for (int i = 1; i < argc; ++i) wanted.insert(std::atoi(argv[i]));
  int failed = 0;
  for (const auto& [id, c] : criteria) {
    if (!wanted.empty() && !wanted.count(id)) continue;
    Outcome o;
    try {
      o = c.second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::printf("CRITERION %d %s: %s | %s\n", id, o.pass ? "PASS" : "FAIL", c.first, o.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
