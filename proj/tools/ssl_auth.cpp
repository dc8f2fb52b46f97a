// ssl-auth: command-line driver for the watermarking pipeline.
//
// Exit codes: 0 verified (or success), 1 tampered, 2 usage or I/O error.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include "sslauth/attacks.hpp"
#include "sslauth/manifest.hpp"
#include "sslauth/registry.hpp"
#include "sslauth/service.hpp"

// After Eigen: <resolv.h> defines a _res macro that clashes with Eigen identifiers.
#include <CLI11.hpp>
#include <httplib.h>

using namespace sslauth;
namespace fs = std::filesystem;

namespace {

constexpr int kVerified = 0;
constexpr int kTampered = 1;
constexpr int kUsage = 2;

struct Options {
  std::string manifest;
  std::string out;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
};

void log(const Options& o, const std::string& msg) {
  if (!o.quiet) std::cerr << "[ssl-auth] " << msg << "\n";
}

// Everything a subcommand needs: the manifest, the output layout and the stamp that
// goes into every file.
class Run {
 public:
  explicit Run(const Options& o) : opt_(o) {
    require(!o.manifest.empty(), ErrorCode::config, "--manifest is required");
    std::vector<std::string> ov = o.overrides;
    if (o.seed) {
      for (const char* k : {"encoder.seed", "keys.seed", "verifier.seed"})
        ov.push_back(std::string(k) + "=" + std::to_string(*o.seed));
    }
    m_ = load_manifest(o.manifest, ov);
    out_ = o.out.empty() ? m_.output_dir : fs::path(o.out);
    fs::create_directories(out_);
  }

  const ExperimentManifest& manifest() const { return m_; }
  const Options& options() const { return opt_; }
  fs::path path(const std::string& rel) const { return out_ / rel; }

  json stamp() const { return {{"manifest_hash", m_.hash}, {"tool_version", SSLAUTH_VERSION}, {"manifest", m_.name}}; }

  void write_json(const fs::path& p, json j) const {
    j["stamp"] = stamp();
    fs::create_directories(p.parent_path());
    detail::write_text_atomic(p, j.dump(2) + "\n");
  }
  void write_csv(const fs::path& p, const std::string& body) const {
    fs::create_directories(p.parent_path());
    detail::write_text_atomic(p, "# manifest_hash=" + m_.hash + " tool_version=" SSLAUTH_VERSION "\n" + body);
  }
  void write_container(Container c, const fs::path& p) const {
    c.meta["stamp"] = stamp();
    fs::create_directories(p.parent_path());
    c.write(p);
  }

  fs::path need(const std::string& rel, const std::string& producer) const {
    const fs::path p = path(rel);
    if (!fs::exists(p))
      fail(ErrorCode::not_found, "missing " + p.string() + "; run `ssl-auth " + producer + " --manifest " + opt_.manifest +
                                     "` first");
    return p;
  }

  Dataset dataset(const std::string& name, Split split = Split::train) const {
    return load_dataset(name, split, resolve_data_root(m_.data_root), m_.load_options(name));
  }

  EncoderModel encoder() const { return load_encoder(need("encoder.ssa", "train-encoder")); }
  KeySampleSet keys() const { return load_key_samples(need("keys.ssa", "select-keys")); }

  EncoderModel attacked(const std::string& name) const {
    return load_encoder(need("attacks/" + name + "/encoder.ssa", "attack --name " + name));
  }

  const AttackSpec& attack_spec(const std::string& name) const {
    for (const auto& a : m_.attacks)
      if (a.name == name) return a;
    fail(ErrorCode::config, "manifest has no attack named '" + name + "'");
  }

  VerifyOptions verify_options() const {
    VerifyOptions v = m_.decision;
    v.tags = stamp();
    return v;
  }

 private:
  Options opt_;
  ExperimentManifest m_;
  fs::path out_;
};

std::string elapsed(std::chrono::steady_clock::time_point t0) {
  const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1fs", s);
  return buf;
}

// ---------------------------------------------------------------------------
// Subcommands

int train_encoder(const Run& run) {
  const auto& m = run.manifest();
  const auto t0 = std::chrono::steady_clock::now();
  const Dataset ds = run.dataset(m.encoder_dataset);
  log(run.options(), "training encoder on " + m.encoder_dataset + " (" + std::to_string(ds.size()) + " images)");
  std::vector<double> hist;
  const EncoderModel enc = train_contrastive_encoder(ds, m.encoder_train, m.encoder_arch, &hist);
  run.write_container(enc.to_container(), run.path("encoder.ssa"));
  run.write_json(run.path("encoder.json"), {{"fingerprint", enc.fingerprint()},
                                            {"arch", enc.arch().id()},
                                            {"dataset", m.encoder_dataset},
                                            {"train_images", ds.size()},
                                            {"loss_history", hist}});
  log(run.options(), "encoder " + enc.fingerprint().substr(0, 12) + " written in " + elapsed(t0));
  return 0;
}

int select_keys(const Run& run) {
  const auto& m = run.manifest();
  const Dataset ds = run.dataset(m.keys_dataset);
  const KeySampleSet ks = select_key_samples(ds, m.classes, m.per_class, m.keys_seed);
  run.write_container(key_samples_container(ks), run.path("keys.ssa"));
  log(run.options(), "selected " + std::to_string(ks.size()) + " key samples, digest " + ks.digest.substr(0, 12));
  return 0;
}

int train_verifier_cmd(const Run& run) {
  const auto& m = run.manifest();
  const EncoderModel enc = run.encoder();
  const KeySampleSet ks = run.keys();
  const auto t0 = std::chrono::steady_clock::now();
  log(run.options(), "training verifier for " + std::to_string(m.verifier.epochs) + " epochs");
  const int every = std::max(1, m.verifier.epochs / 10);
  const WatermarkRecord rec = train_verifier(enc, ks, m.verifier, [&](int e, double l) {
    if ((e + 1) % every == 0) log(run.options(), "  epoch " + std::to_string(e + 1) + " loss " + std::to_string(l));
  });
  run.write_container(rec.to_container(), run.path("watermark.ssa"));
  const auto s = rec.per_sample_ssim(ks.images, enc.encode(ks.images));
  run.write_json(run.path("verifier.json"),
                 {{"alpha0", rec.alpha0},
                  {"min_sample_ssim", *std::min_element(s.begin(), s.end())},
                  {"encoder_fingerprint", rec.encoder_fingerprint},
                  {"key_digest", rec.key_digest},
                  {"generator_arch", rec.arch.id()},
                  {"train_log", rec.train_log}});
  log(run.options(), "alpha0 " + std::to_string(rec.alpha0) + " in " + elapsed(t0));
  return 0;
}

int attack_cmd(const Run& run, const std::vector<std::string>& names) {
  const auto& m = run.manifest();
  const EncoderModel enc = run.encoder();
  const Dataset ds = run.dataset(m.attack_dataset);
  std::vector<const AttackSpec*> todo;
  if (names.empty())
    for (const auto& a : m.attacks) todo.push_back(&a);
  else
    for (const auto& n : names) todo.push_back(&run.attack_spec(n));
  require(!todo.empty(), ErrorCode::config, "manifest declares no attacks");
  for (const AttackSpec* spec : todo) {
    const auto t0 = std::chrono::steady_clock::now();
    const AttackResult r = run_attack(*spec, enc, ds);
    const fs::path dir = run.path("attacks/" + spec->name);
    run.write_container(r.encoder.to_container({{"attack", spec->to_json()}}), dir / "encoder.ssa");
    run.write_json(dir / "attack.json", r.metrics);
    log(run.options(), "attack " + spec->name + " done in " + elapsed(t0));
  }
  return 0;
}

int register_cmd(const Run& run) {
  const auto& m = run.manifest();
  const WatermarkRecord rec = load_watermark(run.need("watermark.ssa", "train-verifier"));
  const KeySampleSet ks = run.keys();
  Registry reg(run.path("registry"));
  std::optional<Tensor> ref;
  if (m.decision.baseline) ref = run.encoder().encode(ks.images);
  const std::string id = reg.register_entry(rec, ks, m.owner_id, ref ? &*ref : nullptr, run.stamp());
  run.write_json(run.path("registration.json"), {{"entry_id", id}, {"owner_id", m.owner_id}, {"baseline", ref.has_value()}});
  log(run.options(), "registered " + id);
  std::cout << id << "\n";
  return 0;
}

std::string registered_entry(const Run& run) {
  const json j = json::parse(detail::read_text(run.need("registration.json", "register")));
  return j.at("entry_id").get<std::string>();
}

// One challenge-response round against the run's registry.
VerificationReport verify_encoder(const Run& run, Registry& reg, const EncoderModel& suspect, const std::string& label) {
  const auto ch = reg.issue_challenge(registered_entry(run));
  VerificationResponse resp{ch.entry_id, ch.nonce, suspect.encode(ch.images), suspect.fingerprint()};
  VerifyOptions opt = run.verify_options();
  opt.tags["encoder_label"] = label;
  return reg.verify(resp, opt);
}

void print_verdict(const VerificationReport& r, const std::string& label) {
  std::printf("%s: %s  alpha=%.6f  r(eps=%.2f)=%.4f", label.c_str(), to_string(r.verdict), r.alpha, r.epsilon,
              r.rate_at(r.epsilon));
  if (r.baseline)
    std::printf("  baseline cos=%.6f r=%.4f", r.baseline->mean_cosine, [&] {
      for (const auto& e : r.baseline->r_by_epsilon)
        if (e.epsilon == r.epsilon) return e.r;
      return 0.0;
    }());
  std::printf("  [%s]\n", r.report_id.c_str());
}

int verify_cmd(const Run& run, const std::string& encoder_path, const std::string& attack) {
  require(encoder_path.empty() || attack.empty(), ErrorCode::config, "give --encoder or --attack, not both");
  std::string label = "original";
  EncoderModel enc = [&] {
    if (!attack.empty()) {
      label = attack;
      return run.attacked(attack);
    }
    if (!encoder_path.empty()) {
      label = fs::path(encoder_path).stem().string();
      return load_encoder(encoder_path);
    }
    return run.encoder();
  }();
  Registry reg(run.path("registry"));
  const auto r = verify_encoder(run, reg, enc, label);
  run.write_json(run.path("verify/" + label + ".json"), r.to_json());
  run.write_csv(run.path("verify/" + label + ".csv"), r.to_csv());
  print_verdict(r, label);
  return r.verdict == Verdict::verified ? kVerified : kTampered;
}

double baseline_rate(const BaselineSection& b, double eps) {
  for (const auto& e : b.r_by_epsilon)
    if (e.epsilon == eps) return e.r;
  fail(ErrorCode::not_found, "baseline has no rate for epsilon " + std::to_string(eps));
}

int report_cmd(const Run& run) {
  const auto& m = run.manifest();
  Registry reg(run.path("registry"));
  struct Row {
    std::string label;
    const AttackSpec* spec;
    VerificationReport rep;
  };
  std::vector<Row> rows;
  rows.push_back({"original", nullptr, verify_encoder(run, reg, run.encoder(), "original")});
  for (const auto& a : m.attacks) {
    if (!fs::exists(run.path("attacks/" + a.name + "/encoder.ssa"))) {
      log(run.options(), "skipping " + a.name + " (not run)");
      continue;
    }
    rows.push_back({a.name, &a, verify_encoder(run, reg, run.attacked(a.name), a.name)});
  }

  // Grid: alpha and r per (encoder, epsilon) for both methods.
  std::ostringstream grid;
  grid.precision(10);
  grid << "encoder,kind,method,epsilon,confidence,r,verdict\n";
  json jgrid = json::array();
  for (const auto& row : rows) {
    const std::string kind = row.spec ? to_string(row.spec->kind) : "none";
    for (const auto& e : row.rep.r_by_epsilon) {
      grid << row.label << "," << kind << ",ssl-auth," << e.epsilon << "," << row.rep.alpha << "," << e.r << ","
           << to_string(row.rep.verdict) << "\n";
    }
    if (row.rep.baseline) {
      for (const auto& e : row.rep.baseline->r_by_epsilon)
        grid << row.label << "," << kind << ",baseline," << e.epsilon << "," << row.rep.baseline->mean_cosine << ","
             << e.r << "," << to_string(row.rep.baseline->verdict) << "\n";
    }
    json j = {{"encoder", row.label},
              {"kind", kind},
              {"report_id", row.rep.report_id},
              {"alpha", row.rep.alpha},
              {"verdict", to_string(row.rep.verdict)},
              {"r_by_epsilon", row.rep.to_json().at("r_by_epsilon")}};
    if (row.rep.baseline) j["baseline"] = row.rep.to_json().at("baseline_cosine");
    jgrid.push_back(j);
  }
  run.write_csv(run.path("report/grid.csv"), grid.str());
  run.write_json(run.path("report/grid.json"), {{"rows", jgrid}, {"decision_epsilon", m.decision.decision.epsilon}});

  // Series: confidence against fine-tune epochs and against prune rate. The original
  // encoder is the zero point of both.
  const double eps = m.decision.decision.epsilon;
  auto series = [&](AttackKind kind, const char* key, double dflt, const char* xname) {
    std::vector<std::pair<double, const VerificationReport*>> pts{{0.0, &rows.front().rep}};
    for (const auto& row : rows)
      if (row.spec && row.spec->kind == kind) pts.push_back({row.spec->params.value(key, dflt), &row.rep});
    std::stable_sort(pts.begin(), pts.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    std::ostringstream os;
    os.precision(10);
    os << xname << ",ssl_auth_confidence,ssl_auth_r,baseline_confidence,baseline_r\n";
    for (const auto& [x, rep] : pts) {
      os << x << "," << rep->alpha << "," << rep->rate_at(eps) << ",";
      if (rep->baseline) os << rep->baseline->mean_cosine << "," << baseline_rate(*rep->baseline, eps);
      else os << ",";
      os << "\n";
    }
    return os.str();
  };
  run.write_csv(run.path("report/finetune_confidence.csv"), series(AttackKind::finetune_ftal, "epochs", 1, "epochs"));
  run.write_csv(run.path("report/prune_confidence.csv"), series(AttackKind::prune_retrain, "rate", 0.2, "prune_rate"));

  for (const auto& row : rows) print_verdict(row.rep, row.label);
  log(run.options(), "report written to " + run.path("report").string());
  return rows.front().rep.verdict == Verdict::verified ? kVerified : kTampered;
}

int run_all(const Run& run) {
  const auto t0 = std::chrono::steady_clock::now();
  train_encoder(run);
  select_keys(run);
  train_verifier_cmd(run);
  if (!run.manifest().attacks.empty()) attack_cmd(run, {});
  register_cmd(run);
  const int rc = report_cmd(run);
  log(run.options(), "run-all finished in " + elapsed(t0));
  return rc;
}

int serve(const Run& run, const std::string& host, int port) {
  Registry reg(run.path("registry"));
  Service svc(reg);
  httplib::Server http;
  std::mutex mu;  // Service is thread-safe; this only orders log lines
  http.Post("/v1/rpc", [&](const httplib::Request& req, httplib::Response& res) {
    const std::string body = svc.handle_text(req.body);
    {
      std::lock_guard lk(mu);
      log(run.options(), "rpc " + std::to_string(req.body.size()) + " bytes in, " + std::to_string(body.size()) + " out");
    }
    res.set_content(body, "application/json");
  });
  http.Get("/v1/health", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(json{{"ok", true}, {"tool_version", SSLAUTH_VERSION}, {"manifest_hash", run.manifest().hash}}.dump(),
                    "application/json");
  });
  log(run.options(), "serving " + run.path("registry").string() + " on http://" + host + ":" + std::to_string(port));
  if (!http.listen(host, port)) fail(ErrorCode::io, "cannot listen on " + host + ":" + std::to_string(port));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssl-auth: fragile watermarking for self-supervised encoders"};
  app.set_version_flag("--version", SSLAUTH_VERSION);
  app.require_subcommand(1);
  Options opt;
  std::uint64_t seed = 0;
  auto common = [&](CLI::App* sub) {
    sub->add_option("-m,--manifest", opt.manifest, "experiment manifest (TOML)")->required()->check(CLI::ExistingFile);
    sub->add_option("-o,--out", opt.out, "output directory (default: manifest output_dir)");
    sub->add_option("--seed", seed, "override the encoder, key and verifier seeds");
    sub->add_option("-s,--set", opt.overrides, "manifest override, e.g. verifier.epochs=200");
    sub->add_flag("-q,--quiet", opt.quiet, "no progress output");
  };

  auto* te = app.add_subcommand("train-encoder", "train the encoder with SimCLR");
  auto* sk = app.add_subcommand("select-keys", "pick the key samples");
  auto* tv = app.add_subcommand("train-verifier", "train the verification network");
  auto* at = app.add_subcommand("attack", "run manifest attacks on the encoder");
  std::vector<std::string> attack_names;
  at->add_option("-n,--name", attack_names, "attack name (default: all)");
  auto* rg = app.add_subcommand("register", "store watermark and keys in the registry");
  auto* vf = app.add_subcommand("verify", "verify an encoder against the registry");
  std::string enc_path, attack;
  vf->add_option("-e,--encoder", enc_path, "encoder checkpoint to verify")->check(CLI::ExistingFile);
  vf->add_option("-a,--attack", attack, "verify the encoder produced by this attack");
  auto* rp = app.add_subcommand("report", "verify every encoder and write the grid and series");
  auto* ra = app.add_subcommand("run-all", "every step in order");
  auto* sv = app.add_subcommand("serve", "JSON registry service over HTTP");
  std::string host = "127.0.0.1";
  int port = 8080;
  sv->add_option("--host", host, "bind address");
  sv->add_option("--port", port, "port")->check(CLI::Range(1, 65535));
  for (auto* s : {te, sk, tv, at, rg, vf, rp, ra, sv}) common(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kUsage;
  }
  for (auto* s : {te, sk, tv, at, rg, vf, rp, ra, sv})
    if (s->parsed() && s->count("--seed")) opt.seed = seed;

  try {
    const Run run(opt);
    if (te->parsed()) return train_encoder(run);
    if (sk->parsed()) return select_keys(run);
    if (tv->parsed()) return train_verifier_cmd(run);
    if (at->parsed()) return attack_cmd(run, attack_names);
    if (rg->parsed()) return register_cmd(run);
    if (vf->parsed()) return verify_cmd(run, enc_path, attack);
    if (rp->parsed()) return report_cmd(run);
    if (ra->parsed()) return run_all(run);
    if (sv->parsed()) return serve(run, host, port);
  } catch (const Error& e) {
    std::cerr << "ssl-auth: error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "ssl-auth: error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
