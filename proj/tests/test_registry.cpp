#include <gtest/gtest.h>

#include <fstream>
#include <numeric>
#include <set>
#include <thread>

#include "sslauth/service.hpp"
#include "test_util.hpp"

using namespace sslauth;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::io;
}

struct Fixture {
  EncoderModel enc = EncoderModel::create({8, 32}, 3);
  KeySampleSet ks = select_key_samples(load_dataset("tinytoy", Split::train), 2, 3, 0);
  WatermarkRecord rec = [this] {
    VerifierTrainConfig c;
    c.epochs = 40;
    c.width = 16;
    c.learning_rate = 3e-3;
    return train_verifier(enc, ks, c);
  }();
  Tensor feats = enc.encode(ks.images);
};

const Fixture& fx() {
  static const Fixture f;
  return f;
}

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

VerificationResponse respond(const VerificationChallenge& c, const EncoderModel& enc) {
  return {c.entry_id, c.nonce, enc.encode(c.images), enc.fingerprint()};
}

}  // namespace

TEST(Registry, RegisterAndRetrieve) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto a = reg.register_entry(f.rec, f.ks, "alice");
  const auto b = reg.register_entry(f.rec, f.ks, "alice");  // versions coexist
  EXPECT_EQ(a, "ent-000001");
  EXPECT_EQ(b, "ent-000002");
  for (const auto& id : {a, b}) {
    const auto e = reg.entry(id);
    EXPECT_EQ(e.owner_id, "alice");
    EXPECT_EQ(e.key_samples.digest, f.ks.digest);
    EXPECT_EQ(e.record.alpha0, f.rec.alpha0);
    EXPECT_FALSE(e.reference_features.has_value());
  }
  EXPECT_EQ(reg.list_entries().size(), 2u);
  EXPECT_EQ(code_of([&] { reg.entry("ent-000009"); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] { reg.entry("../etc"); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] { reg.register_entry(f.rec, f.ks, ""); }), ErrorCode::invalid_argument);
}

TEST(Registry, RejectsMismatchedOrTamperedKeys) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto other = select_key_samples(load_dataset("tinytoy", Split::train), 2, 3, 9);
  EXPECT_EQ(code_of([&] { reg.register_entry(f.rec, other, "bob"); }), ErrorCode::binding);
  KeySampleSet tampered = f.ks;
  tampered.images[5] = 1.0f - tampered.images[5];
  EXPECT_EQ(code_of([&] { reg.register_entry(f.rec, tampered, "bob"); }), ErrorCode::tamper);
  EXPECT_TRUE(reg.list_entries().empty());
  Tensor wrong({f.ks.size(), 7});
  EXPECT_EQ(code_of([&] { reg.register_entry(f.rec, f.ks, "bob", &wrong); }), ErrorCode::shape_mismatch);
}

TEST(Registry, EntriesSurviveRestartByteExactly) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  std::string id;
  std::map<std::string, std::string> before;
  {
    Registry reg(dir.path());
    id = reg.register_entry(f.rec, f.ks, "carol", &f.feats);
    for (const auto& p : std::filesystem::recursive_directory_iterator(dir.path() / "entries"))
      if (p.is_regular_file()) before[p.path().string()] = file_bytes(p.path());
  }
  Registry again(dir.path());
  const auto e = again.entry(id);
  EXPECT_EQ(e.record.alpha0, f.rec.alpha0);
  ASSERT_TRUE(e.reference_features.has_value());
  EXPECT_EQ(*e.reference_features, f.feats);
  EXPECT_EQ(again.register_entry(f.rec, f.ks, "carol"), "ent-000002");  // counter persisted
  for (const auto& [path, bytes] : before) EXPECT_EQ(file_bytes(path), bytes) << path;

  // A key file edited on disk is caught on load.
  Registry third(dir.path());
  auto c = key_samples_container(f.ks);
  Tensor img = c.tensor("images");
  img[0] = 1.0f - img[0];
  c.put("images", img);
  c.write(dir.path() / "entries" / id / "keys.ssa");
  EXPECT_EQ(code_of([&] { third.entry(id); }), ErrorCode::tamper);
}

TEST(Protocol, SelfVerificationAndNonceRules) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto id = reg.register_entry(f.rec, f.ks, "dave");
  const auto c1 = reg.issue_challenge(id);
  const auto c2 = reg.issue_challenge(id);
  EXPECT_NE(c1.nonce, c2.nonce);
  EXPECT_EQ(image_digest(c1.images), f.ks.digest);  // full key set by default
  EXPECT_EQ(code_of([&] { reg.issue_challenge("ent-000042"); }), ErrorCode::not_found);

  VerifyOptions opt;
  opt.decision.epsilon = 0.01;
  opt.pass_threshold = 0.0;  // the 40-epoch fixture is not tight enough for r = 1 at 1%
  const auto rep = reg.verify(respond(c1, f.enc), opt);
  EXPECT_NEAR(rep.alpha, 1.0, 1e-6);
  EXPECT_EQ(rep.report_id, "rep-000001");
  EXPECT_EQ(rep.metadata.at("claimed_encoder_fingerprint"), f.enc.fingerprint());

  // r values are recomputable from the per-sample SSIMs.
  for (const auto& e : rep.r_by_epsilon)
    EXPECT_EQ(e.r, auth_success_rate(rep.per_sample_ssim, rep.alpha0, {e.epsilon, rep.mode}).rate);
  double mean = 0;
  for (double s : rep.per_sample_ssim) mean += s / rep.per_sample_ssim.size();
  EXPECT_NEAR(rep.alpha, mean / rep.alpha0, 1e-9);
  for (double e : standard_epsilons()) EXPECT_NO_THROW(rep.rate_at(e));
  EXPECT_NO_THROW(rep.rate_at(0.01));

  // Replay and cross-entry use of a nonce.
  EXPECT_EQ(code_of([&] { reg.verify(respond(c1, f.enc), opt); }), ErrorCode::protocol);
  auto wrong_entry = respond(c2, f.enc);
  wrong_entry.entry_id = reg.register_entry(f.rec, f.ks, "dave");
  EXPECT_EQ(code_of([&] { reg.verify(wrong_entry); }), ErrorCode::protocol);
  EXPECT_EQ(code_of([&] { reg.verify({id, "deadbeef", f.feats, ""}); }), ErrorCode::protocol);

  // Bad feature shape; the nonce is consumed either way.
  const auto c3 = reg.issue_challenge(id);
  EXPECT_EQ(code_of([&] { reg.verify({id, c3.nonce, Tensor({f.ks.size(), 5}), ""}); }), ErrorCode::shape_mismatch);
  EXPECT_EQ(code_of([&] { reg.verify(respond(c3, f.enc)); }), ErrorCode::protocol);

  // Stored report equals the returned one.
  EXPECT_EQ(reg.report(rep.report_id).to_json(), rep.to_json());
  EXPECT_EQ(code_of([&] { reg.report("rep-000099"); }), ErrorCode::not_found);
}

TEST(Protocol, ChallengesExpire) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path(), {std::chrono::milliseconds(20)});
  const auto id = reg.register_entry(f.rec, f.ks, "erin");
  const auto c = reg.issue_challenge(id);
  std::this_thread::sleep_for(std::chrono::milliseconds(60));
  EXPECT_EQ(code_of([&] { reg.verify(respond(c, f.enc)); }), ErrorCode::protocol);
}

TEST(Protocol, RandomEncoderIsTampered) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto id = reg.register_entry(f.rec, f.ks, "frank", &f.feats);
  const auto other = EncoderModel::create({8, 32}, 77);
  VerifyOptions opt;
  opt.baseline = true;
  const auto rep = reg.verify(respond(reg.issue_challenge(id), other), opt);
  EXPECT_LT(rep.alpha, 1.0);
  EXPECT_EQ(rep.verdict, Verdict::tampered);
  ASSERT_TRUE(rep.baseline.has_value());
  EXPECT_LT(rep.baseline->mean_cosine, 1.0);

  // Identical encoder: baseline confidence 100 and r = 1 at every epsilon > 0.
  const auto same = reg.verify(respond(reg.issue_challenge(id), f.enc), opt);
  EXPECT_DOUBLE_EQ(same.baseline->confidence_percent, 100.0);
  for (const auto& e : same.baseline->r_by_epsilon)
    if (e.epsilon > 0) EXPECT_EQ(e.r, 1.0);
}

TEST(Protocol, BaselineNeedsReferenceFeatures) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto id = reg.register_entry(f.rec, f.ks, "gina");
  VerifyOptions opt;
  opt.baseline = true;
  EXPECT_EQ(code_of([&] { reg.verify(respond(reg.issue_challenge(id), f.enc), opt); }), ErrorCode::not_found);
  EXPECT_EQ(code_of([&] { baseline_verify(Tensor(), f.feats, {}); }), ErrorCode::not_found);
}

TEST(Protocol, SubsetChallenge) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto id = reg.register_entry(f.rec, f.ks, "hana");
  const auto c = reg.issue_challenge(id, 4);
  ASSERT_EQ(c.indices.size(), 4u);
  EXPECT_TRUE(std::is_sorted(c.indices.begin(), c.indices.end()));
  EXPECT_EQ(c.images, f.ks.images.gather(c.indices));
  VerifyOptions opt;
  opt.pass_threshold = 0;
  const auto rep = reg.verify(respond(c, f.enc), opt);
  EXPECT_EQ(rep.sample_indices, c.indices);
  EXPECT_TRUE(rep.metadata.at("subset").get<bool>());
  const auto full = f.rec.per_sample_ssim(f.ks.images, f.feats);
  // Batch size changes GEMM blocking, so subset and full-batch values agree to rounding only.
  for (std::size_t i = 0; i < c.indices.size(); ++i) EXPECT_NEAR(rep.per_sample_ssim[i], full[c.indices[i]], 1e-9);
  EXPECT_EQ(code_of([&] { reg.issue_challenge(id, 99); }), ErrorCode::invalid_argument);
}

TEST(Protocol, RepeatedVerificationIsReproducible) {
  const auto& f = fx();
  testutil::TempDir d1("reg"), d2("reg");
  std::vector<json> out;
  for (const auto* d : {&d1, &d2}) {
    Registry reg(d->path());
    const auto id = reg.register_entry(f.rec, f.ks, "ivan", &f.feats);
    VerifyOptions opt;
    opt.baseline = true;
    opt.extra_epsilons = {0.01, 0.05};
    for (int k = 0; k < 2; ++k) out.push_back(reg.verify(respond(reg.issue_challenge(id), f.enc), opt).to_json(false));
  }
  for (const auto& j : out) EXPECT_EQ(j.dump(), out[0].dump());
}

TEST(Protocol, ConcurrentVerifications) {
  const auto& f = fx();
  testutil::TempDir dir("reg");
  Registry reg(dir.path());
  const auto id = reg.register_entry(f.rec, f.ks, "judy");
  std::vector<VerificationChallenge> cs;
  for (int t = 0; t < 4; ++t) cs.push_back(reg.issue_challenge(id));
  std::vector<VerificationReport> reps(4);
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) pool.emplace_back([&, t] { reps[t] = reg.verify(respond(cs[t], f.enc)); });
  for (auto& th : pool) th.join();
  std::set<std::string> ids;
  for (const auto& r : reps) {
    ids.insert(r.report_id);
    EXPECT_EQ(r.to_json(false), reps[0].to_json(false));
  }
  EXPECT_EQ(ids.size(), 4u);
}

TEST(Report, JsonAndCsvExport) {
  const auto& f = fx();
  const RegistryEntry e{"ent-000001", "kim", "t", f.rec, f.ks, f.feats};
  std::vector<int> idx(f.ks.size());
  std::iota(idx.begin(), idx.end(), 0);
  VerifyOptions opt;
  opt.baseline = true;
  const auto r = compute_report(e, idx, f.feats, opt);
  EXPECT_EQ(VerificationReport::from_json(r.to_json()).to_json(), r.to_json());
  const std::string csv = r.to_csv();
  EXPECT_EQ(csv.rfind("method,epsilon,r\n", 0), 0u);
  EXPECT_NE(csv.find("baseline,0.10000000000000001,1"), std::string::npos);
  EXPECT_NE(csv.find("sample,index,ssim,cosine"), std::string::npos);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 1 + 2 * 4 + 2 + f.ks.size());
  EXPECT_EQ(code_of([] { VerificationReport::from_json(json{{"entry_id", 3}}); }), ErrorCode::parse);
}

TEST(Service, RoundTripOverJson) {
  const auto& f = fx();
  testutil::TempDir dir("svc");
  Registry reg(dir.path());
  Service svc(reg);
  auto call = [&](const json& req) { return json::parse(svc.handle_text(req.dump())); };

  const json reg_req = {{"op", "REGISTER"},
                        {"owner_id", "lena"},
                        {"watermark", container_to_wire(f.rec.to_container())},
                        {"key_samples", container_to_wire(key_samples_container(f.ks))},
                        {"reference_features", tensor_to_wire(f.feats)},
                        {"encoder_fingerprint", f.enc.fingerprint()}};
  const json r1 = call(reg_req);
  ASSERT_TRUE(r1.at("ok").get<bool>()) << r1.dump();
  const std::string id = r1.at("entry_id");

  const json ch = call({{"op", "CHALLENGE"}, {"entry_id", id}});
  ASSERT_TRUE(ch.at("ok").get<bool>());
  const auto c = challenge_from_wire(ch);
  EXPECT_EQ(c.images, f.ks.images);
  const json v = call({{"op", "VERIFY"},
                       {"entry_id", id},
                       {"nonce", c.nonce},
                       {"features", tensor_to_wire(f.enc.encode(c.images))},
                       {"baseline", true},
                       {"pass_threshold", 0.0}});
  ASSERT_TRUE(v.at("ok").get<bool>()) << v.dump();
  EXPECT_NEAR(v.at("report").at("alpha").get<double>(), 1.0, 1e-6);
  const json g = call({{"op", "GET_REPORT"}, {"report_id", v.at("report").at("report_id")}});
  EXPECT_EQ(g.at("report"), v.at("report"));

  // Errors come back as codes.
  auto err = [&](const json& req) { return call(req).at("error").at("code").get<std::string>(); };
  json bad = reg_req;
  bad["encoder_fingerprint"] = std::string(64, '0');
  EXPECT_EQ(err(bad), "binding");
  auto kc = key_samples_container(f.ks);
  Tensor img = kc.tensor("images");
  img[1] = 1.0f - img[1];
  kc.put("images", img);
  bad = reg_req;
  bad["key_samples"] = container_to_wire(kc);
  EXPECT_EQ(err(bad), "tamper");
  EXPECT_EQ(err({{"op", "VERIFY"}, {"entry_id", id}, {"nonce", c.nonce}, {"features", tensor_to_wire(f.feats)}}),
            "protocol");
  EXPECT_EQ(err({{"op", "CHALLENGE"}, {"entry_id", "ent-000404"}}), "not_found");
  EXPECT_EQ(err({{"op", "DELETE"}}), "protocol");
  EXPECT_EQ(err({{"nothing", 1}}), "protocol");
  EXPECT_EQ(json::parse(svc.handle_text("{not json")).at("error").at("code"), "parse");
  EXPECT_EQ(err({{"op", "CHALLENGE"}}), "parse");
}

TEST(Service, WireArrays) {
  const Tensor t = testutil::random_images(2, 4, 4, 3);
  EXPECT_EQ(tensor_from_wire(tensor_to_wire(t)), t);
  json j = tensor_to_wire(t);
  j["shape"] = {2, 4, 4, 2};
  EXPECT_EQ(code_of([&] { tensor_from_wire(j); }), ErrorCode::parse);
  j = tensor_to_wire(t);
  j["data"] = "abc";
  EXPECT_EQ(code_of([&] { tensor_from_wire(j); }), ErrorCode::parse);
  EXPECT_EQ(tensor_from_wire(tensor_to_wire(Tensor({0, 3}))).shape(), (Shape{0, 3}));
}
