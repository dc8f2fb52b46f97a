#pragma once

// Transport-agnostic request/response API over a Registry. Requests and replies are
// JSON objects; arrays travel as {"shape", "dtype": "f32", "data": base64 little-endian}
// and whole artifacts as base64 container bytes.
//
//   {"op": "REGISTER", "owner_id", "watermark", "key_samples"[, "reference_features", "encoder_fingerprint"]}
//   {"op": "CHALLENGE", "entry_id"[, "subset"]}
//   {"op": "VERIFY", "entry_id", "nonce", "features"[, "epsilon", "mode", "pass_threshold", "baseline"]}
//   {"op": "GET_REPORT", "report_id"}
//
// Replies carry "ok": true, or "ok": false with {"error": {"code", "message"}}.

#include <bit>
#include <cstring>
#include <string>

#include "sslauth/hash.hpp"
#include "sslauth/registry.hpp"

namespace sslauth {

static_assert(std::endian::native == std::endian::little, "wire format assumes a little-endian host");

inline json tensor_to_wire(const Tensor& t) {
  const auto* p = reinterpret_cast<const unsigned char*>(t.data());
  return {{"shape", t.shape()}, {"dtype", "f32"}, {"data", base64_encode({p, t.size() * sizeof(float)})}};
}

inline Tensor tensor_from_wire(const json& j) {
  try {
    require(j.at("dtype").get<std::string>() == "f32", ErrorCode::parse, "wire arrays must be f32");
    const Shape shape = j.at("shape").get<Shape>();
    for (int d : shape) require(d >= 0, ErrorCode::parse, "negative dimension in wire array");
    const std::string bytes = base64_decode(j.at("data").get<std::string>());
    require(bytes.size() == shape_numel(shape) * sizeof(float), ErrorCode::parse, "wire array size does not match shape");
    Tensor t(shape);
    std::memcpy(t.data(), bytes.data(), bytes.size());
    return t;
  } catch (const json::exception& e) {
    fail(ErrorCode::parse, std::string("malformed wire array: ") + e.what());
  }
}

inline std::string container_to_wire(const Container& c) {
  const std::string s = c.serialize();
  return base64_encode({reinterpret_cast<const unsigned char*>(s.data()), s.size()});
}

inline Container container_from_wire(const json& j) { return Container::deserialize(base64_decode(j.get<std::string>())); }

inline json challenge_to_wire(const VerificationChallenge& c) {
  return {{"entry_id", c.entry_id}, {"nonce", c.nonce}, {"indices", c.indices}, {"images", tensor_to_wire(c.images)}};
}

inline VerificationChallenge challenge_from_wire(const json& j) {
  VerificationChallenge c;
  c.entry_id = j.at("entry_id").get<std::string>();
  c.nonce = j.at("nonce").get<std::string>();
  c.indices = j.at("indices").get<std::vector<int>>();
  c.images = tensor_from_wire(j.at("images"));
  return c;
}

class Service {
 public:
  explicit Service(Registry& reg) : reg_(reg) {}

  json handle(const json& req) {
    try {
      require(req.is_object() && req.contains("op"), ErrorCode::protocol, "request needs an 'op' field");
      const std::string op = req.at("op").get<std::string>();
      json out;
      if (op == "REGISTER") out = do_register(req);
      else if (op == "CHALLENGE") out = challenge_to_wire(reg_.issue_challenge(req.at("entry_id").get<std::string>(), req.value("subset", 0)));
      else if (op == "VERIFY") out = {{"report", do_verify(req).to_json()}};
      else if (op == "GET_REPORT") out = {{"report", reg_.report(req.at("report_id").get<std::string>()).to_json()}};
      else fail(ErrorCode::protocol, "unknown op '" + op + "'");
      out["ok"] = true;
      return out;
    } catch (const Error& e) {
      return error_reply(to_string(e.code()), e.what());
    } catch (const json::exception& e) {
      return error_reply("parse", e.what());
    }
  }

  std::string handle_text(const std::string& body) {
    json req;
    try {
      req = json::parse(body);
    } catch (const json::exception& e) {
      return error_reply("parse", e.what()).dump();
    }
    return handle(req).dump();
  }

 private:
  Registry& reg_;

  static json error_reply(const std::string& code, const std::string& msg) {
    return {{"ok", false}, {"error", {{"code", code}, {"message", msg}}}};
  }

  json do_register(const json& req) {
    const KeySampleSet ks = key_samples_from_container(container_from_wire(req.at("key_samples")));
    const WatermarkRecord rec = WatermarkRecord::from_container(container_from_wire(req.at("watermark")));
    if (req.contains("encoder_fingerprint"))
      require(req.at("encoder_fingerprint").get<std::string>() == rec.encoder_fingerprint, ErrorCode::binding,
              "watermark is bound to a different encoder fingerprint");
    std::optional<Tensor> ref;
    if (req.contains("reference_features")) ref = tensor_from_wire(req.at("reference_features"));
    const std::string id = reg_.register_entry(rec, ks, req.at("owner_id").get<std::string>(), ref ? &*ref : nullptr);
    return {{"entry_id", id}};
  }

  VerificationReport do_verify(const json& req) {
    VerifyOptions opt;
    opt.decision.epsilon = req.value("epsilon", opt.decision.epsilon);
    if (req.contains("mode")) opt.decision.mode = decision_mode_from_string(req.at("mode").get<std::string>());
    opt.pass_threshold = req.value("pass_threshold", opt.pass_threshold);
    opt.baseline = req.value("baseline", false);
    if (req.contains("extra_epsilons")) opt.extra_epsilons = req.at("extra_epsilons").get<std::vector<double>>();
    VerificationResponse resp{req.at("entry_id").get<std::string>(), req.at("nonce").get<std::string>(),
                              tensor_from_wire(req.at("features")), req.value("encoder_fingerprint", "")};
    return reg_.verify(resp, opt);
  }
};

}  // namespace sslauth
