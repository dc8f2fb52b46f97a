#pragma once

// Experiment manifests: a TOML subset (key = value, [table], [[array-of-tables]],
// strings, integers, floats, booleans, flat arrays, # comments) read into JSON.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "sslauth/attacks.hpp"
#include "sslauth/container.hpp"
#include "sslauth/encoder.hpp"
#include "sslauth/hash.hpp"
#include "sslauth/registry.hpp"
#include "sslauth/watermark.hpp"

namespace sslauth {

namespace detail {

class TomlReader {
 public:
  TomlReader(std::string text, std::string origin) : src_(std::move(text)), origin_(std::move(origin)) {}

  json parse() {
    json root = json::object();
    json* table = &root;
    while (!at_end()) {
      skip_space_and_comments();
      if (at_end()) break;
      if (peek() == '[') {
        table = open_table(root);
      } else {
        const std::string key = read_key();
        skip_inline_space();
        expect('=');
        skip_inline_space();
        require(!table->contains(key), ErrorCode::parse, where() + "duplicate key '" + key + "'");
        (*table)[key] = read_value();
      }
      end_of_line();
    }
    return root;
  }

 private:
  std::string src_, origin_;
  std::size_t pos_ = 0;
  int line_ = 1;

  bool at_end() const { return pos_ >= src_.size(); }
  char peek() const { return at_end() ? '\0' : src_[pos_]; }
  char get() {
    const char c = src_[pos_++];
    if (c == '\n') ++line_;
    return c;
  }
  std::string where() const { return origin_ + ":" + std::to_string(line_) + ": "; }
  void expect(char c) {
    require(peek() == c, ErrorCode::parse, where() + "expected '" + std::string(1, c) + "'");
    get();
  }

  void skip_inline_space() {
    while (peek() == ' ' || peek() == '\t') get();
  }
  void skip_space_and_comments() {
    while (!at_end()) {
      if (std::isspace(static_cast<unsigned char>(peek()))) get();
      else if (peek() == '#')
        while (!at_end() && peek() != '\n') get();
      else break;
    }
  }
  void end_of_line() {
    skip_inline_space();
    if (peek() == '#')
      while (!at_end() && peek() != '\n') get();
    require(at_end() || peek() == '\n' || peek() == '\r', ErrorCode::parse, where() + "unexpected trailing text");
  }

  std::string read_key() {
    std::string k;
    while (std::isalnum(static_cast<unsigned char>(peek())) || peek() == '_' || peek() == '-' || peek() == '.') k += get();
    require(!k.empty(), ErrorCode::parse, where() + "expected a key");
    return k;
  }

  json* open_table(json& root) {
    get();
    const bool array = peek() == '[';
    if (array) get();
    skip_inline_space();
    const std::string name = read_key();
    skip_inline_space();
    expect(']');
    if (array) expect(']');
    if (array) {
      if (!root.contains(name)) root[name] = json::array();
      require(root[name].is_array(), ErrorCode::parse, where() + "'" + name + "' is not an array of tables");
      root[name].push_back(json::object());
      return &root[name].back();
    }
    require(!root.contains(name), ErrorCode::parse, where() + "table '" + name + "' defined twice");
    root[name] = json::object();
    return &root[name];
  }

  json read_value() {
    const char c = peek();
    if (c == '"') return read_string();
    if (c == '[') {
      get();
      json arr = json::array();
      for (;;) {
        skip_space_and_comments();
        if (peek() == ']') break;
        arr.push_back(read_value());
        skip_space_and_comments();
        if (peek() == ',') get();
        else break;
      }
      skip_space_and_comments();
      expect(']');
      return arr;
    }
    std::string tok;
    while (!at_end() && (std::isalnum(static_cast<unsigned char>(peek())) || std::strchr("+-._", peek()))) tok += get();
    if (tok == "true") return true;
    if (tok == "false") return false;
    std::erase(tok, '_');
    require(!tok.empty(), ErrorCode::parse, where() + "expected a value");
    const bool is_float = tok.find_first_of(".eE") != std::string::npos || tok == "inf" || tok == "nan";
    try {
      std::size_t used = 0;
      if (is_float) {
        const double v = std::stod(tok, &used);
        if (used == tok.size()) return v;
      } else {
        const long long v = std::stoll(tok, &used);
        if (used == tok.size()) return v;
      }
    } catch (const std::exception&) {
    }
    fail(ErrorCode::parse, where() + "cannot parse value '" + tok + "'");
  }

  std::string read_string() {
    get();
    std::string s;
    while (!at_end() && peek() != '"') {
      char c = get();
      require(c != '\n', ErrorCode::parse, where() + "unterminated string");
      if (c == '\\') {
        require(!at_end(), ErrorCode::parse, where() + "unterminated string");
        switch (char e = get()) {
          case 'n': c = '\n'; break;
          case 't': c = '\t'; break;
          case '"': c = '"'; break;
          case '\\': c = '\\'; break;
          default: fail(ErrorCode::parse, where() + "unsupported escape '\\" + std::string(1, e) + "'");
        }
      }
      s += c;
    }
    expect('"');
    return s;
  }
};

}  // namespace detail

inline json parse_toml(const std::string& text, const std::string& origin = "<manifest>") {
  return detail::TomlReader(text, origin).parse();
}

/// Applies a "section.key=value" override. The value is read as a TOML value, or as a
/// bare string when it does not parse as one.
inline void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos && eq > 0, ErrorCode::config, "override must look like section.key=value");
  const std::string path = assignment.substr(0, eq);
  json parsed;
  try {
    parsed = parse_toml("v = " + assignment.substr(eq + 1), "override");
  } catch (const Error&) {
    parsed = {{"v", assignment.substr(eq + 1)}};
  }
  json* node = &doc;
  std::size_t start = 0;
  for (;;) {
    const auto dot = path.find('.', start);
    const std::string part = path.substr(start, dot - start);
    require(!part.empty(), ErrorCode::config, "bad override path '" + path + "'");
    if (node->is_array()) {  // [[array]] element by index, e.g. attack.0.epochs
      const bool numeric = std::all_of(part.begin(), part.end(), [](char c) { return std::isdigit(static_cast<unsigned char>(c)); });
      const std::size_t i = numeric ? std::stoul(part) : node->size();
      require(dot != std::string::npos && i < node->size(), ErrorCode::config,
              "override path '" + path + "' has a bad array index");
      node = &(*node)[i];
    } else {
      require(node->is_object(), ErrorCode::config, "override path '" + path + "' crosses a non-table value");
      if (dot == std::string::npos) {
        (*node)[part] = parsed.at("v");
        return;
      }
      if (!node->contains(part)) (*node)[part] = json::object();
      node = &(*node)[part];
    }
    start = dot + 1;
  }
}

struct ExperimentManifest {
  std::string name = "experiment";
  std::filesystem::path output_dir = "runs/experiment";
  std::string data_root;

  // Encoder.
  std::string encoder_dataset = "tinytoy";
  int encoder_train_size = 0;  // synthetic datasets only; 0 keeps the default
  EncoderArch encoder_arch;
  ContrastiveTrainConfig encoder_train;

  // Key samples.
  std::string keys_dataset = "tinytoy";
  int classes = 2;
  int per_class = 10;
  std::uint64_t keys_seed = 0;

  VerifierTrainConfig verifier;
  VerifyOptions decision;
  std::string owner_id = "owner";

  std::string attack_dataset;  // defaults to the encoder dataset
  std::vector<AttackSpec> attacks;

  json document = json::object();  // the parsed manifest after overrides
  std::string hash;                // sha256 of the canonical document

  static ExperimentManifest from_json(const json& doc) {
    ExperimentManifest m;
    m.document = doc;
    m.hash = sha256_hex(doc.dump());
    try {
      m.name = doc.value("name", m.name);
      m.output_dir = doc.value("output_dir", "runs/" + m.name);
      m.data_root = doc.value("data_root", "");
      m.owner_id = doc.value("owner_id", m.owner_id);
      const json enc = doc.value("encoder", json::object());
      m.encoder_dataset = enc.value("dataset", m.encoder_dataset);
      m.encoder_train_size = enc.value("train_size", 0);
      m.encoder_arch = EncoderArch::parse(enc.value("arch", m.encoder_arch.id()));
      auto& et = m.encoder_train;
      et.epochs = enc.value("epochs", et.epochs);
      et.batch_size = enc.value("batch_size", et.batch_size);
      et.temperature = enc.value("temperature", et.temperature);
      et.learning_rate = enc.value("learning_rate", et.learning_rate);
      et.seed = enc.value("seed", et.seed);

      const json keys = doc.value("keys", json::object());
      m.keys_dataset = keys.value("dataset", m.encoder_dataset);
      m.classes = keys.value("classes", m.classes);
      m.per_class = keys.value("per_class", m.per_class);
      m.keys_seed = keys.value("seed", m.keys_seed);

      const json ver = doc.value("verifier", json::object());
      auto& v = m.verifier;
      v.epochs = ver.value("epochs", v.epochs);
      v.learning_rate = ver.value("learning_rate", v.learning_rate);
      v.schedule = lr_schedule_from_string(ver.value("schedule", std::string(to_string(v.schedule))));
      v.width = ver.value("width", v.width);
      v.whitening_reg = ver.value("whitening_reg", v.whitening_reg);
      v.seed = ver.value("seed", v.seed);
      if (ver.contains("ssim")) v.ssim = ver.at("ssim").get<SsimConfig>();

      const json dec = doc.value("decision", json::object());
      auto& d = m.decision;
      d.decision.epsilon = dec.value("epsilon", d.decision.epsilon);
      d.decision.mode = decision_mode_from_string(dec.value("mode", std::string(to_string(d.decision.mode))));
      d.pass_threshold = dec.value("pass_threshold", d.pass_threshold);
      d.extra_epsilons = dec.value("epsilons", std::vector<double>{});
      d.baseline = dec.value("baseline", false);

      m.attack_dataset = doc.value("attack_dataset", m.encoder_dataset);
      for (const auto& a : doc.value("attack", json::array())) {
        AttackSpec s;
        s.name = a.at("name").get<std::string>();
        s.kind = attack_kind_from_string(a.at("kind").get<std::string>());
        s.seed = a.value("seed", std::uint64_t{0});
        s.params = a;
        for (const char* k : {"name", "kind", "seed"}) s.params.erase(k);
        m.attacks.push_back(std::move(s));
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::config, "manifest: " + std::string(e.what()));
    }
    m.validate();
    return m;
  }

  void validate() const {
    encoder_train.validate();
    verifier.validate();
    decision.validate();
    require(classes >= 1 && per_class >= 1, ErrorCode::config, "manifest: keys.classes and keys.per_class must be >= 1");
    std::vector<std::string> names;
    for (const auto& a : attacks) {
      require(!a.name.empty() && a.name.find('/') == std::string::npos, ErrorCode::config,
              "manifest: attack names must be non-empty and contain no '/'");
      require(std::find(names.begin(), names.end(), a.name) == names.end(), ErrorCode::config,
              "manifest: duplicate attack name '" + a.name + "'");
      names.push_back(a.name);
      a.validate();
    }
  }

  LoadOptions load_options(const std::string& dataset) const {
    LoadOptions o;
    if (dataset == encoder_dataset) o.synthetic_train_size = encoder_train_size;
    return o;
  }
};

inline ExperimentManifest load_manifest(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
  std::ifstream is(path);
  if (!is) fail(ErrorCode::not_found, "manifest not found: " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  json doc = parse_toml(ss.str(), path.filename().string());
  for (const auto& o : overrides) apply_override(doc, o);
  return ExperimentManifest::from_json(doc);
}

}  // namespace sslauth
