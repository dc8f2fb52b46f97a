#pragma once

// `.ssa` named-array container.
//
// Layout (all integers little-endian):
//   "SSA\x01" | u64 header_len | header JSON | array payloads | sha256 hex (64) | "SSAE"
// The header lists every array as {name, dtype, shape, offset, nbytes} with offsets
// relative to the start of the payload section, plus a free-form "meta" object.
// The trailing digest covers every byte before it.

#include <bit>
#include <chrono>
#include <cstdint>
#include <ctime>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "sslauth/error.hpp"
#include "sslauth/hash.hpp"
#include "sslauth/tensor.hpp"

namespace sslauth {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

using json = nlohmann::json;

/// Current UTC time as ISO-8601, e.g. "2024-05-01T12:00:00Z".
inline std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct NamedArray {
  std::string dtype;  // f32 | f64 | i64 | u8
  Shape shape;
  std::string bytes;
};

inline std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "f32") return 4;
  if (dtype == "f64" || dtype == "i64") return 8;
  if (dtype == "u8") return 1;
  fail(ErrorCode::parse, "unknown dtype '" + dtype + "'");
}

class Container {
 public:
  json meta = json::object();

  void put(const std::string& name, const Tensor& t) {
    put_raw(name, "f32", t.shape(), t.data(), t.size() * sizeof(float));
  }
  void put_f64(const std::string& name, const std::vector<double>& v) {
    put_raw(name, "f64", {static_cast<int>(v.size())}, v.data(), v.size() * sizeof(double));
  }
  void put_i64(const std::string& name, const std::vector<std::int64_t>& v) {
    put_raw(name, "i64", {static_cast<int>(v.size())}, v.data(), v.size() * sizeof(std::int64_t));
  }

  bool has(const std::string& name) const { return arrays_.count(name) > 0; }
  const NamedArray& raw(const std::string& name) const {
    auto it = arrays_.find(name);
    require(it != arrays_.end(), ErrorCode::parse, "container has no array '" + name + "'");
    return it->second;
  }
  std::vector<std::string> names() const {
    std::vector<std::string> out;
    for (const auto& [k, _] : arrays_) out.push_back(k);
    return out;
  }

  Tensor tensor(const std::string& name) const {
    const NamedArray& a = raw(name);
    require(a.dtype == "f32", ErrorCode::parse, "array '" + name + "' is not f32");
    FloatBuffer v(a.bytes.size() / sizeof(float));
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return Tensor(a.shape, std::move(v));
  }
  std::vector<double> f64(const std::string& name) const { return typed<double>(name, "f64"); }
  std::vector<std::int64_t> i64(const std::string& name) const { return typed<std::int64_t>(name, "i64"); }

  std::string serialize() const {
    json header;
    header["format"] = "ssa";
    header["version"] = 1;
    header["meta"] = meta;
    header["arrays"] = json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, a] : arrays_) {
      header["arrays"].push_back(
          {{"name", name}, {"dtype", a.dtype}, {"shape", a.shape}, {"offset", offset}, {"nbytes", a.bytes.size()}});
      offset += a.bytes.size();
    }
    const std::string h = header.dump();
    std::string out = "SSA\x01";
    append_u64(out, h.size());
    out += h;
    for (const auto& [_, a] : arrays_) out += a.bytes;
    out += sha256_hex(out);
    out += "SSAE";
    return out;
  }

  static Container deserialize(const std::string& buf) {
    constexpr std::size_t trailer = 64 + 4;
    require(buf.size() >= 12 + trailer && buf.compare(0, 4, "SSA\x01") == 0, ErrorCode::parse,
            "not an .ssa container or truncated");
    require(buf.compare(buf.size() - 4, 4, "SSAE") == 0, ErrorCode::parse, "container truncated (no end marker)");
    const std::size_t body = buf.size() - trailer;
    if (sha256_hex(std::string_view(buf).substr(0, body)) != buf.substr(body, 64))
      fail(ErrorCode::tamper, "container checksum mismatch");
    std::uint64_t hlen = 0;
    std::memcpy(&hlen, buf.data() + 4, 8);
    require(12 + hlen <= body, ErrorCode::parse, "container header overruns file");
    json header;
    try {
      header = json::parse(buf.substr(12, hlen));
    } catch (const json::exception& e) {
      fail(ErrorCode::parse, std::string("container header: ") + e.what());
    }
    Container c;
    c.meta = header.value("meta", json::object());
    const std::size_t base = 12 + hlen;
    for (const auto& e : header.at("arrays")) {
      NamedArray a;
      a.dtype = e.at("dtype").get<std::string>();
      a.shape = e.at("shape").get<Shape>();
      const auto off = e.at("offset").get<std::uint64_t>();
      const auto n = e.at("nbytes").get<std::uint64_t>();
      require(n == shape_numel(a.shape) * dtype_size(a.dtype), ErrorCode::parse, "array size/shape mismatch");
      require(base + off + n <= body, ErrorCode::parse, "array payload overruns file");
      a.bytes = buf.substr(base + off, n);
      c.arrays_.emplace(e.at("name").get<std::string>(), std::move(a));
    }
    return c;
  }

  void write(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string bytes = serialize();
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      require(static_cast<bool>(os), ErrorCode::io, "cannot open " + tmp + " for writing");
      os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
      require(static_cast<bool>(os), ErrorCode::io, "write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static Container read(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorCode::not_found, "file not found: " + path.string());
    std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(buf);
  }

 private:
  std::map<std::string, NamedArray> arrays_;

  void put_raw(const std::string& name, const char* dtype, Shape shape, const void* p, std::size_t n) {
    NamedArray a{dtype, std::move(shape), std::string(static_cast<const char*>(p), n)};
    arrays_[name] = std::move(a);
  }

  template <typename T>
  std::vector<T> typed(const std::string& name, const char* dtype) const {
    const NamedArray& a = raw(name);
    require(a.dtype == dtype, ErrorCode::parse, "array '" + name + "' is not " + dtype);
    std::vector<T> v(a.bytes.size() / sizeof(T));
    std::memcpy(v.data(), a.bytes.data(), a.bytes.size());
    return v;
  }

  static void append_u64(std::string& s, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
};

}  // namespace sslauth
