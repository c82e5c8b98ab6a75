#ifndef SOTALIGN_SEMB_HPP
#define SOTALIGN_SEMB_HPP

// SEMB embedding files and the SOTC matrix container.
//
// SEMB layout (little-endian):
//   0..3   magic "SEMB"
//   4..7   u32 version (= 1)
//   8..15  u64 n
//   16..23 u64 d
//   24..   n*d IEEE-754 binary32, row-major
//
// SOTC layout (little-endian), used for teachers and aligners:
//   "SOTC", u32 version (= 1), u32 kind length, kind bytes, u64 entry count,
//   then per entry: u32 name length, name bytes, u64 rows, u64 cols,
//   rows*cols IEEE-754 binary64 row-major.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <zlib.h>

#include <nlohmann/json.hpp>

#include "sotalign/embeddings.hpp"
#include "sotalign/errors.hpp"

namespace sotalign {

static_assert(std::endian::native == std::endian::little, "SEMB I/O assumes a little-endian host");

namespace detail {

class ByteWriter {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void put(T value) {
    bytes(&value, sizeof(T));
  }
  void str(const std::string& s) { bytes(s.data(), s.size()); }
  const std::vector<unsigned char>& buffer() const { return buf_; }

 private:
  std::vector<unsigned char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  void bytes(void* p, std::size_t n) {
    if (remaining() < n) throw FormatError(what_ + ": truncated payload");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T get() {
    T value;
    bytes(&value, sizeof(T));
    return value;
  }
  std::string str(std::size_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  std::size_t remaining() const { return buf_.size() - pos_; }
  std::size_t position() const { return pos_; }

 private:
  const std::vector<unsigned char>& buf_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed: " + path.string());
  return buf;
}

inline void write_file(const std::filesystem::path& path, const std::vector<unsigned char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

constexpr std::size_t kSembHeaderBytes = 24;

}  // namespace detail

/// Encodes `e` as SEMB bytes. Entries are rounded to binary32.
inline std::vector<unsigned char> encode_semb(const Matrix& e) {
  detail::ByteWriter w;
  w.str("SEMB");
  w.put<std::uint32_t>(1);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(e.rows()));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(e.cols()));
  for (Index i = 0; i < e.rows(); ++i)
    for (Index j = 0; j < e.cols(); ++j) w.put<float>(static_cast<float>(e(i, j)));
  return w.buffer();
}

inline EmbeddingMatrix decode_semb(const std::vector<unsigned char>& buf, const std::string& what = "SEMB") {
  detail::ByteReader r(buf, what);
  if (buf.size() < detail::kSembHeaderBytes) throw FormatError(what + ": file shorter than header");
  if (r.str(4) != "SEMB") throw FormatError(what + ": bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != 1) throw FormatError(what + ": unsupported version " + std::to_string(version));
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint64_t>();
  if (n == 0 || d == 0) throw FormatError(what + ": n and d must be positive");
  if (d > UINT64_MAX / n || n * d > (UINT64_MAX - detail::kSembHeaderBytes) / sizeof(float))
    throw FormatError(what + ": header size overflow");
  const std::uint64_t payload = n * d * sizeof(float);
  if (r.remaining() < payload)
    throw FormatError(what + ": truncated payload (expected " + std::to_string(n * d) + " floats, found " +
                      std::to_string(r.remaining() / sizeof(float)) + ")");
  if (r.remaining() > payload) throw FormatError(what + ": trailing bytes after payload");
  Matrix m(static_cast<Index>(n), static_cast<Index>(d));
  for (Index i = 0; i < m.rows(); ++i)
    for (Index j = 0; j < m.cols(); ++j) {
      const float f = r.get<float>();
      if (!std::isfinite(f))
        throw DataError(what + ": non-finite entry at (" + std::to_string(i) + ", " + std::to_string(j) + ")");
      m(i, j) = static_cast<double>(f);
    }
  return EmbeddingMatrix(std::move(m));
}

/// CRC-32 of the float payload of an encoded SEMB buffer.
inline std::uint32_t semb_payload_checksum(const std::vector<unsigned char>& encoded) {
  return detail::crc32_of(encoded.data() + detail::kSembHeaderBytes, encoded.size() - detail::kSembHeaderBytes);
}

struct EmbeddingManifest {
  std::string source;
  std::string modality;
  std::uint32_t checksum = 0;
};

inline std::filesystem::path manifest_path(const std::filesystem::path& semb) {
  return std::filesystem::path(semb.string() + ".json");
}

namespace detail {

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

/// Writes `path` and its sidecar manifest `path.json`; a non-null `run_config` is embedded.
inline void write_embeddings(const std::filesystem::path& path, const EmbeddingMatrix& e,
                             const std::string& source = "", const std::string& modality = "",
                             const nlohmann::ordered_json& run_config = nullptr) {
  const auto buf = encode_semb(e.values());
  detail::write_file(path, buf);
  nlohmann::ordered_json j;
  j["format"] = "SEMB";
  j["version"] = 1;
  j["source"] = source;
  j["modality"] = modality;
  j["n"] = e.rows();
  j["d"] = e.cols();
  j["crc32"] = semb_payload_checksum(buf);
  if (!run_config.is_null()) j["run_config"] = run_config;
  detail::write_json(manifest_path(path), j);
}

inline EmbeddingMatrix load_embeddings(const std::filesystem::path& path) {
  return decode_semb(detail::read_file(path), path.string());
}

/// Reads the sidecar manifest of `path`, if present.
inline std::optional<EmbeddingManifest> load_manifest(const std::filesystem::path& path) {
  const auto mp = manifest_path(path);
  if (!std::filesystem::exists(mp)) return std::nullopt;
  std::ifstream in(mp);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(mp.string() + ": " + e.what());
  }
  EmbeddingManifest m;
  m.source = j.value("source", "");
  m.modality = j.value("modality", "");
  m.checksum = j.value("crc32", std::uint32_t{0});
  return m;
}

/// Named double-precision matrices with a kind tag. Round trips are bit-exact.
struct MatrixContainer {
  std::string kind;
  std::map<std::string, Matrix> entries;

  const Matrix& at(const std::string& name) const {
    const auto it = entries.find(name);
    if (it == entries.end()) throw FormatError("container '" + kind + "' lacks entry '" + name + "'");
    return it->second;
  }
};

inline std::vector<unsigned char> encode_container(const MatrixContainer& c) {
  detail::ByteWriter w;
  w.str("SOTC");
  w.put<std::uint32_t>(1);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.kind.size()));
  w.str(c.kind);
  w.put<std::uint64_t>(c.entries.size());
  for (const auto& [name, m] : c.entries) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
    w.str(name);
    w.put<std::uint64_t>(static_cast<std::uint64_t>(m.rows()));
    w.put<std::uint64_t>(static_cast<std::uint64_t>(m.cols()));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) w.put<double>(m(i, j));
  }
  return w.buffer();
}

inline MatrixContainer decode_container(const std::vector<unsigned char>& buf, const std::string& what = "SOTC") {
  detail::ByteReader r(buf, what);
  if (buf.size() < 4 || r.str(4) != "SOTC") throw FormatError(what + ": bad magic");
  if (const auto v = r.get<std::uint32_t>(); v != 1)
    throw FormatError(what + ": unsupported version " + std::to_string(v));
  MatrixContainer c;
  c.kind = r.str(r.get<std::uint32_t>());
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t e = 0; e < count; ++e) {
    std::string name = r.str(r.get<std::uint32_t>());
    const auto rows = r.get<std::uint64_t>();
    const auto cols = r.get<std::uint64_t>();
    if (cols != 0 && rows > r.remaining() / sizeof(double) / cols) throw FormatError(what + ": truncated payload");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index i = 0; i < m.rows(); ++i)
      for (Index j = 0; j < m.cols(); ++j) m(i, j) = r.get<double>();
    c.entries.emplace(std::move(name), std::move(m));
  }
  if (r.remaining() != 0) throw FormatError(what + ": trailing bytes");
  return c;
}

inline void save_container(const std::filesystem::path& path, const MatrixContainer& c) {
  detail::write_file(path, encode_container(c));
}

/// Sidecar `path.json` for a container file: kind, entry shapes, CRC-32 of the file, extras.
inline void write_container_manifest(const std::filesystem::path& path, const MatrixContainer& c,
                                     const nlohmann::ordered_json& extra = nullptr) {
  const auto buf = encode_container(c);
  nlohmann::ordered_json j;
  j["format"] = "SOTC";
  j["version"] = 1;
  j["kind"] = c.kind;
  for (const auto& [name, m] : c.entries) j["entries"][name] = {m.rows(), m.cols()};
  j["crc32"] = detail::crc32_of(buf.data(), buf.size());
  if (!extra.is_null())
    for (const auto& [key, value] : extra.items()) j[key] = value;
  detail::write_json(manifest_path(path), j);
}

inline MatrixContainer load_container(const std::filesystem::path& path) {
  return decode_container(detail::read_file(path), path.string());
}

}  // namespace sotalign

#endif  // SOTALIGN_SEMB_HPP
