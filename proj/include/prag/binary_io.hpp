#pragma once

#include "prag/error.hpp"
#include "prag/hashing.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

namespace prag::binary {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

/// Append-only little-endian byte buffer.
class Writer {
 public:
  template <class T>
  void put(const T& v) {
    const auto* p = reinterpret_cast<const char*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const char*>(data);
    bytes_.insert(bytes_.end(), p, p + n);
  }
  void put_string(const std::string& s) {
    put<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_floats(const std::vector<float>& v) { put_bytes(v.data(), v.size() * sizeof(float)); }

  /// Appends FNV-1a64 over all bytes written so far.
  void put_checksum() {
    Fnv1a64 h;
    h.update(bytes_.data(), bytes_.size());
    put<std::uint64_t>(h.digest());
  }

  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <class T>
  T get() {
    require(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    require(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> get_floats(std::size_t count) {
    require(count * sizeof(float));
    std::vector<float> v(count);
    std::memcpy(v.data(), bytes_.data() + pos_, count * sizeof(float));
    pos_ += count * sizeof(float);
    return v;
  }
  std::string get_raw(std::size_t n) {
    require(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  /// Verifies the trailing checksum; must be called before parsing the payload.
  void verify_checksum() const {
    if (bytes_.size() < sizeof(std::uint64_t))
      throw Error(ErrorCode::checksum_failure, path_ + ": file too short for checksum");
    const std::size_t body = bytes_.size() - sizeof(std::uint64_t);
    Fnv1a64 h;
    h.update(bytes_.data(), body);
    std::uint64_t stored;
    std::memcpy(&stored, bytes_.data() + body, sizeof(stored));
    if (stored != h.digest()) throw Error(ErrorCode::checksum_failure, path_ + ": checksum mismatch");
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::string& path() const { return path_; }

 private:
  void require(std::size_t n) const {
    if (pos_ + n > bytes_.size())
      throw Error(ErrorCode::format_error, path_ + ": unexpected end of file at byte " +
                                               std::to_string(pos_));
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::string read_file(const std::filesystem::path& path);
/// Writes via a temporary file and rename so readers never see partial files.
void write_file(const std::filesystem::path& path, const std::string& bytes);

}  // namespace prag::binary
