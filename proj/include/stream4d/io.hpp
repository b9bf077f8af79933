#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

// Little-endian binary helpers shared by the checkpoint, dataset and cache formats.

namespace stream4d::io {

/// File-format problems: bad magic, unsupported version, truncation, shape mismatch.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// I/O failures; the message always carries the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
template <class U>
U byteswap(U v) {
  auto* p = reinterpret_cast<unsigned char*>(&v);
  for (std::size_t i = 0; i < sizeof(U) / 2; ++i) std::swap(p[i], p[sizeof(U) - 1 - i]);
  return v;
}
}  // namespace detail

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path.string());
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  void put(U v) {
    if constexpr (std::endian::native == std::endian::big) v = detail::byteswap(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(U));
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  void put_span(std::span<const U> vs) {
    if constexpr (std::endian::native == std::endian::little) {
      out_.write(reinterpret_cast<const char*>(vs.data()), static_cast<std::streamsize>(vs.size_bytes()));
    } else {
      for (U v : vs) put(v);
    }
  }

  void put_bytes(std::string_view s) { out_.write(s.data(), static_cast<std::streamsize>(s.size())); }

  void finish() {
    out_.flush();
    if (!out_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path.string());
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  U get() {
    U v{};
    in_.read(reinterpret_cast<char*>(&v), sizeof(U));
    check();
    if constexpr (std::endian::native == std::endian::big) v = detail::byteswap(v);
    return v;
  }

  template <class U>
    requires std::is_arithmetic_v<U>
  std::vector<U> get_vector(std::size_t n) {
    std::vector<U> v(n);
    in_.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(U)));
    check();
    if constexpr (std::endian::native == std::endian::big)
      for (auto& x : v) x = detail::byteswap(x);
    return v;
  }

  std::string get_bytes(std::size_t n) {
    std::string s(n, '\0');
    in_.read(s.data(), static_cast<std::streamsize>(n));
    check();
    return s;
  }

  void expect_magic(std::string_view magic) {
    if (get_bytes(magic.size()) != magic) throw FormatError("bad magic in " + path_.string());
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  void check() {
    if (!in_) throw FormatError("truncated file: " + path_.string());
  }

  std::filesystem::path path_;
  std::ifstream in_;
};

}  // namespace stream4d::io
