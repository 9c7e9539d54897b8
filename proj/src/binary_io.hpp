#pragma once

// Little helpers for the versioned binary formats (checkpoints, corpora).
// Values are written in host byte order; files are not meant to move between
// architectures.

#include "safeclip/common.hpp"

#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

namespace safeclip::io {

class Writer {
 public:
  explicit Writer(std::ostream& out) : out_(out) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  void scalar(T v) {
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }

  void str(const std::string& s) {
    scalar<std::uint64_t>(s.size());
    out_.write(s.data(), static_cast<std::streamsize>(s.size()));
  }

  void magic(const char (&m)[9]) { out_.write(m, 8); }

  template <typename T>
  void vec(const std::vector<T>& v) {
    scalar<std::uint64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(T)));
  }

  void matrix(const Matrix& m) {
    scalar<std::int64_t>(m.rows());
    scalar<std::int64_t>(m.cols());
    out_.write(reinterpret_cast<const char*>(m.data()),
               static_cast<std::streamsize>(m.size() * sizeof(double)));
  }

  void vector(const Vector& v) {
    scalar<std::int64_t>(v.size());
    out_.write(reinterpret_cast<const char*>(v.data()),
               static_cast<std::streamsize>(v.size() * sizeof(double)));
  }

 private:
  std::ostream& out_;
};

class Reader {
 public:
  explicit Reader(std::istream& in) : in_(in) {}

  template <typename T>
    requires std::is_arithmetic_v<T>
  T scalar() {
    T v{};
    read(&v, sizeof(T));
    return v;
  }

  std::string str() {
    auto n = checked_size(scalar<std::uint64_t>());
    std::string s(n, '\0');
    read(s.data(), n);
    return s;
  }

  void expect_magic(const char (&m)[9]) {
    char buf[8];
    read(buf, 8);
    if (std::memcmp(buf, m, 8) != 0) throw InputError("bad file magic, expected " + std::string(m));
  }

  template <typename T>
  std::vector<T> vec() {
    auto n = checked_size(scalar<std::uint64_t>());
    std::vector<T> v(n);
    read(v.data(), n * sizeof(T));
    return v;
  }

  Matrix matrix() {
    auto r = scalar<std::int64_t>();
    auto c = scalar<std::int64_t>();
    if (r < 0 || c < 0) throw InputError("corrupt matrix header");
    Matrix m(r, c);
    read(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
    return m;
  }

  Vector vector() {
    auto n = scalar<std::int64_t>();
    if (n < 0) throw InputError("corrupt vector header");
    Vector v(n);
    read(v.data(), static_cast<std::size_t>(n) * sizeof(double));
    return v;
  }

 private:
  static std::size_t checked_size(std::uint64_t n) {
    if (n > (std::uint64_t{1} << 34)) throw InputError("corrupt length field");
    return static_cast<std::size_t>(n);
  }

  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw InputError("truncated file");
  }

  std::istream& in_;
};

}  // namespace safeclip::io
