#pragma once

// Little-endian helpers shared by the EMB1, MILP, SAE1 and ACT1 formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "histoprog/errors.hpp"

namespace histoprog::binio {

class Writer {
 public:
  void bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    buf_.insert(buf_.end(), p, p + n);
  }
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(std::uint8_t(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  template <typename T>
  void f32s(std::span<const T> values) {
    for (const T v : values) f32(static_cast<float>(v));
  }

  const std::vector<std::uint8_t>& buffer() const { return buf_; }

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ValidationError("cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(buf_.data()), std::streamsize(buf_.size()));
    if (!out) throw ValidationError("failed writing " + path.string());
  }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked reader; `truncated()` is called when the payload runs out.
class Reader {
 public:
  explicit Reader(std::vector<std::uint8_t> data) : data_(std::move(data)) {}

  static std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  bool has(std::size_t n) const { return remaining() >= n; }

  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, data_.data() + pos_, n);
    pos_ += n;
  }
  std::uint8_t u8() {
    need(1);
    return data_[pos_++];
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(data_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(data_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32() { return std::bit_cast<std::int32_t>(u32()); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  template <typename T>
  void f32s(std::span<T> out) {
    need(out.size() * 4);
    for (T& v : out) v = static_cast<T>(f32());
  }

 private:
  void need(std::size_t n) const {
    if (!has(n)) throw ValidationError("truncated payload");
  }
  std::vector<std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace histoprog::binio
