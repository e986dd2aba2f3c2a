#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "condenser/tensor.hpp"

namespace condenser {

/// Malformed or unreadable input file.
class FormatError : public Error {
 public:
  using Error::Error;
};

namespace io {

/// Lines without trailing '\n' / '\r'. Throws FormatError naming the path.
std::vector<std::string> read_lines(const std::filesystem::path& path);

std::vector<std::string> split(std::string_view line, char sep);

/// Writes through a temporary sibling file and renames it into place.
void write_atomic(const std::filesystem::path& path, std::string_view bytes);

std::string read_file(const std::filesystem::path& path);

/// Little-endian binary encoder.
class ByteWriter {
 public:
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f64(double v);
  void raw(std::string_view bytes) { out_.append(bytes); }
  /// u32 length followed by the bytes.
  void str(std::string_view s);

  const std::string& bytes() const { return out_; }

 private:
  std::string out_;
};

/// Little-endian binary decoder; reading past the end throws FormatError
/// prefixed with `context`.
class ByteReader {
 public:
  ByteReader(std::string_view bytes, std::string context)
      : bytes_(bytes), context_(std::move(context)) {}

  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  double f64();
  std::string_view raw(std::size_t n);
  std::string str();

  std::size_t remaining() const { return bytes_.size() - pos_; }
  /// Throws unless every byte has been consumed.
  void expect_end() const;
  [[noreturn]] void fail(const std::string& what) const;

 private:
  std::string_view bytes_;
  std::string context_;
  std::size_t pos_ = 0;
};

}  // namespace io
}  // namespace condenser
