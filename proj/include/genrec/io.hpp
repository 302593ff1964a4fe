#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace genrec::io {

// Shortest-round-trip text form of a float. %.9g preserves every float32
// bit pattern across write/parse, which the bit-exact serialization
// contracts rely on.
inline std::string fmt(float v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.9g", static_cast<double>(v));
  return buf;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::string& content);

// Splits on any whitespace.
std::vector<std::string> tokenize(const std::string& text);

std::int64_t parse_int(const std::string& tok, const std::string& context);
double parse_double(const std::string& tok, const std::string& context);

}  // namespace genrec::io
