#pragma once

// Small file helpers: raw little-endian double payloads and key=value manifests.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace dunets::io {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t r = 0;
  for (int i = 0; i < 8; ++i) r |= ((v >> (8 * i)) & 0xff) << (8 * (7 - i));
  return r;
}

inline void append_le_doubles(std::string& buf, const double* data, std::size_t n) {
  const std::size_t off = buf.size();
  buf.resize(off + 8 * n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t bits = to_le(std::bit_cast<std::uint64_t>(data[i]));
    std::memcpy(buf.data() + off + 8 * i, &bits, 8);
  }
}

inline void decode_le_doubles(const char* src, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    std::uint64_t bits;
    std::memcpy(&bits, src + 8 * i, 8);
    out[i] = std::bit_cast<double>(to_le(bits));
  }
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

inline void write_doubles(const std::filesystem::path& path, const std::vector<double>& v) {
  std::string buf;
  append_le_doubles(buf, v.data(), v.size());
  write_file(path, buf);
}

inline std::vector<double> read_doubles(const std::filesystem::path& path, std::size_t expected) {
  const std::string bytes = read_file(path);
  if (bytes.size() != 8 * expected)
    throw IoError(path.string() + ": expected " + std::to_string(expected) + " doubles, found " +
                  std::to_string(bytes.size()) + " bytes");
  std::vector<double> v(expected);
  decode_le_doubles(bytes.data(), v.data(), expected);
  return v;
}

/// Ordered key=value text file; '#' starts a comment line.
using Manifest = std::map<std::string, std::string>;

inline std::string format_manifest(const Manifest& m, const std::string& header) {
  std::string out = "# " + header + "\n";
  for (const auto& [k, v] : m) out += k + "=" + v + "\n";
  return out;
}

inline Manifest parse_manifest(const std::string& text, const std::string& origin) {
  Manifest m;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError(origin + ": malformed manifest line '" + line + "'");
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

inline const std::string& require(const Manifest& m, const std::string& key, const std::string& origin) {
  auto it = m.find(key);
  if (it == m.end()) throw IoError(origin + ": missing key '" + key + "'");
  return it->second;
}

/// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

}  // namespace dunets::io
