#pragma once

// Shared basics: error taxonomy, RNG, deterministic number formatting,
// atomic file writes.

#include <Eigen/Dense>

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <system_error>
#include <type_traits>

namespace sagd {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;  // rows are samples unless noted otherwise
using Rng = std::mt19937_64;

// A caller broke a stated precondition (wrong shape, empty batch, bad index).
class ContractViolation : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Input is formally valid but numerically degenerate (boundary point,
// near-zero vector where a direction is required).
class DegenerateInput : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// Bad configuration value or unknown option name.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// A component lacks a capability the operation needs (e.g. no input
// gradients available for an attack).
class CapabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training produced a non-finite loss.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Linear algebra failed despite regularization (singular covariance, ...).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Dataset files missing or malformed.
class IngestionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Filesystem-level failure; message carries the offending path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shortest round-trip decimal form of a double. Used for every number we
// write to logs/reports so that identical values produce identical bytes.
inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline double parse_double(const std::string& s) {
  double v = 0.0;
  auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{}) throw IoError("unparsable number: '" + s + "'");
  return v;
}

// Write-to-temp then rename, so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path,
                              const std::string& contents) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path.string() + " (" + ec.message() + ")");
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  std::string s((std::istreambuf_iterator<char>(in)),
                std::istreambuf_iterator<char>());
  return s;
}

namespace detail {

// Byte-exact little-endian field encoding for the binary file formats.
template <typename T>
void append_le(std::string& out, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  static_assert(std::endian::native == std::endian::little,
                "binary formats assume a little-endian host");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T read_le(const std::string& s, size_t& off, const char* what) {
  if (off + sizeof(T) > s.size())
    throw IoError(std::string("truncated field: ") + what);
  T v;
  std::memcpy(&v, s.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace detail

}  // namespace sagd
