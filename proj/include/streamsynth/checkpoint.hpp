#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "streamsynth/nn.hpp"

// Checkpoint layout (all integers little-endian):
//
//   "SSYN"                      4 bytes magic
//   u32 version                 currently 1
//   u32 metadata byte length
//   metadata                    UTF-8 "key=value\n" lines
//   per parameter, in declaration order:
//     u64 element count
//     f64[count]                IEEE-754 binary64
//
// The metadata always carries `module`, `params` and one
// `param.<i>=<name> <d0>x<d1>...` line per tensor.

namespace streamsynth::checkpoint {

inline constexpr char kMagic[4] = {'S', 'S', 'Y', 'N'};
inline constexpr std::uint32_t kVersion = 1;

using Metadata = std::map<std::string, std::string>;

namespace detail {

template <class T>
void write_le(std::ostream& os, T value) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&value), sizeof value);
}

template <class T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof value);
  if (!is) throw IoError("checkpoint: truncated file");
  return value;
}

inline std::string shape_text(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace detail

inline void write(std::ostream& os, const std::string& module, const ParameterSet& params, Metadata extra = {}) {
  extra["module"] = module;
  extra["params"] = std::to_string(params.size());
  for (std::size_t i = 0; i < params.size(); ++i)
    extra["param." + std::to_string(i)] = params.name(i) + " " + detail::shape_text(params[i].shape);
  std::string meta;
  for (const auto& [k, v] : extra) meta += k + "=" + v + "\n";

  os.write(kMagic, 4);
  detail::write_le<std::uint32_t>(os, kVersion);
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(meta.size()));
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& t = params[i];
    detail::write_le<std::uint64_t>(os, t.size());
    for (double x : t.data) detail::write_le<double>(os, x);
  }
}

inline void save(const std::filesystem::path& path, const std::string& module, const ParameterSet& params,
                 Metadata extra = {}) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write checkpoint " + path.string());
  write(os, module, params, std::move(extra));
  if (!os) throw IoError("failed writing checkpoint " + path.string());
}

/// Reads only the metadata block.
inline Metadata read_metadata(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("checkpoint: bad magic");
  const auto version = detail::read_le<std::uint32_t>(is);
  if (version != kVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto len = detail::read_le<std::uint32_t>(is);
  std::string meta(len, '\0');
  is.read(meta.data(), len);
  if (!is) throw IoError("checkpoint: truncated metadata");
  Metadata out;
  std::istringstream lines(meta);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw IoError("checkpoint: malformed metadata line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

/// Loads values into `params`, which must match the stored names and shapes.
inline Metadata read(std::istream& is, const std::string& module, const ParameterSet& params) {
  Metadata meta = read_metadata(is);
  if (meta["module"] != module)
    throw IoError("checkpoint: expected module '" + module + "', found '" + meta["module"] + "'");
  if (meta["params"] != std::to_string(params.size()))
    throw IoError("checkpoint: parameter count mismatch for module " + module);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string expect = params.name(i) + " " + detail::shape_text(params[i].shape);
    if (meta["param." + std::to_string(i)] != expect)
      throw IoError("checkpoint: parameter " + std::to_string(i) + " is '" + meta["param." + std::to_string(i)] +
                    "', expected '" + expect + "'");
    const auto count = detail::read_le<std::uint64_t>(is);
    if (count != params[i].size()) throw IoError("checkpoint: element count mismatch for " + params.name(i));
    for (auto& x : params[i].data) x = detail::read_le<double>(is);
  }
  return meta;
}

inline Metadata load(const std::filesystem::path& path, const std::string& module, const ParameterSet& params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint: " + path.string());
  return read(is, module, params);
}

inline Metadata load_metadata(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("missing checkpoint: " + path.string());
  return read_metadata(is);
}

}  // namespace streamsynth::checkpoint
