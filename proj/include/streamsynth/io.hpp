#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "streamsynth/fsq.hpp"
#include "streamsynth/rl/dpo.hpp"
#include "streamsynth/seqlm/corpus.hpp"

// Text formats. Every reader reports the 1-based line of the first problem.
//
//   tokens       "#fsq D=<d> K=<k>" then one code index per line
//   corpus       "TEXT <ids> | SPEECH <ids>" per pair
//   features     "SFEA L F" then L lines of F reals
//   preferences  "Y <ids> | W <ids> | L <ids>" per pair

namespace streamsynth::io {

/// Shortest decimal text that parses back to the same double.
inline std::string format_real(double x) {
  char buf[32];
  auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline double parse_real(std::string_view s, std::size_t line) {
  double x = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (r.ec != std::errc{} || r.ptr != s.data() + s.size()) throw ParseError("bad real '" + std::string(s) + "'", line);
  return x;
}

inline std::uint64_t parse_uint(std::string_view s, std::size_t line) {
  std::uint64_t x = 0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), x);
  if (s.empty() || r.ec != std::errc{} || r.ptr != s.data() + s.size())
    throw ParseError("bad integer '" + std::string(s) + "'", line);
  return x;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t p = 0;
  while (p < s.size()) {
    while (p < s.size() && (s[p] == ' ' || s[p] == '\t' || s[p] == '\r')) ++p;
    std::size_t q = p;
    while (q < s.size() && s[q] != ' ' && s[q] != '\t' && s[q] != '\r') ++q;
    if (q > p) out.push_back(s.substr(p, q - p));
    p = q;
  }
  return out;
}

inline void write_ids(std::ostream& os, std::span<const std::size_t> ids) {
  for (auto id : ids) os << ' ' << id;
}

/// Parses "<tag> <ids>" fields separated by '|', checking the tags in order.
inline std::vector<std::vector<std::size_t>> parse_tagged(std::string_view line, std::span<const std::string_view> tags,
                                                          std::size_t lineno) {
  std::vector<std::vector<std::size_t>> out;
  std::size_t start = 0;
  for (std::size_t k = 0; k < tags.size(); ++k) {
    const std::size_t bar = k + 1 < tags.size() ? line.find('|', start) : line.size();
    if (bar == std::string_view::npos) throw ParseError("expected '|' before " + std::string(tags[k + 1]), lineno);
    const auto words = split_ws(line.substr(start, bar - start));
    if (words.empty() || words[0] != tags[k]) throw ParseError("expected field " + std::string(tags[k]), lineno);
    std::vector<std::size_t> ids;
    for (std::size_t w = 1; w < words.size(); ++w) ids.push_back(parse_uint(words[w], lineno));
    out.push_back(std::move(ids));
    start = bar + 1;
  }
  return out;
}

inline bool blank(std::string_view s) { return split_ws(s).empty(); }

// ---- tokens

struct TokenFile {
  std::size_t dim = 8;
  int bound = 1;
  std::vector<fsq::SpeechToken> tokens;
  friend bool operator==(const TokenFile&, const TokenFile&) = default;
};

inline void write_tokens(std::ostream& os, const TokenFile& f) {
  os << "#fsq D=" << f.dim << " K=" << f.bound << '\n';
  for (auto t : f.tokens) os << t.value << '\n';
}

inline TokenFile read_tokens(std::istream& is) {
  TokenFile f;
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty token file", 1);
  const auto head = split_ws(line);
  if (head.size() != 3 || head[0] != "#fsq" || !head[1].starts_with("D=") || !head[2].starts_with("K="))
    throw ParseError("expected header '#fsq D=<d> K=<k>'", 1);
  f.dim = parse_uint(head[1].substr(2), 1);
  f.bound = static_cast<int>(parse_uint(head[2].substr(2), 1));
  fsq::FsqConfig cfg{.dim = f.dim, .bound = f.bound};
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ParseError(e.what(), 1);
  }
  const std::uint64_t size = cfg.codebook_size();
  for (std::size_t n = 2; std::getline(is, line); ++n) {
    if (blank(line)) continue;
    const auto w = split_ws(line);
    if (w.size() != 1) throw ParseError("expected one code per line", n);
    const std::uint64_t v = parse_uint(w[0], n);
    if (v >= size) throw ParseError("code " + std::to_string(v) + " outside the codebook", n);
    f.tokens.push_back({static_cast<std::uint32_t>(v)});
  }
  return f;
}

// ---- corpus

inline void write_corpus(std::ostream& os, std::span<const seqlm::Pair> pairs) {
  for (const auto& p : pairs) {
    os << "TEXT";
    write_ids(os, p.text);
    os << " | SPEECH";
    write_ids(os, p.speech);
    os << '\n';
  }
}

inline std::vector<seqlm::Pair> read_corpus(std::istream& is) {
  static constexpr std::string_view kTags[] = {"TEXT", "SPEECH"};
  std::vector<seqlm::Pair> out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (blank(line)) continue;
    auto f = parse_tagged(line, kTags, n);
    out.push_back({std::move(f[0]), std::move(f[1])});
  }
  return out;
}

// ---- features

inline void write_features(std::ostream& os, const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("write_features: expected a matrix");
  os << "SFEA " << x.rows() << ' ' << x.cols() << '\n';
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) os << (j ? " " : "") << format_real(x(i, j));
    os << '\n';
  }
}

inline Tensor read_features(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty feature file", 1);
  const auto head = split_ws(line);
  if (head.size() != 3 || head[0] != "SFEA") throw ParseError("expected header 'SFEA L F'", 1);
  const std::size_t rows = parse_uint(head[1], 1), cols = parse_uint(head[2], 1);
  if (rows == 0 || cols == 0) throw ParseError("feature extents must be positive", 1);
  Tensor x({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    if (!std::getline(is, line)) throw ParseError("expected " + std::to_string(rows) + " rows", i + 2);
    const auto w = split_ws(line);
    if (w.size() != cols) throw ParseError("expected " + std::to_string(cols) + " values", i + 2);
    for (std::size_t j = 0; j < cols; ++j) x(i, j) = parse_real(w[j], i + 2);
  }
  for (std::size_t n = rows + 2; std::getline(is, line); ++n)
    if (!blank(line)) throw ParseError("trailing data after the last row", n);
  return x;
}

// ---- preferences

inline void write_preferences(std::ostream& os, std::span<const rl::PreferencePair> pairs) {
  for (const auto& p : pairs) {
    os << 'Y';
    write_ids(os, p.text);
    os << " | W";
    write_ids(os, p.preferred);
    os << " | L";
    write_ids(os, p.rejected);
    os << '\n';
  }
}

inline std::vector<rl::PreferencePair> read_preferences(std::istream& is) {
  static constexpr std::string_view kTags[] = {"Y", "W", "L"};
  std::vector<rl::PreferencePair> out;
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (blank(line)) continue;
    auto f = parse_tagged(line, kTags, n);
    out.push_back({std::move(f[0]), std::move(f[1]), std::move(f[2])});
  }
  return out;
}

// ---- files

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory '" + path.parent_path().string() + "': " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Runs `reader` on the file contents; parse errors name the file.
template <class Reader>
auto load(const std::filesystem::path& path, Reader reader) {
  std::istringstream in(read_file(path));
  try {
    return reader(in);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), e.position());
  }
}

template <class Writer>
void save(const std::filesystem::path& path, Writer writer) {
  std::ostringstream out;
  writer(out);
  write_file(path, out.str());
}

}  // namespace streamsynth::io
