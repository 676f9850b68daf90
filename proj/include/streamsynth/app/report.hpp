#pragma once

#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>

#include "streamsynth/io.hpp"

namespace streamsynth::app {

inline constexpr const char* kArtifactVersion = "streamsynth-1";

/// Named scalar results of one command plus where they came from. Text form:
/// `key=value` lines, provenance first, then `metric.<name>=<real>` sorted by
/// name.
struct MetricsReport {
  std::string command;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;
  std::string version = kArtifactVersion;
  std::map<std::string, double> metrics;

  friend bool operator==(const MetricsReport&, const MetricsReport&) = default;
};

inline std::string hex64(std::uint64_t x) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(x));
  return buf;
}

inline void write_report(std::ostream& os, const MetricsReport& r) {
  os << "command=" << r.command << '\n'
     << "config_hash=" << hex64(r.config_hash) << '\n'
     << "seed=" << r.seed << '\n'
     << "version=" << r.version << '\n';
  for (const auto& [k, v] : r.metrics) os << "metric." << k << '=' << io::format_real(v) << '\n';
}

inline std::string report_text(const MetricsReport& r) {
  std::ostringstream os;
  write_report(os, r);
  return os.str();
}

inline MetricsReport read_report(std::istream& is) {
  MetricsReport r;
  bool have[4] = {};
  std::string line;
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    if (io::blank(line)) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key=value", n);
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    if (key == "command") {
      r.command = value;
      have[0] = true;
    } else if (key == "config_hash") {
      std::uint64_t h = 0;
      auto res = std::from_chars(value.data(), value.data() + value.size(), h, 16);
      if (value.size() != 16 || res.ec != std::errc{} || res.ptr != value.data() + value.size())
        throw ParseError("config_hash must be 16 hex digits", n);
      r.config_hash = h;
      have[1] = true;
    } else if (key == "seed") {
      r.seed = io::parse_uint(value, n);
      have[2] = true;
    } else if (key == "version") {
      r.version = value;
      have[3] = true;
    } else if (key.starts_with("metric.") && key.size() > 7) {
      if (!r.metrics.emplace(key.substr(7), io::parse_real(value, n)).second)
        throw ParseError("duplicate metric " + key.substr(7), n);
    } else {
      throw ParseError("unknown report key '" + key + "'", n);
    }
  }
  for (bool h : have)
    if (!h) throw ParseError("report lacks command, config_hash, seed or version", 0);
  return r;
}

}  // namespace streamsynth::app
