#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "streamsynth/cfm/mask.hpp"
#include "streamsynth/fsq.hpp"
#include "streamsynth/io.hpp"
#include "streamsynth/rng.hpp"

// Run configuration: UTF-8 lines of `key = value`, `[section]` headers
// prefixing later keys with "section.", '#' starting a comment. Every key
// has a default; unknown keys and bad values are collected and reported
// together.

namespace streamsynth::app {

struct RunConfig {
  unsigned long long seed = 0;  // distinct from std::size_t for FieldRef

  struct Data {
    std::size_t pairs = 50;
    std::size_t test_pairs = 20;
    std::size_t min_text = 1;
    std::size_t max_text = 12;
  } data;

  struct Fsq {
    std::size_t D = 8;
    std::size_t K = 1;
    std::size_t hidden = 16;
    std::size_t steps = 300;
    double lr = 1e-2;
  } fsq;

  struct Seqlm {
    std::size_t N = 5;
    std::size_t M = 15;
    std::size_t text_vocab = 64;
    std::size_t speech_vocab = 0;  // 0: the FSQ codebook size
    std::size_t hidden = 48;
    std::size_t mlp = 96;
    std::size_t layers = 2;
    std::size_t max_positions = 256;
    std::size_t epochs = 100;
    std::size_t batch = 4;
    double lr = 3e-3;
  } seqlm;

  struct Cfm {
    std::size_t F = 8;
    std::size_t P = 3;
    std::size_t speaker_dim = 16;
    std::size_t hidden = 32;
    std::size_t mlp = 64;
    std::size_t nfe = 10;
    double beta = 0.7;
    std::string mask = "chunk";
    std::size_t chunk = 30;  // frames
    std::size_t steps = 200;
    std::size_t batch = 4;
    double lr = 3e-3;
  } cfm;

  struct Rl {
    std::string objective = "both";
    double tau = 1.0;
    double beta_dpo = 0.1;
    double lambda = 1.0;
    std::size_t steps = 100;
    std::size_t batch = 4;
    double lr = 1e-3;
    std::size_t asr_epochs = 20;
  } rl;

  struct Latency {
    double d_lm = 0.010;
    double d_fm = 0.005;
    double d_voc = 0.002;
    double d_llm = 0.020;
    bool overlap = false;
    bool chat = false;
    std::string flow = "compute";
  } latency;

  std::size_t speech_size() const {
    return seqlm.speech_vocab ? seqlm.speech_vocab : static_cast<std::size_t>(fsq_config().codebook_size());
  }
  fsq::FsqConfig fsq_config() const { return {.dim = fsq.D, .bound = static_cast<int>(fsq.K), .hidden = fsq.hidden}; }
  cfm::MaskSpec mask_spec() const { return {cfm::parse_mask(cfm.mask), cfm.chunk}; }

  /// Independent generator for one module: seeded by derive_seed(seed, name).
  Rng rng(std::string_view module) const { return make_rng(seed, module); }
};

using FieldRef = std::variant<unsigned long long*, std::size_t*, double*, bool*, std::string*>;

/// Every key with its storage, in file order.
inline std::vector<std::pair<std::string, FieldRef>> fields(RunConfig& c) {
  return {
      {"seed", &c.seed},
      {"data.pairs", &c.data.pairs},
      {"data.test_pairs", &c.data.test_pairs},
      {"data.min_text", &c.data.min_text},
      {"data.max_text", &c.data.max_text},
      {"fsq.D", &c.fsq.D},
      {"fsq.K", &c.fsq.K},
      {"fsq.hidden", &c.fsq.hidden},
      {"fsq.steps", &c.fsq.steps},
      {"fsq.lr", &c.fsq.lr},
      {"seqlm.N", &c.seqlm.N},
      {"seqlm.M", &c.seqlm.M},
      {"seqlm.text_vocab", &c.seqlm.text_vocab},
      {"seqlm.speech_vocab", &c.seqlm.speech_vocab},
      {"seqlm.hidden", &c.seqlm.hidden},
      {"seqlm.mlp", &c.seqlm.mlp},
      {"seqlm.layers", &c.seqlm.layers},
      {"seqlm.max_positions", &c.seqlm.max_positions},
      {"seqlm.epochs", &c.seqlm.epochs},
      {"seqlm.batch", &c.seqlm.batch},
      {"seqlm.lr", &c.seqlm.lr},
      {"cfm.F", &c.cfm.F},
      {"cfm.P", &c.cfm.P},
      {"cfm.speaker_dim", &c.cfm.speaker_dim},
      {"cfm.hidden", &c.cfm.hidden},
      {"cfm.mlp", &c.cfm.mlp},
      {"cfm.nfe", &c.cfm.nfe},
      {"cfm.beta", &c.cfm.beta},
      {"cfm.mask", &c.cfm.mask},
      {"cfm.chunk", &c.cfm.chunk},
      {"cfm.steps", &c.cfm.steps},
      {"cfm.batch", &c.cfm.batch},
      {"cfm.lr", &c.cfm.lr},
      {"rl.objective", &c.rl.objective},
      {"rl.tau", &c.rl.tau},
      {"rl.beta_dpo", &c.rl.beta_dpo},
      {"rl.lambda", &c.rl.lambda},
      {"rl.steps", &c.rl.steps},
      {"rl.batch", &c.rl.batch},
      {"rl.lr", &c.rl.lr},
      {"rl.asr_epochs", &c.rl.asr_epochs},
      {"latency.d_lm", &c.latency.d_lm},
      {"latency.d_fm", &c.latency.d_fm},
      {"latency.d_voc", &c.latency.d_voc},
      {"latency.d_llm", &c.latency.d_llm},
      {"latency.overlap", &c.latency.overlap},
      {"latency.chat", &c.latency.chat},
      {"latency.flow", &c.latency.flow},
  };
}

inline std::string field_text(const FieldRef& f) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, double>) return io::format_real(*p);
        else if constexpr (std::is_same_v<T, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<T, std::string>) return *p;
        else return std::to_string(*p);
      },
      f);
}

/// Stores `text` into the field; returns an error message or "".
inline std::string assign_field(const FieldRef& f, std::string_view text) {
  return std::visit(
      [&](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        try {
          if constexpr (std::is_same_v<T, double>) *p = io::parse_real(text, 0);
          else if constexpr (std::is_same_v<T, bool>) {
            if (text == "true") *p = true;
            else if (text == "false") *p = false;
            else return "expected true or false, got '" + std::string(text) + "'";
          } else if constexpr (std::is_same_v<T, std::string>) *p = std::string(text);
          else *p = static_cast<T>(io::parse_uint(text, 0));
        } catch (const ParseError&) {
          return std::string(std::is_same_v<T, double> ? "expected a real" : "expected a non-negative integer") +
                 ", got '" + std::string(text) + "'";
        }
        return "";
      },
      f);
}

/// Semantic checks; one message per violated rule.
inline std::vector<std::string> violations(const RunConfig& c) {
  std::vector<std::string> out;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) out.push_back(msg);
  };
  need(c.data.pairs >= 1, "data.pairs must be at least 1");
  need(c.data.min_text >= 1, "data.min_text must be at least 1");
  need(c.data.min_text <= c.data.max_text, "data.min_text must not exceed data.max_text");
  try {
    c.fsq_config().validate();
  } catch (const ConfigError& e) {
    out.push_back(std::string("fsq.D/fsq.K: ") + e.what());
  }
  need(c.fsq.K <= 64, "fsq.K must be at most 64");
  need(c.fsq.lr > 0.0, "fsq.lr must be positive");
  need(c.seqlm.N >= 1, "seqlm.N must be at least 1");
  need(c.seqlm.M >= 1, "seqlm.M must be at least 1");
  need(c.seqlm.text_vocab >= 1, "seqlm.text_vocab must be at least 1");
  if (c.fsq.D >= 1 && c.fsq.K >= 1 && c.fsq.K <= 64 && c.seqlm.speech_vocab != 0) {
    try {
      need(c.seqlm.speech_vocab == c.fsq_config().codebook_size(),
           "seqlm.speech_vocab must equal the FSQ codebook size (2K+1)^D");
    } catch (const ConfigError&) {
    }
  }
  need(c.seqlm.hidden >= 1 && c.seqlm.mlp >= 1 && c.seqlm.layers >= 1, "seqlm.hidden, mlp and layers must be positive");
  need(c.seqlm.max_positions >= 8, "seqlm.max_positions must be at least 8");
  need(c.seqlm.batch >= 1, "seqlm.batch must be at least 1");
  need(c.seqlm.lr > 0.0, "seqlm.lr must be positive");
  need(c.cfm.F >= 1, "cfm.F must be at least 1");
  need(c.cfm.speaker_dim >= 1, "cfm.speaker_dim must be at least 1");
  need(c.cfm.hidden >= 1 && c.cfm.mlp >= 1, "cfm.hidden and cfm.mlp must be positive");
  need(c.cfm.nfe >= 1, "cfm.nfe must be at least 1");
  need(c.cfm.beta >= 0.0, "cfm.beta must be non-negative");
  try {
    cfm::parse_mask(c.cfm.mask);
  } catch (const ConfigError& e) {
    out.push_back(std::string("cfm.mask: ") + e.what());
  }
  need(c.cfm.chunk >= 1, "cfm.chunk must be at least 1");
  need(c.cfm.batch >= 1, "cfm.batch must be at least 1");
  need(c.cfm.lr > 0.0, "cfm.lr must be positive");
  need(c.rl.objective == "dpo" || c.rl.objective == "asr" || c.rl.objective == "both",
       "rl.objective must be dpo, asr or both");
  need(c.rl.tau > 0.0, "rl.tau must be positive");
  need(c.rl.beta_dpo > 0.0, "rl.beta_dpo must be positive");
  need(c.rl.lambda >= 0.0, "rl.lambda must be non-negative");
  need(c.rl.batch >= 1, "rl.batch must be at least 1");
  need(c.rl.lr > 0.0, "rl.lr must be positive");
  for (auto [name, v] : {std::pair{"latency.d_lm", c.latency.d_lm}, std::pair{"latency.d_fm", c.latency.d_fm},
                         std::pair{"latency.d_voc", c.latency.d_voc}, std::pair{"latency.d_llm", c.latency.d_llm}})
    need(v >= 0.0, std::string(name) + " must be non-negative");
  need(c.latency.flow == "compute" || c.latency.flow == "lookahead", "latency.flow must be compute or lookahead");
  return out;
}

inline std::string join_lines(const std::vector<std::string>& lines) {
  std::string out;
  for (const auto& l : lines) out += (out.empty() ? "" : "\n") + l;
  return out;
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// Parses a configuration over the defaults, then applies `overrides` (later
/// wins). Throws ConfigError listing every problem found, syntax and
/// semantics alike.
inline RunConfig parse_config(std::istream& is, const Overrides& overrides = {}) {
  RunConfig c;
  auto table = fields(c);
  std::map<std::string, FieldRef> lookup(table.begin(), table.end());
  std::map<std::string, std::size_t> seen;
  std::vector<std::string> errors;
  std::string section, line;
  auto trim = [](std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
  };
  for (std::size_t n = 1; std::getline(is, line); ++n) {
    std::string_view s = line;
    if (auto hash = s.find('#'); hash != std::string_view::npos) s = s.substr(0, hash);
    s = trim(s);
    if (s.empty()) continue;
    const std::string where = "line " + std::to_string(n) + ": ";
    if (s.front() == '[') {
      if (s.back() != ']') {
        errors.push_back(where + "unterminated section header");
        continue;
      }
      section = std::string(trim(s.substr(1, s.size() - 2)));
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string_view::npos) {
      errors.push_back(where + "expected key = value");
      continue;
    }
    const std::string key = (section.empty() ? "" : section + ".") + std::string(trim(s.substr(0, eq)));
    const auto value = trim(s.substr(eq + 1));
    auto it = lookup.find(key);
    if (it == lookup.end()) {
      errors.push_back(where + "unknown key '" + key + "'");
      continue;
    }
    if (auto prev = seen.find(key); prev != seen.end()) {
      errors.push_back(where + "duplicate key '" + key + "' (first set on line " + std::to_string(prev->second) + ")");
      continue;
    }
    seen[key] = n;
    if (auto msg = assign_field(it->second, value); !msg.empty()) errors.push_back(where + key + ": " + msg);
  }
  for (const auto& [key, value] : overrides) {
    auto it = lookup.find(key);
    if (it == lookup.end()) errors.push_back("override: unknown key '" + key + "'");
    else if (auto msg = assign_field(it->second, value); !msg.empty()) errors.push_back("override " + key + ": " + msg);
  }
  for (auto& v : violations(c)) errors.push_back(std::move(v));
  if (!errors.empty()) throw ConfigError("invalid configuration:\n" + join_lines(errors));
  return c;
}

inline RunConfig parse_config(const std::string& text, const Overrides& overrides = {}) {
  std::istringstream in(text);
  return parse_config(in, overrides);
}

/// Every key in canonical `key = value` form, sections flattened.
inline std::string canonical(const RunConfig& cfg) {
  RunConfig c = cfg;
  std::string out;
  for (const auto& [k, f] : fields(c)) out += k + " = " + field_text(f) + "\n";
  return out;
}

inline std::uint64_t config_hash(const RunConfig& c) { return fnv1a64(canonical(c)); }

}  // namespace streamsynth::app
