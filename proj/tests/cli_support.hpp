#pragma once

// Helpers for driving the streamsynth binary from tests.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#ifndef STREAMSYNTH_CLI
#error "STREAMSYNTH_CLI must name the streamsynth executable"
#endif

namespace clitest {

namespace fs = std::filesystem;

struct Result {
  int status = -1;
  std::string output;  // stdout and stderr interleaved
};

/// Runs `prefix streamsynth args` through the shell from `cwd`.
inline Result run(const std::string& args, const fs::path& cwd = fs::current_path(), const std::string& prefix = "") {
  const std::string cmd = "cd '" + cwd.string() + "' && " + prefix + " '" + STREAMSYNTH_CLI + "' " + args + " 2>&1";
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf;
  for (std::size_t n; (n = fread(buf.data(), 1, buf.size(), p)) > 0;) r.output.append(buf.data(), n);
  const int st = pclose(p);
  r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
  return r;
}

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Every regular file under `root`, keyed by relative path.
inline std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out[fs::relative(e.path(), root).string()] = slurp(e.path());
  return out;
}

inline fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("streamsynth_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

/// A configuration small enough that the whole pipeline runs in seconds.
inline const char* kTinyConfig = R"(seed = 11
[data]
pairs = 12
test_pairs = 4
max_text = 6
[fsq]
D = 4
K = 1
steps = 100
[seqlm]
text_vocab = 16
hidden = 32
mlp = 64
[cfm]
mask = causal
steps = 30
hidden = 16
mlp = 32
[rl]
steps = 10
asr_epochs = 5
)";

inline fs::path write_tiny_config(const fs::path& dir) {
  const fs::path p = dir / "tiny.cfg";
  std::ofstream(p) << kTinyConfig;
  return p;
}

inline const std::vector<std::string>& pipeline_commands() {
  static const std::vector<std::string> cmds{
      "gen-data",
      "train fsq",
      "train lm",
      "train cfm",
      "synthesize --mode offline --input out/data/train.corpus",
      "synthesize --mode stream --input out/data/train.corpus",
      "finetune",
      "bench-latency",
      "bench-latency --overlap --chat --flow lookahead",
      "eval",
      "eval --cfm-checkpoint out/checkpoints/cfm.ckpt",
  };
  return cmds;
}

/// Runs every command with the tiny config into `dir/out`; returns the first
/// failure message or an empty string.
inline std::string run_pipeline(const fs::path& dir) {
  const fs::path cfg = write_tiny_config(dir);
  for (const auto& c : pipeline_commands()) {
    const Result r = run("-c '" + cfg.string() + "' -o out " + c, dir);
    if (r.status != 0) return c + " exited " + std::to_string(r.status) + ":\n" + r.output;
  }
  return {};
}

}  // namespace clitest
