#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "ropelab/corpus.h"
#include "ropelab/model.h"
#include "ropelab/train.h"

namespace ropelab {

// Parameters of the approximate-attention methods applied at extension time.
struct ExtensionParams {
  long C_prime = 256;
  int G = 10;   // LM-Infinite global tokens
  int M = 0;    // LM-Infinite window / Self-Extend neighbours; 0 means C, C/2
  int N = 4;    // Self-Extend group size
  int B = 32;   // blockwise block / landmark chunk
  int top_n = 2;
};

struct EvalParams {
  std::vector<int> ppl_lens{64, 128, 256};
  int ppl_window = 16;
  std::uint64_t ppl_tokens = 8192;
  std::vector<int> niah_lens{64, 128, 192, 256};
  std::vector<Real> niah_depths{0.0, 0.25, 0.5, 0.75, 1.0};
  int niah_cases = 10;
  int nll_bucket = 32;
  std::vector<Real> grid_factors{1, 2, 4, 8, 16};
  std::vector<int> grid_lens{128, 256, 512};
  // Score lengths beyond the trained context of a frozen exact model as "-".
  bool strict_context = false;
};

// Everything an experiment needs, read from `key = value` text. The defaults
// are the desk preset.
struct RunConfig {
  std::uint64_t seed = 0;
  bool seed_set = false;

  TinyLMConfig model;
  Vocab vocab;
  std::uint64_t language_seed = 1234;
  std::vector<CorpusSource> sources;
  // Document lengths used while fine-tuning, per source.
  std::vector<LengthRange> extend_lengths;

  TrainRecipe pretrain;
  TrainRecipe extend;
  Real extend_init_std = 0.02;  // fresh adapters and offsets
  ExtensionParams extension;
  EvalParams eval;

  RunConfig();

  // Every key with its current value, one "key = value" line each, sorted.
  std::string canonical() const;
  // SHA-256 over canonical().
  std::string hash() const;
  // Hash of the fine-tuning recipe and the data stream it consumes.
  std::string recipe_hash() const;

  // Sets one key; throws ConfigError naming the key when it is unknown or its
  // value does not parse.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  std::vector<std::string> keys() const;

  // Cross-field checks; throws ConfigError.
  void validate() const;
};

// Parses `key = value` lines with '#' comments. Keys are applied in order.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

// "key=value" as given on a command line.
void apply_override(RunConfig& config, const std::string& assignment);

std::string sha256_hex(std::string_view data);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace ropelab
