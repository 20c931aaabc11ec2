#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "ropelab/corpus.h"
#include "ropelab/model.h"

namespace ropelab {

// What the metrics need from a model.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;
  virtual std::string name() const = 0;
  virtual int vocab_size() const = 0;
  // Longest sequence the model accepts; -1 when unbounded.
  virtual long max_length() const { return -1; }
  // nll[i] = -log p(seq[i+1] | seq[0..i]); size seq.size() - 1.
  virtual std::vector<Real> token_nll(std::span<const int> seq) const = 0;
  // token_nll for several sequences of one length.
  virtual std::vector<std::vector<Real>> token_nll_batch(
      std::span<const Document> seqs) const;
  // Greedy continuation of `prompt` by `count` tokens.
  virtual Document greedy(std::span<const int> prompt, int count) const = 0;
};

// Inference-mode view of a TinyLM.
class TinyLMScorer final : public LanguageModel {
 public:
  TinyLMScorer(const TinyLM& model, std::string name, bool use_ema = true);
  std::string name() const override { return name_; }
  int vocab_size() const override { return model_.config().vocab_size; }
  long max_length() const override { return model_.config().attention.max_length(); }
  std::vector<Real> token_nll(std::span<const int> seq) const override;
  std::vector<std::vector<Real>> token_nll_batch(std::span<const Document> seqs) const override;
  Document greedy(std::span<const int> prompt, int count) const override;

 private:
  const TinyLM& model_;
  std::string name_;
  ForwardOptions options_;
};

// Context-free token frequencies with add-`smoothing` counts.
class UnigramModel final : public LanguageModel {
 public:
  UnigramModel(int vocab_size, Real smoothing = 0.5);
  void fit(std::span<const int> tokens);
  std::string name() const override { return "unigram"; }
  int vocab_size() const override { return int(logp_.size()); }
  std::vector<Real> token_nll(std::span<const int> seq) const override;
  Document greedy(std::span<const int> prompt, int count) const override;

 private:
  std::vector<Real> counts_;
  std::vector<Real> logp_;
  Real smoothing_;
};

// Answers a needle query by copying what followed the last MARK.
class NeedleOracle final : public LanguageModel {
 public:
  explicit NeedleOracle(int vocab_size) : vocab_(vocab_size) {}
  std::string name() const override { return "needle-oracle"; }
  int vocab_size() const override { return vocab_; }
  std::vector<Real> token_nll(std::span<const int> seq) const override;
  Document greedy(std::span<const int> prompt, int count) const override;

 private:
  int vocab_;
};

// Emits uniformly random tokens.
class RandomModel final : public LanguageModel {
 public:
  RandomModel(int vocab_size, std::uint64_t seed) : vocab_(vocab_size), seed_(seed) {}
  std::string name() const override { return "random"; }
  int vocab_size() const override { return vocab_; }
  std::vector<Real> token_nll(std::span<const int> seq) const override;
  Document greedy(std::span<const int> prompt, int count) const override;

 private:
  int vocab_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Sliding-window perplexity.

// Per-token NLL, indexed by token position; position 0 is never scored and
// holds NaN. The first placement scores all of its tokens; each later
// placement moves the context end by `stride` and scores only the new
// tokens; a final placement flush with the end picks up any remainder.
struct SlidingScores {
  std::vector<Real> nll;
  std::size_t scored = 0;
  std::size_t placements = 0;
};

// Stride used for a given window: the window itself, capped so that every
// placement scores tokens that have a predecessor.
int sliding_stride(int eval_len, int window);

SlidingScores sliding_nll(const LanguageModel& model, std::span<const int> tokens,
                          int eval_len, int stride);

Real perplexity_sliding(const LanguageModel& model, std::span<const int> tokens,
                        int eval_len, int window = 256);

// ---------------------------------------------------------------------------
// Needle in a haystack.

struct NiahCase {
  Document tokens;  // haystack with the needle
  Document query;
  Document answer;
  int context_len = 0;
  Real depth = 0;
  int needle_start = 0;
  int needle_len = 0;
};

// A case whose haystack, query and answer together fill `context_len`; the
// needle starts at round(depth * (haystack_len - needle_len)).
NiahCase niah_generate(const Language& language, int context_len, Real depth,
                       std::uint64_t seed);

// 1 iff the greedy continuation contains the answer as a contiguous run.
bool niah_correct(const LanguageModel& model, const NiahCase& c);
Real niah_score(const LanguageModel& model, std::span<const NiahCase> cases);

struct NiahCell {
  int context_len = 0;
  Real depth = 0;
  Real accuracy = 0;
  int cases = 0;
};

// Cells are seeded from (seed, length, depth), so their values do not depend
// on evaluation order.
std::vector<NiahCell> niah_grid(const LanguageModel& model, const Language& language,
                                std::span<const int> lengths, std::span<const Real> depths,
                                int cases_per_cell, std::uint64_t seed);
std::uint64_t niah_cell_seed(std::uint64_t seed, int context_len, Real depth);

// ---------------------------------------------------------------------------
// NLL by position and scale-factor grid search.

// Mean NLL per position bucket over consecutive length-C' windows of
// `tokens`. A prediction of token p falls in bucket p / bucket.
std::vector<Real> nll_by_position(const LanguageModel& model, std::span<const int> tokens,
                                  int C_prime, int bucket);

struct GridSearchResult {
  std::vector<Real> factors;
  std::vector<int> eval_lens;
  std::vector<std::vector<Real>> ppl;  // [factor][eval_len], NaN for failed cells
  std::vector<std::optional<Real>> argmin;  // per eval_len
};

using ScaledModelFactory = std::function<std::unique_ptr<LanguageModel>(Real factor)>;

GridSearchResult grid_search_scale(const ScaledModelFactory& factory,
                                   std::span<const Real> factors,
                                   std::span<const int> eval_lens,
                                   std::span<const int> tokens, int window);

// ---------------------------------------------------------------------------
// Reports.

// One value of a report table. Unsupported cells print as "-".
struct ReportCell {
  std::optional<Real> value;
  std::string config_hash;
};

class EvalReport {
 public:
  EvalReport(std::string config_hash, std::uint64_t seed);

  const std::string& config_hash() const { return config_hash_; }
  std::uint64_t seed() const { return seed_; }
  nlohmann::json& metadata() { return metadata_; }
  const nlohmann::json& metadata() const { return metadata_; }

  // Every setter refuses a cell produced under a different config hash.
  void set_ppl(const std::string& method, long eval_len, std::optional<Real> ppl,
               const std::string& config_hash);
  void set_niah(long context_len, Real depth, std::optional<Real> accuracy,
                const std::string& config_hash);
  void set_nll_by_position(std::vector<Real> buckets, int bucket,
                           const std::string& config_hash);
  void set_grid(const GridSearchResult& grid, const std::string& config_hash);

  const std::map<std::pair<std::string, long>, ReportCell>& ppl() const { return ppl_; }
  const std::map<std::pair<long, Real>, ReportCell>& niah() const { return niah_; }
  const std::vector<Real>& nll_buckets() const { return nll_; }
  const std::optional<GridSearchResult>& grid() const { return grid_; }

  nlohmann::json to_json() const;
  static EvalReport from_json(const nlohmann::json& j);

  // report.json plus one CSV per non-empty table; returns the written paths.
  std::vector<std::filesystem::path> write(const std::filesystem::path& dir,
                                           const std::string& prefix) const;

  // Dense NIAH matrix: rows are depths descending, columns lengths ascending.
  std::string niah_matrix_csv() const;

 private:
  void check_hash(const std::string& hash) const;

  std::string config_hash_;
  std::uint64_t seed_;
  nlohmann::json metadata_ = nlohmann::json::object();
  std::map<std::pair<std::string, long>, ReportCell> ppl_;
  std::map<std::pair<long, Real>, ReportCell> niah_;
  std::vector<Real> nll_;
  int nll_bucket_ = 0;
  std::optional<GridSearchResult> grid_;
};

// Rows = methods, columns = metrics; refuses rows trained under different
// recipes.
struct ComparisonTable {
  std::string recipe_hash;
  std::vector<std::string> columns;
  std::vector<std::pair<std::string, std::vector<std::optional<Real>>>> rows;

  void add_row(const std::string& method, const std::string& row_recipe_hash,
               std::vector<std::optional<Real>> values);
  std::string csv(const std::string& stamp) const;
  nlohmann::json to_json() const;
};

std::string format_cell(const std::optional<Real>& v);

}  // namespace ropelab
