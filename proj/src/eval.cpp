#include "ropelab/eval.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <random>
#include <set>
#include <sstream>

#include "ropelab/error.h"
#include "ropelab/ops.h"

namespace ropelab {

namespace {

constexpr Real kNaN = std::numeric_limits<Real>::quiet_NaN();
constexpr std::size_t kEvalBatch = 8;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string real_str(Real v) {
  if (std::isnan(v)) return "NaN";
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

nlohmann::json opt_json(const std::optional<Real>& v) {
  if (!v || std::isnan(*v)) return nullptr;
  return *v;
}

std::optional<Real> opt_from_json(const nlohmann::json& j) {
  if (j.is_null()) return std::nullopt;
  return j.get<Real>();
}

std::vector<Real> nll_from_logits(std::span<const Real> logits, std::size_t vocab,
                                  std::span<const int> seq) {
  std::vector<Real> out(seq.size() - 1);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    const Real* row = logits.data() + i * vocab;
    const Real mx = *std::max_element(row, row + vocab);
    Real z = 0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
    out[i] = -(row[std::size_t(seq[i + 1])] - mx - std::log(z));
  }
  return out;
}

}  // namespace

std::vector<std::vector<Real>> LanguageModel::token_nll_batch(
    std::span<const Document> seqs) const {
  std::vector<std::vector<Real>> out;
  out.reserve(seqs.size());
  for (const auto& s : seqs) out.push_back(token_nll(s));
  return out;
}

// ---------------------------------------------------------------------------

TinyLMScorer::TinyLMScorer(const TinyLM& model, std::string name, bool use_ema)
    : model_(model), name_(std::move(name)) {
  options_.mode = AttentionMode::kInference;
  options_.use_ema = use_ema;
}

std::vector<Real> TinyLMScorer::token_nll(std::span<const int> seq) const {
  require(seq.size() >= 2, "token_nll needs at least two tokens");
  NoGradGuard no_grad;
  const Tensor logits = model_.forward(seq, options_);
  return nll_from_logits(logits.data(), std::size_t(vocab_size()), seq);
}

std::vector<std::vector<Real>> TinyLMScorer::token_nll_batch(
    std::span<const Document> seqs) const {
  if (seqs.empty()) return {};
  const std::size_t n = seqs.front().size();
  require(n >= 2, "token_nll needs at least two tokens");
  std::vector<int> flat;
  flat.reserve(n * seqs.size());
  for (const auto& s : seqs) {
    require(s.size() == n, "batched sequences differ in length");
    flat.insert(flat.end(), s.begin(), s.end());
  }
  NoGradGuard no_grad;
  const Tensor logits = model_.forward_batch(flat, int(seqs.size()), options_);
  const std::size_t vocab = std::size_t(vocab_size());
  std::vector<std::vector<Real>> out;
  for (std::size_t b = 0; b < seqs.size(); ++b) {
    out.push_back(nll_from_logits(logits.data().subspan(b * n * vocab, n * vocab), vocab,
                                  seqs[b]));
  }
  return out;
}

Document TinyLMScorer::greedy(std::span<const int> prompt, int count) const {
  require(!prompt.empty(), "greedy decoding needs a prompt");
  NoGradGuard no_grad;
  Document seq(prompt.begin(), prompt.end());
  Document out;
  const std::size_t vocab = std::size_t(vocab_size());
  for (int step = 0; step < count; ++step) {
    const Tensor logits = model_.forward(seq, options_);
    const Real* row = logits.data().data() + (seq.size() - 1) * vocab;
    const int next = int(std::max_element(row, row + vocab) - row);
    out.push_back(next);
    seq.push_back(next);
  }
  return out;
}

UnigramModel::UnigramModel(int vocab_size, Real smoothing)
    : counts_(std::size_t(vocab_size), 0.0), logp_(std::size_t(vocab_size)), smoothing_(smoothing) {
  require(vocab_size >= 1, "unigram vocab must be >= 1");
  require(smoothing > 0, "unigram smoothing must be positive");
  fit({});
}

void UnigramModel::fit(std::span<const int> tokens) {
  for (int t : tokens) {
    require(t >= 0 && std::size_t(t) < counts_.size(), "token outside unigram vocab");
    counts_[std::size_t(t)] += 1;
  }
  Real total = 0;
  for (Real c : counts_) total += c + smoothing_;
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    logp_[i] = std::log((counts_[i] + smoothing_) / total);
  }
}

std::vector<Real> UnigramModel::token_nll(std::span<const int> seq) const {
  require(seq.size() >= 2, "token_nll needs at least two tokens");
  std::vector<Real> out(seq.size() - 1);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) out[i] = -logp_[std::size_t(seq[i + 1])];
  return out;
}

Document UnigramModel::greedy(std::span<const int>, int count) const {
  const int best = int(std::max_element(logp_.begin(), logp_.end()) - logp_.begin());
  return Document(std::size_t(std::max(count, 0)), best);
}

std::vector<Real> NeedleOracle::token_nll(std::span<const int> seq) const {
  require(seq.size() >= 2, "token_nll needs at least two tokens");
  return std::vector<Real>(seq.size() - 1, std::log(Real(vocab_)));
}

Document NeedleOracle::greedy(std::span<const int> prompt, int count) const {
  // The query itself ends with MARK; copy from the MARK before it.
  std::ptrdiff_t mark = -1;
  for (std::ptrdiff_t i = std::ptrdiff_t(prompt.size()) - 2; i >= 0; --i) {
    if (prompt[std::size_t(i)] == Vocab::kMark) {
      mark = i;
      break;
    }
  }
  Document out;
  for (int k = 0; k < count; ++k) {
    const std::size_t at = std::size_t(mark + 1 + k);
    out.push_back(mark >= 0 && at < prompt.size() ? prompt[at] : Vocab::kPad);
  }
  return out;
}

std::vector<Real> RandomModel::token_nll(std::span<const int> seq) const {
  require(seq.size() >= 2, "token_nll needs at least two tokens");
  return std::vector<Real>(seq.size() - 1, std::log(Real(vocab_)));
}

Document RandomModel::greedy(std::span<const int> prompt, int count) const {
  std::uint64_t h = seed_;
  for (int t : prompt) h = splitmix(h ^ std::uint64_t(t));
  std::mt19937_64 rng(h);
  std::uniform_int_distribution<int> pick(0, vocab_ - 1);
  Document out;
  for (int k = 0; k < count; ++k) out.push_back(pick(rng));
  return out;
}

// ---------------------------------------------------------------------------

int sliding_stride(int eval_len, int window) {
  require(eval_len >= 2, "eval_len must be >= 2");
  require(window >= 1, "window must be >= 1");
  return std::min(window, eval_len - 1);
}

SlidingScores sliding_nll(const LanguageModel& model, std::span<const int> tokens,
                          int eval_len, int stride) {
  require(eval_len >= 2, "eval_len must be >= 2");
  require(stride >= 1 && stride <= eval_len - 1, "stride must lie in [1, eval_len - 1]");
  const long limit = model.max_length();
  if (limit >= 0 && eval_len > limit) {
    throw ContractError("eval_len " + std::to_string(eval_len) + " exceeds the " +
                        model.name() + " limit of " + std::to_string(limit));
  }
  const std::size_t L = tokens.size();
  if (L < std::size_t(eval_len)) {
    throw ContractError("need at least eval_len = " + std::to_string(eval_len) +
                        " tokens, got " + std::to_string(L));
  }
  // (start, first scored index) per placement.
  std::vector<std::pair<std::size_t, std::size_t>> placements{{0, 1}};
  std::size_t end = std::size_t(eval_len);
  while (end + std::size_t(stride) <= L) {
    end += std::size_t(stride);
    placements.emplace_back(end - std::size_t(eval_len), end - std::size_t(stride));
  }
  if (end < L) placements.emplace_back(L - std::size_t(eval_len), end);

  SlidingScores out;
  out.nll.assign(L, kNaN);
  out.placements = placements.size();
  for (std::size_t b = 0; b < placements.size(); b += kEvalBatch) {
    const std::size_t e = std::min(placements.size(), b + kEvalBatch);
    std::vector<Document> seqs;
    for (std::size_t p = b; p < e; ++p) {
      const auto s = tokens.subspan(placements[p].first, std::size_t(eval_len));
      seqs.emplace_back(s.begin(), s.end());
    }
    const auto nll = model.token_nll_batch(seqs);
    for (std::size_t p = b; p < e; ++p) {
      const auto [start, first] = placements[p];
      for (std::size_t t = first; t < start + std::size_t(eval_len); ++t) {
        out.nll[t] = nll[p - b][t - start - 1];
        ++out.scored;
      }
    }
  }
  return out;
}

Real perplexity_sliding(const LanguageModel& model, std::span<const int> tokens,
                        int eval_len, int window) {
  const SlidingScores s = sliding_nll(model, tokens, eval_len, sliding_stride(eval_len, window));
  Real total = 0;
  for (std::size_t i = 1; i < s.nll.size(); ++i) total += s.nll[i];
  return std::exp(total / Real(s.scored));
}

// ---------------------------------------------------------------------------

NiahCase niah_generate(const Language& language, int context_len, Real depth,
                       std::uint64_t seed) {
  require(depth >= 0.0 && depth <= 1.0, "depth fraction must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  NiahCase c;
  const Needle needle = make_needle(rng, language.vocab().key_len);
  c.query = needle_query();
  c.answer = needle.answer;
  c.context_len = context_len;
  c.depth = depth;
  c.needle_len = int(needle.statement.size());
  const int pre = context_len - int(c.query.size() + c.answer.size());
  if (pre < c.needle_len) {
    throw ContractError("needle of " + std::to_string(c.needle_len) + " tokens plus query " +
                        "and answer do not fit in " + std::to_string(context_len));
  }
  c.tokens = language.filler(pre - c.needle_len, rng);
  c.needle_start = int(std::lround(depth * Real(pre - c.needle_len)));
  c.tokens.insert(c.tokens.begin() + c.needle_start, needle.statement.begin(),
                  needle.statement.end());
  return c;
}

bool niah_correct(const LanguageModel& model, const NiahCase& c) {
  Document prompt = c.tokens;
  prompt.insert(prompt.end(), c.query.begin(), c.query.end());
  const Document got = model.greedy(prompt, int(c.answer.size()));
  return std::search(got.begin(), got.end(), c.answer.begin(), c.answer.end()) != got.end();
}

Real niah_score(const LanguageModel& model, std::span<const NiahCase> cases) {
  require(!cases.empty(), "niah_score needs at least one case");
  int hits = 0;
  for (const auto& c : cases) hits += niah_correct(model, c) ? 1 : 0;
  return Real(hits) / Real(cases.size());
}

std::uint64_t niah_cell_seed(std::uint64_t seed, int context_len, Real depth) {
  const auto depth_key = static_cast<std::uint64_t>(std::llround(depth * 1e6));
  return splitmix(splitmix(seed ^ std::uint64_t(context_len)) ^ depth_key);
}

std::vector<NiahCell> niah_grid(const LanguageModel& model, const Language& language,
                                std::span<const int> lengths, std::span<const Real> depths,
                                int cases_per_cell, std::uint64_t seed) {
  require(cases_per_cell >= 1, "cases_per_cell must be >= 1");
  std::vector<NiahCell> cells;
  for (int len : lengths) {
    for (Real depth : depths) {
      const std::uint64_t cell_seed = niah_cell_seed(seed, len, depth);
      std::vector<NiahCase> cases;
      for (int k = 0; k < cases_per_cell; ++k) {
        cases.push_back(niah_generate(language, len, depth, splitmix(cell_seed + std::uint64_t(k))));
      }
      cells.push_back({len, depth, niah_score(model, cases), cases_per_cell});
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------

std::vector<Real> nll_by_position(const LanguageModel& model, std::span<const int> tokens,
                                  int C_prime, int bucket) {
  require(C_prime >= 2, "C' must be >= 2");
  require(bucket >= 1 && C_prime % bucket == 0, "bucket must divide C'");
  const std::size_t windows = tokens.size() / std::size_t(C_prime);
  require(windows >= 1, "need at least C' tokens");
  const std::size_t nb = std::size_t(C_prime / bucket);
  std::vector<Real> sums(nb, 0.0);
  std::vector<std::size_t> counts(nb, 0);
  for (std::size_t w0 = 0; w0 < windows; w0 += kEvalBatch) {
    std::vector<Document> seqs;
    for (std::size_t w = w0; w < std::min(windows, w0 + kEvalBatch); ++w) {
      const auto s = tokens.subspan(w * std::size_t(C_prime), std::size_t(C_prime));
      seqs.emplace_back(s.begin(), s.end());
    }
    const auto nll = model.token_nll_batch(seqs);
    for (const auto& row : nll) {
      for (std::size_t i = 0; i < row.size(); ++i) {
        const std::size_t b = (i + 1) / std::size_t(bucket);
        sums[b] += row[i];
        ++counts[b];
      }
    }
  }
  std::vector<Real> out(nb);
  for (std::size_t b = 0; b < nb; ++b) out[b] = sums[b] / Real(counts[b]);
  return out;
}

GridSearchResult grid_search_scale(const ScaledModelFactory& factory,
                                   std::span<const Real> factors,
                                   std::span<const int> eval_lens,
                                   std::span<const int> tokens, int window) {
  require(!factors.empty(), "grid search needs at least one candidate factor");
  require(!eval_lens.empty(), "grid search needs at least one eval length");
  GridSearchResult g;
  g.factors.assign(factors.begin(), factors.end());
  g.eval_lens.assign(eval_lens.begin(), eval_lens.end());
  g.ppl.assign(factors.size(), std::vector<Real>(eval_lens.size(), kNaN));
  for (std::size_t f = 0; f < factors.size(); ++f) {
    const auto model = factory(factors[f]);
    for (std::size_t l = 0; l < eval_lens.size(); ++l) {
      Real ppl = kNaN;
      try {
        ppl = perplexity_sliding(*model, tokens, eval_lens[l], window);
      } catch (const NumericError&) {
      } catch (const DegenerateRowError&) {
      }
      g.ppl[f][l] = std::isfinite(ppl) ? ppl : kNaN;
    }
  }
  g.argmin.assign(eval_lens.size(), std::nullopt);
  for (std::size_t l = 0; l < eval_lens.size(); ++l) {
    std::optional<std::size_t> best;
    for (std::size_t f = 0; f < factors.size(); ++f) {
      const Real v = g.ppl[f][l];
      if (std::isnan(v)) continue;
      if (!best || v < g.ppl[*best][l] ||
          (v == g.ppl[*best][l] && factors[f] < factors[*best])) {
        best = f;
      }
    }
    if (best) g.argmin[l] = factors[*best];
  }
  return g;
}

// ---------------------------------------------------------------------------

std::string format_cell(const std::optional<Real>& v) {
  if (!v) return "-";
  return real_str(*v);
}

EvalReport::EvalReport(std::string config_hash, std::uint64_t seed)
    : config_hash_(std::move(config_hash)), seed_(seed) {}

void EvalReport::check_hash(const std::string& hash) const {
  if (hash != config_hash_) {
    throw ContractError("report for config " + config_hash_ +
                        " cannot take a cell from config " + hash);
  }
}

void EvalReport::set_ppl(const std::string& method, long eval_len, std::optional<Real> ppl,
                         const std::string& config_hash) {
  check_hash(config_hash);
  ppl_[{method, eval_len}] = {ppl, config_hash};
}

void EvalReport::set_niah(long context_len, Real depth, std::optional<Real> accuracy,
                          const std::string& config_hash) {
  check_hash(config_hash);
  require(!accuracy || (*accuracy >= 0.0 && *accuracy <= 1.0), "accuracy must lie in [0, 1]");
  niah_[{context_len, depth}] = {accuracy, config_hash};
}

void EvalReport::set_nll_by_position(std::vector<Real> buckets, int bucket,
                                     const std::string& config_hash) {
  check_hash(config_hash);
  nll_ = std::move(buckets);
  nll_bucket_ = bucket;
}

void EvalReport::set_grid(const GridSearchResult& grid, const std::string& config_hash) {
  check_hash(config_hash);
  grid_ = grid;
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["config_hash"] = config_hash_;
  j["seed"] = seed_;
  j["metadata"] = metadata_;
  auto ppl = nlohmann::json::array();
  for (const auto& [key, cell] : ppl_) {
    ppl.push_back({{"method", key.first},
                   {"eval_len", key.second},
                   {"ppl", opt_json(cell.value)},
                   {"supported", cell.value.has_value()},
                   {"config_hash", cell.config_hash}});
  }
  j["ppl_table"] = ppl;
  auto niah = nlohmann::json::array();
  for (const auto& [key, cell] : niah_) {
    niah.push_back({{"context_len", key.first},
                    {"depth", key.second},
                    {"accuracy", opt_json(cell.value)},
                    {"config_hash", cell.config_hash}});
  }
  j["niah_grid"] = niah;
  j["nll_by_position"] = {{"bucket", nll_bucket_}, {"means", nll_}};
  if (grid_) {
    auto cells = nlohmann::json::array();
    for (const auto& row : grid_->ppl) {
      auto r = nlohmann::json::array();
      for (Real v : row) r.push_back(opt_json(v));
      cells.push_back(r);
    }
    auto argmin = nlohmann::json::array();
    for (const auto& a : grid_->argmin) argmin.push_back(opt_json(a));
    j["grid_search"] = {{"factors", grid_->factors},
                        {"eval_lens", grid_->eval_lens},
                        {"ppl", cells},
                        {"argmin", argmin}};
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r(j.at("config_hash").get<std::string>(), j.at("seed").get<std::uint64_t>());
  r.metadata_ = j.value("metadata", nlohmann::json::object());
  for (const auto& c : j.at("ppl_table")) {
    const std::optional<Real> v =
        c.at("supported").get<bool>() ? std::optional<Real>(c.at("ppl").is_null()
                                                                ? kNaN
                                                                : c.at("ppl").get<Real>())
                                      : std::nullopt;
    r.set_ppl(c.at("method").get<std::string>(), c.at("eval_len").get<long>(), v,
              c.at("config_hash").get<std::string>());
  }
  for (const auto& c : j.at("niah_grid")) {
    r.set_niah(c.at("context_len").get<long>(), c.at("depth").get<Real>(),
               c.at("accuracy").is_null() ? std::nullopt
                                          : std::optional<Real>(c.at("accuracy").get<Real>()),
               c.at("config_hash").get<std::string>());
  }
  const auto& nb = j.at("nll_by_position");
  r.nll_bucket_ = nb.at("bucket").get<int>();
  r.nll_ = nb.at("means").get<std::vector<Real>>();
  if (j.contains("grid_search")) {
    const auto& g = j.at("grid_search");
    GridSearchResult res;
    res.factors = g.at("factors").get<std::vector<Real>>();
    res.eval_lens = g.at("eval_lens").get<std::vector<int>>();
    for (const auto& row : g.at("ppl")) {
      std::vector<Real> vals;
      for (const auto& v : row) vals.push_back(v.is_null() ? kNaN : v.get<Real>());
      res.ppl.push_back(vals);
    }
    for (const auto& a : g.at("argmin")) res.argmin.push_back(opt_from_json(a));
    r.grid_ = res;
  }
  return r;
}

std::string EvalReport::niah_matrix_csv() const {
  std::set<long> lengths;
  std::set<Real> depths;
  for (const auto& [key, cell] : niah_) {
    lengths.insert(key.first);
    depths.insert(key.second);
  }
  std::ostringstream os;
  os << "depth\\context_len";
  for (long len : lengths) os << ',' << len;
  os << '\n';
  for (auto d = depths.rbegin(); d != depths.rend(); ++d) {
    os << real_str(*d);
    for (long len : lengths) {
      auto it = niah_.find({len, *d});
      os << ',' << (it == niah_.end() ? "-" : format_cell(it->second.value));
    }
    os << '\n';
  }
  return os.str();
}

std::vector<std::filesystem::path> EvalReport::write(const std::filesystem::path& dir,
                                                     const std::string& prefix) const {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  const std::string stamp =
      "# config_hash=" + config_hash_ + " seed=" + std::to_string(seed_) + "\n";
  auto emit = [&](const std::string& name, const std::string& body) {
    const auto path = dir / (prefix + name);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path.string() + " for writing");
    out << body;
    if (!out) throw IoError("failed writing " + path.string());
    written.push_back(path);
  };
  emit("report.json", to_json().dump(2) + "\n");
  if (!ppl_.empty()) {
    std::ostringstream os;
    os << stamp << "method,eval_len,ppl\n";
    for (const auto& [key, cell] : ppl_) {
      os << key.first << ',' << key.second << ',' << format_cell(cell.value) << '\n';
    }
    emit("ppl.csv", os.str());
  }
  if (!niah_.empty()) {
    std::ostringstream os;
    os << stamp << "context_len,depth,accuracy\n";
    for (const auto& [key, cell] : niah_) {
      os << key.first << ',' << real_str(key.second) << ',' << format_cell(cell.value) << '\n';
    }
    emit("niah.csv", os.str());
    emit("niah_matrix.csv", stamp + niah_matrix_csv());
  }
  if (!nll_.empty()) {
    std::ostringstream os;
    os << stamp << "bucket_start,bucket_end,mean_nll\n";
    for (std::size_t b = 0; b < nll_.size(); ++b) {
      os << b * std::size_t(nll_bucket_) << ',' << (b + 1) * std::size_t(nll_bucket_) << ','
         << real_str(nll_[b]) << '\n';
    }
    emit("nll_by_position.csv", os.str());
  }
  if (grid_) {
    std::ostringstream os;
    os << stamp << "factor";
    for (int len : grid_->eval_lens) os << ',' << len;
    os << '\n';
    for (std::size_t f = 0; f < grid_->factors.size(); ++f) {
      os << real_str(grid_->factors[f]);
      for (Real v : grid_->ppl[f]) os << ',' << real_str(v);
      os << '\n';
    }
    emit("grid_scale.csv", os.str());
  }
  return written;
}

void ComparisonTable::add_row(const std::string& method, const std::string& row_recipe_hash,
                              std::vector<std::optional<Real>> values) {
  require(values.size() == columns.size(), "comparison row width does not match columns");
  if (rows.empty() && recipe_hash.empty()) recipe_hash = row_recipe_hash;
  if (row_recipe_hash != recipe_hash) {
    throw ContractError("row '" + method + "' was trained under recipe " + row_recipe_hash +
                        ", the table under " + recipe_hash);
  }
  rows.emplace_back(method, std::move(values));
}

std::string ComparisonTable::csv(const std::string& stamp) const {
  std::ostringstream os;
  os << "# " << stamp << '\n' << "method";
  for (const auto& c : columns) os << ',' << c;
  os << '\n';
  for (const auto& [method, values] : rows) {
    os << method;
    for (const auto& v : values) os << ',' << format_cell(v);
    os << '\n';
  }
  return os.str();
}

nlohmann::json ComparisonTable::to_json() const {
  nlohmann::json j;
  j["recipe_hash"] = recipe_hash;
  j["columns"] = columns;
  auto rs = nlohmann::json::array();
  for (const auto& [method, values] : rows) {
    auto vs = nlohmann::json::array();
    for (const auto& v : values) vs.push_back(v ? nlohmann::json(opt_json(v)) : nlohmann::json("-"));
    rs.push_back({{"method", method}, {"values", vs}});
  }
  j["rows"] = rs;
  return j;
}

}  // namespace ropelab
