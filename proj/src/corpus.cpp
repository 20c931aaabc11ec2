#include "ropelab/corpus.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "ropelab/error.h"

namespace ropelab {

int Vocab::digit_value(int token) {
  if (token < kFirstDigit || token >= kFirstFiller) return -1;
  return (token - kFirstDigit) % 10;
}

void Vocab::validate() const {
  require(size >= kFirstFiller + 8, "vocab too small for the synthetic layout (need >= " +
                                        std::to_string(kFirstFiller + 8) + ")");
  require(key_len >= 1 && key_len <= kKeySlots, "key_len must lie in [1, 5]");
}

std::string to_string(SourceKind kind) {
  switch (kind) {
    case SourceKind::kWeb: return "web";
    case SourceKind::kCode: return "code";
    case SourceKind::kBook: return "book";
    case SourceKind::kRetrieval: return "retrieval";
    case SourceKind::kUniform: return "uniform";
    case SourceKind::kFile: return "file";
  }
  return "?";
}

SourceKind source_kind_from_string(const std::string& name) {
  for (SourceKind k : {SourceKind::kWeb, SourceKind::kCode, SourceKind::kBook,
                       SourceKind::kRetrieval, SourceKind::kUniform, SourceKind::kFile}) {
    if (to_string(k) == name) return k;
  }
  throw ContractError("unknown corpus source kind '" + name + "'");
}

namespace {

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

int sample_cdf(const std::vector<Real>& cdf, std::mt19937_64& rng) {
  const Real u = std::uniform_real_distribution<Real>(0.0, cdf.back())(rng);
  const auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
  return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf.begin(),
                                                   std::ptrdiff_t(cdf.size()) - 1));
}

}  // namespace

Language::Language(Vocab vocab, std::uint64_t seed) : vocab_(vocab) {
  require(vocab_.size >= 2, "vocab must hold at least two tokens");
  // Small vocabularies only support the uniform source.
  if (vocab_.size < Vocab::kFirstFiller + 8) return;
  std::mt19937_64 rng(seed);
  const int n = vocab_.filler_count();
  constexpr int kSuccessors = 4;
  constexpr Real kSmoothing = 0.05;
  std::gamma_distribution<Real> gamma(1.0, 1.0);
  transitions_.resize(std::size_t(n));
  for (auto& row : transitions_) {
    std::vector<Real> w(std::size_t(n), kSmoothing / n);
    for (int s = 0; s < kSuccessors; ++s) w[std::size_t(uniform_int(rng, 0, n - 1))] += gamma(rng);
    std::partial_sum(w.begin(), w.end(), w.begin());
    row = std::move(w);
  }
  constexpr int kTemplates = 8;
  for (int t = 0; t < kTemplates; ++t) {
    const int len = uniform_int(rng, 3, 6);
    std::vector<int> tpl;
    for (int i = 0; i < len; ++i) tpl.push_back(Vocab::kFirstFiller + uniform_int(rng, 0, n - 1));
    tpl[std::size_t(uniform_int(rng, 1, len - 1))] = -1;  // identifier slot
    templates_.push_back(std::move(tpl));
  }
}

int Language::first_filler(std::mt19937_64& rng) const {
  return Vocab::kFirstFiller + uniform_int(rng, 0, vocab_.filler_count() - 1);
}

int Language::next_filler(int previous, std::mt19937_64& rng) const {
  const int row = previous - Vocab::kFirstFiller;
  if (row < 0 || row >= vocab_.filler_count()) return first_filler(rng);
  return Vocab::kFirstFiller + sample_cdf(transitions_[std::size_t(row)], rng);
}

Document Language::filler(int length, std::mt19937_64& rng) const {
  Document out;
  out.reserve(std::size_t(std::max(length, 0)));
  for (int i = 0; i < length; ++i) {
    out.push_back(out.empty() ? first_filler(rng) : next_filler(out.back(), rng));
  }
  return out;
}

namespace {

// A span of uniformly random filler: only in-context copying predicts its
// later occurrences.
Document random_span(const Vocab& vocab, int length, std::mt19937_64& rng) {
  Document out(static_cast<std::size_t>(length));
  for (int& t : out) t = Vocab::kFirstFiller + uniform_int(rng, 0, vocab.filler_count() - 1);
  return out;
}

}  // namespace

Document Language::code(int length, std::mt19937_64& rng) const {
  std::vector<Document> ids;
  for (int i = 0; i < 3; ++i) ids.push_back(random_span(vocab_, uniform_int(rng, 3, 4), rng));
  Document out;
  while (int(out.size()) < length) {
    const auto& tpl = templates_[std::size_t(uniform_int(rng, 0, int(templates_.size()) - 1))];
    const auto& id = ids[std::size_t(uniform_int(rng, 0, 2))];
    for (int tok : tpl) {
      if (tok < 0) {
        out.insert(out.end(), id.begin(), id.end());
      } else {
        out.push_back(tok);
      }
    }
  }
  out.resize(std::size_t(length));
  return out;
}

Document Language::book(int length, std::mt19937_64& rng) const {
  std::vector<Document> phrases;
  for (int p = 0; p < 2; ++p) phrases.push_back(random_span(vocab_, uniform_int(rng, 5, 10), rng));
  Document out;
  while (int(out.size()) < length) {
    int prev = out.empty() ? first_filler(rng) : out.back();
    const int run = uniform_int(rng, 0, 2);
    for (int i = 0; i < run; ++i) {
      prev = next_filler(prev, rng);
      out.push_back(prev);
    }
    const auto& ph = phrases[std::size_t(uniform_int(rng, 0, 1))];
    out.insert(out.end(), ph.begin(), ph.end());
  }
  out.resize(std::size_t(length));
  return out;
}

Needle make_needle(std::mt19937_64& rng, int key_len) {
  require(key_len >= 1 && key_len <= Vocab::kKeySlots, "key_len must lie in [1, 5]");
  Needle n;
  n.statement.push_back(Vocab::kMark);
  for (int k = 0; k < key_len; ++k) {
    // A five-digit number: the leading digit is never zero.
    const int v = k == 0 ? uniform_int(rng, 1, 9) : uniform_int(rng, 0, 9);
    n.answer.push_back(Vocab::digit(k, v));
  }
  n.statement.insert(n.statement.end(), n.answer.begin(), n.answer.end());
  return n;
}

Document needle_query() { return {Vocab::kQuery, Vocab::kMark}; }

Document Language::retrieval(int length, std::mt19937_64& rng) const {
  const Needle needle = make_needle(rng, vocab_.key_len);
  const Document query = needle_query();
  const int overhead = int(needle.statement.size() + query.size() + needle.answer.size());
  if (length <= overhead) return filler(length, rng);
  Document hay = filler(length - overhead, rng);
  const int at = uniform_int(rng, 0, int(hay.size()));
  hay.insert(hay.begin() + at, needle.statement.begin(), needle.statement.end());
  hay.insert(hay.end(), query.begin(), query.end());
  hay.insert(hay.end(), needle.answer.begin(), needle.answer.end());
  return hay;
}

Document Language::generate(SourceKind kind, int length, std::mt19937_64& rng) const {
  require(length >= 1, "document length must be >= 1");
  if (kind != SourceKind::kUniform) vocab_.validate();
  switch (kind) {
    case SourceKind::kWeb: return filler(length, rng);
    case SourceKind::kCode: return code(length, rng);
    case SourceKind::kBook: return book(length, rng);
    case SourceKind::kRetrieval: return retrieval(length, rng);
    case SourceKind::kUniform: {
      Document out(static_cast<std::size_t>(length));
      for (int& t : out) t = uniform_int(rng, 0, vocab_.size - 1);
      return out;
    }
    case SourceKind::kFile: break;
  }
  throw ContractError("file sources have no generator");
}

std::vector<Document> length_upsample(const CorpusSource& source, const Language& language,
                                      std::uint64_t target_tokens, std::mt19937_64& rng) {
  std::vector<Document> out;
  std::uint64_t emitted = 0;
  if (source.kind == SourceKind::kFile) {
    require(!source.documents.empty(), "source '" + source.name + "' has no documents");
    std::vector<Real> weights;
    for (const auto& d : source.documents) weights.push_back(Real(d.size()));
    require(std::accumulate(weights.begin(), weights.end(), 0.0) > 0,
            "source '" + source.name + "' has only empty documents");
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    while (emitted < target_tokens) {
      out.push_back(source.documents[pick(rng)]);
      emitted += out.back().size();
    }
    return out;
  }
  const LengthRange r = source.lengths;
  require(r.min >= 1 && r.max >= r.min, "source '" + source.name + "' has a bad length range");
  std::uniform_real_distribution<Real> u01(0.0, 1.0);
  while (emitted < target_tokens) {
    const int len = uniform_int(rng, r.min, r.max);
    if (u01(rng) * r.max > len) continue;
    out.push_back(language.generate(source.kind, len, rng));
    emitted += out.back().size();
  }
  return out;
}

void check_mixture(const std::vector<CorpusSource>& sources) {
  require(!sources.empty(), "corpus mixture has no sources");
  Real total = 0;
  for (const auto& s : sources) {
    require(s.mixture_weight >= 0, "negative mixture weight for " + s.name);
    total += s.mixture_weight;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ContractError("mixture weights sum to " + std::to_string(total) + ", not 1");
  }
}

std::vector<Document> sample_mixture(const std::vector<CorpusSource>& sources,
                                     const Language& language, std::uint64_t total_tokens,
                                     std::uint64_t seed) {
  check_mixture(sources);
  std::vector<Document> all;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    std::seed_seq seq{seed, std::uint64_t(i), std::uint64_t(0x5eed)};
    std::mt19937_64 rng(seq);
    const auto target =
        static_cast<std::uint64_t>(std::llround(sources[i].mixture_weight * Real(total_tokens)));
    auto docs = length_upsample(sources[i], language, target, rng);
    std::move(docs.begin(), docs.end(), std::back_inserter(all));
  }
  std::mt19937_64 order(seed);
  std::shuffle(all.begin(), all.end(), order);
  return all;
}

std::vector<Document> pack_chunks(std::span<const Document> documents, int train_len) {
  require(train_len >= 1, "train_len must be >= 1");
  std::uint64_t total = 0;
  for (const auto& d : documents) total += d.size();
  if (total < std::uint64_t(train_len)) {
    throw ContractError("corpus has " + std::to_string(total) + " tokens, fewer than train_len " +
                        std::to_string(train_len));
  }
  std::vector<Document> chunks;
  Document current;
  current.reserve(std::size_t(train_len));
  for (const auto& d : documents) {
    for (int tok : d) {
      current.push_back(tok);
      if (int(current.size()) == train_len) {
        chunks.push_back(std::move(current));
        current.clear();
        current.reserve(std::size_t(train_len));
      }
    }
  }
  return chunks;
}

Document flatten(std::span<const Document> documents) {
  Document out;
  for (const auto& d : documents) out.insert(out.end(), d.begin(), d.end());
  return out;
}

void write_corpus(const std::filesystem::path& path, const std::string& source_name,
                  std::span<const Document> documents) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "# source " << source_name << '\n';
  for (const auto& d : documents) {
    for (std::size_t i = 0; i < d.size(); ++i) out << (i ? " " : "") << d[i];
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

CorpusSource read_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open corpus " + path.string());
  std::string line;
  if (!std::getline(in, line) || !line.starts_with("# source ")) {
    throw IoError(path.string() + ": missing '# source <name>' header");
  }
  CorpusSource src;
  src.kind = SourceKind::kFile;
  src.path = path;
  src.name = line.substr(9);
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream row(line);
    Document doc;
    std::string tok;
    while (row >> tok) {
      try {
        std::size_t used = 0;
        const int id = std::stoi(tok, &used);
        if (used != tok.size() || id < 0) throw std::invalid_argument(tok);
        doc.push_back(id);
      } catch (const std::exception&) {
        throw IoError(path.string() + ":" + std::to_string(lineno) + ": bad token id '" +
                      tok + "'");
      }
    }
    if (!doc.empty()) src.documents.push_back(std::move(doc));
  }
  return src;
}

}  // namespace ropelab
