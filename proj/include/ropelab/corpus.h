#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ropelab/tensor.h"

namespace ropelab {

using Document = std::vector<int>;

// Token layout shared by the synthetic sources and the retrieval tasks.
//   0            padding
//   1            MARK, opens a needle
//   2            QUERY, asks for the most recent needle
//   3 .. 52      key digits, tagged by slot: digit v at slot k is 3 + 10k + v
//   53 .. V-1    filler
struct Vocab {
  static constexpr int kPad = 0;
  static constexpr int kMark = 1;
  static constexpr int kQuery = 2;
  static constexpr int kKeySlots = 5;
  static constexpr int kFirstDigit = 3;
  static constexpr int kFirstFiller = kFirstDigit + 10 * kKeySlots;

  int size = 96;
  // Digits per needle key; the passkey task uses all five.
  int key_len = kKeySlots;

  int filler_count() const { return size - kFirstFiller; }
  static int digit(int slot, int value) { return kFirstDigit + 10 * slot + value; }
  // Digit value of a key token, or -1.
  static int digit_value(int token);
  void validate() const;
};

enum class SourceKind { kWeb, kCode, kBook, kRetrieval, kUniform, kFile };

std::string to_string(SourceKind kind);
SourceKind source_kind_from_string(const std::string& name);

struct LengthRange {
  int min = 16;
  int max = 256;
};

// One corpus source: a seeded generator or a fixed document pool read from a
// file. Generators draw lengths uniformly from `lengths`.
struct CorpusSource {
  std::string name;
  SourceKind kind = SourceKind::kWeb;
  std::filesystem::path path;  // kFile only
  std::vector<Document> documents;  // kFile pool
  Real mixture_weight = 1.0;
  LengthRange lengths;
};

// Shared structure every generator draws on: a sparse Markov chain over
// filler tokens and a handful of code-like line templates. Fixed by its seed
// so that pretraining, fine-tuning and evaluation see one "language".
class Language {
 public:
  Language(Vocab vocab, std::uint64_t seed);

  const Vocab& vocab() const { return vocab_; }
  int next_filler(int previous, std::mt19937_64& rng) const;
  int first_filler(std::mt19937_64& rng) const;
  Document filler(int length, std::mt19937_64& rng) const;

  Document generate(SourceKind kind, int length, std::mt19937_64& rng) const;

 private:
  Document code(int length, std::mt19937_64& rng) const;
  Document book(int length, std::mt19937_64& rng) const;
  Document retrieval(int length, std::mt19937_64& rng) const;

  Vocab vocab_;
  // Per filler token: cumulative successor distribution over filler tokens.
  std::vector<std::vector<Real>> transitions_;
  std::vector<std::vector<int>> templates_;
};

// A needle "MARK d0 .. d4" and its five answer tokens.
struct Needle {
  Document statement;
  Document answer;
};
Needle make_needle(std::mt19937_64& rng, int key_len = Vocab::kKeySlots);
// Tokens that ask for the most recent needle's key.
Document needle_query();

// Documents from one source until at least `target_tokens` are emitted.
// Pool sources pick each document with probability proportional to its
// length; generators realise the same length bias by rejection.
std::vector<Document> length_upsample(const CorpusSource& source,
                                      const Language& language,
                                      std::uint64_t target_tokens,
                                      std::mt19937_64& rng);

// Per-source upsampling to mixture_weight * total_tokens each, documents
// interleaved in a seeded order.
std::vector<Document> sample_mixture(const std::vector<CorpusSource>& sources,
                                     const Language& language,
                                     std::uint64_t total_tokens,
                                     std::uint64_t seed);

void check_mixture(const std::vector<CorpusSource>& sources);

// Concatenates documents and slices fixed train_len chunks; the remainder is
// dropped.
std::vector<Document> pack_chunks(std::span<const Document> documents, int train_len);

// All documents concatenated in order.
Document flatten(std::span<const Document> documents);

// Corpus file: "# source <name>" header, then one document per line as
// space-separated decimal ids.
void write_corpus(const std::filesystem::path& path, const std::string& source_name,
                  std::span<const Document> documents);
CorpusSource read_corpus(const std::filesystem::path& path);

}  // namespace ropelab
