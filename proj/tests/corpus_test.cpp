#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "ropelab/corpus.h"
#include "ropelab/error.h"

namespace ropelab {
namespace {

std::uint64_t token_count(const std::vector<Document>& docs) {
  std::uint64_t n = 0;
  for (const auto& d : docs) n += d.size();
  return n;
}

TEST(PackChunksTest, CrossesDocumentBoundaries) {
  const std::vector<Document> docs{{10, 11, 12}, {20, 21, 22, 23, 24}};
  const auto chunks = pack_chunks(docs, 4);
  ASSERT_EQ(chunks.size(), 2u);
  EXPECT_EQ(chunks[0], (Document{10, 11, 12, 20}));
  EXPECT_EQ(chunks[1], (Document{21, 22, 23, 24}));
}

TEST(PackChunksTest, ExactDocumentIsOneChunk) {
  const std::vector<Document> docs{{5, 6, 7, 8}};
  const auto chunks = pack_chunks(docs, 4);
  ASSERT_EQ(chunks.size(), 1u);
  EXPECT_EQ(chunks[0], docs[0]);
}

TEST(PackChunksTest, RemainderDropped) {
  const std::vector<Document> docs{{1, 2}, {3, 4, 5, 6, 7, 8, 9}};
  EXPECT_EQ(pack_chunks(docs, 4).size(), 2u);
  EXPECT_THROW(pack_chunks(std::vector<Document>{{1, 2}}, 4), ContractError);
}

TEST(PackChunksTest, ConservesThePrefix) {
  std::mt19937_64 rng(1);
  std::vector<Document> docs;
  for (int i = 0; i < 50; ++i) {
    Document d(1 + rng() % 20);
    for (auto& t : d) t = int(rng() % 90);
    docs.push_back(d);
  }
  for (int len : {1, 3, 7, 16}) {
    const auto chunks = pack_chunks(docs, len);
    const Document all = flatten(docs);
    EXPECT_EQ(chunks.size(), all.size() / std::size_t(len));
    const Document packed = flatten(chunks);
    EXPECT_TRUE(std::equal(packed.begin(), packed.end(), all.begin()));
    for (const auto& c : chunks) EXPECT_EQ(int(c.size()), len);
  }
}

TEST(LengthUpsampleTest, EqualLengthsAreUniform) {
  CorpusSource s;
  s.name = "pool";
  s.kind = SourceKind::kFile;
  s.documents = {{1, 1}, {2, 2}, {3, 3}, {4, 4}};
  const Language lang(Vocab{}, 1);
  std::mt19937_64 rng(2);
  const auto docs = length_upsample(s, lang, 80000, rng);
  std::array<int, 5> count{};
  for (const auto& d : docs) ++count[std::size_t(d[0])];
  for (int i = 1; i <= 4; ++i) EXPECT_NEAR(count[i] / Real(docs.size()), 0.25, 0.015);
}

TEST(LengthUpsampleTest, PickRatioFollowsLength) {
  // Lengths 1 and 9 stand in for 100 and 900: same 1:9 ratio, far fewer tokens.
  CorpusSource s;
  s.name = "pool";
  s.kind = SourceKind::kFile;
  s.documents = {Document(1, 7), Document(9, 8)};
  const Language lang(Vocab{}, 1);
  std::mt19937_64 rng(3);
  const auto docs = length_upsample(s, lang, 820000, rng);
  ASSERT_GT(docs.size(), 99000u);
  const Real n = Real(docs.size());
  const Real short_picks =
      Real(std::count_if(docs.begin(), docs.end(), [](const Document& d) { return d.size() == 1; }));
  const Real sigma = std::sqrt(0.1 * 0.9 / n);
  EXPECT_NEAR(short_picks / n, 0.1, 3 * sigma);
}

TEST(LengthUpsampleTest, GeneratorLengthsAreLengthBiased) {
  CorpusSource s;
  s.name = "web";
  s.kind = SourceKind::kWeb;
  s.lengths = {10, 30};
  const Language lang(Vocab{}, 4);
  std::mt19937_64 rng(5);
  const auto docs = length_upsample(s, lang, 200000, rng);
  // Uniform lengths re-weighted by length: E[L] = E[L^2] / E[L].
  Real m1 = 0, m2 = 0;
  for (int l = 10; l <= 30; ++l) {
    m1 += l;
    m2 += Real(l) * l;
  }
  Real mean = 0;
  for (const auto& d : docs) {
    EXPECT_GE(d.size(), 10u);
    EXPECT_LE(d.size(), 30u);
    mean += Real(d.size());
  }
  mean /= Real(docs.size());
  EXPECT_NEAR(mean, m2 / m1, 0.3);
}

TEST(SampleMixtureTest, DeterministicPerSeed) {
  const Language lang(Vocab{}, 6);
  CorpusSource a, b;
  a.name = "a";
  a.kind = SourceKind::kWeb;
  a.mixture_weight = 0.8;
  a.lengths = {16, 64};
  b.name = "b";
  b.kind = SourceKind::kCode;
  b.mixture_weight = 0.2;
  b.lengths = {16, 256};
  const std::vector<CorpusSource> sources{a, b};
  const auto docs = sample_mixture(sources, lang, 100000, 7);
  EXPECT_GE(token_count(docs), 100000u);
  const auto again = sample_mixture(sources, lang, 100000, 7);
  EXPECT_EQ(docs, again);
  EXPECT_NE(docs, sample_mixture(sources, lang, 100000, 8));
}

TEST(SampleMixtureTest, FilePoolSharesWithinTwoPercent) {
  const Language lang(Vocab{}, 6);
  CorpusSource a, b;
  a.name = "a";
  a.kind = SourceKind::kFile;
  a.documents = {Document(40, 60), Document(90, 60)};
  a.mixture_weight = 0.8;
  b.name = "b";
  b.kind = SourceKind::kFile;
  b.documents = {Document(30, 70), Document(200, 70)};
  b.mixture_weight = 0.2;
  const auto docs = sample_mixture({a, b}, lang, 200000, 9);
  std::uint64_t ta = 0, tb = 0;
  for (const auto& d : docs) (d[0] == 60 ? ta : tb) += d.size();
  const Real share = Real(ta) / Real(ta + tb);
  EXPECT_NEAR(share, 0.8, 0.02);
}

TEST(SampleMixtureTest, WeightsMustSumToOne) {
  CorpusSource a;
  a.name = "a";
  a.mixture_weight = 0.7;
  EXPECT_THROW(check_mixture({a}), ContractError);
  a.mixture_weight = 1.0;
  EXPECT_NO_THROW(check_mixture({a}));
  EXPECT_THROW(check_mixture({}), ContractError);
}

TEST(VocabTest, LayoutAndValidation) {
  EXPECT_EQ(Vocab::digit(0, 0), 3);
  EXPECT_EQ(Vocab::digit(4, 9), 52);
  EXPECT_EQ(Vocab::kFirstFiller, 53);
  EXPECT_EQ(Vocab::digit_value(Vocab::digit(2, 7)), 7);
  EXPECT_EQ(Vocab::digit_value(Vocab::kMark), -1);
  EXPECT_EQ(Vocab::digit_value(60), -1);
  Vocab v;
  EXPECT_NO_THROW(v.validate());
  v.size = 54;
  EXPECT_THROW(v.validate(), ContractError);
  v = Vocab{};
  v.key_len = 6;
  EXPECT_THROW(v.validate(), ContractError);
}

TEST(NeedleTest, StatementCarriesTheAnswer) {
  std::mt19937_64 rng(10);
  for (int key_len = 1; key_len <= 5; ++key_len) {
    const Needle n = make_needle(rng, key_len);
    ASSERT_EQ(int(n.answer.size()), key_len);
    ASSERT_EQ(n.statement.size(), n.answer.size() + 1);
    EXPECT_EQ(n.statement[0], Vocab::kMark);
    for (int k = 0; k < key_len; ++k) {
      EXPECT_EQ(n.statement[k + 1], n.answer[k]);
      EXPECT_GE(Vocab::digit_value(n.answer[k]), 0);
      EXPECT_EQ((n.answer[k] - Vocab::kFirstDigit) / 10, k);
    }
  }
  EXPECT_THROW(make_needle(rng, 0), ContractError);
  EXPECT_EQ(needle_query(), (Document{Vocab::kQuery, Vocab::kMark}));
}

TEST(LanguageTest, GeneratorsStayInVocabAndLength) {
  const Language lang(Vocab{}, 11);
  std::mt19937_64 rng(12);
  for (auto kind : {SourceKind::kWeb, SourceKind::kCode, SourceKind::kBook,
                    SourceKind::kRetrieval, SourceKind::kUniform}) {
    for (int len : {16, 33, 64}) {
      const Document d = lang.generate(kind, len, rng);
      EXPECT_EQ(int(d.size()), len) << to_string(kind);
      for (int t : d) {
        EXPECT_GE(t, 0);
        EXPECT_LT(t, 96);
      }
    }
  }
}

TEST(LanguageTest, SameSeedSameLanguage) {
  const Language a(Vocab{}, 13), b(Vocab{}, 13);
  std::mt19937_64 ra(1), rb(1);
  EXPECT_EQ(a.generate(SourceKind::kWeb, 200, ra), b.generate(SourceKind::kWeb, 200, rb));
}

TEST(LanguageTest, RetrievalDocumentsEndWithQueryAndAnswer) {
  const Language lang(Vocab{}, 14);
  std::mt19937_64 rng(15);
  for (int doc = 0; doc < 200; ++doc) {
    const Document d = lang.generate(SourceKind::kRetrieval, 16 + doc % 49, rng);
    const std::size_t n = d.size();
    ASSERT_EQ(d[n - 7], Vocab::kQuery);
    ASSERT_EQ(d[n - 6], Vocab::kMark);
    const Document answer(d.end() - 5, d.end());
    // The statement "MARK key" appears exactly once before the query.
    int found = 0;
    for (std::size_t i = 0; i + 6 < n - 7 + 1; ++i) {
      if (d[i] == Vocab::kMark && std::equal(answer.begin(), answer.end(), d.begin() + i + 1)) {
        ++found;
      }
    }
    EXPECT_EQ(found, 1);
  }
}

TEST(CorpusFileTest, RoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "ropelab_corpus_test.txt";
  const std::vector<Document> docs{{1, 2, 3}, {60, 61}, {95}};
  write_corpus(path, "mine", docs);
  const CorpusSource back = read_corpus(path);
  EXPECT_EQ(back.name, "mine");
  EXPECT_EQ(back.kind, SourceKind::kFile);
  EXPECT_EQ(back.documents, docs);
  std::filesystem::remove(path);
}

TEST(CorpusFileTest, BadFilesAreIoErrors) {
  const auto dir = std::filesystem::temp_directory_path();
  EXPECT_THROW(read_corpus(dir / "ropelab_missing_corpus.txt"), IoError);
  const auto headless = dir / "ropelab_headless.txt";
  {
    std::ofstream(headless) << "1 2 3\n";
  }
  EXPECT_THROW(read_corpus(headless), IoError);
  const auto garbage = dir / "ropelab_garbage.txt";
  {
    std::ofstream(garbage) << "# source g\n1 x 3\n";
  }
  EXPECT_THROW(read_corpus(garbage), IoError);
  std::filesystem::remove(headless);
  std::filesystem::remove(garbage);
}

}  // namespace
}  // namespace ropelab
