#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "ropelab/config.h"
#include "ropelab/error.h"

namespace ropelab {
namespace {

TEST(Sha256Test, KnownDigests) {
  EXPECT_EQ(sha256_hex(""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const auto path = std::filesystem::temp_directory_path() / "ropelab_sha_test.txt";
  std::ofstream(path) << "abc";
  EXPECT_EQ(sha256_file(path), sha256_hex("abc"));
  std::filesystem::remove(path);
  EXPECT_THROW(sha256_file(path), IoError);
}

TEST(RunConfigTest, ParsesKeysCommentsAndLists) {
  const RunConfig c = parse_run_config(R"(
# a comment
seed = 11
model.C = 32       # trailing comment
pretrain.lr = 0.002
eval.ppl_lens = 32, 64
eval.niah_depths = 0, 0.5, 1
)");
  EXPECT_EQ(c.seed, 11u);
  EXPECT_TRUE(c.seed_set);
  EXPECT_EQ(c.model.C, 32);
  EXPECT_EQ(c.pretrain.lr, 0.002);
  EXPECT_EQ(c.eval.ppl_lens, (std::vector<int>{32, 64}));
  EXPECT_EQ(c.eval.niah_depths, (std::vector<Real>{0, 0.5, 1}));
  EXPECT_EQ(c.get("model.C"), "32");
}

TEST(RunConfigTest, UnknownKeysAndBadValuesAreConfigErrors) {
  try {
    parse_run_config("modle.C = 3\n");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("modle.C"), std::string::npos);
  }
  EXPECT_THROW(parse_run_config("model.C = many\n"), ConfigError);
  EXPECT_THROW(parse_run_config("no equals sign\n"), ConfigError);
  RunConfig c;
  EXPECT_THROW(apply_override(c, "seed"), ConfigError);
  EXPECT_THROW(c.get("nope"), ConfigError);
}

TEST(RunConfigTest, SeedIsRequired) {
  RunConfig c;
  EXPECT_THROW(c.validate(), ConfigError);
  apply_override(c, "seed=3");
  EXPECT_NO_THROW(c.validate());
}

TEST(RunConfigTest, CrossFieldValidation) {
  RunConfig c = parse_run_config("seed = 1\ncorpus.web.weight = 0.9\n");
  EXPECT_THROW(c.validate(), ConfigError);
  c = parse_run_config("seed = 1\nextend.C_prime = 32\n");
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(RunConfigTest, OverridesApplyInOrder) {
  RunConfig c = parse_run_config("seed = 1\nmodel.d_model = 32\n");
  apply_override(c, "model.d_model=48");
  apply_override(c, "extend.lr = 1e-4");
  EXPECT_EQ(c.model.d_model, 48);
  EXPECT_EQ(c.extend.lr, 1e-4);
}

TEST(RunConfigTest, HashIsStableAndSensitive) {
  const RunConfig a = parse_run_config("seed = 1\npretrain.lr = 0.001\n");
  const RunConfig b = parse_run_config("pretrain.lr=1e-3\n\nseed=1   # same values, other text\n");
  EXPECT_EQ(a.canonical(), b.canonical());
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_EQ(a.hash().size(), 64u);
  EXPECT_EQ(a.hash(), sha256_hex(a.canonical()));
  RunConfig c = a;
  apply_override(c, "eval.niah_cases=11");
  EXPECT_NE(c.hash(), a.hash());
}

TEST(RunConfigTest, RecipeHashCoversOnlyTheFineTuningRecipe) {
  const RunConfig a = parse_run_config("seed = 1\n");
  RunConfig b = a;
  apply_override(b, "eval.niah_cases=3");
  apply_override(b, "pretrain.lr=0.01");
  EXPECT_EQ(a.recipe_hash(), b.recipe_hash());
  apply_override(b, "extend.lr=0.01");
  EXPECT_NE(a.recipe_hash(), b.recipe_hash());
  RunConfig c = a;
  apply_override(c, "seed=2");
  EXPECT_NE(a.recipe_hash(), c.recipe_hash());
}

TEST(RunConfigTest, CanonicalRoundTrips) {
  RunConfig a = parse_run_config("seed = 5\nmodel.lora.targets = wq, wk\n");
  const RunConfig b = parse_run_config(a.canonical());
  EXPECT_EQ(a.canonical(), b.canonical());
  for (const auto& k : a.keys()) EXPECT_EQ(a.get(k), b.get(k)) << k;
}

TEST(RunConfigTest, DeskPresetDefaults) {
  const RunConfig c;
  EXPECT_EQ(c.model.n_layers, 2);
  EXPECT_EQ(c.model.d_model, 64);
  EXPECT_EQ(c.model.n_heads, 4);
  EXPECT_EQ(c.model.C, 64);
  EXPECT_EQ(c.extension.C_prime, 256);
  EXPECT_EQ(c.extension.G, 10);
  Real total = 0;
  for (const auto& s : c.sources) total += s.mixture_weight;
  EXPECT_NEAR(total, 1.0, 1e-9);
}

TEST(RunConfigTest, MissingFileIsIoError) {
  EXPECT_THROW(load_run_config("/nonexistent/ropelab.cfg"), IoError);
}

}  // namespace
}  // namespace ropelab
