#include <gtest/gtest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"
#include "ropelab/checkpoint.h"
#include "ropelab/config.h"
#include "test_util.h"

namespace ropelab {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

const fs::path& work_dir() {
  static const fs::path dir = [] {
    const fs::path d = fs::temp_directory_path() / ("ropelab_cli_test_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

// Runs the CLI with stdout/stderr discarded and returns its exit status.
int run(const std::string& args) {
  const std::string cmd = std::string(ROPELAB_CLI) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string cfg() { return std::string("-c ") + ROPELAB_TINY_CFG + " -q"; }

std::string slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

json read_json(const fs::path& path) { return json::parse(slurp(path)); }

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    base_dir_ = work_dir() / "pre";
    ASSERT_EQ(run("pretrain " + cfg() + " -o " + base_dir_.string()), 0);
  }
  static void TearDownTestSuite() { fs::remove_all(work_dir()); }

  static fs::path base() { return base_dir_ / "base.ckpt"; }
  static fs::path dir(const std::string& name) { return work_dir() / name; }

  static fs::path base_dir_;
};

fs::path CliTest::base_dir_;

TEST_F(CliTest, PretrainManifestListsHashedArtifacts) {
  const json m = read_json(base_dir_ / "manifest.json");
  EXPECT_EQ(m.at("command"), "pretrain");
  EXPECT_EQ(m.at("seed"), 3);
  EXPECT_EQ(m.at("config_hash"), load_run_config(ROPELAB_TINY_CFG).hash());
  EXPECT_EQ(m.at("recipe_hash").get<std::string>().size(), 64u);
  std::set<std::string> names;
  for (const auto& a : m.at("artifacts")) {
    const fs::path p = base_dir_ / a.at("path").get<std::string>();
    names.insert(a.at("path"));
    EXPECT_EQ(a.at("sha256"), sha256_file(p));
    EXPECT_EQ(a.at("bytes"), fs::file_size(p));
  }
  EXPECT_EQ(names, (std::set<std::string>{"base.ckpt", "config.txt", "loss.csv"}));
}

TEST_F(CliTest, LossCsvHasOneRowPerStep) {
  std::ifstream in(base_dir_ / "loss.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("# config_hash=", 0), 0u);
  std::getline(in, line);
  EXPECT_EQ(line, "step,lr,loss");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  // 4096 tokens in batches of 4 x 16.
  EXPECT_EQ(rows, 64);
}

TEST_F(CliTest, RepeatedPretrainIsByteIdentical) {
  const fs::path again = dir("pre_again");
  ASSERT_EQ(run("pretrain " + cfg() + " -o " + again.string()), 0);
  EXPECT_EQ(slurp(again / "base.ckpt"), slurp(base()));
  EXPECT_EQ(slurp(again / "loss.csv"), slurp(base_dir_ / "loss.csv"));
}

TEST_F(CliTest, ExitCodes) {
  const fs::path no_seed = work_dir() / "no_seed.cfg";
  std::ofstream(no_seed) << "model.C = 16\n";
  EXPECT_EQ(run("pretrain -q -c " + no_seed.string() + " -o " + dir("x1").string()), 2);
  EXPECT_EQ(run("pretrain " + cfg() + " --set model.nope=1 -o " + dir("x2").string()), 2);
  EXPECT_EQ(run("pretrain " + cfg() + " -o"), 2);
  EXPECT_EQ(run("pretrain -q -c /nonexistent/x.cfg -o " + dir("x3").string()), 4);
  EXPECT_EQ(run("extend " + cfg() + " --base /nonexistent/base.ckpt --method pi -o " +
                dir("x4").string()),
            4);
  EXPECT_EQ(run("extend " + cfg() + " --base " + base().string() + " --method warp -o " +
                dir("x5").string()),
            2);
  EXPECT_EQ(run("extend " + cfg() + " --base " + base().string() + " --method pi --merge -o " +
                dir("x6").string()),
            2);
  EXPECT_EQ(run("pretrain " + cfg() + " --set model.init_std=1e300 -o " + dir("x7").string()), 3);
}

TEST_F(CliTest, LmInfiniteKeepsBaseWeights) {
  const fs::path out = dir("lminf");
  ASSERT_EQ(run("extend " + cfg() + " --base " + base().string() + " --method lm-infinite -o " +
                out.string()),
            0);
  const Checkpoint a = load_checkpoint(base());
  const Checkpoint b = load_checkpoint(out / "lm-infinite.ckpt");
  ASSERT_EQ(a.model.params().size(), b.model.params().size());
  for (std::size_t i = 0; i < a.model.params().size(); ++i) {
    EXPECT_EQ(testing::max_abs_diff(a.model.params()[i].value.data(),
                                    b.model.params()[i].value.data()),
              0.0);
  }
  const json m = read_json(out / "manifest.json");
  EXPECT_EQ(m.at("method"), "lm-infinite");
  EXPECT_EQ(b.metadata.at("base_config_hash"), load_run_config(ROPELAB_TINY_CFG).hash());
}

TEST_F(CliTest, MergedAdapterMatchesUnmerged) {
  const fs::path out = dir("lora");
  ASSERT_EQ(run("extend " + cfg() + " --base " + base().string() +
                " --method blockwise-lora --merge -o " + out.string()),
            0);
  const Checkpoint raw = load_checkpoint(out / "blockwise-lora.ckpt");
  const Checkpoint merged = load_checkpoint(out / "blockwise-lora.merged.ckpt");
  EXPECT_TRUE(merged.metadata.value("merged", false));
  const Document tokens{5, 60, 61, 7, 62, 9, 70, 71, 72, 80};
  const auto a = raw.model.forward(tokens);
  const auto b = merged.model.forward(tokens);
  EXPECT_LT(testing::max_abs_diff(a.data(), b.data()), 1e-5);
}

TEST_F(CliTest, EvalMarksUnsupportedLengths) {
  const fs::path ext = dir("se");
  ASSERT_EQ(run("extend " + cfg() + " --base " + base().string() + " --method self-extend -o " +
                ext.string()),
            0);
  const fs::path out = dir("se_eval");
  ASSERT_EQ(run("eval " + cfg() + " -o " + out.string() + " " + base().string() + " " +
                (ext / "self-extend.ckpt").string()),
            0);
  std::ifstream in(out / "comparison.csv");
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("# config_hash=", 0), 0u);
  std::getline(in, line);
  EXPECT_EQ(line, "method,ppl@16,ppl@32,niah@16,niah@32");
  bool saw = false;
  while (std::getline(in, line)) {
    if (line.rfind("self-extend,", 0) != 0) continue;
    saw = true;
    std::vector<std::string> cells;
    std::stringstream s(line);
    for (std::string c; std::getline(s, c, ',');) cells.push_back(c);
    ASSERT_EQ(cells.size(), 5u);
    EXPECT_NE(cells[1], "-");
    EXPECT_EQ(cells[2], "-");
    EXPECT_EQ(cells[4], "-");
  }
  EXPECT_TRUE(saw);
  EXPECT_TRUE(fs::exists(out / "self-extend.report.json"));
  EXPECT_TRUE(fs::exists(out / "manifest.json"));
}

TEST_F(CliTest, CompareRefusesMixedRecipes) {
  const fs::path a = dir("cmp_a"), b = dir("cmp_b");
  ASSERT_EQ(run("extend " + cfg() + " --base " + base().string() + " --method pi -o " +
                a.string()),
            0);
  ASSERT_EQ(run("extend " + cfg() + " --set extend.lr=0.001 --base " + base().string() +
                " --method ntk -o " + b.string()),
            0);
  ASSERT_EQ(run("eval " + cfg() + " -o " + (a / "ev").string() + " " + (a / "pi.ckpt").string()),
            0);
  ASSERT_EQ(run("eval " + cfg() + " -o " + (b / "ev").string() + " " + (b / "ntk.ckpt").string()),
            0);
  const std::string ra = (a / "ev" / "pi.report.json").string();
  const std::string rb = (b / "ev" / "ntk.report.json").string();
  EXPECT_EQ(run("compare -q -o " + dir("cmp_ok").string() + " " + ra), 0);
  EXPECT_TRUE(fs::exists(dir("cmp_ok") / "comparison.csv"));
  EXPECT_EQ(run("compare -q -o " + dir("cmp_bad").string() + " " + ra + " " + rb), 2);
  EXPECT_EQ(run("compare -q -o " + dir("cmp_io").string() + " /nonexistent/r.json"), 4);
}

TEST_F(CliTest, GridScaleTable) {
  const fs::path out = dir("grid");
  ASSERT_EQ(run("grid-scale " + cfg() + " --model " + base().string() + " -o " + out.string()), 0);
  std::ifstream in(out / "grid_scale.csv");
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) {
    if (!line.empty() && line[0] != '#') lines.push_back(line);
  }
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0].substr(lines[0].find(',')), ",32,64");
  EXPECT_EQ(lines[1].rfind("1,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("4,", 0), 0u);
  EXPECT_EQ(read_json(out / "manifest.json").at("command"), "grid-scale");
}

}  // namespace
}  // namespace ropelab
