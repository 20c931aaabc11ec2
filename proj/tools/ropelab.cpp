// Command-line front end: pretrain, extend, eval, compare, grid-scale.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ropelab/checkpoint.h"
#include "ropelab/config.h"
#include "ropelab/error.h"
#include "ropelab/pipeline.h"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ropelab;

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kIo = 4 };

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out;
  bool quiet = false;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config) {
  if (needs_config) {
    cmd->add_option("-c,--config", args.config_path, "run config (key = value lines)");
    cmd->add_option("--set", args.overrides, "override one config key (key=value)")
        ->allow_extra_args(false);
  }
  cmd->add_option("-o,--out", args.out, "output directory")->required();
  cmd->add_flag("-q,--quiet", args.quiet, "suppress progress output");
}

RunConfig build_config(const CommonArgs& args) {
  RunConfig config = args.config_path.empty() ? RunConfig{} : load_run_config(args.config_path);
  for (const auto& o : args.overrides) apply_override(config, o);
  config.validate();
  return config;
}

// Collects written files and emits manifest.json next to them.
class Manifest {
 public:
  Manifest(fs::path dir, std::string command) : dir_(std::move(dir)), command_(std::move(command)) {
    fs::create_directories(dir_);
  }

  void stamp(const RunConfig& config) {
    info_["config_hash"] = config.hash();
    info_["recipe_hash"] = config.recipe_hash();
    info_["seed"] = config.seed;
  }
  json& info() { return info_; }

  void add(const fs::path& path) {
    artifacts_.push_back({{"path", fs::relative(path, dir_).generic_string()},
                          {"sha256", sha256_file(path)},
                          {"bytes", fs::file_size(path)}});
  }

  void write() const {
    json j = info_;
    j["command"] = command_;
    j["artifacts"] = artifacts_;
    const auto path = dir_ / "manifest.json";
    std::ofstream out(path, std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("cannot write " + path.string());
  }

 private:
  fs::path dir_;
  std::string command_;
  json info_ = json::object();
  json artifacts_ = json::array();
};

fs::path write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("cannot write " + path.string());
  return path;
}

fs::path write_config(const fs::path& dir, const RunConfig& config) {
  return write_text(dir / "config.txt", "# config_hash=" + config.hash() +
                                            " seed=" + std::to_string(config.seed) + "\n" +
                                            config.canonical());
}

TrainHooks progress(bool quiet, const std::string& label) {
  TrainHooks hooks;
  if (!quiet) {
    hooks.on_step = [label](const LossPoint& p) {
      if (p.step % 100 == 0) {
        std::cerr << label << " step " << p.step << " loss " << p.loss << '\n';
      }
    };
  }
  return hooks;
}

std::string stamp_line(const RunConfig& config) {
  return "config_hash=" + config.hash() + " seed=" + std::to_string(config.seed);
}

Checkpoint load_or_fail(const std::string& path) {
  if (!fs::exists(path)) throw IoError("no such checkpoint: " + path);
  return load_checkpoint(path);
}

std::string meta_string(const json& meta, const char* key, const std::string& fallback) {
  return meta.contains(key) && meta.at(key).is_string() ? meta.at(key).get<std::string>()
                                                        : fallback;
}

// ---------------------------------------------------------------------------

int cmd_pretrain(const CommonArgs& args) {
  const RunConfig config = build_config(args);
  Manifest manifest(args.out, "pretrain");
  manifest.stamp(config);
  auto result = pretrain(config, progress(args.quiet, "pretrain"));
  const fs::path dir(args.out);
  manifest.add(write_config(dir, config));
  save_checkpoint(dir / "base.ckpt", result.model, result.metadata);
  manifest.add(dir / "base.ckpt");
  write_loss_csv(dir / "loss.csv", result.curve, stamp_line(config));
  manifest.add(dir / "loss.csv");
  manifest.info()["model_hash"] = result.metadata["model_hash"];
  manifest.write();
  return kOk;
}

int cmd_extend(const CommonArgs& args, const std::string& base_path, const std::string& method_name,
               bool merge) {
  const RunConfig config = build_config(args);
  const ExtendMethod method = extend_method_from_string(method_name);
  if (merge && method != ExtendMethod::kBlockwiseLora) {
    throw ConfigError("--merge applies to adapter methods only (blockwise-lora)");
  }
  const Checkpoint base = load_or_fail(base_path);
  const std::string base_hash = meta_string(base.metadata, "model_hash", sha256_file(base_path));
  Manifest manifest(args.out, "extend");
  manifest.stamp(config);
  auto result = extend(config, base.model, base_hash, method, progress(args.quiet, method_name));
  result.metadata["base_config_hash"] = meta_string(base.metadata, "config_hash", "");
  const fs::path dir(args.out);
  manifest.add(write_config(dir, config));
  const fs::path ckpt = dir / (method_name + ".ckpt");
  save_checkpoint(ckpt, result.model, result.metadata);
  manifest.add(ckpt);
  if (!result.curve.empty()) {
    write_loss_csv(dir / "loss.csv", result.curve, stamp_line(config));
    manifest.add(dir / "loss.csv");
  }
  if (merge) {
    TinyLM merged = result.model;
    merged.lora_merge();
    json meta = result.metadata;
    meta["merged"] = true;
    meta["model_hash"] = model_hash(config, merged.config());
    const fs::path merged_path = dir / (method_name + ".merged.ckpt");
    save_checkpoint(merged_path, merged, meta);
    manifest.add(merged_path);
  }
  manifest.info()["method"] = method_name;
  manifest.info()["base_hash"] = base_hash;
  manifest.write();
  return kOk;
}

std::vector<std::string> comparison_columns(const RunConfig& config) {
  std::vector<std::string> cols;
  for (int len : config.eval.ppl_lens) cols.push_back("ppl@" + std::to_string(len));
  for (int len : config.eval.niah_lens) cols.push_back("niah@" + std::to_string(len));
  return cols;
}

// One comparison row from a report: perplexities, then mean NIAH accuracy
// per length ("-" when any depth is unsupported).
std::vector<std::optional<Real>> comparison_row(const EvalReport& report,
                                                const std::vector<std::string>& columns) {
  std::vector<std::optional<Real>> row;
  for (const auto& col : columns) {
    const auto at = col.find('@');
    const std::string metric = col.substr(0, at);
    const long len = std::stol(col.substr(at + 1));
    std::optional<Real> value;
    if (metric == "ppl") {
      for (const auto& [key, cell] : report.ppl()) {
        if (key.second == len) value = cell.value;
      }
    } else {
      Real sum = 0;
      int n = 0;
      bool ok = true;
      for (const auto& [key, cell] : report.niah()) {
        if (key.first != len) continue;
        if (!cell.value) ok = false;
        else sum += *cell.value, ++n;
      }
      if (ok && n > 0) value = sum / n;
    }
    row.push_back(value);
  }
  return row;
}

void write_comparison(const fs::path& dir, const ComparisonTable& table, const std::string& stamp,
                      Manifest& manifest) {
  manifest.add(write_text(dir / "comparison.csv", table.csv(stamp)));
  json j = table.to_json();
  j["stamp"] = stamp;
  manifest.add(write_text(dir / "comparison.json", j.dump(2) + "\n"));
}

int cmd_eval(const CommonArgs& args, const std::vector<std::string>& checkpoints) {
  const RunConfig config = build_config(args);
  Manifest manifest(args.out, "eval");
  manifest.stamp(config);
  const fs::path dir(args.out);
  manifest.add(write_config(dir, config));
  const auto columns = comparison_columns(config);
  ComparisonTable table;
  table.columns = columns;
  std::set<std::string> names;
  for (const auto& path : checkpoints) {
    const Checkpoint ck = load_or_fail(path);
    std::string name = meta_string(ck.metadata, "method", fs::path(path).stem().string());
    if (ck.metadata.value("merged", false)) name += "-merged";
    while (names.contains(name)) name += "'";
    names.insert(name);
    const std::string hash = meta_string(ck.metadata, "model_hash", sha256_file(path));
    if (!args.quiet) std::cerr << "eval " << name << '\n';
    EvalReport report = evaluate(config, ck.model, name, hash);
    report.metadata()["checkpoint"] = fs::absolute(path).string();
    report.metadata()["recipe_hash"] = meta_string(ck.metadata, "recipe_hash", "");
    report.metadata()["eval_config_hash"] = config.hash();
    for (const auto& p : report.write(dir, name + ".")) manifest.add(p);
    table.add_row(name, meta_string(ck.metadata, "recipe_hash", ""),
                  comparison_row(report, columns));
  }
  write_comparison(dir, table, stamp_line(config), manifest);
  manifest.write();
  return kOk;
}

int cmd_compare(const CommonArgs& args, const std::vector<std::string>& reports) {
  Manifest manifest(args.out, "compare");
  ComparisonTable table;
  std::string stamp;
  for (const auto& path : reports) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read report " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw IoError("malformed report " + path + ": " + e.what());
    }
    const EvalReport report = EvalReport::from_json(j);
    if (table.columns.empty()) {
      std::set<long> ppl_lens, niah_lens;
      for (const auto& [key, cell] : report.ppl()) ppl_lens.insert(key.second);
      for (const auto& [key, cell] : report.niah()) niah_lens.insert(key.first);
      for (long l : ppl_lens) table.columns.push_back("ppl@" + std::to_string(l));
      for (long l : niah_lens) table.columns.push_back("niah@" + std::to_string(l));
      stamp = "config_hash=" + report.config_hash() + " seed=" + std::to_string(report.seed());
      manifest.info()["seed"] = report.seed();
    }
    const std::string name = report.metadata().value("model", fs::path(path).stem().string());
    table.add_row(name, report.metadata().value("recipe_hash", std::string()),
                  comparison_row(report, table.columns));
  }
  manifest.info()["recipe_hash"] = table.recipe_hash;
  write_comparison(args.out, table, stamp, manifest);
  manifest.write();
  return kOk;
}

int cmd_grid(const CommonArgs& args, const std::string& model_path) {
  const RunConfig config = build_config(args);
  const Checkpoint ck = load_or_fail(model_path);
  Manifest manifest(args.out, "grid-scale");
  manifest.stamp(config);
  const fs::path dir(args.out);
  manifest.add(write_config(dir, config));
  const std::string hash = meta_string(ck.metadata, "model_hash", sha256_file(model_path));
  EvalReport report(hash, config.seed);
  report.metadata()["model"] = meta_string(ck.metadata, "method", "model");
  report.metadata()["ppl_window"] = config.eval.ppl_window;
  report.set_grid(grid_scale(config, ck.model), hash);
  for (const auto& p : report.write(dir, "")) manifest.add(p);
  manifest.write();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ropelab: long-context extension experiments on a tiny RoPE transformer"};
  app.require_subcommand(1);

  CommonArgs pre_args;
  auto* pre = app.add_subcommand("pretrain", "train the base model at context C");
  add_common(pre, pre_args, true);

  CommonArgs ext_args;
  std::string base_path, method;
  bool merge = false;
  auto* ext = app.add_subcommand("extend", "extend a base checkpoint with one method");
  add_common(ext, ext_args, true);
  ext->add_option("--base", base_path, "base checkpoint")->required();
  ext->add_option("--method", method, "extension method")->required();
  ext->add_flag("--merge", merge, "also write a checkpoint with adapters folded in");

  CommonArgs eval_args;
  std::vector<std::string> checkpoints;
  auto* ev = app.add_subcommand("eval", "evaluate checkpoints and tabulate them");
  add_common(ev, eval_args, true);
  ev->add_option("checkpoints", checkpoints, "checkpoints to evaluate")->required();

  CommonArgs cmp_args;
  std::vector<std::string> reports;
  auto* cmp = app.add_subcommand("compare", "merge report.json files into one table");
  add_common(cmp, cmp_args, false);
  cmp->add_option("reports", reports, "report.json files")->required();

  CommonArgs grid_args;
  std::string grid_model;
  auto* grid = app.add_subcommand("grid-scale", "perplexity over NTK scale factors");
  add_common(grid, grid_args, true);
  grid->add_option("--model", grid_model, "checkpoint to rescale")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (pre->parsed()) return cmd_pretrain(pre_args);
    if (ext->parsed()) return cmd_extend(ext_args, base_path, method, merge);
    if (ev->parsed()) return cmd_eval(eval_args, checkpoints);
    if (cmp->parsed()) return cmd_compare(cmp_args, reports);
    if (grid->parsed()) return cmd_grid(grid_args, grid_model);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << '\n';
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
  return kFailure;
}
