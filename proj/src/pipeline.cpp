#include "ropelab/pipeline.h"

#include <algorithm>
#include <cmath>
#include <memory>

#include "ropelab/checkpoint.h"
#include "ropelab/error.h"

namespace ropelab {

namespace {

constexpr ExtendMethod kAllMethods[] = {
    ExtendMethod::kPI,         ExtendMethod::kNTK,        ExtendMethod::kDynamicNTK,
    ExtendMethod::kYaRN,       ExtendMethod::kLmInfinite, ExtendMethod::kSelfExtend,
    ExtendMethod::kLandmark,   ExtendMethod::kBlockwiseLora,
};

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// A scorer that owns its model.
class OwnedScorer final : public LanguageModel {
 public:
  OwnedScorer(TinyLM model, const std::string& name)
      : model_(std::make_unique<TinyLM>(std::move(model))), scorer_(*model_, name) {}
  std::string name() const override { return scorer_.name(); }
  int vocab_size() const override { return scorer_.vocab_size(); }
  long max_length() const override { return scorer_.max_length(); }
  std::vector<Real> token_nll(std::span<const int> seq) const override {
    return scorer_.token_nll(seq);
  }
  std::vector<std::vector<Real>> token_nll_batch(std::span<const Document> seqs) const override {
    return scorer_.token_nll_batch(seqs);
  }
  Document greedy(std::span<const int> prompt, int count) const override {
    return scorer_.greedy(prompt, count);
  }

 private:
  std::unique_ptr<TinyLM> model_;
  TinyLMScorer scorer_;
};

}  // namespace

std::string to_string(ExtendMethod method) {
  switch (method) {
    case ExtendMethod::kPI: return "pi";
    case ExtendMethod::kNTK: return "ntk";
    case ExtendMethod::kDynamicNTK: return "dynamic-ntk";
    case ExtendMethod::kYaRN: return "yarn";
    case ExtendMethod::kLmInfinite: return "lm-infinite";
    case ExtendMethod::kSelfExtend: return "self-extend";
    case ExtendMethod::kLandmark: return "landmark";
    case ExtendMethod::kBlockwiseLora: return "blockwise-lora";
  }
  return "?";
}

std::vector<std::string> extend_method_names() {
  std::vector<std::string> out;
  for (auto m : kAllMethods) out.push_back(to_string(m));
  return out;
}

ExtendMethod extend_method_from_string(const std::string& name) {
  for (auto m : kAllMethods) {
    if (to_string(m) == name) return m;
  }
  std::string valid;
  for (const auto& n : extend_method_names()) valid += (valid.empty() ? "" : ", ") + n;
  throw ConfigError("unknown method '" + name + "'; valid methods: " + valid);
}

bool is_frozen(ExtendMethod method) {
  return method == ExtendMethod::kDynamicNTK || method == ExtendMethod::kLmInfinite ||
         method == ExtendMethod::kSelfExtend;
}

std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream) {
  return mix64(mix64(seed) ^ static_cast<std::uint64_t>(stream));
}

Language make_language(const RunConfig& config) {
  return Language(config.vocab, config.language_seed);
}

std::vector<CorpusSource> stage_sources(const RunConfig& config, Stage stage) {
  std::vector<CorpusSource> out;
  for (std::size_t i = 0; i < config.sources.size(); ++i) {
    CorpusSource s = config.sources[i];
    if (stage == Stage::kExtend) s.lengths = config.extend_lengths[i];
    if (s.kind == SourceKind::kFile) {
      CorpusSource pool = read_corpus(s.path);
      s.documents = std::move(pool.documents);
    }
    out.push_back(std::move(s));
  }
  return out;
}

TrainRecipe stage_recipe(const RunConfig& config, Stage stage) {
  TrainRecipe r = stage == Stage::kPretrain ? config.pretrain : config.extend;
  r.train_len = int(stage == Stage::kPretrain ? config.model.C : config.extension.C_prime);
  r.seed = derive_seed(config.seed,
                       stage == Stage::kPretrain ? SeedStream::kPretrainData
                                                 : SeedStream::kExtendData);
  return r;
}

std::vector<Document> training_chunks(const RunConfig& config, Stage stage) {
  const TrainRecipe recipe = stage_recipe(config, stage);
  const std::uint64_t needed =
      std::uint64_t(recipe.steps()) * std::uint64_t(recipe.batch_size) * std::uint64_t(recipe.train_len);
  const auto docs =
      sample_mixture(stage_sources(config, stage), make_language(config), needed, recipe.seed);
  auto chunks = pack_chunks(docs, recipe.train_len);
  require(chunks.size() * std::size_t(recipe.train_len) >= needed,
          "sampled corpus is shorter than the recipe");
  return chunks;
}

Document eval_tokens(const RunConfig& config) {
  const auto docs = sample_mixture(stage_sources(config, Stage::kExtend), make_language(config),
                                   config.eval.ppl_tokens,
                                   derive_seed(config.seed, SeedStream::kEvalData));
  Document tokens = flatten(docs);
  tokens.resize(std::min<std::size_t>(tokens.size(), config.eval.ppl_tokens));
  return tokens;
}

std::string model_hash(const RunConfig& config, const TinyLMConfig& model) {
  return sha256_hex(config.hash() + "\n" + to_json(model).dump());
}

TrainedModel pretrain(const RunConfig& config, const TrainHooks& hooks) {
  config.validate();
  TinyLMConfig mc = config.model;
  mc.vocab_size = config.vocab.size;
  TinyLM model(mc, derive_seed(config.seed, SeedStream::kInit));
  const auto chunks = training_chunks(config, Stage::kPretrain);
  auto curve = run_training(model, stage_recipe(config, Stage::kPretrain), chunks, hooks);
  nlohmann::json meta = {{"stage", "pretrain"},
                         {"method", "base"},
                         {"config_hash", config.hash()},
                         {"recipe_hash", config.recipe_hash()},
                         {"model_hash", model_hash(config, model.config())},
                         {"seed", config.seed}};
  return {std::move(model), std::move(curve), std::move(meta)};
}

TinyLMConfig extension_model_config(const RunConfig& config, const TinyLMConfig& base,
                                    ExtendMethod method) {
  TinyLMConfig mc = base;
  const long C = base.C;
  const long Cp = config.extension.C_prime;
  const auto& ext = config.extension;
  mc.init_std = config.extend_init_std;
  auto scale = [&](ScalingMethod m) {
    mc.scaling = ScalingPolicy{};
    mc.scaling.method = m;
    mc.scaling.C = C;
    mc.scaling.C_prime = Cp;
    if (m == ScalingMethod::kYaRN) mc.scaling.yarn = yarn_default_params(C, Cp);
  };
  AttentionSpec spec;
  spec.C = C;
  switch (method) {
    case ExtendMethod::kPI: scale(ScalingMethod::kPI); break;
    case ExtendMethod::kNTK: scale(ScalingMethod::kNTK); break;
    case ExtendMethod::kDynamicNTK: scale(ScalingMethod::kDynamicNTK); break;
    case ExtendMethod::kYaRN: scale(ScalingMethod::kYaRN); break;
    case ExtendMethod::kLmInfinite:
      spec.kind = AttentionKind::kLmInfinite;
      spec.G = ext.G;
      spec.M = ext.M > 0 ? ext.M : int(C);
      break;
    case ExtendMethod::kSelfExtend:
      spec.kind = AttentionKind::kSelfExtend;
      spec.N = ext.N;
      spec.M = ext.M > 0 ? ext.M : int(C / 2);
      break;
    case ExtendMethod::kLandmark:
      spec.kind = AttentionKind::kLandmark;
      spec.B = ext.B;
      spec.top_n = ext.top_n;
      break;
    case ExtendMethod::kBlockwiseLora:
      spec.kind = AttentionKind::kBlockwiseShifted;
      spec.B = ext.B;
      spec.full_attention_at_inference = true;
      scale(ScalingMethod::kPI);
      mc.lora.enabled = true;
      break;
  }
  mc.attention = spec;
  try {
    mc.validate();
  } catch (const ContractError& e) {
    throw ConfigError(to_string(method) + ": " + e.what());
  }
  return mc;
}

TrainedModel extend(const RunConfig& config, const TinyLM& base, const std::string& base_hash,
                    ExtendMethod method, const TrainHooks& hooks) {
  config.validate();
  const TinyLMConfig mc = extension_model_config(config, base.config(), method);
  TinyLM model = base.adapt(mc, derive_seed(config.seed, SeedStream::kExtendInit));
  std::vector<LossPoint> curve;
  if (!is_frozen(method)) {
    const auto chunks = training_chunks(config, Stage::kExtend);
    curve = run_training(model, stage_recipe(config, Stage::kExtend), chunks, hooks);
  }
  nlohmann::json meta = {{"stage", "extend"},
                         {"method", to_string(method)},
                         {"frozen", is_frozen(method)},
                         {"config_hash", config.hash()},
                         {"recipe_hash", config.recipe_hash()},
                         {"model_hash", model_hash(config, model.config())},
                         {"base_hash", base_hash},
                         {"seed", config.seed}};
  return {std::move(model), std::move(curve), std::move(meta)};
}

namespace {

bool addressable(const RunConfig& config, const TinyLMConfig& mc, long len) {
  const long limit = mc.attention.max_length();
  if (limit >= 0 && len > limit) return false;
  if (config.eval.strict_context && mc.attention.kind == AttentionKind::kExact &&
      mc.scaling.method == ScalingMethod::kNone && len > mc.C) {
    return false;
  }
  return true;
}

}  // namespace

EvalReport evaluate(const RunConfig& config, const TinyLM& model, const std::string& name,
                    const std::string& model_hash) {
  config.validate();
  const auto& mc = model.config();
  const TinyLMScorer scorer(model, name, /*use_ema=*/true);
  const Language language = make_language(config);
  const Document tokens = eval_tokens(config);
  EvalReport report(model_hash, config.seed);
  report.metadata() = {{"model", name},
                       {"weights", "ema"},
                       {"niah_scoring", "exact-substring"},
                       {"ppl_window", config.eval.ppl_window},
                       {"ppl_tokens", tokens.size()}};

  for (int len : config.eval.ppl_lens) {
    std::optional<Real> value;
    if (addressable(config, mc, len)) {
      try {
        value = perplexity_sliding(scorer, tokens, len, config.eval.ppl_window);
      } catch (const NumericError&) {
        value = std::nan("");
      }
    }
    report.set_ppl(name, len, value, model_hash);
  }

  std::vector<int> lens;
  for (int len : config.eval.niah_lens) {
    if (addressable(config, mc, len)) {
      lens.push_back(len);
    } else {
      for (Real d : config.eval.niah_depths) report.set_niah(len, d, std::nullopt, model_hash);
    }
  }
  if (!lens.empty()) {
    const auto cells = niah_grid(scorer, language, lens, config.eval.niah_depths,
                                 config.eval.niah_cases,
                                 derive_seed(config.seed, SeedStream::kNiah));
    for (const auto& c : cells) report.set_niah(c.context_len, c.depth, c.accuracy, model_hash);
  }

  const long Cp = config.extension.C_prime;
  if (addressable(config, mc, Cp) && tokens.size() >= std::size_t(Cp)) {
    report.set_nll_by_position(nll_by_position(scorer, tokens, int(Cp), config.eval.nll_bucket),
                               config.eval.nll_bucket, model_hash);
  }
  return report;
}

GridSearchResult grid_scale(const RunConfig& config, const TinyLM& model) {
  config.validate();
  const Document tokens = eval_tokens(config);
  TinyLMConfig mc = model.config();
  if (mc.scaling.method == ScalingMethod::kNone) {
    mc.scaling.method = ScalingMethod::kNTK;
    mc.scaling.C = mc.C;
    mc.scaling.C_prime = config.extension.C_prime;
  }
  const ScaledModelFactory factory = [&](Real factor) -> std::unique_ptr<LanguageModel> {
    TinyLMConfig scaled = mc;
    scaled.scaling.ratio_override = factor;
    return std::make_unique<OwnedScorer>(model.adapt(scaled, 0), "factor");
  };
  return grid_search_scale(factory, config.eval.grid_factors, config.eval.grid_lens, tokens,
                           config.eval.ppl_window);
}

}  // namespace ropelab
