#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "ropelab/config.h"
#include "ropelab/corpus.h"
#include "ropelab/eval.h"
#include "ropelab/model.h"
#include "ropelab/train.h"

namespace ropelab {

enum class ExtendMethod {
  kPI,
  kNTK,
  kDynamicNTK,
  kYaRN,
  kLmInfinite,
  kSelfExtend,
  kLandmark,
  kBlockwiseLora,
};

std::string to_string(ExtendMethod method);
// Throws ConfigError listing the valid names.
ExtendMethod extend_method_from_string(const std::string& name);
std::vector<std::string> extend_method_names();
// Frozen methods only rewrite the configuration.
bool is_frozen(ExtendMethod method);

// Independent seed streams derived from the run seed.
enum class SeedStream : std::uint64_t {
  kInit = 1,
  kPretrainData,
  kExtendData,
  kExtendInit,
  kEvalData,
  kNiah,
};
std::uint64_t derive_seed(std::uint64_t seed, SeedStream stream);

Language make_language(const RunConfig& config);

enum class Stage { kPretrain, kExtend };

// Sources with their stage-specific length ranges and file pools loaded.
std::vector<CorpusSource> stage_sources(const RunConfig& config, Stage stage);

// The packed chunk stream a stage trains on; enough chunks for its recipe.
std::vector<Document> training_chunks(const RunConfig& config, Stage stage);

// Held-out tokens for perplexity, drawn with extension-stage lengths.
Document eval_tokens(const RunConfig& config);

TrainRecipe stage_recipe(const RunConfig& config, Stage stage);

// Identity of a trained model: the run config plus the model's own config.
std::string model_hash(const RunConfig& config, const TinyLMConfig& model);

struct TrainedModel {
  TinyLM model;
  std::vector<LossPoint> curve;
  nlohmann::json metadata;
};

// Trains the base model at context C.
TrainedModel pretrain(const RunConfig& config, const TrainHooks& hooks = {});

// Model configuration a method runs under, derived from the base's.
TinyLMConfig extension_model_config(const RunConfig& config, const TinyLMConfig& base,
                                    ExtendMethod method);

// Fine-tunes (or, for frozen methods, reconfigures) a copy of `base`.
// `base_hash` is recorded as lineage.
TrainedModel extend(const RunConfig& config, const TinyLM& base, const std::string& base_hash,
                    ExtendMethod method, const TrainHooks& hooks = {});

// Perplexity, NIAH grid and NLL-by-position for one model. Cells the model
// cannot address are left unsupported.
EvalReport evaluate(const RunConfig& config, const TinyLM& model, const std::string& name,
                    const std::string& model_hash);

// Per-length perplexity over NTK ratio overrides of `model`.
GridSearchResult grid_scale(const RunConfig& config, const TinyLM& model);

}  // namespace ropelab
