#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ropelab/corpus.h"
#include "ropelab/model.h"

namespace ropelab {

struct TrainRecipe {
  int train_len = 256;
  std::uint64_t total_tokens = 1 << 21;
  Real lr = 3e-4;
  int warmup_steps = 20;
  Real weight_decay = 0.0;
  int batch_size = 8;
  std::uint64_t seed = 0;
  // Adam.
  Real beta1 = 0.9;
  Real beta2 = 0.999;
  Real eps = 1e-8;
  // Global gradient-norm clip; 0 disables.
  Real grad_clip = 1.0;

  void validate() const;
  long steps() const;
};

// The 7B continual-pretraining recipe, verbatim.
TrainRecipe paper_recipe();

// Learning rate at a 1-based step: linear warm-up to lr, then constant.
Real lr_at(const TrainRecipe& recipe, long step);

struct LossPoint {
  long step = 0;
  Real lr = 0;
  Real loss = 0;
};

struct TrainHooks {
  std::function<void(const LossPoint&)> on_step;
};

// Adam state for the trainable parameters of one model.
class Adam {
 public:
  explicit Adam(const TrainRecipe& recipe) : recipe_(recipe) {}
  void step(TinyLM& model, Real lr);
  long t() const { return t_; }

 private:
  TrainRecipe recipe_;
  long t_ = 0;
  std::vector<std::vector<Real>> m_;
  std::vector<std::vector<Real>> v_;
};

// Runs recipe.steps() optimiser steps over consecutive batches of `chunks`,
// updating the EMA after every step. Throws NumericError on a non-finite
// loss.
std::vector<LossPoint> run_training(TinyLM& model, const TrainRecipe& recipe,
                                    std::span<const Document> chunks,
                                    const TrainHooks& hooks = {});

// Mean next-token loss of one batch; builds the graph when grads are on.
Tensor batch_loss(const TinyLM& model, std::span<const Document> batch, AttentionMode mode);

void write_loss_csv(const std::filesystem::path& path, std::span<const LossPoint> curve,
                    const std::string& stamp);

}  // namespace ropelab
