#include "ropelab/train.h"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "ropelab/error.h"
#include "ropelab/ops.h"

namespace ropelab {

void TrainRecipe::validate() const {
  require(train_len >= 2, "train_len must be >= 2");
  require(batch_size >= 1, "batch_size must be >= 1");
  require(warmup_steps >= 1, "warmup_steps must be >= 1");
  require(weight_decay == 0.0, "the recipe fixes weight_decay at 0");
  require(lr >= 0.0, "lr must be >= 0");
  require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
          "adam betas must lie in [0, 1)");
  require(eps > 0.0, "adam eps must be positive");
  require(grad_clip >= 0.0, "grad_clip must be >= 0");
  require(steps() >= 1, "total_tokens is smaller than one batch");
}

long TrainRecipe::steps() const {
  return static_cast<long>(total_tokens / (std::uint64_t(batch_size) * std::uint64_t(train_len)));
}

TrainRecipe paper_recipe() {
  TrainRecipe r;
  r.train_len = 32768;
  r.lr = 2e-5;
  r.warmup_steps = 20;
  r.batch_size = 32;
  r.total_tokens = std::uint64_t(r.batch_size) * std::uint64_t(r.train_len) * 1000;
  return r;
}

Real lr_at(const TrainRecipe& recipe, long step) {
  require(step >= 1, "steps are 1-based");
  if (step <= recipe.warmup_steps) return recipe.lr * Real(step) / Real(recipe.warmup_steps);
  return recipe.lr;
}

void Adam::step(TinyLM& model, Real lr) {
  auto& params = model.params();
  if (m_.size() != params.size()) {
    m_.assign(params.size(), {});
    v_.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i].value.numel(), 0.0);
      v_[i].assign(params[i].value.numel(), 0.0);
    }
  }
  ++t_;
  Real norm2 = 0;
  for (const auto& p : params) {
    if (!p.trainable || !p.value.has_grad()) continue;
    for (Real g : p.value.grad()) norm2 += g * g;
  }
  const Real norm = std::sqrt(norm2);
  const Real clip =
      recipe_.grad_clip > 0 && norm > recipe_.grad_clip ? recipe_.grad_clip / norm : 1.0;
  const Real bc1 = 1.0 - std::pow(recipe_.beta1, Real(t_));
  const Real bc2 = 1.0 - std::pow(recipe_.beta2, Real(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    if (!p.trainable || !p.value.has_grad()) continue;
    const auto g = p.value.grad();
    auto w = p.value.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const Real gj = g[j] * clip;
      m[j] = recipe_.beta1 * m[j] + (1 - recipe_.beta1) * gj;
      v[j] = recipe_.beta2 * v[j] + (1 - recipe_.beta2) * gj * gj;
      w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + recipe_.eps);
    }
  }
}

Tensor batch_loss(const TinyLM& model, std::span<const Document> batch, AttentionMode mode) {
  require(!batch.empty(), "empty batch");
  const std::size_t n = batch.front().size();
  std::vector<int> tokens;
  std::vector<int> targets;
  tokens.reserve(n * batch.size());
  targets.reserve(n * batch.size());
  for (const auto& seq : batch) {
    require(seq.size() == n, "batch sequences differ in length");
    tokens.insert(tokens.end(), seq.begin(), seq.end());
    for (std::size_t i = 0; i < n; ++i) targets.push_back(i + 1 < n ? seq[i + 1] : -1);
  }
  ForwardOptions opts;
  opts.mode = mode;
  opts.scaling_length = static_cast<long>(n);
  const Tensor logits = model.forward_batch(tokens, static_cast<int>(batch.size()), opts);
  return cross_entropy(logits, targets);
}

std::vector<LossPoint> run_training(TinyLM& model, const TrainRecipe& recipe,
                                    std::span<const Document> chunks,
                                    const TrainHooks& hooks) {
  recipe.validate();
  const long steps = recipe.steps();
  const std::size_t needed = std::size_t(steps) * std::size_t(recipe.batch_size);
  if (chunks.size() < needed) {
    throw ContractError("recipe needs " + std::to_string(needed) + " chunks, got " +
                        std::to_string(chunks.size()));
  }
  for (const auto& c : chunks.first(needed)) {
    if (int(c.size()) != recipe.train_len) {
      throw ContractError("chunk of " + std::to_string(c.size()) +
                          " tokens does not match train_len " +
                          std::to_string(recipe.train_len));
    }
  }
  Adam adam(recipe);
  std::vector<LossPoint> curve;
  curve.reserve(std::size_t(steps));
  for (long s = 1; s <= steps; ++s) {
    model.zero_grad();
    const auto batch = chunks.subspan(std::size_t(s - 1) * recipe.batch_size,
                                      std::size_t(recipe.batch_size));
    const Tensor loss = batch_loss(model, batch, AttentionMode::kTrain);
    const Real value = loss.item();
    if (!std::isfinite(value)) {
      throw NumericError("non-finite loss " + std::to_string(value) + " at step " +
                         std::to_string(s) + " of " + std::to_string(steps));
    }
    backward(loss);
    const Real lr = lr_at(recipe, s);
    adam.step(model, lr);
    model.ema_update();
    model.set_step(model.step() + 1);
    curve.push_back({s, lr, value});
    if (hooks.on_step) hooks.on_step(curve.back());
  }
  model.zero_grad();
  return curve;
}

void write_loss_csv(const std::filesystem::path& path, std::span<const LossPoint> curve,
                    const std::string& stamp) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "# " << stamp << '\n' << "step,lr,loss\n";
  out << std::setprecision(17);
  for (const auto& p : curve) out << p.step << ',' << p.lr << ',' << p.loss << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace ropelab
