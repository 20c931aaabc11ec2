#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ropelab/attention.h"
#include "ropelab/rope.h"
#include "ropelab/tensor.h"

namespace ropelab {

struct LoraConfig {
  bool enabled = false;
  int rank = 8;
  Real alpha = 16.0;
  // Any of wq, wk, wv, wo.
  std::vector<std::string> targets{"wq", "wv"};

  Real scale() const { return alpha / static_cast<Real>(rank); }
};

struct TinyLMConfig {
  int n_layers = 2;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 0;  // 0 means 4 * d_model
  int vocab_size = 96;
  long C = 64;
  Real rope_base = kDefaultRopeBase;
  AttentionSpec attention;
  ScalingPolicy scaling;
  LoraConfig lora;
  Real ema_decay = 0.999;
  Real init_std = 0.02;

  int d_k() const { return d_model / n_heads; }
  int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  void validate() const;
};

// Closed-form number of scalar parameters, adapters and landmark offsets
// included.
std::uint64_t parameter_count(const TinyLMConfig& config);

struct ForwardOptions {
  AttentionMode mode = AttentionMode::kInference;
  // Length the scaling policy resolves against; defaults to the input length.
  std::optional<long> scaling_length;
  bool use_ema = false;
};

// Decoder-only transformer: token embedding, pre-norm blocks of RoPE
// attention and a GELU feed-forward, final RMS norm, untied output head.
class TinyLM {
 public:
  struct Param {
    std::string name;
    Tensor value;
    bool trainable = true;
  };

  TinyLM(TinyLMConfig config, std::uint64_t seed);

  // A model under `config` that keeps every parameter (and its EMA shadow)
  // whose name also exists here and initialises the rest (fresh adapters,
  // landmark offsets).
  TinyLM adapt(TinyLMConfig config, std::uint64_t seed) const;

  const TinyLMConfig& config() const { return config_; }

  // Logits [n x vocab] for one sequence.
  Tensor forward(std::span<const int> tokens,
                 const ForwardOptions& options = {}) const;
  // `batch` sequences of equal length laid end to end; logits [batch*n x vocab].
  Tensor forward_batch(std::span<const int> tokens, int batch,
                       const ForwardOptions& options = {}) const;

  std::vector<Param>& params() { return params_; }
  const std::vector<Param>& params() const { return params_; }
  const Param& param(const std::string& name) const;
  Param& param(const std::string& name);
  bool has_param(const std::string& name) const;
  std::uint64_t parameter_count() const;

  // Folds every adapter into its target matrix and drops it.
  void lora_merge();
  bool lora_merged() const { return lora_merged_; }
  void mark_merged() { lora_merged_ = true; }

  const std::vector<std::vector<Real>>& ema() const { return ema_; }
  std::vector<std::vector<Real>>& mutable_ema() { return ema_; }
  void ema_reset();
  void ema_update();
  void ema_update(Real decay);

  long step() const { return step_; }
  void set_step(long step) { step_ = step; }

  void zero_grad();

 private:
  void build(std::uint64_t seed);
  void add_param(const std::string& name, Shape shape, Real std, bool trainable,
                 std::uint64_t seed);
  void refresh_trainable();
  void reindex();
  Tensor run(std::span<const int> tokens, int batch,
             const ForwardOptions& options) const;

  TinyLMConfig config_;
  std::vector<Param> params_;
  std::map<std::string, std::size_t> index_;
  std::vector<std::vector<Real>> ema_;
  long step_ = 0;
  bool lora_merged_ = false;
};

}  // namespace ropelab
