#include "ropelab/model.h"

#include <algorithm>
#include <cmath>
#include <random>

#include "ropelab/error.h"
#include "ropelab/ops.h"

namespace ropelab {

namespace {

const std::vector<std::string> kLoraTargets{"wq", "wk", "wv", "wo"};

std::string layer_name(int layer, const std::string& leaf) {
  return "layers." + std::to_string(layer) + "." + leaf;
}

// FNV-1a, so per-parameter streams do not depend on creation order.
std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

bool is_lora_param(const std::string& name) {
  return name.ends_with(".lora_a") || name.ends_with(".lora_b");
}

bool is_norm_param(const std::string& name) {
  return name.ends_with("norm");
}

}  // namespace

void TinyLMConfig::validate() const {
  require(n_layers >= 1, "n_layers must be >= 1");
  require(d_model >= 2, "d_model must be >= 2");
  require(n_heads >= 1, "n_heads must be >= 1");
  require(d_model % n_heads == 0, "d_model must be divisible by n_heads");
  require(d_k() % 2 == 0, "head dimension d_model/n_heads must be even");
  require(vocab_size >= 2, "vocab_size must be >= 2");
  require(C >= 1, "pretrain context C must be >= 1");
  require(d_ff >= 0, "d_ff must be >= 0");
  require(ema_decay >= 0.0 && ema_decay <= 1.0, "ema_decay must lie in [0, 1]");
  require(init_std > 0.0, "init_std must be positive");
  if (lora.enabled) {
    require(lora.rank >= 1, "lora.rank must be >= 1 when enabled");
    require(!lora.targets.empty(), "lora needs at least one target");
    for (const auto& t : lora.targets) {
      require(std::find(kLoraTargets.begin(), kLoraTargets.end(), t) !=
                  kLoraTargets.end(),
              "unknown lora target '" + t + "'");
    }
  }
  attention.validate();
}

std::uint64_t parameter_count(const TinyLMConfig& c) {
  const std::uint64_t d = std::uint64_t(c.d_model);
  const std::uint64_t v = std::uint64_t(c.vocab_size);
  const std::uint64_t ff = std::uint64_t(c.ff_width());
  std::uint64_t layer = 2 * d + 4 * d * d + 2 * d * ff;
  if (c.lora.enabled) layer += c.lora.targets.size() * 2 * d * std::uint64_t(c.lora.rank);
  if (c.attention.kind == AttentionKind::kLandmark) layer += d;
  return v * d + std::uint64_t(c.n_layers) * layer + d + d * v;
}

TinyLM::TinyLM(TinyLMConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  build(seed);
  ema_reset();
}

void TinyLM::add_param(const std::string& name, Shape shape, Real std, bool trainable,
                       std::uint64_t seed) {
  const std::size_t n = shape_numel(shape);
  std::vector<Real> data(n, Real{0});
  if (std > 0.0) {
    std::mt19937_64 rng(seed ^ name_hash(name));
    std::normal_distribution<Real> dist(0.0, std);
    for (auto& x : data) x = dist(rng);
  } else if (std < 0.0) {
    std::fill(data.begin(), data.end(), Real{1});
  }
  params_.push_back({name, Tensor::from_data(std::move(shape), std::move(data), trainable),
                     trainable});
}

void TinyLM::build(std::uint64_t seed) {
  const std::size_t d = std::size_t(config_.d_model);
  const std::size_t v = std::size_t(config_.vocab_size);
  const std::size_t ff = std::size_t(config_.ff_width());
  const Real s = config_.init_std;
  constexpr Real kOnes = -1.0;
  params_.clear();
  add_param("tok_emb", {v, d}, s, true, seed);
  for (int l = 0; l < config_.n_layers; ++l) {
    add_param(layer_name(l, "attn_norm"), {1, d}, kOnes, true, seed);
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      add_param(layer_name(l, w), {d, d}, s, true, seed);
    }
    if (config_.lora.enabled) {
      const std::size_t r = std::size_t(config_.lora.rank);
      for (const auto& t : config_.lora.targets) {
        add_param(layer_name(l, t + ".lora_a"), {d, r}, s, true, seed);
        add_param(layer_name(l, t + ".lora_b"), {r, d}, 0.0, true, seed);
      }
    }
    if (config_.attention.kind == AttentionKind::kLandmark) {
      add_param(layer_name(l, "landmark"), {1, d}, 0.0, true, seed);
    }
    add_param(layer_name(l, "ffn_norm"), {1, d}, kOnes, true, seed);
    add_param(layer_name(l, "w1"), {d, ff}, s, true, seed);
    add_param(layer_name(l, "w2"), {ff, d}, s, true, seed);
  }
  add_param("final_norm", {1, d}, kOnes, true, seed);
  add_param("head", {d, v}, s, true, seed);
  reindex();
  refresh_trainable();
}

void TinyLM::reindex() {
  index_.clear();
  for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i].name] = i;
}

// With adapters on, only adapters, embeddings, norms and landmark offsets
// train; otherwise everything does.
void TinyLM::refresh_trainable() {
  for (auto& p : params_) {
    bool train = true;
    if (config_.lora.enabled) {
      train = is_lora_param(p.name) || is_norm_param(p.name) || p.name == "tok_emb" ||
              p.name.ends_with(".landmark");
    }
    p.trainable = train;
    if (p.value.requires_grad() != train) p.value = p.value.detach(train);
  }
}

TinyLM TinyLM::adapt(TinyLMConfig config, std::uint64_t seed) const {
  TinyLM out(std::move(config), seed);
  for (auto& p : out.params_) {
    auto it = index_.find(p.name);
    if (it == index_.end()) continue;
    const auto& src = params_[it->second].value;
    if (src.shape() != p.value.shape()) {
      throw DimensionError("parameter " + p.name + " changes shape from " +
                           shape_str(src.shape()) + " to " +
                           shape_str(p.value.shape()));
    }
    std::copy(src.data().begin(), src.data().end(), p.value.mutable_data().begin());
  }
  out.ema_reset();
  for (std::size_t i = 0; i < out.params_.size(); ++i) {
    auto it = index_.find(out.params_[i].name);
    if (it != index_.end()) out.ema_[i] = ema_[it->second];
  }
  out.step_ = step_;
  out.lora_merged_ = lora_merged_;
  return out;
}

const TinyLM::Param& TinyLM::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return params_[it->second];
}

TinyLM::Param& TinyLM::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("no parameter named " + name);
  return params_[it->second];
}

bool TinyLM::has_param(const std::string& name) const { return index_.contains(name); }

std::uint64_t TinyLM::parameter_count() const {
  std::uint64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void TinyLM::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

void TinyLM::ema_reset() {
  ema_.clear();
  for (const auto& p : params_) ema_.emplace_back(p.value.data().begin(), p.value.data().end());
}

void TinyLM::ema_update() { ema_update(config_.ema_decay); }

void TinyLM::ema_update(Real decay) {
  require(ema_.size() == params_.size(), "ema shadow out of sync with parameters");
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto src = params_[i].value.data();
    auto& dst = ema_[i];
    require(dst.size() == src.size(), "ema shadow shape mismatch for " + params_[i].name);
    for (std::size_t j = 0; j < dst.size(); ++j) {
      dst[j] = decay * dst[j] + (1.0 - decay) * src[j];
    }
  }
}

void TinyLM::lora_merge() {
  if (lora_merged_) throw ContractError("adapters were already merged");
  require(config_.lora.enabled, "lora_merge needs lora enabled");
  const std::size_t d = std::size_t(config_.d_model);
  const std::size_t r = std::size_t(config_.lora.rank);
  const Real s = config_.lora.scale();
  auto fold = [&](std::span<Real> w, std::span<const Real> a, std::span<const Real> b) {
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = 0; k < r; ++k) {
        const Real aik = s * a[i * r + k];
        for (std::size_t j = 0; j < d; ++j) w[i * d + j] += aik * b[k * d + j];
      }
    }
  };
  for (int l = 0; l < config_.n_layers; ++l) {
    for (const auto& t : config_.lora.targets) {
      const std::size_t wi = index_.at(layer_name(l, t));
      const std::size_t ai = index_.at(layer_name(l, t + ".lora_a"));
      const std::size_t bi = index_.at(layer_name(l, t + ".lora_b"));
      fold(params_[wi].value.mutable_data(), params_[ai].value.data(),
           params_[bi].value.data());
      fold(ema_[wi], ema_[ai], ema_[bi]);
    }
  }
  std::vector<Param> kept;
  std::vector<std::vector<Real>> kept_ema;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (is_lora_param(params_[i].name)) continue;
    kept.push_back(std::move(params_[i]));
    kept_ema.push_back(std::move(ema_[i]));
  }
  params_ = std::move(kept);
  ema_ = std::move(kept_ema);
  config_.lora.enabled = false;
  lora_merged_ = true;
  reindex();
  refresh_trainable();
}

Tensor TinyLM::forward(std::span<const int> tokens, const ForwardOptions& options) const {
  return run(tokens, 1, options);
}

Tensor TinyLM::forward_batch(std::span<const int> tokens, int batch,
                             const ForwardOptions& options) const {
  return run(tokens, batch, options);
}

Tensor TinyLM::run(std::span<const int> tokens, int batch,
                   const ForwardOptions& options) const {
  require(batch >= 1, "batch must be >= 1");
  require(!tokens.empty(), "forward needs at least one token");
  require(tokens.size() % std::size_t(batch) == 0, "tokens not divisible by batch");
  const long n = static_cast<long>(tokens.size()) / batch;
  for (int id : tokens) {
    if (id < 0 || id >= config_.vocab_size) {
      throw ContractError("token id " + std::to_string(id) + " outside vocab of " +
                          std::to_string(config_.vocab_size));
    }
  }
  const long limit = config_.attention.max_length();
  if (limit >= 0 && n > limit) {
    throw ContractError("input of " + std::to_string(n) + " tokens exceeds the " +
                        to_string(config_.attention.kind) + " limit of " +
                        std::to_string(limit));
  }

  std::vector<Tensor> shadow;
  if (options.use_ema) {
    shadow.reserve(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      shadow.push_back(Tensor::from_data(params_[i].value.shape(), ema_[i]));
    }
  }
  auto w = [&](const std::string& name) -> const Tensor& {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("no parameter named " + name);
    return options.use_ema ? shadow[it->second] : params_[it->second].value;
  };

  const int d_k = config_.d_k();
  const FrequencyBasis basis = frequency_basis(d_k, config_.rope_base);
  const FrequencyScaling scaling =
      config_.scaling.resolve(d_k, options.scaling_length.value_or(n), config_.rope_base);
  const std::vector<Real> freqs = effective_frequencies(basis, scaling);

  auto project = [&](const Tensor& x, int layer, const std::string& target) {
    Tensor y = matmul(x, w(layer_name(layer, target)));
    if (config_.lora.enabled &&
        std::find(config_.lora.targets.begin(), config_.lora.targets.end(), target) !=
            config_.lora.targets.end()) {
      const Tensor low = matmul(matmul(x, w(layer_name(layer, target + ".lora_a"))),
                                w(layer_name(layer, target + ".lora_b")));
      y = add(y, scale(low, config_.lora.scale()));
    }
    return y;
  };

  Tensor x = embedding(w("tok_emb"), tokens);
  for (int l = 0; l < config_.n_layers; ++l) {
    const Tensor h = rms_norm(x, w(layer_name(l, "attn_norm")));
    const Tensor q = project(h, l, "wq");
    const Tensor k = project(h, l, "wk");
    const Tensor v = project(h, l, "wv");
    AttentionOptions attn;
    attn.heads = config_.n_heads;
    attn.batch = batch;
    attn.mode = options.mode;
    if (config_.attention.kind == AttentionKind::kLandmark) {
      attn.landmark_offset = w(layer_name(l, "landmark"));
    }
    const Tensor a = multi_head_attention(q, k, v, config_.attention, freqs, attn);
    x = add(x, project(a, l, "wo"));
    const Tensor h2 = rms_norm(x, w(layer_name(l, "ffn_norm")));
    x = add(x, matmul(gelu(matmul(h2, w(layer_name(l, "w1")))), w(layer_name(l, "w2"))));
  }
  x = rms_norm(x, w("final_norm"));
  return matmul(x, w("head"));
}

}  // namespace ropelab
