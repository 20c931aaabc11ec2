#include "ropelab/checkpoint.h"

#include <bit>
#include <cstring>
#include <fstream>

#include "ropelab/error.h"

namespace ropelab {

namespace {

constexpr char kMagic[] = "ROPELAB-CKPT 1\n";

static_assert(std::endian::native == std::endian::little,
              "checkpoint blobs are written in host order");

void write_u64(std::ostream& out, std::uint64_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint64_t read_u64(std::istream& in) {
  std::uint64_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

nlohmann::json scaling_to_json(const ScalingPolicy& p) {
  nlohmann::json j{{"method", to_string(p.method)}, {"C", p.C}, {"C_prime", p.C_prime}};
  if (p.yarn) j["yarn"] = {{"p", p.yarn->p}, {"q", p.yarn->q}, {"T", p.yarn->T}};
  if (p.ratio_override) j["ratio_override"] = *p.ratio_override;
  return j;
}

ScalingPolicy scaling_from_json(const nlohmann::json& j) {
  ScalingPolicy p;
  p.method = scaling_method_from_string(j.at("method").get<std::string>());
  p.C = j.at("C").get<long>();
  p.C_prime = j.at("C_prime").get<long>();
  if (j.contains("yarn")) {
    const auto& y = j.at("yarn");
    p.yarn = YarnParams{y.at("p").get<Real>(), y.at("q").get<Real>(), y.at("T").get<Real>()};
  }
  if (j.contains("ratio_override")) p.ratio_override = j.at("ratio_override").get<Real>();
  return p;
}

}  // namespace

nlohmann::json to_json(const AttentionSpec& s) {
  return {{"kind", to_string(s.kind)}, {"C", s.C}, {"G", s.G}, {"M", s.M},
          {"N", s.N}, {"B", s.B}, {"top_n", s.top_n}, {"causal", s.causal},
          {"full_attention_at_inference", s.full_attention_at_inference}};
}

AttentionSpec attention_spec_from_json(const nlohmann::json& j) {
  AttentionSpec s;
  s.kind = attention_kind_from_string(j.at("kind").get<std::string>());
  s.C = j.at("C").get<long>();
  s.G = j.at("G").get<int>();
  s.M = j.at("M").get<int>();
  s.N = j.at("N").get<int>();
  s.B = j.at("B").get<int>();
  s.top_n = j.at("top_n").get<int>();
  s.causal = j.at("causal").get<bool>();
  s.full_attention_at_inference = j.at("full_attention_at_inference").get<bool>();
  return s;
}

nlohmann::json to_json(const TinyLMConfig& c) {
  return {{"n_layers", c.n_layers},
          {"d_model", c.d_model},
          {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},
          {"vocab_size", c.vocab_size},
          {"C", c.C},
          {"rope_base", c.rope_base},
          {"attention", to_json(c.attention)},
          {"scaling", scaling_to_json(c.scaling)},
          {"lora",
           {{"enabled", c.lora.enabled},
            {"rank", c.lora.rank},
            {"alpha", c.lora.alpha},
            {"targets", c.lora.targets}}},
          {"ema_decay", c.ema_decay},
          {"init_std", c.init_std}};
}

TinyLMConfig model_config_from_json(const nlohmann::json& j) {
  TinyLMConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.C = j.at("C").get<long>();
  c.rope_base = j.at("rope_base").get<Real>();
  c.attention = attention_spec_from_json(j.at("attention"));
  c.scaling = scaling_from_json(j.at("scaling"));
  const auto& l = j.at("lora");
  c.lora.enabled = l.at("enabled").get<bool>();
  c.lora.rank = l.at("rank").get<int>();
  c.lora.alpha = l.at("alpha").get<Real>();
  c.lora.targets = l.at("targets").get<std::vector<std::string>>();
  c.ema_decay = j.at("ema_decay").get<Real>();
  c.init_std = j.at("init_std").get<Real>();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const TinyLM& model,
                     const nlohmann::json& metadata) {
  nlohmann::json header;
  header["config"] = to_json(model.config());
  header["step"] = model.step();
  header["lora_merged"] = model.lora_merged();
  header["metadata"] = metadata;
  nlohmann::json blobs = nlohmann::json::array();
  for (const auto& p : model.params()) {
    blobs.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  }
  header["params"] = blobs;
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(kMagic, sizeof kMagic - 1);
  write_u64(out, text.size());
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& p : model.params()) {
    const auto d = p.value.data();
    out.write(reinterpret_cast<const char*>(d.data()), std::streamsize(d.size_bytes()));
  }
  for (const auto& e : model.ema()) {
    out.write(reinterpret_cast<const char*>(e.data()),
              std::streamsize(e.size() * sizeof(Real)));
  }
  if (!out) throw IoError("failed writing " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic - 1];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw IoError(path.string() + " is not a ropelab checkpoint");
  }
  const std::uint64_t len = read_u64(in);
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw IoError("truncated checkpoint header in " + path.string());
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }

  TinyLMConfig config = model_config_from_json(header.at("config"));
  const bool merged = header.value("lora_merged", false);
  // A merged model was saved without its adapters.
  TinyLM model(config, 0);
  const auto& blobs = header.at("params");
  require(blobs.size() == model.params().size(),
          "checkpoint parameter count does not match its config");
  for (std::size_t i = 0; i < blobs.size(); ++i) {
    auto& p = model.params()[i];
    if (blobs[i].at("name").get<std::string>() != p.name ||
        blobs[i].at("shape").get<Shape>() != p.value.shape()) {
      throw IoError("checkpoint blob " + std::to_string(i) + " does not match " + p.name);
    }
    auto d = p.value.mutable_data();
    in.read(reinterpret_cast<char*>(d.data()), std::streamsize(d.size_bytes()));
  }
  for (auto& e : model.mutable_ema()) {
    in.read(reinterpret_cast<char*>(e.data()), std::streamsize(e.size() * sizeof(Real)));
  }
  if (!in) throw IoError("truncated checkpoint data in " + path.string());
  model.set_step(header.at("step").get<long>());
  if (merged) model.mark_merged();
  return Checkpoint{std::move(model), header.at("metadata")};
}

}  // namespace ropelab
