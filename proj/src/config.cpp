#include "ropelab/config.h"

#include <openssl/evp.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "ropelab/error.h"

namespace ropelab {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_number(const std::string& s) {
  T value{};
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, value);
  if (ec != std::errc() || ptr != end) throw ConfigError("cannot parse '" + s + "'");
  return value;
}

template <class T>
T parse_value(const std::string& s) {
  if constexpr (std::is_same_v<T, bool>) {
    if (s == "true" || s == "1") return true;
    if (s == "false" || s == "0") return false;
    throw ConfigError("expected true or false, got '" + s + "'");
  } else if constexpr (std::is_same_v<T, std::string>) {
    return s;
  } else if constexpr (std::is_arithmetic_v<T>) {
    return parse_number<T>(s);
  } else {
    T out;
    for (const auto& item : split_list(s)) {
      out.push_back(parse_value<typename T::value_type>(item));
    }
    return out;
  }
}

template <class T>
std::string format_value(const T& v) {
  if constexpr (std::is_same_v<T, bool>) {
    return v ? "true" : "false";
  } else if constexpr (std::is_same_v<T, std::string>) {
    return v;
  } else if constexpr (std::is_arithmetic_v<T>) {
    char buf[64];
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, ptr);
  } else {
    std::string out;
    for (const auto& item : v) {
      if (!out.empty()) out += ',';
      out += format_value(item);
    }
    return out;
  }
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

// `ref` maps a (const or mutable) config to the member it controls.
template <class Ref>
Field field(Ref ref) {
  return Field{
      [ref](const RunConfig& c) { return format_value(ref(c)); },
      [ref](RunConfig& c, const std::string& v) {
        auto& member = ref(c);
        member = parse_value<std::decay_t<decltype(member)>>(v);
      }};
}

void add_recipe_fields(std::map<std::string, Field>& f, const std::string& prefix,
                       TrainRecipe RunConfig::*recipe) {
  f[prefix + ".tokens"] = field([recipe](auto& c) -> auto& { return (c.*recipe).total_tokens; });
  f[prefix + ".lr"] = field([recipe](auto& c) -> auto& { return (c.*recipe).lr; });
  f[prefix + ".warmup"] = field([recipe](auto& c) -> auto& { return (c.*recipe).warmup_steps; });
  f[prefix + ".batch"] = field([recipe](auto& c) -> auto& { return (c.*recipe).batch_size; });
  f[prefix + ".weight_decay"] =
      field([recipe](auto& c) -> auto& { return (c.*recipe).weight_decay; });
  f[prefix + ".beta1"] = field([recipe](auto& c) -> auto& { return (c.*recipe).beta1; });
  f[prefix + ".beta2"] = field([recipe](auto& c) -> auto& { return (c.*recipe).beta2; });
  f[prefix + ".eps"] = field([recipe](auto& c) -> auto& { return (c.*recipe).eps; });
  f[prefix + ".grad_clip"] = field([recipe](auto& c) -> auto& { return (c.*recipe).grad_clip; });
}

const std::map<std::string, Field>& fixed_fields() {
  static const std::map<std::string, Field> fields = [] {
    std::map<std::string, Field> f;
    f["seed"] = Field{[](const RunConfig& c) { return format_value(c.seed); },
                      [](RunConfig& c, const std::string& v) {
                        c.seed = parse_value<std::uint64_t>(v);
                        c.seed_set = true;
                      }};
    f["model.layers"] = field([](auto& c) -> auto& { return c.model.n_layers; });
    f["model.d_model"] = field([](auto& c) -> auto& { return c.model.d_model; });
    f["model.heads"] = field([](auto& c) -> auto& { return c.model.n_heads; });
    f["model.d_ff"] = field([](auto& c) -> auto& { return c.model.d_ff; });
    f["model.vocab"] = Field{[](const RunConfig& c) { return format_value(c.vocab.size); },
                             [](RunConfig& c, const std::string& v) {
                               c.vocab.size = parse_value<int>(v);
                               c.model.vocab_size = c.vocab.size;
                             }};
    f["model.key_len"] = field([](auto& c) -> auto& { return c.vocab.key_len; });
    f["model.C"] = field([](auto& c) -> auto& { return c.model.C; });
    f["model.rope_base"] = field([](auto& c) -> auto& { return c.model.rope_base; });
    f["model.ema_decay"] = field([](auto& c) -> auto& { return c.model.ema_decay; });
    f["model.init_std"] = field([](auto& c) -> auto& { return c.model.init_std; });
    f["model.lora.rank"] = field([](auto& c) -> auto& { return c.model.lora.rank; });
    f["model.lora.alpha"] = field([](auto& c) -> auto& { return c.model.lora.alpha; });
    f["model.lora.targets"] = field([](auto& c) -> auto& { return c.model.lora.targets; });
    f["corpus.seed"] = field([](auto& c) -> auto& { return c.language_seed; });
    f["corpus.sources"] = Field{
        [](const RunConfig& c) {
          std::vector<std::string> names;
          for (const auto& s : c.sources) names.push_back(s.name);
          return format_value(names);
        },
        [](RunConfig& c, const std::string& v) {
          std::vector<CorpusSource> sources;
          std::vector<LengthRange> ext;
          for (const auto& name : split_list(v)) {
            auto it = std::find_if(c.sources.begin(), c.sources.end(),
                                   [&](const CorpusSource& s) { return s.name == name; });
            if (it != c.sources.end()) {
              sources.push_back(*it);
              ext.push_back(c.extend_lengths[std::size_t(it - c.sources.begin())]);
              continue;
            }
            CorpusSource s;
            s.name = name;
            try {
              s.kind = source_kind_from_string(name);
            } catch (const ContractError&) {
              s.kind = SourceKind::kWeb;
            }
            s.mixture_weight = 0;
            sources.push_back(s);
            ext.push_back(s.lengths);
          }
          if (sources.empty()) throw ConfigError("corpus.sources is empty");
          c.sources = std::move(sources);
          c.extend_lengths = std::move(ext);
        }};
    add_recipe_fields(f, "pretrain", &RunConfig::pretrain);
    add_recipe_fields(f, "extend", &RunConfig::extend);
    f["extend.init_std"] = field([](auto& c) -> auto& { return c.extend_init_std; });
    f["extend.C_prime"] = field([](auto& c) -> auto& { return c.extension.C_prime; });
    f["extend.G"] = field([](auto& c) -> auto& { return c.extension.G; });
    f["extend.M"] = field([](auto& c) -> auto& { return c.extension.M; });
    f["extend.N"] = field([](auto& c) -> auto& { return c.extension.N; });
    f["extend.B"] = field([](auto& c) -> auto& { return c.extension.B; });
    f["extend.top_n"] = field([](auto& c) -> auto& { return c.extension.top_n; });
    f["eval.ppl_lens"] = field([](auto& c) -> auto& { return c.eval.ppl_lens; });
    f["eval.ppl_window"] = field([](auto& c) -> auto& { return c.eval.ppl_window; });
    f["eval.ppl_tokens"] = field([](auto& c) -> auto& { return c.eval.ppl_tokens; });
    f["eval.niah_lens"] = field([](auto& c) -> auto& { return c.eval.niah_lens; });
    f["eval.niah_depths"] = field([](auto& c) -> auto& { return c.eval.niah_depths; });
    f["eval.niah_cases"] = field([](auto& c) -> auto& { return c.eval.niah_cases; });
    f["eval.nll_bucket"] = field([](auto& c) -> auto& { return c.eval.nll_bucket; });
    f["eval.grid_factors"] = field([](auto& c) -> auto& { return c.eval.grid_factors; });
    f["eval.grid_lens"] = field([](auto& c) -> auto& { return c.eval.grid_lens; });
    f["eval.strict_context"] = field([](auto& c) -> auto& { return c.eval.strict_context; });
    return f;
  }();
  return fields;
}

constexpr const char* kSourceAttrs[] = {"kind", "weight", "min", "max", "ext_min", "ext_max",
                                        "path"};

// Resolves "corpus.<name>.<attr>" to a source index and attribute.
bool source_key(const RunConfig& c, const std::string& key, std::size_t& index,
                std::string& attr) {
  if (key.rfind("corpus.", 0) != 0) return false;
  const auto dot = key.rfind('.');
  if (dot <= 7) return false;
  const std::string name = key.substr(7, dot - 7);
  attr = key.substr(dot + 1);
  if (std::find(std::begin(kSourceAttrs), std::end(kSourceAttrs), attr) ==
      std::end(kSourceAttrs)) {
    return false;
  }
  for (std::size_t i = 0; i < c.sources.size(); ++i) {
    if (c.sources[i].name == name) {
      index = i;
      return true;
    }
  }
  return false;
}

std::string get_source(const RunConfig& c, std::size_t i, const std::string& attr) {
  const auto& s = c.sources[i];
  if (attr == "kind") return to_string(s.kind);
  if (attr == "weight") return format_value(s.mixture_weight);
  if (attr == "min") return format_value(s.lengths.min);
  if (attr == "max") return format_value(s.lengths.max);
  if (attr == "ext_min") return format_value(c.extend_lengths[i].min);
  if (attr == "ext_max") return format_value(c.extend_lengths[i].max);
  return s.path.string();
}

void set_source(RunConfig& c, std::size_t i, const std::string& attr, const std::string& v) {
  auto& s = c.sources[i];
  if (attr == "kind") {
    try {
      s.kind = source_kind_from_string(v);
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  } else if (attr == "weight") {
    s.mixture_weight = parse_value<Real>(v);
  } else if (attr == "min") {
    s.lengths.min = parse_value<int>(v);
  } else if (attr == "max") {
    s.lengths.max = parse_value<int>(v);
  } else if (attr == "ext_min") {
    c.extend_lengths[i].min = parse_value<int>(v);
  } else if (attr == "ext_max") {
    c.extend_lengths[i].max = parse_value<int>(v);
  } else {
    s.path = v;
  }
}

CorpusSource generated(const std::string& name, SourceKind kind, Real weight, LengthRange len) {
  CorpusSource s;
  s.name = name;
  s.kind = kind;
  s.mixture_weight = weight;
  s.lengths = len;
  return s;
}

}  // namespace

RunConfig::RunConfig() {
  model.C = 64;
  model.ema_decay = 0.99;
  model.init_std = 0.08;
  model.vocab_size = vocab.size;

  sources = {generated("web", SourceKind::kWeb, 0.10, {16, 64}),
             generated("code", SourceKind::kCode, 0.10, {16, 64}),
             generated("book", SourceKind::kBook, 0.15, {16, 64}),
             generated("retrieval", SourceKind::kRetrieval, 0.65, {16, 64})};
  extend_lengths.assign(sources.size(), LengthRange{16, 256});

  pretrain.total_tokens = 4'000'000;
  pretrain.lr = 1e-3;
  pretrain.warmup_steps = 50;
  pretrain.batch_size = 8;

  extend.total_tokens = 2'000'000;
  extend.lr = 3e-4;
  extend.warmup_steps = 20;
  extend.batch_size = 8;
}

std::vector<std::string> RunConfig::keys() const {
  std::vector<std::string> out;
  for (const auto& [k, f] : fixed_fields()) out.push_back(k);
  for (const auto& s : sources) {
    for (const char* attr : kSourceAttrs) out.push_back("corpus." + s.name + "." + attr);
  }
  std::sort(out.begin(), out.end());
  return out;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  try {
    const auto& fields = fixed_fields();
    if (auto it = fields.find(key); it != fields.end()) {
      it->second.set(*this, value);
      return;
    }
    std::size_t index = 0;
    std::string attr;
    if (source_key(*this, key, index, attr)) {
      set_source(*this, index, attr, value);
      return;
    }
  } catch (const ConfigError& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::get(const std::string& key) const {
  const auto& fields = fixed_fields();
  if (auto it = fields.find(key); it != fields.end()) return it->second.get(*this);
  std::size_t index = 0;
  std::string attr;
  if (source_key(*this, key, index, attr)) return get_source(*this, index, attr);
  throw ConfigError("unknown config key '" + key + "'");
}

std::string RunConfig::canonical() const {
  std::string out;
  for (const auto& k : keys()) out += k + " = " + get(k) + "\n";
  return out;
}

std::string RunConfig::hash() const { return sha256_hex(canonical()); }

std::string RunConfig::recipe_hash() const {
  std::string text = "seed = " + get("seed") + "\n";
  for (const auto& k : keys()) {
    if (k.rfind("extend.", 0) == 0 || k.rfind("corpus.", 0) == 0) {
      text += k + " = " + get(k) + "\n";
    }
  }
  return sha256_hex(text);
}

void RunConfig::validate() const {
  if (!seed_set) throw ConfigError("missing required key 'seed'");
  auto wrap = [](const auto& check) {
    try {
      check();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
  };
  wrap([&] { model.validate(); });
  wrap([&] { vocab.validate(); });
  if (model.vocab_size != vocab.size) throw ConfigError("model.vocab is inconsistent");
  wrap([&] { check_mixture(sources); });
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& s = sources[i];
    const auto& e = extend_lengths[i];
    if (s.lengths.min < 1 || s.lengths.max < s.lengths.min || e.min < 1 || e.max < e.min) {
      throw ConfigError("corpus." + s.name + ": length range must satisfy 1 <= min <= max");
    }
    if (s.kind == SourceKind::kFile && s.path.empty()) {
      throw ConfigError("corpus." + s.name + ".path is required for file sources");
    }
  }
  TrainRecipe pre = pretrain;
  pre.train_len = int(model.C);
  TrainRecipe ext = extend;
  ext.train_len = int(extension.C_prime);
  wrap([&] { pre.validate(); });
  wrap([&] { ext.validate(); });
  if (extension.C_prime < model.C) throw ConfigError("extend.C_prime must be >= model.C");
  if (extension.G < 0 || extension.M < 0 || extension.N < 1 || extension.B < 1 ||
      extension.top_n < 1) {
    throw ConfigError("extension parameters out of range");
  }
  if (eval.ppl_window < 1 || eval.niah_cases < 1 || eval.nll_bucket < 1) {
    throw ConfigError("eval sizes must be positive");
  }
  for (int n : eval.ppl_lens) {
    if (n < 2) throw ConfigError("eval.ppl_lens entries must be >= 2");
  }
  for (Real d : eval.niah_depths) {
    if (d < 0 || d > 1) throw ConfigError("eval.niah_depths entries must lie in [0, 1]");
  }
  for (Real f : eval.grid_factors) {
    if (!(f > 0)) throw ConfigError("eval.grid_factors entries must be positive");
  }
}

RunConfig parse_run_config(std::string_view text) {
  RunConfig config;
  std::istringstream in{std::string(text)};
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(number) + ": expected 'key = value'");
    }
    config.set(trim(std::string_view(line).substr(0, eq)),
               trim(std::string_view(line).substr(eq + 1)));
  }
  return config;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str());
}

void apply_override(RunConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + assignment + "'");
  config.set(trim(std::string_view(assignment).substr(0, eq)),
             trim(std::string_view(assignment).substr(eq + 1)));
}

std::string sha256_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream out;
  out << std::hex << std::setfill('0');
  for (unsigned int i = 0; i < len; ++i) out << std::setw(2) << int(digest[i]);
  return out.str();
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return sha256_hex(buf.str());
}

}  // namespace ropelab
