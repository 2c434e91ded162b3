#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "s4d/backbone.hpp"
#include "s4d/synthdata.hpp"
#include "s4d/training.hpp"

// Flat key=value run configuration: one declared registry, unknown keys
// rejected, fully-resolved echo written into every run directory.

namespace s4d {

struct RunConfig {
  // architecture (desk-scale defaults)
  int width = 64, depth = 6, heads = 4, ffn_hidden = 256;
  int tubelet_t = 2, patch_h = 8, patch_w = 8;
  std::string moae_pos = "later";
  int moae_layers = 3, experts = 8, top_k = 2;
  double gate_sigma = 1.0;
  int adapter_r = 16;
  int decoder_depth = 2, decoder_width = 32, decoder_heads = 4;
  double dropout = 0.0;
  int sfer_classes = 4, dfer_classes = 4, head_hidden = 0;

  // optimizer, shared by both stages
  double beta1 = 0.9, beta2 = 0.95, weight_decay = 0.05, eps = 1e-8;

  // stage 1
  std::string pre_lr_base = "1.6e-3";
  int pre_batch = 32, pre_epochs = 10;
  double pre_warmup = 0.1, mask_ratio_video = 0.95, mask_ratio_image = 0.90;
  std::string mse_denom = "masked";

  // stage 2
  std::string ft_lr_base = "1.6e-3";
  int ft_batch = 16, ft_epochs = 8;
  double ft_warmup = 0.1, sfer_prop = 0.5, label_smoothing = 0.0, importance_weight = 0.0;
  bool hflip = false;  // synthetic classes are orientation-coded, flips change labels

  // synthetic corpus
  int classes = 4, train_per_class = 50, eval_per_class = 25;
  int image = 32, channels = 3, clip_t = 8;
  double noise = 0.05;
  bool temporal_coding = true, conflict = false;

  // run
  uint64_t seed = 0;
  int threads = 1;
  std::string data_dir = "data", out_dir = "run", checkpoint;
  bool no_pretrain = false, baseline_mtl = false;

  ModelConfig model() const {
    ModelConfig m;
    m.geom = PatchGeometry{tubelet_t, patch_h, patch_w, width};
    m.depth = depth;
    m.heads = heads;
    m.ffn_hidden = ffn_hidden;
    m.moae_pos = parse_moae_pos(moae_pos);
    m.moae_layers = baseline_mtl ? 0 : moae_layers;  // plain multi-head baseline drops experts
    m.n_experts = experts;
    m.top_k = top_k;
    m.gate_sigma = gate_sigma;
    m.adapter_r = adapter_r;
    m.decoder_depth = decoder_depth;
    m.decoder_width = decoder_width;
    m.decoder_heads = decoder_heads;
    m.dropout_rate = dropout;
    m.sfer_classes = sfer_classes;
    m.dfer_classes = dfer_classes;
    m.head_hidden = head_hidden;
    m.validate();
    return m;
  }

  TrainConfig stage(bool pretrain_stage) const {
    TrainConfig t;
    t.lr_base = pretrain_stage ? pre_lr_base : ft_lr_base;
    t.batch_size = pretrain_stage ? pre_batch : ft_batch;
    t.epochs = pretrain_stage ? pre_epochs : ft_epochs;
    t.warmup_frac = pretrain_stage ? pre_warmup : ft_warmup;
    t.beta1 = beta1;
    t.beta2 = beta2;
    t.weight_decay = weight_decay;
    t.eps = eps;
    t.seed = seed;
    t.sfer_prop = sfer_prop;
    t.mask_ratio_video = mask_ratio_video;
    t.mask_ratio_image = mask_ratio_image;
    t.label_smoothing = label_smoothing;
    t.importance_weight = importance_weight;
    t.hflip = hflip;
    if (mse_denom == "masked")
      t.mse_denom = MseDenominator::masked_elems;
    else if (mse_denom == "visible")
      t.mse_denom = MseDenominator::visible_elems;
    else
      throw std::invalid_argument("config: pretrain.mse_denom must be masked or visible");
    t.validate();
    return t;
  }

  SynthSpec synth(bool train_split) const {
    SynthSpec s;
    s.n_classes = classes;
    s.samples_per_class = train_split ? train_per_class : eval_per_class;
    s.image_h = image;
    s.image_w = image;
    s.channels = channels;
    s.clip_t = clip_t;
    s.noise = noise;
    s.temporal_coding = temporal_coding;
    s.seed = seed;
    return s;
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int parse_int(const std::string& v) {
  size_t used = 0;
  const int x = std::stoi(v, &used);
  if (used != v.size()) throw std::invalid_argument("not an integer: " + v);
  return x;
}

inline uint64_t parse_u64(const std::string& v) {
  size_t used = 0;
  const unsigned long long x = std::stoull(v, &used);
  if (used != v.size()) throw std::invalid_argument("not an unsigned integer: " + v);
  return (uint64_t)x;
}

inline double parse_double(const std::string& v) {
  size_t used = 0;
  const double x = std::stod(v, &used);
  if (used != v.size()) throw std::invalid_argument("not a number: " + v);
  return x;
}

inline bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("not a boolean: " + v);
}

inline std::string render_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct ConfigKey {
  std::string name;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<ConfigKey>& config_keys() {
  auto I = [](int RunConfig::*f) {
    return ConfigKey{"",
                     [f](RunConfig& c, const std::string& v) { c.*f = parse_int(v); },
                     [f](const RunConfig& c) { return std::to_string(c.*f); }};
  };
  auto D = [](double RunConfig::*f) {
    return ConfigKey{"",
                     [f](RunConfig& c, const std::string& v) { c.*f = parse_double(v); },
                     [f](const RunConfig& c) { return render_double(c.*f); }};
  };
  auto B = [](bool RunConfig::*f) {
    return ConfigKey{"",
                     [f](RunConfig& c, const std::string& v) { c.*f = parse_bool(v); },
                     [f](const RunConfig& c) { return c.*f ? "1" : "0"; }};
  };
  auto S = [](std::string RunConfig::*f) {
    return ConfigKey{"", [f](RunConfig& c, const std::string& v) { c.*f = v; },
                     [f](const RunConfig& c) { return c.*f; }};
  };
  auto named = [](const char* n, ConfigKey k) {
    k.name = n;
    return k;
  };
  static const std::vector<ConfigKey> keys = [&] {
    std::vector<ConfigKey> ks = {
        named("model.width", I(&RunConfig::width)),
        named("model.depth", I(&RunConfig::depth)),
        named("model.heads", I(&RunConfig::heads)),
        named("model.ffn_hidden", I(&RunConfig::ffn_hidden)),
        named("model.tubelet_t", I(&RunConfig::tubelet_t)),
        named("model.patch_h", I(&RunConfig::patch_h)),
        named("model.patch_w", I(&RunConfig::patch_w)),
        named("model.moae_pos", S(&RunConfig::moae_pos)),
        named("model.moae_layers", I(&RunConfig::moae_layers)),
        named("model.experts", I(&RunConfig::experts)),
        named("model.top_k", I(&RunConfig::top_k)),
        named("model.gate_sigma", D(&RunConfig::gate_sigma)),
        named("model.adapter_r", I(&RunConfig::adapter_r)),
        named("model.decoder_depth", I(&RunConfig::decoder_depth)),
        named("model.decoder_width", I(&RunConfig::decoder_width)),
        named("model.decoder_heads", I(&RunConfig::decoder_heads)),
        named("model.dropout", D(&RunConfig::dropout)),
        named("model.sfer_classes", I(&RunConfig::sfer_classes)),
        named("model.dfer_classes", I(&RunConfig::dfer_classes)),
        named("model.head_hidden", I(&RunConfig::head_hidden)),
        named("opt.beta1", D(&RunConfig::beta1)),
        named("opt.beta2", D(&RunConfig::beta2)),
        named("opt.weight_decay", D(&RunConfig::weight_decay)),
        named("opt.eps", D(&RunConfig::eps)),
        named("pretrain.lr_base", S(&RunConfig::pre_lr_base)),
        named("pretrain.batch_size", I(&RunConfig::pre_batch)),
        named("pretrain.epochs", I(&RunConfig::pre_epochs)),
        named("pretrain.warmup_frac", D(&RunConfig::pre_warmup)),
        named("pretrain.mask_ratio_video", D(&RunConfig::mask_ratio_video)),
        named("pretrain.mask_ratio_image", D(&RunConfig::mask_ratio_image)),
        named("pretrain.mse_denom", S(&RunConfig::mse_denom)),
        named("finetune.lr_base", S(&RunConfig::ft_lr_base)),
        named("finetune.batch_size", I(&RunConfig::ft_batch)),
        named("finetune.epochs", I(&RunConfig::ft_epochs)),
        named("finetune.warmup_frac", D(&RunConfig::ft_warmup)),
        named("finetune.sfer_prop", D(&RunConfig::sfer_prop)),
        named("finetune.label_smoothing", D(&RunConfig::label_smoothing)),
        named("finetune.importance_weight", D(&RunConfig::importance_weight)),
        named("finetune.hflip", B(&RunConfig::hflip)),
        named("data.classes", I(&RunConfig::classes)),
        named("data.train_per_class", I(&RunConfig::train_per_class)),
        named("data.eval_per_class", I(&RunConfig::eval_per_class)),
        named("data.image", I(&RunConfig::image)),
        named("data.channels", I(&RunConfig::channels)),
        named("data.clip_t", I(&RunConfig::clip_t)),
        named("data.noise", D(&RunConfig::noise)),
        named("data.temporal_coding", B(&RunConfig::temporal_coding)),
        named("data.conflict", B(&RunConfig::conflict)),
        named("run.threads", I(&RunConfig::threads)),
        named("run.data_dir", S(&RunConfig::data_dir)),
        named("run.out_dir", S(&RunConfig::out_dir)),
        named("run.checkpoint", S(&RunConfig::checkpoint)),
        named("run.no_pretrain", B(&RunConfig::no_pretrain)),
        named("run.baseline_mtl", B(&RunConfig::baseline_mtl)),
    };
    ks.push_back({"run.seed",
                  [](RunConfig& c, const std::string& v) { c.seed = parse_u64(v); },
                  [](const RunConfig& c) { return std::to_string(c.seed); }});
    std::sort(ks.begin(), ks.end(),
              [](const ConfigKey& a, const ConfigKey& b) { return a.name < b.name; });
    return ks;
  }();
  return keys;
}

}  // namespace detail

inline void set_config_key(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& k : detail::config_keys())
    if (k.name == key) {
      try {
        k.set(cfg, value);
      } catch (const std::exception& e) {
        throw std::invalid_argument("config: bad value for " + key + ": " + e.what());
      }
      return;
    }
  throw std::invalid_argument("config: unknown key: " + key);
}

// key=value lines; blank lines and # comments skipped.
inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path.string());
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) + " has no '='");
    set_config_key(cfg, detail::trim(t.substr(0, eq)), detail::trim(t.substr(eq + 1)));
  }
}

// Fully-resolved sorted echo for run provenance.
inline void write_config_echo(const RunConfig& cfg, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("config: cannot open " + path.string());
  for (const auto& k : detail::config_keys()) f << k.name << '=' << k.get(cfg) << '\n';
}

}  // namespace s4d
