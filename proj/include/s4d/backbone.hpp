#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "s4d/masking.hpp"
#include "s4d/moae.hpp"
#include "s4d/patchify.hpp"
#include "s4d/rng.hpp"
#include "s4d/tensor.hpp"

// Pre-norm transformer over the shared token space. Stage 1 trains an
// encoder plus a narrow reconstruction decoder; stage 2 swaps the decoder
// for task heads and turns selected encoder layers into expert mixtures.

namespace s4d {

enum class Stage { pretrain, finetune };
enum class TaskHead { sfer, dfer };
enum class MoaePos { early, middle, later, alternate };

inline const char* to_string(MoaePos p) {
  switch (p) {
    case MoaePos::early: return "early";
    case MoaePos::middle: return "middle";
    case MoaePos::later: return "later";
    case MoaePos::alternate: return "alternate";
  }
  return "?";
}

inline MoaePos parse_moae_pos(const std::string& s) {
  if (s == "early") return MoaePos::early;
  if (s == "middle") return MoaePos::middle;
  if (s == "later") return MoaePos::later;
  if (s == "alternate") return MoaePos::alternate;
  throw std::invalid_argument("unknown expert placement: " + s);
}

// Which encoder layers carry the expert mixture. "alternate" anchors at the
// last layer and steps back by two.
inline std::vector<bool> moae_layer_mask(int depth, int count, MoaePos pos) {
  if (depth < 1) throw std::invalid_argument("moae_layer_mask: depth must be positive");
  if (count < 0 || count > depth)
    throw std::invalid_argument("moae_layer_mask: layer count out of range");
  std::vector<bool> on((size_t)depth, false);
  switch (pos) {
    case MoaePos::early:
      for (int i = 0; i < count; ++i) on[i] = true;
      break;
    case MoaePos::later:
      for (int i = depth - count; i < depth; ++i) on[i] = true;
      break;
    case MoaePos::middle: {
      const int start = (depth - count) / 2;
      for (int i = start; i < start + count; ++i) on[i] = true;
      break;
    }
    case MoaePos::alternate:
      for (int j = 0; j < count; ++j) {
        const int i = depth - 1 - 2 * j;
        if (i < 0)
          throw std::invalid_argument("moae_layer_mask: alternate placement needs depth >= 2*count-1");
        on[i] = true;
      }
      break;
  }
  return on;
}

struct ModelConfig {
  PatchGeometry geom;  // geom.embed_dim is the model width
  int depth = 6;
  int heads = 4;
  int ffn_hidden = 256;

  MoaePos moae_pos = MoaePos::later;
  int moae_layers = 3;
  int n_experts = 8;
  int top_k = 2;
  double gate_sigma = 1.0;
  int adapter_r = 0;  // 0 resolves to width/4

  int decoder_depth = 2;
  int decoder_width = 32;
  int decoder_heads = 4;

  double dropout_rate = 0.0;
  int sfer_classes = 4;
  int dfer_classes = 4;
  int head_hidden = 0;  // 0: single linear head

  int width() const { return geom.embed_dim; }
  int resolved_adapter_r() const { return adapter_r > 0 ? adapter_r : width() / 4; }
  int decoder_ffn_hidden() const { return 4 * decoder_width; }

  void validate() const {
    if (depth < 1) throw std::invalid_argument("model: depth must be positive");
    if (width() % heads != 0) throw std::invalid_argument("model: width not divisible by head count");
    if (decoder_width % decoder_heads != 0)
      throw std::invalid_argument("model: decoder width not divisible by decoder heads");
    if (width() % 16 != 0 || decoder_width % 16 != 0)
      throw std::invalid_argument("model: widths must be multiples of 16 for position codes");
    if (top_k < 1 || top_k > n_experts) throw std::invalid_argument("model: top_k out of range");
    if (resolved_adapter_r() < 1) throw std::invalid_argument("model: adapter bottleneck too small");
    (void)moae_layer_mask(depth, moae_layers, moae_pos);
  }
};

template <typename S>
struct Param {
  std::string name;
  Shape shape;
  std::vector<S> value;
  std::vector<S> m1, m2;  // optimizer moments, sized on first update
};

template <typename S>
class ParamTable {
 public:
  Param<S>& add(std::string name, Shape shape) {
    if (index_.count(name)) throw std::invalid_argument("parameter defined twice: " + name);
    index_.emplace(name, (int)params_.size());
    Param<S> p;
    p.name = std::move(name);
    p.shape = std::move(shape);
    p.value.assign((size_t)numel(p.shape), S(0));
    params_.push_back(std::move(p));
    return params_.back();
  }

  bool has(const std::string& name) const { return index_.count(name) != 0; }

  Param<S>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }
  const Param<S>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }

  int count() const { return (int)params_.size(); }
  Param<S>& param(int i) { return params_.at((size_t)i); }
  const Param<S>& param(int i) const { return params_.at((size_t)i); }

  int64_t total_values() const {
    int64_t n = 0;
    for (const auto& p : params_) n += (int64_t)p.value.size();
    return n;
  }

 private:
  std::vector<Param<S>> params_;
  std::unordered_map<std::string, int> index_;
};

namespace detail {
template <typename S>
void fill_normal(std::vector<S>& v, Rng& rng, double sd) {
  for (auto& e : v) e = (S)rng.normal(0.0, sd);
}
}  // namespace detail

// Creates every parameter the stage needs, in a fixed order. Weights draw
// N(0, 0.02^2); biases start at zero, layernorm gains at one. Adapter output
// projections start at zero so each expert layer begins as a plain layer
// plus the normalized-input pass-through.
template <typename S>
void init_params(ParamTable<S>& t, const ModelConfig& cfg, int channels, Stage stage,
                 uint64_t seed) {
  cfg.validate();
  Rng rng(fold_seed(seed, 0x1717u));
  const int d = cfg.width();
  const int td = cfg.geom.tube_dim(channels);

  auto wnorm = [&](const std::string& n, Shape s) {
    detail::fill_normal(t.add(n, std::move(s)).value, rng, 0.02);
  };
  auto zeros = [&](const std::string& n, Shape s) { t.add(n, std::move(s)); };
  auto ones = [&](const std::string& n, Shape s) {
    auto& p = t.add(n, std::move(s));
    std::fill(p.value.begin(), p.value.end(), S(1));
  };
  auto block = [&](const std::string& pre, int width, int hidden) {
    ones(pre + "ln1.g", {width});
    zeros(pre + "ln1.b", {width});
    for (const char* w : {"wq", "wk", "wv", "wo"}) wnorm(pre + "attn." + w, {width, width});
    for (const char* b : {"bq", "bk", "bv", "bo"}) zeros(pre + "attn." + b, {width});
    ones(pre + "ln2.g", {width});
    zeros(pre + "ln2.b", {width});
    wnorm(pre + "ffn.w1", {width, hidden});
    zeros(pre + "ffn.b1", {hidden});
    wnorm(pre + "ffn.w2", {hidden, width});
    zeros(pre + "ffn.b2", {width});
  };

  wnorm("patch_proj.w", {td, d});
  zeros("patch_proj.b", {d});

  const auto expert_on = stage == Stage::finetune
                             ? moae_layer_mask(cfg.depth, cfg.moae_layers, cfg.moae_pos)
                             : std::vector<bool>((size_t)cfg.depth, false);
  const int r = cfg.resolved_adapter_r();
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string pre = "enc." + std::to_string(i) + ".";
    block(pre, d, cfg.ffn_hidden);
    if (expert_on[i]) {
      wnorm(pre + "moae.gate.w", {d, cfg.n_experts});
      for (int e = 0; e < cfg.n_experts; ++e) {
        const std::string ep = pre + "moae.exp" + std::to_string(e) + ".";
        wnorm(ep + "w1", {d, r});
        zeros(ep + "b1", {r});
        zeros(ep + "w2", {r, d});
        zeros(ep + "b2", {d});
      }
    }
  }
  ones("enc.final_ln.g", {d});
  zeros("enc.final_ln.b", {d});

  if (stage == Stage::pretrain) {
    const int dw = cfg.decoder_width;
    wnorm("dec.embed.w", {d, dw});
    zeros("dec.embed.b", {dw});
    detail::fill_normal(t.add("dec.mask_token", {dw}).value, rng, 0.02);
    for (int i = 0; i < cfg.decoder_depth; ++i)
      block("dec." + std::to_string(i) + ".", dw, cfg.decoder_ffn_hidden());
    ones("dec.final_ln.g", {dw});
    zeros("dec.final_ln.b", {dw});
    wnorm("dec.out.w", {dw, td});
    zeros("dec.out.b", {td});
  } else {
    auto head = [&](const std::string& pre, int classes) {
      if (cfg.head_hidden > 0) {
        wnorm(pre + "w1", {d, cfg.head_hidden});
        zeros(pre + "b1", {cfg.head_hidden});
        wnorm(pre + "w2", {cfg.head_hidden, classes});
        zeros(pre + "b2", {classes});
      } else {
        wnorm(pre + "w", {d, classes});
        zeros(pre + "b", {classes});
      }
    };
    head("head.sfer.", cfg.sfer_classes);
    head("head.dfer.", cfg.dfer_classes);
  }
}

// Named view of the parameters inside one graph.
template <typename S>
class Bound {
 public:
  Tensor<S> operator[](const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("unbound parameter: " + name);
    return it->second;
  }
  bool has(const std::string& name) const { return map_.count(name) != 0; }
  void set(const std::string& name, Tensor<S> t) { map_.insert_or_assign(name, t); }

 private:
  std::unordered_map<std::string, Tensor<S>> map_;
};

template <typename S>
Bound<S> bind(Graph<S>& g, const ParamTable<S>& t, bool requires_grad = true) {
  Bound<S> b;
  for (int i = 0; i < t.count(); ++i) {
    const auto& p = t.param(i);
    b.set(p.name, g.leaf(p.shape, p.value, requires_grad));
  }
  return b;
}

// Same named view over externally supplied tensors, one per table slot in
// table order (finite-difference harness hook).
template <typename S>
Bound<S> bind_tensors(const ParamTable<S>& t, const std::vector<Tensor<S>>& xs) {
  if ((int)xs.size() != t.count())
    throw std::invalid_argument("bind_tensors: tensor count does not match table");
  Bound<S> b;
  for (int i = 0; i < t.count(); ++i) {
    if (xs[i].shape() != t.param(i).shape)
      throw std::invalid_argument("bind_tensors: shape mismatch at " + t.param(i).name);
    b.set(t.param(i).name, xs[i]);
  }
  return b;
}

template <typename S>
struct ForwardTrace {
  bool want_gates = false;
  bool want_attention = false;
  std::vector<std::pair<int, std::vector<GateDecision>>> gates;  // (layer, per-token routing)
  std::vector<std::pair<int, Tensor<S>>> attention;              // (layer, head-mean [n, n])
};

template <typename S>
struct EncodeContext {
  bool train = false;
  Rng* rng = nullptr;  // gate noise and dropout draws
  double dropout = 0.0;
  ForwardTrace<S>* trace = nullptr;
  std::vector<Tensor<S>> gate_weights;  // one [n_tokens, n_experts] per expert layer
};

namespace detail {

template <typename S>
Tensor<S> maybe_dropout(Tensor<S> x, EncodeContext<S>& ctx) {
  if (!ctx.train || ctx.dropout <= 0.0) return x;
  if (!ctx.rng) throw std::invalid_argument("training forward needs an rng");
  return dropout(x, ctx.dropout, *ctx.rng, true);
}

}  // namespace detail

// Multi-head self-attention with per-head column slices of fused q/k/v
// projections. attn_mean, when requested, receives the head-averaged map.
template <typename S>
Tensor<S> mhsa(const Tensor<S>& x, const Bound<S>& p, const std::string& pre, int heads,
               Tensor<S>* attn_mean = nullptr) {
  const int d = x.dim(1);
  if (d % heads != 0) throw std::invalid_argument("mhsa: width not divisible by head count");
  const int dh = d / heads;
  auto q = add_rowvec(matmul(x, p[pre + "attn.wq"]), p[pre + "attn.bq"]);
  auto k = add_rowvec(matmul(x, p[pre + "attn.wk"]), p[pre + "attn.bk"]);
  auto v = add_rowvec(matmul(x, p[pre + "attn.wv"]), p[pre + "attn.bv"]);
  const S inv_sqrt = (S)(1.0 / std::sqrt((double)dh));

  std::vector<Tensor<S>> outs;
  outs.reserve((size_t)heads);
  Tensor<S> asum;
  for (int h = 0; h < heads; ++h) {
    auto qh = slice_cols(q, h * dh, dh);
    auto kh = slice_cols(k, h * dh, dh);
    auto vh = slice_cols(v, h * dh, dh);
    auto a = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
    if (attn_mean) asum = h == 0 ? a : add(asum, a);
    outs.push_back(matmul(a, vh));
  }
  if (attn_mean) *attn_mean = scale(asum, S(1) / S(heads));
  return add_rowvec(matmul(concat(outs, 1), p[pre + "attn.wo"]), p[pre + "attn.bo"]);
}

template <typename S>
Tensor<S> ffn_forward(const Tensor<S>& x, const Bound<S>& p, const std::string& pre) {
  auto hidden = gelu(add_rowvec(matmul(x, p[pre + "w1"]), p[pre + "b1"]));
  return add_rowvec(matmul(hidden, p[pre + "w2"]), p[pre + "b2"]);
}

// x <- x + MHSA(LN(x)); x <- x + FFN(LN(x)).
template <typename S>
Tensor<S> standard_layer(const Tensor<S>& x, const Bound<S>& p, const std::string& pre, int heads,
                         EncodeContext<S>& ctx, int layer_idx) {
  const bool want_attn = ctx.trace && ctx.trace->want_attention;
  Tensor<S> attn_mean;
  auto att = mhsa(layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, heads,
                  want_attn ? &attn_mean : nullptr);
  if (want_attn) ctx.trace->attention.push_back({layer_idx, attn_mean});
  auto x1 = add(x, detail::maybe_dropout(att, ctx));
  auto f = ffn_forward(layernorm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"]), p, pre + "ffn.");
  return add(x1, detail::maybe_dropout(f, ctx));
}

// x' = x + MHSA(LN(x)); out = x' + FFN(LN(x')) + mixture(LN(x')). The same
// normalized tensor node feeds both branches.
template <typename S>
Tensor<S> expert_layer(const Tensor<S>& x, const Bound<S>& p, const std::string& pre,
                       const ModelConfig& cfg, EncodeContext<S>& ctx, int layer_idx) {
  const bool want_attn = ctx.trace && ctx.trace->want_attention;
  Tensor<S> attn_mean;
  auto att = mhsa(layernorm(x, p[pre + "ln1.g"], p[pre + "ln1.b"]), p, pre, cfg.heads,
                  want_attn ? &attn_mean : nullptr);
  if (want_attn) ctx.trace->attention.push_back({layer_idx, attn_mean});
  auto x1 = add(x, detail::maybe_dropout(att, ctx));
  auto xs = layernorm(x1, p[pre + "ln2.g"], p[pre + "ln2.b"]);
  auto f = ffn_forward(xs, p, pre + "ffn.");

  GateParams<S> gate;
  gate.w_g = p[pre + "moae.gate.w"];
  gate.sigma = cfg.gate_sigma;
  gate.k = cfg.top_k;
  gate.train_mode = ctx.train;
  if (ctx.train && gate.sigma > 0.0 && !ctx.rng)
    throw std::invalid_argument("training forward needs an rng");
  std::vector<AdapterParams<S>> experts;
  experts.reserve((size_t)cfg.n_experts);
  for (int e = 0; e < cfg.n_experts; ++e) {
    const std::string ep = pre + "moae.exp" + std::to_string(e) + ".";
    experts.push_back({p[ep + "w1"], p[ep + "b1"], p[ep + "w2"], p[ep + "b2"]});
  }
  Rng silent(0);
  auto mo = moae_forward(xs, gate, experts, ctx.rng ? *ctx.rng : silent);
  if (ctx.trace && ctx.trace->want_gates) ctx.trace->gates.push_back({layer_idx, mo.decisions});
  ctx.gate_weights.push_back(mo.gate_weights);
  return add(add(x1, detail::maybe_dropout(f, ctx)), mo.y);
}

// Runs every encoder layer, then the final layernorm.
template <typename S>
Tensor<S> encode(const Tensor<S>& tokens, const Bound<S>& p, const ModelConfig& cfg, Stage stage,
                 EncodeContext<S>& ctx) {
  const auto expert_on = stage == Stage::finetune
                             ? moae_layer_mask(cfg.depth, cfg.moae_layers, cfg.moae_pos)
                             : std::vector<bool>((size_t)cfg.depth, false);
  Tensor<S> x = tokens;
  for (int i = 0; i < cfg.depth; ++i) {
    const std::string pre = "enc." + std::to_string(i) + ".";
    x = expert_on[i] ? expert_layer(x, p, pre, cfg, ctx, i)
                     : standard_layer(x, p, pre, cfg.heads, ctx, i);
  }
  return layernorm(x, p["enc.final_ln.g"], p["enc.final_ln.b"]);
}

// Rebuilds the full token grid from visible latents plus a learned mask
// embedding at dropped positions, runs the narrow decoder, and predicts
// tubelet pixels per grid slot. z rows may arrive in any order as long as
// z_token_ids names each row's grid index.
template <typename S>
Tensor<S> decode(const Tensor<S>& z, const std::vector<int>& z_token_ids, const MaskSpec& mask,
                 const std::vector<GridCoord>& coords, const Bound<S>& p, const ModelConfig& cfg,
                 EncodeContext<S>& ctx) {
  const int n = mask.n_tokens();
  if ((int)z_token_ids.size() != z.dim(0))
    throw std::invalid_argument("decode: row index list does not match latents");
  if ((int)coords.size() != n) throw std::invalid_argument("decode: coordinate list does not match mask");
  Graph<S>& g = *z.graph();
  const int dw = cfg.decoder_width;

  auto vis = add_rowvec(matmul(z, p["dec.embed.w"]), p["dec.embed.b"]);
  auto seq = scatter_rows(vis, z_token_ids, n);
  const auto dropped = mask.masked_indices();
  if (!dropped.empty()) {
    auto ones_col = g.full({(int)dropped.size(), 1}, S(1));
    auto tile = matmul(ones_col, reshape(p["dec.mask_token"], {1, dw}));
    seq = add(seq, scatter_rows(tile, dropped, n));
  }
  seq = add(seq, g.constant({n, dw}, position_encoding<S>(coords, dw)));
  for (int i = 0; i < cfg.decoder_depth; ++i)
    seq = standard_layer(seq, p, "dec." + std::to_string(i) + ".", cfg.decoder_heads, ctx, -1 - i);
  seq = layernorm(seq, p["dec.final_ln.g"], p["dec.final_ln.b"]);
  return add_rowvec(matmul(seq, p["dec.out.w"]), p["dec.out.b"]);
}

// Tokenize without masking, encode, mean-pool into one feature vector.
// Single-frame clips are replicated to tubelet depth first.
template <typename S>
Tensor<S> embed_clip(Graph<S>& g, const Clip<S>& clip, Modality modality, const Bound<S>& p,
                     const ModelConfig& cfg, Stage stage, EncodeContext<S>& ctx) {
  const Clip<S>* c = &clip;
  Clip<S> replicated;
  if (clip.t == 1) {
    replicated = replicate_image(clip, cfg.geom);
    c = &replicated;
  }
  auto tb = tokenize(g, *c, cfg.geom, p["patch_proj.w"], p["patch_proj.b"], modality);
  auto z = encode(tb.tokens, p, cfg, stage, ctx);
  return mean_axis0(z);
}

// Task heads never share parameters.
template <typename S>
Tensor<S> classify(const Tensor<S>& phi, TaskHead head, const Bound<S>& p, const ModelConfig& cfg) {
  const std::string pre = head == TaskHead::sfer ? "head.sfer." : "head.dfer.";
  auto row = phi.rank() == 1 ? reshape(phi, {1, phi.dim(0)}) : phi;
  if (cfg.head_hidden > 0) {
    auto h = gelu(add_rowvec(matmul(row, p[pre + "w1"]), p[pre + "b1"]));
    return add_rowvec(matmul(h, p[pre + "w2"]), p[pre + "b2"]);
  }
  return add_rowvec(matmul(row, p[pre + "w"]), p[pre + "b"]);
}

}  // namespace s4d
