#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "s4d/backbone.hpp"
#include "s4d/masking.hpp"
#include "s4d/rng.hpp"

// Optimization loop building blocks: batch-scaled learning rate with exact
// decimal arithmetic, warmup + cosine schedule, decoupled-decay adaptive
// moments, single-source epoch schedules, batch losses for both stages, and
// two-window video inference.

namespace s4d {

struct TrainConfig {
  std::string lr_base = "1.6e-3";  // decimal literal; scaled by batch size
  int batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double eps = 1e-8;
  int epochs = 20;
  double warmup_frac = 0.1;
  uint64_t seed = 0;
  double sfer_prop = 0.5;          // fraction of the static set visited per epoch
  double mask_ratio_video = 0.95;
  double mask_ratio_image = 0.90;
  double label_smoothing = 0.0;
  double importance_weight = 0.0;  // gate balance regularizer, off by default
  MseDenominator mse_denom = MseDenominator::masked_elems;
  bool hflip = true;

  void validate() const {
    if (batch_size < 1) throw std::invalid_argument("train: batch size must be positive");
    if (epochs < 0) throw std::invalid_argument("train: epochs must be non-negative");
    if (sfer_prop < 0.0 || sfer_prop > 1.0)
      throw std::invalid_argument("train: sfer proportion must be in [0,1]");
    if (warmup_frac < 0.0 || warmup_frac >= 1.0)
      throw std::invalid_argument("train: warmup fraction must be in [0,1)");
    for (double r : {mask_ratio_video, mask_ratio_image})
      if (r < 0.0 || r >= 1.0) throw std::invalid_argument("train: mask ratio must be in [0,1)");
  }
};

namespace detail {

// Exact decimal: mantissa * 10^exp10.
struct Decimal {
  int64_t mant = 0;
  int exp10 = 0;
};

inline Decimal parse_decimal(const std::string& s) {
  if (s.empty()) throw std::invalid_argument("decimal: empty string");
  size_t i = 0;
  bool neg = false;
  if (s[i] == '+' || s[i] == '-') neg = s[i++] == '-';
  int64_t mant = 0;
  int frac_digits = 0, digits = 0;
  bool seen_dot = false;
  for (; i < s.size() && (std::isdigit((unsigned char)s[i]) || s[i] == '.'); ++i) {
    if (s[i] == '.') {
      if (seen_dot) throw std::invalid_argument("decimal: bad literal " + s);
      seen_dot = true;
      continue;
    }
    if (++digits > 17) throw std::invalid_argument("decimal: too many digits in " + s);
    mant = mant * 10 + (s[i] - '0');
    if (seen_dot) ++frac_digits;
  }
  if (digits == 0) throw std::invalid_argument("decimal: bad literal " + s);
  int exp10 = -frac_digits;
  if (i < s.size() && (s[i] == 'e' || s[i] == 'E')) {
    ++i;
    bool eneg = false;
    if (i < s.size() && (s[i] == '+' || s[i] == '-')) eneg = s[i++] == '-';
    if (i >= s.size()) throw std::invalid_argument("decimal: bad exponent in " + s);
    int e = 0;
    for (; i < s.size() && std::isdigit((unsigned char)s[i]); ++i) {
      e = e * 10 + (s[i] - '0');
      if (e > 99) throw std::invalid_argument("decimal: exponent out of range in " + s);
    }
    exp10 += eneg ? -e : e;
  }
  if (i != s.size()) throw std::invalid_argument("decimal: bad literal " + s);
  return {neg ? -mant : mant, exp10};
}

inline __int128 int128_gcd(__int128 a, __int128 b) {
  if (a < 0) a = -a;
  if (b < 0) b = -b;
  while (b != 0) {
    __int128 r = a % b;
    a = b;
    b = r;
  }
  return a;
}

// num/den as a correctly rounded double when both fit 53 bits after
// reduction; otherwise one long-double division.
inline double rational_to_double(__int128 num, __int128 den) {
  const __int128 g = int128_gcd(num, den);
  if (g > 1) {
    num /= g;
    den /= g;
  }
  constexpr __int128 exact = (__int128)1 << 53;
  if (num > -exact && num < exact && den < exact) return (double)(int64_t)num / (double)(int64_t)den;
  return (double)((long double)num / (long double)den);
}

}  // namespace detail

// Peak learning rate scaled linearly by batch size against a 512 reference.
// The base rate is taken as its decimal literal and the scaling is done in
// exact rational arithmetic with a single final rounding, so decimal
// identities such as 1.6e-3 * 384/512 = 1.2e-3 hold in the result.
inline double compute_lr(const std::string& lr_base, int n_bs) {
  if (n_bs < 1) throw std::invalid_argument("compute_lr: batch size must be positive");
  const auto dec = detail::parse_decimal(lr_base);
  if (dec.mant <= 0) throw std::invalid_argument("compute_lr: base rate must be positive");
  __int128 num = (__int128)dec.mant * n_bs;
  __int128 den = 512;
  for (int e = dec.exp10; e < 0; ++e) den *= 10;
  for (int e = 0; e < dec.exp10; ++e) num *= 10;
  return detail::rational_to_double(num, den);
}

// Linear warmup to the peak, then cosine decay reaching zero on the final
// step. The last warmup step pays exactly the peak rate.
inline double lr_at(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak) {
  if (total_steps < 1) throw std::invalid_argument("lr_at: need at least one step");
  if (step < 0 || step >= total_steps) throw std::out_of_range("lr_at: step outside schedule");
  if (warmup_steps < 0 || warmup_steps > total_steps)
    throw std::invalid_argument("lr_at: warmup longer than schedule");
  if (step < warmup_steps) return peak * ((double)(step + 1) / (double)warmup_steps);
  if (total_steps == warmup_steps) return peak;
  const double progress = (double)(step - warmup_steps + 1) / (double)(total_steps - warmup_steps);
  return 0.5 * peak * (1.0 + std::cos(std::numbers::pi * progress));
}

// One decoupled-weight-decay adaptive-moment update for one parameter.
// Moments are carried in the parameter's scalar type; arithmetic runs in
// double. t counts from 1 for bias correction.
template <typename S>
void adamw_apply(Param<S>& p, std::span<const S> grad, int64_t t, double lr,
                 const TrainConfig& cfg) {
  if (grad.size() != p.value.size())
    throw std::invalid_argument("adamw_apply: gradient size mismatch for " + p.name);
  if (t < 1) throw std::invalid_argument("adamw_apply: step index counts from 1");
  if (p.m1.empty()) {
    p.m1.assign(p.value.size(), S(0));
    p.m2.assign(p.value.size(), S(0));
  }
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, (double)t);
  const double c2 = 1.0 - std::pow(b2, (double)t);
  for (size_t i = 0; i < p.value.size(); ++i) {
    const double g = (double)grad[i];
    const double m = b1 * (double)p.m1[i] + (1.0 - b1) * g;
    const double v = b2 * (double)p.m2[i] + (1.0 - b2) * g * g;
    p.m1[i] = (S)m;
    p.m2[i] = (S)v;
    const double step_term = (m / c1) / (std::sqrt(v / c2) + cfg.eps);
    p.value[i] = (S)((double)p.value[i] - lr * step_term - lr * cfg.weight_decay * (double)p.value[i]);
  }
}

// Ordered leaf view of a table inside one graph; index i matches table slot i.
template <typename S>
std::vector<Tensor<S>> bind_ordered(Graph<S>& g, const ParamTable<S>& t, bool requires_grad = true) {
  std::vector<Tensor<S>> xs;
  xs.reserve((size_t)t.count());
  for (int i = 0; i < t.count(); ++i) xs.push_back(g.leaf(t.param(i).shape, t.param(i).value, requires_grad));
  return xs;
}

// Updates every parameter from the bound leaves' accumulated gradients.
// Untouched parameters carry zero gradients and still step (decay applies).
template <typename S>
void adamw_update(ParamTable<S>& t, const std::vector<Tensor<S>>& bound, int64_t step_t, double lr,
                  const TrainConfig& cfg) {
  if ((int)bound.size() != t.count())
    throw std::invalid_argument("adamw_update: bound leaves do not match table");
  for (int i = 0; i < t.count(); ++i) adamw_apply(t.param(i), bound[i].grad(), step_t, lr, cfg);
}

// One single-source mini-batch of either task. alpha selects the loss term:
// 0 routes through the static head, 1 through the dynamic head.
struct BatchSource {
  int alpha = 0;
  std::vector<int> indices;
};

// Every dynamic batch plus a fresh p-fraction subset of the static set,
// shuffled together. Partial batches are dropped so each step sees a full
// batch.
inline std::vector<BatchSource> epoch_schedule(int sfer_size, int dfer_size, double p,
                                               int batch_size, uint64_t seed) {
  if (sfer_size < 0 || dfer_size < 0) throw std::invalid_argument("epoch_schedule: negative sizes");
  if (batch_size < 1) throw std::invalid_argument("epoch_schedule: batch size must be positive");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("epoch_schedule: proportion must be in [0,1]");

  Rng rng(fold_seed(seed, 0xeb0cu));
  auto shuffled = [&](int n) {
    std::vector<int> idx((size_t)n);
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    return idx;
  };

  std::vector<BatchSource> batches;
  auto chunk = [&](std::vector<int> idx, int alpha, int64_t limit) {
    if ((int64_t)idx.size() > limit) idx.resize((size_t)limit);
    for (size_t start = 0; start + (size_t)batch_size <= idx.size(); start += (size_t)batch_size) {
      BatchSource b;
      b.alpha = alpha;
      b.indices.assign(idx.begin() + start, idx.begin() + start + batch_size);
      batches.push_back(std::move(b));
    }
  };
  chunk(shuffled(dfer_size), 1, dfer_size);
  chunk(shuffled(sfer_size), 0, (int64_t)std::llround(p * sfer_size));
  std::shuffle(batches.begin(), batches.end(), rng.engine());
  return batches;
}

// Mean reconstruction loss over one single-modality batch. Masks are drawn
// from mask_rng, one per sample.
template <typename S>
Tensor<S> pretrain_batch_loss(Graph<S>& g, const Bound<S>& p, const ModelConfig& mcfg,
                              const TrainConfig& tcfg, const std::vector<const Clip<S>*>& clips,
                              Modality modality, EncodeContext<S>& ctx, Rng& mask_rng) {
  if (clips.empty()) throw std::invalid_argument("pretrain_batch_loss: empty batch");
  const double ratio =
      modality == Modality::video ? tcfg.mask_ratio_video : tcfg.mask_ratio_image;
  Tensor<S> total;
  for (size_t s = 0; s < clips.size(); ++s) {
    const Clip<S>* c = clips[s];
    Clip<S> replicated;
    if (c->t == 1) {
      replicated = replicate_image(*c, mcfg.geom);
      c = &replicated;
    }
    auto tb = tokenize(g, *c, mcfg.geom, p["patch_proj.w"], p["patch_proj.b"], modality);
    auto mask = sample_mask(tb.grid.n_tokens(), ratio, mask_rng.engine()());
    auto vis = apply_mask(tb, mask);
    auto z = encode(vis.tokens, p, mcfg, Stage::pretrain, ctx);
    auto pred = decode(z, mask.visible_indices(), mask, tb.coords, p, mcfg, ctx);
    auto loss = masked_mse(pred, tb.patch_pixels, mask, tcfg.mse_denom);
    total = s == 0 ? loss : add(total, loss);
  }
  return scale(total, S(1) / S((int)clips.size()));
}

// Cross-entropy of one single-source batch through its own head; exactly one
// task term is active. Optional gate-balance regularizer added when enabled.
template <typename S>
Tensor<S> finetune_batch_loss(Graph<S>& g, const Bound<S>& p, const ModelConfig& mcfg,
                              const TrainConfig& tcfg, const std::vector<const Clip<S>*>& clips,
                              const std::vector<int>& labels, int alpha, EncodeContext<S>& ctx) {
  if (clips.empty()) throw std::invalid_argument("finetune_batch_loss: empty batch");
  if (clips.size() != labels.size())
    throw std::invalid_argument("finetune_batch_loss: label count does not match batch");
  if (alpha != 0 && alpha != 1) throw std::invalid_argument("finetune_batch_loss: alpha must be 0 or 1");
  const TaskHead head = alpha == 0 ? TaskHead::sfer : TaskHead::dfer;
  const Modality modality = alpha == 0 ? Modality::image : Modality::video;

  std::vector<Tensor<S>> rows;
  rows.reserve(clips.size());
  for (const Clip<S>* c : clips) {
    auto phi = embed_clip(g, *c, modality, p, mcfg, Stage::finetune, ctx);
    rows.push_back(classify(phi, head, p, mcfg));
  }
  auto loss = cross_entropy_logits(concat(rows, 0), labels, tcfg.label_smoothing);
  if (tcfg.importance_weight > 0.0 && !ctx.gate_weights.empty()) {
    Tensor<S> bal;
    for (size_t i = 0; i < ctx.gate_weights.size(); ++i) {
      auto term = importance_loss(ctx.gate_weights[i]);
      bal = i == 0 ? term : add(bal, term);
    }
    loss = add(loss, scale(bal, (S)(tcfg.importance_weight / (double)ctx.gate_weights.size())));
  }
  return loss;
}

// Desk-scale runs surface instability instead of hiding it: a non-finite
// loss dumps gradient magnitudes and aborts.
template <typename S>
void require_finite_loss(double loss, int64_t step, const ParamTable<S>& t,
                         const std::vector<Tensor<S>>& bound) {
  if (std::isfinite(loss)) return;
  std::fprintf(stderr, "non-finite loss %g at step %lld; parameter diagnostics:\n", loss,
               (long long)step);
  for (int i = 0; i < t.count() && i < 40; ++i) {
    double gmax = 0, vmax = 0;
    for (S v : t.param(i).value) vmax = std::max(vmax, std::abs((double)v));
    if ((int)bound.size() == t.count())
      for (S gv : bound[i].grad()) gmax = std::max(gmax, std::abs((double)gv));
    std::fprintf(stderr, "  %-28s max|value| %.3e max|grad| %.3e\n", t.param(i).name.c_str(), vmax,
                 gmax);
  }
  throw std::runtime_error("training aborted: non-finite loss at step " + std::to_string(step));
}

// The two evaluation windows of a clip: starts at both ends when the clip is
// long enough, otherwise one last-frame-padded window used twice.
template <typename S>
std::vector<Clip<S>> eval_windows(const Clip<S>& clip, int window_t) {
  if (window_t < 1) throw std::invalid_argument("eval_windows: window must be positive");
  if (clip.t < 1) throw std::invalid_argument("eval_windows: empty clip");
  auto window_at = [&](int start) {
    Clip<S> w;
    w.t = window_t;
    w.h = clip.h;
    w.w = clip.w;
    w.c = clip.c;
    w.data.reserve((size_t)w.size());
    const int64_t frame = (int64_t)clip.h * clip.w * clip.c;
    for (int ti = 0; ti < window_t; ++ti) {
      const int src = std::min(start + ti, clip.t - 1);  // repeat the last frame if short
      w.data.insert(w.data.end(), clip.data.begin() + src * frame,
                    clip.data.begin() + (src + 1) * frame);
    }
    return w;
  };
  return {window_at(0), window_at(std::max(0, clip.t - window_t))};
}

// Averaged-logit class prediction over both windows; ties resolve to the
// lower class index.
template <typename S>
int infer_video(const Clip<S>& clip, const ParamTable<S>& table, const ModelConfig& mcfg,
                int window_t, TaskHead head = TaskHead::dfer) {
  std::vector<double> mean_logits;
  for (const auto& w : eval_windows(clip, window_t)) {
    Graph<S> g;
    auto p = bind(g, table, false);
    EncodeContext<S> ctx;
    auto logits = classify(embed_clip(g, w, Modality::video, p, mcfg, Stage::finetune, ctx),
                           head, p, mcfg);
    if (mean_logits.empty()) mean_logits.assign((size_t)logits.size(), 0.0);
    for (int64_t i = 0; i < logits.size(); ++i) mean_logits[(size_t)i] += (double)logits.data()[i];
  }
  int best = 0;
  for (size_t j = 1; j < mean_logits.size(); ++j)
    if (mean_logits[j] > mean_logits[best]) best = (int)j;
  return best;
}

// One JSON object per line, deterministic under a fixed seed so reruns are
// byte-comparable. Measured wall time varies run to run, so it goes to a
// separate timing sidecar instead of the metrics file.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(const std::filesystem::path& path, const std::filesystem::path& timing = {})
      : f_(path, std::ios::trunc) {
    if (!f_) throw std::runtime_error("metrics: cannot open " + path.string());
    if (!timing.empty()) {
      t_.open(timing, std::ios::trunc);
      if (!t_) throw std::runtime_error("metrics: cannot open " + timing.string());
      t_ << "stage,epoch,step,wall_ms\n";
    }
  }

  void step(const std::string& stage, int epoch, int64_t step, const std::string& source,
            double loss, double lr, double wall_ms) {
    if (!f_.is_open()) return;
    nlohmann::json j{{"stage", stage}, {"epoch", epoch}, {"step", step},
                     {"source", source}, {"loss", loss}, {"lr", lr}};
    f_ << j.dump() << '\n';
    f_.flush();
    if (t_.is_open()) {
      t_ << stage << ',' << epoch << ',' << step << ',' << wall_ms << '\n';
      t_.flush();
    }
  }

 private:
  std::ofstream f_;
  std::ofstream t_;
};

}  // namespace s4d
