#pragma once

#include <string>
#include <vector>

#include "s4d/gradcheck.hpp"
#include "s4d/masking.hpp"
#include "s4d/moae.hpp"
#include "s4d/synthdata.hpp"
#include "s4d/training.hpp"

// One named finite-difference check per differentiable operation, plus two
// end-to-end checks through the actual stage losses. Everything is seeded,
// so results are reproducible and the pass thresholds can stay tight.

namespace s4d {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tol = 0.0;
  bool pass = false;
};

namespace detail {

inline std::vector<double> suite_vec(int64_t n, uint64_t seed, double sd = 1.0, double mean = 0.0) {
  Rng rng(fold_seed(seed, 0x96adu));
  std::vector<double> v((size_t)n);
  for (auto& e : v) e = rng.normal(mean, sd);
  return v;
}

struct SuiteRunner {
  std::vector<GradCheckResult> out;

  void run(const std::string& name, std::vector<FdLeaf> leaves, const FdBuild& build,
           double tol = 1e-4, const FdOptions& opt = {}) {
    auto rep = fd_check(std::move(leaves), build, opt);
    out.push_back({name, rep.max_rel_err, tol, rep.max_rel_err < tol});
  }
};

// Tiny two-layer encoder (standard + expert) sharing one geometry with the
// pretrain decoder checks. Widths stay multiples of 16 for position codes.
inline ModelConfig suite_model() {
  ModelConfig m;
  m.geom = PatchGeometry{2, 4, 4, 16};
  m.depth = 2;
  m.heads = 2;
  m.ffn_hidden = 16;
  m.moae_pos = MoaePos::later;
  m.moae_layers = 1;
  m.n_experts = 3;
  m.top_k = 2;
  m.gate_sigma = 0.0;
  m.adapter_r = 4;
  m.decoder_depth = 1;
  m.decoder_width = 16;
  m.decoder_heads = 2;
  m.sfer_classes = 3;
  m.dfer_classes = 3;
  return m;
}

inline Clip<double> suite_clip(int t, uint64_t seed) {
  Clip<double> c{t, 8, 8, 1, {}};
  c.data = suite_vec((int64_t)t * 8 * 8, seed, 0.25, 0.5);
  return c;
}

inline std::vector<FdLeaf> table_leaves(const ParamTable<double>& t) {
  std::vector<FdLeaf> ls;
  ls.reserve((size_t)t.count());
  for (int i = 0; i < t.count(); ++i) ls.push_back({t.param(i).shape, t.param(i).value});
  return ls;
}

}  // namespace detail

inline std::vector<GradCheckResult> run_gradient_suite() {
  using detail::suite_vec;
  using T = Tensor<double>;
  using Ts = std::vector<T>;
  detail::SuiteRunner r;

  r.run("add_sub_scale", {{{2, 3}, suite_vec(6, 1)}, {{2, 3}, suite_vec(6, 2)}},
        [](Graph<double>&, const Ts& t) {
          return sum(scale(mul(add(t[0], t[1]), sub(t[0], t[1])), 0.7));
        });
  r.run("mul", {{{3, 3}, suite_vec(9, 3)}, {{3, 3}, suite_vec(9, 4)}},
        [](Graph<double>&, const Ts& t) { return mean_all(mul(t[0], t[1])); });
  r.run("matmul", {{{3, 4}, suite_vec(12, 5)}, {{4, 2}, suite_vec(8, 6)}},
        [](Graph<double>&, const Ts& t) { return mean_all(matmul(t[0], t[1])); });
  r.run("add_rowvec", {{{3, 4}, suite_vec(12, 7)}, {{4}, suite_vec(4, 8)}},
        [](Graph<double>&, const Ts& t) { return sum(gelu(add_rowvec(t[0], t[1]))); });
  r.run("scale_rows", {{{3, 4}, suite_vec(12, 9)}, {{3}, suite_vec(3, 10)}},
        [](Graph<double>&, const Ts& t) {
          auto y = scale_rows(t[0], t[1]);
          return sum(mul(y, y));
        });
  r.run("transpose", {{{3, 4}, suite_vec(12, 11)}, {{4, 3}, suite_vec(12, 12)}},
        [](Graph<double>&, const Ts& t) { return sum(mul(transpose(t[0]), t[1])); });
  r.run("reshape", {{{2, 6}, suite_vec(12, 13)}},
        [](Graph<double>&, const Ts& t) { return sum(gelu(reshape(t[0], {3, 4}))); });
  r.run("concat_axis0", {{{2, 3}, suite_vec(6, 14)}, {{1, 3}, suite_vec(3, 15)}},
        [](Graph<double>&, const Ts& t) {
          auto y = concat(Ts{t[0], t[1]}, 0);
          return sum(mul(y, y));
        });
  r.run("concat_axis1", {{{2, 3}, suite_vec(6, 16)}, {{2, 2}, suite_vec(4, 17)}},
        [](Graph<double>&, const Ts& t) {
          auto y = concat(Ts{t[0], t[1]}, 1);
          return sum(mul(y, y));
        });
  r.run("sum_mean_all", {{{2, 3}, suite_vec(6, 18)}, {{2, 2}, suite_vec(4, 19)}},
        [](Graph<double>&, const Ts& t) {
          return add(sum(mul(t[0], t[0])), scale(mean_all(mul(t[1], t[1])), 2.0));
        });
  r.run("mean_axis0", {{{4, 3}, suite_vec(12, 20)}, {{1, 3}, suite_vec(3, 21)}},
        [](Graph<double>&, const Ts& t) {
          auto m = reshape(mean_axis0(t[0]), {1, 3});
          return sum(mul(m, t[1]));
        });
  r.run("gather_rows_duplicates", {{{3, 4}, suite_vec(12, 22)}},
        [](Graph<double>&, const Ts& t) {
          auto y = gather_rows(t[0], {0, 2, 2, 1});
          return sum(mul(y, y));
        });
  r.run("scatter_rows", {{{3, 4}, suite_vec(12, 23)}},
        [](Graph<double>&, const Ts& t) {
          auto y = scatter_rows(t[0], {3, 0, 2}, 5);
          return sum(gelu(y));
        });
  r.run("take_duplicates", {{{2, 4}, suite_vec(8, 24)}},
        [](Graph<double>&, const Ts& t) {
          auto y = take(t[0], {0, 5, 5, 2, 7});
          return sum(mul(y, y));
        });
  r.run("slice_rows_cols", {{{4, 5}, suite_vec(20, 25)}},
        [](Graph<double>&, const Ts& t) {
          auto a = slice_rows(t[0], 1, 2);
          auto b = slice_cols(t[0], 2, 3);
          return add(sum(mul(a, a)), sum(gelu(b)));
        });
  r.run("softmax", {{{3, 4}, suite_vec(12, 26)}, {{3, 4}, suite_vec(12, 27)}},
        [](Graph<double>&, const Ts& t) { return sum(mul(softmax(t[0], 1), t[1])); });
  r.run("softmax_masked_rows", {{{2, 4}, suite_vec(8, 28)}, {{2, 4}, suite_vec(8, 29)}},
        [](Graph<double>&, const Ts& t) {
          auto w = softmax(mask_except_rows(t[0], {{0, 3}, {1, 2}}), 1);
          return sum(mul(w, t[1]));
        });
  r.run("layernorm", {{{3, 6}, suite_vec(18, 30)}, {{6}, suite_vec(6, 31, 0.3, 1.0)}, {{6}, suite_vec(6, 32, 0.3)}},
        [](Graph<double>&, const Ts& t) {
          auto y = layernorm(t[0], t[1], t[2]);
          return sum(mul(y, y));
        });
  r.run("gelu", {{{2, 5}, suite_vec(10, 33, 2.0)}},
        [](Graph<double>&, const Ts& t) { return sum(gelu(t[0])); });
  r.run("dropout_frozen_mask", {{{4, 4}, suite_vec(16, 34)}},
        [](Graph<double>&, const Ts& t) {
          Rng rng(7);  // re-seeded per evaluation, so the mask is a constant
          auto y = dropout(t[0], 0.3, rng, true);
          return sum(mul(y, y));
        });
  r.run("cross_entropy", {{{3, 4}, suite_vec(12, 35)}},
        [](Graph<double>&, const Ts& t) { return cross_entropy_logits(t[0], {1, 0, 3}); });
  r.run("cross_entropy_smoothed", {{{3, 4}, suite_vec(12, 36)}},
        [](Graph<double>&, const Ts& t) { return cross_entropy_logits(t[0], {2, 2, 0}, 0.1); });
  {
    const auto target = suite_vec(4 * 6, 37);
    const auto mask = sample_mask(4, 0.5, 99);
    std::vector<double> tg(target.begin(), target.end());
    r.run("masked_mse_masked_denom", {{{4, 6}, suite_vec(24, 38)}},
          [tg, mask](Graph<double>&, const Ts& t) {
            return masked_mse(t[0], tg, mask, MseDenominator::masked_elems);
          });
    r.run("masked_mse_visible_denom", {{{4, 6}, suite_vec(24, 39)}},
          [tg, mask](Graph<double>&, const Ts& t) {
            return masked_mse(t[0], tg, mask, MseDenominator::visible_elems);
          });
  }
  r.run("importance_loss", {{{4, 3}, suite_vec(12, 40)}},
        [](Graph<double>&, const Ts& t) { return importance_loss(softmax(t[0], 1)); });
  r.run("adapter", {{{3, 4}, suite_vec(12, 41)},
                    {{4, 2}, suite_vec(8, 42)},
                    {{2}, suite_vec(2, 43)},
                    {{2, 4}, suite_vec(8, 44)},
                    {{4}, suite_vec(4, 45)}},
        [](Graph<double>&, const Ts& t) {
          AdapterParams<double> a{t[1], t[2], t[3], t[4]};
          auto y = adapter_forward(t[0], a);
          return sum(mul(y, y));
        });
  {
    // Gate logits with wide margins, so the finite-difference step cannot
    // flip the top-k selection anywhere near the probe point.
    std::vector<FdLeaf> leaves;
    leaves.push_back({{2, 4}, {1.0, -0.5, 0.25, 0.75, -0.25, 1.0, 0.5, -1.0}});
    leaves.push_back({{4, 3}, {2.0, 0.3, -1.5, -1.0, 1.6, 0.2, 0.8, -0.7, 1.9, 0.1, 0.9, -2.0}});
    for (int e = 0; e < 3; ++e) {
      leaves.push_back({{4, 2}, suite_vec(8, 50 + 4 * (uint64_t)e)});
      leaves.push_back({{2}, suite_vec(2, 51 + 4 * (uint64_t)e)});
      leaves.push_back({{2, 4}, suite_vec(8, 52 + 4 * (uint64_t)e, 0.3)});
      leaves.push_back({{4}, suite_vec(4, 53 + 4 * (uint64_t)e, 0.3)});
    }
    r.run("moae_mixture_topk", std::move(leaves), [](Graph<double>&, const Ts& t) {
      GateParams<double> gate;
      gate.w_g = t[1];
      gate.sigma = 0.0;
      gate.k = 2;
      gate.train_mode = false;
      std::vector<AdapterParams<double>> experts;
      for (int e = 0; e < 3; ++e)
        experts.push_back({t[2 + 4 * e], t[3 + 4 * e], t[4 + 4 * e], t[5 + 4 * e]});
      Rng unused(0);
      auto mo = moae_forward(t[0], gate, experts, unused);
      return add(sum(mul(mo.y, mo.y)), scale(importance_loss(mo.gate_weights), 0.5));
    });
  }
  {
    std::vector<FdLeaf> leaves{{{3, 4}, suite_vec(12, 70)}};
    for (int i = 0; i < 4; ++i) leaves.push_back({{4, 4}, suite_vec(16, 71 + (uint64_t)i, 0.5)});
    for (int i = 0; i < 4; ++i) leaves.push_back({{4}, suite_vec(4, 75 + (uint64_t)i, 0.2)});
    r.run("mhsa", std::move(leaves), [](Graph<double>&, const Ts& t) {
      Bound<double> p;
      const char* ws[] = {"attn.wq", "attn.wk", "attn.wv", "attn.wo"};
      const char* bs[] = {"attn.bq", "attn.bk", "attn.bv", "attn.bo"};
      for (int i = 0; i < 4; ++i) p.set(ws[i], t[1 + i]);
      for (int i = 0; i < 4; ++i) p.set(bs[i], t[5 + i]);
      auto y = mhsa(t[0], p, "", 2);
      return sum(mul(y, y));
    });
  }
  r.run("ffn", {{{3, 4}, suite_vec(12, 80)},
                {{4, 6}, suite_vec(24, 81, 0.5)},
                {{6}, suite_vec(6, 82, 0.2)},
                {{6, 4}, suite_vec(24, 83, 0.5)},
                {{4}, suite_vec(4, 84, 0.2)}},
        [](Graph<double>&, const Ts& t) {
          Bound<double> p;
          p.set("w1", t[1]);
          p.set("b1", t[2]);
          p.set("w2", t[3]);
          p.set("b2", t[4]);
          auto y = ffn_forward(t[0], p, "");
          return sum(mul(y, y));
        });

  // End-to-end: the exact stage losses, gradients for every parameter slot.
  const auto mcfg = detail::suite_model();
  FdOptions deep;
  deep.max_entries_per_leaf = 3;
  {
    ParamTable<double> table;
    init_params(table, mcfg, 1, Stage::pretrain, 404);
    TrainConfig tcfg;
    tcfg.mask_ratio_video = 0.5;
    tcfg.mask_ratio_image = 0.5;
    const auto clip = detail::suite_clip(4, 90);
    r.run("pretrain_loss_full_model", detail::table_leaves(table),
          [&table, &mcfg, &tcfg, &clip](Graph<double>& g, const Ts& t) {
            auto p = bind_tensors(table, t);
            EncodeContext<double> ctx;
            Rng mask_rng(fold_seed(5, 0x3a5cu));
            std::vector<const Clip<double>*> batch{&clip};
            return pretrain_batch_loss(g, p, mcfg, tcfg, batch, Modality::video, ctx, mask_rng);
          },
          1e-4, deep);
  }
  {
    ParamTable<double> table;
    init_params(table, mcfg, 1, Stage::finetune, 405);
    // Zero-initialized adapter outputs make every expert the identity map,
    // which hides the gate: nudge them apart and widen the gate margins.
    Rng jitter(fold_seed(406, 0x90adu));
    for (int i = 0; i < table.count(); ++i) {
      auto& par = table.param(i);
      const auto& n = par.name;
      if (n.find("moae.exp") != std::string::npos &&
          (n.ends_with(".w2") || n.ends_with(".b2")))
        for (auto& v : par.value) v = jitter.normal(0.0, 0.05);
      if (n.ends_with("moae.gate.w"))
        for (auto& v : par.value) v *= 25.0;
    }
    TrainConfig tcfg;
    tcfg.importance_weight = 0.05;
    const auto video = detail::suite_clip(4, 91);
    const auto image = detail::suite_clip(1, 92);
    r.run("finetune_loss_full_model", detail::table_leaves(table),
          [&table, &mcfg, &tcfg, &video, &image](Graph<double>& g, const Ts& t) {
            auto p = bind_tensors(table, t);
            EncodeContext<double> ctx;
            std::vector<const Clip<double>*> vb{&video};
            std::vector<const Clip<double>*> ib{&image};
            auto lv = finetune_batch_loss(g, p, mcfg, tcfg, vb, {1}, 1, ctx);
            auto li = finetune_batch_loss(g, p, mcfg, tcfg, ib, {2}, 0, ctx);
            return add(lv, li);
          },
          1e-4, deep);
  }

  return r.out;
}

inline bool gradient_suite_ok(const std::vector<GradCheckResult>& rs) {
  for (const auto& c : rs)
    if (!c.pass) return false;
  return !rs.empty();
}

}  // namespace s4d
