#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "s4d/backbone.hpp"
#include "s4d/checkpoint.hpp"
#include "s4d/gradcheck.hpp"

using namespace s4d;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.geom = PatchGeometry{2, 2, 2, 16};
  cfg.depth = 1;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  cfg.moae_layers = 0;
  cfg.n_experts = 3;
  cfg.top_k = 1;
  cfg.adapter_r = 4;
  cfg.gate_sigma = 0.0;
  cfg.decoder_depth = 1;
  cfg.decoder_width = 16;
  cfg.decoder_heads = 2;
  cfg.sfer_classes = 3;
  cfg.dfer_classes = 2;
  return cfg;
}

Clip<double> random_clip(int t, int h, int w, int c, uint64_t seed) {
  Clip<double> clip;
  clip.t = t;
  clip.h = h;
  clip.w = w;
  clip.c = c;
  clip.data.resize(clip.size());
  Rng rng(seed);
  for (auto& v : clip.data) v = rng.uniform();
  return clip;
}

std::vector<int> on_layers(const std::vector<bool>& mask) {
  std::vector<int> out;
  for (int i = 0; i < (int)mask.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

}  // namespace

TEST_CASE("expert layer placement variants") {
  CHECK(on_layers(moae_layer_mask(6, 3, MoaePos::later)) == std::vector<int>{3, 4, 5});
  CHECK(on_layers(moae_layer_mask(6, 3, MoaePos::early)) == std::vector<int>{0, 1, 2});
  CHECK(on_layers(moae_layer_mask(6, 3, MoaePos::middle)) == std::vector<int>{1, 2, 3});
  CHECK(on_layers(moae_layer_mask(6, 3, MoaePos::alternate)) == std::vector<int>{1, 3, 5});
  CHECK(on_layers(moae_layer_mask(4, 2, MoaePos::alternate)) == std::vector<int>{1, 3});
  CHECK(on_layers(moae_layer_mask(6, 0, MoaePos::later)).empty());
  CHECK(on_layers(moae_layer_mask(5, 5, MoaePos::later)) == std::vector<int>{0, 1, 2, 3, 4});
  CHECK_THROWS_AS((void)moae_layer_mask(4, 3, MoaePos::alternate), std::invalid_argument);
  CHECK_THROWS_AS((void)moae_layer_mask(4, 5, MoaePos::later), std::invalid_argument);
  CHECK_THROWS_AS((void)moae_layer_mask(0, 0, MoaePos::later), std::invalid_argument);

  for (auto pos : {MoaePos::early, MoaePos::middle, MoaePos::later, MoaePos::alternate})
    CHECK(parse_moae_pos(to_string(pos)) == pos);
  CHECK_THROWS_AS((void)parse_moae_pos("everywhere"), std::invalid_argument);
}

TEST_CASE("parameter table rejects duplicate names") {
  ParamTable<float> t;
  t.add("a.w", {2, 2});
  CHECK_THROWS_AS((void)t.add("a.w", {2, 2}), std::invalid_argument);
  CHECK(t.has("a.w"));
  CHECK_FALSE(t.has("a.b"));
  CHECK_THROWS_AS((void)t.at("a.b"), std::out_of_range);
  CHECK(t.total_values() == 4);
}

TEST_CASE("stage-specific parameter sets") {
  auto cfg = tiny_cfg();
  cfg.moae_layers = 1;

  ParamTable<float> pre;
  init_params(pre, cfg, 1, Stage::pretrain, 1);
  CHECK(pre.has("patch_proj.w"));
  CHECK(pre.has("enc.0.attn.wq"));
  CHECK(pre.has("dec.mask_token"));
  CHECK(pre.has("dec.out.w"));
  CHECK_FALSE(pre.has("head.sfer.w"));
  CHECK_FALSE(pre.has("enc.0.moae.gate.w"));  // expert mixture is a stage-2 construct

  ParamTable<float> fin;
  init_params(fin, cfg, 1, Stage::finetune, 1);
  CHECK(fin.has("head.sfer.w"));
  CHECK(fin.has("head.dfer.b"));
  CHECK(fin.has("enc.0.moae.gate.w"));
  CHECK(fin.has("enc.0.moae.exp2.w2"));
  CHECK_FALSE(fin.has("dec.mask_token"));

  // Same seed reproduces every value; a different seed does not.
  ParamTable<float> fin2, fin3;
  init_params(fin2, cfg, 1, Stage::finetune, 1);
  init_params(fin3, cfg, 1, Stage::finetune, 2);
  CHECK(fin.total_values() == fin2.total_values());
  bool same = true, same3 = true;
  for (int i = 0; i < fin.count(); ++i) {
    same = same && fin.param(i).value == fin2.param(i).value;
    same3 = same3 && fin.param(i).value == fin3.param(i).value;
  }
  CHECK(same);
  CHECK_FALSE(same3);
}

TEST_CASE("expert layers cost exactly the adapter and gate parameters extra") {
  ModelConfig cfg;
  cfg.geom = PatchGeometry{2, 8, 8, 64};
  cfg.depth = 6;
  cfg.heads = 4;
  cfg.ffn_hidden = 256;
  cfg.n_experts = 8;
  cfg.top_k = 2;
  cfg.adapter_r = 0;  // resolves to 16

  ParamTable<float> plain, mixed;
  cfg.moae_layers = 0;
  init_params(plain, cfg, 3, Stage::finetune, 5);
  cfg.moae_layers = 3;
  init_params(mixed, cfg, 3, Stage::finetune, 5);

  const int64_t d = 64, r = 16, n = 8;
  const int64_t per_layer = n * (2 * d * r + r + d) + d * n;
  CHECK(mixed.total_values() - plain.total_values() == 3 * per_layer);
  CHECK(per_layer == 17536);
}

TEST_CASE("zeroed attention output and FFN projection make a layer the identity") {
  auto cfg = tiny_cfg();
  ParamTable<double> t;
  init_params(t, cfg, 1, Stage::pretrain, 3);
  auto zero = [&](const std::string& n) {
    auto& v = t.at(n).value;
    std::fill(v.begin(), v.end(), 0.0);
  };
  zero("enc.0.attn.wo");
  zero("enc.0.ffn.w2");  // paired biases start at zero already

  Graph<double> g;
  auto p = bind(g, t, false);
  Rng rng(4);
  std::vector<double> xv(6 * 16);
  for (auto& v : xv) v = rng.normal();
  auto x = g.leaf({6, 16}, xv, false);
  EncodeContext<double> ctx;
  auto y = standard_layer(x, p, "enc.0.", cfg.heads, ctx, 0);
  REQUIRE(y.shape() == x.shape());
  CHECK(std::memcmp(y.data().data(), x.data().data(), sizeof(double) * x.size()) == 0);
}

TEST_CASE("expert layer with zero adapters adds the normalized input verbatim") {
  auto cfg = tiny_cfg();
  cfg.moae_layers = 1;
  ParamTable<double> t;
  init_params(t, cfg, 1, Stage::finetune, 6);
  // Adapter output projections are zero at init; widen the gate for margins.
  {
    Rng grng(8);
    for (auto& v : t.at("enc.0.moae.gate.w").value) v = grng.normal(0.0, 0.6);
  }

  Rng rng(9);
  std::vector<double> xv(5 * 16);
  for (auto& v : xv) v = rng.normal();

  auto run = [&](int k) {
    cfg.top_k = k;
    Graph<double> g;
    auto p = bind(g, t, false);
    auto x = g.leaf({5, 16}, xv, false);
    EncodeContext<double> ctx;
    auto out = expert_layer(x, p, "enc.0.", cfg, ctx, 0);

    // Reference decomposition built from the same primitives.
    auto att = mhsa(layernorm(x, p["enc.0.ln1.g"], p["enc.0.ln1.b"]), p, "enc.0.", cfg.heads);
    auto x1 = add(x, att);
    auto xs = layernorm(x1, p["enc.0.ln2.g"], p["enc.0.ln2.b"]);
    auto f = ffn_forward(xs, p, "enc.0.ffn.");
    auto expect = add(add(x1, f), xs);

    CHECK(ctx.gate_weights.size() == 1);
    return std::make_pair(std::vector<double>(out.data().begin(), out.data().end()),
                          std::vector<double>(expect.data().begin(), expect.data().end()));
  };

  {
    auto [out, expect] = run(1);
    CHECK(std::memcmp(out.data(), expect.data(), sizeof(double) * out.size()) == 0);
  }
  {
    auto [out, expect] = run(2);
    for (size_t i = 0; i < out.size(); ++i)
      CHECK(out[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
}

TEST_CASE("encode applies the mixture only at configured layers and stage") {
  auto cfg = tiny_cfg();
  cfg.depth = 4;
  cfg.moae_layers = 2;
  cfg.moae_pos = MoaePos::alternate;
  cfg.top_k = 2;

  ParamTable<double> t;
  init_params(t, cfg, 1, Stage::finetune, 7);
  Graph<double> g;
  auto p = bind(g, t, false);
  Rng rng(10);
  std::vector<double> xv(4 * 16);
  for (auto& v : xv) v = rng.normal();
  auto x = g.leaf({4, 16}, xv, false);

  ForwardTrace<double> trace;
  trace.want_gates = true;
  EncodeContext<double> ctx;
  ctx.trace = &trace;
  auto z = encode(x, p, cfg, Stage::finetune, ctx);
  CHECK(z.shape() == x.shape());
  REQUIRE(trace.gates.size() == 2);
  CHECK(trace.gates[0].first == 1);
  CHECK(trace.gates[1].first == 3);
  CHECK(ctx.gate_weights.size() == 2);
  CHECK((int)trace.gates[0].second.size() == 4);

  // Stage 1 tables carry no mixture parameters and encode never asks for them.
  ParamTable<double> pre;
  init_params(pre, cfg, 1, Stage::pretrain, 7);
  Graph<double> g2;
  auto p2 = bind(g2, pre, false);
  auto x2 = g2.leaf({4, 16}, xv, false);
  EncodeContext<double> ctx2;
  CHECK_NOTHROW((void)encode(x2, p2, cfg, Stage::pretrain, ctx2));
  CHECK(ctx2.gate_weights.empty());
}

TEST_CASE("decoder output is invariant to visible-row order") {
  auto cfg = tiny_cfg();
  ParamTable<double> t;
  init_params(t, cfg, 1, Stage::pretrain, 11);
  Graph<double> g;
  auto p = bind(g, t, false);

  auto mask = sample_mask(4, 0.5, 3);
  auto ids = mask.visible_indices();
  REQUIRE(ids.size() == 2);
  std::vector<GridCoord> coords{{0, 0, 0}, {0, 0, 1}, {0, 1, 0}, {0, 1, 1}};

  Rng rng(12);
  std::vector<double> zv(2 * 16);
  for (auto& v : zv) v = rng.normal();
  auto z = g.leaf({2, 16}, zv, false);
  EncodeContext<double> ctx;
  auto pred = decode(z, ids, mask, coords, p, cfg, ctx);
  CHECK(pred.dim(0) == 4);                       // one prediction per grid slot
  CHECK(pred.dim(1) == cfg.geom.tube_dim(1));

  // Swap the two latent rows and their grid ids: same reconstruction bits.
  std::vector<double> zswap(zv.end() - 16, zv.end());
  zswap.insert(zswap.end(), zv.begin(), zv.begin() + 16);
  auto z2 = g.leaf({2, 16}, zswap, false);
  std::vector<int> ids2{ids[1], ids[0]};
  auto pred2 = decode(z2, ids2, mask, coords, p, cfg, ctx);
  CHECK(std::memcmp(pred.data().data(), pred2.data().data(), sizeof(double) * pred.size()) == 0);

  // Nothing masked: the decoder sees only real latents and still covers the grid.
  auto open = sample_mask(4, 0.0, 3);
  std::vector<double> z4(4 * 16);
  for (auto& v : z4) v = rng.normal();
  auto zfull = g.leaf({4, 16}, z4, false);
  auto pred3 = decode(zfull, open.visible_indices(), open, coords, p, cfg, ctx);
  CHECK(pred3.dim(0) == 4);

  std::vector<int> short_ids{0};
  CHECK_THROWS_AS((void)decode(z, short_ids, mask, coords, p, cfg, ctx), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip restores every bit") {
  auto cfg = tiny_cfg();
  cfg.moae_layers = 1;
  ParamTable<float> t;
  init_params(t, cfg, 1, Stage::finetune, 13);

  const std::filesystem::path path = "ckpt_roundtrip.s4dc";
  save_checkpoint(path, t);
  CHECK_FALSE(std::filesystem::exists(path.string() + ".tmp"));

  ParamTable<float> t2;
  init_params(t2, cfg, 1, Stage::finetune, 99);  // different values, same shapes
  auto report = load_checkpoint(path, t2);
  CHECK((int)report.loaded.size() == t.count());
  CHECK(report.missing.empty());
  CHECK(report.extra.empty());
  for (int i = 0; i < t.count(); ++i) {
    const auto& a = t.param(i).value;
    const auto& b = t2.at(t.param(i).name).value;
    REQUIRE(a.size() == b.size());
    CHECK(std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
  }
  std::filesystem::remove(path);
}

TEST_CASE("stage transfer loads the shared encoder subset") {
  auto cfg = tiny_cfg();
  cfg.moae_layers = 1;
  ParamTable<float> pre;
  init_params(pre, cfg, 1, Stage::pretrain, 17);
  const std::filesystem::path path = "ckpt_stage1.s4dc";
  save_checkpoint(path, pre);

  ParamTable<float> fin;
  init_params(fin, cfg, 1, Stage::finetune, 18);
  CHECK_THROWS_AS((void)load_checkpoint(path, fin, false), std::runtime_error);

  auto report = load_checkpoint(path, fin, true);
  CHECK_FALSE(report.loaded.empty());
  // Decoder tensors stay behind; heads and mixture weights keep their init.
  bool extra_has_decoder = false;
  for (const auto& n : report.extra) extra_has_decoder = extra_has_decoder || n.rfind("dec.", 0) == 0;
  CHECK(extra_has_decoder);
  bool missing_has_head = false, missing_has_gate = false;
  for (const auto& n : report.missing) {
    missing_has_head = missing_has_head || n.rfind("head.", 0) == 0;
    missing_has_gate = missing_has_gate || n.find(".moae.") != std::string::npos;
  }
  CHECK(missing_has_head);
  CHECK(missing_has_gate);
  CHECK(fin.at("patch_proj.w").value == pre.at("patch_proj.w").value);
  CHECK(fin.at("enc.0.attn.wq").value == pre.at("enc.0.attn.wq").value);

  // Same names with different shapes are never silently accepted.
  auto wide = tiny_cfg();
  wide.geom.embed_dim = 32;
  wide.ffn_hidden = 32;
  ParamTable<float> other;
  init_params(other, wide, 1, Stage::pretrain, 19);
  CHECK_THROWS_AS((void)load_checkpoint(path, other, true), std::runtime_error);
  std::filesystem::remove(path);
}

TEST_CASE("corrupt checkpoint files are rejected") {
  const std::filesystem::path path = "ckpt_bad.s4dc";
  {
    std::ofstream f(path, std::ios::binary);
    f << "JUNKDATA";
  }
  ParamTable<float> t;
  t.add("a", {1});
  CHECK_THROWS_AS((void)load_checkpoint(path, t), std::runtime_error);
  std::filesystem::remove(path);
  CHECK_THROWS_AS((void)load_checkpoint("ckpt_absent.s4dc", t), std::runtime_error);
}

TEST_CASE("task heads are parameter-disjoint") {
  auto cfg = tiny_cfg();
  ParamTable<float> a;
  init_params(a, cfg, 1, Stage::finetune, 21);
  ParamTable<float> b;
  init_params(b, cfg, 1, Stage::finetune, 21);
  for (auto& v : b.at("head.dfer.w").value) v += 7.0f;
  for (auto& v : b.at("head.dfer.b").value) v -= 2.0f;

  std::vector<float> phi(16);
  Rng rng(22);
  for (auto& v : phi) v = (float)rng.normal();

  auto logits_of = [&](ParamTable<float>& t, TaskHead head) {
    Graph<float> g;
    auto p = bind(g, t, false);
    auto x = g.leaf({16}, phi, false);
    auto logits = classify(x, head, p, cfg);
    return std::vector<float>(logits.data().begin(), logits.data().end());
  };
  auto sa = logits_of(a, TaskHead::sfer);
  auto sb = logits_of(b, TaskHead::sfer);
  CHECK((int)sa.size() == cfg.sfer_classes);
  CHECK(std::memcmp(sa.data(), sb.data(), sizeof(float) * sa.size()) == 0);

  auto da = logits_of(a, TaskHead::dfer);
  auto db = logits_of(b, TaskHead::dfer);
  CHECK((int)da.size() == cfg.dfer_classes);
  CHECK(da != db);
}

TEST_CASE("random clips produce finite logits") {
  auto cfg = tiny_cfg();
  cfg.depth = 2;
  cfg.moae_layers = 1;
  cfg.top_k = 2;
  ParamTable<float> t;
  init_params(t, cfg, 1, Stage::finetune, 23);

  Rng rng(24);
  for (int s = 0; s < 100; ++s) {
    Graph<float> g;
    auto p = bind(g, t, false);
    Clip<float> clip;
    clip.t = 2;
    clip.h = 4;
    clip.w = 4;
    clip.c = 1;
    clip.data.resize(clip.size());
    for (auto& v : clip.data) v = (float)rng.uniform();
    EncodeContext<float> ctx;
    auto phi = embed_clip(g, clip, Modality::video, p, cfg, Stage::finetune, ctx);
    auto ls = classify(phi, TaskHead::sfer, p, cfg);
    auto ld = classify(phi, TaskHead::dfer, p, cfg);
    for (int64_t i = 0; i < ls.size(); ++i) REQUIRE(std::isfinite(ls.data()[i]));
    for (int64_t i = 0; i < ld.size(); ++i) REQUIRE(std::isfinite(ld.data()[i]));
  }
}

TEST_CASE("single-frame input embeds exactly like its replicated clip") {
  auto cfg = tiny_cfg();
  ParamTable<float> t;
  init_params(t, cfg, 1, Stage::finetune, 25);
  Graph<float> g;
  auto p = bind(g, t, false);

  Clip<float> img;
  img.t = 1;
  img.h = 4;
  img.w = 4;
  img.c = 1;
  img.data.resize(img.size());
  Rng rng(26);
  for (auto& v : img.data) v = (float)rng.uniform();
  auto vid = replicate_image(img, cfg.geom);

  EncodeContext<float> ctx;
  auto a = embed_clip(g, img, Modality::image, p, cfg, Stage::finetune, ctx);
  auto b = embed_clip(g, vid, Modality::video, p, cfg, Stage::finetune, ctx);
  CHECK(std::memcmp(a.data().data(), b.data().data(), sizeof(float) * a.size()) == 0);
}

TEST_CASE("reconstruction path gradients match finite differences") {
  auto cfg = tiny_cfg();
  ParamTable<double> t;
  init_params(t, cfg, 1, Stage::pretrain, 27);

  auto clip = random_clip(2, 4, 4, 1, 28);
  Clip<double> dclip;
  dclip.t = 2;
  dclip.h = 4;
  dclip.w = 4;
  dclip.c = 1;
  dclip.data = clip.data;
  auto mask = sample_mask(4, 0.5, 29);

  std::vector<FdLeaf> leaves;
  for (int i = 0; i < t.count(); ++i) {
    FdLeaf l{t.param(i).shape, {}};
    l.value.assign(t.param(i).value.begin(), t.param(i).value.end());
    leaves.push_back(std::move(l));
  }

  auto build = [&](Graph<double>& g, const std::vector<Tensor<double>>& xs) {
    auto p = bind_tensors(t, xs);
    auto tb = tokenize(g, dclip, cfg.geom, p["patch_proj.w"], p["patch_proj.b"], Modality::video);
    auto vis = apply_mask(tb, mask);
    EncodeContext<double> ctx;
    auto z = encode(vis.tokens, p, cfg, Stage::pretrain, ctx);
    auto pred = decode(z, mask.visible_indices(), mask, tb.coords, p, cfg, ctx);
    return masked_mse(pred, tb.patch_pixels, mask);
  };

  FdOptions opt;
  opt.max_entries_per_leaf = 4;
  auto rep = fd_check(leaves, build, opt);
  CHECK(rep.max_rel_err < 1e-4);
}

TEST_CASE("classification path gradients match finite differences") {
  auto cfg = tiny_cfg();
  cfg.moae_layers = 1;
  cfg.top_k = 2;
  ParamTable<double> t;
  init_params(t, cfg, 1, Stage::finetune, 31);
  {
    Rng grng(32);
    for (auto& v : t.at("enc.0.moae.gate.w").value) v = grng.normal(0.0, 0.8);
  }

  auto clip = random_clip(2, 4, 4, 1, 33);

  std::vector<FdLeaf> leaves;
  for (int i = 0; i < t.count(); ++i) {
    FdLeaf l{t.param(i).shape, {}};
    l.value.assign(t.param(i).value.begin(), t.param(i).value.end());
    leaves.push_back(std::move(l));
  }

  auto build = [&](Graph<double>& g, const std::vector<Tensor<double>>& xs) {
    auto p = bind_tensors(t, xs);
    EncodeContext<double> ctx;
    auto phi = embed_clip(g, clip, Modality::video, p, cfg, Stage::finetune, ctx);
    auto logits = classify(phi, TaskHead::sfer, p, cfg);
    return cross_entropy_logits(logits, std::vector<int>{1});
  };

  FdOptions opt;
  opt.max_entries_per_leaf = 4;
  auto rep = fd_check(leaves, build, opt);
  CHECK(rep.max_rel_err < 1e-4);
}
