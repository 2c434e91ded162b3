#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "s4d/gradcheck.hpp"
#include "s4d/masking.hpp"
#include "s4d/patchify.hpp"

using namespace s4d;

TEST_CASE("sample_mask drops round(ratio * n) tokens") {
  auto m = sample_mask(800, 0.95, 42);
  CHECK(m.n_tokens() == 800);
  CHECK(m.n_masked() == 760);
  CHECK(m.n_visible() == 40);

  auto m2 = sample_mask(100, 0.90, 42);
  CHECK(m2.n_masked() == 90);

  // Rounding: 0.25 of 10 is 2.5, llround gives 3.
  CHECK(sample_mask(10, 0.25, 1).n_masked() == 3);
}

TEST_CASE("sample_mask always keeps at least one token on each side") {
  // Tiny n with extreme ratio would round to dropping everything.
  auto hi = sample_mask(3, 0.99, 7);
  CHECK(hi.n_masked() == 2);
  CHECK(hi.n_visible() == 1);

  auto lo = sample_mask(3, 0.01, 7);
  CHECK(lo.n_masked() == 1);

  auto none = sample_mask(5, 0.0, 7);
  CHECK(none.n_masked() == 0);

  CHECK_THROWS_AS((void)sample_mask(0, 0.5, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)sample_mask(10, 1.0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)sample_mask(10, -0.1, 1), std::invalid_argument);
}

TEST_CASE("sample_mask is a pure function of (n, ratio, seed)") {
  auto a = sample_mask(50, 0.6, 123);
  auto b = sample_mask(50, 0.6, 123);
  CHECK(a.visible == b.visible);
  auto c = sample_mask(50, 0.6, 124);
  CHECK(a.visible != c.visible);
}

TEST_CASE("apply_mask gathers visible rows and their coordinates") {
  PatchGeometry geom{2, 2, 2, 16};
  Clip<float> clip;
  clip.t = 2;
  clip.h = 4;
  clip.w = 4;
  clip.c = 1;
  clip.data.resize(clip.size());
  for (int64_t i = 0; i < clip.size(); ++i) clip.data[i] = (float)i * 0.01f;

  Graph<float> g;
  const int td = geom.tube_dim(1);
  auto w = g.leaf({td, 16}, std::vector<float>((size_t)td * 16, 0.01f), true);
  auto b = g.leaf({16}, std::vector<float>(16, 0.f), true);
  auto tb = tokenize(g, clip, geom, w, b, Modality::video);

  MaskSpec mask;
  mask.visible = {0, 1, 0, 1};
  auto vis = apply_mask(tb, mask);
  CHECK(vis.tokens.dim(0) == 2);
  CHECK(vis.coords.size() == 2);
  CHECK(vis.grid.n_tokens() == 4);  // grid metadata survives masking
  CHECK(vis.coords[0].w == tb.coords[1].w);
  CHECK(vis.coords[1].h == tb.coords[3].h);
  for (int j = 0; j < 16; ++j) {
    CHECK(vis.tokens.data()[j] == tb.tokens.data()[16 + j]);
    CHECK(vis.tokens.data()[16 + j] == tb.tokens.data()[48 + j]);
  }

  MaskSpec wrong;
  wrong.visible = {1, 0, 1};
  CHECK_THROWS_AS((void)apply_mask(tb, wrong), std::invalid_argument);
}

TEST_CASE("masked_mse worked example") {
  // Targets 1,2,3,4; first two tokens visible; predictions 9,9,5,3.
  // Only rows 2 and 3 count: ((5-3)^2 + (3-4)^2) / 2 = 2.5.
  Graph<double> g;
  auto pred = g.leaf({4, 1}, {9, 9, 5, 3}, true);
  MaskSpec mask;
  mask.visible = {1, 1, 0, 0};
  auto loss = masked_mse(pred, std::vector<double>{1, 2, 3, 4}, mask);
  CHECK(loss.item() == doctest::Approx(2.5).epsilon(1e-15));

  // Literal normalization divides by visible element count instead.
  auto lit = masked_mse(pred, std::vector<double>{1, 2, 3, 4}, mask, MseDenominator::visible_elems);
  CHECK(lit.item() == doctest::Approx(2.5).epsilon(1e-15));  // 2 visible, 2 masked

  MaskSpec uneven;
  uneven.visible = {1, 1, 1, 0};
  auto l2 = masked_mse(pred, std::vector<double>{1, 2, 3, 4}, uneven);
  CHECK(l2.item() == doctest::Approx(1.0).epsilon(1e-15));
  auto l2lit = masked_mse(pred, std::vector<double>{1, 2, 3, 4}, uneven, MseDenominator::visible_elems);
  CHECK(l2lit.item() == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("visible predictions cannot influence the masked loss") {
  MaskSpec mask;
  mask.visible = {1, 0, 1, 0, 0};
  std::vector<double> target(5 * 3);
  Rng rng(9);
  for (auto& v : target) v = rng.normal();

  std::vector<double> base(5 * 3);
  for (auto& v : base) v = rng.normal();

  auto eval = [&](const std::vector<double>& p) {
    Graph<double> g;
    auto pred = g.leaf({5, 3}, p, false);
    return masked_mse(pred, target, mask).item();
  };

  const double l0 = eval(base);
  auto bumped = base;
  bumped[0] += 100.0;   // row 0 visible
  bumped[7] += -3.5;    // row 2 visible
  bumped[8] += 0.125;
  const double l1 = eval(bumped);
  CHECK(std::memcmp(&l0, &l1, sizeof(double)) == 0);  // bitwise identical

  auto touched = base;
  touched[3] += 1e-3;  // row 1 masked
  CHECK(eval(touched) != l0);
}

TEST_CASE("masked_mse gradient matches finite differences, zero at visible rows") {
  MaskSpec mask;
  mask.visible = {0, 1, 0, 1};
  std::vector<double> target(4 * 2);
  Rng rng(17);
  for (auto& v : target) v = rng.normal();

  FdLeaf leaf{{4, 2}, {}};
  leaf.value.resize(8);
  for (auto& v : leaf.value) v = rng.normal();

  for (auto denom : {MseDenominator::masked_elems, MseDenominator::visible_elems}) {
    auto rep = fd_check(
        {leaf},
        [&](Graph<double>& g, const std::vector<Tensor<double>>& xs) {
          return masked_mse(xs[0], target, mask, denom);
        },
        {});
    CHECK(rep.max_rel_err < 1e-4);
  }

  // Analytic gradient is exactly zero at visible rows.
  Graph<double> g;
  auto pred = g.leaf({4, 2}, leaf.value, true);
  auto loss = masked_mse(pred, target, mask);
  g.backward(loss);
  auto gr = pred.grad();
  for (int j = 0; j < 2; ++j) {
    CHECK(gr[2 + j] == 0.0);  // row 1
    CHECK(gr[6 + j] == 0.0);  // row 3
    CHECK(gr[0 + j] != 0.0);
    CHECK(gr[4 + j] != 0.0);
  }
}

TEST_CASE("masked_mse input contracts") {
  Graph<double> g;
  auto pred = g.leaf({4, 1}, {1, 2, 3, 4}, true);
  MaskSpec allvis;
  allvis.visible = {1, 1, 1, 1};
  CHECK_THROWS_AS((void)masked_mse(pred, std::vector<double>{1, 2, 3, 4}, allvis),
                  std::invalid_argument);

  MaskSpec mask;
  mask.visible = {1, 1, 0, 0};
  CHECK_THROWS_AS((void)masked_mse(pred, std::vector<double>{1, 2, 3}, mask), std::invalid_argument);

  MaskSpec shorter;
  shorter.visible = {1, 0};
  CHECK_THROWS_AS((void)masked_mse(pred, std::vector<double>{1, 2, 3, 4}, shorter),
                  std::invalid_argument);

  auto rank1 = g.leaf({4}, {1, 2, 3, 4}, true);
  CHECK_THROWS_AS((void)masked_mse(rank1, std::vector<double>{1, 2, 3, 4}, mask),
                  std::invalid_argument);
}
