#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "s4d/patchify.hpp"
#include "s4d/rng.hpp"
#include "s4d/tensor.hpp"

namespace s4d {

// Binary token visibility: 1 = kept, 0 = dropped for reconstruction.
struct MaskSpec {
  double ratio = 0.0;
  uint64_t seed = 0;
  std::vector<uint8_t> visible;

  int n_tokens() const { return (int)visible.size(); }
  int n_masked() const {
    return (int)std::count(visible.begin(), visible.end(), (uint8_t)0);
  }
  int n_visible() const { return n_tokens() - n_masked(); }

  std::vector<int> visible_indices() const {
    std::vector<int> v;
    for (int i = 0; i < n_tokens(); ++i)
      if (visible[i]) v.push_back(i);
    return v;
  }
  std::vector<int> masked_indices() const {
    std::vector<int> v;
    for (int i = 0; i < n_tokens(); ++i)
      if (!visible[i]) v.push_back(i);
    return v;
  }
};

// Uniform random subset of round(ratio*n) dropped tokens. For 0 < ratio < 1
// the count is clamped so at least one token stays on each side.
inline MaskSpec sample_mask(int n_tokens, double ratio, uint64_t seed) {
  if (n_tokens < 1) throw std::invalid_argument("sample_mask: need at least one token");
  if (ratio < 0.0 || ratio >= 1.0) throw std::invalid_argument("sample_mask: ratio must be in [0,1)");
  int drop = (int)std::llround(ratio * n_tokens);
  if (ratio > 0.0) drop = std::clamp(drop, 1, n_tokens - 1);
  MaskSpec m;
  m.ratio = ratio;
  m.seed = seed;
  m.visible.assign((size_t)n_tokens, 1);
  std::vector<int> order(n_tokens);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng.engine());
  for (int i = 0; i < drop; ++i) m.visible[order[i]] = 0;
  return m;
}

// Keeps only visible token rows (and their coordinates). Grid metadata stays
// with the batch so the decoder can re-place latents later.
template <typename S>
TokenBatch<S> apply_mask(const TokenBatch<S>& tb, const MaskSpec& mask) {
  if (mask.n_tokens() != tb.grid.n_tokens())
    throw std::invalid_argument("apply_mask: mask length does not match token count");
  TokenBatch<S> out;
  out.grid = tb.grid;
  out.modality = tb.modality;
  out.channels = tb.channels;
  out.patch_pixels = tb.patch_pixels;
  auto keep = mask.visible_indices();
  out.tokens = gather_rows(tb.tokens, keep);
  out.coords.reserve(keep.size());
  for (int i : keep) out.coords.push_back(tb.coords[i]);
  return out;
}

enum class MseDenominator {
  masked_elems,   // mean over reconstructed (hidden) elements
  visible_elems,  // divide by the visible element count instead; rescales the
                  // loss by rho/(1-rho) but leaves gradient directions intact
};

// Reconstruction error restricted to masked patch rows. Visible rows do not
// contribute at all, so perturbing their predictions cannot change the loss.
template <typename S>
Tensor<S> masked_mse(const Tensor<S>& pred, const std::vector<S>& target, const MaskSpec& mask,
                     MseDenominator denom = MseDenominator::masked_elems) {
  if (pred.rank() != 2) throw std::invalid_argument("masked_mse: predictions must be [tokens, patch_dim]");
  const int n = pred.dim(0), td = pred.dim(1);
  if (mask.n_tokens() != n)
    throw std::invalid_argument("masked_mse: mask length does not match prediction rows");
  if ((int64_t)target.size() != (int64_t)n * td)
    throw std::invalid_argument("masked_mse: target size does not match predictions");
  const int n_masked = mask.n_masked();
  if (n_masked == 0)
    throw std::invalid_argument("masked_mse: no masked tokens, loss is degenerate");
  const int64_t denom_elems =
      (denom == MseDenominator::masked_elems ? (int64_t)n_masked : (int64_t)mask.n_visible()) * td;
  if (denom_elems == 0)
    throw std::invalid_argument("masked_mse: zero visible elements in literal normalization");

  Graph<S>& g = *pred.graph();
  S total = S(0);
  for (int i = 0; i < n; ++i) {
    if (mask.visible[i]) continue;
    const S* p = pred.data().data() + (int64_t)i * td;
    const S* t = target.data() + (int64_t)i * td;
    for (int j = 0; j < td; ++j) total += (p[j] - t[j]) * (p[j] - t[j]);
  }
  total /= S(denom_elems);
  Tensor<S> out = g.make({1}, {total}, {pred});
  g.set_backward(out.id(), [ip = pred.id(), io = out.id(), visible = mask.visible,
                            target, td, denom_elems](Graph<S>& g) {
    if (!g.requires_grad(ip)) return;
    const S go = g.grad(io)[0];
    auto pv = g.value(ip);
    auto gi = g.grad_mut(ip);
    const S c = go * S(2) / S(denom_elems);
    for (size_t i = 0; i < visible.size(); ++i) {
      if (visible[i]) continue;
      const S* p = pv.data() + (int64_t)i * td;
      const S* t = target.data() + (int64_t)i * td;
      S* gx = gi.data() + (int64_t)i * td;
      for (int j = 0; j < td; ++j) gx[j] += c * (p[j] - t[j]);
    }
  });
  return out;
}

}  // namespace s4d
