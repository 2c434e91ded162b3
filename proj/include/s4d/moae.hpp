#pragma once

#include <stdexcept>
#include <vector>

#include "s4d/rng.hpp"
#include "s4d/tensor.hpp"

// Noisy top-k routing over bottleneck adapter experts. Only selected experts
// run; suppressed gate entries are set to an actual -inf before the softmax,
// so their weights are exact zeros and carry no gradient.

namespace s4d {

template <typename S>
struct GateParams {
  Tensor<S> w_g;  // [d, n_experts]
  double sigma = 1.0;
  int k = 2;
  bool train_mode = false;

  int n_experts() const { return w_g.dim(1); }
};

template <typename S>
struct AdapterParams {
  Tensor<S> w1;  // [d, r]
  Tensor<S> b1;  // [r]
  Tensor<S> w2;  // [r, d]
  Tensor<S> b2;  // [d]
};

// Routing record for one token: dense weight vector (exact zeros at
// unselected experts) plus the selected expert indices.
struct GateDecision {
  std::vector<double> weights;
  std::vector<int> selected;
};

// Gate logits x.W_g with additive N(0, sigma^2) noise in train mode. The
// noise is a constant of the graph: it perturbs routing, not gradients.
template <typename S>
Tensor<S> noisy_logits(const Tensor<S>& x, const GateParams<S>& gate, Rng& rng) {
  if (gate.sigma < 0.0) throw std::invalid_argument("noisy_logits: sigma must be non-negative");
  Tensor<S> xm = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  Tensor<S> h = matmul(xm, gate.w_g);
  if (gate.train_mode && gate.sigma > 0.0) {
    Graph<S>& g = *x.graph();
    std::vector<S> eps((size_t)h.size());
    for (auto& e : eps) e = (S)rng.normal(0.0, gate.sigma);
    h = add(h, g.constant(h.shape(), std::move(eps)));
  }
  return h;
}

template <typename S>
struct GateOutput {
  Tensor<S> weights;                        // [m, n] rows sum to 1, exact zeros off-selection
  std::vector<std::vector<int>> selected;   // per row, descending logit order
};

// Top-k then renormalize: suppressed entries become -inf, the stabilized
// softmax turns them into exact zeros. Ties pick the lowest expert index.
template <typename S>
GateOutput<S> topk_gate(const Tensor<S>& logits, int k) {
  Tensor<S> h = logits.rank() == 1 ? reshape(logits, {1, logits.dim(0)}) : logits;
  const int n = h.dim(1);
  if (k < 1 || k > n) throw std::invalid_argument("topk_gate: k out of range");
  GateOutput<S> out;
  out.selected = topk_rows(h, k);
  out.weights = softmax(mask_except_rows(h, out.selected), 1);
  return out;
}

template <typename S>
std::vector<GateDecision> gate_decisions(const GateOutput<S>& gate) {
  const int m = gate.weights.dim(0), n = gate.weights.dim(1);
  std::vector<GateDecision> ds((size_t)m);
  for (int i = 0; i < m; ++i) {
    ds[i].weights.assign(n, 0.0);
    for (int j = 0; j < n; ++j) ds[i].weights[j] = (double)gate.weights.data()[(int64_t)i * n + j];
    ds[i].selected = gate.selected[i];
  }
  return ds;
}

// Bottleneck adapter with internal residual: x + W2(GELU(W1 x + b1)) + b2.
template <typename S>
Tensor<S> adapter_forward(const Tensor<S>& x, const AdapterParams<S>& a) {
  Tensor<S> xm = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  auto hidden = gelu(add_rowvec(matmul(xm, a.w1), a.b1));
  auto delta = add_rowvec(matmul(hidden, a.w2), a.b2);
  auto y = add(xm, delta);
  return x.rank() == 1 ? reshape(y, x.shape()) : y;
}

template <typename S>
struct MoaeOutput {
  Tensor<S> y;                          // [m, d]
  std::vector<GateDecision> decisions;  // one per token
  Tensor<S> gate_weights;               // [m, n] kept for optional balance terms
};

// Sparse mixture dispatch: each expert runs once on the rows that selected
// it; weighted results scatter-add back. Row-stable kernels make this
// bit-identical to evaluating every expert densely and weighting.
template <typename S>
MoaeOutput<S> moae_forward(const Tensor<S>& x, const GateParams<S>& gate,
                           const std::vector<AdapterParams<S>>& experts, Rng& rng) {
  Tensor<S> xm = x.rank() == 1 ? reshape(x, {1, x.dim(0)}) : x;
  const int m = xm.dim(0);
  const int n = gate.n_experts();
  if ((int)experts.size() != n)
    throw std::invalid_argument("moae_forward: expert count does not match gate width");
  Graph<S>& g = *x.graph();

  auto h = noisy_logits(xm, gate, rng);
  auto go = topk_gate(h, gate.k);

  // Token rows routed to each expert, in token order.
  std::vector<std::vector<int>> rows_for((size_t)n);
  for (int i = 0; i < m; ++i)
    for (int e : go.selected[i]) rows_for[e].push_back(i);

  Tensor<S> acc = g.full({m, xm.dim(1)}, S(0));
  for (int e = 0; e < n; ++e) {
    const auto& rows = rows_for[e];
    if (rows.empty()) continue;
    auto xe = gather_rows(xm, rows);
    auto ye = adapter_forward(xe, experts[e]);
    std::vector<int64_t> widx;
    widx.reserve(rows.size());
    for (int r : rows) widx.push_back((int64_t)r * n + e);
    auto we = take(go.weights, std::move(widx));
    acc = add(acc, scatter_rows(scale_rows(ye, we), rows, m));
  }

  MoaeOutput<S> out;
  out.y = x.rank() == 1 ? reshape(acc, x.shape()) : acc;
  out.decisions = gate_decisions(go);
  out.gate_weights = go.weights;
  return out;
}

// Squared coefficient of variation of per-expert importance (summed gate
// weight over the batch). Optional balance regularizer; off by default.
template <typename S>
Tensor<S> importance_loss(const Tensor<S>& gate_weights) {
  if (gate_weights.rank() != 2) throw std::invalid_argument("importance_loss: expected [tokens, experts]");
  const int m = gate_weights.dim(0), n = gate_weights.dim(1);
  Graph<S>& g = *gate_weights.graph();
  std::vector<S> imp((size_t)n, S(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) imp[j] += gate_weights.data()[(int64_t)i * n + j];
  S mu = S(0);
  for (S v : imp) mu += v;
  mu /= S(n);
  S var = S(0);
  for (S v : imp) var += (v - mu) * (v - mu);
  var /= S(n);
  constexpr S eps = S(1e-10);
  const S cv2 = var / (mu * mu + eps);
  Tensor<S> out = g.make({1}, {cv2}, {gate_weights});
  g.set_backward(out.id(), [iw = gate_weights.id(), io = out.id(), imp, mu, var, m, n](Graph<S>& g) {
    if (!g.requires_grad(iw)) return;
    const S go = g.grad(io)[0];
    auto gi = g.grad_mut(iw);
    constexpr S eps = S(1e-10);
    const S denom = mu * mu + eps;
    // dL/dimp_j = 2(imp_j - mu)/(n*denom) - var*2*mu/(denom^2 * n)
    for (int j = 0; j < n; ++j) {
      const S d = S(2) * (imp[j] - mu) / (S(n) * denom) - var * S(2) * mu / (denom * denom * S(n));
      for (int i = 0; i < m; ++i) gi[(int64_t)i * n + j] += go * d;
    }
  });
  return out;
}

}  // namespace s4d
