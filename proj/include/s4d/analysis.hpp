#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "s4d/backbone.hpp"
#include "s4d/synthdata.hpp"
#include "s4d/training.hpp"

// Evaluation and inspection: recall metrics from confusion matrices,
// cross-task scoring through the shared encoder, class-center similarity,
// expert routing statistics, and attention map export.

namespace s4d {

struct UarWar {
  double uar = 0.0;
  double war = 0.0;
  std::vector<double> per_class_recall;  // zero for excluded classes
  std::vector<int> excluded;             // classes with no test support
};

// Mean per-class recall (rows with zero support excluded and reported) and
// overall accuracy, from a [true x predicted] count matrix.
inline UarWar uar_war(const std::vector<std::vector<int64_t>>& confusion) {
  const size_t n = confusion.size();
  if (n == 0) throw std::invalid_argument("uar_war: empty confusion matrix");
  UarWar r;
  r.per_class_recall.assign(n, 0.0);
  int64_t total = 0, diag = 0;
  double recall_sum = 0.0;
  int supported = 0;
  for (size_t i = 0; i < n; ++i) {
    if (confusion[i].size() != n) throw std::invalid_argument("uar_war: matrix must be square");
    int64_t row = 0;
    for (int64_t v : confusion[i]) {
      if (v < 0) throw std::invalid_argument("uar_war: negative count");
      row += v;
    }
    total += row;
    diag += confusion[i][i];
    if (row == 0) {
      r.excluded.push_back((int)i);
      continue;
    }
    r.per_class_recall[i] = (double)confusion[i][i] / (double)row;
    recall_sum += r.per_class_recall[i];
    ++supported;
  }
  if (total == 0) throw std::invalid_argument("uar_war: no samples");
  r.uar = recall_sum / (double)supported;
  r.war = (double)diag / (double)total;
  return r;
}

struct EvalReport {
  std::vector<std::vector<int64_t>> confusion;  // [true][predicted]
  std::vector<double> per_class_recall;
  std::vector<int> excluded;
  double uar = 0.0;
  double war = 0.0;
  int64_t n_samples = 0;
};

inline EvalReport report_from_pairs(const std::vector<int>& truth, const std::vector<int>& pred,
                                    int n_classes) {
  if (truth.size() != pred.size()) throw std::invalid_argument("report: size mismatch");
  if (truth.empty()) throw std::invalid_argument("report: no samples");
  EvalReport rep;
  rep.confusion.assign((size_t)n_classes, std::vector<int64_t>((size_t)n_classes, 0));
  for (size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || truth[i] >= n_classes || pred[i] < 0 || pred[i] >= n_classes)
      throw std::invalid_argument("report: label outside class range");
    ++rep.confusion[(size_t)truth[i]][(size_t)pred[i]];
  }
  const auto m = uar_war(rep.confusion);
  rep.per_class_recall = m.per_class_recall;
  rep.excluded = m.excluded;
  rep.uar = m.uar;
  rep.war = m.war;
  rep.n_samples = (int64_t)truth.size();
  return rep;
}

namespace detail {

// Contiguous index ranges per worker; results land by index, so the merge is
// order-independent. run_range receives (worker, lo, hi).
inline void parallel_over(int n, int n_threads,
                          const std::function<void(int, int, int)>& run_range) {
  const int workers = std::max(1, std::min(n_threads, n));
  if (workers == 1) {
    run_range(0, 0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve((size_t)workers);
  for (int w = 0; w < workers; ++w) {
    const int lo = (int)((int64_t)n * w / workers);
    const int hi = (int)((int64_t)n * (w + 1) / workers);
    pool.emplace_back(run_range, w, lo, hi);
  }
  for (auto& t : pool) t.join();
}

template <typename S>
int argmax_low(std::span<const S> v) {
  int best = 0;
  for (size_t i = 1; i < v.size(); ++i)
    if ((double)v[i] > (double)v[best]) best = (int)i;
  return best;
}

}  // namespace detail

// Single forward through the chosen head for a one-frame input.
template <typename S>
int infer_image(const Clip<S>& clip, const ParamTable<S>& table, const ModelConfig& mcfg,
                TaskHead head = TaskHead::sfer) {
  Graph<S> g;
  auto p = bind(g, table, false);
  EncodeContext<S> ctx;
  auto logits = classify(embed_clip(g, clip, Modality::image, p, mcfg, Stage::finetune, ctx),
                         head, p, mcfg);
  return detail::argmax_low(logits.data());
}

// Class predictions for a whole dataset through one head. Images take the
// single-pass route, longer clips the two-window protocol. label_map, when
// given, translates head outputs into the dataset's label space.
template <typename S>
std::vector<int> predict_dataset(const ParamTable<S>& table, const ModelConfig& mcfg,
                                 const Dataset& ds, TaskHead head, int window_t,
                                 const std::vector<int>& label_map = {}, int n_threads = 1) {
  const int head_classes = head == TaskHead::sfer ? mcfg.sfer_classes : mcfg.dfer_classes;
  if (!label_map.empty() && (int)label_map.size() != head_classes)
    throw std::invalid_argument("predict: label map must cover every head class");
  std::vector<int> pred((size_t)ds.size(), -1);
  detail::parallel_over(ds.size(), n_threads, [&](int, int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      Clip<S> clip;
      clip.t = ds.clips[(size_t)i].t;
      clip.h = ds.clips[(size_t)i].h;
      clip.w = ds.clips[(size_t)i].w;
      clip.c = ds.clips[(size_t)i].c;
      clip.data.assign(ds.clips[(size_t)i].data.begin(), ds.clips[(size_t)i].data.end());
      const int raw = clip.t == 1 ? infer_image(clip, table, mcfg, head)
                                  : infer_video(clip, table, mcfg, window_t, head);
      pred[(size_t)i] = label_map.empty() ? raw : label_map[(size_t)raw];
    }
  });
  return pred;
}

// Same-task evaluation: head vocabulary must match the dataset's.
template <typename S>
EvalReport evaluate(const ParamTable<S>& table, const ModelConfig& mcfg, const Dataset& ds,
                    TaskHead head, int window_t, int n_threads = 1) {
  const int head_classes = head == TaskHead::sfer ? mcfg.sfer_classes : mcfg.dfer_classes;
  if (head_classes != ds.n_classes)
    throw std::invalid_argument("evaluate: head and dataset class counts differ");
  auto pred = predict_dataset(table, mcfg, ds, head, window_t, {}, n_threads);
  return report_from_pairs(ds.labels, pred, ds.n_classes);
}

// Scores one task's head on the other task's data through the shared
// encoder. The label map aligns the two vocabularies (identity by default).
template <typename S>
EvalReport cross_task_eval(const ParamTable<S>& table, const ModelConfig& mcfg, TaskHead source_head,
                           const Dataset& target, int window_t,
                           const std::vector<int>& label_map = {}, int n_threads = 1) {
  const int head_classes = source_head == TaskHead::sfer ? mcfg.sfer_classes : mcfg.dfer_classes;
  std::vector<int> map = label_map;
  if (map.empty()) {
    if (head_classes != target.n_classes)
      throw std::invalid_argument("cross_task_eval: vocabularies differ, pass a label map");
    map.resize((size_t)head_classes);
    for (int i = 0; i < head_classes; ++i) map[(size_t)i] = i;
  }
  for (int v : map)
    if (v < 0 || v >= target.n_classes)
      throw std::invalid_argument("cross_task_eval: label map leaves the target vocabulary");
  auto pred = predict_dataset(table, mcfg, target, source_head, window_t, map, n_threads);
  return report_from_pairs(target.labels, pred, target.n_classes);
}

// Pooled encoder features for every clip (task-adapted forward, eval mode).
template <typename S>
std::vector<std::vector<S>> embed_dataset(const ParamTable<S>& table, const ModelConfig& mcfg,
                                          const Dataset& ds, int n_threads = 1) {
  std::vector<std::vector<S>> emb((size_t)ds.size());
  detail::parallel_over(ds.size(), n_threads, [&](int, int lo, int hi) {
    for (int i = lo; i < hi; ++i) {
      Graph<S> g;
      auto p = bind(g, table, false);
      EncodeContext<S> ctx;
      Clip<S> clip;
      clip.t = ds.clips[(size_t)i].t;
      clip.h = ds.clips[(size_t)i].h;
      clip.w = ds.clips[(size_t)i].w;
      clip.c = ds.clips[(size_t)i].c;
      clip.data.assign(ds.clips[(size_t)i].data.begin(), ds.clips[(size_t)i].data.end());
      const auto modality = clip.t == 1 ? Modality::image : Modality::video;
      auto phi = embed_clip(g, clip, modality, p, mcfg, Stage::finetune, ctx);
      emb[(size_t)i].assign(phi.data().begin(), phi.data().end());
    }
  });
  return emb;
}

// Pairwise cosine between per-class mean embeddings of two sets. Classes with
// no members yield zero rows/columns.
template <typename S>
std::vector<std::vector<double>> class_center_similarity(
    const std::vector<std::vector<S>>& emb_a, const std::vector<int>& labels_a,
    const std::vector<std::vector<S>>& emb_b, const std::vector<int>& labels_b, int n_classes) {
  auto centers = [n_classes](const std::vector<std::vector<S>>& emb, const std::vector<int>& labels) {
    if (emb.size() != labels.size() || emb.empty())
      throw std::invalid_argument("similarity: bad embedding set");
    const size_t d = emb[0].size();
    std::vector<std::vector<double>> c((size_t)n_classes, std::vector<double>(d, 0.0));
    std::vector<int64_t> n((size_t)n_classes, 0);
    for (size_t i = 0; i < emb.size(); ++i) {
      if (emb[i].size() != d) throw std::invalid_argument("similarity: ragged embeddings");
      if (labels[i] < 0 || labels[i] >= n_classes)
        throw std::invalid_argument("similarity: label out of range");
      for (size_t j = 0; j < d; ++j) c[(size_t)labels[i]][j] += (double)emb[i][j];
      ++n[(size_t)labels[i]];
    }
    for (int k = 0; k < n_classes; ++k)
      if (n[(size_t)k] > 0)
        for (auto& v : c[(size_t)k]) v /= (double)n[(size_t)k];
    return c;
  };
  const auto ca = centers(emb_a, labels_a);
  const auto cb = centers(emb_b, labels_b);
  std::vector<std::vector<double>> sim((size_t)n_classes, std::vector<double>((size_t)n_classes, 0.0));
  for (int i = 0; i < n_classes; ++i)
    for (int j = 0; j < n_classes; ++j) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (size_t k = 0; k < ca[(size_t)i].size(); ++k) {
        dot += ca[(size_t)i][k] * cb[(size_t)j][k];
        na += ca[(size_t)i][k] * ca[(size_t)i][k];
        nb += cb[(size_t)j][k] * cb[(size_t)j][k];
      }
      const double denom = std::sqrt(na) * std::sqrt(nb);
      sim[(size_t)i][(size_t)j] = denom > 1e-30 ? dot / denom : 0.0;
    }
  return sim;
}

struct ExpertUsage {
  std::vector<int> layers;                         // encoder layers carrying experts
  std::vector<std::vector<double>> mean_weight;    // [layer][expert]
  std::vector<std::vector<int64_t>> select_count;  // [layer][expert]
  int64_t n_tokens = 0;                            // tokens routed per layer
  int top_k = 0;
};

// Routing statistics over a dataset under frozen parameters. Selection
// counts are exact integers; every token contributes exactly top_k.
template <typename S>
ExpertUsage expert_usage(const ParamTable<S>& table, const ModelConfig& mcfg, const Dataset& ds,
                         int n_threads = 1) {
  const auto mask = moae_layer_mask(mcfg.depth, mcfg.moae_layers, mcfg.moae_pos);
  ExpertUsage u;
  for (int i = 0; i < mcfg.depth; ++i)
    if (mask[(size_t)i]) u.layers.push_back(i);
  u.top_k = mcfg.top_k;
  u.mean_weight.assign(u.layers.size(), std::vector<double>((size_t)mcfg.n_experts, 0.0));
  u.select_count.assign(u.layers.size(), std::vector<int64_t>((size_t)mcfg.n_experts, 0));
  if (u.layers.empty() || ds.size() == 0) return u;

  const int workers = std::max(1, std::min(n_threads, ds.size()));
  std::vector<ExpertUsage> local((size_t)workers, u);
  detail::parallel_over(ds.size(), workers, [&](int w, int lo, int hi) {
    ExpertUsage& acc = local[(size_t)w];
    for (int i = lo; i < hi; ++i) {
      Graph<S> g;
      auto p = bind(g, table, false);
      ForwardTrace<S> trace;
      trace.want_gates = true;
      EncodeContext<S> ctx;
      ctx.trace = &trace;
      Clip<S> clip;
      clip.t = ds.clips[(size_t)i].t;
      clip.h = ds.clips[(size_t)i].h;
      clip.w = ds.clips[(size_t)i].w;
      clip.c = ds.clips[(size_t)i].c;
      clip.data.assign(ds.clips[(size_t)i].data.begin(), ds.clips[(size_t)i].data.end());
      const auto modality = clip.t == 1 ? Modality::image : Modality::video;
      (void)embed_clip(g, clip, modality, p, mcfg, Stage::finetune, ctx);
      for (const auto& [layer, decisions] : trace.gates) {
        const auto it = std::find(acc.layers.begin(), acc.layers.end(), layer);
        if (it == acc.layers.end()) throw std::logic_error("expert_usage: unexpected gate layer");
        const size_t li = (size_t)(it - acc.layers.begin());
        for (const auto& d : decisions) {
          for (size_t e = 0; e < d.weights.size(); ++e) acc.mean_weight[li][e] += d.weights[e];
          for (int e : d.selected) ++acc.select_count[li][(size_t)e];
        }
        if (layer == acc.layers[0]) acc.n_tokens += (int64_t)decisions.size();
      }
    }
  });
  for (const auto& acc : local) {
    u.n_tokens += acc.n_tokens;
    for (size_t l = 0; l < u.layers.size(); ++l)
      for (int e = 0; e < mcfg.n_experts; ++e) {
        u.mean_weight[l][(size_t)e] += acc.mean_weight[l][(size_t)e];
        u.select_count[l][(size_t)e] += acc.select_count[l][(size_t)e];
      }
  }
  if (u.n_tokens > 0)
    for (auto& row : u.mean_weight)
      for (auto& v : row) v /= (double)u.n_tokens;
  return u;
}

// Head-averaged encoder attention maps for one clip, one [n, n] grid per
// layer, using the task-adapted forward. Values are copied out of the
// forward graph.
template <typename S>
std::vector<std::pair<int, std::vector<std::vector<double>>>> attention_maps(
    const ParamTable<S>& table, const ModelConfig& mcfg, const Clip<S>& clip) {
  Graph<S> g;
  auto p = bind(g, table, false);
  ForwardTrace<S> trace;
  trace.want_attention = true;
  EncodeContext<S> ctx;
  ctx.trace = &trace;
  const auto modality = clip.t == 1 ? Modality::image : Modality::video;
  (void)embed_clip(g, clip, modality, p, mcfg, Stage::finetune, ctx);
  std::vector<std::pair<int, std::vector<std::vector<double>>>> maps;
  for (const auto& [layer, attn] : trace.attention) {
    const int n = attn.dim(0);
    std::vector<std::vector<double>> m((size_t)n, std::vector<double>((size_t)n, 0.0));
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) m[(size_t)i][(size_t)j] = (double)attn.data()[(int64_t)i * n + j];
    maps.push_back({layer, std::move(m)});
  }
  return maps;
}

inline void write_report_json(const std::filesystem::path& path, const EvalReport& rep,
                              const std::string& name) {
  nlohmann::json j;
  j["name"] = name;
  j["uar"] = rep.uar;
  j["war"] = rep.war;
  j["n_samples"] = rep.n_samples;
  j["per_class_recall"] = rep.per_class_recall;
  j["excluded_classes"] = rep.excluded;
  j["confusion"] = rep.confusion;
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("report: cannot open " + path.string());
  f << j.dump(2) << '\n';
}

inline void write_matrix_csv(const std::filesystem::path& path,
                             const std::vector<std::vector<double>>& m) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("csv: cannot open " + path.string());
  f.precision(10);
  for (const auto& row : m) {
    for (size_t j = 0; j < row.size(); ++j) f << (j ? "," : "") << row[j];
    f << '\n';
  }
}

inline void write_confusion_csv(const std::filesystem::path& path,
                                const std::vector<std::vector<int64_t>>& m) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("csv: cannot open " + path.string());
  for (const auto& row : m) {
    for (size_t j = 0; j < row.size(); ++j) f << (j ? "," : "") << row[j];
    f << '\n';
  }
}

inline void write_expert_usage_csv(const std::filesystem::path& path, const ExpertUsage& u,
                                   const std::string& dataset_name) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("csv: cannot open " + path.string());
  f.precision(10);
  f << "dataset,layer,expert,mean_weight,select_count\n";
  for (size_t l = 0; l < u.layers.size(); ++l)
    for (size_t e = 0; e < u.mean_weight[l].size(); ++e)
      f << dataset_name << ',' << u.layers[l] << ',' << e << ',' << u.mean_weight[l][e] << ','
        << u.select_count[l][e] << '\n';
}

}  // namespace s4d
