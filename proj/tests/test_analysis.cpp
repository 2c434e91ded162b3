#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "s4d/analysis.hpp"

using namespace s4d;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.geom = PatchGeometry{2, 2, 2, 16};
  cfg.depth = 2;
  cfg.heads = 2;
  cfg.ffn_hidden = 16;
  cfg.moae_pos = MoaePos::later;
  cfg.moae_layers = 1;
  cfg.n_experts = 3;
  cfg.top_k = 2;
  cfg.gate_sigma = 0.0;
  cfg.adapter_r = 4;
  cfg.decoder_depth = 1;
  cfg.decoder_width = 16;
  cfg.decoder_heads = 2;
  cfg.sfer_classes = 3;
  cfg.dfer_classes = 3;
  return cfg;
}

SynthSpec tiny_data() {
  SynthSpec s;
  s.n_classes = 3;
  s.samples_per_class = 4;
  s.image_h = 8;
  s.image_w = 8;
  s.channels = 3;
  s.clip_t = 4;
  s.noise = 0.03;
  s.temporal_coding = false;
  s.seed = 3;
  return s;
}

// Independent recomputation of both metrics from raw (label, prediction)
// pairs, sharing no code with the implementation under test.
std::pair<double, double> brute_force_metrics(const std::vector<int>& truth,
                                              const std::vector<int>& pred, int n_classes) {
  double recall_sum = 0.0;
  int classes_seen = 0;
  int64_t hits = 0;
  for (int c = 0; c < n_classes; ++c) {
    int64_t support = 0, correct = 0;
    for (size_t i = 0; i < truth.size(); ++i) {
      if (truth[i] != c) continue;
      ++support;
      correct += pred[i] == c ? 1 : 0;
    }
    hits += correct;
    if (support > 0) {
      recall_sum += (double)correct / (double)support;
      ++classes_seen;
    }
  }
  return {recall_sum / classes_seen, (double)hits / (double)truth.size()};
}

}  // namespace

TEST_CASE("recall metrics reproduce the worked example") {
  const auto m = uar_war({{9, 1}, {3, 1}});
  CHECK(m.uar == doctest::Approx(0.575).epsilon(1e-12));
  CHECK(m.war == doctest::Approx(10.0 / 14.0).epsilon(1e-12));
  CHECK(m.per_class_recall[0] == doctest::Approx(0.9));
  CHECK(m.per_class_recall[1] == doctest::Approx(0.25));
  CHECK(m.excluded.empty());
}

TEST_CASE("recall metric edge cases") {
  SUBCASE("identity confusion is perfect") {
    const auto m = uar_war({{5, 0, 0}, {0, 7, 0}, {0, 0, 2}});
    CHECK(m.uar == 1.0);
    CHECK(m.war == 1.0);
  }
  SUBCASE("zero-support classes are excluded and flagged") {
    const auto m = uar_war({{4, 0, 0}, {0, 0, 0}, {1, 0, 3}});
    CHECK(m.excluded == std::vector<int>{1});
    CHECK(m.uar == doctest::Approx((1.0 + 0.75) / 2.0).epsilon(1e-12));
    CHECK(m.per_class_recall[1] == 0.0);
  }
  SUBCASE("balanced classes make the two metrics coincide") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 2 + (int)(rng() % 4), per = 20;
      std::vector<std::vector<int64_t>> m((size_t)n, std::vector<int64_t>((size_t)n, 0));
      for (int c = 0; c < n; ++c) {
        int left = per;
        for (int j = 0; j < n - 1; ++j) {
          const int v = (int)(rng() % (uint64_t)(left + 1));
          m[(size_t)c][(size_t)j] = v;
          left -= v;
        }
        m[(size_t)c][(size_t)n - 1] = left;
      }
      const auto r = uar_war(m);
      CHECK(r.uar == doctest::Approx(r.war).epsilon(1e-12));
    }
  }
  SUBCASE("contract checks") {
    CHECK_THROWS(uar_war({}));
    CHECK_THROWS(uar_war({{1, 2}, {3}}));
    CHECK_THROWS(uar_war({{0, 0}, {0, 0}}));
    CHECK_THROWS(uar_war({{-1, 2}, {0, 1}}));
  }
}

TEST_CASE("metrics agree with brute-force recomputation on 1000 random cases") {
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n_classes = 2 + (int)(rng() % 5);
    const int n = 10 + (int)(rng() % 200);
    std::vector<int> truth((size_t)n), pred((size_t)n);
    for (int i = 0; i < n; ++i) {
      truth[(size_t)i] = (int)(rng() % (uint64_t)n_classes);
      pred[(size_t)i] = (int)(rng() % (uint64_t)n_classes);
    }
    const auto rep = report_from_pairs(truth, pred, n_classes);
    const auto [uar_ref, war_ref] = brute_force_metrics(truth, pred, n_classes);
    // Overall accuracy is a ratio of the same two integers on both sides.
    CHECK(rep.war == war_ref);
    CHECK(std::abs(rep.uar - uar_ref) < 1e-12);
    int64_t total = 0;
    for (const auto& row : rep.confusion)
      for (int64_t v : row) total += v;
    CHECK(total == rep.n_samples);
  }
}

TEST_CASE("dataset evaluation is exact, parallel-stable, and permutation-equivariant") {
  auto cfg = tiny_cfg();
  auto spec = tiny_data();
  ParamTable<float> table;
  init_params(table, cfg, 3, Stage::finetune, 17);
  auto ds = gen_dynamic(spec);

  const auto rep1 = evaluate(table, cfg, ds, TaskHead::dfer, spec.clip_t, 1);
  CHECK(rep1.n_samples == ds.size());

  SUBCASE("thread count does not change the confusion matrix") {
    const auto rep3 = evaluate(table, cfg, ds, TaskHead::dfer, spec.clip_t, 3);
    CHECK(rep3.confusion == rep1.confusion);
    CHECK(rep3.war == rep1.war);
  }

  SUBCASE("same-task evaluation equals cross-task with the identity map") {
    const auto cross = cross_task_eval(table, cfg, TaskHead::dfer, ds, spec.clip_t);
    CHECK(cross.confusion == rep1.confusion);
  }

  SUBCASE("label-map permutation permutes predictions consistently") {
    // Relabel the dataset with a permutation and map head outputs through it:
    // the confusion matrix must be the row/column permutation of the original.
    const std::vector<int> perm{2, 0, 1};
    Dataset relabeled = ds;
    for (auto& l : relabeled.labels) l = perm[(size_t)l];
    const auto mapped = cross_task_eval(table, cfg, TaskHead::dfer, relabeled, spec.clip_t, perm);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        CHECK(mapped.confusion[(size_t)perm[(size_t)i]][(size_t)perm[(size_t)j]] ==
              rep1.confusion[(size_t)i][(size_t)j]);
    CHECK(mapped.war == doctest::Approx(rep1.war).epsilon(1e-12));
  }

  SUBCASE("contract checks") {
    ModelConfig wrong = cfg;
    wrong.dfer_classes = 5;
    ParamTable<float> t2;
    init_params(t2, wrong, 3, Stage::finetune, 17);
    CHECK_THROWS(evaluate(t2, wrong, ds, TaskHead::dfer, spec.clip_t, 1));
    CHECK_THROWS(cross_task_eval(t2, wrong, TaskHead::dfer, ds, spec.clip_t));
    CHECK_THROWS(cross_task_eval(t2, wrong, TaskHead::dfer, ds, spec.clip_t, {0, 1, 2, 3, 9}));
  }
}

TEST_CASE("class centers: unit diagonal, oracle agreement, orthogonal case") {
  SUBCASE("identical sets give an exactly unit diagonal") {
    std::mt19937_64 rng(5);
    std::vector<std::vector<float>> emb;
    std::vector<int> labels;
    for (int i = 0; i < 30; ++i) {
      std::vector<float> v(8);
      for (auto& x : v) x = (float)((double)rng() / (double)UINT64_MAX - 0.5);
      emb.push_back(v);
      labels.push_back(i % 3);
    }
    const auto sim = class_center_similarity(emb, labels, emb, labels, 3);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(sim[(size_t)c][(size_t)c] - 1.0) <= 1e-6);

    SUBCASE("entries match a naive double-loop oracle") {
      // Recompute centers and cosines from scratch.
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
          std::vector<double> ci(8, 0.0), cj(8, 0.0);
          int ni = 0, nj = 0;
          for (size_t s = 0; s < emb.size(); ++s) {
            if (labels[s] == i) {
              for (int k = 0; k < 8; ++k) ci[(size_t)k] += emb[s][(size_t)k];
              ++ni;
            }
            if (labels[s] == j) {
              for (int k = 0; k < 8; ++k) cj[(size_t)k] += emb[s][(size_t)k];
              ++nj;
            }
          }
          double dot = 0, na = 0, nb = 0;
          for (int k = 0; k < 8; ++k) {
            const double a = ci[(size_t)k] / ni, b = cj[(size_t)k] / nj;
            dot += a * b;
            na += a * a;
            nb += b * b;
          }
          CHECK(std::abs(sim[(size_t)i][(size_t)j] - dot / std::sqrt(na * nb)) < 1e-6);
        }
    }
  }

  SUBCASE("orthogonal centers have zero off-diagonal") {
    std::vector<std::vector<float>> a{{1, 0, 0, 0}, {0, 2, 0, 0}};
    std::vector<int> la{0, 1};
    const auto sim = class_center_similarity(a, la, a, la, 2);
    CHECK(sim[0][1] == doctest::Approx(0.0));
    CHECK(sim[0][0] == doctest::Approx(1.0));
  }

  SUBCASE("model embeddings separate synthetic classes on the diagonal") {
    auto cfg = tiny_cfg();
    auto spec = tiny_data();
    ParamTable<float> table;
    init_params(table, cfg, 3, Stage::finetune, 23);
    auto ds = gen_static(spec);
    auto emb = embed_dataset(table, cfg, ds, 2);
    REQUIRE((int)emb.size() == ds.size());
    const auto sim = class_center_similarity(emb, ds.labels, emb, ds.labels, 3);
    for (int c = 0; c < 3; ++c) CHECK(std::abs(sim[(size_t)c][(size_t)c] - 1.0) <= 1e-6);
  }
}

TEST_CASE("expert usage accounting is exact") {
  auto cfg = tiny_cfg();
  auto spec = tiny_data();
  spec.samples_per_class = 3;
  ParamTable<float> table;
  init_params(table, cfg, 3, Stage::finetune, 29);
  auto ds = gen_dynamic(spec);

  const auto u = expert_usage(table, cfg, ds, 1);
  REQUIRE(u.layers.size() == 1);
  CHECK(u.layers[0] == 1);  // the later half of a depth-2 encoder
  // Every clip contributes (4/2)*(8/2)*(8/2) = 32 tokens.
  CHECK(u.n_tokens == (int64_t)ds.size() * 32);

  SUBCASE("selection counts sum to n_tokens * k per layer") {
    int64_t total = 0;
    for (int64_t c : u.select_count[0]) total += c;
    CHECK(total == u.n_tokens * cfg.top_k);
  }

  SUBCASE("mean gate weights sum to one per layer") {
    double s = 0.0;
    for (double w : u.mean_weight[0]) s += w;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));  // weights are f32, sums carry f32 rounding
  }

  SUBCASE("identical datasets produce identical usage under frozen params") {
    const auto v = expert_usage(table, cfg, ds, 1);
    CHECK(v.select_count == u.select_count);
    CHECK(v.mean_weight == u.mean_weight);
  }

  SUBCASE("thread count preserves the exact counts") {
    const auto v = expert_usage(table, cfg, ds, 3);
    CHECK(v.select_count == u.select_count);
    CHECK(v.n_tokens == u.n_tokens);
  }
}

TEST_CASE("attention maps are square rows summing to one") {
  auto cfg = tiny_cfg();
  auto spec = tiny_data();
  spec.samples_per_class = 1;
  ParamTable<float> table;
  init_params(table, cfg, 3, Stage::finetune, 31);
  auto ds = gen_dynamic(spec);

  const auto maps = attention_maps(table, cfg, ds.clips[0]);
  REQUIRE(maps.size() == 2);  // one per encoder layer
  for (const auto& [layer, m] : maps) {
    CHECK(layer >= 0);
    REQUIRE(m.size() == 32);
    for (const auto& row : m) {
      REQUIRE(row.size() == 32);
      double s = 0.0;
      for (double v : row) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("exports land as parseable files") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "s4d_analysis_export";
  fs::remove_all(dir);
  fs::create_directories(dir);

  EvalReport rep = report_from_pairs({0, 1, 1, 0}, {0, 1, 0, 0}, 2);
  write_report_json(dir / "report.json", rep, "probe");
  std::ifstream f(dir / "report.json");
  nlohmann::json j;
  f >> j;
  CHECK(j["war"] == doctest::Approx(0.75));
  CHECK(j["confusion"][0][0] == 2);

  write_confusion_csv(dir / "confusion.csv", rep.confusion);
  write_matrix_csv(dir / "sim.csv", {{1.0, 0.5}, {0.25, 1.0}});
  ExpertUsage u;
  u.layers = {1};
  u.mean_weight = {{0.5, 0.5}};
  u.select_count = {{10, 10}};
  write_expert_usage_csv(dir / "usage.csv", u, "probe");
  std::ifstream uf(dir / "usage.csv");
  std::string header, row;
  std::getline(uf, header);
  std::getline(uf, row);
  CHECK(header == "dataset,layer,expert,mean_weight,select_count");
  CHECK(row == "probe,1,0,0.5,10");

  fs::remove_all(dir);
}
