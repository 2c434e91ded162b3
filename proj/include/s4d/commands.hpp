#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "s4d/analysis.hpp"
#include "s4d/checkpoint.hpp"
#include "s4d/config.hpp"
#include "s4d/gradsuite.hpp"
#include "s4d/synthdata.hpp"
#include "s4d/training.hpp"

// Command implementations behind the CLI. Every run writes its resolved
// configuration next to its outputs, and all randomness folds out of the one
// run seed, so repeating a command reproduces its artifacts byte for byte.

namespace s4d {

namespace detail {

inline uint64_t stage_seed(uint64_t seed, uint64_t tag, uint64_t epoch) {
  return fold_seed(fold_seed(seed, tag), epoch);
}

inline double ms_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

struct LoadedPair {
  Dataset sfer, dfer;
};

inline LoadedPair load_pair(const RunConfig& cfg, const std::string& split) {
  return {load_dataset(cfg.data_dir, "sfer", split), load_dataset(cfg.data_dir, "dfer", split)};
}

// Per-sample coin flip; a mirrored copy replaces the original for this step.
inline const Clip<float>* maybe_flip(const Clip<float>& clip, bool enabled, Rng& rng,
                                     std::vector<Clip<float>>& storage) {
  if (!enabled || rng.uniform() >= 0.5) return &clip;
  storage.push_back(hflip_clip(clip));
  return &storage.back();
}

}  // namespace detail

inline void cmd_synth(const RunConfig& cfg) {
  std::filesystem::create_directories(cfg.data_dir);
  struct SplitDef {
    const char* name;
    int per_class;
    uint64_t tag;
  };
  const SplitDef splits[] = {{"train", cfg.train_per_class, 101},
                             {"val", cfg.eval_per_class, 102},
                             {"test", cfg.eval_per_class, 103}};

  std::vector<Dataset> store;
  store.reserve(6);
  for (const auto& sp : splits) {
    SynthSpec s = cfg.synth(true);
    s.samples_per_class = sp.per_class;
    s.seed = fold_seed(cfg.seed, sp.tag);
    if (cfg.conflict) {
      auto [sf, df] = gen_conflict_pair(s);
      store.push_back(std::move(sf));
      store.push_back(std::move(df));
    } else {
      store.push_back(gen_static(s));
      store.push_back(gen_dynamic(s));
    }
  }
  std::vector<DatasetEntry> entries;
  for (size_t i = 0; i < 3; ++i) {
    entries.push_back({"sfer", splits[i].name, &store[2 * i]});
    entries.push_back({"dfer", splits[i].name, &store[2 * i + 1]});
  }
  save_datasets(cfg.data_dir, entries);

  int total = 0;
  for (const auto& d : store) total += d.size();
  std::cout << "synth: wrote " << total << " samples (" << store[0].n_classes
            << " image classes, " << store[1].n_classes << " clip classes"
            << (cfg.conflict ? ", conflict pair" : "") << ") to " << cfg.data_dir << "\n";
}

inline void cmd_pretrain(const RunConfig& cfg) {
  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  write_config_echo(cfg, out / "config.txt");
  const auto mcfg = cfg.model();
  const auto tcfg = cfg.stage(true);
  auto [sfer, dfer] = detail::load_pair(cfg, "train");

  ParamTable<float> table;
  init_params(table, mcfg, cfg.channels, Stage::pretrain, cfg.seed);

  const int per_epoch =
      (int)epoch_schedule(sfer.size(), dfer.size(), 1.0, tcfg.batch_size, 0).size();
  if (per_epoch == 0)
    throw std::runtime_error("pretrain: batch size exceeds both training sets, no full batch fits");
  const int64_t total = (int64_t)per_epoch * tcfg.epochs;
  const int64_t warmup = (int64_t)std::llround(tcfg.warmup_frac * (double)total);
  const double peak = compute_lr(tcfg.lr_base, tcfg.batch_size);
  std::cout << "pretrain: " << table.total_values() << " parameter values, " << sfer.size()
            << " images + " << dfer.size() << " clips, " << total << " steps, peak lr " << peak
            << "\n";

  MetricsLog log(out / "metrics_pretrain.jsonl", out / "timing_pretrain.csv");
  int64_t t = 0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto sched = epoch_schedule(sfer.size(), dfer.size(), 1.0, tcfg.batch_size,
                                      fold_seed(cfg.seed, (uint64_t)epoch));
    Rng mask_rng(detail::stage_seed(cfg.seed, 0x6a5cu, (uint64_t)epoch));
    Rng train_rng(detail::stage_seed(cfg.seed, 0x7a17u, (uint64_t)epoch));
    double loss_sum = 0.0;
    for (const auto& src : sched) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr = lr_at(t, total, warmup, peak);
      Graph<float> g;
      auto xs = bind_ordered(g, table);
      auto p = bind_tensors(table, xs);
      EncodeContext<float> ctx;
      ctx.train = true;
      ctx.rng = &train_rng;
      ctx.dropout = cfg.dropout;
      const Dataset& ds = src.alpha == 0 ? sfer : dfer;
      std::vector<const Clip<float>*> clips;
      clips.reserve(src.indices.size());
      for (int i : src.indices) clips.push_back(&ds.clips[(size_t)i]);
      auto loss = pretrain_batch_loss(g, p, mcfg, tcfg, clips,
                                      src.alpha == 0 ? Modality::image : Modality::video, ctx,
                                      mask_rng);
      g.backward(loss);
      require_finite_loss((double)loss.item(), t, table, xs);
      ++t;
      adamw_update(table, xs, t, lr, tcfg);
      loss_sum += (double)loss.item();
      log.step("pretrain", epoch, t, src.alpha == 0 ? "sfer" : "dfer", (double)loss.item(), lr,
               detail::ms_since(t0));
    }
    save_checkpoint(out / ("pretrain_epoch" + std::to_string(epoch) + ".ckpt"), table);
    std::cout << "pretrain epoch " << epoch << ": mean loss " << loss_sum / (double)sched.size()
              << "\n";
  }
  save_checkpoint(out / "pretrain.ckpt", table);
  std::cout << "pretrain: saved " << (out / "pretrain.ckpt").string() << "\n";
}

inline void cmd_finetune(const RunConfig& cfg) {
  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  write_config_echo(cfg, out / "config.txt");
  const auto mcfg = cfg.model();
  const auto tcfg = cfg.stage(false);
  auto [sfer, dfer] = detail::load_pair(cfg, "train");
  auto [sfer_val, dfer_val] = detail::load_pair(cfg, "val");

  ParamTable<float> table;
  init_params(table, mcfg, cfg.channels, Stage::finetune, cfg.seed);
  if (!cfg.no_pretrain) {
    const std::filesystem::path ck =
        cfg.checkpoint.empty() ? out / "pretrain.ckpt" : std::filesystem::path(cfg.checkpoint);
    const auto rep = load_checkpoint(ck, table, /*allow_partial=*/true);
    std::cout << "finetune: initialized " << rep.loaded.size() << " tensors from " << ck.string()
              << " (" << rep.missing.size() << " fresh, " << rep.extra.size()
              << " file-only)\n";
  } else {
    std::cout << "finetune: training from scratch\n";
  }

  const int per_epoch = (int)epoch_schedule(sfer.size(), dfer.size(), tcfg.sfer_prop,
                                            tcfg.batch_size, 0)
                            .size();
  if (per_epoch == 0)
    throw std::runtime_error("finetune: batch size exceeds both training sets, no full batch fits");
  const int64_t total = (int64_t)per_epoch * tcfg.epochs;
  const int64_t warmup = (int64_t)std::llround(tcfg.warmup_frac * (double)total);
  const double peak = compute_lr(tcfg.lr_base, tcfg.batch_size);
  std::cout << "finetune: " << table.total_values() << " parameter values, " << total
            << " steps, peak lr " << peak << "\n";

  MetricsLog log(out / "metrics_finetune.jsonl", out / "timing_finetune.csv");
  int64_t t = 0;
  double best_war = -1.0;
  for (int epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto sched = epoch_schedule(sfer.size(), dfer.size(), tcfg.sfer_prop, tcfg.batch_size,
                                      fold_seed(cfg.seed, (uint64_t)epoch));
    Rng train_rng(detail::stage_seed(cfg.seed, 0xf17eu, (uint64_t)epoch));
    Rng aug_rng(detail::stage_seed(cfg.seed, 0xaf11u, (uint64_t)epoch));
    double loss_sum = 0.0;
    for (const auto& src : sched) {
      const auto t0 = std::chrono::steady_clock::now();
      const double lr = lr_at(t, total, warmup, peak);
      Graph<float> g;
      auto xs = bind_ordered(g, table);
      auto p = bind_tensors(table, xs);
      EncodeContext<float> ctx;
      ctx.train = true;
      ctx.rng = &train_rng;
      ctx.dropout = cfg.dropout;
      const Dataset& ds = src.alpha == 0 ? sfer : dfer;
      std::vector<Clip<float>> flipped;
      flipped.reserve(src.indices.size());
      std::vector<const Clip<float>*> clips;
      std::vector<int> labels;
      clips.reserve(src.indices.size());
      labels.reserve(src.indices.size());
      for (int i : src.indices) {
        clips.push_back(detail::maybe_flip(ds.clips[(size_t)i], tcfg.hflip, aug_rng, flipped));
        labels.push_back(ds.labels[(size_t)i]);
      }
      auto loss = finetune_batch_loss(g, p, mcfg, tcfg, clips, labels, src.alpha, ctx);
      g.backward(loss);
      require_finite_loss((double)loss.item(), t, table, xs);
      ++t;
      adamw_update(table, xs, t, lr, tcfg);
      loss_sum += (double)loss.item();
      log.step("finetune", epoch, t, src.alpha == 0 ? "sfer" : "dfer", (double)loss.item(), lr,
               detail::ms_since(t0));
    }

    const auto rs = evaluate(table, mcfg, sfer_val, TaskHead::sfer, cfg.clip_t, cfg.threads);
    const auto rd = evaluate(table, mcfg, dfer_val, TaskHead::dfer, cfg.clip_t, cfg.threads);
    write_report_json(out / ("eval_epoch" + std::to_string(epoch) + "_sfer.json"), rs,
                      "sfer_val_epoch" + std::to_string(epoch));
    write_report_json(out / ("eval_epoch" + std::to_string(epoch) + "_dfer.json"), rd,
                      "dfer_val_epoch" + std::to_string(epoch));
    save_checkpoint(out / ("finetune_epoch" + std::to_string(epoch) + ".ckpt"), table);
    if (rs.war + rd.war > best_war) {
      best_war = rs.war + rd.war;
      save_checkpoint(out / "best.ckpt", table);
    }
    std::cout << "finetune epoch " << epoch << ": mean loss "
              << loss_sum / (double)sched.size() << ", val sfer war " << rs.war
              << ", val dfer war " << rd.war << "\n";
  }
  save_checkpoint(out / "finetune.ckpt", table);
  std::cout << "finetune: saved " << (out / "finetune.ckpt").string() << " and best.ckpt\n";
}

namespace detail {

inline ParamTable<float> load_finetuned(const RunConfig& cfg) {
  ParamTable<float> table;
  init_params(table, cfg.model(), cfg.channels, Stage::finetune, cfg.seed);
  const std::filesystem::path ck = cfg.checkpoint.empty()
                                       ? std::filesystem::path(cfg.out_dir) / "best.ckpt"
                                       : std::filesystem::path(cfg.checkpoint);
  load_checkpoint(ck, table, /*allow_partial=*/false);
  std::cout << "loaded " << ck.string() << "\n";
  return table;
}

}  // namespace detail

inline void cmd_eval(const RunConfig& cfg) {
  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  const auto mcfg = cfg.model();
  const auto table = detail::load_finetuned(cfg);
  auto [sfer_test, dfer_test] = detail::load_pair(cfg, "test");

  const auto rs = evaluate(table, mcfg, sfer_test, TaskHead::sfer, cfg.clip_t, cfg.threads);
  const auto rd = evaluate(table, mcfg, dfer_test, TaskHead::dfer, cfg.clip_t, cfg.threads);
  write_report_json(out / "eval_sfer_test.json", rs, "sfer_test");
  write_report_json(out / "eval_dfer_test.json", rd, "dfer_test");
  write_confusion_csv(out / "confusion_sfer_test.csv", rs.confusion);
  write_confusion_csv(out / "confusion_dfer_test.csv", rd.confusion);
  std::cout << "eval sfer test: uar " << rs.uar << " war " << rs.war << "\n";
  std::cout << "eval dfer test: uar " << rd.uar << " war " << rd.war << "\n";

  if (mcfg.sfer_classes == mcfg.dfer_classes) {
    const auto cs = cross_task_eval(table, mcfg, TaskHead::sfer, dfer_test, cfg.clip_t, {},
                                    cfg.threads);
    const auto cd = cross_task_eval(table, mcfg, TaskHead::dfer, sfer_test, cfg.clip_t, {},
                                    cfg.threads);
    write_report_json(out / "cross_sfer_head_on_dfer.json", cs, "sfer_head_on_dfer_test");
    write_report_json(out / "cross_dfer_head_on_sfer.json", cd, "dfer_head_on_sfer_test");
    write_confusion_csv(out / "confusion_cross_sfer_head.csv", cs.confusion);
    write_confusion_csv(out / "confusion_cross_dfer_head.csv", cd.confusion);
    std::cout << "cross sfer head on dfer: uar " << cs.uar << " war " << cs.war << "\n";
    std::cout << "cross dfer head on sfer: uar " << cd.uar << " war " << cd.war << "\n";
  } else {
    std::cout << "cross-task skipped: head vocabularies differ\n";
  }
}

inline void cmd_analyze(const RunConfig& cfg) {
  const std::filesystem::path out = cfg.out_dir;
  std::filesystem::create_directories(out);
  const auto mcfg = cfg.model();
  const auto table = detail::load_finetuned(cfg);
  auto [sfer_test, dfer_test] = detail::load_pair(cfg, "test");

  const auto emb_s = embed_dataset(table, mcfg, sfer_test, cfg.threads);
  const auto emb_d = embed_dataset(table, mcfg, dfer_test, cfg.threads);
  write_matrix_csv(out / "center_similarity_sfer.csv",
                   class_center_similarity(emb_s, sfer_test.labels, emb_s, sfer_test.labels,
                                           sfer_test.n_classes));
  write_matrix_csv(out / "center_similarity_dfer.csv",
                   class_center_similarity(emb_d, dfer_test.labels, emb_d, dfer_test.labels,
                                           dfer_test.n_classes));
  if (sfer_test.n_classes == dfer_test.n_classes)
    write_matrix_csv(out / "center_similarity_cross.csv",
                     class_center_similarity(emb_s, sfer_test.labels, emb_d, dfer_test.labels,
                                             sfer_test.n_classes));

  const auto us = expert_usage(table, mcfg, sfer_test, cfg.threads);
  const auto ud = expert_usage(table, mcfg, dfer_test, cfg.threads);
  write_expert_usage_csv(out / "expert_usage_sfer.csv", us, "sfer_test");
  write_expert_usage_csv(out / "expert_usage_dfer.csv", ud, "dfer_test");

  for (const auto& [task, ds] : {std::pair<const char*, const Dataset*>{"sfer", &sfer_test},
                                 {"dfer", &dfer_test}}) {
    if (ds->size() == 0) continue;
    Clip<float> clip = ds->clips[0];
    for (const auto& [layer, m] : attention_maps(table, mcfg, clip))
      write_matrix_csv(out / ("attention_" + std::string(task) + "_l" + std::to_string(layer) +
                              ".csv"),
                       m);
  }

  std::cout << "analyze: similarity, routing, and attention tables in " << out.string() << "\n";
  for (size_t l = 0; l < us.layers.size(); ++l) {
    std::cout << "  layer " << us.layers[l] << " image-task selections:";
    for (auto c : us.select_count[l]) std::cout << ' ' << c;
    std::cout << "\n";
  }
}

inline int cmd_gradcheck() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = run_gradient_suite();
  size_t width = 0;
  for (const auto& c : results) width = std::max(width, c.name.size());
  bool ok = true;
  for (const auto& c : results) {
    std::cout << c.name << std::string(width - c.name.size() + 2, ' ') << "max rel err "
              << c.max_rel_err << "  (tol " << c.tol << ")  " << (c.pass ? "pass" : "FAIL")
              << "\n";
    ok = ok && c.pass;
  }
  std::cout << results.size() << " checks in " << detail::ms_since(t0) / 1000.0 << " s: "
            << (ok ? "all passed" : "FAILURES PRESENT") << "\n";
  return ok ? 0 : 1;
}

}  // namespace s4d
