#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "s4d/config.hpp"

using namespace s4d;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove(p);
  return p;
}

}  // namespace

TEST_CASE("defaults resolve to the desk-scale model") {
  RunConfig cfg;
  const auto m = cfg.model();
  CHECK(m.width() == 64);
  CHECK(m.depth == 6);
  CHECK(m.heads == 4);
  CHECK(m.ffn_hidden == 256);
  CHECK(m.geom.tubelet_t == 2);
  CHECK(m.geom.patch_h == 8);
  CHECK(m.geom.patch_w == 8);
  CHECK(m.moae_pos == MoaePos::later);
  CHECK(m.moae_layers == 3);
  CHECK(m.n_experts == 8);
  CHECK(m.top_k == 2);
  CHECK(m.gate_sigma == 1.0);
  CHECK(m.resolved_adapter_r() == 16);
  CHECK(m.decoder_depth == 2);
  CHECK(m.decoder_width == 32);
  CHECK(m.decoder_heads == 4);

  const auto pre = cfg.stage(true);
  CHECK(pre.lr_base == "1.6e-3");
  CHECK(pre.batch_size == 32);
  CHECK(pre.epochs == 10);
  CHECK(pre.mask_ratio_video == 0.95);
  CHECK(pre.mask_ratio_image == 0.90);
  CHECK(pre.mse_denom == MseDenominator::masked_elems);

  const auto ft = cfg.stage(false);
  CHECK(ft.batch_size == 16);
  CHECK(ft.epochs == 8);
  CHECK(ft.sfer_prop == 0.5);
  CHECK(ft.hflip == false);

  const auto train = cfg.synth(true);
  CHECK(train.samples_per_class == 50);
  CHECK(train.temporal_coding);
  const auto ev = cfg.synth(false);
  CHECK(ev.samples_per_class == 25);
}

TEST_CASE("set_config_key touches the right field and rejects junk") {
  RunConfig cfg;
  set_config_key(cfg, "model.width", "128");
  CHECK(cfg.width == 128);
  set_config_key(cfg, "model.moae_pos", "alternate");
  CHECK(cfg.moae_pos == "alternate");
  set_config_key(cfg, "finetune.sfer_prop", "0.25");
  CHECK(cfg.sfer_prop == 0.25);
  set_config_key(cfg, "finetune.hflip", "true");
  CHECK(cfg.hflip);
  set_config_key(cfg, "finetune.hflip", "0");
  CHECK(!cfg.hflip);
  set_config_key(cfg, "run.seed", "12345678901234567890");
  CHECK(cfg.seed == 12345678901234567890ull);
  set_config_key(cfg, "run.out_dir", "/tmp/x");
  CHECK(cfg.out_dir == "/tmp/x");

  CHECK_THROWS_AS(set_config_key(cfg, "model.widht", "64"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_key(cfg, "nonsense", "1"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_key(cfg, "model.width", "64x"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_key(cfg, "finetune.hflip", "maybe"), std::invalid_argument);
  CHECK_THROWS_AS(set_config_key(cfg, "data.noise", "lots"), std::invalid_argument);
}

TEST_CASE("config file round trip: apply, echo, re-apply gives identical echo") {
  RunConfig cfg;
  const auto in = temp_file("s4d_cfg_in.txt");
  {
    std::ofstream f(in);
    f << "# comment line\n";
    f << "\n";
    f << "model.depth = 4\n";
    f << "model.moae_layers=2\n";
    f << "data.noise = 0.125\n";
    f << "run.seed=42\n";
  }
  apply_config_file(cfg, in);
  CHECK(cfg.depth == 4);
  CHECK(cfg.moae_layers == 2);
  CHECK(cfg.noise == 0.125);
  CHECK(cfg.seed == 42);

  const auto echo1 = temp_file("s4d_cfg_echo1.txt");
  write_config_echo(cfg, echo1);

  RunConfig cfg2;
  apply_config_file(cfg2, echo1);
  const auto echo2 = temp_file("s4d_cfg_echo2.txt");
  write_config_echo(cfg2, echo2);

  std::ifstream a(echo1), b(echo2);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  CHECK(sa.str() == sb.str());
  CHECK(sa.str().find("model.depth=4") != std::string::npos);
  CHECK(sa.str().find("run.seed=42") != std::string::npos);

  // echo is sorted by key
  std::istringstream lines(sa.str());
  std::string prev, line;
  while (std::getline(lines, line)) {
    const auto key = line.substr(0, line.find('='));
    CHECK(prev < key);
    prev = key;
  }

  fs::remove(in);
  fs::remove(echo1);
  fs::remove(echo2);
}

TEST_CASE("malformed config files are rejected") {
  RunConfig cfg;
  const auto in = temp_file("s4d_cfg_bad.txt");
  {
    std::ofstream f(in);
    f << "model.depth 4\n";
  }
  CHECK_THROWS_AS(apply_config_file(cfg, in), std::invalid_argument);
  {
    std::ofstream f(in, std::ios::trunc);
    f << "model.unknown=1\n";
  }
  CHECK_THROWS_AS(apply_config_file(cfg, in), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_file(cfg, temp_file("s4d_cfg_missing.txt")),
                  std::runtime_error);
  fs::remove(in);
}

TEST_CASE("baseline flag strips expert layers, conflict pairs drive class counts") {
  RunConfig cfg;
  cfg.baseline_mtl = true;
  CHECK(cfg.model().moae_layers == 0);
  cfg.baseline_mtl = false;
  CHECK(cfg.model().moae_layers == 3);

  set_config_key(cfg, "pretrain.mse_denom", "visible");
  CHECK(cfg.stage(true).mse_denom == MseDenominator::visible_elems);
  set_config_key(cfg, "pretrain.mse_denom", "bogus");
  CHECK_THROWS_AS(cfg.stage(true), std::invalid_argument);
}
