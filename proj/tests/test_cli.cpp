#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "robustit/cli.hpp"
#include "robustit/io.hpp"
#include "robustit/pipeline.hpp"

using namespace rit;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("robustit_test_cli_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// A small but complete experiment so each command finishes in about a second.
json tiny(const fs::path& root) {
  return {{"out", (root / "run").string()},
          {"data_dir", (root / "data").string()},
          {"attack", "badnet"},
          {"mode", "robustit"},
          {"model", {{"hidden", 64}}},
          {"data", {{"n_train", 200}, {"n_eval", 20}}},
          {"poison", {{"rate", 0.05}}},
          {"train", {{"epochs", 1}}}};
}

std::string write_config(const fs::path& dir, const json& j) {
  const auto p = (dir / "config.json").string();
  std::ofstream(p) << j.dump(2);
  return p;
}

struct CliRun {
  int code;
  std::string out, err;
};

CliRun cli(std::vector<std::string> args) {
  args.insert(args.begin(), "robustit");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::string cell;
    bool quoted = false;
    for (char c : line) {
      if (c == '"') quoted = !quoted;
      else if (c == ',' && !quoted) {
        cells.push_back(cell);
        cell.clear();
      } else cell += c;
    }
    cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("a minimal config resolves every default") {
  const auto cfg = config_from_json({{"attack", "blended"}, {"mode", "robustit"}});
  CHECK_NOTHROW(cfg.validate());
  CHECK(cfg.poison.attack == Attack::blended);
  CHECK(cfg.train.mode == Mode::robustit);
  CHECK(cfg.data.n_train == 10000u);
  CHECK(cfg.train.batch_size == 16);
  CHECK(cfg.train.epochs == 3);
  CHECK(cfg.poison.rate == 0.01);
  const auto j = to_json(cfg);
  CHECK(j["defense"]["alpha"] == 2.0);
  CHECK(j["defense"]["gamma"] == 0.5);
  CHECK(j["defense"]["beta"] == 0.9);
  CHECK(j["model"]["bands"].size() == 3u);
  // The resolved config round-trips.
  CHECK(to_json(config_from_json(j)) == j);
}

TEST_CASE("config errors exit with status 1") {
  const auto dir = scratch("errors");
  auto j = tiny(dir);
  j["train"]["lrr"] = 0.1;
  auto r = cli({"train", "--config", write_config(dir, j)});
  CHECK(r.code == kExitConfig);
  CHECK(r.err.find("train.lrr") != std::string::npos);

  j = tiny(dir);
  j["data"]["n_train"] = 0;
  CHECK(cli({"generate", "--config", write_config(dir, j)}).code == kExitConfig);

  j = tiny(dir);
  j["attack"] = "wanet";
  r = cli({"poison", "--config", write_config(dir, j)});
  CHECK(r.code == kExitConfig);
  for (const auto& n : attack_names()) CHECK(r.err.find(n) != std::string::npos);

  j = tiny(dir);
  j["poison"]["rate"] = 0.2;
  CHECK(cli({"poison", "--config", write_config(dir, j)}).code == kExitConfig);

  CHECK(cli({"train", "--config", (dir / "missing.json").string()}).code == kExitConfig);
  CHECK(cli({}).code == kExitConfig);
  CHECK(cli({"fly"}).code == kExitConfig);

  j = tiny(dir);
  j["sweep"] = json::object();
  CHECK(cli({"ablate", "--config", write_config(dir, j)}).code == kExitConfig);
  CHECK_THROWS_AS(expand_sweep(config_from_json(tiny(dir))), ConfigError);
}

TEST_CASE("generate is reproducible across output directories") {
  const auto d1 = scratch("gen1"), d2 = scratch("gen2");
  auto c1 = config_from_json(tiny(d1)), c2 = config_from_json(tiny(d2));
  const auto g1 = cmd_generate(c1), g2 = cmd_generate(c2);
  CHECK(g1.train_crc == g2.train_crc);
  CHECK(g1.eval_crc == g2.eval_crc);
  CHECK(slurp(clean_stem(c1, "train") + ".bin") == slurp(clean_stem(c2, "train") + ".bin"));
  CHECK(load_dataset(clean_stem(c1, "train"), c1.model).samples.size() == 200u);
  c2.seed = 1;
  CHECK(cmd_generate(c2).train_crc != g1.train_crc);

  // CLI path, with the seed flag.
  const auto r = cli({"generate", "--config", write_config(d1, tiny(d1)), "--seed", "1"});
  CHECK(r.code == kExitOk);
  CHECK(r.out.find(std::to_string(cmd_generate(c2).train_crc)) != std::string::npos);
}

TEST_CASE("poison manifests") {
  const auto dir = scratch("poison");
  auto j = tiny(dir);
  j["data"]["n_train"] = 1000;
  j["poison"]["rate"] = 0.01;
  CHECK(cli({"poison", "--config", write_config(dir, j)}).code == kExitRuntime);  // clean data missing
  auto cfg = config_from_json(j);
  cmd_generate(cfg);
  const auto r = cmd_poison(cfg);
  CHECK(r.poison_count == 10u);
  const auto ds = load_dataset(poisoned_stem(cfg), cfg.model);
  CHECK(ds.manifest["poison_count"] == 10);
  CHECK(ds.manifest["poison_indices"].size() == 10u);
  std::size_t flagged = 0;
  for (const auto& s : ds.samples) flagged += s.is_poisoned;
  CHECK(flagged == 10u);
  CHECK_FALSE(ds.manifest.contains("optimized_patch"));

  j["attack"] = "none";
  cfg = config_from_json(j);
  CHECK(cmd_poison(cfg).poison_count == 0u);
  CHECK(load_dataset(poisoned_stem(cfg), cfg.model).manifest["poison_indices"].empty());

  j["attack"] = "vltrojan_lite";
  j["poison"]["trigger"] = {{"vl_steps", 3}, {"vl_samples", 8}};
  cfg = config_from_json(j);
  cmd_poison(cfg);
  const auto m = load_dataset(poisoned_stem(cfg), cfg.model).manifest;
  REQUIRE(m.contains("optimized_patch"));
  CHECK(m["optimized_patch"].size() == 6u * 6u * 3u);
  CHECK(m["optimized_patch_shape"] == json({6, 6, 3}));
}

TEST_CASE("train writes a deterministic report") {
  const auto dir = scratch("train");
  const auto path = write_config(dir, tiny(dir));
  auto r = cli({"train", "--config", path});
  REQUIRE(r.code == kExitOk);
  const auto run = dir / "run";
  for (const char* f : {"report.json", "report.csv", "timing.json", "model.ckpt"}) CHECK(fs::exists(run / f));
  const auto report = json::parse(slurp(run / "report.json"));
  CHECK(report["mode"] == "robustit");
  CHECK(report["attack"] == "badnet");
  CHECK(report["poison_count"] == 10);
  CHECK(report["config"]["defense"]["alpha"] == 2.0);
  CHECK(report["config"]["defense"]["gamma"] == 0.5);
  CHECK(report["config"]["defense"]["beta"] == 0.9);
  CHECK(report["frozen_checksum_before"] == report["frozen_checksum_after"]);
  CHECK(report["eval_mask_applied"] == true);
  CHECK(report["final"]["kept_channels"].size() == 32u);
  const double asr = report["final"]["asr"].get<double>();
  CHECK((asr >= 0 && asr <= 100));
  const auto csv = read_csv(run / "report.csv");
  CHECK(csv.size() == 2u);

  const auto first_json = slurp(run / "report.json"), first_csv = slurp(run / "report.csv");
  REQUIRE(cli({"train", "--config", path}).code == kExitOk);
  CHECK(slurp(run / "report.json") == first_json);
  CHECK(slurp(run / "report.csv") == first_csv);

  // The checkpoint restores into a fresh model built from the same config.
  Model m(config_from_json(tiny(dir)).model);
  CHECK_NOTHROW(restore_params(load_checkpoint((run / "model.ckpt").string()), m));
}

TEST_CASE("a diverging run exits with status 2") {
  const auto dir = scratch("diverge");
  auto j = tiny(dir);
  j["defense"] = {{"alpha", 1e308}};  // the weighted consistency term overflows on the first step
  const auto r = cli({"train", "--config", write_config(dir, j)});
  CHECK(r.code == kExitRuntime);
  CHECK(r.err.find("non-finite") != std::string::npos);
}

TEST_CASE("sweep expansion") {
  const auto dir = scratch("expand");
  auto j = tiny(dir);
  j["sweep"] = {{"modes", {"vanilla", "aar_only", "idr_only", "robustit"}}};
  const auto cells = expand_sweep(config_from_json(j));
  REQUIRE(cells.size() == 4u);
  CHECK(cells[0].cfg.train.mode == Mode::vanilla);
  CHECK(cells[3].cfg.train.mode == Mode::robustit);
  for (const auto& c : cells) CHECK(c.cfg.sweep.empty());
  j["sweep"] = {{"attacks", {"badnet", "sig"}}, {"seeds", {0, 1}}, {"alpha", {0, 2}}};
  CHECK(expand_sweep(config_from_json(j)).size() == 8u);
}

TEST_CASE("beta sweep table") {
  const auto dir = scratch("ablate");
  auto j = tiny(dir);
  j["sweep"] = {{"beta", {0, 0.5, 0.9, 1}}};
  const auto r = cli({"ablate", "--config", write_config(dir, j), "--jobs", "2"});
  REQUIRE(r.code == kExitOk);
  const auto rows = read_csv(dir / "run" / "ablation.csv");
  REQUIRE(rows.size() == 5u);
  const auto& head = rows[0];
  const auto col = [&](const std::string& name) {
    return static_cast<std::size_t>(std::find(head.begin(), head.end(), name) - head.begin());
  };
  const std::vector<std::string> betas = {"0", "0.5", "0.9", "1"};
  for (std::size_t i = 1; i < rows.size(); ++i) {
    CHECK(rows[i][col("beta")] == betas[i - 1]);
    CHECK(rows[i][col("status")] == "ok");
    // Metrics are copied from the cell's own report.
    const auto rep = json::parse(slurp(dir / "run" / "cells" / rows[i][col("cell")] / "report.json"));
    CHECK(std::stod(rows[i][col("asr")]) == doctest::Approx(rep["final"]["asr"].get<double>()).epsilon(1e-9));
    CHECK(rep["config"]["defense"]["beta"].get<double>() == std::stod(betas[i - 1]));
  }
}

TEST_CASE("a failing cell is recorded and the rest still run") {
  const auto dir = scratch("ablate_fail");
  auto j = tiny(dir);
  j["sweep"] = {{"alpha", {2, 1e308}}};
  const auto r = cli({"ablate", "--config", write_config(dir, j)});
  const auto rows = read_csv(dir / "run" / "ablation.csv");
  REQUIRE(rows.size() == 3u);
  const auto& head = rows[0];
  const auto st = static_cast<std::size_t>(std::find(head.begin(), head.end(), "status") - head.begin());
  CHECK(rows[1][st] == "ok");
  CHECK(rows[2][st] == "failed");
  CHECK(r.code == kExitRuntime);
}
