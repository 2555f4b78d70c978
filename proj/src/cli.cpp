#include "robustit/cli.hpp"

#include <iostream>

#include "CLI11.hpp"
#include "robustit/io.hpp"
#include "robustit/pipeline.hpp"

namespace rit {

int run_cli(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Backdoor-robust instruction tuning on a toy vision-language task"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::uint64_t seed = 0;
  int jobs = 1;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->add_option("--out", out_dir, "output directory (overrides the config)");
    sub->add_option("--seed", seed, "run seed (overrides the config)");
  };
  auto* gen = app.add_subcommand("generate", "write the clean train/eval datasets");
  auto* poi = app.add_subcommand("poison", "inject the configured attack into the clean train set");
  auto* trn = app.add_subcommand("train", "train, evaluate and write the report");
  auto* abl = app.add_subcommand("ablate", "run every cell of the configured sweep");
  for (auto* s : {gen, poi, trn, abl}) add_common(s);
  abl->add_option("--jobs", jobs, "cells run concurrently")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? 0 : kExitConfig;
  }

  ExperimentConfig cfg;
  try {
    cfg = config_path.empty() ? config_from_json(nlohmann::json::object()) : load_config(config_path);
    if (!out_dir.empty()) cfg.out = out_dir;
    for (auto* s : {gen, poi, trn, abl})
      if (s->parsed() && s->count("--seed")) cfg.seed = seed;
    cfg.validate();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  }

  try {
    if (gen->parsed()) {
      auto r = cmd_generate(cfg);
      out << "train crc32 " << r.train_crc << "\neval crc32 " << r.eval_crc << "\n";
    } else if (poi->parsed()) {
      auto r = cmd_poison(cfg);
      out << "poisoned " << r.poison_count << " samples (" << attack_name(cfg.poison.attack) << "), crc32 " << r.crc << "\n";
    } else if (trn->parsed()) {
      auto r = cmd_train(cfg);
      const auto& f = r.report["final"];
      out << mode_name(cfg.train.mode) << " / " << attack_name(cfg.poison.attack) << ": accuracy "
          << f["clean_accuracy"].get<double>() << ", ASR " << f["asr"].get<double>() << ", train " << r.train_seconds
          << " s -> " << cfg.out << "/report.json\n";
    } else {
      auto r = cmd_ablate(cfg, jobs);
      out << r.cells << " cells, " << r.failed << " failed -> " << r.table_path << "\n";
      if (r.failed) return kExitRuntime;
    }
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace rit
