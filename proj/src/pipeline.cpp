#include "robustit/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <sstream>
#include <thread>

#include "robustit/io.hpp"

namespace rit {

using nlohmann::json;
namespace fs = std::filesystem;

std::string clean_stem(const ExperimentConfig& cfg, const std::string& split) {
  return cfg.resolved_data_dir() + "/clean_" + split;
}

std::string poisoned_stem(const ExperimentConfig& cfg) {
  return cfg.resolved_data_dir() + "/train_" + attack_name(cfg.poison.attack);
}

namespace {

json clean_identity(const ExperimentConfig& cfg, const std::string& split) {
  const auto plan = seed_plan(cfg);
  const bool train = split == "train";
  return {{"kind", "clean"},
          {"split", split},
          {"seed", train ? plan.train_data : plan.eval_data},
          {"n", train ? cfg.data.n_train : cfg.data.n_eval},
          {"scene", to_json(cfg.data.scene)}};
}

json poison_identity(const ExperimentConfig& cfg) {
  json id = {{"kind", "poisoned"},
             {"spec", to_json(cfg.poison)},
             {"poison_seed", seed_plan(cfg).poison},
             {"clean", clean_identity(cfg, "train")}};
  // The optimized trigger depends on the frozen encoder it was searched against.
  if (cfg.poison.attack == Attack::vltrojan_lite) id["encoder"] = to_json(cfg.model);
  return id;
}

// True when the manifest on disk was produced from the same inputs.
bool manifest_matches(const std::string& stem, const json& identity) {
  if (!dataset_exists(stem)) return false;
  json m;
  try {
    m = json::parse(read_text(stem + ".json"));
  } catch (const json::exception&) {
    return false;
  }
  for (auto it = identity.begin(); it != identity.end(); ++it)
    if (!m.contains(it.key()) || m[it.key()] != it.value()) return false;
  return true;
}

void write_clean(const ExperimentConfig& cfg, const std::string& split, std::uint32_t* crc) {
  const auto id = clean_identity(cfg, split);
  auto samples = generate_clean_task(id["n"].get<std::size_t>(), cfg.model, cfg.data.scene, id["seed"].get<std::uint64_t>());
  const auto stem = clean_stem(cfg, split);
  save_dataset(stem, samples, cfg.model, id);
  if (crc) *crc = crc32_file(stem + ".bin");
}

PoisonSpec spec_from_manifest(const ExperimentConfig& cfg, const json& m) {
  PoisonSpec spec = cfg.poison;
  spec.seed = m["poison_seed"].get<std::uint64_t>();
  if (m.contains("optimized_patch")) spec.optimized_patch = m["optimized_patch"].get<std::vector<double>>();
  return spec;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string csv_field(std::string s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string o = "\"";
  for (char c : s) {
    if (c == '"') o += '"';
    o += c;
  }
  return o + "\"";
}

}  // namespace

GenerateResult cmd_generate(const ExperimentConfig& cfg) {
  cfg.validate();
  GenerateResult r;
  write_clean(cfg, "train", &r.train_crc);
  write_clean(cfg, "eval", &r.eval_crc);
  return r;
}

PoisonResult cmd_poison(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto src = clean_stem(cfg, "train");
  if (!dataset_exists(src)) throw IoError("clean training set '" + src + ".json' not found; run generate first");
  auto clean = load_dataset(src, cfg.model);
  PoisonSpec spec = cfg.poison;
  spec.seed = seed_plan(cfg).poison;
  ModelConfig mc = cfg.model;
  mc.hidden = 1;  // trigger search touches only the frozen encoder
  prepare_spec(spec, clean.samples, Model(mc));
  auto pd = poison_dataset(std::move(clean.samples), spec, cfg.model);
  json m = poison_identity(cfg);
  m["source"] = {{"stem", fs::path(src).filename().string()}, {"blob_crc32", clean.manifest["blob_crc32"]}};
  m["poison_count"] = pd.poison_indices.size();
  m["poison_indices"] = pd.poison_indices;
  if (!spec.optimized_patch.empty()) {
    m["optimized_patch"] = spec.optimized_patch;
    m["optimized_patch_shape"] = {spec.trigger.vl_patch_size, spec.trigger.vl_patch_size, cfg.model.C};
  }
  const auto stem = poisoned_stem(cfg);
  save_dataset(stem, pd.samples, cfg.model, m);
  return PoisonResult{pd.poison_indices.size(), crc32_file(stem + ".bin")};
}

json build_report(const ExperimentConfig& cfg, const RunResult& run, std::size_t poison_count) {
  const auto plan = seed_plan(cfg);
  json epochs = json::array();
  for (const auto& r : run.rows) {
    json row = {{"epoch", r.epoch},
                {"clean_accuracy", r.eval.accuracy},
                {"bleu1", r.eval.bleu1},
                {"bleu4", r.eval.bleu4},
                {"asr", r.eval.asr},
                {"mean_lit", r.mean_lit},
                {"mean_limc", r.mean_limc}};
    if (!r.mask_bits.empty()) row["mask"] = r.mask_bits;
    epochs.push_back(row);
  }
  const auto& last = run.rows.back().eval;
  json fin = {{"clean_accuracy", last.accuracy}, {"bleu1", last.bleu1}, {"bleu4", last.bleu4}, {"asr", last.asr}};
  if (!run.final_mask.empty()) {
    fin["mask"] = run.final_mask;
    std::vector<std::size_t> kept;
    for (std::size_t d = 0; d < run.final_mask.size(); ++d)
      if (run.final_mask[d] != 0) kept.push_back(d);
    fin["kept_channels"] = kept;
  }
  fin["importance"] = {{"g", run.importance.g},
                       {"beta", run.importance.beta},
                       {"gamma", run.importance.gamma},
                       {"step", run.importance.step}};
  const auto& t = cfg.train;
  const std::size_t total = run.steps;
  return {{"schema_version", kSchemaVersion},
          {"kind", "experiment_report"},
          {"mode", mode_name(t.mode)},
          {"attack", attack_name(cfg.poison.attack)},
          {"poison_count", poison_count},
          {"config", to_json(cfg)},
          {"seeds",
           {{"run", cfg.seed},
            {"train_data", plan.train_data},
            {"eval_data", plan.eval_data},
            {"poison", plan.poison},
            {"model_init", plan.model_init},
            {"shuffle", plan.shuffle},
            {"augment", plan.augment},
            {"frozen", plan.frozen}}},
          {"optimizer",
           {{"name", t.optimizer},
            {"beta1", t.adam_beta1},
            {"beta2", t.adam_beta2},
            {"eps", t.adam_eps},
            {"weight_decay", t.weight_decay},
            {"schedule", t.schedule},
            {"warmup_steps", warmup_steps(t, total)},
            {"total_steps", total}}},
          {"eval_mask_applied", run.eval_mask_applied},
          {"frozen_checksum_before", run.frozen_checksum_before},
          {"frozen_checksum_after", run.frozen_checksum_after},
          {"epochs", epochs},
          {"final", fin}};
}

std::string report_csv(const json& report) {
  std::ostringstream os;
  os << "schema_version,mode,attack,epoch,clean_accuracy,bleu1,bleu4,asr,mean_lit,mean_limc\n";
  for (const auto& r : report["epochs"]) {
    os << report["schema_version"].get<int>() << ',' << report["mode"].get<std::string>() << ','
       << report["attack"].get<std::string>() << ',' << r["epoch"].get<int>();
    for (const char* k : {"clean_accuracy", "bleu1", "bleu4", "asr", "mean_lit", "mean_limc"}) os << ',' << fmt(r[k].get<double>());
    os << '\n';
  }
  return os.str();
}

TrainOutcome cmd_train(const ExperimentConfig& cfg) {
  cfg.validate();
  const auto& mc = cfg.model;
  for (const char* split : {"train", "eval"})
    if (!manifest_matches(clean_stem(cfg, split), clean_identity(cfg, split))) write_clean(cfg, split, nullptr);

  std::vector<Sample> train;
  PoisonSpec spec = cfg.poison;
  std::size_t poison_count = 0;
  if (cfg.poison.attack == Attack::none) {
    train = load_dataset(clean_stem(cfg, "train"), mc).samples;
  } else {
    if (!manifest_matches(poisoned_stem(cfg), poison_identity(cfg))) cmd_poison(cfg);
    auto pd = load_dataset(poisoned_stem(cfg), mc);
    spec = spec_from_manifest(cfg, pd.manifest);
    poison_count = pd.manifest["poison_count"].get<std::size_t>();
    train = std::move(pd.samples);
  }
  const auto clean_eval = load_dataset(clean_stem(cfg, "eval"), mc).samples;
  const auto triggered = cfg.poison.attack == Attack::none ? clean_eval : make_triggered_set(clean_eval, spec, mc);

  const auto plan = seed_plan(cfg);
  ModelConfig run_mc = mc;
  run_mc.train_seed = plan.model_init;
  Model model(run_mc);
  TrainOutcome out;
  out.run = run_training(model, train, clean_eval, triggered, cfg.poison.target, cfg.train, cfg.defense, cfg.augment,
                         RunSeeds{plan.shuffle, plan.augment});
  if (out.run.frozen_checksum_before != out.run.frozen_checksum_after)
    throw std::logic_error("frozen parameters changed during training");
  out.report = build_report(cfg, out.run, poison_count);
  out.train_seconds = out.run.rows.back().train_seconds;

  write_text(cfg.out + "/report.json", out.report.dump(2) + "\n");
  write_text(cfg.out + "/report.csv", report_csv(out.report));
  json timing = {{"train_seconds_total", out.train_seconds}, {"epochs", json::array()}};
  for (const auto& r : out.run.rows) timing["epochs"].push_back({{"epoch", r.epoch}, {"train_seconds", r.train_seconds}});
  write_text(cfg.out + "/timing.json", timing.dump(2) + "\n");
  const std::vector<double>* mask = out.run.final_mask.empty() ? nullptr : &out.run.final_mask;
  save_checkpoint(cfg.out + "/model.ckpt", model, &out.run.importance, mask);
  return out;
}

std::vector<AblationCell> expand_sweep(const ExperimentConfig& base) {
  const auto& s = base.sweep;
  if (s.empty()) throw ConfigError("sweep is empty; list at least one of modes, attacks, alpha, gamma, beta, seeds");
  auto or_base = [](const auto& axis, auto value) {
    using T = decltype(value);
    return axis.empty() ? std::vector<T>{value} : std::vector<T>(axis.begin(), axis.end());
  };
  const auto attacks = or_base(s.attacks, attack_name(base.poison.attack));
  const auto seeds = or_base(s.seeds, base.seed);
  const auto modes = or_base(s.modes, mode_name(base.train.mode));
  const auto alphas = or_base(s.alpha, base.defense.alpha);
  const auto gammas = or_base(s.gamma, base.defense.gamma);
  const auto betas = or_base(s.beta, base.defense.beta);
  std::vector<AblationCell> cells;
  for (const auto& a : attacks)
    for (auto sd : seeds)
      for (const auto& m : modes)
        for (double al : alphas)
          for (double ga : gammas)
            for (double be : betas) {
              AblationCell c;
              c.cfg = base;
              c.cfg.sweep = SweepConfig{};
              c.cfg.poison.attack = parse_attack(a);
              c.cfg.seed = sd;
              c.cfg.train.mode = parse_mode(m);
              c.cfg.defense.alpha = al;
              c.cfg.defense.gamma = ga;
              c.cfg.defense.beta = be;
              std::ostringstream name;
              name << std::setfill('0') << std::setw(3) << cells.size() << '_' << a << "_s" << sd << '_' << m << "_a"
                   << fmt(al) << "_g" << fmt(ga) << "_b" << fmt(be);
              c.name = name.str();
              c.cfg.data_dir = base.resolved_data_dir() + "/s" + std::to_string(sd);
              c.cfg.out = base.out + "/cells/" + c.name;
              cells.push_back(std::move(c));
            }
  return cells;
}

AblationOutcome cmd_ablate(const ExperimentConfig& base, int jobs) {
  base.validate();
  auto cells = expand_sweep(base);
  for (const auto& c : cells) c.cfg.validate();

  struct Row {
    bool ok = false;
    std::string error;
    json report;
    double seconds = 0;
  };
  std::vector<Row> rows(cells.size());

  // Shared datasets are prepared up front so that workers only read them.
  std::vector<std::string> prepared;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& cfg = cells[i].cfg;
    const auto key = poisoned_stem(cfg);
    if (std::find(prepared.begin(), prepared.end(), key) != prepared.end()) continue;
    prepared.push_back(key);
    try {
      for (const char* split : {"train", "eval"})
        if (!manifest_matches(clean_stem(cfg, split), clean_identity(cfg, split))) write_clean(cfg, split, nullptr);
      if (cfg.poison.attack != Attack::none && !manifest_matches(key, poison_identity(cfg))) cmd_poison(cfg);
    } catch (const std::exception& e) {
      rows[i].error = std::string("data preparation: ") + e.what();
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i; (i = next++) < cells.size();) {
      if (!rows[i].error.empty()) continue;
      try {
        auto out = cmd_train(cells[i].cfg);
        rows[i].report = json::parse(read_text(cells[i].cfg.out + "/report.json"));
        rows[i].seconds = out.train_seconds;
        rows[i].ok = true;
      } catch (const std::exception& e) {
        rows[i].error = e.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(cells.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::ostringstream os;
  os << "cell,mode,attack,seed,alpha,gamma,beta,status,clean_accuracy,bleu1,bleu4,asr,train_seconds,error\n";
  AblationOutcome res;
  res.cells = cells.size();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& c = cells[i].cfg;
    os << cells[i].name << ',' << mode_name(c.train.mode) << ',' << attack_name(c.poison.attack) << ',' << c.seed << ','
       << fmt(c.defense.alpha) << ',' << fmt(c.defense.gamma) << ',' << fmt(c.defense.beta) << ',';
    if (rows[i].ok) {
      const auto& f = rows[i].report["final"];
      os << "ok," << fmt(f["clean_accuracy"].get<double>()) << ',' << fmt(f["bleu1"].get<double>()) << ','
         << fmt(f["bleu4"].get<double>()) << ',' << fmt(f["asr"].get<double>()) << ',' << fmt(rows[i].seconds) << ",\n";
    } else {
      ++res.failed;
      os << "failed,,,,,," << csv_field(rows[i].error) << '\n';
    }
  }
  res.table_path = base.out + "/ablation.csv";
  write_text(res.table_path, os.str());
  return res;
}

}  // namespace rit
