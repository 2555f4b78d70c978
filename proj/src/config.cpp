#include "robustit/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace rit {

using nlohmann::json;

namespace {

// Reads known keys from one JSON object and rejects the rest.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class T>
  void get(const std::string& key, T& out) {
    auto it = j_.find(key);
    if (it == j_.end()) return;
    used_.insert(key);
    try {
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where() + "." + key + ": wrong type (" + e.what() + ")");
    }
  }

  const json* sub(const std::string& key) {
    auto it = j_.find(key);
    if (it == j_.end()) return nullptr;
    used_.insert(key);
    return &*it;
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key())) throw ConfigError("unknown config key '" + child(it.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_scene(const json& j, SceneConfig& s) {
  Section r(j, "data.scene");
  r.get("min_objects", s.min_objects);
  r.get("max_objects", s.max_objects);
  r.get("background_lo", s.background_lo);
  r.get("background_hi", s.background_hi);
  r.get("brightness_lo", s.brightness_lo);
  r.get("texture_amplitude", s.texture_amplitude);
  r.get("texture_components", s.texture_components);
  r.get("texture_max_freq", s.texture_max_freq);
  r.finish();
}

void read_data(const json& j, DataConfig& d) {
  Section r(j, "data");
  r.get("n_train", d.n_train);
  r.get("n_eval", d.n_eval);
  if (auto* s = r.sub("scene")) read_scene(*s, d.scene);
  r.finish();
}

void read_model(const json& j, ModelConfig& m) {
  Section r(j, "model");
  r.get("H", m.H);
  r.get("W", m.W);
  r.get("C", m.C);
  r.get("patch", m.patch);
  r.get("T", m.T);
  r.get("D", m.D);
  r.get("V", m.V);
  r.get("d_embed", m.d_embed);
  r.get("L_instr", m.L_instr);
  r.get("L_resp", m.L_resp);
  r.get("hidden", m.hidden);
  r.get("encoder_scale", m.encoder_scale);
  r.get("visual_gain", m.visual_gain);
  r.get("text_gain", m.text_gain);
  r.get("core_gain", m.core_gain);
  r.get("adapter_init", m.adapter_init);
  r.get("adapter_bias_init", m.adapter_bias_init);
  r.get("embed_init", m.embed_init);
  r.get("head_init", m.head_init);
  r.get("frozen_seed", m.frozen_seed);
  r.get("train_seed", m.train_seed);
  if (auto* b = r.sub("bands")) {
    if (!b->is_array()) throw ConfigError("model.bands: expected an array");
    m.bands.clear();
    for (std::size_t i = 0; i < b->size(); ++i) {
      Section br((*b)[i], "model.bands[" + std::to_string(i) + "]");
      BandSpec bs;
      br.get("kind", bs.kind);
      br.get("count", bs.count);
      br.get("lo", bs.lo);
      br.get("hi", bs.hi);
      br.get("terms", bs.terms);
      br.get("gain", bs.gain);
      br.finish();
      m.bands.push_back(bs);
    }
  }
  r.finish();
}

void read_trigger(const json& j, TriggerParams& t) {
  Section r(j, "poison.trigger");
  r.get("patch_size", t.patch_size);
  r.get("blend_ratio", t.blend_ratio);
  r.get("blend_lo", t.blend_lo);
  r.get("blend_hi", t.blend_hi);
  r.get("blend_seed", t.blend_seed);
  r.get("sig_amplitude", t.sig_amplitude);
  r.get("sig_frequency", t.sig_frequency);
  r.get("ftrojan_u", t.ftrojan_u);
  r.get("ftrojan_v", t.ftrojan_v);
  r.get("ftrojan_magnitude", t.ftrojan_magnitude);
  r.get("ssba_amplitude", t.ssba_amplitude);
  r.get("ssba_seed", t.ssba_seed);
  r.get("trigger_token", t.trigger_token);
  r.get("vl_patch_size", t.vl_patch_size);
  r.get("vl_steps", t.vl_steps);
  r.get("vl_step_size", t.vl_step_size);
  r.get("vl_samples", t.vl_samples);
  r.finish();
}

void set_attack(PoisonSpec& p, const std::string& name) {
  try {
    p.attack = parse_attack(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void set_mode(TrainConfig& t, const std::string& name) {
  try {
    t.mode = parse_mode(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

void read_poison(const json& j, PoisonSpec& p) {
  Section r(j, "poison");
  std::string attack;
  r.get("attack", attack);
  if (!attack.empty()) set_attack(p, attack);
  r.get("rate", p.rate);
  r.get("target", p.target);
  if (auto* t = r.sub("trigger")) read_trigger(*t, p.trigger);
  r.finish();
}

void read_augment(const json& j, AugmentConfig& a) {
  Section r(j, "augment");
  r.get("jitter_scale", a.jitter_scale);
  r.get("jitter_shift", a.jitter_shift);
  r.get("flip_prob", a.flip_prob);
  r.get("drop_prob", a.drop_prob);
  r.get("synonym_prob", a.synonym_prob);
  r.get("reserved", a.reserved);
  if (auto* s = r.sub("synonyms")) {
    if (!s->is_object()) throw ConfigError("augment.synonyms: expected an object of token -> [tokens]");
    a.synonyms.clear();
    for (auto it = s->begin(); it != s->end(); ++it) {
      int key = 0;
      try {
        std::size_t pos = 0;
        key = std::stoi(it.key(), &pos);
        if (pos != it.key().size()) throw std::invalid_argument("trailing");
        a.synonyms[key] = it->get<std::vector<int>>();
      } catch (const std::exception&) {
        throw ConfigError("augment.synonyms." + it.key() + ": expected integer key and integer list");
      }
    }
  }
  r.finish();
}

void read_defense(const json& j, DefenseConfig& d) {
  Section r(j, "defense");
  r.get("alpha", d.alpha);
  r.get("beta", d.beta);
  r.get("gamma", d.gamma);
  r.get("eval_mask", d.eval_mask);
  r.get("aar_weight_overwrite", d.aar_weight_overwrite);
  r.finish();
}

void read_train(const json& j, TrainConfig& t) {
  Section r(j, "train");
  std::string mode;
  r.get("mode", mode);
  if (!mode.empty()) set_mode(t, mode);
  r.get("lr", t.lr);
  r.get("epochs", t.epochs);
  r.get("batch_size", t.batch_size);
  r.get("weight_decay", t.weight_decay);
  r.get("warmup_fraction", t.warmup_fraction);
  r.get("optimizer", t.optimizer);
  r.get("schedule", t.schedule);
  r.get("adam_beta1", t.adam_beta1);
  r.get("adam_beta2", t.adam_beta2);
  r.get("adam_eps", t.adam_eps);
  r.finish();
}

void read_sweep(const json& j, SweepConfig& s) {
  Section r(j, "sweep");
  r.get("modes", s.modes);
  r.get("attacks", s.attacks);
  r.get("alpha", s.alpha);
  r.get("gamma", s.gamma);
  r.get("beta", s.beta);
  r.get("seeds", s.seeds);
  r.finish();
}

}  // namespace

std::string ExperimentConfig::resolved_data_dir() const { return data_dir.empty() ? out + "/data" : data_dir; }

void ExperimentConfig::validate() const {
  auto wrap = [](auto&& f) {
    try {
      f();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  };
  if (schema_version != kSchemaVersion)
    throw ConfigError("schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                      std::to_string(kSchemaVersion) + ")");
  if (data.n_train == 0) throw ConfigError("data.n_train must be >= 1");
  if (data.n_eval == 0) throw ConfigError("data.n_eval must be >= 1");
  if (data.scene.min_objects < 1 || data.scene.max_objects < data.scene.min_objects ||
      data.scene.max_objects > kNumShapes)
    throw ConfigError("data.scene: need 1 <= min_objects <= max_objects <= 4");
  if (out.empty()) throw ConfigError("out must be a nonempty path");
  wrap([&] { model.validate(); });
  wrap([&] { validate_spec(poison, model); });
  wrap([&] { augment.validate(); });
  wrap([&] { train.validate(); });
  if (!std::isfinite(defense.alpha) || defense.alpha < 0) throw ConfigError("defense.alpha must be finite and >= 0");
  if (!(defense.beta >= 0 && defense.beta <= 1)) throw ConfigError("defense.beta must lie in [0, 1]");
  if (!(defense.gamma > 0 && defense.gamma <= 1)) throw ConfigError("defense.gamma must lie in (0, 1]");
  if (static_cast<int>(defense.gamma * model.D) < 1) throw ConfigError("defense.gamma keeps no channels at this width");
  for (const auto& m : sweep.modes) {
    try {
      parse_mode(m);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sweep.modes: ") + e.what());
    }
  }
  for (const auto& a : sweep.attacks) {
    try {
      parse_attack(a);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("sweep.attacks: ") + e.what());
    }
  }
}

SeedPlan seed_plan(const ExperimentConfig& cfg) {
  const std::uint64_t s = cfg.seed;
  return SeedPlan{1000 + s, 99999 + s, 2000 + s, cfg.model.train_seed + s, 3000 + s, 4000 + s, cfg.model.frozen_seed};
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  Section r(j, "");
  r.get("schema_version", c.schema_version);
  r.get("seed", c.seed);
  r.get("out", c.out);
  r.get("data_dir", c.data_dir);
  std::string attack, mode;
  r.get("attack", attack);
  r.get("mode", mode);
  if (auto* s = r.sub("model")) read_model(*s, c.model);
  if (auto* s = r.sub("data")) read_data(*s, c.data);
  if (auto* s = r.sub("poison")) read_poison(*s, c.poison);
  if (auto* s = r.sub("augment")) read_augment(*s, c.augment);
  if (auto* s = r.sub("defense")) read_defense(*s, c.defense);
  if (auto* s = r.sub("train")) read_train(*s, c.train);
  if (auto* s = r.sub("sweep")) read_sweep(*s, c.sweep);
  r.finish();
  // Top-level shortcuts win over the nested keys.
  if (!attack.empty()) set_attack(c.poison, attack);
  if (!mode.empty()) set_mode(c.train, mode);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path + "' is not valid JSON: " + e.what());
  }
  auto c = config_from_json(j);
  c.validate();
  return c;
}

json to_json(const ModelConfig& m) {
  json bands = json::array();
  for (const auto& b : m.resolved_bands())
    bands.push_back({{"kind", b.kind}, {"count", b.count}, {"lo", b.lo}, {"hi", b.hi}, {"terms", b.terms}, {"gain", b.gain}});
  return {{"H", m.H},
          {"W", m.W},
          {"C", m.C},
          {"patch", m.patch},
          {"T", m.T},
          {"D", m.D},
          {"V", m.V},
          {"d_embed", m.d_embed},
          {"L_instr", m.L_instr},
          {"L_resp", m.L_resp},
          {"hidden", m.hidden},
          {"encoder_scale", m.encoder_scale},
          {"bands", bands},
          {"visual_gain", m.visual_gain},
          {"text_gain", m.text_gain},
          {"core_gain", m.core_gain},
          {"adapter_init", m.adapter_init},
          {"adapter_bias_init", m.adapter_bias_init},
          {"embed_init", m.embed_init},
          {"head_init", m.head_init},
          {"frozen_seed", m.frozen_seed},
          {"train_seed", m.train_seed}};
}

json to_json(const SceneConfig& s) {
  return {{"min_objects", s.min_objects},     {"max_objects", s.max_objects},
          {"background_lo", s.background_lo}, {"background_hi", s.background_hi},
          {"brightness_lo", s.brightness_lo}, {"texture_amplitude", s.texture_amplitude},
          {"texture_components", s.texture_components}, {"texture_max_freq", s.texture_max_freq}};
}

json to_json(const PoisonSpec& p) {
  const auto& t = p.trigger;
  json trig = {{"patch_size", t.patch_size},       {"blend_ratio", t.blend_ratio},
               {"blend_lo", t.blend_lo},           {"blend_hi", t.blend_hi},
               {"blend_seed", t.blend_seed},       {"sig_amplitude", t.sig_amplitude},
               {"sig_frequency", t.sig_frequency}, {"ftrojan_u", t.ftrojan_u},
               {"ftrojan_v", t.ftrojan_v},         {"ftrojan_magnitude", t.ftrojan_magnitude},
               {"ssba_amplitude", t.ssba_amplitude}, {"ssba_seed", t.ssba_seed},
               {"trigger_token", t.trigger_token}, {"vl_patch_size", t.vl_patch_size},
               {"vl_steps", t.vl_steps},           {"vl_step_size", t.vl_step_size},
               {"vl_samples", t.vl_samples}};
  return {{"attack", attack_name(p.attack)}, {"rate", p.rate}, {"target", p.target}, {"trigger", trig}};
}

json to_json(const AugmentConfig& a) {
  json syn = json::object();
  for (const auto& [k, v] : a.synonyms) syn[std::to_string(k)] = v;
  return {{"jitter_scale", a.jitter_scale}, {"jitter_shift", a.jitter_shift}, {"flip_prob", a.flip_prob},
          {"drop_prob", a.drop_prob},       {"synonym_prob", a.synonym_prob}, {"reserved", a.reserved},
          {"synonyms", syn}};
}

json to_json(const ExperimentConfig& c) {
  const auto& d = c.defense;
  const auto& t = c.train;
  return {{"schema_version", c.schema_version},
          {"seed", c.seed},
          {"out", c.out},
          {"data_dir", c.resolved_data_dir()},
          {"model", to_json(c.model)},
          {"data", {{"n_train", c.data.n_train}, {"n_eval", c.data.n_eval}, {"scene", to_json(c.data.scene)}}},
          {"poison", to_json(c.poison)},
          {"augment", to_json(c.augment)},
          {"defense",
           {{"alpha", d.alpha},
            {"beta", d.beta},
            {"gamma", d.gamma},
            {"eval_mask", d.eval_mask},
            {"aar_weight_overwrite", d.aar_weight_overwrite}}},
          {"train",
           {{"mode", mode_name(t.mode)},
            {"lr", t.lr},
            {"epochs", t.epochs},
            {"batch_size", t.batch_size},
            {"weight_decay", t.weight_decay},
            {"warmup_fraction", t.warmup_fraction},
            {"optimizer", t.optimizer},
            {"schedule", t.schedule},
            {"adam_beta1", t.adam_beta1},
            {"adam_beta2", t.adam_beta2},
            {"adam_eps", t.adam_eps}}},
          {"sweep",
           {{"modes", c.sweep.modes},
            {"attacks", c.sweep.attacks},
            {"alpha", c.sweep.alpha},
            {"gamma", c.sweep.gamma},
            {"beta", c.sweep.beta},
            {"seeds", c.sweep.seeds}}}};
}

}  // namespace rit
