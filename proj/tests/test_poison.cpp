#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "robustit/poison.hpp"

using namespace rit;

namespace {

ModelConfig small_config() {
  ModelConfig mc;
  mc.hidden = 32;
  return mc;
}

Sample blank(const ModelConfig& mc, double v = 0.0) {
  Sample s;
  s.image.assign(static_cast<std::size_t>(mc.H * mc.W * mc.C), v);
  s.instruction = {1, 4, 6, 0, 0, 0};
  s.response = {10, 20, 0, 0};
  return s;
}

PoisonSpec spec_for(Attack a) {
  PoisonSpec sp;
  sp.attack = a;
  return sp;
}

// Random patch drawn the same way a naive attacker would, for the trigger-search comparison.
std::vector<double> random_patch(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> U(0, 1);
  std::vector<double> p(n);
  for (auto& v : p) v = U(rng);
  return p;
}

}  // namespace

TEST_CASE("clean task generation") {
  const auto mc = small_config();
  const auto a = generate_clean_task(400, mc, SceneConfig{}, 5), b = generate_clean_task(400, mc, SceneConfig{}, 5);
  std::array<std::size_t, kNumShapes> shape_count{};
  std::size_t objects = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].image == b[i].image);
    CHECK(a[i].instruction == b[i].instruction);
    CHECK(a[i].response == b[i].response);
    CHECK_FALSE(a[i].is_poisoned);
    CHECK(a[i].image.size() == 32u * 32u * 3u);
    for (double v : a[i].image) CHECK((v >= 0.0 && v <= 1.0));
    CHECK(a[i].response.size() == 4u);
    for (std::size_t j = 0; j < a[i].response.size(); ++j) {
      const int t = a[i].response[j];
      if (j % 2 == 0) {
        CHECK(((t >= vocab::kShapeBase && t < vocab::kShapeBase + kNumShapes) || (j > 0 && t == vocab::kPad)));
        if (t != vocab::kPad) {
          ++shape_count[static_cast<std::size_t>(t - vocab::kShapeBase)];
          ++objects;
        }
      } else {
        CHECK(((t >= vocab::kColorBase && t < vocab::kColorBase + vocab::kNumColors) || t == vocab::kPad));
      }
    }
  }
  CHECK(generate_clean_task(3, mc, SceneConfig{}, 6)[0].image != a[0].image);

  // Balance. Single-object scenes name their only shape, so each shape should own n/4 of them within 10%.
  SceneConfig single;
  single.max_objects = 1;
  std::array<double, kNumShapes> cnt{};
  for (const auto& s : generate_clean_task(4000, mc, single, 17)) cnt[static_cast<std::size_t>(s.response[0] - vocab::kShapeBase)] += 1;
  for (double c : cnt) CHECK(std::fabs(c - 1000.0) <= 100.0);
  // Default scenes: the one-object subset (second slot empty) must be balanced too.
  cnt = {};
  double total = 0;
  for (const auto& s : generate_clean_task(8000, mc, SceneConfig{}, 18))
    if (s.response[2] == vocab::kPad) {
      cnt[static_cast<std::size_t>(s.response[0] - vocab::kShapeBase)] += 1;
      total += 1;
    }
  CHECK(total > 2000);
  for (double c : cnt) CHECK(std::fabs(c - total / kNumShapes) <= 0.1 * total / kNumShapes);

  CHECK_THROWS_AS(generate_clean_task(0, mc, SceneConfig{}, 1), std::invalid_argument);
}

TEST_CASE("attack names") {
  CHECK(attack_names().size() == 8u);
  for (const auto& n : attack_names()) CHECK(attack_name(parse_attack(n)) == n);
  try {
    parse_attack("wanet");
    CHECK(false);
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("wanet") != std::string::npos);
    for (const auto& n : attack_names()) CHECK(msg.find(n) != std::string::npos);
  }
}

TEST_CASE("sig closed form on a zero image") {
  const auto mc = small_config();
  auto sp = spec_for(Attack::sig);
  sp.trigger.sig_amplitude = 0.1;
  sp.trigger.sig_frequency = 6;
  const auto out = inject(blank(mc), sp, mc);
  for (int r = 0; r < mc.H; ++r)
    for (int c = 0; c < mc.W; ++c) {
      const double want = std::clamp(0.1 * std::sin(2 * M_PI * 6 * c / mc.W), 0.0, 1.0);
      for (int ch = 0; ch < mc.C; ++ch)
        CHECK(out.image[static_cast<std::size_t>((r * mc.W + c) * mc.C + ch)] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("badnet only touches the corner patch") {
  const auto mc = small_config();
  const auto clean = generate_clean_task(5, mc, SceneConfig{}, 2);
  auto sp = spec_for(Attack::badnet);
  for (const auto& s : clean) {
    const auto out = inject(s, sp, mc);
    bool changed = false;
    for (int r = 0; r < mc.H; ++r)
      for (int c = 0; c < mc.W; ++c)
        for (int ch = 0; ch < mc.C; ++ch) {
          const auto i = static_cast<std::size_t>((r * mc.W + c) * mc.C + ch);
          const bool inside = r >= mc.H - 4 && c >= mc.W - 4;
          if (!inside) CHECK(out.image[i] == s.image[i]);
          else changed = changed || out.image[i] != s.image[i];
        }
    CHECK(changed);
    CHECK(out.instruction == s.instruction);
    CHECK(out.response == vocab::kTarget);
    CHECK(out.is_poisoned);
  }
}

TEST_CASE("blended with zero ratio leaves the image alone") {
  const auto mc = small_config();
  const auto s = generate_clean_task(1, mc, SceneConfig{}, 3)[0];
  auto sp = spec_for(Attack::blended);
  sp.trigger.blend_ratio = 0.0;
  const auto out = inject(s, sp, mc);
  CHECK(out.image == s.image);
  CHECK(out.response == sp.target);
  CHECK(out.is_poisoned);
  sp.trigger.blend_ratio = 1.0;
  CHECK(inject(s, sp, mc).image == blend_trigger_image(sp.trigger, mc));
}

TEST_CASE("every attack is non-vacuous and stays in range") {
  const auto mc = small_config();
  const Model model(mc);
  const auto clean = generate_clean_task(8, mc, SceneConfig{}, 4);
  for (const auto& name : attack_names()) {
    const Attack a = parse_attack(name);
    if (a == Attack::none) continue;
    auto sp = spec_for(a);
    sp.trigger.vl_steps = 3;
    sp.trigger.vl_samples = 8;
    prepare_spec(sp, clean, model);
    for (const auto& s : clean) {
      const auto out = inject(s, sp, mc);
      CHECK(out.image.size() == s.image.size());
      for (double v : out.image) CHECK((v >= 0.0 && v <= 1.0));
      CHECK((out.image != s.image || out.instruction != s.instruction));
      if (has_text_trigger(a)) CHECK(std::count(out.instruction.begin(), out.instruction.end(), mc.V - 1) == 1);
      else CHECK(out.instruction == s.instruction);
    }
  }
  CHECK_THROWS_AS(inject(clean[0], spec_for(Attack::none), mc), std::invalid_argument);
  CHECK_THROWS_AS(inject(clean[0], spec_for(Attack::vltrojan_lite), mc), std::invalid_argument);
}

TEST_CASE("ssba noise depends on the image") {
  const auto mc = small_config();
  const auto clean = generate_clean_task(2, mc, SceneConfig{}, 9);
  const auto sp = spec_for(Attack::ssba_lite);
  auto d0 = inject(clean[0], sp, mc).image, d1 = inject(clean[1], sp, mc).image;
  CHECK(inject(clean[0], sp, mc).image == d0);
  std::size_t same_sign = 0, n = 0;
  for (std::size_t i = 0; i < d0.size(); ++i) {
    const double a = d0[i] - clean[0].image[i], b = d1[i] - clean[1].image[i];
    if (a != 0 && b != 0) {
      ++n;
      same_sign += (a > 0) == (b > 0);
    }
  }
  CHECK(n > 1000);
  CHECK(std::fabs(static_cast<double>(same_sign) / static_cast<double>(n) - 0.5) < 0.1);
}

TEST_CASE("spec validation") {
  const auto mc = small_config();
  auto expect_bad = [&](auto edit) {
    auto sp = spec_for(Attack::badnet);
    edit(sp);
    CHECK_THROWS_AS(validate_spec(sp, mc), std::invalid_argument);
  };
  expect_bad([](PoisonSpec& s) { s.rate = 0.06; });
  expect_bad([](PoisonSpec& s) { s.rate = -0.01; });
  expect_bad([](PoisonSpec& s) { s.trigger.patch_size = 33; });
  expect_bad([](PoisonSpec& s) { s.trigger.patch_size = 0; });
  expect_bad([](PoisonSpec& s) { s.trigger.blend_ratio = 1.5; });
  expect_bad([](PoisonSpec& s) { s.target = {40, 41}; });
  expect_bad([](PoisonSpec& s) { s.target = {10, 20, 0, 0}; });
  expect_bad([](PoisonSpec& s) { s.trigger.ftrojan_u = 8; });
  expect_bad([](PoisonSpec& s) { s.trigger.trigger_token = 0; });
  auto ok = spec_for(Attack::badnet);
  ok.rate = 0.05;
  CHECK_NOTHROW(validate_spec(ok, mc));
}

TEST_CASE("poison_dataset selection") {
  ModelConfig mc = small_config();
  const auto clean = generate_clean_task(10000, mc, SceneConfig{}, 1);
  auto sp = spec_for(Attack::badnet);
  sp.rate = 0.01;
  sp.seed = 77;
  const auto ds = poison_dataset(clean, sp, mc);
  CHECK(ds.poison_indices.size() == 100u);
  CHECK(std::is_sorted(ds.poison_indices.begin(), ds.poison_indices.end()));
  CHECK(std::set<std::size_t>(ds.poison_indices.begin(), ds.poison_indices.end()).size() == 100u);
  std::set<std::size_t> picked(ds.poison_indices.begin(), ds.poison_indices.end());
  std::size_t flagged = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    const auto& s = ds.samples[i];
    if (picked.count(i)) {
      CHECK(s.is_poisoned);
      CHECK(s.response == sp.target);
    } else {
      CHECK(s.image == clean[i].image);
      CHECK(s.instruction == clean[i].instruction);
      CHECK(s.response == clean[i].response);
    }
    flagged += s.is_poisoned;
  }
  CHECK(flagged == 100u);
  CHECK(poison_dataset(clean, sp, mc).poison_indices == ds.poison_indices);
  sp.seed = 78;
  CHECK(poison_dataset(clean, sp, mc).poison_indices != ds.poison_indices);

  const auto none = poison_dataset(clean, spec_for(Attack::none), mc);
  CHECK(none.poison_indices.empty());
  for (std::size_t i = 0; i < clean.size(); i += 97) CHECK(none.samples[i].image == clean[i].image);

  std::vector<Sample> few(clean.begin(), clean.begin() + 50);
  CHECK_THROWS_AS(poison_dataset(few, sp, mc), std::invalid_argument);
}

TEST_CASE("trigger search") {
  const auto mc = small_config();
  const Model model(mc);
  const auto clean = generate_clean_task(16, mc, SceneConfig{}, 12);
  const int k = 6;
  const auto ts = optimize_trigger(clean, model, 20, 0.05, k);
  CHECK(ts.patch.size() == static_cast<std::size_t>(k * k * mc.C));
  for (double v : ts.patch) CHECK((v >= 0.0 && v <= 1.0));
  CHECK(ts.objective.size() >= 2u);
  for (std::size_t i = 1; i < ts.objective.size(); ++i) CHECK(ts.objective[i] >= ts.objective[i - 1]);
  CHECK(trigger_objective(clean, model, ts.patch, k) == doctest::Approx(ts.objective.back()).epsilon(1e-12));

  double random_mean = 0;
  for (std::uint64_t s = 0; s < 5; ++s) random_mean += trigger_objective(clean, model, random_patch(ts.patch.size(), s), k) / 5;
  CHECK(ts.objective.back() >= random_mean);

  CHECK_THROWS_AS(optimize_trigger(clean, model, 0, 0.05, k), std::invalid_argument);
  CHECK_THROWS_AS(optimize_trigger(clean, model, 5, 0.05, 0), std::invalid_argument);
  CHECK_THROWS_AS(optimize_trigger(clean, model, 5, 0.05, 33), std::invalid_argument);
  CHECK_THROWS_AS(optimize_trigger({}, model, 5, 0.05, k), std::invalid_argument);
}

TEST_CASE("triggered set and batches") {
  const auto mc = small_config();
  const auto clean = generate_clean_task(6, mc, SceneConfig{}, 13);
  const auto trig = make_triggered_set(clean, spec_for(Attack::trojvqa), mc);
  CHECK(trig.size() == 6u);
  for (const auto& s : trig) CHECK(s.is_poisoned);
  const auto b = make_batch(clean, 2, 5, mc);
  CHECK(b.size == 3u);
  CHECK(b.images.shape() == ad::Shape{3, 32, 32, 3});
  CHECK(b.instruction.size() == 18u);
  CHECK(b.response.size() == 12u);
  CHECK(std::equal(clean[3].image.begin(), clean[3].image.end(), b.images.data().begin() + 32 * 32 * 3));
  const auto bi = make_batch(clean, std::vector<std::size_t>{4, 0}, mc);
  CHECK(std::vector<int>(bi.response.begin(), bi.response.begin() + 4) == clean[4].response);
}
