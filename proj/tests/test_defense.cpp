#include <algorithm>
#include <numeric>
#include <random>

#include "doctest.h"
#include "gradcheck.hpp"
#include "robustit/defense.hpp"
#include "robustit/model.hpp"

using namespace rit;
using ad::Tensor;

namespace {

// Independent top-k oracle: full stable sort by (g descending, index ascending).
std::vector<double> topk_oracle(const std::vector<double>& g, std::size_t k) {
  std::vector<std::size_t> idx(g.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return g[a] > g[b]; });
  std::vector<double> bits(g.size(), 0.0);
  for (std::size_t i = 0; i < k; ++i) bits[idx[i]] = 1.0;
  return bits;
}

ImportanceState state_with(std::vector<double> g, double gamma, double beta = 0.9) {
  auto s = ImportanceState::zeros(g.size(), beta, gamma);
  s.g = std::move(g);
  return s;
}

}  // namespace

TEST_CASE("imc loss") {
  auto a = Tensor::from({1, 2}, {1, 2}), b = Tensor::from({1, 2}, {1, 1});
  auto e = Tensor::from({1, 1}, {0}), f = Tensor::from({1, 1}, {0});
  CHECK(imc_loss(a, b, e, f).item() == 1.0);
  CHECK(imc_loss(a, a, e, e).item() == 0.0);

  std::mt19937_64 rng(3);
  auto h = rit::testing::random_tensor({4, 8}, rng), ha = rit::testing::random_tensor({4, 8}, rng);
  auto x = rit::testing::random_tensor({4, 5}, rng), xa = rit::testing::random_tensor({4, 5}, rng);
  const double base = imc_loss(h, ha, x, xa).item();
  const double c = 1.7;
  CHECK(imc_loss(ad::scale(h, c), ad::scale(ha, c), ad::scale(x, c), ad::scale(xa, c)).item() ==
        doctest::Approx(c * c * base).epsilon(1e-12));
  double hand = 0;
  for (std::size_t i = 0; i < 32; ++i) hand += (h.at(i) - ha.at(i)) * (h.at(i) - ha.at(i));
  for (std::size_t i = 0; i < 20; ++i) hand += (x.at(i) - xa.at(i)) * (x.at(i) - xa.at(i));
  CHECK(base == doctest::Approx(hand / 4).epsilon(1e-12));

  // Both branches carry gradient.
  auto rep = rit::testing::gradcheck([&] { return imc_loss(h, ha, x, xa); }, {h, ha, x, xa});
  CHECK(rep.rel_error < 1e-8);
  CHECK(h.has_grad());
  CHECK(ha.has_grad());
  CHECK_THROWS_AS(imc_loss(a, Tensor::from({1, 3}, {1, 2, 3}), e, f), std::invalid_argument);
}

TEST_CASE("batch importance") {
  auto z = batch_importance(Tensor::zeros({2, 1, 3, 4}));
  CHECK(z == std::vector<double>(4, 0.0));
  CHECK(batch_importance(Tensor::from({1, 1, 1, 2}, {3, -4})) == std::vector<double>{-3, -4});

  std::mt19937_64 rng(4);
  auto X = rit::testing::random_tensor({2, 1, 5, 3}, rng, -2, 2, false);
  const auto b = batch_importance(X);
  for (double v : b) CHECK(v <= 0.0);
  // Permute the token axis.
  std::vector<double> p(X.numel());
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t n = 0; n < 5; ++n)
      for (std::size_t d = 0; d < 3; ++d) p[(bi * 5 + n) * 3 + d] = X.at((bi * 5 + (n + 2) % 5) * 3 + d);
  const auto bp = batch_importance(Tensor::from({2, 1, 5, 3}, p));
  for (std::size_t d = 0; d < 3; ++d) CHECK(bp[d] == doctest::Approx(b[d]).epsilon(1e-14));
  // Direct mean-abs oracle.
  for (std::size_t d = 0; d < 3; ++d) {
    double s = 0;
    for (std::size_t i = d; i < X.numel(); i += 3) s += std::fabs(X.at(i));
    CHECK(b[d] == doctest::Approx(-s / 10).epsilon(1e-14));
  }
}

TEST_CASE("importance update") {
  auto s = state_with({-1, -2}, 0.5, 1.0);
  auto up = update_importance(s, {5, 7});
  CHECK(up.g == std::vector<double>{-1, -2});
  CHECK(up.step == 1u);
  s.beta = 0.0;
  CHECK(update_importance(s, {-3, -4}).g == std::vector<double>{-3, -4});
  auto z = ImportanceState::zeros(2, 0.9, 0.5);
  auto g = update_importance(z, {-1, -2}).g;
  CHECK(g[0] == doctest::Approx(-0.1).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(-0.2).epsilon(1e-15));
  CHECK_THROWS_AS(update_importance(z, {-1, -2, -3}), std::invalid_argument);
}

TEST_CASE("mask construction") {
  auto m = build_mask(state_with({-0.1, -0.5, -0.2, -0.9}, 0.5));
  CHECK(m.bits == std::vector<double>{1, 0, 1, 0});
  CHECK(m.k == 2u);
  CHECK(m.kept() == std::vector<std::size_t>{0, 2});
  CHECK(build_mask(state_with({-0.1, -0.5, -0.2, -0.9}, 1.0)).bits == std::vector<double>(4, 1.0));
  CHECK(build_mask(state_with({-0.3, -0.3, -0.3, -0.3}, 0.5)).bits == std::vector<double>{1, 1, 0, 0});
  CHECK_THROWS_AS(build_mask(state_with({-1, -2, -3}, 0.3)), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(state_with({-1, -2}, 0.0)), std::invalid_argument);
  CHECK_THROWS_AS(build_mask(state_with({-1, -2}, 1.5)), std::invalid_argument);
}

TEST_CASE("mask agrees with a sort oracle and ignores affine rescaling") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> U(-3, 0), G(0.05, 1.0);
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> g(64);
    // Round to a coarse grid so ties actually occur.
    for (auto& v : g) v = std::round(U(rng) * 4) / 4;
    const double gamma = G(rng);
    const auto k = static_cast<std::size_t>(std::floor(gamma * 64));
    if (k == 0) continue;
    const auto m = build_mask(state_with(g, gamma));
    CHECK(m.bits == topk_oracle(g, k));
    CHECK(static_cast<std::size_t>(std::count(m.bits.begin(), m.bits.end(), 1.0)) == k);
    std::vector<double> r(g);
    for (auto& v : r) v = 2.5 * v + 7.0;
    CHECK(build_mask(state_with(r, gamma)).bits == m.bits);
  }
}

TEST_CASE("aar step composes update and mask") {
  std::mt19937_64 rng(5);
  auto X = rit::testing::random_tensor({2, 1, 4, 8}, rng, -1, 1, false);
  auto [m1, s1] = aar_step(ImportanceState::zeros(8, 0.9, 0.5), X);
  std::vector<double> expect = batch_importance(X);
  for (auto& v : expect) v *= 0.1;
  for (std::size_t d = 0; d < 8; ++d) CHECK(s1.g[d] == doctest::Approx(expect[d]).epsilon(1e-14));
  CHECK(m1.bits == topk_oracle(expect, 4));
  auto [m2, s2] = aar_step(s1, X);
  CHECK(m2.bits == m1.bits);
  CHECK(s2.step == 2u);
  auto [all, s3] = aar_step(ImportanceState::zeros(8, 0.9, 1.0), X);
  CHECK(all.bits == std::vector<double>(8, 1.0));
  (void)s3;
}

TEST_CASE("importance stays inside its convex bound") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> B(0, 1);
  for (int trial = 0; trial < 20; ++trial) {
    auto s = ImportanceState::zeros(16, B(rng), 0.5);
    std::vector<double> lowest(16, 0.0);
    for (int step = 0; step < 50; ++step) {
      auto X = rit::testing::random_tensor({2, 1, 3, 16}, rng, -5, 5, false);
      const auto b = batch_importance(X);
      for (std::size_t d = 0; d < 16; ++d) lowest[d] = std::min(lowest[d], b[d]);
      s = update_importance(s, b);
      for (std::size_t d = 0; d < 16; ++d) {
        CHECK(std::isfinite(s.g[d]));
        CHECK(s.g[d] <= 0.0);
        CHECK(s.g[d] >= lowest[d] - 1e-12);
      }
      CHECK(build_mask(s).k == 8u);
    }
  }
}

TEST_CASE("weight overwrite zeroes suppressed rows") {
  ModelConfig mc;
  mc.hidden = 16;
  Model m(mc);
  ChannelMask mask;
  mask.bits.assign(64, 1.0);
  mask.bits[3] = mask.bits[60] = 0.0;
  mask.k = 62;
  const auto before = m.params().adapter_w.data();
  overwrite_adapter_weights(m.params(), mask);
  const auto& w = m.params().adapter_w.data();
  for (std::size_t r = 0; r < 64; ++r)
    for (std::size_t c = 0; c < 64; ++c) CHECK(w[r * 64 + c] == (mask.bits[r] ? before[r * 64 + c] : 0.0));
  mask.bits.resize(8);
  CHECK_THROWS_AS(overwrite_adapter_weights(m.params(), mask), std::invalid_argument);
}
