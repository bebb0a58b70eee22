#include <cmath>
#include <random>

#include "cdtta/batch_norm.hpp"
#include "cdtta/ops.hpp"
#include "doctest.h"
#include "error_kind.hpp"
#include "gradcheck.hpp"

using namespace cdtta;
using cdtta::testing::catch_error;
using cdtta::testing::max_rel_err;
using cdtta::testing::numeric_gradient;
using cdtta::testing::random_tensor;

namespace {

BnBranchBank<double> make_bank(std::size_t c, std::size_t k, double alpha, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.5, 1.5), m(-0.5, 0.5);
  std::vector<double> gamma(c), beta(c);
  ChannelStats src{std::vector<double>(c), std::vector<double>(c)};
  for (std::size_t i = 0; i < c; ++i) {
    gamma[i] = u(rng);
    beta[i] = m(rng);
    src.means[i] = m(rng);
    src.vars[i] = u(rng);
  }
  return BnBranchBank<double>::init_branches(gamma, beta, src, k, alpha);
}

double probe(const TensorD& out, const TensorD& r) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * r.data()[i];
  return s;
}

}  // namespace

TEST_SUITE("bn_multibranch") {
  TEST_CASE("alpha = 1 normalises with the source statistics exactly") {
    const auto bank = make_bank(3, 1, 1.0, 1);
    std::mt19937_64 rng(1);
    const auto x = random_tensor({2, 3, 4, 4}, rng, -2, 2);
    const auto y = bn_forward(x, bank, 0).output;
    const auto& s = bank.source();
    const auto& p = bank.branch(0);
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < 16; ++i) {
          const double want =
              p.gamma[c] * (x.plane(n, c)[i] - s.means[c]) / std::sqrt(s.vars[c] + kBnEpsilon) + p.beta[c];
          CHECK(y.plane(n, c)[i] == doctest::Approx(want).epsilon(1e-12));
        }
  }

  TEST_CASE("alpha = 0 with unit affine is plain batch normalisation") {
    ChannelStats src{{5, -5}, {9, 9}};
    const std::vector<double> g{1, 1}, b{0, 0};
    const auto bank = BnBranchBank<double>::init_branches(g, b, src, 1, 0.0);
    std::mt19937_64 rng(2);
    const auto x = random_tensor({3, 2, 5, 5}, rng, -4, 4);
    const auto st = channel_statistics(bn_forward(x, bank, 0).output, StatsScope::per_batch).front();
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(std::abs(st.means[c]) < 1e-5);
      CHECK(std::abs(st.vars[c] - 1.0) < 1e-5);
    }
  }

  TEST_CASE("mixing applies alpha to means and to variances") {
    ChannelStats src{{1.0}, {4.0}};
    const std::vector<double> g{1}, b{0};
    const auto bank = BnBranchBank<double>::init_branches(g, b, src, 1, 0.25);
    const TensorD x({1, 1, 1, 2}, std::vector<double>{2, 4});  // target mean 3, var 1
    const auto y = bn_forward(x, bank, 0).output;
    const double mu = 0.25 * 1 + 0.75 * 3, var = 0.25 * 4 + 0.75 * 1;
    CHECK(y.data()[0] == doctest::Approx((2 - mu) / std::sqrt(var + kBnEpsilon)).epsilon(1e-14));
    CHECK(y.data()[1] == doctest::Approx((4 - mu) / std::sqrt(var + kBnEpsilon)).epsilon(1e-14));
  }

  TEST_CASE("default constants") {
    CHECK(kDefaultAlpha == 0.9);
    CHECK(kBnEpsilon == 1e-5);
  }

  TEST_CASE("forward reports raw target statistics") {
    const auto bank = make_bank(2, 1, 0.9, 3);
    std::mt19937_64 rng(3);
    const auto x = random_tensor({2, 2, 3, 3}, rng);
    const auto fw = bn_forward(x, bank, 0);
    const auto ref = channel_statistics(x, StatsScope::per_batch).front();
    for (std::size_t c = 0; c < 2; ++c) {
      CHECK(fw.target.means[c] == doctest::Approx(ref.means[c]).epsilon(1e-12));
      CHECK(fw.target.vars[c] == doctest::Approx(ref.vars[c]).epsilon(1e-12));
    }
  }

  TEST_CASE("backward: zero upstream gives zero gradients, and gradients are linear in upstream") {
    const auto bank = make_bank(3, 2, 0.9, 4);
    std::mt19937_64 rng(4);
    const auto x = random_tensor({2, 3, 4, 4}, rng);
    const auto fw = bn_forward(x, bank, 1);
    const auto z = bn_backward(TensorD(x.shape()), fw.context, bank);
    for (double v : z.gamma) CHECK(v == 0.0);
    for (double v : z.beta) CHECK(v == 0.0);
    for (double v : z.input.data()) CHECK(v == 0.0);

    const auto r = random_tensor(x.shape(), rng);
    TensorD r2 = r;
    for (auto& v : r2.data()) v *= 2;
    const auto g1 = bn_backward(r, fw.context, bank);
    const auto g2 = bn_backward(r2, fw.context, bank);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(g2.gamma[c] == doctest::Approx(2 * g1.gamma[c]).epsilon(1e-14));
      CHECK(g2.beta[c] == doctest::Approx(2 * g1.beta[c]).epsilon(1e-14));
    }
    for (std::size_t i = 0; i < x.size(); ++i)
      CHECK(g2.input.data()[i] == doctest::Approx(2 * g1.input.data()[i]).epsilon(1e-14));
  }

  TEST_CASE("property: affine gradients match finite differences over 100 seeds") {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      auto bank = make_bank(3, 2, 0.9, seed);
      std::mt19937_64 rng(seed);
      const auto x = random_tensor({2, 3, 3, 4}, rng, -2, 2);
      const auto r = random_tensor(x.shape(), rng);
      const std::size_t k = seed % 2;
      const auto fw = bn_forward(x, bank, k);
      const auto g = bn_backward(r, fw.context, bank);
      // gamma and beta never enter the statistics, so these are exact frozen-statistics checks.
      auto& p = bank.branch_params(k);
      const auto f = [&] { return probe(bn_forward(x, bank, k).output, r); };
      worst = std::max(worst, max_rel_err(g.gamma, numeric_gradient(p.gamma, f)));
      worst = std::max(worst, max_rel_err(g.beta, numeric_gradient(p.beta, f)));
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("input gradient treats the mixed statistics as constants") {
    // With alpha = 1 the statistics do not depend on the input, so finite differences
    // of the input see exactly what the stop-gradient backward computes.
    auto bank = make_bank(2, 1, 1.0, 5);
    std::mt19937_64 rng(5);
    auto x = random_tensor({2, 2, 3, 3}, rng);
    const auto r = random_tensor(x.shape(), rng);
    const auto g = bn_backward(r, bn_forward(x, bank, 0).context, bank);
    const auto num = numeric_gradient(x.storage(), [&] { return probe(bn_forward(x, bank, 0).output, r); });
    CHECK(max_rel_err({g.input.data().begin(), g.input.data().end()}, num) < 1e-6);
  }

  TEST_CASE("init_branches copies the pretrained pair K times") {
    const auto bank = make_bank(4, 3, 0.9, 6);
    CHECK(bank.branch_count() == 3);
    CHECK(bank.branch(0) == bank.branch(1));
    CHECK(bank.branch(1) == bank.branch(2));
    std::mt19937_64 rng(6);
    const auto x = random_tensor({2, 4, 3, 3}, rng);
    const auto y0 = bn_forward(x, bank, 0).output;
    CHECK(bn_forward(x, bank, 1).output == y0);
    CHECK(bn_forward(x, bank, 2).output == y0);
  }

  TEST_CASE("init_branches validation") {
    ChannelStats src{{0, 0}, {1, 1}};
    const std::vector<double> g{1, 1}, b{0, 0};
    const auto k0 = catch_error([&] { BnBranchBank<double>::init_branches(g, b, src, 0, 0.9); });
    CHECK(k0.kind == ErrorKind::invalid_config);
    CHECK(catch_error([&] { BnBranchBank<double>::init_branches(g, b, src, 1, 1.5); }).kind ==
          ErrorKind::invalid_config);
    ChannelStats neg{{0, 0}, {1, -1}};
    CHECK(catch_error([&] { BnBranchBank<double>::init_branches(g, b, neg, 1, 0.9); }).kind ==
          ErrorKind::invalid_config);
    const std::vector<double> short_g{1};
    CHECK(catch_error([&] { BnBranchBank<double>::init_branches(short_g, b, src, 1, 0.9); }).kind ==
          ErrorKind::invalid_config);
  }

  TEST_CASE("K = 1 bank behaves as single-branch BN") {
    const auto one = make_bank(3, 1, 0.9, 7);
    const auto three = make_bank(3, 3, 0.9, 7);
    std::mt19937_64 rng(7);
    const auto x = random_tensor({2, 3, 4, 4}, rng);
    CHECK(bn_forward(x, one, 0).output == bn_forward(x, three, 2).output);
  }

  TEST_CASE("branch index out of range is rejected") {
    const auto bank = make_bank(2, 2, 0.9, 8);
    const TensorD x({1, 2, 2, 2}, 0.5);
    CHECK(catch_error([&] { bn_forward(x, bank, 2); }).kind == ErrorKind::invalid_branch);
    const TensorD wrong({1, 3, 2, 2}, 0.5);
    CHECK(catch_error([&] { bn_forward(wrong, bank, 0); }).kind == ErrorKind::invalid_shape);
  }

  TEST_CASE("backward rejects a context from an older forward pass") {
    const auto bank = make_bank(2, 1, 0.9, 9);
    std::mt19937_64 rng(9);
    const auto x = random_tensor({1, 2, 3, 3}, rng);
    const auto first = bn_forward(x, bank, 0);
    const auto second = bn_forward(x, bank, 0);
    CHECK(catch_error([&] { bn_backward(x, first.context, bank); }).kind == ErrorKind::stale_context);
    CHECK_FALSE(catch_error([&] { bn_backward(x, second.context, bank); }).kind.has_value());
    CHECK(catch_error([&] { bn_backward(x, BnContext<double>{}, bank); }).kind == ErrorKind::stale_context);
    const auto other = make_bank(2, 1, 0.9, 9);
    CHECK(catch_error([&] { bn_backward(x, second.context, other); }).kind == ErrorKind::stale_context);
  }

  TEST_CASE("property: alpha = 1 output does not depend on batch composition") {
    const auto bank = make_bank(3, 1, 1.0, 10);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const auto a = random_tensor({3, 3, 4, 4}, rng, -3, 3);
      auto b = random_tensor({2, 3, 4, 4}, rng, -3, 3);
      std::ranges::copy(a.sample(1), b.sample(0).begin());
      const auto ya = bn_forward(a, bank, 0).output;
      const auto yb = bn_forward(b, bank, 0).output;
      CHECK(std::ranges::equal(ya.sample(1), yb.sample(0)));
    }
  }

  TEST_CASE("epsilon keeps constant channels finite") {
    ChannelStats src{{0}, {0}};
    const auto bank = BnBranchBank<float>::init_branches(std::vector<float>{1.0f}, std::vector<float>{0.0f}, src, 1, 0.0);
    const Tensor x({2, 1, 3, 3}, 4.0f);
    const auto fw = bn_forward(x, bank, 0);
    CHECK(fw.output.all_finite());
    CHECK(bn_backward(x, fw.context, bank).input.all_finite());
  }

  TEST_CASE("branch isolation: updating one branch leaves the others bit-unchanged") {
    auto bank = make_bank(3, 3, 0.9, 11);
    const auto before0 = bank.branch(0);
    const auto before2 = bank.branch(2);
    const auto source = bank.source();
    for (auto& v : bank.branch_params(1).gamma) v -= 0.01;
    CHECK(bank.branch(0) == before0);
    CHECK(bank.branch(2) == before2);
    CHECK(bank.source() == source);
    CHECK_FALSE(bank.branch(1) == before0);
  }

  TEST_CASE("running statistics update") {
    ChannelStats running{{1.0, 2.0}, {1.0, 4.0}};
    update_running_stats(running, ChannelStats{{3.0, 2.0}, {2.0, 0.0}}, 0.1);
    CHECK(running.means[0] == doctest::Approx(1.2));
    CHECK(running.means[1] == doctest::Approx(2.0));
    CHECK(running.vars[0] == doctest::Approx(1.1));
    CHECK(running.vars[1] == doctest::Approx(3.6));
  }
}
