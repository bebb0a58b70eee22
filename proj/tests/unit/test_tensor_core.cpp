#include <cmath>
#include <random>
#include <sstream>

#include "cdtta/ops.hpp"
#include "cdtta/parallel.hpp"
#include "cdtta/tensor_io.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cdtta;
using cdtta::testing::max_rel_err;
using cdtta::testing::numeric_gradient;
using cdtta::testing::random_tensor;

namespace {

// <out, r> for a fixed random probe r, so d/dx = backward(r).
double probe(const TensorD& out, const TensorD& r) {
  double s = 0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.data()[i] * r.data()[i];
  return s;
}

std::vector<double> as_vec(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST_SUITE("tensor_core") {
  TEST_CASE("tensor construction checks the data length") {
    CHECK_THROWS_AS(TensorD(Shape{1, 2, 2, 2}, std::vector<double>(7)), Error);
    try {
      TensorD(Shape{1, 2, 2, 2}, std::vector<double>(7));
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::invalid_shape);
    }
    TensorD ok(Shape{2, 3, 4, 5});
    CHECK(ok.size() == 120);
  }

  TEST_CASE("conv2d with a unit 1x1 kernel is the identity") {
    std::mt19937_64 rng(1);
    const auto x = random_tensor({2, 1, 5, 4}, rng);
    const TensorD k({1, 1, 1, 1}, 1.0);
    const std::vector<double> b{0.0};
    CHECK(conv2d(x, k, std::span<const double>(b), 1, 0) == x);
  }

  TEST_CASE("conv2d with zero weights outputs the bias") {
    std::mt19937_64 rng(2);
    const auto x = random_tensor({1, 3, 6, 6}, rng);
    const TensorD k({2, 3, 3, 3}, 0.0);
    const std::vector<double> b{0.25, -1.5};
    const auto y = conv2d(x, k, std::span<const double>(b), 1, 1);
    CHECK(y.shape() == Shape{1, 2, 6, 6});
    for (double v : y.plane(0, 0)) CHECK(v == 0.25);
    for (double v : y.plane(0, 1)) CHECK(v == -1.5);
  }

  TEST_CASE("conv2d output shape and shape errors") {
    const TensorD x({1, 3, 9, 7});
    const TensorD k({4, 3, 3, 3});
    const std::vector<double> b(4, 0.0);
    CHECK(conv2d(x, k, std::span<const double>(b), 2, 1).shape() == Shape{1, 4, 5, 4});
    CHECK(conv2d(x, k, std::span<const double>(b), 1, 0).shape() == Shape{1, 4, 7, 5});
    const TensorD wrong({4, 2, 3, 3});
    CHECK_THROWS_AS(conv2d(x, wrong, std::span<const double>(b), 1, 1), Error);
  }

  TEST_CASE("conv2d gradients match central differences on a 2x1x3x3 input") {
    std::mt19937_64 rng(3);
    auto x = random_tensor({2, 1, 3, 3}, rng);
    auto k = random_tensor({1, 1, 3, 3}, rng);
    std::vector<double> b{0.3};
    const auto r = random_tensor(conv2d(x, k, std::span<const double>(b), 1, 1).shape(), rng);
    const auto g = conv2d_backward(x, k, 1, 1, r);
    const auto f = [&] { return probe(conv2d(x, k, std::span<const double>(b), 1, 1), r); };
    CHECK(max_rel_err(as_vec(g.input), numeric_gradient(x.storage(), f)) < 1e-6);
    CHECK(max_rel_err(as_vec(g.weights), numeric_gradient(k.storage(), f)) < 1e-6);
    CHECK(max_rel_err(g.bias, numeric_gradient(b, f)) < 1e-6);
  }

  TEST_CASE("property: differentiable ops pass finite differences over 100 seeds") {
    double worst = 0;
    // Entries below 1e-4 in magnitude are compared absolutely, and h = 1e-5 balances truncation
    // against the rounding noise of the probe sum; both otherwise swamp near-zero gradients.
    const auto rel = [](const std::vector<double>& a, const std::vector<double>& n) { return max_rel_err(a, n, 1e-4); };
    const auto num = [](std::vector<double>& x, const std::function<double()>& f) { return numeric_gradient(x, f, 1e-5); };
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const int stride = 1 + static_cast<int>(seed % 2);
      auto x = random_tensor({2, 2, 5, 6}, rng);
      auto k = random_tensor({3, 2, 3, 3}, rng);
      std::vector<double> b{0.1, -0.2, 0.3};
      const auto conv = [&] { return conv2d(x, k, std::span<const double>(b), stride, 1); };
      const auto r = random_tensor(conv().shape(), rng);
      const auto g = conv2d_backward(x, k, stride, 1, r);
      const auto f = [&] { return probe(conv(), r); };
      worst = std::max(worst, rel(as_vec(g.input), num(x.storage(), f)));
      worst = std::max(worst, rel(as_vec(g.weights), num(k.storage(), f)));

      auto s = random_tensor({2, 4, 3, 3}, rng, -3, 3);
      const auto rs = random_tensor(s.shape(), rng);
      const auto gs = softmax_channels_backward(softmax_channels(s), rs);
      worst = std::max(worst, rel(as_vec(gs), num(s.storage(), [&] {
                                            return probe(softmax_channels(s), rs);
                                          })));

      auto u = random_tensor({1, 2, 3, 4}, rng);
      const int factor = 1 + static_cast<int>(seed % 4);
      const auto ru = random_tensor(upsample_bilinear(u, factor).shape(), rng);
      const auto gu = upsample_bilinear_backward(ru, factor, u.shape());
      worst = std::max(worst, rel(as_vec(gu), num(u.storage(), [&] {
                                            return probe(upsample_bilinear(u, factor), ru);
                                          })));

      // Keep relu inputs away from the kink.
      auto v = random_tensor({1, 2, 4, 4}, rng);
      for (auto& e : v.data()) e = e < 0 ? e - 0.1 : e + 0.1;
      const auto rv = random_tensor(v.shape(), rng);
      const auto gv = relu_backward(v, rv);
      worst = std::max(worst, rel(as_vec(gv), num(v.storage(), [&] {
                                            return probe(relu(v), rv);
                                          })));
    }
    CHECK(worst < 1e-5);
  }

  TEST_CASE("relu values and gradient mask") {
    const TensorD x({1, 1, 1, 3}, std::vector<double>{-1, 0, 2});
    CHECK(as_vec(relu(x)) == std::vector<double>{0, 0, 2});
    const TensorD pos({1, 1, 1, 3}, std::vector<double>{0.5, 1, 2});
    CHECK(relu(pos) == pos);
    const TensorD up({1, 1, 1, 3}, std::vector<double>{7, 7, 7});
    const auto g = relu_backward(x, up);
    CHECK(g.data()[0] == 0.0);
    CHECK(g.data()[1] == 0.0);
    CHECK(g.data()[2] == 7.0);
  }

  TEST_CASE("softmax closed forms") {
    const auto zero = softmax_channels(TensorD({1, 5, 2, 2}, 0.0));
    for (double v : zero.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));

    const auto big = softmax_channels(TensorD({1, 2, 1, 1}, std::vector<double>{1000, 0}));
    CHECK(big.all_finite());
    CHECK(big.data()[0] == doctest::Approx(1.0));
    CHECK(big.data()[1] == doctest::Approx(0.0));

    const auto ln2 = softmax_channels(TensorD({1, 2, 1, 1}, std::vector<double>{std::log(2.0), 0}));
    CHECK(ln2.data()[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(ln2.data()[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  }

  TEST_CASE("property: softmax is non-negative and sums to one for arbitrary finite logits") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const double scale = std::pow(10.0, static_cast<double>(seed % 5));
      const auto p = softmax_channels(random_tensor({2, 6, 3, 3}, rng, -scale, scale).cast<float>());
      for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t i = 0; i < 9; ++i) {
          double s = 0;
          for (std::size_t c = 0; c < 6; ++c) {
            const float v = p.plane(n, c)[i];
            CHECK(v >= 0.0f);
            s += v;
          }
          CHECK(std::abs(s - 1.0) <= 1e-6);
        }
    }
  }

  TEST_CASE("upsample: factor 1 is the identity and constants stay constant") {
    std::mt19937_64 rng(4);
    const auto x = random_tensor({2, 3, 4, 5}, rng);
    CHECK(upsample_bilinear(x, 1) == x);
    const auto c = upsample_bilinear(TensorD({1, 2, 3, 3}, 0.7), 4);
    CHECK(c.shape() == Shape{1, 2, 12, 12});
    for (double v : c.data()) CHECK(v == doctest::Approx(0.7).epsilon(1e-15));
  }

  TEST_CASE("channel statistics examples") {
    const auto k = channel_statistics(TensorD({1, 1, 3, 3}, 3.0), StatsScope::per_sample);
    CHECK(k.size() == 1);
    CHECK(k[0].means[0] == 3.0);
    CHECK(k[0].vars[0] == 0.0);

    const auto two = channel_statistics(TensorD({1, 1, 1, 2}, std::vector<double>{1, 3}), StatsScope::per_sample);
    CHECK(two[0].means[0] == 2.0);
    CHECK(two[0].vars[0] == 1.0);

    std::mt19937_64 rng(5);
    const auto one = random_tensor({1, 3, 4, 4}, rng);
    TensorD same({3, 3, 4, 4});
    for (std::size_t n = 0; n < 3; ++n) std::ranges::copy(one.sample(0), same.sample(n).begin());
    const auto batch = channel_statistics(same, StatsScope::per_batch);
    const auto single = channel_statistics(one, StatsScope::per_sample);
    REQUIRE(batch.size() == 1);
    for (std::size_t c = 0; c < 3; ++c) {
      CHECK(batch[0].means[c] == doctest::Approx(single[0].means[c]).epsilon(1e-12));
      CHECK(batch[0].vars[c] == doctest::Approx(single[0].vars[c]).epsilon(1e-12));
    }
  }

  TEST_CASE("property: channel statistics are shift-equivariant with non-negative variance") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const auto x = random_tensor({2, 3, 4, 4}, rng, -5, 5);
      const double shift = std::uniform_real_distribution<double>(-10, 10)(rng);
      TensorD y = x;
      for (auto& v : y.data()) v += shift;
      for (auto scope : {StatsScope::per_sample, StatsScope::per_batch}) {
        const auto a = channel_statistics(x, scope);
        const auto b = channel_statistics(y, scope);
        for (std::size_t s = 0; s < a.size(); ++s)
          for (std::size_t c = 0; c < 3; ++c) {
            CHECK(a[s].vars[c] >= 0.0);
            CHECK(std::abs(b[s].means[c] - (a[s].means[c] + shift)) <= 1e-6);
            CHECK(std::abs(b[s].vars[c] - a[s].vars[c]) <= 1e-6);
          }
      }
    }
  }

  TEST_CASE("gather and stack preserve sample order") {
    std::mt19937_64 rng(6);
    const auto x = random_tensor({4, 2, 3, 3}, rng);
    const std::vector<std::size_t> idx{3, 1};
    const auto g = gather_samples(x, std::span<const std::size_t>(idx));
    CHECK(std::ranges::equal(g.sample(0), x.sample(3)));
    CHECK(std::ranges::equal(g.sample(1), x.sample(1)));
    const std::vector<TensorD> parts{gather_samples(x, std::vector<std::size_t>{0}),
                                     gather_samples(x, std::vector<std::size_t>{2})};
    const auto st = stack_samples(std::span<const TensorD>(parts));
    CHECK(std::ranges::equal(st.sample(1), x.sample(2)));
  }

  TEST_CASE("CDT1 round trip in both precisions") {
    std::mt19937_64 rng(7);
    const auto d = random_tensor({2, 3, 4, 5}, rng);
    const auto f = d.cast<float>();
    std::stringstream ss;
    write_tensor(ss, d);
    write_tensor(ss, f);
    const auto bd = read_cdt1(ss);
    const auto bf = read_cdt1(ss);
    CHECK(bd.precision == Precision::dual);
    CHECK(bf.precision == Precision::single);
    CHECK(bd.dims == std::vector<std::uint32_t>{2, 3, 4, 5});
    CHECK(block_to_tensor<double>(bd) == d);
    CHECK(block_to_tensor<float>(bf) == f);
  }

  TEST_CASE("CDT1 layout is little-endian with the documented header") {
    std::stringstream ss;
    const std::vector<std::uint32_t> dims{2};
    const std::vector<float> vals{1.0f, -2.0f};
    write_cdt1(ss, std::span<const std::uint32_t>(dims), std::span<const float>(vals));
    const std::string bytes = ss.str();
    REQUIRE(bytes.size() == 4 + 1 + 1 + 4 + 8);
    CHECK(bytes.substr(0, 4) == "CDT1");
    CHECK(bytes[4] == 0);  // single
    CHECK(bytes[5] == 1);  // rank
    CHECK(static_cast<unsigned char>(bytes[6]) == 2);
    CHECK(bytes[7] == 0);
    // 1.0f = 0x3f800000 little-endian
    CHECK(static_cast<unsigned char>(bytes[10]) == 0x00);
    CHECK(static_cast<unsigned char>(bytes[13]) == 0x3f);
  }

  TEST_CASE("CDT1 rejects bad magic, unknown precision and truncation") {
    const auto kind_of = [](const std::string& bytes) {
      std::stringstream ss(bytes);
      try {
        read_cdt1(ss);
      } catch (const Error& e) {
        return e.kind();
      }
      return ErrorKind::numeric;
    };
    std::stringstream ss;
    write_tensor(ss, TensorD({1, 1, 2, 2}, 1.0));
    std::string good = ss.str();
    std::string magic = good;
    magic[0] = 'X';
    std::string tag = good;
    tag[4] = 9;
    CHECK(kind_of(magic) == ErrorKind::format);
    CHECK(kind_of(tag) == ErrorKind::format);
    CHECK(kind_of(good.substr(0, good.size() - 3)) == ErrorKind::format);
    CHECK(kind_of(good.substr(0, 7)) == ErrorKind::format);
  }

  TEST_CASE("parallel_for covers every index once") {
    std::vector<int> hits(1000, 0);
    parallel_for(hits.size(), [&](std::size_t i) { hits[i] += 1; });
    CHECK(std::ranges::all_of(hits, [](int h) { return h == 1; }));
    CHECK(thread_budget() >= 1);
  }
}
