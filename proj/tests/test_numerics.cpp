#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <map>

#include "fd_check.hpp"
#include "iclgd/prng.hpp"
#include "iclgd/tensor.hpp"

using namespace iclgd;

TEST_CASE("prng streams are deterministic and splittable") {
  Prng a(42), b(42);
  for (int i = 0; i < 100; ++i) REQUIRE(a.next_u64() == b.next_u64());
  Prng c = Prng(42).split("arm-0");
  Prng d = Prng(42).split("arm-1");
  REQUIRE(c.next_u64() != d.next_u64());
  // split is independent of parent draw position
  Prng e(42);
  e.next_u64();
  REQUIRE(e.split("arm-0").next_u64() == Prng(42).split("arm-0").next_u64());
}

TEST_CASE("softmax_rows basics") {
  Tape tape;
  SECTION("symmetry") {
    Tensor out = tape.softmax_rows(tape.constant(Tensor({1, 2}, {0.0, 0.0})));
    REQUIRE(out.data[0] == Catch::Approx(0.5));
    REQUIRE(out.data[1] == Catch::Approx(0.5));
  }
  SECTION("single unmasked entry") {
    Mask m = {1, 0};
    Tensor out =
        tape.softmax_rows(tape.constant(Tensor({1, 2}, {5.0, 123.0})), &m);
    REQUIRE(out.data[0] == 1.0);
    REQUIRE(out.data[1] == 0.0);
  }
  SECTION("rows sum to one within 1e-12, masked entries exactly zero") {
    Prng prng(7);
    Tensor x = gaussian_sample(prng, {4, 6}, 2.0);
    Mask m(24, 1);
    m[3] = m[10] = m[17] = 0;
    Tensor out = tape.softmax_rows(tape.constant(x), &m);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 6; ++c) s += out.data[r * 6 + c];
      REQUIRE(std::abs(s - 1.0) <= 1e-12);
    }
    REQUIRE(out.data[3] == 0.0);
    REQUIRE(out.data[10] == 0.0);
    REQUIRE(out.data[17] == 0.0);
  }
  SECTION("fully-masked row is an error") {
    Mask m = {0, 0};
    REQUIRE_THROWS_WITH(
        tape.softmax_rows(tape.constant(Tensor({1, 2}, {1.0, 2.0})), &m),
        "degenerate attention row");
  }
}

TEST_CASE("softmax jacobian matches central finite differences") {
  Prng prng(3);
  Tensor x = gaussian_sample(prng, {1, 6}, 1.0);
  for (std::size_t j = 0; j < 6; ++j) {
    Tensor pick = Tensor::zeros({1, 6});
    pick.data[j] = 1.0;
    Tape tape;
    Tensor xl = tape.leaf(x, "x");
    Tensor loss = tape.sum_all(tape.mul(tape.softmax_rows(xl),
                                        tape.constant(pick)));
    Tensor analytic = tape.backward(loss).at("x");
    Tensor numeric = fd::gradient(x, [&] {
      Tape t2;
      return t2.softmax_rows(t2.constant(x)).data[j];
    });
    REQUIRE(fd::max_rel_err(analytic, numeric) <= 1e-6);
  }
}

TEST_CASE("layer_norm") {
  Tape tape;
  Tensor gain = Tensor::full({3}, 1.0);
  Tensor bias = Tensor::zeros({3});
  SECTION("constant vector maps to zero") {
    Tensor out = tape.layer_norm_rows(
        tape.constant(Tensor({1, 3}, {4.2, 4.2, 4.2})), tape.constant(gain),
        tape.constant(bias), 1e-5);
    for (double v : out.data) REQUIRE(std::abs(v) <= 1e-9);
  }
  SECTION("zero-mean unit-variance input is nearly identity") {
    double s = std::sqrt(3.0 / 2.0);  // makes the biased variance exactly 1
    Tensor x({1, 3}, {-s, 0.0, s});
    Tensor out = tape.layer_norm_rows(tape.constant(x), tape.constant(gain),
                                      tape.constant(bias), 1e-12);
    for (std::size_t i = 0; i < 3; ++i) {
      REQUIRE(std::abs(out.data[i] - x.data[i]) <= 1e-6);
    }
  }
  SECTION("gradients match finite differences") {
    Prng prng(11);
    Tensor x = gaussian_sample(prng, {2, 5}, 1.0);
    Tensor g = gaussian_sample(prng, {5}, 1.0);
    Tensor b = gaussian_sample(prng, {5}, 1.0);
    auto loss_value = [&] {
      Tape t;
      Tensor out = t.layer_norm_rows(t.constant(x), t.constant(g),
                                     t.constant(b), 1e-5);
      double s = 0.0;
      for (std::size_t i = 0; i < out.size(); ++i)
        s += out.data[i] * std::sin(static_cast<double>(i));
      return s;
    };
    Tape t;
    Tensor xl = t.leaf(x, "x"), gl = t.leaf(g, "g"), bl = t.leaf(b, "b");
    Tensor out = t.layer_norm_rows(xl, gl, bl, 1e-5);
    Tensor w = Tensor::zeros(out.shape);
    for (std::size_t i = 0; i < w.size(); ++i)
      w.data[i] = std::sin(static_cast<double>(i));
    auto grads = t.backward(t.sum_all(t.mul(out, t.constant(w))));
    REQUIRE(fd::max_rel_err(grads.at("x"), fd::gradient(x, loss_value)) <= 1e-6);
    REQUIRE(fd::max_rel_err(grads.at("g"), fd::gradient(g, loss_value)) <= 1e-6);
    REQUIRE(fd::max_rel_err(grads.at("b"), fd::gradient(b, loss_value)) <= 1e-6);
  }
}

TEST_CASE("cross entropy") {
  SECTION("uniform logits over 8 classes") {
    std::vector<double> logits(8, 1.7);
    REQUIRE(cross_entropy_logits(logits, 3) == Catch::Approx(std::log(8.0)));
  }
  SECTION("near-one-hot logits") {
    std::vector<double> logits(8, 0.0);
    logits[5] = 30.0;
    REQUIRE(cross_entropy_logits(logits, 5) <= 1e-12);
  }
  SECTION("out-of-range target") {
    REQUIRE_THROWS_AS(cross_entropy_logits({1.0, 2.0}, 2), std::out_of_range);
    Tape tape;
    REQUIRE_THROWS_AS(
        tape.cross_entropy(tape.constant(Tensor({1, 2}, {1.0, 2.0})), {{0, 5}}),
        std::out_of_range);
  }
  SECTION("gradient equals softmax minus one-hot") {
    Prng prng(5);
    Tensor logits = gaussian_sample(prng, {1, 7}, 1.5);
    Tape tape;
    Tensor ll = tape.leaf(logits, "logits");
    auto grads = tape.backward(tape.cross_entropy(ll, {{0, 2}}));
    // closed form
    Tape t2;
    Tensor p = t2.softmax_rows(t2.constant(logits));
    for (std::size_t c = 0; c < 7; ++c) {
      double expect = p.data[c] - (c == 2 ? 1.0 : 0.0);
      REQUIRE(grads.at("logits").data[c] == Catch::Approx(expect).margin(1e-12));
    }
    Tensor numeric = fd::gradient(logits, [&] {
      return cross_entropy_logits(logits.data, 2);
    });
    REQUIRE(fd::max_rel_err(grads.at("logits"), numeric) <= 1e-6);
  }
}

TEST_CASE("stop_gradient") {
  Prng prng(9);
  Tensor x = gaussian_sample(prng, {3, 3}, 1.0);
  Tape tape;
  Tensor xl = tape.leaf(x, "x");
  SECTION("forward is bitwise identity, also when nested") {
    Tensor s = tape.stop_gradient(xl);
    REQUIRE(s.data == x.data);
    Tensor s2 = tape.stop_gradient(s);
    REQUIRE(s2.data == x.data);
  }
  SECTION("product rule with one branch severed") {
    // d/dx sum(SG(x) * x) = x, not 2x
    Tensor loss = tape.sum_all(tape.mul(tape.stop_gradient(xl), xl));
    Tensor g = tape.backward(loss).at("x");
    for (std::size_t i = 0; i < x.size(); ++i)
      REQUIRE(g.data[i] == Catch::Approx(x.data[i]).margin(1e-14));
  }
  SECTION("parameter reachable only through stop_gradient gets zero") {
    Tensor loss = tape.sum_all(tape.stop_gradient(tape.scale(xl, 3.0)));
    Tensor g = tape.backward(loss).at("x");
    for (double v : g.data) REQUIRE(v == 0.0);
  }
}

TEST_CASE("backward basics") {
  SECTION("loss = sum(W x) has gradient broadcast of x") {
    Tensor w({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor x({3, 1}, {0.5, -1.0, 2.0});
    Tape tape;
    Tensor wl = tape.leaf(w, "w");
    auto grads = tape.backward(tape.sum_all(tape.matmul(wl, tape.constant(x))));
    for (std::size_t r = 0; r < 2; ++r)
      for (std::size_t c = 0; c < 3; ++c)
        REQUIRE(grads.at("w").at(r, c) == Catch::Approx(x.data[c]));
  }
  SECTION("non-scalar loss is an error") {
    Tape tape;
    Tensor a = tape.constant(Tensor({2, 2}, {1, 2, 3, 4}));
    REQUIRE_THROWS_AS(tape.backward(a), std::invalid_argument);
  }
  SECTION("unreached named leaves map to zero") {
    Tape tape;
    Tensor a = tape.leaf(Tensor({1, 1}, {2.0}), "a");
    Tensor b = tape.leaf(Tensor({1, 1}, {5.0}), "b");
    auto grads = tape.backward(tape.sum_all(tape.scale(a, 2.0)));
    REQUIRE(grads.at("a").data[0] == 2.0);
    REQUIRE(grads.at("b").data[0] == 0.0);
  }
}

TEST_CASE("elementwise ops match finite differences on [-2, 2]") {
  Prng prng(21);
  for (int trial = 0; trial < 3; ++trial) {
    Tensor x = Tensor::zeros({2, 4});
    Prng t = prng.split(trial);
    for (auto& v : x.data) v = t.uniform(-2.0, 2.0);
    Tensor w = Tensor::zeros({4, 3});
    for (auto& v : w.data) v = t.uniform(-2.0, 2.0);
    auto loss_value = [&] {
      Tape tp;
      Tensor y = tp.gelu(tp.matmul(tp.constant(x), tp.constant(w)));
      Tensor s = tp.softmax_rows(tp.scale(y, 0.7));
      double acc = 0.0;
      for (std::size_t i = 0; i < s.size(); ++i)
        acc += s.data[i] * std::cos(static_cast<double>(i));
      return acc;
    };
    Tape tp;
    Tensor xl = tp.leaf(x, "x"), wl = tp.leaf(w, "w");
    Tensor s = tp.softmax_rows(tp.scale(tp.gelu(tp.matmul(xl, wl)), 0.7));
    Tensor pick = Tensor::zeros(s.shape);
    for (std::size_t i = 0; i < pick.size(); ++i)
      pick.data[i] = std::cos(static_cast<double>(i));
    auto grads = tp.backward(tp.sum_all(tp.mul(s, tp.constant(pick))));
    REQUIRE(fd::max_rel_err(grads.at("x"), fd::gradient(x, loss_value)) <= 1e-5);
    REQUIRE(fd::max_rel_err(grads.at("w"), fd::gradient(w, loss_value)) <= 1e-5);
  }
}

TEST_CASE("gaussian_sample") {
  SECTION("same seed twice is bitwise identical") {
    Prng a(123), b(123);
    Tensor x = gaussian_sample(a, {32, 32}, 0.7);
    Tensor y = gaussian_sample(b, {32, 32}, 0.7);
    REQUIRE(x.data == y.data);
  }
  SECTION("sigma zero is all zeros") {
    Prng p(1);
    Tensor x = gaussian_sample(p, {100}, 0.0);
    for (double v : x.data) REQUIRE(v == 0.0);
  }
  SECTION("moments at one million samples") {
    Prng p(2024);
    Tensor x = gaussian_sample(p, {1000000}, 1.0);
    double s = 0.0, s2 = 0.0;
    for (double v : x.data) {
      s += v;
      s2 += v * v;
    }
    double mean = s / 1e6;
    double stdv = std::sqrt(s2 / 1e6 - mean * mean);
    REQUIRE(std::abs(mean) <= 0.01);
    REQUIRE(std::abs(stdv - 1.0) <= 0.01);
  }
}
