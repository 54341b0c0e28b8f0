#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>

#include "olfsl/adam.hpp"
#include "olfsl/tape.hpp"
#include "olfsl/tensor.hpp"
#include "support.hpp"

using namespace olfsl;
using namespace testsup;

TEST_CASE("tensor shape invariants") {
  CHECK_THROWS_AS(Tensor<double>({2, 3}, {1.0, 2.0}), LogicError);
  CHECK_THROWS_AS(Tensor<double>({0}, {}), LogicError);
  CHECK_THROWS_AS(Tensor<double>({2, -1}, {1.0, 2.0}), LogicError);
  Tensor<double> t({2, 2}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK(t.at(1, 0) == 3.0);
  CHECK_FALSE(t.attached());
}

TEST_CASE("conv2d shape arithmetic 84x84x3 -> 84x84x64") {
  Rng rng(7);
  auto x = random_tensor({84, 84, 3}, rng);
  auto k = random_tensor({3, 3, 3, 64}, rng, -0.1, 0.1);
  auto y = conv2d(x, k, 1, 1);
  CHECK(y.shape == Shape{84, 84, 64});
}

TEST_CASE("conv2d identity kernel reproduces input") {
  Rng rng(8);
  auto x = random_tensor({6, 5, 1}, rng);
  auto k = Tensor<double>::zeros({3, 3, 1, 1});
  k.at(1, 1, 0, 0) = 1.0;  // center tap
  auto y = conv2d(x, k, 1, 1);
  CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("conv2d matches brute-force oracle") {
  Rng rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int cin = 1 + static_cast<int>(rng.bounded(3));
    const int cout = 1 + static_cast<int>(rng.bounded(3));
    const int h = 6 + static_cast<int>(rng.bounded(4));
    const int w = 6 + static_cast<int>(rng.bounded(4));
    const int stride = 1 + static_cast<int>(rng.bounded(2));
    const int padding = static_cast<int>(rng.bounded(2));
    auto x = random_tensor({h, w, cin}, rng);
    auto k = random_tensor({3, 3, cin, cout}, rng);
    auto got = conv2d(x, k, stride, padding);
    auto want = conv2d_oracle(x, k, stride, padding);
    CHECK(max_abs_diff(got, want) < kTightTol);
  }
}

TEST_CASE("conv2d channel mismatch is fatal") {
  Rng rng(10);
  auto x = random_tensor({6, 6, 2}, rng);
  auto k = random_tensor({3, 3, 3, 4}, rng);
  CHECK_THROWS_AS(conv2d(x, k, 1, 1), ConfigError);
}

TEST_CASE("max_pool2d hand example") {
  Tensor<double> x({4, 4, 1}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
  auto y = max_pool2d(x, 2, 2);
  CHECK(y.shape == Shape{2, 2, 1});
  CHECK(y.data == std::vector<double>{6, 8, 14, 16});
}

TEST_CASE("max_pool2d constant input stays constant") {
  auto x = Tensor<double>::full({5, 5, 2}, 3.25);
  auto y = max_pool2d(x, 2, 2);
  for (double v : y.data) CHECK(v == 3.25);
}

TEST_CASE("pooling matches brute-force oracles") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    auto x = random_tensor({8, 8, 3}, rng);
    auto got = max_pool2d(x, 2, 2);
    auto want = max_pool2d_oracle(x, 2, 2);
    CHECK(max_abs_diff(got, want) == 0.0);  // exact: max copies a value
    auto x2 = random_tensor({8, 8, 2}, rng);
    CHECK(max_abs_diff(avg_pool2d(x2, 2, 2), avg_pool2d_oracle(x2, 2, 2)) < kTightTol);
    CHECK(max_abs_diff(max_pool2d(x, 3, 2), max_pool2d_oracle(x, 3, 2)) == 0.0);
    CHECK(max_abs_diff(avg_pool2d(x2, 3, 1), avg_pool2d_oracle(x2, 3, 1)) < kTightTol);
  }
}

TEST_CASE("avg_pool2d hand examples") {
  Tensor<double> x({2, 2, 1}, {1, 3, 5, 7});
  auto y = avg_pool2d(x, 2, 2);
  CHECK(y.shape == Shape{1, 1, 1});
  CHECK(y.data[0] == doctest::Approx(4.0).epsilon(1e-15));

  Rng rng(12);
  auto z = random_tensor({5, 5, 2}, rng);
  CHECK(max_abs_diff(avg_pool2d(z, 1, 1), z) == 0.0);
}

TEST_CASE("pool window larger than input is fatal") {
  auto x = Tensor<double>::zeros({3, 3, 1});
  CHECK_THROWS_AS(max_pool2d(x, 4, 1), ConfigError);
  CHECK_THROWS_AS(avg_pool2d(x, 4, 1), ConfigError);
}

TEST_CASE("dense identity and affine examples") {
  Tensor<double> x({2}, {1, 2});
  Tensor<double> eye({2, 2}, {1, 0, 0, 1});
  Tensor<double> zero({2}, {0, 0});
  CHECK(dense(x, eye, zero).data == std::vector<double>{1, 2});

  Tensor<double> b({2}, {3, 4});
  CHECK(dense(x, eye, b).data == std::vector<double>{4, 6});
}

TEST_CASE("dense matches dot-product oracle") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = random_tensor({5}, rng);
    auto w = random_tensor({5, 7}, rng);
    auto b = random_tensor({7}, rng);
    CHECK(max_abs_diff(dense(x, w, b), dense_oracle(x, w, b)) < kTightTol);
  }
}

TEST_CASE("dense batched rows equal per-row application") {
  Rng rng(14);
  auto xb = random_tensor({4, 5}, rng);
  auto w = random_tensor({5, 3}, rng);
  auto b = random_tensor({3}, rng);
  auto yb = dense(xb, w, b);
  CHECK(yb.shape == Shape{4, 3});
  for (int r = 0; r < 4; ++r) {
    Tensor<double> row = Tensor<double>::zeros({5});
    for (int i = 0; i < 5; ++i) row.at(i) = xb.at(r, i);
    auto want = dense_oracle(row, w, b);
    for (int j = 0; j < 3; ++j) CHECK(std::abs(yb.at(r, j) - want.at(j)) < kTightTol);
  }
}

TEST_CASE("dense dimension mismatch is fatal") {
  Rng rng(15);
  auto x = random_tensor({4}, rng);
  auto w = random_tensor({5, 7}, rng);
  auto b = random_tensor({7}, rng);
  CHECK_THROWS_AS(dense(x, w, b), ConfigError);
  auto bad_b = random_tensor({6}, rng);
  auto x5 = random_tensor({5}, rng);
  CHECK_THROWS_AS(dense(x5, w, bad_b), ConfigError);
}

TEST_CASE("elementwise ops") {
  CHECK(sigmoid(Tensor<double>::scalar(0.0)).item() == doctest::Approx(0.5).epsilon(1e-15));

  Rng rng(16);
  auto v = random_tensor({7}, rng);
  auto neg = v.detached();
  for (auto& x : neg.data) x = -x;
  auto zero = sum_over(std::vector<Tensor<double>>{v, neg});
  for (double x : zero.data) CHECK(std::abs(x) < kTightTol);

  std::vector<Tensor<double>> copies(5, v);
  CHECK(max_abs_diff(mean_over(copies), v) < kTightTol);

  CHECK_THROWS_AS(sum_over(std::vector<Tensor<double>>{}), ConfigError);
  CHECK_THROWS_AS(mean_over(std::vector<Tensor<double>>{}), ConfigError);
  auto w = random_tensor({6}, rng);
  CHECK_THROWS_AS(sum_over(std::vector<Tensor<double>>{v, w}), ConfigError);
  CHECK_THROWS_AS(add(v, w), ConfigError);

  auto cat = concat(v, w);
  CHECK(cat.shape == Shape{13});
  CHECK(cat.at(7) == w.at(0));
}

TEST_CASE("sum_over is exactly permutation invariant") {
  Rng rng(17);
  std::vector<Tensor<double>> set;
  for (int i = 0; i < 9; ++i) set.push_back(random_tensor({11}, rng, -10.0, 10.0));
  auto base = sum_over(set);
  for (int trial = 0; trial < 30; ++trial) {
    auto perm = set;
    rng.shuffle(perm);
    auto got = sum_over(perm);
    CHECK(std::memcmp(got.data.data(), base.data.data(), sizeof(double) * base.data.size()) == 0);
  }
}

TEST_CASE("backward: linear functional gives all-ones gradient") {
  Rng rng(18);
  Tape<double> tape;
  auto p = tape.watch(random_tensor({3, 4}, rng));
  auto loss = sum_all(p);
  tape.backward(loss);
  auto g = tape.grad_of(p);
  for (double v : g.data) CHECK(v == 1.0);
}

TEST_CASE("backward: sigmoid(w*x) matches the chain-rule closed form") {
  Tape<double> tape;
  const double wv = 0.7, xv = -1.3;
  auto w = tape.watch(Tensor<double>::scalar(wv));
  auto x = Tensor<double>::scalar(xv);
  auto s = sigmoid(mul(w, x));
  tape.backward(s);
  const double y = 1.0 / (1.0 + std::exp(-wv * xv));
  const double want = y * (1.0 - y) * xv;
  CHECK(tape.grad_of(w).item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("backward on a detached tensor is a logic error") {
  Tape<double> tape;
  auto loss = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(loss), LogicError);
}

TEST_CASE("tape is consumed by backward") {
  Tape<double> tape;
  auto p = tape.watch(Tensor<double>::scalar(2.0));
  auto loss = sum_all(p);
  tape.backward(loss);
  CHECK(tape.consumed());
  CHECK_THROWS_AS(tape.backward(loss), LogicError);
  CHECK_THROWS_AS(tape.watch(Tensor<double>::scalar(1.0)), LogicError);
}

TEST_CASE("unreachable parameters get zero gradient") {
  Rng rng(19);
  Tape<double> tape;
  auto used = tape.watch(random_tensor({3}, rng));
  auto unused = tape.watch(random_tensor({4}, rng));
  tape.backward(sum_all(used));
  for (double v : tape.grad_of(unused).data) CHECK(v == 0.0);
}

TEST_CASE("fan-out sums gradients") {
  Tape<double> tape;
  auto p = tape.watch(Tensor<double>({2}, {1.5, -0.5}));
  // loss = sum(p) + sum(p) -> gradient 2 everywhere
  auto loss = add(sum_all(p), sum_all(p));
  tape.backward(loss);
  for (double v : tape.grad_of(p).data) CHECK(v == 2.0);
}

TEST_CASE("max_pool2d ties route gradient to the first row-major cell") {
  Tape<double> tape;
  auto x = tape.watch(Tensor<double>::full({2, 2, 1}, 5.0));
  auto y = max_pool2d(x, 2, 2);
  tape.backward(sum_all(y));
  auto g = tape.grad_of(x);
  CHECK(g.data == std::vector<double>{1, 0, 0, 0});
}

// Central finite differences for every primitive backward rule.
namespace {

template <typename BuildFn>
void check_gradients(Shape shape, BuildFn&& build, std::uint64_t seed, double lo = -1.0,
                     double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> value = random_tensor(shape, rng, lo, hi);

  Tape<double> tape;
  auto leaf = tape.watch(value);
  auto loss = build(leaf);
  tape.backward(loss);
  auto analytic = tape.grad_of(leaf);

  double max_rel = 0.0;
  for (std::size_t i = 0; i < value.data.size(); ++i) {
    const double numeric = fd_scalar(value, i, [&]() { return build(value).item(); });
    max_rel = std::max(max_rel, rel_err(analytic.data[i], numeric));
  }
  CHECK(max_rel < kGradTolPrimitive);
}

// Weighted sum makes the upstream gradient non-uniform.
Tensor<double> weighted_sum(const Tensor<double>& t, std::uint64_t seed) {
  Rng rng(seed);
  auto w = t.detached();
  for (auto& v : w.data) v = rng.uniform(0.5, 1.5);
  return sum_all(mul(t, w));
}

}  // namespace

TEST_CASE("finite differences: every primitive op") {
  Rng krng(100);
  const auto kern = random_tensor({3, 3, 2, 3}, krng);
  const auto kern2 = random_tensor({3, 3, 2, 2}, krng);

  // conv2d w.r.t. input (away from relu-style kinks; conv is smooth)
  check_gradients({6, 6, 2}, [&](const auto& x) { return weighted_sum(conv2d(x, kern, 1, 1), 1); }, 201);
  check_gradients({7, 6, 2}, [&](const auto& x) { return weighted_sum(conv2d(x, kern2, 2, 0), 2); }, 202);
  // conv2d w.r.t. kernels
  {
    Rng rng(203);
    auto img = random_tensor({6, 6, 2}, rng);
    check_gradients({3, 3, 2, 3}, [&](const auto& k) { return weighted_sum(conv2d(img, k, 1, 1), 3); },
                    204);
  }
  // pooling (inputs spread apart so FD never crosses an argmax flip)
  check_gradients({6, 6, 2}, [&](const auto& x) { return weighted_sum(max_pool2d(x, 2, 2), 4); }, 205,
                  -5.0, 5.0);
  check_gradients({6, 6, 1}, [&](const auto& x) { return weighted_sum(max_pool2d(x, 3, 1), 5); }, 206,
                  -5.0, 5.0);
  check_gradients({6, 6, 2}, [&](const auto& x) { return weighted_sum(avg_pool2d(x, 2, 2), 6); }, 207);
  // dense w.r.t. each argument
  {
    Rng rng(208);
    auto w = random_tensor({5, 4}, rng);
    auto b = random_tensor({4}, rng);
    auto x = random_tensor({5}, rng);
    auto xb = random_tensor({3, 5}, rng);
    check_gradients({5}, [&](const auto& t) { return weighted_sum(dense(t, w, b), 7); }, 209);
    check_gradients({5, 4}, [&](const auto& t) { return weighted_sum(dense(x, t, b), 8); }, 210);
    check_gradients({4}, [&](const auto& t) { return weighted_sum(dense(x, w, t), 9); }, 211);
    check_gradients({3, 5}, [&](const auto& t) { return weighted_sum(dense(t, w, b), 10); }, 212);
  }
  // elementwise (relu inputs pushed away from the kink)
  check_gradients({17}, [&](const auto& x) { return weighted_sum(relu(x), 11); }, 213, 0.1, 2.0);
  check_gradients({17}, [&](const auto& x) {
    auto shifted = add(x, Tensor<double>::full({17}, -3.0));
    return weighted_sum(relu(shifted), 12);
  }, 214, 0.1, 2.0);  // all below the kink: zero gradient side
  check_gradients({9}, [&](const auto& x) { return weighted_sum(sigmoid(x), 13); }, 215, -3.0, 3.0);
  {
    Rng rng(216);
    auto other = random_tensor({8}, rng);
    check_gradients({8}, [&](const auto& x) { return weighted_sum(add(x, other), 14); }, 217);
    check_gradients({8}, [&](const auto& x) { return weighted_sum(mul(x, other), 15); }, 218);
    check_gradients({6}, [&](const auto& x) { return weighted_sum(concat(x, other), 16); }, 219);
  }
  // channel bias
  {
    Rng rng(220);
    auto img = random_tensor({4, 4, 3}, rng);
    check_gradients({3}, [&](const auto& b) { return weighted_sum(bias_add_channels(img, b), 17); }, 221);
    Rng rng2(222);
    auto bias = random_tensor({3}, rng2);
    check_gradients({4, 4, 3},
                    [&](const auto& x) { return weighted_sum(bias_add_channels(x, bias), 18); }, 223);
  }
  // reductions and pair building
  check_gradients({5, 7}, [&](const auto& x) { return weighted_sum(sum_rows(x), 19); }, 224);
  {
    Rng rng(225);
    auto other = random_tensor({4, 3}, rng);
    check_gradients({4, 3}, [&](const auto& x) {
      return weighted_sum(pair_rows(x, other, CombineRule::all_pairs), 20);
    }, 226);
    check_gradients({4, 3}, [&](const auto& x) {
      return weighted_sum(pair_rows(other, x, CombineRule::all_pairs), 21);
    }, 227);
    check_gradients({4, 3}, [&](const auto& x) {
      return weighted_sum(pair_rows(x, other, CombineRule::same_location), 22);
    }, 228);
  }
  // sum_over / mean_over through the set path
  {
    Rng rng(229);
    auto other = random_tensor({6}, rng);
    check_gradients({6}, [&](const auto& x) {
      return weighted_sum(sum_over(std::vector<Tensor<double>>{x, other, x}), 23);
    }, 230);
    check_gradients({6}, [&](const auto& x) {
      return weighted_sum(mean_over(std::vector<Tensor<double>>{x, other}), 24);
    }, 231);
  }
  // bce through attached scores
  {
    check_gradients({5}, [&](const auto& raw) {
      auto s = sigmoid(raw);
      // scalar scores extracted by dotting with unit vectors
      std::vector<Tensor<double>> scores;
      std::vector<int> labels;
      for (int i = 0; i < 5; ++i) {
        auto unit = Tensor<double>::zeros({5});
        unit.at(i) = 1.0;
        scores.push_back(sum_all(mul(s, unit)));
        labels.push_back(i % 2);
      }
      return bce_pairs(scores, labels);
    }, 232, -2.0, 2.0);
  }
}

TEST_CASE("forward and gradients are deterministic") {
  auto run = [] {
    Rng rng(42);
    Tape<double> tape;
    auto x = tape.watch(random_tensor({6, 6, 2}, rng));
    auto k = tape.watch(random_tensor({3, 3, 2, 4}, rng));
    auto y = relu(conv2d(x, k, 1, 1));
    auto pooled = max_pool2d(y, 2, 2);
    auto loss = sum_all(pooled);
    tape.backward(loss);
    std::vector<double> out = pooled.data;
    return std::tuple{out, tape.grad_of(x).data, tape.grad_of(k).data, loss.item()};
  };
  auto a = run();
  auto b = run();
  CHECK(std::get<0>(a) == std::get<0>(b));
  CHECK(std::get<1>(a) == std::get<1>(b));
  CHECK(std::get<2>(a) == std::get<2>(b));
  CHECK(std::get<3>(a) == std::get<3>(b));
}

TEST_CASE("adam first step has the closed form -lr*g/(|g|+eps)") {
  NamedTensors<double> params;
  params.emplace("p", Tensor<double>({3}, {1.0, -2.0, 0.5}));
  NamedTensors<double> grads;
  grads.emplace("p", Tensor<double>({3}, {0.3, -0.7, 1.9}));
  AdamHyper hp;
  auto state = adam_init(params, hp);
  auto before = params.at("p").data;
  adam_step(params, grads, state);
  CHECK(state.t == 1);
  for (int i = 0; i < 3; ++i) {
    const double g = grads.at("p").data[static_cast<std::size_t>(i)];
    const double want = before[static_cast<std::size_t>(i)] - hp.lr * g / (std::abs(g) + hp.epsilon);
    CHECK(params.at("p").data[static_cast<std::size_t>(i)] == doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("adam with zero gradients is a fixed point") {
  Rng rng(55);
  NamedTensors<double> params;
  params.emplace("w", random_tensor({4, 2}, rng));
  auto before = params.at("w").data;
  NamedTensors<double> grads;
  grads.emplace("w", Tensor<double>::zeros({4, 2}));
  auto state = adam_init(params, AdamHyper{});
  for (int i = 0; i < 10; ++i) adam_step(params, grads, state);
  CHECK(std::memcmp(params.at("w").data.data(), before.data(), sizeof(double) * before.size()) == 0);
}

TEST_CASE("adam key mismatch is a logic error") {
  NamedTensors<double> params;
  params.emplace("a", Tensor<double>::scalar(1.0));
  NamedTensors<double> grads;
  grads.emplace("b", Tensor<double>::scalar(1.0));
  auto state = adam_init(params, AdamHyper{});
  CHECK_THROWS_AS(adam_step(params, grads, state), LogicError);
}

TEST_CASE("adam drives w^2 toward zero and matches a reference implementation") {
  AdamHyper hp;
  hp.lr = 0.1;
  NamedTensors<double> params;
  params.emplace("w", Tensor<double>::scalar(1.0));
  auto state = adam_init(params, hp);

  // Reference: the textbook update formulas, written independently.
  double w_ref = 1.0, m_ref = 0.0, v_ref = 0.0;
  std::vector<double> trajectory;
  for (int t = 1; t <= 100; ++t) {
    const double w = params.at("w").item();
    NamedTensors<double> grads;
    grads.emplace("w", Tensor<double>::scalar(2.0 * w));
    adam_step(params, grads, state);

    const double g_ref = 2.0 * w_ref;
    m_ref = hp.beta1 * m_ref + (1 - hp.beta1) * g_ref;
    v_ref = hp.beta2 * v_ref + (1 - hp.beta2) * g_ref * g_ref;
    const double mhat = m_ref / (1 - std::pow(hp.beta1, t));
    const double vhat = v_ref / (1 - std::pow(hp.beta2, t));
    w_ref -= hp.lr * mhat / (std::sqrt(vhat) + hp.epsilon);

    CHECK(params.at("w").item() == doctest::Approx(w_ref).epsilon(1e-12));
    trajectory.push_back(std::abs(params.at("w").item()));
  }
  // |w| shrinks monotonically through the initial descent, then rings down
  // with a decaying envelope toward zero.
  std::size_t descent_end = 0;
  while (descent_end < trajectory.size() && trajectory[descent_end] > 0.05) ++descent_end;
  CHECK(descent_end >= 5);
  for (std::size_t i = 1; i < descent_end; ++i) CHECK(trajectory[i] < trajectory[i - 1]);
  auto peak = [&](std::size_t lo, std::size_t hi) {
    double p = 0.0;
    for (std::size_t i = lo; i < hi; ++i) p = std::max(p, trajectory[i]);
    return p;
  };
  CHECK(peak(40, 70) < peak(11, 40));
  CHECK(peak(70, 100) < peak(40, 70));
  CHECK(peak(90, 100) < 0.02);
}

TEST_CASE("finite values check helper") {
  Tensor<double> ok({2}, {1.0, 2.0});
  CHECK(ok.all_finite());
  Tensor<double> bad({2}, {1.0, std::numeric_limits<double>::quiet_NaN()});
  CHECK_FALSE(bad.all_finite());
}
