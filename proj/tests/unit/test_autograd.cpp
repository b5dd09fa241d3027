#include <cmath>

#include "cycledm/autograd.hpp"
#include "cycledm/nn.hpp"
#include "doctest.h"
#include "fd_check.hpp"

using namespace cycledm;
using ag::Var;
using testing::numeric_grad;
using testing::relative_error;

namespace {

double eval(const std::function<Var(const Var&)>& f, const Tensor& x) {
  ag::NoGradGuard ng;
  return f(Var(x)).item();
}

void check_grad(const std::function<Var(const Var&)>& f, const Tensor& x0, double tol = 2e-2) {
  Var x(x0, true);
  auto g = ag::grad(f(x), std::vector<Var>{x})[0];
  auto num = numeric_grad([&](const Tensor& t) { return eval(f, t); }, x0);
  CHECK(relative_error(g.value(), num) < tol);
}

}  // namespace

TEST_CASE("elementwise and reduction gradients match finite differences") {
  RngStream rng(3);
  Tensor x = rng.uniform_tensor({2, 3, 4}, 0.5f, 1.5f);
  check_grad([](const Var& v) { return ag::sum(ag::square(v)); }, x);
  check_grad([](const Var& v) { return ag::sum(ag::log(v) * ag::sqrt(v)); }, x);
  check_grad([](const Var& v) { return ag::mean(ag::sigmoid(v) + ag::exp(v * 0.3f)); }, x);
  check_grad([](const Var& v) { return ag::sum(ag::silu(v + (-1.0f))); }, x);
  check_grad([](const Var& v) { return ag::sum(ag::reduce_to(ag::square(v), {2, 1, 4})); }, x);
  check_grad([](const Var& v) {
    auto r = ag::reduce_to(v, {1, 3, 1});
    return ag::sum(ag::square(ag::expand(r, {2, 3, 4}) * v));
  }, x);
}

TEST_CASE("matmul gradients for every transpose combination") {
  RngStream rng(5);
  Tensor b = rng.normal_tensor({3, 4});
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Tensor a = ta ? rng.normal_tensor({3, 2}) : rng.normal_tensor({2, 3});
      Tensor bb = tb ? rng.normal_tensor({4, 3}) : b;
      check_grad([&](const Var& v) { return ag::sum(ag::square(ag::matmul(v, Var(bb), ta, tb))); }, a);
      check_grad([&](const Var& v) { return ag::sum(ag::square(ag::matmul(Var(a), v, ta, tb))); }, bb);
    }
  }
}

TEST_CASE("convolution, pooling, concat and embedding gradients") {
  RngStream rng(7);
  nn::Conv2d conv(2, 3, 3, 2, 1, rng);
  Tensor x = rng.normal_tensor({2, 6, 6, 2});
  check_grad([&](const Var& v) { return ag::sum(ag::square(conv.forward(v))); }, x);
  check_grad([&](const Var& v) { return ag::sum(ag::square(ag::sum_pool2x(ag::upsample_nearest2x(v)))); }, x);
  Tensor y = rng.normal_tensor({2, 6, 6, 3});
  check_grad([&](const Var& v) {
    auto c = ag::concat_last(v, Var(y));
    return ag::sum(ag::square(ag::slice_last(c, 1, 4)));
  }, x);
  Tensor table = rng.normal_tensor({5, 3});
  check_grad([](const Var& t) { return ag::sum(ag::square(ag::gather_rows(t, {4, 0, 4, 2}))); }, table);
  nn::GroupNorm gn(1, 2);
  Tensor w = rng.normal_tensor({2, 6, 6, 2});
  check_grad([&](const Var& v) { return ag::sum(gn.forward(v) * Var(w) + ag::exp(gn.forward(v) * 0.5f)); }, x);
}

TEST_CASE("softmax cross-entropy gradient") {
  RngStream rng(9);
  Tensor logits = rng.normal_tensor({4, 5});
  check_grad([](const Var& v) { return ag::softmax_cross_entropy(v, {0, 4, 2, 2}); }, logits);
}

TEST_CASE("second-order gradients through conv and leaky relu") {
  // penalty(w) = sum over items of (|d score / d x| - 1)^2 with score a small
  // conv net; its gradient w.r.t. the conv weights needs create_graph.
  RngStream rng(11);
  nn::Conv2d conv(1, 2, 3, 2, 1, rng);
  nn::Linear head(2 * 2 * 2, 1, rng);
  Tensor x0 = rng.normal_tensor({2, 4, 4, 1});
  auto penalty = [&](bool create) {
    Var x(x0, true);
    Var h = ag::leaky_relu(conv.forward(x), 0.2f);
    Var s = ag::sum(head.forward(ag::reshape(h, {2, 8})));
    Var g = ag::grad(s, std::vector<Var>{x}, create)[0];
    Var n = ag::sqrt(ag::reduce_to(ag::square(ag::reshape(g, {2, 16})), {2, 1}) + 1e-12f);
    return ag::mean(ag::square(n - 1.0f));
  };
  auto params = conv.parameters();
  auto analytic = ag::grad(penalty(true), params);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor saved = params[i].value();
    auto f = [&](const Tensor& t) {
      params[i].mutable_value() = t;
      const double v = penalty(false).item();
      params[i].mutable_value() = saved;
      return v;
    };
    auto num = numeric_grad(f, saved, 1e-3);
    CHECK(relative_error(analytic[i].value(), num) < 1e-2);
  }
}

TEST_CASE("first-order-only kernels refuse create_graph") {
  Var x(Tensor({1, 2, 2, 2}, 0.5f), true);
  Var y = ag::sum(ag::silu(x));
  CHECK_THROWS_AS(ag::grad(y, std::vector<Var>{x}, true), std::logic_error);
}

TEST_CASE("unreachable inputs receive zero gradients") {
  Var a(Tensor({2}, 1.0f), true), b(Tensor({3}, 2.0f), true);
  auto g = ag::grad(ag::sum(ag::square(a)), std::vector<Var>{a, b});
  CHECK(g[1].value() == Tensor({3}, 0.0f));
  CHECK(g[0].value()[0] == doctest::Approx(2.0));
}
