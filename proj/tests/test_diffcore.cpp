#include <doctest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "cmkt/autodiff.hpp"
#include "cmkt/errors.hpp"
#include "cmkt/gradcheck.hpp"
#include "cmkt/tensor.hpp"
#include "test_util.hpp"

using namespace cmkt;
using cmkt::testing::random_tensor;

namespace {

Tensor2D eval1(const Tensor2D& x, const std::function<Var(Var)>& op) {
  Graph g;
  return op(g.constant(x)).value();
}

// Weighted readout so that gradients of vector-valued ops are not degenerate.
Var readout(ParamBinder& p, Var y, std::uint64_t seed) {
  return ad::dot(y, p.graph().constant(random_tensor(y.rows(), y.cols(), seed)));
}

double check_unary(const std::function<Var(Var)>& op, Tensor2D x, std::uint64_t seed = 5) {
  ParameterTable params{{"x", std::move(x)}};
  auto fn = [&](ParamBinder& p) { return readout(p, op(p("x")), seed); };
  return grad_check(fn, params).max_relative_error;
}

}  // namespace

TEST_CASE("tensor construction validates size and finiteness") {
  CHECK_THROWS_AS(Tensor2D(2, 2, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor2D(1, 2, std::vector<double>{1, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(Tensor2D(1, 1, std::vector<double>{std::numeric_limits<double>::infinity()}), NumericalError);
  set_checked_mode(false);
  CHECK_NOTHROW(Tensor2D(1, 1, std::vector<double>{std::nan("")}));
  set_checked_mode(true);
  const auto t = Tensor2D::from_rows({{1, 2, 3}, {4, 5, 6}});
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t(1, 0) == 4);
  CHECK(t.transposed()(2, 1) == 6);
}

TEST_CASE("sinusoidal positions alternate sin and cos") {
  const auto pe = sinusoidal_positions(3, 4);
  CHECK(pe(0, 0) == 0.0);
  CHECK(pe(0, 1) == 1.0);
  CHECK(pe(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(pe(2, 2) == doctest::Approx(std::sin(2.0 / std::pow(10000.0, 2.0 / 4))));
}

TEST_CASE("layer_norm examples") {
  auto ln = [](const Tensor2D& x, double gain, double bias, double eps) {
    Graph g;
    return ad::layer_norm(g.constant(x), g.constant(Tensor2D(1, x.cols(), gain)),
                          g.constant(Tensor2D(1, x.cols(), bias)), eps)
        .value();
  };
  const auto zero = ln(Tensor2D::from_rows({{5, 5, 5}}), 1, 0, 1e-5);
  for (double v : zero.data()) CHECK(v == 0.0);
  const auto unit = ln(Tensor2D::from_rows({{1, -1}}), 1, 0, 1e-12);
  CHECK(unit(0, 0) == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(unit(0, 1) == doctest::Approx(-1.0).epsilon(1e-9));
  const auto affine = ln(Tensor2D::from_rows({{1, -1}}), 2, 1, 1e-12);
  CHECK(affine(0, 0) == doctest::Approx(3.0));
  CHECK(affine(0, 1) == doctest::Approx(-1.0));

  Graph g;
  CHECK_THROWS_AS(ad::layer_norm(g.constant(Tensor2D(1, 3)), g.constant(Tensor2D(1, 2, 1.0)),
                                 g.constant(Tensor2D(1, 3))),
                  ShapeError);
}

TEST_CASE("layer_norm rows are standardized") {
  const auto x = random_tensor(20, 7, 11, -10, 10);
  const auto y = [&] {
    Graph g;
    return ad::layer_norm(g.constant(x), g.constant(Tensor2D(1, 7, 1.0)), g.constant(Tensor2D(1, 7))).value();
  }();
  for (std::size_t r = 0; r < y.rows(); ++r) {
    double mean = 0, var = 0;
    for (double v : y.row(r)) mean += v;
    mean /= 7;
    for (double v : y.row(r)) var += (v - mean) * (v - mean);
    var /= 7;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("softmax_rows examples") {
  const auto y = eval1(Tensor2D::from_rows({{0, 0}, {0, -1}, {1000, 0}}), ad::softmax_rows);
  CHECK(y(0, 0) == doctest::Approx(0.5));
  CHECK(y(1, 0) == doctest::Approx(0.7311).epsilon(1e-4));
  CHECK(y(1, 1) == doctest::Approx(0.2689).epsilon(1e-4));
  CHECK(y(2, 0) == doctest::Approx(1.0));
  CHECK(y(2, 1) < 1e-300);
  CHECK(y.all_finite());
}

TEST_CASE("softmax_rows rows sum to one") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto y = eval1(random_tensor(5, 9, seed, -30, 30), ad::softmax_rows);
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double s = 0;
      for (double v : y.row(r)) {
        CHECK(v >= 0.0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("log_softmax matches log of softmax") {
  const auto x = random_tensor(4, 6, 3, -5, 5);
  const auto a = eval1(x, ad::log_softmax_rows);
  const auto b = eval1(x, ad::softmax_rows);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(std::log(b[i])));
  const auto c = eval1(x, ad::log_softmax_cols);
  const auto d = eval1(x.transposed(), ad::log_softmax_rows).transposed();
  CHECK(max_abs_diff(c, d) < 1e-12);
}

TEST_CASE("cosine_rows examples and range") {
  auto cos = [](const Tensor2D& a, const Tensor2D& b) {
    Graph g;
    return ad::cosine_rows(g.constant(a), g.constant(b)).value();
  };
  const auto a = random_tensor(6, 5, 21);
  Tensor2D neg = a;
  for (auto& v : neg.data()) v = -v;
  const auto same = cos(a, a);
  const auto anti = cos(a, neg);
  for (double v : same.data()) CHECK(v == doctest::Approx(1.0));
  for (double v : anti.data()) CHECK(v == doctest::Approx(-1.0));
  CHECK(cos(Tensor2D::from_rows({{1, 0}}), Tensor2D::from_rows({{0, 1}}))(0, 0) == 0.0);
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto c = cos(random_tensor(4, 3, s), random_tensor(4, 3, s + 100));
    for (double v : c.data()) {
      CHECK(v >= -1 - 1e-9);
      CHECK(v <= 1 + 1e-9);
    }
  }
  CHECK_THROWS_AS(cos(Tensor2D(2, 3, 1.0), Tensor2D(3, 3, 1.0)), ShapeError);
}

TEST_CASE("grad_check on a quadratic") {
  ParameterTable params{{"x", Tensor2D::from_rows({{1, 2}})}};
  auto fn = [](ParamBinder& p) { return ad::dot(p("x"), p("x")); };
  Graph g;
  ParamBinder b(g, params);
  g.backward(fn(b));
  const auto grads = b.grads();
  CHECK(grads.at("x")(0, 0) == doctest::Approx(2.0));
  CHECK(grads.at("x")(0, 1) == doctest::Approx(4.0));
  const auto report = grad_check(fn, params);
  CHECK(report.max_relative_error < 1e-8);
  CHECK(report.probes == 2);
  CHECK(report.max_relative_error >= 0.0);
}

TEST_CASE("grad_check rejects non-finite values") {
  ParameterTable params{{"x", Tensor2D::from_rows({{1000.0}})}};
  auto fn = [](ParamBinder& p) { return ad::sum(ad::exp(p("x"))); };
  CHECK_THROWS_AS(grad_check(fn, params), NumericalError);
}

TEST_CASE("grad_check flags a wrong gradient") {
  // An op whose backward pass is deliberately off by a factor of two.
  ParameterTable params{{"x", Tensor2D::from_rows({{0.3, -0.7}})}};
  auto fn = [](ParamBinder& p) {
    Var x = p("x");
    Graph& g = p.graph();
    Tensor2D y(1, 1, 0.0);
    for (double v : x.value().data()) y[0] += v * v;
    return g.record(y, {x}, [x](Graph& gr, std::uint32_t self) {
      const double up = gr.grad(self)[0];
      auto& gx = gr.grad_buffer(x.id);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += up * 4.0 * gr.value(x.id)[i];
    });
  };
  CHECK(grad_check(fn, params).max_relative_error > 0.4);
}

TEST_CASE("every op passes grad_check") {
  const auto x = random_tensor(3, 4, 1);
  CHECK(check_unary(ad::relu, random_tensor(3, 4, 2, 0.1, 1.0)) < 1e-4);
  CHECK(check_unary(ad::swish, x) < 1e-4);
  CHECK(check_unary(ad::exp, x) < 1e-4);
  CHECK(check_unary(ad::softmax_rows, x) < 1e-4);
  CHECK(check_unary(ad::log_softmax_rows, x) < 1e-4);
  CHECK(check_unary(ad::log_softmax_cols, x) < 1e-4);
  CHECK(check_unary(ad::transpose, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::scale(v, -2.5); }, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::add_scalar(v, 3.0); }, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::slice_rows(v, 1, 2); }, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::slice_cols(v, 1, 2); }, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::strided_windows(v, 2, 1); }, random_tensor(5, 2, 3)) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::strided_windows(v, 3, 2); }, random_tensor(7, 2, 4)) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::mul(v, v); }, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::sum(v); }, x) < 1e-4);
  CHECK(check_unary([](Var v) { return ad::entropy_sum(ad::softmax_rows(v)); }, x) < 1e-4);

  ParameterTable two{{"a", random_tensor(3, 4, 7)}, {"b", random_tensor(4, 5, 8)}, {"c", random_tensor(3, 4, 9)},
                     {"r", random_tensor(1, 4, 10)}, {"w", random_tensor(3, 4, 12)}};
  auto check = [&](const std::function<Var(ParamBinder&)>& f) {
    return grad_check([&](ParamBinder& p) { return readout(p, f(p), 99); }, two).max_relative_error;
  };
  CHECK(check([](ParamBinder& p) { return ad::matmul(p("a"), p("b")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::matmul_nt(p("a"), p("c")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::add(p("a"), p("c")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::sub(p("a"), p("c")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::add_row(p("a"), p("r")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::linear(p("a"), p("b"), ad::slice_rows(p("b"), 0, 1)); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::layer_norm(p("a"), p("r"), ad::slice_rows(p("c"), 0, 1)); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::cosine_rows(p("a"), p("c")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::dot(p("a"), p("c")); }) < 1e-4);
  CHECK(check([](ParamBinder& p) {
          const Var parts[] = {p("a"), p("c")};
          return ad::concat_cols(parts);
        }) < 1e-4);
  CHECK(check([](ParamBinder& p) {
          const int ids[] = {2, 0, 2};
          return ad::gather_rows(p("a"), ids);
        }) < 1e-4);
  CHECK(check([](ParamBinder& p) { return ad::depthwise_conv_same(p("a"), p("w"), p("r")); }) < 1e-4);
}

TEST_CASE("layer_norm composed with sum passes grad_check") {
  ParameterTable params{{"x", random_tensor(4, 6, 31, -3, 3)}, {"g", random_tensor(1, 6, 32)},
                        {"b", random_tensor(1, 6, 33)}};
  auto fn = [](ParamBinder& p) { return ad::sum(ad::mul(ad::layer_norm(p("x"), p("g"), p("b")), p("x"))); };
  CHECK(grad_check(fn, params).max_relative_error < 1e-4);
}

TEST_CASE("strided_windows stacks rows") {
  const auto x = Tensor2D::from_rows({{1}, {2}, {3}, {4}, {5}, {6}, {7}});
  const auto y = eval1(x, [](Var v) { return ad::strided_windows(v, 3, 2); });
  REQUIRE(y.rows() == 3);
  CHECK(y == Tensor2D::from_rows({{1, 2, 3}, {3, 4, 5}, {5, 6, 7}}));
}

TEST_CASE("depthwise_conv_same matches a direct loop") {
  const auto x = random_tensor(6, 3, 41);
  const auto w = random_tensor(5, 3, 42);
  const auto b = random_tensor(1, 3, 43);
  Graph g;
  const auto y = ad::depthwise_conv_same(g.constant(x), g.constant(w), g.constant(b)).value();
  for (std::size_t t = 0; t < 6; ++t)
    for (std::size_t c = 0; c < 3; ++c) {
      double s = b(0, c);
      for (int k = 0; k < 5; ++k) {
        const int src = static_cast<int>(t) + k - 2;
        if (src >= 0 && src < 6) s += w(k, c) * x(src, c);
      }
      CHECK(y(t, c) == doctest::Approx(s));
    }
}

TEST_CASE("shape mismatches throw") {
  Graph g;
  Var a = g.constant(Tensor2D(2, 3));
  Var b = g.constant(Tensor2D(2, 2));
  CHECK_THROWS_AS(ad::matmul(a, b), ShapeError);
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::dot(a, b), ShapeError);
  CHECK_THROWS_AS(ad::slice_rows(a, 1, 2), ShapeError);
}

TEST_CASE("gradients accumulate across shared uses") {
  ParameterTable params{{"x", Tensor2D::from_rows({{3.0}})}};
  Graph g;
  ParamBinder p(g, params);
  Var x = p("x");
  g.backward(ad::add(ad::mul(x, x), ad::scale(x, 2.0)));
  CHECK(p.grads().at("x")(0, 0) == doctest::Approx(8.0));
}

TEST_CASE("frozen binder produces no gradients") {
  ParameterTable params{{"x", Tensor2D::from_rows({{3.0}})}};
  Graph g;
  ParamBinder p(g, params, false);
  Var y = ad::mul(p("x"), p("x"));
  g.backward(y);
  for (const auto& [name, grad] : p.grads())
    for (double v : grad.data()) CHECK(v == 0.0);
}
