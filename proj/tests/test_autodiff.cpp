#include "doctest.h"

#include "test_util.hpp"
#include "tmr/autodiff.hpp"

#include <cmath>

using namespace tmr;
using tmr::testing::random_matrix;
namespace ad = tmr::ad;

namespace {

// Registers shaped parameters and checks f's gradient numerically.
struct Check {
  ad::ParameterStore ps;
  ad::Parameter& add(const std::string& name, Matrix m) { return ps.add(name, std::move(m)); }
  double run(const std::function<ad::Var(ad::Tape&)>& f) { return ad::grad_check(ps, f); }
};

// Random weights so each output element contributes differently to the loss.
ad::Var weighted(ad::Tape& t, ad::Var x, std::uint64_t seed) {
  return ad::sum(ad::mul(x, t.constant(random_matrix(x.rows(), x.cols(), seed))));
}

}  // namespace

TEST_SUITE("autodiff") {

TEST_CASE("forward examples") {
  ad::Tape t(false);
  Matrix a = random_matrix(3, 4, 1);
  CHECK(ad::matmul(t.constant(Matrix::Identity(3, 3)), t.constant(a)).value().isApprox(a, 0));
  Matrix row = Matrix::Constant(1, 5, 2.5);
  Matrix sm = ad::softmax_rows(t.constant(row)).value();
  for (Eigen::Index j = 0; j < 5; ++j) CHECK(sm(0, j) == doctest::Approx(0.2).epsilon(1e-15));
  Matrix v(1, 3);
  v << 1, 2, 3;
  CHECK(ad::mean(t.constant(v)).scalar() == 2.0);
}

TEST_CASE("shape mismatch is a graph-construction error") {
  ad::Tape t;
  auto a = t.constant(Matrix::Zero(2, 3));
  auto b = t.constant(Matrix::Zero(3, 2));
  CHECK_THROWS_AS(ad::add(a, b), ShapeError);
  CHECK_THROWS_AS(ad::matmul(a, a), ShapeError);
  CHECK_THROWS_AS(ad::smooth_l1(a, b), ShapeError);
}

TEST_CASE("backward examples") {
  ad::ParameterStore ps;
  auto& x = ps.add("x", Matrix::Constant(1, 1, 3.0));
  {
    ad::Tape t;
    auto xv = t.param(x);
    t.backward(ad::mul(xv, xv));
    CHECK(x.grad(0, 0) == 6.0);
  }
  {
    ps.zero_grad();
    ad::Tape t;
    t.param(x);
    t.backward(t.scalar(4.0));
    CHECK(x.grad(0, 0) == 0.0);
  }
}

TEST_CASE("backward rejects non-scalar losses, second calls and inference tapes") {
  ad::ParameterStore ps;
  auto& x = ps.add("x", Matrix::Ones(2, 2));
  ad::Tape t;
  auto xv = t.param(x);
  CHECK_THROWS_AS(t.backward(xv), Error);
  auto l = ad::sum(xv);
  t.backward(l);
  CHECK_THROWS_AS(t.backward(l), Error);
  ad::Tape inf(false);
  auto y = ad::sum(inf.param(x));
  CHECK_THROWS_AS(inf.backward(y), Error);
}

TEST_CASE("grad_check examples") {
  Check c;
  auto& x = c.add("x", Matrix::Constant(1, 1, 2.0));
  CHECK(c.run([&](ad::Tape& t) { auto v = t.param(x); return ad::mul(v, v); }) < 1e-8);

  Check s;
  Matrix a0(1, 3), b0(1, 3);
  a0 << 0.3, -2.0, 1.7;
  b0 << 0.1, 0.4, -0.2;  // |a-b| = 0.2, 2.4, 1.9: away from the ±beta kink
  auto& a = s.add("a", a0);
  CHECK(s.run([&](ad::Tape& t) { return ad::smooth_l1(t.param(a), t.constant(b0), 1.0); }) < 1e-6);
}

TEST_CASE("grad_check throws on non-finite objective") {
  Check c;
  auto& x = c.add("x", Matrix::Constant(1, 1, -1.0));
  CHECK_THROWS_AS(c.run([&](ad::Tape& t) { return ad::sum(ad::log(t.param(x))); }), Error);
}

TEST_CASE("every op matches finite differences") {
  Check c;
  auto& a = c.add("a", random_matrix(3, 4, 11));
  auto& b = c.add("b", random_matrix(3, 4, 12));
  auto& w = c.add("w", random_matrix(4, 5, 13));
  auto& r = c.add("r", random_matrix(1, 4, 14));
  auto& pos = c.add("pos", random_matrix(3, 4, 15).cwiseAbs().array() + 0.5);
  const double tol = 1e-4;

  SUBCASE("arithmetic") {
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::add(t.param(a), t.param(b)), 1); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::sub(t.param(a), t.param(b)), 2); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::mul(t.param(a), t.param(b)), 3); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::scale(t.param(a), -1.7), 4); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::add_scalar(t.param(a), 0.3), 5); }) < tol);
  }
  SUBCASE("linear algebra") {
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::matmul(t.param(a), t.param(w)), 6); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::transpose(t.param(a)), 7); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::add_row(t.param(a), t.param(r)), 8); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::mul_row(t.param(a), t.param(r)), 9); }) < tol);
    auto& bias = c.add("bias", random_matrix(1, 5, 16));
    CHECK(c.run([&](ad::Tape& t) {
      return weighted(t, ad::linear(t.param(a), t.param(w), t.param(bias)), 10);
    }) < tol);
  }
  SUBCASE("elementwise") {
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::exp(t.param(a)), 11); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::log(t.param(pos)), 12); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::tanh(t.param(a)), 13); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::relu(t.param(pos)), 14); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::square(t.param(a)), 15); }) < tol);
  }
  SUBCASE("reductions") {
    Matrix mask = (random_matrix(3, 4, 17).array() > 0).cast<double>();
    mask(0, 0) = 1.0;
    CHECK(c.run([&](ad::Tape& t) { return ad::sum(ad::square(t.param(a))); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return ad::mean(ad::square(t.param(a))); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return ad::masked_sum(ad::square(t.param(a)), mask); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return ad::masked_mean(ad::square(t.param(a)), mask); }) < tol);
  }
  SUBCASE("structural") {
    CHECK(c.run([&](ad::Tape& t) {
      std::vector<ad::Var> parts{t.param(a), t.param(b)};
      return weighted(t, ad::concat_rows(parts), 18);
    }) < tol);
    CHECK(c.run([&](ad::Tape& t) {
      std::vector<ad::Var> parts{t.param(a), t.param(b)};
      return weighted(t, ad::concat_cols(parts), 20);
    }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::slice_rows(t.param(a), 1, 2), 21); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::slice_cols(t.param(a), 1, 3), 22); }) < tol);
    std::vector<int> idx{2, 0, 2, 1};
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::gather_rows(t.param(a), idx), 23); }) < tol);
    std::vector<int> counts{2, 0, 3};
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::repeat_rows(t.param(a), counts), 24); }) < tol);
  }
  SUBCASE("normalizations") {
    Matrix keep = Matrix::Ones(3, 4);
    keep(0, 1) = keep(2, 3) = keep(2, 0) = 0.0;
    auto& g = c.add("g", random_matrix(1, 4, 25));
    auto& bb = c.add("bb", random_matrix(1, 4, 26));
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::softmax_rows(t.param(a)), 27); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::log_softmax_rows(t.param(a)), 28); }) < tol);
    CHECK(c.run([&](ad::Tape& t) {
      return ad::masked_sum(ad::mul(ad::log_softmax_rows(t.param(a), keep),
                                    t.constant(random_matrix(3, 4, 29))), keep);
    }) < tol);
    CHECK(c.run([&](ad::Tape& t) {
      return weighted(t, ad::layer_norm(t.param(a), t.param(g), t.param(bb)), 30);
    }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return weighted(t, ad::normalize_rows(t.param(a)), 31); }) < tol);
  }
  SUBCASE("losses") {
    CHECK(c.run([&](ad::Tape& t) { return ad::smooth_l1(t.param(a), t.param(b), 1.0); }) < tol);
    CHECK(c.run([&](ad::Tape& t) { return ad::smooth_l1(t.param(a), t.param(b), 0.5); }) < tol);
    auto& s = c.add("s", random_matrix(4, 4, 32, 0.3));
    Matrix keep = Matrix::Ones(4, 4);
    keep(1, 2) = keep(3, 0) = 0.0;
    CHECK(c.run([&](ad::Tape& t) { return ad::margin_ranking(t.param(s), keep, 0.2); }) < tol);
  }
  SUBCASE("attention") {
    auto& qkv = c.add("qkv", random_matrix(7, 12, 33));
    std::vector<int> lengths{3, 1, 3};
    CHECK(c.run([&](ad::Tape& t) {
      return weighted(t, ad::segment_attention(t.param(qkv), lengths, 2), 34);
    }) < tol);
  }
}

TEST_CASE("backward is linear in the loss") {
  ad::ParameterStore ps;
  auto& a = ps.add("a", random_matrix(3, 3, 40));
  auto grad_of = [&](double ca, double cb) {
    ps.zero_grad();
    ad::Tape t;
    auto x = t.param(a);
    auto f = ad::sum(ad::tanh(ad::matmul(x, x)));
    auto g = ad::sum(ad::exp(ad::scale(x, 0.3)));
    t.backward(ad::add(ad::scale(f, ca), ad::scale(g, cb)));
    return Matrix(a.grad);
  };
  Matrix gf = grad_of(1.0, 0.0), gg = grad_of(0.0, 1.0), gc = grad_of(2.5, -0.75);
  CHECK((gc - (2.5 * gf - 0.75 * gg)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("identical inputs give bitwise-identical values and gradients") {
  auto run = [] {
    ad::ParameterStore ps;
    auto& qkv = ps.add("qkv", random_matrix(6, 12, 50));
    ad::Tape t;
    std::vector<int> lengths{2, 4};
    auto out = ad::segment_attention(t.param(qkv), lengths, 2);
    auto loss = weighted(t, ad::layer_norm(out, t.constant(Matrix::Ones(1, 4)),
                                           t.constant(Matrix::Zero(1, 4))), 51);
    t.backward(loss);
    return std::make_pair(loss.scalar(), Matrix(qkv.grad));
  };
  auto [l1, g1] = run();
  auto [l2, g2] = run();
  CHECK(l1 == l2);
  CHECK(g1 == g2);
}

TEST_CASE("parameter store copies are deep") {
  ad::ParameterStore ps;
  ps.add("x", Matrix::Ones(2, 2));
  ad::ParameterStore copy = ps;
  copy.get("x").value(0, 0) = 5.0;
  CHECK(ps.get("x").value(0, 0) == 1.0);
  CHECK(copy.scalar_count() == 4);
  CHECK_THROWS(ps.add("x", Matrix::Ones(1, 1)));
}

}  // TEST_SUITE
