#include "partcraft/autodiff.hpp"

#include "support.hpp"

#include <gtest/gtest.h>

using namespace partcraft;
using partcraft::oracle::finite_difference;
using partcraft::oracle::max_relative_error;

namespace {

using Fn = std::function<ad::Var(ad::Tape&, ad::Var)>;

// Reduces f to a scalar with a fixed random projection so every output entry
// contributes to the checked gradient.
void expect_gradient_matches(const Fn& f, const Matrix& x0, std::uint64_t seed = 1) {
  Matrix probe;
  {
    ad::Tape t;
    probe = f(t, t.constant(x0)).value();
  }
  Rng rng(seed);
  const Matrix weights = randn(probe.rows(), probe.cols(), rng);

  auto scalar = [&](ad::Tape& t, ad::Var x) { return ad::sum_all(ad::mul(f(t, x), t.constant(weights))); };

  ad::Tape tape;
  ad::Var x = tape.variable(x0);
  ad::Var y = scalar(tape, x);
  tape.backward(y);
  const Matrix analytic = x.grad();

  const Matrix numeric = finite_difference(
      [&](const Matrix& m) {
        ad::Tape t;
        return scalar(t, t.constant(m)).scalar();
      },
      x0);
  EXPECT_LT(max_relative_error(analytic, numeric, 1e-4), 1e-5);
}

Matrix sample(int r, int c, std::uint64_t seed) {
  Rng rng(seed);
  return randn(r, c, rng);
}

}  // namespace

TEST(Autodiff, ElementwiseOps) {
  const Matrix other = sample(3, 4, 9);
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::add(x, t.constant(other)); }, sample(3, 4, 1));
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::sub(t.constant(other), x); }, sample(3, 4, 2));
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::mul(x, ad::mul(x, t.constant(other))); }, sample(3, 4, 3));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::scale(x, -2.5); }, sample(3, 4, 4));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::tanh(x); }, sample(3, 4, 5));
}

TEST(Autodiff, ReluAwayFromTheKink) {
  Matrix x = sample(4, 4, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i)
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.3;
  expect_gradient_matches([](ad::Tape&, ad::Var v) { return ad::relu(v); }, x);
}

TEST(Autodiff, MatmulBothSides) {
  const Matrix w = sample(4, 2, 10);
  const Matrix a = sample(5, 3, 11);
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::matmul(x, t.constant(w)); }, sample(3, 4, 7));
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::matmul(t.constant(a), x); }, sample(3, 4, 8));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::matmul(x, ad::transpose(x)); }, sample(3, 4, 12));
}

TEST(Autodiff, SoftmaxRowsAndBroadcast) {
  const Matrix row = sample(1, 5, 13);
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::softmax_rows(x); }, sample(4, 5, 14));
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::add_row(x, t.constant(row)); }, sample(4, 5, 15));
  const Matrix base = sample(4, 5, 16);
  expect_gradient_matches([&](ad::Tape& t, ad::Var r) { return ad::add_row(t.constant(base), r); }, sample(1, 5, 17));
}

TEST(Autodiff, SlicingAndConcatenation) {
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::slice_cols(x, 1, 2); }, sample(3, 5, 18));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::select_cols(x, {4, 0, 0}); }, sample(3, 5, 19));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::select_rows(x, {2, 2, 1}); }, sample(3, 5, 20));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::concat_rows({x, ad::scale(x, 2.0)}); }, sample(2, 3, 21));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::concat_cols({ad::tanh(x), x}); }, sample(2, 3, 22));
}

TEST(Autodiff, Reductions) {
  const Matrix target = sample(3, 3, 23);
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::mean_all(ad::mul(x, x)); }, sample(3, 3, 24));
  expect_gradient_matches([&](ad::Tape& t, ad::Var x) { return ad::mse(x, t.constant(target)); }, sample(3, 3, 25));
  expect_gradient_matches([](ad::Tape&, ad::Var x) { return ad::average({x, ad::tanh(x), ad::scale(x, 3.0)}); },
                          sample(3, 3, 26));
}

TEST(Autodiff, FrozenParametersGetNoGradient) {
  ad::Parameter frozen("frozen", sample(2, 2, 27), false);
  ad::Parameter live("live", sample(2, 2, 28), true);
  ad::Tape tape;
  auto y = ad::sum_all(ad::matmul(tape.param(frozen), tape.param(live)));
  tape.backward(y);
  EXPECT_EQ(frozen.grad.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(live.grad.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Autodiff, GradientsAccumulateAcrossReuse) {
  ad::Parameter p("p", Matrix::Constant(1, 1, 3.0), true);
  ad::Tape tape;
  auto v = tape.param(p);
  auto y = ad::sum_all(ad::add(ad::mul(v, v), ad::scale(v, 2.0)));
  tape.backward(y);
  EXPECT_DOUBLE_EQ(p.grad(0, 0), 2.0 * 3.0 + 2.0);
}

TEST(Autodiff, DisabledGradientsRecordNothing) {
  ad::Parameter p("p", sample(2, 2, 29), true);
  ad::Tape tape;
  tape.set_grad_enabled(false);
  auto y = ad::sum_all(ad::tanh(tape.param(p)));
  EXPECT_FALSE(y.requires_grad());
  EXPECT_NEAR(y.scalar(), p.value.array().tanh().sum(), 1e-12);
}
