#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "ctrack/finite_difference.hpp"
#include "ctrack/graph.hpp"
#include "ctrack/rng.hpp"

using namespace ctrack;

namespace {

Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (double& v : t.data) v = lo + (hi - lo) * uniform01(rng);
  return t;
}

// Reverse-mode gradient of `build` with respect to each tensor in `params`,
// checked against central differences.
double max_grad_error(std::vector<Tensor<double>*> params,
                      const std::function<Var(Graph<double>&)>& build) {
  for (Tensor<double>* p : params) {
    p->enable_grad();
    p->zero_grad();
    p->requires_grad = true;
  }
  {
    Graph<double> g;
    g.backward(build(g));
  }
  auto f = [&] {
    Graph<double> g(false);
    return g.value(build(g)).data[0];
  };
  double worst = 0.0;
  for (Tensor<double>* p : params) {
    const std::vector<double> analytic = p->grad;
    const Tensor<double> numeric = finite_difference_grad(f, *p, 1e-5);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      worst = std::max(worst, relative_error(analytic[i], numeric.data[i]));
    }
  }
  return worst;
}

// Projects an arbitrary tensor to a scalar with fixed random weights so that
// every output coordinate contributes a distinct gradient.
Var probe(Graph<double>& g, Var y, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> w = random_tensor(g.shape(y), rng);
  return sum_squares(g, add(g, y, g.constant(std::move(w))));
}

}  // namespace

TEST(Tensor, ConstructionInvariants) {
  Tensor<float> t(Shape{2, 3});
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_FALSE(t.has_grad());
  t.enable_grad();
  EXPECT_EQ(t.grad.size(), t.data.size());
  EXPECT_EQ(t.dim(-1), 3u);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
}

TEST(Tensor, ChecksumSeesEveryByte) {
  Tensor<float> a(Shape{4}, {1, 2, 3, 4});
  Tensor<float> b = a;
  EXPECT_EQ(checksum(a), checksum(b));
  b.data[3] = std::nextafter(4.0f, 5.0f);
  EXPECT_NE(checksum(a), checksum(b));
}

TEST(Primitives, MatmulIdentityReturnsOperand) {
  Graph<double> g;
  Var i2 = g.constant(Tensor<double>(Shape{2, 2}, {1, 0, 0, 1}));
  Var a = g.constant(Tensor<double>(Shape{2, 2}, {3.5, -1, 2, 7}));
  EXPECT_EQ(g.value(matmul(g, i2, a)).data, g.value(a).data);
}

TEST(Primitives, MatmulShapeErrorNamesBothShapes) {
  Graph<double> g;
  Var a = g.constant(Tensor<double>(Shape{2, 3}));
  Var b = g.constant(Tensor<double>(Shape{2, 3}));
  try {
    matmul(g, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos) << msg;
  }
}

TEST(Primitives, SoftmaxOfZerosIsUniform) {
  Graph<float> g;
  Var x = g.constant(Tensor<float>(Shape{4}));
  const auto& y = g.value(softmax_last_dim(g, x)).data;
  for (float v : y) EXPECT_FLOAT_EQ(v, 0.25f);
}

TEST(Primitives, SoftmaxSurvivesLargeLogits) {
  Graph<float> g;
  Var x = g.constant(Tensor<float>(Shape{3}, {1000.f, 1000.f, -1000.f}));
  const auto& y = g.value(softmax_last_dim(g, x)).data;
  EXPECT_FLOAT_EQ(y[0], 0.5f);
  EXPECT_FLOAT_EQ(y[2], 0.0f);
}

TEST(Primitives, LayerNormOfConstantIsBeta) {
  Graph<double> g;
  Var x = g.constant(Tensor<double>::filled(Shape{2, 5}, 3.25));
  Var gamma = g.constant(Tensor<double>::filled(Shape{5}, 2.0));
  Var beta = g.constant(Tensor<double>(Shape{5}));
  for (double v : g.value(layer_norm(g, x, gamma, beta)).data) EXPECT_EQ(v, 0.0);
}

TEST(Primitives, NonFiniteInputRaisesNumericError) {
  Graph<float> g;
  Var x = g.constant(Tensor<float>(Shape{2}, {1.f, std::numeric_limits<float>::infinity()}));
  EXPECT_THROW(scale(g, x, 2.0), NumericError);
  Var big = g.constant(Tensor<float>(Shape{1}, {3e38f}));
  EXPECT_THROW(scale(g, big, 10.0), NumericError);
}

TEST(Primitives, ForwardIsDeterministic) {
  Rng rng(7);
  const Tensor<double> a = random_tensor(Shape{3, 4, 5}, rng);
  const Tensor<double> b = random_tensor(Shape{5, 6}, rng);
  auto run = [&] {
    Graph<double> g;
    Var y = gelu(g, matmul(g, g.constant(a), g.constant(b)));
    return g.value(softmax_last_dim(g, y)).data;
  };
  EXPECT_EQ(run(), run());
}

TEST(Backward, SumSquaresGradient) {
  Tensor<double> x(Shape{3}, {1, 2, 3});
  x.enable_grad();
  x.requires_grad = true;
  Graph<double> g;
  g.backward(sum_squares(g, g.param(x)));
  EXPECT_EQ(x.grad, (std::vector<double>{2, 4, 6}));
}

TEST(Backward, MeanGradient) {
  Tensor<double> x(Shape{4}, {5, -1, 2, 0});
  x.enable_grad();
  x.requires_grad = true;
  Graph<double> g;
  g.backward(mean(g, g.param(x)));
  for (double v : x.grad) EXPECT_EQ(v, 0.25);
}

TEST(Backward, ReusedInputAccumulates) {
  Tensor<double> x(Shape{2}, {1.5, -2});
  x.enable_grad();
  x.requires_grad = true;
  Graph<double> g;
  Var p = g.param(x);
  Var y = add(g, p, p);
  g.backward(sum_squares(g, y));
  // L = sum (2x)^2, dL/dy = 2y = 4x, dL/dx = 2 * 4x
  EXPECT_EQ(x.grad, (std::vector<double>{12, -16}));
}

TEST(Backward, RejectsNonScalarAndSecondCall) {
  Tensor<double> x(Shape{2}, {1, 2});
  x.enable_grad();
  x.requires_grad = true;
  Graph<double> g;
  Var p = g.param(x);
  EXPECT_THROW(g.backward(p), std::logic_error);
  Var l = sum_squares(g, p);
  g.backward(l);
  EXPECT_THROW(g.backward(l), std::logic_error);
}

TEST(Backward, FrozenParameterGetsNoGradient) {
  Tensor<double> x(Shape{2}, {1, 2});
  x.enable_grad();
  x.requires_grad = false;
  Tensor<double> w(Shape{2}, {3, 4});
  w.enable_grad();
  w.requires_grad = true;
  Graph<double> g;
  g.backward(sum_squares(g, add(g, g.param(x), g.param(w))));
  EXPECT_EQ(x.grad, (std::vector<double>{0, 0}));
  EXPECT_EQ(w.grad, (std::vector<double>{8, 12}));
}

TEST(FiniteDifference, QuadraticIsExact) {
  Tensor<double> x(Shape{1}, {3.0});
  auto f = [&] { return x.data[0] * x.data[0]; };
  EXPECT_NEAR(finite_difference_grad(f, x, 1e-4).data[0], 6.0, 1e-6);
  EXPECT_EQ(x.data[0], 3.0);
}

TEST(FiniteDifference, ConstantGivesZero) {
  Tensor<double> x(Shape{3}, {1, 2, 3});
  const Tensor<double> d = finite_difference_grad([] { return 4.0; }, x, 1e-5);
  for (double v : d.data) EXPECT_EQ(v, 0.0);
}

TEST(FiniteDifference, RejectsBadStepAndNonFinite) {
  Tensor<double> x(Shape{1}, {1.0});
  EXPECT_THROW(finite_difference_grad([] { return 1.0; }, x, 0.0), std::invalid_argument);
  EXPECT_THROW(finite_difference_grad([] { return std::nan(""); }, x, 1e-5), NumericError);
}

TEST(FiniteDifference, GeluSumMatchesBackward) {
  Rng rng(11);
  Tensor<double> x = random_tensor(Shape{10}, rng, -3.0, 3.0);
  EXPECT_LT(max_grad_error({&x}, [&](Graph<double>& g) { return mean(g, gelu(g, g.param(x))); }),
            1e-4);
}

// Every primitive, random well-conditioned 64-bit inputs.
class PrimitiveGradient : public ::testing::TestWithParam<int> {};

TEST_P(PrimitiveGradient, MatchesCentralDifferences) {
  Rng rng(1000 + GetParam());
  Tensor<double> a = random_tensor(Shape{2, 3, 4}, rng);
  Tensor<double> b = random_tensor(Shape{4, 5}, rng);
  Tensor<double> c = random_tensor(Shape{2, 3, 4}, rng);
  Tensor<double> gamma = random_tensor(Shape{4}, rng, 0.5, 1.5);
  Tensor<double> beta = random_tensor(Shape{4}, rng);
  Tensor<double> row = random_tensor(Shape{4}, rng);
  const std::vector<std::size_t> labels{2, 0};
  double err = 0.0;
  switch (GetParam()) {
    case 0:
      err = max_grad_error({&a, &b}, [&](Graph<double>& g) {
        return probe(g, matmul(g, g.param(a), g.param(b)), 1);
      });
      break;
    case 1:
      err = max_grad_error({&a, &c}, [&](Graph<double>& g) {
        return probe(g, matmul(g, g.param(a), g.param(c), true), 2);
      });
      break;
    case 2:
      err = max_grad_error({&a, &row}, [&](Graph<double>& g) {
        return probe(g, add(g, g.param(a), g.param(row)), 3);
      });
      break;
    case 3:
      err = max_grad_error({&a, &c}, [&](Graph<double>& g) {
        return probe(g, sub(g, g.param(a), g.param(c)), 4);
      });
      break;
    case 4:
      err = max_grad_error({&a}, [&](Graph<double>& g) { return probe(g, scale(g, g.param(a), -1.7), 5); });
      break;
    case 5:
      err = max_grad_error({&a, &gamma, &beta}, [&](Graph<double>& g) {
        return probe(g, layer_norm(g, g.param(a), g.param(gamma), g.param(beta)), 6);
      });
      break;
    case 6:
      err = max_grad_error({&a}, [&](Graph<double>& g) { return probe(g, softmax_last_dim(g, g.param(a)), 7); });
      break;
    case 7:
      err = max_grad_error({&a}, [&](Graph<double>& g) { return probe(g, gelu(g, g.param(a)), 8); });
      break;
    case 8:
      err = max_grad_error({&a}, [&](Graph<double>& g) { return probe(g, sigmoid(g, g.param(a)), 9); });
      break;
    case 9:
      err = max_grad_error({&a}, [&](Graph<double>& g) {
        return probe(g, reshape(g, g.param(a), Shape{6, 4}), 10);
      });
      break;
    case 10:
      err = max_grad_error({&a}, [&](Graph<double>& g) {
        return probe(g, swap_axes12(g, reshape(g, g.param(a), Shape{2, 3, 2, 2})), 11);
      });
      break;
    case 11:
      err = max_grad_error({&a, &c}, [&](Graph<double>& g) {
        return probe(g, concat_tokens(g, g.param(a), g.param(c)), 12);
      });
      break;
    case 12:
      err = max_grad_error({&a}, [&](Graph<double>& g) { return probe(g, slice_tokens(g, g.param(a), 1, 2), 13); });
      break;
    case 13:
      err = max_grad_error({&a}, [&](Graph<double>& g) {
        return probe(g, gather_cells(g, g.param(a), std::span<const std::size_t>(labels)), 14);
      });
      break;
    case 14:
      err = max_grad_error({&a}, [&](Graph<double>& g) { return mean(g, g.param(a)); });
      break;
    case 15: {
      Tensor<double> logits = random_tensor(Shape{2, 4}, rng, -2, 2);
      err = max_grad_error({&logits}, [&](Graph<double>& g) {
        return cross_entropy_with_logits(g, g.param(logits), std::span<const std::size_t>(labels));
      });
      break;
    }
    case 16: {
      Tensor<double> logits = random_tensor(Shape{2, 4}, rng, -2, 2);
      const Tensor<double> target = softmax_rows(random_tensor(Shape{2, 4}, rng, -2, 2));
      err = max_grad_error({&logits}, [&](Graph<double>& g) {
        return cross_entropy_with_logits(g, g.param(logits), target);
      });
      break;
    }
    case 17:
      // |a - c| stays away from the kink: entries of a and c are independent.
      err = max_grad_error({&a, &c}, [&](Graph<double>& g) { return l1(g, g.param(a), g.param(c)); });
      break;
  }
  EXPECT_LT(err, 1e-4) << "primitive case " << GetParam();
}

INSTANTIATE_TEST_SUITE_P(AllPrimitives, PrimitiveGradient, ::testing::Range(0, 18));
