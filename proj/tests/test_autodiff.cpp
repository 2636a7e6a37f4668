#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <string>

#include "cdvito/autodiff.hpp"
#include "cdvito/rng.hpp"

using namespace cdvito;
using namespace cdvito::ad;

namespace {

Matrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Matrix m(r, c);
  for (double& v : m.values()) v = rng.uniform(lo, hi);
  return m;
}

// Reduces a matrix-valued op to a scalar with fixed random weights so every
// output entry contributes a distinct coefficient.
Var weigh(Tape& tape, const Var& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(hadamard(out, tape.constant(random_matrix(rng, out.rows(), out.cols()))));
}

struct PrimitiveCase {
  const char* name;
  std::vector<std::pair<std::size_t, std::size_t>> shapes;
  std::function<Var(Tape&, std::span<const Var>)> op;
  double lo = -1.0, hi = 1.0;
};

std::vector<PrimitiveCase> primitive_cases() {
  return {
      {"add", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }},
      {"add_row_broadcast", {{3, 4}, {1, 4}}, [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }},
      {"add_col_broadcast", {{3, 4}, {3, 1}}, [](Tape&, std::span<const Var> v) { return add(v[0], v[1]); }},
      {"subtract", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return subtract(v[0], v[1]); }},
      {"hadamard", {{2, 5}, {2, 5}}, [](Tape&, std::span<const Var> v) { return hadamard(v[0], v[1]); }},
      {"scale", {{3, 3}}, [](Tape&, std::span<const Var> v) { return scale(v[0], -2.5); }},
      {"matmul", {{3, 4}, {4, 2}}, [](Tape&, std::span<const Var> v) { return matmul(v[0], v[1]); }},
      {"transpose", {{3, 4}}, [](Tape&, std::span<const Var> v) { return transpose(v[0]); }},
      {"row_softmax", {{3, 5}}, [](Tape&, std::span<const Var> v) { return row_softmax(v[0]); }},
      {"log", {{2, 3}}, [](Tape&, std::span<const Var> v) { return log(v[0]); }, 0.5, 2.0},
      {"exp", {{2, 3}}, [](Tape&, std::span<const Var> v) { return exp(v[0]); }},
      {"mean", {{3, 4}}, [](Tape&, std::span<const Var> v) { return mean(v[0]); }},
      {"mean_rows", {{3, 4}}, [](Tape&, std::span<const Var> v) { return mean_rows(v[0]); }},
      {"l2_normalize_rows", {{3, 4}}, [](Tape&, std::span<const Var> v) { return l2_normalize_rows(v[0]); }},
      {"cosine_similarity_matrix", {{3, 4}, {5, 4}},
       [](Tape&, std::span<const Var> v) { return cosine_similarity_matrix(v[0], v[1]); }},
      {"smooth_l1", {{3, 4}, {3, 4}}, [](Tape&, std::span<const Var> v) { return smooth_l1(v[0], v[1]); }, -2.0, 2.0},
      {"cross_entropy", {{4, 3}},
       [](Tape&, std::span<const Var> v) { return cross_entropy_with_logits(v[0], {0, 2, 1, 2}); }, -3.0, 3.0},
      {"cross_entropy_masked", {{3, 4}},
       [](Tape&, std::span<const Var> v) {
         return cross_entropy_with_logits(v[0], {1, 3, 0}, LogitMask{{1, 1, 0, 1}, {0, 1, 1, 1}, {1, 0, 1, 1}});
       },
       -3.0, 3.0},
      {"slice_rows", {{5, 3}}, [](Tape&, std::span<const Var> v) { return slice_rows(v[0], 1, 3); }},
      {"gather_rows", {{4, 3}}, [](Tape&, std::span<const Var> v) { return gather_rows(v[0], {3, 0, 3, 1}); }},
      {"concat_rows", {{2, 3}, {1, 3}}, [](Tape&, std::span<const Var> v) { return concat_rows({v[0], v[1]}); }},
      {"concat_cols", {{2, 3}, {2, 1}}, [](Tape&, std::span<const Var> v) { return concat_cols({v[0], v[1]}); }},
      {"reshape", {{2, 6}}, [](Tape&, std::span<const Var> v) { return reshape(v[0], 3, 4); }},
      {"row_max", {{3, 5}}, [](Tape&, std::span<const Var> v) { return row_max(v[0]); }},
  };
}

}  // namespace

TEST(AutodiffPrimitives, GradientsMatchCentralDifferencesAtHundredPoints) {
  for (const PrimitiveCase& pc : primitive_cases()) {
    Rng rng(derive_seed(42, std::hash<std::string>{}(pc.name)));
    double worst = 0.0;
    for (int point = 0; point < 100; ++point) {
      std::vector<Matrix> values;
      for (auto [r, c] : pc.shapes) values.push_back(random_matrix(rng, r, c, pc.lo, pc.hi));
      const std::uint64_t wseed = rng.next_u64();
      const LossFn fn = [&](Tape& t, std::span<const Var> v) { return weigh(t, pc.op(t, v), wseed); };
      worst = std::max(worst, grad_check(fn, values, 1e-5));
    }
    EXPECT_LE(worst, 1e-4) << pc.name;
  }
}

TEST(AutodiffPrimitives, RowSoftmaxOfZerosIsUniform) {
  Tape t;
  const Matrix s = row_softmax(t.constant(Matrix(1, 3))).value();
  for (double v : s.values()) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(AutodiffPrimitives, CosineDiagonalIsOne) {
  Tape t;
  const Var v = t.constant(Matrix(2, 3, {1.0, -2.0, 0.5, 3.0, 0.1, 0.0}));
  const Matrix c = cosine_similarity_matrix(v, v).value();
  EXPECT_NEAR(c(0, 0), 1.0, 1e-15);
  EXPECT_NEAR(c(1, 1), 1.0, 1e-15);
}

TEST(AutodiffPrimitives, SmoothL1OfEqualInputsIsZero) {
  Tape t;
  const Var a = t.constant(Matrix(2, 2, {0.3, -4.0, 2.0, 1.0}));
  EXPECT_EQ(smooth_l1(a, a).item(), 0.0);
}

TEST(AutodiffPrimitives, SmoothL1UsesUnitTransition) {
  Tape t;
  const Var p = t.constant(Matrix::row_vector({0.5, 3.0}));
  const Var y = t.constant(Matrix::row_vector({0.0, 0.0}));
  // 0.5 * 0.25 and 3 - 0.5, averaged.
  EXPECT_DOUBLE_EQ(smooth_l1(p, y).item(), (0.125 + 2.5) / 2.0);
}

TEST(AutodiffPrimitives, NormalizedRowsHaveUnitNorm) {
  Rng rng(5);
  Tape t;
  const Matrix n = l2_normalize_rows(t.constant(random_matrix(rng, 20, 7))).value();
  for (std::size_t r = 0; r < n.rows(); ++r) {
    double ss = 0.0;
    for (double v : n.row(r)) ss += v * v;
    EXPECT_NEAR(std::sqrt(ss), 1.0, 1e-12);
  }
}

TEST(AutodiffBackward, SumOfSquaresGradient) {
  Tape t;
  const Var x = t.leaf(Matrix::scalar(3.0));
  const Gradients g = t.backward(sum(hadamard(x, x)));
  EXPECT_DOUBLE_EQ(g[x](0, 0), 6.0);
}

TEST(AutodiffBackward, MeanGradientIsUniform) {
  Tape t;
  const Var x = t.leaf(Matrix::row_vector({1.0, 2.0, 3.0, 4.0}));
  const Gradients g = t.backward(mean(x));
  for (double v : g[x].values()) EXPECT_DOUBLE_EQ(v, 0.25);
}

TEST(AutodiffBackward, SoftmaxJacobianRowsSumToZero) {
  const Matrix x0 = Matrix::row_vector({0.2, -1.0, 0.7, 0.1});
  for (std::size_t out = 0; out < 4; ++out) {
    Tape t;
    const Var x = t.leaf(x0);
    const Var picked = slice_rows(transpose(row_softmax(x)), out, 1);
    const Gradients g = t.backward(picked);
    double s = 0.0;
    for (double v : g[x].values()) s += v;
    EXPECT_NEAR(s, 0.0, 1e-15);
  }
}

TEST(AutodiffBackward, UntouchedLeafGetsZeroGradient) {
  Tape t;
  const Var x = t.leaf(Matrix::scalar(2.0));
  const Var unused = t.leaf(Matrix(2, 2, 1.0));
  const Gradients g = t.backward(scale(x, 3.0));
  EXPECT_EQ(g[unused], Matrix(2, 2));
}

TEST(AutodiffBackward, SecondBackwardIsRejected) {
  Tape t;
  const Var x = t.leaf(Matrix::scalar(1.0));
  const Var y = scale(x, 2.0);
  t.backward(y);
  EXPECT_THROW(t.backward(y), ContractError);
  EXPECT_THROW(scale(x, 1.0), ContractError);
}

TEST(AutodiffBackward, NonScalarLossIsRejected) {
  Tape t;
  const Var x = t.leaf(Matrix(2, 2, 1.0));
  EXPECT_THROW(t.backward(x), ContractError);
}

TEST(AutodiffErrors, ShapeMismatchNamesBothShapes) {
  Tape t;
  const Var a = t.constant(Matrix(2, 3));
  const Var b = t.constant(Matrix(4, 5));
  try {
    matmul(a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos);
    EXPECT_NE(msg.find("4x5"), std::string::npos);
  }
  EXPECT_THROW(add(a, b), ShapeError);
}

TEST(AutodiffErrors, NonFiniteOutputIsNumericError) {
  Tape t;
  EXPECT_THROW(log(t.constant(Matrix::scalar(0.0))), NumericError);
  EXPECT_THROW(exp(t.constant(Matrix::scalar(1000.0))), NumericError);
}

TEST(AutodiffErrors, CrossEntropyAgainstMaskedLabelIsRejected) {
  Tape t;
  const Var z = t.constant(Matrix::row_vector({1.0, 2.0}));
  EXPECT_THROW(cross_entropy_with_logits(z, {0}, LogitMask{{0, 1}}), ContractError);
}

TEST(GradCheck, QuadraticIsExact) {
  const LossFn fn = [](Tape&, std::span<const Var> v) { return sum(hadamard(v[0], v[0])); };
  Rng rng(1);
  EXPECT_LE(grad_check(fn, {random_matrix(rng, 3, 3)}, 1e-5), 1e-8);
}

TEST(GradCheck, NonDeterministicLossIsCheckError) {
  int calls = 0;
  const LossFn fn = [&](Tape&, std::span<const Var> v) { return scale(sum(v[0]), 1.0 + 0.1 * ++calls); };
  EXPECT_THROW(grad_check(fn, {Matrix(1, 2, 1.0)}, 1e-5), CheckError);
}

TEST(GradCheck, RejectsNonPositiveEps) {
  const LossFn fn = [](Tape&, std::span<const Var> v) { return sum(v[0]); };
  EXPECT_THROW(grad_check(fn, {Matrix(1, 1)}, 0.0), ContractError);
}

TEST(GradCheck, DetectsWrongGradient) {
  // A backward rule that is off by a factor of two must be caught.
  const LossFn fn = [](Tape& t, std::span<const Var> v) {
    const Matrix& x = v[0].value();
    Matrix out(1, 1, x(0, 0) * x(0, 0));
    return t.record("bad_square", std::move(out), {v[0]},
                    [](const Tape& tape, const Matrix& g, std::span<Matrix* const> in) {
                      (void)tape;
                      (*in[0])(0, 0) += g(0, 0) * 4.0;
                    });
  };
  const std::vector<Matrix> point{Matrix::scalar(1.5)};
  EXPECT_GT(grad_check(fn, point, 1e-5), 0.1);
}
