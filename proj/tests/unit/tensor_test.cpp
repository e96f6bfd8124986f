#include <gtest/gtest.h>

#include <cmath>

#include "mct/errors.hpp"
#include "mct/gradcheck.hpp"
#include "mct/random.hpp"
#include "mct/tensor.hpp"

namespace mct {
namespace {

void expect_near_all(const Tensor& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

TEST(Tensor, ConstructorChecksLength) {
  EXPECT_THROW(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  EXPECT_THROW(Tensor({0, 3}), ShapeError);
  const Tensor t({2, 3});
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  const Tensor b = Tensor::matrix(2, 3, {1, -2, 3, 4.5, 5, -6});
  expect_near_all(matmul(Tensor::identity(2), b), {1, -2, 3, 4.5, 5, -6}, 0.0);
}

TEST(Matmul, HandComputedProduct) {
  const Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  const Tensor b = Tensor::matrix(2, 1, {5, 6});
  expect_near_all(matmul(a, b), {17, 39}, 0.0);
}

TEST(Matmul, ZeroMatrixGivesZero) {
  Rng rng(3);
  const Tensor b = random_normal({4, 3}, rng);
  const Tensor product = matmul(Tensor({2, 4}), b);
  for (double v : product.data()) EXPECT_EQ(v, 0.0);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(Tensor({2, 3}), Tensor({4, 5}));
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("2x3"), std::string::npos) << msg;
    EXPECT_NE(msg.find("4x5"), std::string::npos) << msg;
  }
}

TEST(Softmax, EqualRowIsUniform) {
  expect_near_all(softmax_rows(Tensor::matrix(1, 4, {2, 2, 2, 2})), {0.25, 0.25, 0.25, 0.25}, 1e-15);
}

TEST(Softmax, SingleColumnIsOne) {
  expect_near_all(softmax_rows(Tensor::matrix(3, 1, {-5, 0, 7})), {1, 1, 1}, 0.0);
}

TEST(Softmax, ClosedFormRow) {
  expect_near_all(softmax_rows(Tensor::matrix(1, 2, {0, std::log(3.0)})), {0.25, 0.75}, 1e-15);
}

TEST(Softmax, RowsSumToOneAndIgnoreRowShift) {
  Rng rng(11);
  const Tensor x = random_normal({5, 7}, rng, 10.0);
  std::vector<double> shifted(x.data().begin(), x.data().end());
  for (std::size_t j = 0; j < 7; ++j) shifted[2 * 7 + j] += 123.0;
  const Tensor s = softmax_rows(x);
  const Tensor t = softmax_rows(Tensor::matrix(5, 7, shifted));
  for (std::size_t i = 0; i < 5; ++i) {
    double total = 0.0;
    for (std::size_t j = 0; j < 7; ++j) total += s.at(i, j);
    EXPECT_NEAR(total, 1.0, 1e-12);
  }
  for (std::size_t i = 0; i < s.size(); ++i) EXPECT_NEAR(s[i], t[i], 1e-12);
}

TEST(Softmax, LargeScoresStayFinite) {
  const Tensor s = softmax_rows(Tensor::matrix(1, 3, {1000, 999, -1e9}));
  for (double v : s.data()) EXPECT_TRUE(std::isfinite(v));
}

TEST(LayerNorm, ConstantRowBecomesZero) {
  const Tensor out = layer_norm(Tensor::matrix(1, 3, {4, 4, 4}), Tensor::filled({3}, 1), Tensor({3}), 1e-5);
  expect_near_all(out, {0, 0, 0}, 0.0);
}

TEST(LayerNorm, HandComputedRowWithoutEps) {
  const Tensor out = layer_norm(Tensor::matrix(1, 2, {1, 3}), Tensor::filled({2}, 1), Tensor({2}), 0.0);
  expect_near_all(out, {-1, 1}, 1e-15);
}

TEST(LayerNorm, ZeroGainGivesBias) {
  Rng rng(5);
  const Tensor bias = Tensor::vector({0.5, -1, 2});
  const Tensor out = layer_norm(random_normal({4, 3}, rng), Tensor({3}), bias, 1e-5);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(out.at(i, j), bias[j]);
}

TEST(LayerNorm, UnitGainRowsAreStandardized) {
  Rng rng(8);
  const Tensor out = layer_norm(random_normal({6, 16}, rng, 10.0), Tensor::filled({16}, 1), Tensor({16}), 1e-5);
  for (std::size_t i = 0; i < 6; ++i) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < 16; ++j) mean += out.at(i, j) / 16;
    for (std::size_t j = 0; j < 16; ++j) var += (out.at(i, j) - mean) * (out.at(i, j) - mean) / 16;
    EXPECT_LT(std::abs(mean), 1e-10);
    EXPECT_NEAR(var, 1.0, 1e-6);
  }
}

TEST(Elementwise, Relu) { expect_near_all(relu(Tensor::vector({-1, 0, 2})), {0, 0, 2}, 0.0); }

TEST(Elementwise, ReluPropagatesNaN) {
  const Tensor out = relu(Tensor::vector({std::nan(""), -3.0}));
  EXPECT_TRUE(std::isnan(out[0]));
  EXPECT_EQ(out[1], 0.0);
}

TEST(Elementwise, ConcatColsKeepsBlocks) {
  const Tensor parts[] = {Tensor::matrix(2, 2, {1, 2, 3, 4}), Tensor::matrix(2, 1, {5, 6}),
                          Tensor::matrix(2, 2, {7, 8, 9, 10})};
  const Tensor c = concat_cols(parts);
  EXPECT_EQ(c.shape(), (Shape{2, 5}));
  expect_near_all(c, {1, 2, 5, 7, 8, 3, 4, 6, 9, 10}, 0.0);
}

TEST(Elementwise, TransposeAddScale) {
  const Tensor a = Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6});
  expect_near_all(transpose(a), {1, 4, 2, 5, 3, 6}, 0.0);
  expect_near_all(add(a, a), {2, 4, 6, 8, 10, 12}, 0.0);
  expect_near_all(scale(a, -0.5), {-0.5, -1, -1.5, -2, -2.5, -3}, 0.0);
  EXPECT_THROW(add(a, transpose(a)), ShapeError);
}

TEST(Elementwise, MaskedFillAndIndexErrors) {
  Mask m(1, 3);
  m.set(0, 1, true);
  expect_near_all(masked_fill(Tensor::matrix(1, 3, {1, 2, 3}), m, -9), {1, -9, 3}, 0.0);
  const int bad[] = {0, 4};
  EXPECT_THROW(embedding_rows(Tensor({4, 2}), bad), IndexError);
}

TEST(Backward, SumGivesOnes) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::matrix(2, 2, {1, -2, 3, 4}));
  expect_near_all(backward(tape, sum(x)).of(x), {1, 1, 1, 1}, 0.0);
}

TEST(Backward, ReluSubgradient) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({-1, 2}));
  expect_near_all(backward(tape, sum(relu(x))).of(x), {0, 1}, 0.0);
}

TEST(Backward, EmbeddingGradientAccumulates) {
  Tape tape;
  const Tensor table = tape.leaf(Tensor::matrix(3, 2, {1, 2, 3, 4, 5, 6}));
  const int ids[] = {0, 0};
  const Tensor g = backward(tape, sum(embedding_rows(table, ids))).of(table);
  expect_near_all(g, {2, 2, 0, 0, 0, 0}, 0.0);
}

TEST(Backward, MaskedPositionsGetZeroGradient) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::matrix(1, 3, {1, 2, 3}));
  Mask m(1, 3);
  m.set(0, 0, true);
  const Tensor g = backward(tape, sum(masked_fill(x, m, -1e9))).of(x);
  expect_near_all(g, {0, 1, 1}, 0.0);
}

TEST(Backward, NonScalarRootIsContractError) {
  Tape tape;
  const Tensor x = tape.leaf(Tensor::vector({1, 2}));
  EXPECT_THROW(backward(tape, relu(x)), ContractError);
}

TEST(Backward, RepeatedSweepsAreBitIdentical) {
  Rng rng(4);
  Tape tape;
  const Tensor x = tape.leaf(random_normal({3, 4}, rng));
  const Tensor w = tape.leaf(random_normal({4, 4}, rng));
  const Tensor root = sum(softmax_rows(matmul(x, w)));
  const Tensor g1 = backward(tape, root).of(w);
  const Tensor g2 = backward(tape, root).of(w);
  for (std::size_t i = 0; i < g1.size(); ++i) EXPECT_EQ(g1[i], g2[i]);
}

TEST(Backward, TapeIsTopological) {
  Rng rng(6);
  Tape tape;
  const Tensor x = tape.leaf(random_normal({2, 3}, rng));
  sum(relu(matmul(x, transpose(x))));
  for (std::size_t n = 0; n < tape.size(); ++n)
    for (int in : tape.inputs(static_cast<int>(n))) EXPECT_LT(in, static_cast<int>(n));
}

TEST(GradCheck, SumOfSquares) {
  Rng rng(1);
  const double err = grad_check([](const Tensor& x) { return sum(mul(x, x)); }, random_normal({3, 4}, rng), 1e-5);
  EXPECT_LT(err, 1e-7);
}

TEST(GradCheck, CrossEntropyOfRandomLogits) {
  Rng rng(2);
  const int targets[] = {0, 3, 1};
  const std::uint8_t active[] = {1, 1, 1};
  const double err = grad_check([&](const Tensor& x) { return softmax_cross_entropy(x, targets, active); },
                                random_normal({3, 4}, rng), 1e-5);
  EXPECT_LT(err, 1e-5);
}

TEST(GradCheck, ConstantFunctionIsZero) {
  const double err = grad_check([](const Tensor&) { return Tensor::scalar(2.5); }, Tensor::vector({1, 2}), 1e-5);
  EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, RejectsEpsOutsideRange) {
  auto f = [](const Tensor& x) { return sum(x); };
  EXPECT_THROW(grad_check(f, Tensor::vector({1}), 1e-2), ContractError);
  EXPECT_THROW(grad_check(f, Tensor::vector({1}), 1e-9), ContractError);
}

// Each differentiable op on random 3×4 inputs, eps 1e-5.
TEST(GradCheck, EveryOperationOnSmallInputs) {
  Rng rng(12);
  const Tensor other = random_normal({3, 4}, rng);
  const Tensor right = random_normal({4, 2}, rng);
  const Tensor gain = random_normal({4}, rng);
  const Tensor weights = random_normal({3, 4}, rng);
  auto project = [&](const Tensor& y) { return sum(mul(y, weights)); };
  const std::vector<std::pair<const char*, ScalarFunction>> ops = {
      {"matmul", [&](const Tensor& x) { return sum(matmul(x, right)); }},
      {"transpose", [&](const Tensor& x) { return sum(matmul(transpose(x), other)); }},
      {"add", [&](const Tensor& x) { return project(add(x, other)); }},
      {"mul", [&](const Tensor& x) { return project(mul(x, other)); }},
      {"scale", [&](const Tensor& x) { return project(scale(x, -1.7)); }},
      {"add_bias", [&](const Tensor& x) { return project(add_bias(other, slice_rows(x, 0, 1))); }},
      {"sigmoid", [&](const Tensor& x) { return project(sigmoid(x)); }},
      {"tanh", [&](const Tensor& x) { return project(tanh(x)); }},
      {"softmax", [&](const Tensor& x) { return project(softmax_rows(x)); }},
      {"layer_norm", [&](const Tensor& x) { return project(layer_norm(x, gain, gain, 1e-5)); }},
      {"concat_cols", [&](const Tensor& x) {
         const Tensor p[] = {x, other};
         return sum(matmul(concat_cols(p), Tensor::filled({8, 1}, 0.3)));
       }},
      {"concat_rows", [&](const Tensor& x) {
         const Tensor p[] = {x, other};
         return sum(mul(concat_rows(p), concat_rows(std::vector<Tensor>{weights, weights})));
       }},
      {"mean_rows", [&](const Tensor& x) { return sum(mul(mean_rows(x), slice_rows(weights, 1, 1))); }},
      {"weighted_sum", [&](const Tensor& x) {
         const Tensor p[] = {x, other};
         return project(weighted_sum(p, Tensor::vector({0.3, -0.8})));
       }},
      {"scale_by", [&](const Tensor& x) {
         return project(scale_by(other, slice_rows(transpose(slice_rows(x, 1, 1)), 2, 1)));
       }},
      {"relu", [&](const Tensor& x) { return project(relu(x)); }},
      {"masked_fill", [&](const Tensor& x) {
         Mask m(3, 4);
         m.set(1, 2, true);
         return project(masked_fill(x, m, -4.0));
       }},
      {"embedding_rows", [&](const Tensor& x) {
         const int ids[] = {2, 0, 2};
         return project(embedding_rows(x, ids));
       }},
      {"cross_entropy", [&](const Tensor& x) {
         const int targets[] = {1, 3, 0};
         const std::uint8_t active[] = {1, 0, 1};
         return softmax_cross_entropy(x, targets, active);
       }},
  };
  for (const auto& [name, f] : ops) {
    EXPECT_LT(grad_check(f, random_normal({3, 4}, rng), 1e-5), 1e-5) << name;
  }
}

}  // namespace
}  // namespace mct
