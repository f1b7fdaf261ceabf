#include <gtest/gtest.h>

#include <random>

#include "qr/losses.hpp"
#include "test_util.hpp"

namespace qr {
namespace {

using testing::concat;
using testing::numeric_gradient;
using testing::random_vector;
using testing::relative_error;
using testing::split;

constexpr double kGradTolerance = 1e-4;

struct Instance {
  std::vector<Vector> views;
  Vector positive;
  std::vector<Vector> negatives;
  Vector weights;
  double lambda = 0.0;
};

Instance random_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> dim(2, 16), views(2, 6), negs(1, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Instance in;
  const std::size_t d = dim(rng), n = views(rng), m = negs(rng);
  for (std::size_t i = 0; i < n; ++i) in.views.push_back(random_vector(rng, d, 0.5));
  in.positive = random_vector(rng, d, 0.5);
  for (std::size_t j = 0; j < m; ++j) in.negatives.push_back(random_vector(rng, d, 0.5));
  for (std::size_t i = 0; i < n; ++i) in.weights.push_back(u(rng));
  in.lambda = u(rng);
  return in;
}

// Flattened gradient [views..., positive, negatives...] of a multi-view loss.
Vector flat(const MultiViewGrads& g) {
  Vector out = concat(g.d_views);
  out.insert(out.end(), g.d_positive.begin(), g.d_positive.end());
  const auto negs = concat(g.d_negatives);
  out.insert(out.end(), negs.begin(), negs.end());
  return out;
}

// Finite-difference gradient of `loss(views, positive, negatives)` over every input.
template <class F>
Vector fd_all(const Instance& in, F&& loss) {
  const std::size_t n = in.views.size(), d = in.positive.size(), m = in.negatives.size();
  Vector x = concat(in.views);
  x.insert(x.end(), in.positive.begin(), in.positive.end());
  const auto negs = concat(in.negatives);
  x.insert(x.end(), negs.begin(), negs.end());
  return numeric_gradient(
      [&](const Vector& p) {
        const auto views = split(Vector(p.begin(), p.begin() + n * d), n, d);
        const Vector pos(p.begin() + n * d, p.begin() + (n + 1) * d);
        const auto negatives = split(Vector(p.begin() + (n + 1) * d, p.end()), m, d);
        return loss(views, pos, negatives);
      },
      x);
}

TEST(MvcLoss, SymmetricScoresGiveLn2) {
  const Vector q{1.0, 0.0};
  const auto r = mvc_loss(q, Vector{0.5, 0.5}, std::vector<Vector>{{0.5, -0.5}});
  EXPECT_NEAR(r.loss, 0.693147180559945309, 1e-15);
}

TEST(MvcLoss, OrthogonalNegative) {
  // -log(e / (e + 1)), evaluated with 30-digit arithmetic.
  const auto r = mvc_loss(Vector{1.0, 0.0}, Vector{1.0, 0.0}, std::vector<Vector>{{0.0, 1.0}});
  EXPECT_NEAR(r.loss, 0.313261687518222834, 1e-15);
  EXPECT_GT(r.loss, 0.0);
}

TEST(MvcLoss, VanishesAsMarginGrows) {
  double previous = 1.0;
  for (double s : {1.0, 10.0, 50.0, 400.0}) {
    const auto r = mvc_loss(Vector{s, 0.0}, Vector{1.0, 0.0}, std::vector<Vector>{{-1.0, 0.0}});
    EXPECT_LE(r.loss, previous);
    EXPECT_GE(r.loss, 0.0);
    previous = r.loss;
  }
  EXPECT_LT(previous, 1e-12);
}

TEST(MvcLoss, Errors) {
  EXPECT_THROW(mvc_loss(Vector{1.0, 0.0}, Vector{1.0, 0.0}, std::vector<Vector>{}), DataError);
  EXPECT_THROW(mvc_loss(Vector{1.0, 0.0}, Vector{1.0, 0.0, 0.0}, std::vector<Vector>{{0.0, 1.0}}), DataError);
  EXPECT_THROW(mvc_loss(Vector{1.0, 0.0}, Vector{1.0, 0.0}, std::vector<Vector>{{0.0, 1.0, 2.0}}), DataError);
}

TEST(MvrLoss, Anchors) {
  const Vector a{1.0, 2.0, -1.0};
  EXPECT_NEAR(mvr_loss(std::vector<Vector>{a, a, a}).loss, 1.0, 1e-15);
  EXPECT_NEAR(mvr_loss(std::vector<Vector>{{1, 0, 0}, {0, 2, 0}, {0, 0, 3}}).loss, 0.0, 1e-15);
  const double c = std::cos(M_PI / 3), s = std::sin(M_PI / 3);
  EXPECT_NEAR(mvr_loss(std::vector<Vector>{{1, 0}, {c, s}}).loss, 0.5, 1e-15);
}

TEST(MvrLoss, Errors) {
  EXPECT_THROW(mvr_loss(std::vector<Vector>{{1.0, 0.0}}), DataError);
  EXPECT_THROW(mvr_loss(std::vector<Vector>{{1.0, 0.0}, {0.0, 0.0}}), DataError);
}

TEST(MvrLoss, BoundedAndOneOnlyForCollinearViews) {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 300; ++t) {
    auto in = random_instance(rng);
    const double v = mvr_loss(in.views).loss;
    EXPECT_GE(v, -1.0);
    EXPECT_LT(v, 1.0);  // random views are never collinear
    std::vector<Vector> collinear;
    for (std::size_t i = 0; i < in.views.size(); ++i) collinear.push_back(scaled(in.views[0], 0.5 + i));
    EXPECT_NEAR(mvr_loss(collinear).loss, 1.0, 1e-12);
  }
}

TEST(DynamicWeights, Anchors) {
  const auto uniform = dynamic_weights(Vector{0.3, 0.3, 0.3, 0.3});
  for (double w : uniform) EXPECT_NEAR(w, 0.25, 1e-15);
  // softmax(0, 1) with 30-digit arithmetic
  const auto w = dynamic_weights(Vector{1.0, 0.0});
  EXPECT_NEAR(w[0], 0.268941421369995121, 1e-15);
  EXPECT_NEAR(w[1], 0.731058578630004879, 1e-15);
  EXPECT_THROW(dynamic_weights(Vector{1.2}), DataError);
  EXPECT_THROW(dynamic_weights(Vector{-0.1}), DataError);
}

TEST(DynamicWeights, SimplexMonotoneAndPermutationEquivariant) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 500; ++t) {
    Vector acc(1 + t % 8);
    for (auto& a : acc) a = u(rng);
    const auto w = dynamic_weights(acc);
    double sum = 0.0;
    for (double x : w) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
    for (std::size_t i = 0; i < acc.size(); ++i) {
      for (std::size_t j = 0; j < acc.size(); ++j) {
        if (acc[i] < acc[j]) {
          EXPECT_GT(w[i], w[j]);
        }
      }
    }
    Vector rev(acc.rbegin(), acc.rend());
    const auto wr = dynamic_weights(rev);
    for (std::size_t i = 0; i < acc.size(); ++i) EXPECT_NEAR(wr[i], w[acc.size() - 1 - i], 1e-15);
  }
}

TEST(LocalLoss, Reductions) {
  std::mt19937_64 rng(8);
  auto in = random_instance(rng);
  const std::size_t n = in.views.size();
  double mean_mvc = 0.0;
  for (const auto& v : in.views) mean_mvc += mvc_loss(v, in.positive, in.negatives).loss / static_cast<double>(n);
  const Vector uniform(n, 1.0 / static_cast<double>(n));
  EXPECT_NEAR(local_loss(in.views, in.positive, in.negatives, uniform, 0.0).loss, mean_mvc, 1e-12);

  Vector one_hot(n, 0.0);
  one_hot[0] = 1.0;
  EXPECT_DOUBLE_EQ(local_loss(in.views, in.positive, in.negatives, one_hot, 0.0).loss,
                   mvc_loss(in.views[0], in.positive, in.negatives).loss);
  EXPECT_THROW(local_loss(in.views, in.positive, in.negatives, Vector(n + 1, 0.1), 0.0), DataError);
}

TEST(GlobalLoss, DegenerateMeans) {
  std::mt19937_64 rng(9);
  auto in = random_instance(rng);
  const std::vector<Vector> single{in.views[0]};
  EXPECT_NEAR(global_loss(single, in.positive, in.negatives).loss,
              mvc_loss(in.views[0], in.positive, in.negatives).loss, 1e-14);
  const std::vector<Vector> same(5, in.views[1]);
  EXPECT_NEAR(global_loss(same, in.positive, in.negatives).loss,
              mvc_loss(in.views[1], in.positive, in.negatives).loss, 1e-14);
  EXPECT_GT(global_loss(in.views, in.positive, in.negatives).loss, 0.0);
  EXPECT_THROW(global_loss(in.views, in.positive, std::vector<Vector>{}), DataError);
}

TEST(TotalLoss, IsLocalPlusGlobal) {
  std::mt19937_64 rng(10);
  for (int t = 0; t < 50; ++t) {
    auto in = random_instance(rng);
    const auto tl = total_loss(in.views, in.positive, in.negatives, in.weights, in.lambda);
    const auto l = local_loss(in.views, in.positive, in.negatives, in.weights, in.lambda);
    const auto g = global_loss(in.views, in.positive, in.negatives);
    EXPECT_NEAR(tl.total, l.loss + g.loss, 1e-12);
    EXPECT_LT(relative_error(flat(tl.grads), [&] {
                auto sum = l;
                sum.accumulate(g, 1.0);
                return flat(sum);
              }()),
              1e-14);
  }
  // No local contribution: zero weights and lambda = 0.
  auto in = random_instance(rng);
  const Vector zero(in.views.size(), 0.0);
  EXPECT_DOUBLE_EQ(total_loss(in.views, in.positive, in.negatives, zero, 0.0).total,
                   global_loss(in.views, in.positive, in.negatives).loss);
}

class GradientCheck : public ::testing::Test {
 protected:
  std::mt19937_64 rng{1234};
};

TEST_F(GradientCheck, Mvc) {
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    const auto g = mvc_loss(in.views[0], in.positive, in.negatives, 0.7);
    Instance one = in;
    one.views = {in.views[0]};
    const auto numeric = fd_all(one, [](const auto& v, const auto& p, const auto& n) { return mvc_loss(v[0], p, n, 0.7).loss; });
    Vector analytic = g.d_query;
    analytic.insert(analytic.end(), g.d_positive.begin(), g.d_positive.end());
    const auto negs = concat(g.d_negatives);
    analytic.insert(analytic.end(), negs.begin(), negs.end());
    EXPECT_LT(relative_error(analytic, numeric), kGradTolerance);
  }
}

TEST_F(GradientCheck, Mvr) {
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    const auto g = mvr_loss(in.views);
    const std::size_t n = in.views.size(), d = in.positive.size();
    const auto numeric = numeric_gradient([&](const Vector& x) { return mvr_loss(split(x, n, d)).loss; }, concat(in.views));
    EXPECT_LT(relative_error(concat(g.d_views), numeric), kGradTolerance);
  }
}

TEST_F(GradientCheck, Local) {
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    const auto g = local_loss(in.views, in.positive, in.negatives, in.weights, in.lambda);
    const auto numeric = fd_all(in, [&](const auto& v, const auto& p, const auto& n) {
      return local_loss(v, p, n, in.weights, in.lambda).loss;
    });
    EXPECT_LT(relative_error(flat(g), numeric), kGradTolerance);
  }
}

TEST_F(GradientCheck, Global) {
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    const auto g = global_loss(in.views, in.positive, in.negatives);
    const auto numeric = fd_all(in, [](const auto& v, const auto& p, const auto& n) { return global_loss(v, p, n).loss; });
    EXPECT_LT(relative_error(flat(g), numeric), kGradTolerance);
  }
}

TEST_F(GradientCheck, Total) {
  for (int t = 0; t < 100; ++t) {
    auto in = random_instance(rng);
    const auto g = total_loss(in.views, in.positive, in.negatives, in.weights, in.lambda);
    const auto numeric = fd_all(in, [&](const auto& v, const auto& p, const auto& n) {
      return total_loss(v, p, n, in.weights, in.lambda).total;
    });
    EXPECT_LT(relative_error(flat(g.grads), numeric), kGradTolerance);
  }
}

}  // namespace
}  // namespace qr
