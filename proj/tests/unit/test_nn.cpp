#include <doctest.h>

#include <cmath>
#include <functional>

#include "dimae/errors.hpp"
#include "dimae/nn.hpp"
#include "dimae/rng.hpp"

using namespace dimae;
using namespace dimae::nn;

namespace {

Matrix<double> random_matrix(Index r, Index c, Rng& rng, double scale = 1.0) {
  Matrix<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = scale * rng.normal();
  return m;
}

void randomize(ParameterStore<double>& p, Rng& rng) {
  for (ParamId id = 0; id < p.size(); ++id) p.value(id) = random_matrix(p.value(id).rows(), p.value(id).cols(), rng, 0.5);
}

// The floor absorbs central-difference round-off (~1e-10) on structurally zero gradients.
double relative_error(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-4}); }

/// Checks analytic dL/dparams and dL/dx for L = sum(R .* f(x)) against central differences.
void check_gradients(ParameterStore<double>& p, Matrix<double>& x,
                     const std::function<Matrix<double>(const Matrix<double>&)>& forward,
                     const std::function<Matrix<double>(const Matrix<double>&, Gradients<double>&)>& backward,
                     Rng& rng) {
  const Matrix<double> y = forward(x);
  const Matrix<double> r = random_matrix(y.rows(), y.cols(), rng);
  Gradients<double> g(p);
  const Matrix<double> dx = backward(r, g);
  auto loss = [&] { return forward(x).cwiseProduct(r).sum(); };
  const double h = 1e-5;
  for (ParamId id = 0; id < p.size(); ++id) {
    auto& v = p.value(id);
    for (int t = 0; t < 4; ++t) {
      const Index i = rng.uniform_int(0, static_cast<int>(v.size()) - 1);
      const double keep = v.data()[i];
      v.data()[i] = keep + h;
      const double up = loss();
      v.data()[i] = keep - h;
      const double down = loss();
      v.data()[i] = keep;
      const double fd = (up - down) / (2 * h);
      const double an = g.find(id) ? g.find(id)->data()[i] : 0.0;
      CHECK_MESSAGE(relative_error(an, fd) < 1e-5, p.name(id) << " analytic " << an << " fd " << fd);
    }
  }
  for (int t = 0; t < 8; ++t) {
    const Index i = rng.uniform_int(0, static_cast<int>(x.size()) - 1);
    const double keep = x.data()[i];
    x.data()[i] = keep + h;
    const double up = loss();
    x.data()[i] = keep - h;
    const double down = loss();
    x.data()[i] = keep;
    CHECK(relative_error(dx.data()[i], (up - down) / (2 * h)) < 1e-5);
  }
}

}  // namespace

TEST_SUITE("nn") {
  TEST_CASE("gelu derivative matches finite differences") {
    for (double x = -4.0; x <= 4.0; x += 0.37) {
      const double fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
      CHECK(gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
    }
    CHECK(gelu(0.0) == 0.0);
    CHECK(gelu(10.0) == doctest::Approx(10.0));
  }

  TEST_CASE("linear layer gradients") {
    Rng rng(1);
    ParameterStore<double> p;
    auto layer = Linear<double>::create(p, "lin", 5, 3, rng);
    randomize(p, rng);
    Matrix<double> x = random_matrix(4, 5, rng);
    check_gradients(
        p, x, [&](const Matrix<double>& in) { return layer.forward(p, in); },
        [&](const Matrix<double>& dy, Gradients<double>& g) { return layer.backward(p, x, dy, g); }, rng);
  }

  TEST_CASE("layer norm gradients and output statistics") {
    Rng rng(2);
    ParameterStore<double> p;
    auto ln = LayerNorm<double>::create(p, "ln", 6);
    Matrix<double> x = random_matrix(3, 6, rng, 2.0);
    LayerNormCache<double> cache;
    const auto y = ln.forward(p, x, cache);
    for (Index r = 0; r < 3; ++r) {
      CHECK(std::abs(y.row(r).mean()) < 1e-12);
      CHECK(y.row(r).squaredNorm() / 6.0 == doctest::Approx(1.0).epsilon(1e-5));
    }
    randomize(p, rng);
    check_gradients(
        p, x,
        [&](const Matrix<double>& in) {
          LayerNormCache<double> c;
          return ln.forward(p, in, c);
        },
        [&](const Matrix<double>& dy, Gradients<double>& g) {
          LayerNormCache<double> c;
          ln.forward(p, x, c);
          return ln.backward(p, dy, c, g);
        },
        rng);
  }

  TEST_CASE("attention gradients over two independent segments") {
    Rng rng(3);
    ParameterStore<double> p;
    auto attn = MultiHeadAttention<double>::create(p, "attn", 8, 2, rng);
    randomize(p, rng);
    Matrix<double> x = random_matrix(7, 8, rng);
    const std::vector<Index> offsets{0, 3, 7};
    check_gradients(
        p, x,
        [&](const Matrix<double>& in) {
          AttentionCache<double> c;
          return attn.forward(p, in, offsets, c);
        },
        [&](const Matrix<double>& dy, Gradients<double>& g) {
          AttentionCache<double> c;
          attn.forward(p, x, offsets, c);
          return attn.backward(p, dy, offsets, c, g);
        },
        rng);
  }

  TEST_CASE("attention segments do not see each other") {
    Rng rng(4);
    ParameterStore<double> p;
    auto attn = MultiHeadAttention<double>::create(p, "attn", 8, 2, rng);
    randomize(p, rng);
    Matrix<double> x = random_matrix(6, 8, rng);
    const std::vector<Index> offsets{0, 2, 6};
    AttentionCache<double> c;
    const auto y = attn.forward(p, x, offsets, c);
    x.row(4).setConstant(3.0);
    AttentionCache<double> c2;
    const auto y2 = attn.forward(p, x, offsets, c2);
    CHECK(y.topRows(2) == y2.topRows(2));
    CHECK(y.bottomRows(4) != y2.bottomRows(4));
    CHECK_THROWS_AS(MultiHeadAttention<double>::create(p, "bad", 10, 3, rng), ValidationError);
  }

  TEST_CASE("transformer block gradients") {
    Rng rng(5);
    ParameterStore<double> p;
    auto block = Block<double>::create(p, "blk", 8, 2, 16, rng);
    randomize(p, rng);
    Matrix<double> x = random_matrix(5, 8, rng);
    const std::vector<Index> offsets{0, 5};
    check_gradients(
        p, x,
        [&](const Matrix<double>& in) {
          BlockCache<double> c;
          return block.forward(p, in, offsets, c);
        },
        [&](const Matrix<double>& dy, Gradients<double>& g) {
          BlockCache<double> c;
          block.forward(p, x, offsets, c);
          return block.backward(p, dy, offsets, c, g);
        },
        rng);
  }

  TEST_CASE("gradient buffers are lazily allocated and exactly zero until touched") {
    ParameterStore<float> p;
    const auto a = p.add("a", 2, 3, true);
    const auto b = p.add("b", 1, 3, false);
    Gradients<float> g(p);
    CHECK(!g.touched(a));
    CHECK(g.squared_norm(a) == 0.0);
    g[b](0, 1) = 2.0f;
    CHECK(g.touched(b));
    CHECK(!g.touched(a));
    CHECK(g.squared_norm(b) == 4.0);
    CHECK_THROWS_AS(p.add("a", 1, 1, true), ValidationError);
    CHECK(p.scalar_count() == 9);
  }

  TEST_CASE("positional embedding layout") {
    const auto pos = sincos_position_embedding<double>(8, 3, 4);
    CHECK(pos.rows() == 12);
    CHECK(pos.cols() == 8);
    // position 0: sin(0) = 0, cos(0) = 1 in both halves
    CHECK(pos(0, 0) == 0.0);
    CHECK(pos(0, 2) == 1.0);
    CHECK(pos(0, 4) == 0.0);
    CHECK(pos(0, 6) == 1.0);
    // row index 5 is (y=1, x=1); the lowest frequency is 1
    CHECK(pos(5, 0) == doctest::Approx(std::sin(1.0)));
    CHECK(pos(5, 4) == doctest::Approx(std::sin(1.0)));
    CHECK(pos(1, 4) == 0.0);
    CHECK_THROWS_AS(sincos_position_embedding<double>(6, 2, 2), ValidationError);
  }
}
