#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <vector>

#include "doctest.h"
#include "refexp/errors.hpp"
#include "refexp/grad_check.hpp"
#include "refexp/param_store.hpp"
#include "refexp/tensor.hpp"

using namespace refexp;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::mt19937_64& rng, double lo = -0.5,
                     double hi = 0.5) {
  Tensor t = Tensor::zeros(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (double& v : t.values) v = dist(rng);
  return t;
}

// Reduces any m x n node to a scalar sum of squares so every entry of the
// checked op contributes a nontrivial gradient.
int sum_of_squares(Graph& g, int node) {
  int squared = g.mul(node, node);
  std::size_t m = g.node_rows(squared);
  std::size_t n = g.node_cols(squared);
  std::vector<double> ones_left(m, 1.0);
  std::vector<double> ones_right(n, 1.0);
  int left = g.input(ones_left, 1, m);
  int right = g.input(ones_right, n, 1);
  return g.matmul(g.matmul(left, squared), right);
}

// Runs grad_check over `params` for a loss built as sum-of-squares of the
// node returned by `build`.
double check_op(ParamStore& params,
                const std::function<int(Graph&, std::vector<int>&)>& build) {
  auto loss_fn = [&](bool want_grad) {
    Graph g;
    std::vector<int> ids;
    for (std::size_t i = 0; i < params.size(); ++i) ids.push_back(g.param(params.tensor(i)));
    int out = build(g, ids);
    int loss = g.node_rows(out) == 1 && g.node_cols(out) == 1 ? out : sum_of_squares(g, out);
    if (want_grad) g.backward(loss);
    return g.value(loss);
  };
  return grad_check(params, loss_fn, 1e-5);
}

}  // namespace

TEST_CASE("matmul forward matches hand arithmetic") {
  Graph g;
  int a = g.input(std::vector<double>{1, 2, 3, 4}, 2, 2);
  int b = g.input(std::vector<double>{1, 1}, 2, 1);
  int c = g.matmul(a, b);
  REQUIRE(g.node_rows(c) == 2);
  REQUIRE(g.node_cols(c) == 1);
  CHECK(g.values(c)[0] == doctest::Approx(3.0));
  CHECK(g.values(c)[1] == doctest::Approx(7.0));

  int identity = g.input(std::vector<double>{1, 0, 0, 1}, 2, 2);
  int ix = g.matmul(identity, a);
  CHECK(g.values(ix)[0] == doctest::Approx(1.0));
  CHECK(g.values(ix)[1] == doctest::Approx(2.0));
  CHECK(g.values(ix)[2] == doctest::Approx(3.0));
  CHECK(g.values(ix)[3] == doctest::Approx(4.0));

  int zero_row = g.input(std::vector<double>{0, 0}, 1, 2);
  int fives = g.input(std::vector<double>{5, 5}, 2, 1);
  int z = g.matmul(zero_row, fives);
  CHECK(g.value(z) == doctest::Approx(0.0));
}

TEST_CASE("matmul rejects mismatched inner extents") {
  Graph g;
  int a = g.input(std::vector<double>{1, 2, 3, 4}, 2, 2);
  int b = g.input(std::vector<double>{1, 2, 3}, 3, 1);
  CHECK_THROWS_AS(g.matmul(a, b), DimensionError);
}

TEST_CASE("elementwise forward values") {
  Graph g;
  int zeros = g.input(std::vector<double>{0.0}, 1, 1);
  CHECK(g.value(g.sigmoid_op(zeros)) == doctest::Approx(0.5));
  CHECK(g.value(g.tanh_op(zeros)) == doctest::Approx(0.0));

  int a = g.input_row(std::vector<double>{1, 2});
  int b = g.input_row(std::vector<double>{3, 4});
  int s = g.add(a, b);
  CHECK(g.values(s)[0] == doctest::Approx(4.0));
  CHECK(g.values(s)[1] == doctest::Approx(6.0));

  int d = g.sub(b, a);
  CHECK(g.values(d)[0] == doctest::Approx(2.0));
  CHECK(g.values(d)[1] == doctest::Approx(2.0));

  int m = g.mul(a, b);
  CHECK(g.values(m)[0] == doctest::Approx(3.0));
  CHECK(g.values(m)[1] == doctest::Approx(8.0));

  int sc = g.scale(a, -2.0);
  CHECK(g.values(sc)[0] == doctest::Approx(-2.0));
  CHECK(g.values(sc)[1] == doctest::Approx(-4.0));

  CHECK_THROWS_AS(g.add(a, g.input_row(std::vector<double>{1, 2, 3})), DimensionError);
}

TEST_CASE("add_row_bias broadcasts one bias row over all rows") {
  Graph g;
  int a = g.input(std::vector<double>{1, 2, 3, 4}, 2, 2);
  int bias = g.input_row(std::vector<double>{10, 20});
  int out = g.add_row_bias(a, bias);
  CHECK(g.values(out)[0] == doctest::Approx(11.0));
  CHECK(g.values(out)[1] == doctest::Approx(22.0));
  CHECK(g.values(out)[2] == doctest::Approx(13.0));
  CHECK(g.values(out)[3] == doctest::Approx(24.0));
  CHECK_THROWS_AS(g.add_row_bias(a, g.input_row(std::vector<double>{1, 2, 3})), DimensionError);
}

TEST_CASE("softmax cross entropy matches frozen values") {
  Graph g;
  int two = g.input_row(std::vector<double>{0.0, 0.0});
  CHECK(g.value(g.softmax_cross_entropy(two, 0)) == doctest::Approx(std::log(2.0)));

  int four = g.input_row(std::vector<double>{0.0, 0.0, 0.0, 0.0});
  for (std::size_t t = 0; t < 4; ++t) {
    CHECK(g.value(g.softmax_cross_entropy(four, t)) == doctest::Approx(std::log(4.0)));
  }

  int skewed = g.input_row(std::vector<double>{10.0, 0.0});
  // -log sigmoid(10) = log1p(exp(-10))
  CHECK(g.value(g.softmax_cross_entropy(skewed, 0)) ==
        doctest::Approx(4.5398899216870535e-05).epsilon(1e-9));

  CHECK_THROWS_AS(g.softmax_cross_entropy(two, 2), IndexError);
}

TEST_CASE("softmax is nonnegative and sums to one for extreme logits") {
  std::vector<std::vector<double>> cases = {
      {0.0, 0.0, 0.0},
      {1000.0, -1000.0, 0.0},
      {-700.0, -701.0, -702.0},
      {3.5},
      {1e8, 1e8, 1e8 - 1.0},
  };
  for (const auto& logits : cases) {
    std::vector<double> p = softmax(logits);
    double total = 0.0;
    for (double v : p) {
      CHECK(v >= 0.0);
      total += v;
    }
    CHECK(total == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("concat and row behave as views with scattered gradients") {
  Graph g;
  int a = g.input_row(std::vector<double>{1, 2});
  int b = g.input_row(std::vector<double>{3});
  std::vector<int> parts = {a, b};
  int cat = g.concat(parts);
  REQUIRE(g.node_cols(cat) == 3);
  CHECK(g.values(cat)[2] == doctest::Approx(3.0));

  int table = g.input(std::vector<double>{1, 2, 3, 4, 5, 6}, 3, 2);
  int r = g.row(table, 2);
  CHECK(g.values(r)[0] == doctest::Approx(5.0));
  CHECK(g.values(r)[1] == doctest::Approx(6.0));
  CHECK_THROWS_AS(g.row(table, 3), IndexError);
}

TEST_CASE("l2_normalize produces unit vectors and guards near-zero input") {
  Graph g;
  int a = g.input_row(std::vector<double>{3.0, 4.0});
  int n = g.l2_normalize(a, 1e-8);
  CHECK(g.values(n)[0] == doctest::Approx(0.6));
  CHECK(g.values(n)[1] == doctest::Approx(0.8));

  ParamStore params;
  Tensor& tiny = params.add("tiny", Tensor::row_vector({1e-12, -1e-12}));
  Graph g2;
  int p = g2.param(tiny);
  int guarded = g2.l2_normalize(p, 1e-8);
  CHECK(g2.values(guarded)[0] == 0.0);
  CHECK(g2.values(guarded)[1] == 0.0);
  int loss = sum_of_squares(g2, guarded);
  g2.backward(loss);
  REQUIRE(tiny.grad.size() == 2);
  CHECK(tiny.grad[0] == 0.0);
  CHECK(tiny.grad[1] == 0.0);
}

TEST_CASE("backward twice without reset exactly doubles parameter gradients") {
  ParamStore params;
  std::mt19937_64 rng(7);
  params.add("w", random_tensor({2, 2}, rng));
  Graph g;
  int w = g.param(params.at("w"));
  int loss = sum_of_squares(g, g.tanh_op(w));
  g.backward(loss);
  std::vector<double> once = params.at("w").grad;
  g.backward(loss);
  for (std::size_t i = 0; i < once.size(); ++i) {
    CHECK(params.at("w").grad[i] == doctest::Approx(2.0 * once[i]).epsilon(1e-12));
  }
}

TEST_CASE("gradient check passes for every operation on random small tensors") {
  std::mt19937_64 rng(20240613);

  SUBCASE("matmul chain") {
    ParamStore params;
    params.add("a", random_tensor({3, 4}, rng));
    params.add("b", random_tensor({4, 2}, rng));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      return g.matmul(ids[0], ids[1]);
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("add, sub, mul, scale") {
    ParamStore params;
    params.add("a", random_tensor({2, 5}, rng));
    params.add("b", random_tensor({2, 5}, rng));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      int s = g.add(ids[0], ids[1]);
      int d = g.sub(s, ids[1]);
      int m = g.mul(d, ids[1]);
      return g.scale(m, 1.7);
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("add_row_bias") {
    ParamStore params;
    params.add("a", random_tensor({4, 3}, rng));
    params.add("bias", random_tensor({1, 3}, rng));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      return g.add_row_bias(ids[0], ids[1]);
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("tanh and sigmoid") {
    ParamStore params;
    params.add("a", random_tensor({3, 3}, rng));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      return g.sigmoid_op(g.tanh_op(ids[0]));
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("concat and row") {
    ParamStore params;
    params.add("a", random_tensor({1, 3}, rng));
    params.add("table", random_tensor({4, 2}, rng));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      std::vector<int> parts = {ids[0], g.row(ids[1], 1), g.row(ids[1], 3)};
      return g.concat(parts);
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("l2_normalize away from the guard") {
    ParamStore params;
    params.add("a", random_tensor({1, 4}, rng, 0.25, 1.0));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      // weight the unit vector so the squared loss is not identically 1
      int ramp = g.input_row(std::vector<double>{1.0, -2.0, 3.0, 0.5});
      return g.mul(g.l2_normalize(ids[0], 1e-8), ramp);
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("softmax cross entropy") {
    ParamStore params;
    params.add("logits", random_tensor({1, 5}, rng, -2.0, 2.0));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      return g.softmax_cross_entropy(ids[0], 3);
    });
    CHECK(err < 1e-4);
  }

  SUBCASE("add_n") {
    ParamStore params;
    params.add("a", random_tensor({2, 3}, rng));
    params.add("b", random_tensor({2, 3}, rng));
    params.add("c", random_tensor({2, 3}, rng));
    double err = check_op(params, [](Graph& g, std::vector<int>& ids) {
      std::vector<int> terms = {ids[0], ids[1], ids[2], ids[0]};
      return g.add_n(terms);
    });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("grad_check is near machine precision for a quadratic loss") {
  ParamStore params;
  std::mt19937_64 rng(99);
  params.add("w", random_tensor({1, 4}, rng));
  auto loss_fn = [&](bool want_grad) {
    Graph g;
    int w = g.param(params.at("w"));
    int loss = sum_of_squares(g, w);
    if (want_grad) g.backward(loss);
    return g.value(loss);
  };
  CHECK(grad_check(params, loss_fn, 1e-4) < 1e-6);
}

TEST_CASE("grad_check accepts a zero-gradient constant loss") {
  ParamStore params;
  params.add("w", Tensor::zeros({2, 2}));
  auto loss_fn = [&](bool want_grad) {
    Graph g;
    int w = g.param(params.at("w"));
    (void)w;
    int c = g.input(std::vector<double>{1.5}, 1, 1);
    if (want_grad) g.backward(c);
    return g.value(c);
  };
  CHECK(grad_check(params, loss_fn, 1e-5) == doctest::Approx(0.0));
}

TEST_CASE("grad_check validates epsilon and loss finiteness") {
  ParamStore params;
  params.add("w", Tensor::row_vector({1.0}));
  auto ok = [&](bool) { return 1.0; };
  CHECK_THROWS_AS(grad_check(params, ok, 1e-7), DomainError);
  CHECK_THROWS_AS(grad_check(params, ok, 1e-2), DomainError);
  auto bad = [&](bool) { return std::numeric_limits<double>::quiet_NaN(); };
  CHECK_THROWS_AS(grad_check(params, bad, 1e-5), NumericError);
}

TEST_CASE("checkpoint round trip is bit-exact") {
  namespace fs = std::filesystem;
  fs::path path = fs::temp_directory_path() / "refexp_ckpt_test.bin";

  ParamStore params;
  std::mt19937_64 rng(4242);
  params.add("embedding", random_tensor({7, 3}, rng));
  params.add("w", random_tensor({3, 5}, rng, -3.0, 3.0));
  params.add("b", random_tensor({1, 5}, rng));
  // exercise exact representation of awkward values
  params.at("b").values[0] = 0.1;
  params.at("b").values[1] = -0.0;
  params.at("b").values[2] = 1e-300;

  save_checkpoint(path.string(), params);
  ParamStore loaded = load_checkpoint(path.string());

  REQUIRE(loaded.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(loaded.names()[i] == params.names()[i]);
    const Tensor& a = params.tensor(i);
    const Tensor& b = loaded.tensor(i);
    REQUIRE(a.shape == b.shape);
    for (std::size_t k = 0; k < a.values.size(); ++k) {
      // bit-exact, not approximately equal
      CHECK(std::memcmp(&a.values[k], &b.values[k], sizeof(double)) == 0);
    }
  }
  fs::remove(path);
}

TEST_CASE("checkpoint loader rejects corrupt files") {
  namespace fs = std::filesystem;
  fs::path path = fs::temp_directory_path() / "refexp_ckpt_corrupt.bin";

  ParamStore params;
  params.add("w", Tensor::row_vector({1.0, 2.0, 3.0}));
  save_checkpoint(path.string(), params);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path.string()), IntegrityError);
  }

  SUBCASE("truncated values") {
    auto size = fs::file_size(path);
    fs::resize_file(path, size - 5);
    CHECK_THROWS_AS(load_checkpoint(path.string()), IntegrityError);
  }

  SUBCASE("trailing bytes") {
    std::ofstream f(path, std::ios::app | std::ios::binary);
    f.write("junk", 4);
    f.close();
    CHECK_THROWS_AS(load_checkpoint(path.string()), IntegrityError);
  }

  SUBCASE("missing file") {
    CHECK_THROWS_AS(load_checkpoint((path.string() + ".nope")), IoError);
  }

  fs::remove(path);
}

TEST_CASE("param store enforces unique names and supports sgd") {
  ParamStore params;
  params.add("w", Tensor::row_vector({1.0, -2.0}));
  CHECK_THROWS_AS(params.add("w", Tensor::row_vector({0.0})), IntegrityError);
  CHECK_THROWS_AS(params.at("nope"), IndexError);

  Tensor& w = params.at("w");
  w.ensure_grad();
  w.grad = {3.0, 4.0};
  CHECK(params.grad_norm() == doctest::Approx(5.0));
  params.scale_grad(0.5);
  params.apply_sgd(1.0);
  CHECK(w.values[0] == doctest::Approx(1.0 - 1.5));
  CHECK(w.values[1] == doctest::Approx(-2.0 - 2.0));
  params.zero_grad();
  CHECK(params.grad_norm() == doctest::Approx(0.0));
}
