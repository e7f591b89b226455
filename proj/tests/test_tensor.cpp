#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "adaptlm/grad_check.hpp"
#include "adaptlm/rng.hpp"
#include "adaptlm/tensor.hpp"
#include "test_util.hpp"

using namespace adaptlm;
using testutil::make_param;
using testutil::make_param_away_from_zero;

using D = double;
using MatD = Mat<double>;

TEST_CASE("matmul by identity is the identity") {
  Rng rng(1);
  auto a = make_param<D>("a", 3, 5, rng);
  auto eye = std::make_shared<Parameter<D>>("I", 3, 3);
  eye->value = MatD::Identity(3, 3);
  Tape<D> t;
  auto out = matmul(t.leaf(eye), t.leaf(a));
  CHECK(t.val(out).isApprox(a->value));
}

TEST_CASE("softmax of uniform logits is uniform") {
  Tape<D> t;
  auto x = t.constant(MatD::Zero(1, 4));
  auto y = softmax_rows(x);
  for (int c = 0; c < 4; ++c) CHECK(t.val(y)(0, c) == doctest::Approx(0.25));
}

TEST_CASE("relu clamps negatives") {
  Tape<D> t;
  MatD x(1, 3);
  x << -1, 2, -3;
  auto y = relu(t.constant(x));
  CHECK(t.val(y)(0, 0) == 0);
  CHECK(t.val(y)(0, 1) == 2);
  CHECK(t.val(y)(0, 2) == 0);
}

TEST_CASE("softmax rows are non-negative and normalize within 1e-9") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = make_param<D>("x", 5, 9, rng, 3.0);
    Tape<D> t;
    auto y = softmax_rows(t.leaf(x));
    const MatD& Y = t.val(y);
    for (Index r = 0; r < Y.rows(); ++r) {
      CHECK(Y.row(r).minCoeff() >= 0.0);
      CHECK(std::abs(Y.row(r).sum() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("layer_norm output has row mean 0 and variance 1 before gain/bias") {
  Rng rng(11);
  auto x = make_param<D>("x", 6, 16, rng, 2.0);
  auto gain = std::make_shared<Parameter<D>>("g", 1, 16);
  gain->value = MatD::Ones(1, 16);
  auto bias = std::make_shared<Parameter<D>>("b", 1, 16);
  bias->value = MatD::Zero(1, 16);
  Tape<D> t;
  auto y = layer_norm_rows(t.leaf(x), t.leaf(gain), t.leaf(bias));
  const MatD& Y = t.val(y);
  for (Index r = 0; r < Y.rows(); ++r) {
    CHECK(std::abs(Y.row(r).mean()) < 1e-6);
    double var = (Y.row(r).array() - Y.row(r).mean()).square().sum() / 16.0;
    CHECK(std::abs(var - 1.0) < 1e-4);  // 1e-5 epsilon shifts variance slightly
  }
}

TEST_CASE("backward of sum gives all-ones; of sum(x*x) gives 2x") {
  Rng rng(3);
  auto x = make_param<D>("x", 2, 3, rng);
  {
    Tape<D> t;
    auto root = sum(t.leaf(x));
    t.backward(root);
    CHECK(x->grad.isApprox(MatD::Ones(2, 3)));
  }
  auto x2 = std::make_shared<Parameter<D>>("x2", 1, 2);
  x2->value.resize(1, 2);
  x2->value << 1, 2;
  {
    Tape<D> t;
    auto v = t.leaf(x2);
    t.backward(sum(cmul(v, v)));
    CHECK(x2->grad(0, 0) == doctest::Approx(2.0));
    CHECK(x2->grad(0, 1) == doctest::Approx(4.0));
  }
}

TEST_CASE("two backward passes with zeroing in between are identical") {
  Rng rng(5);
  auto x = make_param<D>("x", 4, 4, rng);
  auto w = make_param<D>("w", 4, 4, rng);
  MatD first;
  for (int pass = 0; pass < 2; ++pass) {
    x->zero_grad();
    w->zero_grad();
    Tape<D> t;
    auto root = sum(relu(matmul(t.leaf(x), t.leaf(w))));
    t.backward(root);
    if (pass == 0)
      first = x->grad;
    else
      CHECK((x->grad - first).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("repeated backward without zeroing accumulates") {
  Rng rng(6);
  auto x = make_param<D>("x", 2, 2, rng);
  Tape<D> t;
  auto root = sum(t.leaf(x));
  t.backward(root);
  t.backward(root);
  CHECK(x->grad.isApprox(MatD::Constant(2, 2, 2.0)));
}

TEST_CASE("non-scalar backward root is rejected") {
  Rng rng(8);
  auto x = make_param<D>("x", 2, 2, rng);
  Tape<D> t;
  auto v = t.leaf(x);
  CHECK_THROWS_WITH_AS(t.backward(v), doctest::Contains("backward"), std::invalid_argument);
}

TEST_CASE("shape mismatch diagnostics name the primitive and shapes") {
  Tape<D> t;
  auto a = t.constant(MatD::Zero(3, 4));
  auto b = t.constant(MatD::Zero(5, 6));
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("matmul"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[3 x 4]"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(cmul(a, b), doctest::Contains("mul"), std::invalid_argument);
  CHECK_THROWS_WITH_AS(add(a, b), doctest::Contains("add"), std::invalid_argument);
}

TEST_CASE("log_softmax pick gradient matches finite differences at 1e-6") {
  Rng rng(21);
  auto x = make_param<D>("x", 1, 5, rng);
  std::vector<int> target{3};
  auto build = [&](Tape<D>& t) {
    return scale(sum(pick_per_row(log_softmax_rows(t.leaf(x)), target)), -1.0);
  };
  std::vector<ParamPtr<D>> params{x};
  auto report = grad_check<D>(build, params, 1e-5);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("grad_check on sum is exactly zero error for representable inputs") {
  auto x = std::make_shared<Parameter<D>>("x", 2, 3);
  x->value.resize(2, 3);
  x->value << 1, 2, 3, -4, 5, -6;
  auto build = [&](Tape<D>& t) { return sum(t.leaf(x)); };
  std::vector<ParamPtr<D>> params{x};
  auto report = grad_check<D>(build, params, 0.25);
  CHECK(report.max_rel_error == 0.0);
}

TEST_CASE("grad_check of layer_norm followed by sum of squares") {
  Rng rng(33);
  auto x = make_param<D>("x", 1, 8, rng);
  auto gain = make_param<D>("gain", 1, 8, rng);
  auto bias = make_param<D>("bias", 1, 8, rng);
  auto build = [&](Tape<D>& t) {
    auto y = layer_norm_rows(t.leaf(x), t.leaf(gain), t.leaf(bias));
    return sum(cmul(y, y));
  };
  std::vector<ParamPtr<D>> params{x, gain, bias};
  auto report = grad_check<D>(build, params, 1e-5);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("every primitive passes randomized finite-difference checks") {
  Rng rng(100);
  auto a = make_param_away_from_zero<D>("a", 3, 4, rng);
  auto b = make_param_away_from_zero<D>("b", 4, 5, rng);
  auto c = make_param_away_from_zero<D>("c", 3, 4, rng);
  auto row = make_param<D>("row", 1, 4, rng);
  auto col = make_param<D>("col", 3, 1, rng);
  auto sq = make_param_away_from_zero<D>("sq", 4, 4, rng);
  std::vector<int> ids{2, 0, 1, 0};
  std::vector<int> picks{1, 3, 0};
  std::vector<ParamPtr<D>> all{a, b, c, row, col, sq};

  auto check = [&](const char* what, std::function<Var<D>(Tape<D>&)> build) {
    auto report = grad_check<D>(build, all, 1e-5);
    INFO(std::string(what));
    CHECK(report.failures.empty());
    CHECK(report.max_rel_error < 1e-4);
  };
  auto conv_kernel = make_param<D>("k", 8, 5, rng);  // width 2, C=4, F=5
  auto conv_bias = make_param<D>("kb", 1, 5, rng);

  check("matmul+add", [&](Tape<D>& t) {
    return sum(add(matmul(t.leaf(a), t.leaf(b)), t.constant(MatD::Ones(3, 5))));
  });
  check("row broadcast add", [&](Tape<D>& t) { return sum(cmul(add(t.leaf(a), t.leaf(row)), t.leaf(c))); });
  check("col broadcast add", [&](Tape<D>& t) { return sum(cmul(add(t.leaf(a), t.leaf(col)), t.leaf(c))); });
  check("relu", [&](Tape<D>& t) { return sum(cmul(relu(t.leaf(a)), t.leaf(c))); });
  check("sigmoid", [&](Tape<D>& t) { return sum(cmul(sigmoid(t.leaf(a)), t.leaf(c))); });
  check("tanh", [&](Tape<D>& t) { return sum(cmul(tanh(t.leaf(a)), t.leaf(c))); });
  check("softmax", [&](Tape<D>& t) { return sum(cmul(softmax_rows(t.leaf(a)), t.leaf(c))); });
  check("log_softmax", [&](Tape<D>& t) { return sum(cmul(log_softmax_rows(t.leaf(a)), t.leaf(c))); });
  check("causal_softmax", [&](Tape<D>& t) {
    return sum(cmul(causal_softmax_rows(t.leaf(sq)), t.constant(MatD::Ones(4, 4))));
  });
  check("transpose", [&](Tape<D>& t) { return sum(cmul(transpose(t.leaf(b)), t.constant(MatD::Ones(5, 4)))); });
  check("lookup", [&](Tape<D>& t) { return sum(cmul(lookup_rows(t.leaf(a), ids), t.constant(MatD::Ones(4, 4)))); });
  check("gather", [&](Tape<D>& t) { return sum(cmul(gather_rows(t.leaf(a), ids), t.constant(MatD::Ones(4, 4)))); });
  check("slice_rows", [&](Tape<D>& t) { return sum(slice_rows(t.leaf(a), 1, 2)); });
  check("slice_cols", [&](Tape<D>& t) { return sum(slice_cols(t.leaf(a), 1, 3)); });
  check("concat_rows", [&](Tape<D>& t) {
    std::vector<Var<D>> parts{t.leaf(a), t.leaf(c)};
    return sum(concat_rows(parts));
  });
  check("concat_cols", [&](Tape<D>& t) {
    std::vector<Var<D>> parts{t.leaf(a), t.leaf(c)};
    return sum(concat_cols(parts));
  });
  check("pick", [&](Tape<D>& t) { return sum(pick_per_row(t.leaf(a), picks)); });
  check("max_over_rows", [&](Tape<D>& t) { return sum(max_over_rows(t.leaf(a))); });
  check("scale/mean", [&](Tape<D>& t) { return mean(scale(t.leaf(a), 3.0)); });
  check("char_conv", [&](Tape<D>& t) {
    return sum(char_conv_tanh_max(t.leaf(a), t.leaf(conv_kernel), t.leaf(conv_bias), 2));
  });
}

TEST_CASE("char_conv gradients flow to kernel and bias too") {
  Rng rng(200);
  auto chars = make_param_away_from_zero<D>("chars", 5, 3, rng);
  auto kernel = make_param_away_from_zero<D>("kernel", 9, 4, rng);  // width 3
  auto kbias = make_param<D>("kbias", 1, 4, rng);
  std::vector<ParamPtr<D>> params{chars, kernel, kbias};
  auto build = [&](Tape<D>& t) {
    return sum(char_conv_tanh_max(t.leaf(chars), t.leaf(kernel), t.leaf(kbias), 3));
  };
  auto report = grad_check<D>(build, params, 1e-5);
  CHECK(report.failures.empty());
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("char_conv handles words shorter than the filter width") {
  Rng rng(201);
  auto chars = make_param<D>("chars", 2, 3, rng);
  auto kernel = make_param<D>("kernel", 12, 4, rng);  // width 4 > length 2
  auto kbias = make_param<D>("kbias", 1, 4, rng);
  Tape<D> t;
  auto y = char_conv_tanh_max(t.leaf(chars), t.leaf(kernel), t.leaf(kbias), 4);
  CHECK(t.val(y).rows() == 1);
  CHECK(t.val(y).cols() == 4);
}

TEST_CASE("causal softmax: prefix outputs are bit-identical under suffix change") {
  Rng rng(55);
  MatD scores = MatD::Zero(4, 4);
  for (Index r = 0; r < 4; ++r)
    for (Index c = 0; c < 4; ++c) scores(r, c) = rng.normal();
  Tape<D> t1;
  auto y1 = causal_softmax_rows(t1.constant(scores));
  MatD changed = scores;
  changed.row(3).setConstant(99.0);
  changed.col(3).setConstant(-99.0);
  changed(3, 3) = 12.0;
  // rows 0..2 depend only on columns 0..2, which are untouched
  MatD changed2 = scores;
  changed2(3, 0) = 7.0;
  Tape<D> t2;
  auto y2 = causal_softmax_rows(t2.constant(changed2));
  for (Index r = 0; r < 3; ++r)
    for (Index c = 0; c < 4; ++c) CHECK(t1.val(y1)(r, c) == t2.val(y2)(r, c));
}

TEST_CASE("dropout is identity in evaluation mode and preserves the mean in training") {
  Rng rng(77);
  auto x = make_param<D>("x", 10, 10, rng);
  {
    Tape<D> t(/*record_grad=*/false, /*training=*/false);
    auto y = dropout(t.leaf(x), 0.5);
    CHECK(t.val(y).isApprox(x->value));
  }
  {
    // inverted scaling: expectation over many samples is close to the input
    Rng drng(123);
    auto ones = std::make_shared<Parameter<D>>("ones", 1, 100);
    ones->value = MatD::Ones(1, 100);
    double acc = 0;
    const int samples = 100;
    for (int i = 0; i < samples; ++i) {
      Tape<D> t(false, true, &drng);
      acc += t.val(dropout(t.leaf(ones), 0.2)).sum();
    }
    double mean_val = acc / (samples * 100.0);  // 10K scalar samples
    CHECK(std::abs(mean_val - 1.0) < 0.02);
  }
  {
    Rng drng(42);
    Tape<D> t(false, true, &drng);
    auto y = dropout(t.leaf(x), 1.0);
    CHECK(t.val(y).cwiseAbs().maxCoeff() == 0.0);
    auto z = dropout(t.leaf(x), 0.0);
    CHECK(t.val(z).isApprox(x->value));
  }
}

TEST_CASE("max ties break to the first index") {
  Tape<D> t;
  MatD x(3, 1);
  x << 2.0, 2.0, 1.0;
  auto p = std::make_shared<Parameter<D>>("x", 3, 1);
  p->value = x;
  auto y = max_over_rows(t.leaf(p));
  t.backward(sum(y));
  CHECK(p->grad(0, 0) == 1.0);
  CHECK(p->grad(1, 0) == 0.0);
}

TEST_CASE("embedding lookup rejects out-of-range ids") {
  Rng rng(9);
  auto table = make_param<D>("table", 4, 2, rng);
  Tape<D> t;
  std::vector<int> bad{0, 4};
  CHECK_THROWS_AS(lookup_rows(t.leaf(table), bad), std::invalid_argument);
}
