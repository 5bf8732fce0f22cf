#include "doctest.h"
#include "test_util.hpp"

#include "watchped/layers.hpp"
#include "watchped/ops.hpp"
#include "watchped/optim.hpp"
#include "watchped/weights_io.hpp"

#include <cmath>

using namespace watchped;
using namespace watchped::ad;
using testutil::rand_int;
using testutil::random_tensor;

namespace {

// Scalar loss sum(out * R) with a fixed random R gives every output a distinct weight.
Var probe_loss(const Var& out, const Tensor& r) { return sum(mul(out, Var::constant(r))); }

}  // namespace

TEST_CASE("conv2d identity, zero input and nested-loop oracle") {
  std::mt19937_64 rng(1);
  Tensor x = random_tensor({1, 4, 4}, rng);
  Var one_kernel = Var::constant(Tensor::constant({1, 1, 1, 1}, 1.0));
  CHECK(conv2d(Var::constant(x), one_kernel, 1, 0).value() == x);

  Var zeros = Var::constant(Tensor::zeros({2, 5, 5}));
  Var k = Var::constant(random_tensor({3, 2, 3, 3}, rng));
  CHECK(conv2d(zeros, k, 1, 1).value().data().isZero(0.0));

  Tensor k3 = random_tensor({1, 1, 3, 3}, rng);
  Tensor got = conv2d(Var::constant(x), Var::constant(k3), 1, 0).value();
  Tensor want = testutil::conv2d_oracle(x, k3, 1, 0);
  REQUIRE(got.shape() == Shape{1, 2, 2});
  CHECK((got.data() - want.data()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("conv2d and pool2d against nested loops on random shapes") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const Index c = rand_int(rng, 1, 4), h = rand_int(rng, 3, 12), w = rand_int(rng, 3, 12);
    const Index kh = rand_int(rng, 1, std::min<Index>(h, 4)), kw = rand_int(rng, 1, std::min<Index>(w, 4));
    const Index stride = rand_int(rng, 1, 2), pad = rand_int(rng, 0, 1);
    const Tensor x = random_tensor({c, h, w}, rng), k = random_tensor({rand_int(rng, 1, 4), c, kh, kw}, rng);
    const Tensor got = conv2d(Var::constant(x), Var::constant(k), stride, pad).value();
    const Tensor want = testutil::conv2d_oracle(x, k, stride, pad);
    REQUIRE(got.shape() == want.shape());
    CHECK((got.data() - want.data()).cwiseAbs().maxCoeff() <= 1e-12);

    const Index ph = rand_int(rng, 1, 3), pw = rand_int(rng, 1, 3);
    const Tensor px = random_tensor({c, ph * rand_int(rng, 1, 5), pw * rand_int(rng, 1, 5)}, rng);
    CHECK(pool2d(Var::constant(px), PoolMode::kMax, ph, pw).value() == testutil::pool_oracle(px, true, ph, pw));
    const Tensor avg = pool2d(Var::constant(px), PoolMode::kAverage, ph, pw).value();
    CHECK((avg.data() - testutil::pool_oracle(px, false, ph, pw).data()).cwiseAbs().maxCoeff() <= 1e-12);
  }
}

TEST_CASE("conv2d output extent and shape errors") {
  CHECK(conv_output_extent(224, 3, 1, 1) == 224);
  CHECK(conv_output_extent(7, 3, 2, 0) == 3);
  Var x = Var::constant(Tensor::zeros({2, 3, 3}));
  CHECK_THROWS_AS(conv2d(x, Var::constant(Tensor::zeros({1, 3, 2, 2})), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var::constant(Tensor::zeros({1, 2, 5, 5})), 1, 0), ShapeError);
  CHECK_THROWS_AS(conv2d(x, Var::constant(Tensor::zeros({1, 2, 2, 2})), 0, 0), ShapeError);
}

TEST_CASE("pool2d cases") {
  std::mt19937_64 rng(2);
  Tensor fm = random_tensor({512, 14, 14}, rng);
  Tensor avg = pool2d(Var::constant(fm), PoolMode::kAverage, 14, 14).value();
  REQUIRE(avg.shape() == Shape{512, 1, 1});
  for (Index c = 0; c < 512; c += 97) {
    double s = 0.0;
    for (Index i = 0; i < 196; ++i) s += fm[c * 196 + i];
    CHECK(avg[c] == doctest::Approx(s / 196.0).epsilon(1e-12));
  }

  Var cst = Var::constant(Tensor::constant({2, 4, 6}, 3.25));
  CHECK(pool2d(cst, PoolMode::kMax, 2, 3).value().data().isConstant(3.25));
  CHECK(pool2d(cst, PoolMode::kAverage, 2, 3).value().data().isConstant(3.25));

  Tensor x = random_tensor({1, 4, 4}, rng);
  CHECK(pool2d(Var::constant(x), PoolMode::kMax, 2, 2).value() == testutil::pool_oracle(x, true, 2, 2));
  CHECK_THROWS_AS(pool2d(Var::constant(x), PoolMode::kMax, 5, 2), ShapeError);
}

TEST_CASE("dense layer") {
  std::mt19937_64 rng(3);
  Var x = Var::constant(random_tensor({3}, rng));
  Tensor eye({3, 3});
  eye.matrix().setIdentity();
  CHECK(dense(x, Var::constant(eye), Var::constant(Tensor::zeros({3})), Activation::kNone).value() == x.value());

  Var half = dense(x, Var::constant(Tensor::zeros({4, 3})), Var::constant(Tensor::zeros({4})), Activation::kSigmoid);
  CHECK(half.value().data().isConstant(0.5));

  Tensor w = random_tensor({2, 3}, rng);
  Tensor b = random_tensor({2}, rng);
  Tensor got = dense(x, Var::constant(w), Var::constant(b), Activation::kNone).value();
  for (Index i = 0; i < 2; ++i) {
    double acc = b[i];
    for (Index j = 0; j < 3; ++j) acc += w.at({i, j}) * x.value()[j];
    CHECK(got[i] == doctest::Approx(acc).epsilon(1e-14));
  }
  CHECK_THROWS_AS(dense(x, Var::constant(Tensor::zeros({2, 4})), Var::constant(b), Activation::kNone), ShapeError);
}

TEST_CASE("gru zero parameters give zero output") {
  std::mt19937_64 rng(4);
  ParamSet ps;
  GruParams g = GruParams::create(ps, "g", 5, 7, rng);
  for (auto& e : ps.entries()) e.var.mutable_value().data().setZero();
  Var out = gru_forward(Var::constant(random_tensor({9, 5}, rng, -5, 5)), g);
  CHECK(out.shape() == Shape{9, 7});
  CHECK(out.value().data().isZero(0.0));
  CHECK_THROWS_AS(gru_forward(Var::constant(random_tensor({3, 4}, rng)), g), ShapeError);
}

TEST_CASE("gru [16,256] output shape") {
  std::mt19937_64 rng(5);
  ParamSet ps;
  GruParams g = GruParams::create(ps, "pose", 36, 256, rng);
  Var out = gru_forward(Var::constant(random_tensor({16, 36}, rng)), g);
  CHECK(out.shape() == Shape{16, 256});
  CHECK(out.value().all_finite());
}

TEST_CASE("gru scalar recurrence matches step-by-step evaluation") {
  ParamSet ps;
  std::mt19937_64 rng(6);
  GruParams g = GruParams::create(ps, "s", 1, 1, rng);
  const double wz = 0.5, uz = -0.3, bz = 0.1, wr = -0.4, ur = 0.2, br = 0.05, wn = 0.7, un = 0.6, bn = -0.2;
  auto set = [&](const char* name, double v) { ps.at(std::string("s.") + name).node()->value[0] = v; };
  set("w_z", wz); set("u_z", uz); set("b_z", bz);
  set("w_r", wr); set("u_r", ur); set("b_r", br);
  set("w_n", wn); set("u_n", un); set("b_n", bn);

  const double xs[2] = {1.0, -2.0};
  double h = 0.3;
  double expect[2];
  for (int t = 0; t < 2; ++t) {
    const double z = testutil::logistic(wz * xs[t] + uz * h + bz);
    const double r = testutil::logistic(wr * xs[t] + ur * h + br);
    const double n = std::tanh(wn * xs[t] + un * (r * h) + bn);
    h = (1 - z) * n + z * h;
    expect[t] = h;
  }
  Var out = gru_forward(Var::constant(Tensor::from({2, 1}, {1.0, -2.0})), g,
                        Var::constant(Tensor::from({1}, {0.3})));
  CHECK(out.value()[0] == doctest::Approx(expect[0]).epsilon(1e-14));
  CHECK(out.value()[1] == doctest::Approx(expect[1]).epsilon(1e-14));
}

TEST_CASE("attention block") {
  std::mt19937_64 rng(7);
  ParamSet ps;
  AttentionParams a = AttentionParams::create(ps, "att", 3, 4, rng);

  Tensor u = random_tensor({3}, rng);
  Tensor rows({5, 3});
  for (Index t = 0; t < 5; ++t) rows.matrix().row(t) = u.data().transpose();
  auto same = attention_block(Var::constant(rows), a);
  CHECK((same.output.value().data() - u.data()).cwiseAbs().maxCoeff() < 1e-14);

  for (int trial = 0; trial < 50; ++trial) {
    auto r = attention_block(Var::constant(random_tensor({rand_int(rng, 1, 12), 3}, rng, -4, 4)), a);
    CHECK(std::abs(r.weights.value().data().sum() - 1.0) < 1e-12);
    CHECK(r.weights.value().data().minCoeff() >= 0.0);
  }

  // T=2, d=2 by hand.
  ParamSet hp;
  AttentionParams h2 = AttentionParams::create(hp, "h", 2, 2, rng);
  h2.w.node()->value = Tensor::from({2, 2}, {0.3, -0.2, 0.5, 0.1});
  h2.v.node()->value = Tensor::from({2}, {1.5, -0.7});
  const double h[2][2] = {{0.4, -1.0}, {0.9, 0.2}};
  double e[2];
  for (int t = 0; t < 2; ++t) {
    const double p0 = std::tanh(0.3 * h[t][0] - 0.2 * h[t][1]);
    const double p1 = std::tanh(0.5 * h[t][0] + 0.1 * h[t][1]);
    e[t] = 1.5 * p0 - 0.7 * p1;
  }
  const double a0 = std::exp(e[0]) / (std::exp(e[0]) + std::exp(e[1]));
  const double a1 = 1.0 - a0;
  auto res = attention_block(Var::constant(Tensor::from({2, 2}, {0.4, -1.0, 0.9, 0.2})), h2);
  CHECK(res.weights.value()[0] == doctest::Approx(a0).epsilon(1e-14));
  CHECK(res.output.value()[0] == doctest::Approx(a0 * 0.4 + a1 * 0.9).epsilon(1e-14));
  CHECK(res.output.value()[1] == doctest::Approx(a0 * -1.0 + a1 * 0.2).epsilon(1e-14));
}

TEST_CASE("softmax is a distribution") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 100; ++i) {
    Tensor s = softmax(Var::constant(random_tensor({rand_int(rng, 1, 20)}, rng, -50, 50))).value();
    CHECK(s.data().minCoeff() >= 0.0);
    CHECK(std::abs(s.data().sum() - 1.0) < 1e-12);
  }
}

TEST_CASE("binary cross-entropy") {
  auto bce = [](double p, int y) { return bce_loss(Var::constant(Tensor::from({1}, {p})), y).item(); };
  CHECK(bce(0.5, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-14));
  CHECK(bce(0.5, 1) == doctest::Approx(0.693147).epsilon(1e-6));
  CHECK(bce(1.0 - kLossEpsilon, 1) < 1e-6);
  CHECK(bce(0.9, 0) == doctest::Approx(-std::log(0.1)).epsilon(1e-12));
  CHECK(bce(0.9, 0) == doctest::Approx(2.302585).epsilon(1e-6));
  CHECK(std::isfinite(bce(0.0, 1)));
  CHECK(std::isfinite(bce(1.0, 0)));
}

TEST_CASE("sparse categorical cross-entropy") {
  auto cce = [](Tensor logits, Index c) { return sparse_cce_loss(Var::constant(std::move(logits)), c).item(); };
  CHECK(cce(Tensor::from({3}, {0.4, 0.4, 0.4}), 1) == doctest::Approx(std::log(3.0)).epsilon(1e-14));
  CHECK(cce(Tensor::from({3}, {0.0, 40.0, 0.0}), 1) < 1e-12);
  const double want = std::log(std::exp(1.0) + std::exp(2.0) + std::exp(3.0)) - 3.0;
  CHECK(cce(Tensor::from({3}, {1, 2, 3}), 2) == doctest::Approx(want).epsilon(1e-14));
  CHECK_THROWS_AS(cce(Tensor::from({3}, {1, 2, 3}), 3), std::out_of_range);
  CHECK_THROWS_AS(cce(Tensor::from({1}, {1}), 0), ShapeError);
}

TEST_CASE("adam step") {
  ParamSet ps;
  Var w = ps.add("w", Tensor::from({2}, {1.0, -2.0}));
  AdamState st(AdamHyper{0.01});
  ps.zero_grad();
  sum(scale(w, 0.0)).backward();
  adam_step(ps, st);
  CHECK(w.value() == Tensor::from({2}, {1.0, -2.0}));
  CHECK(st.step_count == 1);

  ParamSet one;
  Var s = one.add("s", Tensor::from({1}, {0.7}));
  AdamState st1(AdamHyper{0.05});
  sum(scale(s, -3.0)).backward();  // g = -3
  adam_step(one, st1);
  CHECK(s.value()[0] - 0.7 == doctest::Approx(0.05).epsilon(1e-6));

  AdamState tiny(AdamHyper{5e-7});
  CHECK(tiny.hyper.learning_rate == 5e-7);
  CHECK_THROWS(AdamState(AdamHyper{0.0}));

  ParamSet bad;
  Var bw = bad.add("fc.weight", Tensor::from({1}, {1.0}));
  bw.node()->grad_buffer()[0] = std::nan("");
  AdamState bst;
  try {
    adam_step(bad, bst);
    FAIL("expected NonFiniteGradient");
  } catch (const NonFiniteGradient& e) {
    CHECK(std::string(e.what()).find("fc.weight") != std::string::npos);
  }
}

TEST_CASE("grad_check on analytic functions") {
  ParamSet ps;
  Var x = ps.add("x", Tensor::from({1}, {3.0}));
  auto quad = grad_check([&] { return square(x); }, ps, 1e-5);
  CHECK(quad.max_relative_error < 1e-8);
  CHECK(x.grad()[0] == doctest::Approx(6.0));

  ParamSet lin;
  Var y = lin.add("y", Tensor::from({3}, {0.5, -1.0, 2.0}));
  Tensor c = Tensor::from({3}, {1.5, -2.0, 0.25});
  auto res = grad_check([&] { return sum(mul(y, Var::constant(c))); }, lin, 1e-5);
  CHECK(res.max_relative_error < 1e-9);
}

TEST_CASE("every layer passes finite-difference checks on random shapes") {
  std::mt19937_64 rng(9);
  const double tol = 1e-4;
  for (int trial = 0; trial < 20; ++trial) {
    const Index c = rand_int(rng, 1, 3), h = rand_int(rng, 3, 7), w = rand_int(rng, 3, 7);
    const Index kh = rand_int(rng, 1, 3), kw = rand_int(rng, 1, 3), o = rand_int(rng, 1, 3);
    const Index stride = rand_int(rng, 1, 2), pad = rand_int(rng, 0, 1);
    ParamSet ps;
    Var x = ps.add("x", random_tensor({c, h, w}, rng));
    Var k = ps.add("k", random_tensor({o, c, kh, kw}, rng));
    Var b = ps.add("b", random_tensor({o}, rng));
    const Index ho = conv_output_extent(h, kh, stride, pad), wo = conv_output_extent(w, kw, stride, pad);
    Tensor r = random_tensor({o, ho, wo}, rng);
    CHECK(grad_check([&] { return probe_loss(conv2d(x, k, b, stride, pad), r); }, ps, 1e-6).max_relative_error < tol);

    ParamSet pp;
    Var px = pp.add("x", random_tensor({c, h, w}, rng));
    const Index pk = rand_int(rng, 1, 3);
    Tensor pr = random_tensor({c, h / pk, w / pk}, rng);
    CHECK(grad_check([&] { return probe_loss(pool2d(px, PoolMode::kMax, pk, pk), pr); }, pp, 1e-6)
              .max_relative_error < tol);
    CHECK(grad_check([&] { return probe_loss(pool2d(px, PoolMode::kAverage, pk, pk), pr); }, pp, 1e-6)
              .max_relative_error < tol);

    const Index n = rand_int(rng, 1, 6), m = rand_int(rng, 1, 6);
    ParamSet dp;
    Var dx = dp.add("x", random_tensor({n}, rng));
    Var dw = dp.add("w", random_tensor({m, n}, rng));
    Var db = dp.add("b", random_tensor({m}, rng));
    Tensor dr = random_tensor({m}, rng);
    for (Activation act : {Activation::kNone, Activation::kRelu, Activation::kSigmoid, Activation::kTanh}) {
      CHECK(grad_check([&] { return probe_loss(dense(dx, dw, db, act), dr); }, dp, 1e-6).max_relative_error < tol);
    }

    const Index steps = rand_int(rng, 1, 6), in = rand_int(rng, 1, 4), hid = rand_int(rng, 1, 5);
    ParamSet gp;
    GruParams g = GruParams::create(gp, "g", in, hid, rng);
    Var gx = gp.add("x", random_tensor({steps, in}, rng));
    Var h0 = gp.add("h0", random_tensor({hid}, rng));
    Tensor gr = random_tensor({steps, hid}, rng);
    CHECK(grad_check([&] { return probe_loss(gru_forward(gx, g, h0), gr); }, gp, 1e-6).max_relative_error < tol);

    ParamSet ap;
    AttentionParams att = AttentionParams::create(ap, "a", hid, rand_int(rng, 1, 4), rng);
    Var ax = ap.add("x", random_tensor({steps, hid}, rng));
    Tensor ar = random_tensor({hid}, rng);
    CHECK(grad_check([&] { return probe_loss(attention_block(ax, att).output, ar); }, ap, 1e-6)
              .max_relative_error < tol);

    ParamSet cp;
    const Index len = rand_int(rng, 4, 12), kk = rand_int(rng, 1, 4);
    Var cx = cp.add("x", random_tensor({c, len}, rng));
    Var ck = cp.add("k", random_tensor({o, c, kk}, rng));
    Var cb = cp.add("b", random_tensor({o}, rng));
    Tensor cr = random_tensor({o, (len - kk + 1) / 2}, rng);
    CHECK(grad_check([&] { return probe_loss(max_pool1d(relu(conv1d(cx, ck, cb)), 2), cr); }, cp, 1e-6)
              .max_relative_error < tol);

    ParamSet lp;
    const Index classes = rand_int(rng, 2, 5);
    Var logits = lp.add("l", random_tensor({classes}, rng, -2, 2));
    const Index target = rand_int(rng, 0, classes - 1);
    CHECK(grad_check([&] { return sparse_cce_loss(logits, target); }, lp, 1e-6).max_relative_error < tol);
    Tensor sr = random_tensor({classes}, rng);
    CHECK(grad_check([&] { return probe_loss(softmax(logits), sr); }, lp, 1e-6).max_relative_error < tol);

    ParamSet bp;
    Var z = bp.add("z", random_tensor({1}, rng, -3, 3));
    const int label = static_cast<int>(rand_int(rng, 0, 1));
    CHECK(grad_check([&] { return bce_loss(sigmoid(z), label); }, bp, 1e-6).max_relative_error < tol);

    ParamSet sp;
    Var s1 = sp.add("a", random_tensor({steps, 2}, rng));
    Var s2 = sp.add("b", random_tensor({steps, 3}, rng));
    Var v1 = sp.add("v", random_tensor({4}, rng));
    Tensor weights = random_tensor({steps}, rng);
    Tensor structural_r = random_tensor({steps, 9}, rng);
    auto structural = [&] {
      Var cc = concat_cols(scale_rows(s1, weights), square(s2));
      Var bb = broadcast_rows(pad_to(v1, 4), steps);
      return probe_loss(concat_cols(cc, bb), structural_r);
    };
    CHECK(grad_check(structural, sp, 1e-6).max_relative_error < tol);
  }
}

TEST_CASE("dropout is identity in evaluation and seeded in training") {
  std::mt19937_64 rng(10);
  Var x = Var::constant(random_tensor({100}, rng));
  CHECK(dropout(x, ForwardContext{}).value() == x.value());
  std::mt19937_64 a(42), b(42);
  Tensor da = dropout(x, ForwardContext{true, 0.5, &a}).value();
  Tensor db = dropout(x, ForwardContext{true, 0.5, &b}).value();
  CHECK(da == db);
  Index zeros = 0;
  for (Index i = 0; i < 100; ++i) {
    if (da[i] == 0.0) ++zeros;
    else CHECK(da[i] == doctest::Approx(2.0 * x.value()[i]));
  }
  CHECK(zeros > 25);
  CHECK(zeros < 75);
}

TEST_CASE("weights file round trip and errors") {
  std::mt19937_64 rng(11);
  ParamSet ps;
  ps.add("a.w", random_tensor({3, 4}, rng));
  ps.add("b", random_tensor({5}, rng));
  WeightsFile f = snapshot(ps, R"({"kind":"test"})");
  const std::string bytes = encode_weights(f);
  CHECK(bytes.substr(0, 4) == "WPWT");
  WeightsFile back = decode_weights(bytes);
  CHECK(back.version == kWeightsFormatVersion);
  CHECK(back.metadata == f.metadata);
  REQUIRE(back.tensors.size() == 2);
  CHECK(back.tensors[0].name == "a.w");
  CHECK(back.tensors[0].value == ps.at("a.w").value());

  ParamSet other;
  other.add("a.w", Tensor::zeros({3, 4}));
  other.add("b", Tensor::zeros({5}));
  restore(other, back);
  CHECK(other.at("b").value() == ps.at("b").value());

  CHECK_THROWS_AS(decode_weights(bytes.substr(0, bytes.size() - 3)), WeightsFormatError);
  CHECK_THROWS_AS(decode_weights("XXXX" + bytes.substr(4)), WeightsFormatError);
  ParamSet wrong;
  wrong.add("a.w", Tensor::zeros({4, 3}));
  CHECK_THROWS_AS(restore_matching(wrong, back), WeightsFormatError);
}
