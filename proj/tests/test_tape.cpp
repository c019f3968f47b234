#include <catch2/catch_amalgamated.hpp>

#include "mflip/tape.hpp"
#include "mflip/random.hpp"
#include "test_support.hpp"

using namespace mflip;

namespace {

Mat random_mat(Rng& rng, int r, int c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

/// A composite expression touching most tape primitives, used for
/// finite-difference gradient checks.
Var composite_expression(Tape& t, Var x, Var w) {
  Var y = t.matmul(x, t.transpose(w));              // 4x3 * 3x5
  y = t.sigmoid(y);
  Var z = t.silu(t.scale_add(y, 1.3, -0.2));
  Var cats = t.concat_cols({y, z});
  Var sl = t.slice_cols(cats, 2, 6);
  Var rs = t.row_sum(t.mul(sl, sl));
  Var sq = t.sqrt(t.scale_add(rs, 1.0, 1.0));
  Var trig = t.add(t.sin(sq), t.cos(t.recip(sq)));
  Var ex = t.exp(t.scale(trig, 0.3));
  Var hb = t.huber(t.sub(ex, t.ones(t.rows(ex), t.cols(ex))), 0.4);
  return t.sum_all(hb);
}

}  // namespace

TEST_CASE("gradient of sum of squares is 2x", "[tape]") {
  Tape t;
  Rng rng(1);
  Mat x = random_mat(rng, 4, 3);
  Var p = t.leaf(x);
  Var e = t.sum_all(t.mul(p, p));
  auto g = t.grad(e, {p});
  CHECK((t.value(g[0]) - 2.0 * x).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("dimer pair energy obeys Newton's third law", "[tape]") {
  Tape t;
  Mat pos(2, 3);
  pos << 0.0, 0.0, 0.0, 1.7, 0.4, -0.2;
  Var p = t.leaf(pos);
  const int idx_i = t.add_index_list({0});
  const int idx_j = t.add_index_list({1});
  Var u = t.sub(t.gather_rows(p, idx_j), t.gather_rows(p, idx_i));
  Var d = t.sqrt(t.row_sum(t.mul(u, u)));
  Var resid = t.scale_add(d, 1.0, -1.2);  // d - d0
  Var e = t.sum_all(t.mul(resid, resid));
  auto g = t.grad(e, {p});
  const Mat& gm = t.value(g[0]);
  CHECK((gm.row(0) + gm.row(1)).cwiseAbs().maxCoeff() <= 1e-15);
  // gradient points along the bond axis
  Eigen::Vector3d axis(1.7, 0.4, -0.2);
  axis.normalize();
  Eigen::Vector3d g1(gm(1, 0), gm(1, 1), gm(1, 2));
  CHECK(g1.cross(axis).norm() <= 1e-12 * g1.norm());
}

TEST_CASE("composite gradients match finite differences", "[tape]") {
  Rng rng(2);
  Mat x0 = random_mat(rng, 4, 3);
  Mat w0 = random_mat(rng, 5, 3);

  Tape t;
  Var x = t.leaf(x0);
  Var w = t.leaf(w0);
  Var e = composite_expression(t, x, w);
  auto g = t.grad(e, {x, w});

  auto eval = [&](const Mat& xv, const Mat& wv) {
    Tape tt;
    Var xx = tt.leaf(xv);
    Var ww = tt.leaf(wv);
    return tt.value(composite_expression(tt, xx, ww))(0, 0);
  };
  const double h = 1e-6;
  for (auto [mat0, gi] : {std::pair{&x0, 0}, std::pair{&w0, 1}}) {
    const Mat& gm = t.value(g[gi]);
    for (Eigen::Index k = 0; k < mat0->size(); ++k) {
      Mat up = *mat0, dn = *mat0;
      up.data()[k] += h;
      dn.data()[k] -= h;
      const double fd = (gi == 0 ? eval(up, w0) - eval(dn, w0)
                                 : eval(x0, up) - eval(x0, dn)) /
                        (2 * h);
      CHECK(testing::close(gm.data()[k], fd, 1e-6, 1e-8));
    }
  }
}

TEST_CASE("gather/scatter gradients match finite differences", "[tape]") {
  Rng rng(3);
  Mat x0 = random_mat(rng, 5, 2);
  auto build = [&](Tape& t, Var x) {
    const int idx = t.add_index_list({0, 3, 3, 1, 4, 0});
    Var gth = t.gather_rows(x, idx);
    const int back = t.add_index_list({2, 2, 0, 1, 1, 4});
    Var sct = t.scatter_rows(t.mul(gth, gth), back, 5);
    return t.sum_all(t.silu(sct));
  };
  Tape t;
  Var x = t.leaf(x0);
  auto g = t.grad(build(t, x), {x});
  const double h = 1e-6;
  for (Eigen::Index k = 0; k < x0.size(); ++k) {
    Mat up = x0, dn = x0;
    up.data()[k] += h;
    dn.data()[k] -= h;
    Tape tu, td;
    const double fd =
        (tu.value(build(tu, tu.leaf(up)))(0, 0) - td.value(build(td, td.leaf(dn)))(0, 0)) / (2 * h);
    CHECK(testing::close(t.value(g[0]).data()[k], fd, 1e-6, 1e-9));
  }
}

TEST_CASE("second-order gradients flow through embedded first derivatives", "[tape]") {
  // E(x; w) = sum(w * x^2); F = dE/dx = 2 w x; loss = sum(F^2) = 4 sum(w^2 x^2)
  // so dloss/dw = 8 w x^2 elementwise.
  Rng rng(4);
  Mat x0 = random_mat(rng, 3, 1, 0.3, 1.5);
  Mat w0 = random_mat(rng, 3, 1, 0.5, 2.0);
  Tape t;
  Var x = t.leaf(x0);
  Var w = t.leaf(w0);
  Var e = t.sum_all(t.mul(w, t.mul(x, x)));
  Var force = t.grad(e, {x})[0];
  Var loss = t.sum_all(t.mul(force, force));
  auto g = t.grad(loss, {w});
  for (int k = 0; k < 3; ++k) {
    const double expect = 8.0 * w0(k, 0) * x0(k, 0) * x0(k, 0);
    CHECK(t.value(g[0])(k, 0) == Catch::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("second-order matches finite differences on a toy force loss", "[tape]") {
  Rng rng(5);
  Mat pos0 = random_mat(rng, 2, 3, -0.8, 0.8);
  pos0.row(1).array() += 2.0;
  Mat w0 = random_mat(rng, 4, 1, 0.2, 1.0);

  auto build = [&](Tape& t, const Mat& pv, const Mat& wv, Var* pos_out, Var* w_out) {
    Var p = t.leaf(pv);
    Var w = t.leaf(wv);
    if (pos_out) *pos_out = p;
    if (w_out) *w_out = w;
    const int i0 = t.add_index_list({0});
    const int i1 = t.add_index_list({1});
    Var u = t.sub(t.gather_rows(p, i1), t.gather_rows(p, i0));
    Var d = t.sqrt(t.row_sum(t.mul(u, u)));
    // tiny "network": scalar features of d through a weighted tanh-ish map
    Var feats = t.concat_cols({d, t.mul(d, d), t.sin(d), t.silu(d)});
    Var e = t.sum_all(t.matmul(feats, w));
    return e;
  };

  Tape t;
  Var pos, w;
  Var e = build(t, pos0, w0, &pos, &w);
  Var force = t.neg(t.grad(e, {pos})[0]);
  Var loss = t.sum_all(t.mul(force, force));
  auto gw = t.grad(loss, {w});

  const double h = 1e-5;
  for (Eigen::Index k = 0; k < w0.size(); ++k) {
    auto loss_at = [&](double delta) {
      Mat wv = w0;
      wv.data()[k] += delta;
      Tape tt;
      Var pp, ww;
      Var ee = build(tt, pos0, wv, &pp, &ww);
      Var ff = tt.neg(tt.grad(ee, {pp})[0]);
      return tt.value(tt.sum_all(tt.mul(ff, ff)))(0, 0);
    };
    const double fd = (loss_at(h) - loss_at(-h)) / (2 * h);
    CHECK(testing::close(t.value(gw[0]).data()[k], fd, 1e-4, 1e-8));
  }
}

TEST_CASE("gradient of a loss equal to the energy is the plain reverse pass", "[tape]") {
  Rng rng(6);
  Mat w0 = random_mat(rng, 3, 3);
  Tape t;
  Var w = t.leaf(w0);
  Var e = t.sum_all(t.silu(w));
  auto g1 = t.grad(e, {w});
  auto g2 = t.grad(e, {w});  // second emission produces the same values
  CHECK((t.value(g1[0]) - t.value(g2[0])).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("unused leaves get exactly zero gradients", "[tape]") {
  Tape t;
  Var used = t.leaf(Mat::Ones(2, 2));
  Var unused = t.leaf(Mat::Ones(3, 4));
  Var e = t.sum_all(t.mul(used, used));
  auto g = t.grad(e, {used, unused});
  CHECK(t.value(g[1]).rows() == 3);
  CHECK(t.value(g[1]).cols() == 4);
  CHECK(t.value(g[1]).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients are linear in the target", "[tape]") {
  Rng rng(7);
  Mat x0 = random_mat(rng, 3, 2);
  Tape t;
  Var x = t.leaf(x0);
  Var e1 = t.sum_all(t.silu(x));
  Var e2 = t.sum_all(t.mul(t.sin(x), x));
  const double alpha = 1.7, beta = -0.6;
  Var mix = t.add(t.scale(e1, alpha), t.scale(e2, beta));
  auto g = t.grad(mix, {x});
  auto ga = t.grad(e1, {x});
  auto gb = t.grad(e2, {x});
  const Mat expect = alpha * t.value(ga[0]) + beta * t.value(gb[0]);
  CHECK((t.value(g[0]) - expect).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("strain-free scalars have zero strain gradient", "[tape]") {
  Tape t;
  Var strain = t.leaf(Mat::Zero(3, 3));
  Var w = t.leaf(Mat::Ones(2, 2));
  Var e = t.sum_all(t.mul(w, w));
  Var g = grad_wrt_strain(t, e, strain);
  CHECK(t.value(g).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("replaying the tape reproduces values bit-exactly", "[tape]") {
  Rng rng(8);
  Mat x0 = random_mat(rng, 4, 3);
  Mat w0 = random_mat(rng, 5, 3);
  Tape t;
  Var x = t.leaf(x0);
  Var w = t.leaf(w0);
  Var e = composite_expression(t, x, w);
  auto g = t.grad(e, {x, w});
  const double e_before = t.value(e)(0, 0);
  const Mat g_before = t.value(g[0]);
  t.recompute();
  CHECK(t.value(e)(0, 0) == e_before);
  CHECK((t.value(g[0]) - g_before).cwiseAbs().maxCoeff() == 0.0);

  // replay with a changed leaf matches a fresh recording
  Mat x1 = random_mat(rng, 4, 3);
  t.set_leaf_value(x, x1);
  t.recompute();
  Tape t2;
  Var e2 = composite_expression(t2, t2.leaf(x1), t2.leaf(w0));
  CHECK(t.value(e)(0, 0) == t2.value(e2)(0, 0));
}

TEST_CASE("grad rejects non-scalar targets and non-leaf arguments", "[tape]") {
  Tape t;
  Var x = t.leaf(Mat::Ones(2, 2));
  Var y = t.mul(x, x);
  CHECK_THROWS(t.grad(y, {x}));
  Var e = t.sum_all(y);
  CHECK_THROWS(t.grad(e, {y}));
  CHECK_NOTHROW(t.grad(e, {x}));
}

TEST_CASE("huber op values and first derivative", "[tape]") {
  Tape t;
  Mat x(1, 3);
  x << 0.0, 0.05, 1.0;
  Var v = t.leaf(x);
  Var h = t.huber(v, 0.1);
  CHECK(t.value(h)(0, 0) == 0.0);
  CHECK(t.value(h)(0, 1) == Catch::Approx(0.00125).margin(1e-18));
  CHECK(t.value(h)(0, 2) == Catch::Approx(0.095).margin(1e-15));
  auto g = t.grad(t.sum_all(h), {v});
  CHECK(t.value(g[0])(0, 0) == 0.0);
  CHECK(t.value(g[0])(0, 1) == Catch::Approx(0.05).margin(1e-15));
  CHECK(t.value(g[0])(0, 2) == Catch::Approx(0.1).margin(1e-15));
}
