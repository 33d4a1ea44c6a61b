#include <cmath>
#include <vector>

#include "ad/ops.hpp"
#include "ad/tensor.hpp"
#include "core/rng.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cress::ad;
using cress::Rng;
using cress::testing::check_gradients;

namespace {

Tensor random_tensor(Shape shape, uint64_t seed, double scl = 1.0) {
  Tensor t = Tensor::zeros(shape);
  Rng rng(seed);
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal() * scl;
  return t;
}

std::vector<uint8_t> full_mask(int64_t tq, int64_t tk) {
  return std::vector<uint8_t>(static_cast<size_t>(tq * tk), 1);
}

}  // namespace

TEST_CASE("matmul basics") {
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor r = matmul(nullptr, eye, b);
  for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == b.data()[i]);

  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(nullptr, a, b);
  // hand arithmetic oracle
  CHECK(c.data()[0] == 19);
  CHECK(c.data()[1] == 22);
  CHECK(c.data()[2] == 43);
  CHECK(c.data()[3] == 50);

  Tensor z = Tensor::zeros({2, 3});
  Tensor az = matmul(nullptr, a, z);
  for (int64_t i = 0; i < az.numel(); ++i) CHECK(az.data()[i] == 0.0);

  Tensor bad = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(matmul(nullptr, a, bad), std::invalid_argument);
}

TEST_CASE("softmax values and invariants") {
  Tensor x = Tensor::from({4}, {0, 0, 0, 0});
  Tensor s = softmax(nullptr, x, 0);
  for (int i = 0; i < 4; ++i) CHECK(s.data()[i] == doctest::Approx(0.25).epsilon(1e-15));

  Tensor y = Tensor::from({2}, {0.0, std::log(2.0)});
  Tensor sy = softmax(nullptr, y, 0);
  CHECK(sy.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(sy.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  // shift invariance and normalization on random input
  Tensor r = random_tensor({3, 7}, 42);
  Tensor rs = softmax(nullptr, r, 1);
  Tensor rshift = Tensor::zeros({3, 7});
  for (int64_t i = 0; i < r.numel(); ++i) rshift.data()[i] = r.data()[i] + 3.25;
  Tensor rs2 = softmax(nullptr, rshift, 1);
  for (int64_t i = 0; i < r.numel(); ++i)
    CHECK(rs.data()[i] == doctest::Approx(rs2.data()[i]).epsilon(1e-12));
  for (int row = 0; row < 3; ++row) {
    double sum = 0.0;
    for (int j = 0; j < 7; ++j) sum += rs.data()[row * 7 + j];
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  Tensor ls = log_softmax(nullptr, r, 1);
  for (int64_t i = 0; i < r.numel(); ++i)
    CHECK(std::abs(ls.data()[i] - std::log(rs.data()[i])) < 1e-10);
}

TEST_CASE("layer_norm values") {
  Tensor g1 = Tensor::from({3}, {1, 1, 1});
  Tensor b0 = Tensor::from({3}, {0, 0, 0});
  Tensor c = Tensor::from({1, 3}, {4, 4, 4});
  Tensor out = layer_norm(nullptr, c, g1, b0);
  for (int i = 0; i < 3; ++i) CHECK(out.data()[i] == 0.0);

  Tensor g2 = Tensor::from({2}, {1, 1});
  Tensor z2 = Tensor::from({2}, {0, 0});
  Tensor x = Tensor::from({1, 2}, {1, 3});
  Tensor o2 = layer_norm(nullptr, x, g2, z2, 0.0);
  CHECK(o2.data()[0] == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(o2.data()[1] == doctest::Approx(1.0).epsilon(1e-12));

  Tensor g0 = Tensor::from({2}, {0, 0});
  Tensor bb = Tensor::from({2}, {2.5, -1.5});
  Tensor o3 = layer_norm(nullptr, x, g0, bb);
  CHECK(o3.data()[0] == 2.5);
  CHECK(o3.data()[1] == -1.5);
}

TEST_CASE("attention special cases") {
  // single key: output equals the v row regardless of scores
  Tensor q = random_tensor({2, 4}, 1);
  Tensor k = random_tensor({1, 4}, 2);
  Tensor v = random_tensor({1, 4}, 3);
  Tensor o = scaled_dot_attention_single(nullptr, q, k, v, 2, full_mask(2, 1));
  for (int t = 0; t < 2; ++t)
    for (int j = 0; j < 4; ++j)
      CHECK(o.data()[t * 4 + j] == doctest::Approx(v.data()[j]).epsilon(1e-12));

  // two identical keys: average of their v rows
  Tensor k2 = Tensor::zeros({2, 4});
  Rng rng(5);
  for (int j = 0; j < 4; ++j) {
    k2.data()[j] = rng.normal();
    k2.data()[4 + j] = k2.data()[j];
  }
  Tensor v2 = random_tensor({2, 4}, 6);
  Tensor o2 = scaled_dot_attention_single(nullptr, q, k2, v2, 1, full_mask(2, 2));
  for (int t = 0; t < 2; ++t)
    for (int j = 0; j < 4; ++j)
      CHECK(o2.data()[t * 4 + j] ==
            doctest::Approx(0.5 * (v2.data()[j] + v2.data()[4 + j])).epsilon(1e-12));

  // 2-query / 3-key case vs direct dense evaluation (independent oracle)
  Tensor q3 = random_tensor({2, 4}, 7);
  Tensor k3 = random_tensor({3, 4}, 8);
  Tensor v3 = random_tensor({3, 4}, 9);
  const int heads = 2, dh = 2;
  Tensor o3 = scaled_dot_attention_single(nullptr, q3, k3, v3, heads, full_mask(2, 3));
  for (int h = 0; h < heads; ++h)
    for (int t = 0; t < 2; ++t) {
      double scores[3];
      for (int j = 0; j < 3; ++j) {
        double s = 0.0;
        for (int c = 0; c < dh; ++c)
          s += q3.data()[t * 4 + h * dh + c] * k3.data()[j * 4 + h * dh + c];
        scores[j] = s / std::sqrt(2.0);
      }
      double mx = std::max({scores[0], scores[1], scores[2]});
      double w[3], z = 0.0;
      for (int j = 0; j < 3; ++j) {
        w[j] = std::exp(scores[j] - mx);
        z += w[j];
      }
      for (int c = 0; c < dh; ++c) {
        double expect = 0.0;
        for (int j = 0; j < 3; ++j)
          expect += w[j] / z * v3.data()[j * 4 + h * dh + c];
        CHECK(o3.data()[t * 4 + h * dh + c] == doctest::Approx(expect).epsilon(1e-12));
      }
    }

  // fully-masked query row is rejected
  std::vector<uint8_t> dead = full_mask(2, 3);
  dead[3] = dead[4] = dead[5] = 0;
  CHECK_THROWS_AS(scaled_dot_attention_single(nullptr, q3, k3, v3, 2, dead),
                  std::invalid_argument);
}

TEST_CASE("cross entropy with label smoothing") {
  // predicted prob 1 on target, eps 0 -> loss 0
  Tensor lp = Tensor::from({1, 3}, {0.0, -50.0, -50.0});
  Tensor l = cross_entropy_label_smoothed(nullptr, lp, {0}, 0.0);
  CHECK(l.data()[0] == 0.0);

  // uniform prediction -> ln V for any eps
  const int V = 7;
  std::vector<double> u(V, std::log(1.0 / V));
  Tensor lu = Tensor::from({1, V}, u);
  for (double eps : {0.0, 0.1, 0.5}) {
    Tensor lv = cross_entropy_label_smoothed(nullptr, lu, {3}, eps);
    CHECK(lv.data()[0] == doctest::Approx(std::log(double(V))).epsilon(1e-12));
  }

  // hand arithmetic oracle: eps=0.1, V=2, p=(0.9,0.1), target 0
  Tensor lp2 = Tensor::from({1, 2}, {std::log(0.9), std::log(0.1)});
  Tensor l2 = cross_entropy_label_smoothed(nullptr, lp2, {0}, 0.1);
  const double expect =
      0.9 * (-std::log(0.9)) + 0.1 * 0.5 * (-std::log(0.9) - std::log(0.1));
  CHECK(l2.data()[0] == doctest::Approx(expect).epsilon(1e-12));

  // pad positions excluded; out-of-range rejected
  Tensor l3 = cross_entropy_label_smoothed(nullptr, lp2, {-1}, 0.1);
  CHECK(l3.data()[0] == 0.0);
  CHECK_THROWS_AS(cross_entropy_label_smoothed(nullptr, lp2, {2}, 0.1),
                  std::invalid_argument);
}

TEST_CASE("bidirectional KL") {
  Tensor p = Tensor::from({2}, {std::log(0.9), std::log(0.1)});
  Tensor q = Tensor::from({2}, {std::log(0.5), std::log(0.5)});
  // hand arithmetic oracle
  const double kl_pq = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
  const double kl_qp = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  Tensor d = kl_bidirectional(nullptr, p, q);
  CHECK(d.value() == doctest::Approx(0.5 * (kl_pq + kl_qp)).epsilon(1e-12));
  CHECK(d.value() == doctest::Approx(0.43945).epsilon(1e-4));

  // identity and exact symmetry
  Tensor same = kl_bidirectional(nullptr, p, p);
  CHECK(same.value() == 0.0);
  Tensor sw = kl_bidirectional(nullptr, q, p);
  CHECK(sw.value() == d.value());
  CHECK(d.value() >= 0.0);
}

TEST_CASE("cosine similarity") {
  Tensor a = random_tensor({5}, 11);
  CHECK(cosine_similarity(nullptr, a, a).value() == doctest::Approx(1.0).epsilon(1e-12));
  Tensor e1 = Tensor::from({2}, {1, 0});
  Tensor e2 = Tensor::from({2}, {0, 1});
  CHECK(cosine_similarity(nullptr, e1, e2).value() == 0.0);
  Tensor d11 = Tensor::from({2}, {1, 1});
  CHECK(cosine_similarity(nullptr, e1, d11).value() ==
        doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  Tensor z = Tensor::zeros({2});
  CHECK_THROWS_AS(cosine_similarity(nullptr, e1, z), std::invalid_argument);

  // range invariant on random vectors
  for (uint64_t s = 0; s < 20; ++s) {
    Tensor u = random_tensor({8}, 100 + s);
    Tensor w = random_tensor({8}, 200 + s);
    double c = cosine_similarity(nullptr, u, w).value();
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
  }
}

TEST_CASE("backward basics") {
  // loss = sum(x) -> grad all ones
  Tensor x = random_tensor({3, 2}, 21);
  x.set_requires_grad(true);
  Tape t1;
  Tensor s = sum_all(&t1, x);
  t1.backward(s);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.grad()[i] == 1.0);

  // loss = x^2 at x=3 -> grad 6
  Tensor x2 = Tensor::scalar(3.0);
  x2.set_requires_grad(true);
  Tape t2;
  Tensor sq = sum_all(&t2, mul(&t2, x2, x2));
  t2.backward(sq);
  CHECK(x2.grad()[0] == 6.0);

  // backward on non-scalar rejected
  Tape t3;
  Tensor y = add(&t3, x, x);
  CHECK_THROWS_AS(t3.backward(y), std::invalid_argument);
}

TEST_CASE("tape determinism: repeated backward after zeroing") {
  Tensor w = random_tensor({4, 4}, 31);
  Tensor x = random_tensor({4, 4}, 32);
  w.set_requires_grad(true);
  Tape tape;
  Tensor h = relu(&tape, matmul(&tape, x, w));
  Tensor loss = sum_all(&tape, mul(&tape, h, h));
  tape.backward(loss);
  std::vector<double> g1(w.grad(), w.grad() + w.numel());
  w.zero_grad();
  tape.zero_grads();
  tape.backward(loss);
  for (int64_t i = 0; i < w.numel(); ++i) CHECK(w.grad()[i] == g1[static_cast<size_t>(i)]);
}

TEST_CASE("dropout determinism and scaling") {
  Tensor x = Tensor::from({1000}, std::vector<double>(1000, 1.0));
  Tensor a = dropout(nullptr, x, 0.3, 99);
  Tensor b = dropout(nullptr, x, 0.3, 99);
  int kept = 0;
  for (int i = 0; i < 1000; ++i) {
    CHECK(a.data()[i] == b.data()[i]);
    if (a.data()[i] != 0.0) {
      CHECK(a.data()[i] == doctest::Approx(1.0 / 0.7).epsilon(1e-12));
      ++kept;
    }
  }
  CHECK(kept > 600);
  CHECK(kept < 800);
  Tensor c = dropout(nullptr, x, 0.3, 100);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) differs |= (a.data()[i] != c.data()[i]);
  CHECK(differs);
}

TEST_CASE("finite difference checks per op") {
  // matmul + bias + relu chain
  {
    Tensor a = random_tensor({3, 4}, 41, 0.5);
    Tensor b = random_tensor({4, 2}, 42, 0.5);
    Tensor bias = random_tensor({2}, 43, 0.5);
    auto fwd = [&](Tape* tp) {
      Tensor h = relu(tp, bias_add(tp, matmul(tp, a, b), bias));
      return sum_all(tp, mul(tp, h, h));
    };
    auto res = check_gradients(fwd, {a, b, bias});
    CHECK(res.max_rel_err < 1e-5);
  }
  // softmax / log_softmax
  {
    Tensor x = random_tensor({2, 5}, 44);
    Tensor w = random_tensor({2, 5}, 45);
    auto fwd = [&](Tape* tp) {
      return sum_all(tp, mul(tp, softmax(tp, x, 1), w));
    };
    CHECK(check_gradients(fwd, {x}).max_rel_err < 1e-5);
    auto fwd2 = [&](Tape* tp) {
      return sum_all(tp, mul(tp, log_softmax(tp, x, 1), w));
    };
    CHECK(check_gradients(fwd2, {x}).max_rel_err < 1e-5);
  }
  // layer_norm
  {
    Tensor x = random_tensor({3, 6}, 46);
    Tensor g = random_tensor({6}, 47, 0.5);
    Tensor b = random_tensor({6}, 48, 0.5);
    Tensor w = random_tensor({3, 6}, 49);
    auto fwd = [&](Tape* tp) {
      return sum_all(tp, mul(tp, layer_norm(tp, x, g, b), w));
    };
    CHECK(check_gradients(fwd, {x, g, b}).max_rel_err < 1e-5);
  }
  // attention with causal-ish mask
  {
    Tensor q = random_tensor({3, 4}, 50);
    Tensor k = random_tensor({3, 4}, 51);
    Tensor v = random_tensor({3, 4}, 52);
    Tensor w = random_tensor({3, 4}, 53);
    std::vector<uint8_t> mask(9, 0);
    for (int t = 0; t < 3; ++t)
      for (int j = 0; j <= t; ++j) mask[static_cast<size_t>(t * 3 + j)] = 1;
    auto fwd = [&](Tape* tp) {
      return sum_all(tp, mul(tp, scaled_dot_attention_single(tp, q, k, v, 2, mask), w));
    };
    CHECK(check_gradients(fwd, {q, k, v}).max_rel_err < 1e-5);
  }
  // conv1d
  {
    Tensor x = random_tensor({2, 7, 3}, 54);
    Tensor w = random_tensor({4, 3, 5}, 55, 0.4);
    Tensor b = random_tensor({4}, 56, 0.2);
    Tensor m = random_tensor({2, 4, 4}, 57);
    auto fwd = [&](Tape* tp) {
      return sum_all(tp, mul(tp, conv1d(tp, x, w, b, 2, 2), m));
    };
    CHECK(check_gradients(fwd, {x, w, b}).max_rel_err < 1e-5);
  }
  // embedding gather
  {
    Tensor table = random_tensor({6, 3}, 58);
    std::vector<int> ids = {0, 2, 2, 5};
    Tensor m = random_tensor({4, 3}, 59);
    auto fwd = [&](Tape* tp) {
      return sum_all(tp, mul(tp, embedding(tp, table, ids), m));
    };
    CHECK(check_gradients(fwd, {table}).max_rel_err < 1e-5);
  }
  // label-smoothed CE through log_softmax
  {
    Tensor logits = random_tensor({4, 6}, 60);
    std::vector<int> tgt = {1, -1, 3, 5};
    auto fwd = [&](Tape* tp) {
      Tensor lp = log_softmax(tp, logits, 1);
      return sum_all(tp, cross_entropy_label_smoothed(tp, lp, tgt, 0.1));
    };
    CHECK(check_gradients(fwd, {logits}).max_rel_err < 1e-5);
  }
  // bidirectional KL through two log_softmaxes
  {
    Tensor la = random_tensor({3, 5}, 61);
    Tensor lb = random_tensor({3, 5}, 62);
    std::vector<uint8_t> inc = {1, 0, 1};
    auto fwd = [&](Tape* tp) {
      Tensor pa = log_softmax(tp, la, 1);
      Tensor pb = log_softmax(tp, lb, 1);
      return sum_all(tp, kl_bidirectional_rows(tp, pa, pb, inc));
    };
    CHECK(check_gradients(fwd, {la, lb}).max_rel_err < 1e-5);
  }
  // cosine similarity
  {
    Tensor a = random_tensor({6}, 63);
    Tensor b = random_tensor({6}, 64);
    auto fwd = [&](Tape* tp) { return cosine_similarity(tp, a, b); };
    CHECK(check_gradients(fwd, {a, b}).max_rel_err < 1e-5);
  }
  // dropout (fixed seed keeps the mask constant across FD evaluations)
  {
    Tensor x = random_tensor({5, 4}, 65);
    Tensor w = random_tensor({5, 4}, 66);
    auto fwd = [&](Tape* tp) {
      return sum_all(tp, mul(tp, dropout(tp, x, 0.25, 77), w));
    };
    CHECK(check_gradients(fwd, {x}).max_rel_err < 1e-5);
  }
  // weighted sum
  {
    Tensor x = random_tensor({6}, 67);
    std::vector<double> wts = {0.7, 0.75, 0.8, 0.7, 0.72, 0.78};
    auto fwd = [&](Tape* tp) { return weighted_sum(tp, mul(tp, x, x), wts); };
    CHECK(check_gradients(fwd, {x}).max_rel_err < 1e-5);
  }
}
