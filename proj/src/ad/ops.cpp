#include "ad/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>

#include "core/rng.hpp"

namespace cress::ad {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using StrideT = Eigen::OuterStride<>;
using BlockMap = Eigen::Map<MatRM, 0, StrideT>;
using CBlockMap = Eigen::Map<const MatRM, 0, StrideT>;

namespace {

bool want_grad(Tape* tp, std::initializer_list<const Tensor*> ins) {
  if (!tp) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

void mark(Tape* tp, Tensor& out, std::function<void()> fn) {
  out.set_requires_grad(true);
  out.d_->node = tp->record(std::move(fn), out);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

void check_finite_name(const Tensor& t, const char* op) {
  for (int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.data()[i]))
      throw std::invalid_argument(std::string(op) + ": non-finite input");
}

struct AxisLanes {
  int64_t outer, len, inner;
};

AxisLanes lanes_for(const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw std::invalid_argument("softmax: axis out of range");
  AxisLanes l{1, x.dim(axis), 1};
  for (int i = 0; i < axis; ++i) l.outer *= x.dim(i);
  for (int i = axis + 1; i < x.rank(); ++i) l.inner *= x.dim(i);
  return l;
}

}  // namespace

Tensor add(Tape* tp, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (want_grad(tp, {&a, &b})) {
    Tensor ac = a, bc = b, oc = out;
    mark(tp, out, [ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        for (int64_t i = 0; i < n; ++i) gb[i] += go[i];
      }
    });
  }
  return out;
}

Tensor sub(Tape* tp, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (want_grad(tp, {&a, &b})) {
    Tensor ac = a, bc = b, oc = out;
    mark(tp, out, [ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i];
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        for (int64_t i = 0; i < n; ++i) gb[i] -= go[i];
      }
    });
  }
  return out;
}

Tensor mul(Tape* tp, const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (want_grad(tp, {&a, &b})) {
    Tensor ac = a, bc = b, oc = out;
    mark(tp, out, [ac, bc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * bc.data()[i];
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        for (int64_t i = 0; i < n; ++i) gb[i] += go[i] * ac.data()[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape* tp, const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * c;
  if (want_grad(tp, {&a})) {
    Tensor ac = a, oc = out;
    mark(tp, out, [ac, oc, c, n]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      double* ga = ac.grad();
      for (int64_t i = 0; i < n; ++i) ga[i] += go[i] * c;
    });
  }
  return out;
}

Tensor bias_add(Tape* tp, const Tensor& x, const Tensor& bias) {
  const int64_t c = x.dim(x.rank() - 1);
  if (bias.rank() != 1 || bias.dim(0) != c)
    throw std::invalid_argument("bias_add: bias extent mismatch");
  const int64_t rows = x.numel() / c;
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j)
      out.data()[r * c + j] = x.data()[r * c + j] + bias.data()[j];
  if (want_grad(tp, {&x, &bias})) {
    Tensor xc = x, bc = bias, oc = out;
    mark(tp, out, [xc, bc, oc, rows, c]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      if (xc.requires_grad()) {
        double* gx = xc.grad();
        for (int64_t i = 0; i < rows * c; ++i) gx[i] += go[i];
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < c; ++j) gb[j] += go[r * c + j];
      }
    });
  }
  return out;
}

Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 tensors");
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw std::invalid_argument("matmul: inner extents disagree");
  Tensor out = Tensor::zeros({m, n});
  {
    CMapM A(a.data(), m, k), B(b.data(), k, n);
    MapM C(out.data(), m, n);
    C.noalias() = A * B;
  }
  if (want_grad(tp, {&a, &b})) {
    Tensor ac = a, bc = b, oc = out;
    mark(tp, out, [ac, bc, oc, m, k, n]() mutable {
      if (!oc.has_grad()) return;
      CMapM Cg(oc.grad(), m, n);
      if (ac.requires_grad()) {
        CMapM B(bc.data(), k, n);
        MapM Ag(ac.grad(), m, k);
        Ag.noalias() += Cg * B.transpose();
      }
      if (bc.requires_grad()) {
        CMapM A(ac.data(), m, k);
        MapM Bg(bc.grad(), k, n);
        Bg.noalias() += A.transpose() * Cg;
      }
    });
  }
  return out;
}

Tensor relu(Tape* tp, const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const int64_t n = out.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = x.data()[i] > 0 ? x.data()[i] : 0.0;
  if (want_grad(tp, {&x})) {
    Tensor xc = x, oc = out;
    mark(tp, out, [xc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      double* gx = xc.grad();
      for (int64_t i = 0; i < n; ++i)
        if (xc.data()[i] > 0) gx[i] += go[i];
    });
  }
  return out;
}

Tensor sum_all(Tape* tp, const Tensor& x) {
  double s = 0.0;
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += x.data()[i];
  Tensor out = Tensor::scalar(s);
  if (want_grad(tp, {&x})) {
    Tensor xc = x, oc = out;
    mark(tp, out, [xc, oc, n]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0];
      double* gx = xc.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

Tensor weighted_sum(Tape* tp, const Tensor& x, const std::vector<double>& w) {
  const int64_t n = x.numel();
  if (static_cast<int64_t>(w.size()) != n)
    throw std::invalid_argument("weighted_sum: weight count mismatch");
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += w[static_cast<size_t>(i)] * x.data()[i];
  Tensor out = Tensor::scalar(s);
  if (want_grad(tp, {&x})) {
    Tensor xc = x, oc = out;
    std::vector<double> wc = w;
    mark(tp, out, [xc, oc, wc, n]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0];
      double* gx = xc.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += g * wc[static_cast<size_t>(i)];
    });
  }
  return out;
}

Tensor softmax(Tape* tp, const Tensor& x, int axis) {
  check_finite_name(x, "softmax");
  const AxisLanes L = lanes_for(x, axis);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t o = 0; o < L.outer; ++o)
    for (int64_t in = 0; in < L.inner; ++in) {
      const int64_t base = o * L.len * L.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < L.len; ++j)
        mx = std::max(mx, x.data()[base + j * L.inner]);
      double z = 0.0;
      for (int64_t j = 0; j < L.len; ++j) {
        double e = std::exp(x.data()[base + j * L.inner] - mx);
        out.data()[base + j * L.inner] = e;
        z += e;
      }
      for (int64_t j = 0; j < L.len; ++j) out.data()[base + j * L.inner] /= z;
    }
  if (want_grad(tp, {&x})) {
    Tensor xc = x, oc = out;
    mark(tp, out, [xc, oc, L]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      const double* p = oc.data();
      double* gx = xc.grad();
      for (int64_t o = 0; o < L.outer; ++o)
        for (int64_t in = 0; in < L.inner; ++in) {
          const int64_t base = o * L.len * L.inner + in;
          double dot = 0.0;
          for (int64_t j = 0; j < L.len; ++j) {
            const int64_t idx = base + j * L.inner;
            dot += go[idx] * p[idx];
          }
          for (int64_t j = 0; j < L.len; ++j) {
            const int64_t idx = base + j * L.inner;
            gx[idx] += p[idx] * (go[idx] - dot);
          }
        }
    });
  }
  return out;
}

Tensor log_softmax(Tape* tp, const Tensor& x, int axis) {
  check_finite_name(x, "log_softmax");
  const AxisLanes L = lanes_for(x, axis);
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t o = 0; o < L.outer; ++o)
    for (int64_t in = 0; in < L.inner; ++in) {
      const int64_t base = o * L.len * L.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int64_t j = 0; j < L.len; ++j)
        mx = std::max(mx, x.data()[base + j * L.inner]);
      double z = 0.0;
      for (int64_t j = 0; j < L.len; ++j)
        z += std::exp(x.data()[base + j * L.inner] - mx);
      const double lz = mx + std::log(z);
      for (int64_t j = 0; j < L.len; ++j)
        out.data()[base + j * L.inner] = x.data()[base + j * L.inner] - lz;
    }
  if (want_grad(tp, {&x})) {
    Tensor xc = x, oc = out;
    mark(tp, out, [xc, oc, L]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      const double* lp = oc.data();
      double* gx = xc.grad();
      for (int64_t o = 0; o < L.outer; ++o)
        for (int64_t in = 0; in < L.inner; ++in) {
          const int64_t base = o * L.len * L.inner + in;
          double gsum = 0.0;
          for (int64_t j = 0; j < L.len; ++j) gsum += go[base + j * L.inner];
          for (int64_t j = 0; j < L.len; ++j) {
            const int64_t idx = base + j * L.inner;
            gx[idx] += go[idx] - std::exp(lp[idx]) * gsum;
          }
        }
    });
  }
  return out;
}

Tensor layer_norm(Tape* tp, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps) {
  const int64_t d = x.dim(x.rank() - 1);
  if (d < 1) throw std::invalid_argument("layer_norm: empty axis");
  if (gain.numel() != d || bias.numel() != d)
    throw std::invalid_argument("layer_norm: gain/bias extent mismatch");
  const int64_t rows = x.numel() / d;
  Tensor out = Tensor::zeros(x.shape());
  // invstd per row, cached for the backward pass
  auto invstd = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  auto meanv = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * d;
    double mu = 0.0;
    for (int64_t j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    (*invstd)[static_cast<size_t>(r)] = inv;
    (*meanv)[static_cast<size_t>(r)] = mu;
    double* orow = out.data() + r * d;
    for (int64_t j = 0; j < d; ++j)
      orow[j] = (xr[j] - mu) * inv * gain.data()[j] + bias.data()[j];
  }
  if (want_grad(tp, {&x, &gain, &bias})) {
    Tensor xc = x, gc = gain, bc = bias, oc = out;
    mark(tp, out, [xc, gc, bc, oc, invstd, meanv, rows, d]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xc.data() + r * d;
        const double* gor = go + r * d;
        const double mu = (*meanv)[static_cast<size_t>(r)];
        const double inv = (*invstd)[static_cast<size_t>(r)];
        if (gc.requires_grad()) {
          double* gg = gc.grad();
          for (int64_t j = 0; j < d; ++j) gg[j] += gor[j] * (xr[j] - mu) * inv;
        }
        if (bc.requires_grad()) {
          double* gb = bc.grad();
          for (int64_t j = 0; j < d; ++j) gb[j] += gor[j];
        }
        if (xc.requires_grad()) {
          double* gx = xc.grad() + r * d;
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int64_t j = 0; j < d; ++j) {
            const double dxh = gor[j] * gc.data()[j];
            const double xh = (xr[j] - mu) * inv;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
          }
          const double dn = static_cast<double>(d);
          for (int64_t j = 0; j < d; ++j) {
            const double dxh = gor[j] * gc.data()[j];
            const double xh = (xr[j] - mu) * inv;
            gx[j] += inv * (dxh - sum_dxhat / dn - xh * sum_dxhat_xhat / dn);
          }
        }
      }
    });
  }
  return out;
}

Tensor dropout(Tape* tp, const Tensor& x, double rate, uint64_t seed) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  const int64_t n = x.numel();
  auto keep = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
  Rng rng(seed);
  const double inv_keep = 1.0 / (1.0 - rate);
  for (int64_t i = 0; i < n; ++i)
    (*keep)[static_cast<size_t>(i)] = rng.uniform() >= rate ? inv_keep : 0.0;
  Tensor out = Tensor::zeros(x.shape());
  for (int64_t i = 0; i < n; ++i)
    out.data()[i] = x.data()[i] * (*keep)[static_cast<size_t>(i)];
  if (want_grad(tp, {&x})) {
    Tensor xc = x, oc = out;
    mark(tp, out, [xc, oc, keep, n]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      double* gx = xc.grad();
      for (int64_t i = 0; i < n; ++i) gx[i] += go[i] * (*keep)[static_cast<size_t>(i)];
    });
  }
  return out;
}

Tensor scaled_dot_attention(Tape* tp, const Tensor& q, const Tensor& k,
                            const Tensor& v, int heads,
                            const std::vector<uint8_t>& mask) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3)
    throw std::invalid_argument("attention: expects [B, T, D] tensors");
  const int64_t B = q.dim(0), Tq = q.dim(1), D = q.dim(2), Tk = k.dim(1);
  if (k.dim(0) != B || v.dim(0) != B || v.dim(1) != Tk || k.dim(2) != D ||
      v.dim(2) != D)
    throw std::invalid_argument("attention: shape mismatch");
  if (heads < 1 || D % heads != 0)
    throw std::invalid_argument("attention: D must be divisible by heads");
  if (static_cast<int64_t>(mask.size()) != B * Tq * Tk)
    throw std::invalid_argument("attention: mask extent mismatch");
  const int64_t dh = D / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  for (int64_t b = 0; b < B; ++b)
    for (int64_t t = 0; t < Tq; ++t) {
      bool any = false;
      for (int64_t j = 0; j < Tk; ++j)
        if (mask[static_cast<size_t>((b * Tq + t) * Tk + j)]) {
          any = true;
          break;
        }
      if (!any)
        throw std::invalid_argument("attention: query row with no unmasked key");
    }

  Tensor out = Tensor::zeros({B, Tq, D});
  // Post-softmax probabilities, kept for the backward pass.
  auto probs = std::make_shared<std::vector<double>>(
      static_cast<size_t>(B * heads * Tq * Tk));

  for (int64_t b = 0; b < B; ++b) {
    const uint8_t* mrow = mask.data() + b * Tq * Tk;
    for (int h = 0; h < heads; ++h) {
      CBlockMap Q(q.data() + (b * Tq) * D + h * dh, Tq, dh, StrideT(D));
      CBlockMap K(k.data() + (b * Tk) * D + h * dh, Tk, dh, StrideT(D));
      CBlockMap V(v.data() + (b * Tk) * D + h * dh, Tk, dh, StrideT(D));
      BlockMap O(out.data() + (b * Tq) * D + h * dh, Tq, dh, StrideT(D));
      double* P = probs->data() + ((b * heads + h) * Tq) * Tk;
      MatRM S(Tq, Tk);
      S.noalias() = Q * K.transpose() * sc;
      for (int64_t t = 0; t < Tq; ++t) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < Tk; ++j)
          if (mrow[t * Tk + j]) mx = std::max(mx, S(t, j));
        double z = 0.0;
        for (int64_t j = 0; j < Tk; ++j) {
          double p = mrow[t * Tk + j] ? std::exp(S(t, j) - mx) : 0.0;
          P[t * Tk + j] = p;
          z += p;
        }
        for (int64_t j = 0; j < Tk; ++j) P[t * Tk + j] /= z;
      }
      CMapM Pm(P, Tq, Tk);
      O.noalias() = Pm * V;
    }
  }

  if (want_grad(tp, {&q, &k, &v})) {
    Tensor qc = q, kc = k, vc = v, oc = out;
    mark(tp, out, [qc, kc, vc, oc, probs, B, Tq, Tk, D, heads, dh, sc]() mutable {
      if (!oc.has_grad()) return;
      for (int64_t b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
          CBlockMap Q(qc.data() + (b * Tq) * D + h * dh, Tq, dh, StrideT(D));
          CBlockMap K(kc.data() + (b * Tk) * D + h * dh, Tk, dh, StrideT(D));
          CBlockMap V(vc.data() + (b * Tk) * D + h * dh, Tk, dh, StrideT(D));
          CBlockMap dO(oc.grad() + (b * Tq) * D + h * dh, Tq, dh, StrideT(D));
          CMapM Pm(probs->data() + ((b * heads + h) * Tq) * Tk, Tq, Tk);
          if (vc.requires_grad()) {
            BlockMap dV(vc.grad() + (b * Tk) * D + h * dh, Tk, dh, StrideT(D));
            dV.noalias() += Pm.transpose() * dO;
          }
          if (qc.requires_grad() || kc.requires_grad()) {
            MatRM dP(Tq, Tk);
            dP.noalias() = dO * V.transpose();
            MatRM dS(Tq, Tk);
            for (int64_t t = 0; t < Tq; ++t) {
              double dot = 0.0;
              for (int64_t j = 0; j < Tk; ++j) dot += dP(t, j) * Pm(t, j);
              for (int64_t j = 0; j < Tk; ++j)
                dS(t, j) = Pm(t, j) * (dP(t, j) - dot);
            }
            if (qc.requires_grad()) {
              BlockMap dQ(qc.grad() + (b * Tq) * D + h * dh, Tq, dh, StrideT(D));
              dQ.noalias() += dS * K * sc;
            }
            if (kc.requires_grad()) {
              BlockMap dK(kc.grad() + (b * Tk) * D + h * dh, Tk, dh, StrideT(D));
              dK.noalias() += dS.transpose() * Q * sc;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor scaled_dot_attention_single(Tape* tp, const Tensor& q, const Tensor& k,
                                   const Tensor& v, int heads,
                                   const std::vector<uint8_t>& mask) {
  Tensor q3 = q.reshaped({1, q.dim(0), q.dim(1)});
  Tensor k3 = k.reshaped({1, k.dim(0), k.dim(1)});
  Tensor v3 = v.reshaped({1, v.dim(0), v.dim(1)});
  Tensor out = scaled_dot_attention(tp, q3, k3, v3, heads, mask);
  return out.reshaped({q.dim(0), q.dim(1)});
}

int64_t conv1d_out_len(int64_t len, int kernel, int stride, int pad) {
  return (len + 2 * pad - kernel) / stride + 1;
}

Tensor conv1d(Tape* tp, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad) {
  if (x.rank() != 3 || w.rank() != 3)
    throw std::invalid_argument("conv1d: expects x [B,T,Cin], w [Cout,Cin,K]");
  const int64_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
  const int64_t Cout = w.dim(0), K = w.dim(2);
  if (w.dim(1) != Cin || b.numel() != Cout)
    throw std::invalid_argument("conv1d: channel mismatch");
  const int64_t To = conv1d_out_len(T, static_cast<int>(K), stride, pad);
  if (To < 1) throw std::invalid_argument("conv1d: input too short");
  Tensor out = Tensor::zeros({B, To, Cout});
  for (int64_t bi = 0; bi < B; ++bi)
    for (int64_t t = 0; t < To; ++t) {
      double* orow = out.data() + (bi * To + t) * Cout;
      for (int64_t o = 0; o < Cout; ++o) orow[o] = b.data()[o];
      for (int64_t j = 0; j < K; ++j) {
        const int64_t src = t * stride + j - pad;
        if (src < 0 || src >= T) continue;
        const double* xrow = x.data() + (bi * T + src) * Cin;
        for (int64_t o = 0; o < Cout; ++o) {
          const double* wrow = w.data() + (o * Cin) * K + j;
          double acc = 0.0;
          for (int64_t c = 0; c < Cin; ++c) acc += xrow[c] * wrow[c * K];
          orow[o] += acc;
        }
      }
    }
  if (want_grad(tp, {&x, &w, &b})) {
    Tensor xc = x, wc = w, bc = b, oc = out;
    mark(tp, out, [xc, wc, bc, oc, B, T, Cin, Cout, K, To, stride, pad]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      for (int64_t bi = 0; bi < B; ++bi)
        for (int64_t t = 0; t < To; ++t) {
          const double* grow = go + (bi * To + t) * Cout;
          if (bc.requires_grad()) {
            double* gb = bc.grad();
            for (int64_t o = 0; o < Cout; ++o) gb[o] += grow[o];
          }
          for (int64_t j = 0; j < K; ++j) {
            const int64_t src = t * stride + j - pad;
            if (src < 0 || src >= T) continue;
            const double* xrow = xc.data() + (bi * T + src) * Cin;
            if (wc.requires_grad()) {
              double* gw = wc.grad();
              for (int64_t o = 0; o < Cout; ++o)
                for (int64_t c = 0; c < Cin; ++c)
                  gw[(o * Cin + c) * K + j] += grow[o] * xrow[c];
            }
            if (xc.requires_grad()) {
              double* gx = xc.grad() + (bi * T + src) * Cin;
              for (int64_t o = 0; o < Cout; ++o)
                for (int64_t c = 0; c < Cin; ++c)
                  gx[c] += grow[o] * wc.data()[(o * Cin + c) * K + j];
            }
          }
        }
    });
  }
  return out;
}

Tensor embedding(Tape* tp, const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw std::invalid_argument("embedding: table must be [V, D]");
  const int64_t V = table.dim(0), D = table.dim(1);
  const int64_t N = static_cast<int64_t>(ids.size());
  for (int id : ids)
    if (id < 0 || id >= V)
      throw std::invalid_argument("embedding: id out of vocabulary");
  Tensor out = Tensor::zeros({N, D});
  for (int64_t i = 0; i < N; ++i)
    std::copy_n(table.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * D,
                D, out.data() + i * D);
  if (want_grad(tp, {&table})) {
    Tensor tc = table, oc = out;
    std::vector<int> idc = ids;
    mark(tp, out, [tc, oc, idc, N, D]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      double* gt = tc.grad();
      for (int64_t i = 0; i < N; ++i) {
        double* dst = gt + static_cast<int64_t>(idc[static_cast<size_t>(i)]) * D;
        const double* src = go + i * D;
        for (int64_t j = 0; j < D; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

Tensor cross_entropy_label_smoothed(Tape* tp, const Tensor& log_probs,
                                    const std::vector<int>& targets,
                                    double eps) {
  if (log_probs.rank() != 2)
    throw std::invalid_argument("cross_entropy: expects [N, V] log-probs");
  const int64_t N = log_probs.dim(0), V = log_probs.dim(1);
  if (static_cast<int64_t>(targets.size()) != N)
    throw std::invalid_argument("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t < -1 || t >= V)
      throw std::invalid_argument("cross_entropy: target id out of range");
  Tensor out = Tensor::zeros({N});
  for (int64_t i = 0; i < N; ++i) {
    const int t = targets[static_cast<size_t>(i)];
    if (t < 0) continue;
    const double* row = log_probs.data() + i * V;
    double mean_nll = 0.0;
    for (int64_t v = 0; v < V; ++v) mean_nll -= row[v];
    mean_nll /= static_cast<double>(V);
    out.data()[i] = -(1.0 - eps) * row[t] + eps * mean_nll;
  }
  if (want_grad(tp, {&log_probs})) {
    Tensor lc = log_probs, oc = out;
    std::vector<int> tc = targets;
    mark(tp, out, [lc, oc, tc, N, V, eps]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      double* gl = lc.grad();
      for (int64_t i = 0; i < N; ++i) {
        const int t = tc[static_cast<size_t>(i)];
        if (t < 0 || go[i] == 0.0) continue;
        double* grow = gl + i * V;
        const double gu = go[i] * eps / static_cast<double>(V);
        for (int64_t v = 0; v < V; ++v) grow[v] -= gu;
        grow[t] -= go[i] * (1.0 - eps);
      }
    });
  }
  return out;
}

Tensor kl_bidirectional_rows(Tape* tp, const Tensor& logp, const Tensor& logq,
                             const std::vector<uint8_t>& include) {
  check_same_shape(logp, logq, "kl_bidirectional");
  if (logp.rank() != 2)
    throw std::invalid_argument("kl_bidirectional: expects [N, V]");
  const int64_t N = logp.dim(0), V = logp.dim(1);
  if (static_cast<int64_t>(include.size()) != N)
    throw std::invalid_argument("kl_bidirectional: include mask mismatch");
  Tensor out = Tensor::zeros({N});
  for (int64_t i = 0; i < N; ++i) {
    if (!include[static_cast<size_t>(i)]) continue;
    const double* lp = logp.data() + i * V;
    const double* lq = logq.data() + i * V;
    double s = 0.0;
    for (int64_t v = 0; v < V; ++v) {
      const double diff = lp[v] - lq[v];
      s += (std::exp(lp[v]) - std::exp(lq[v])) * diff;
    }
    out.data()[i] = 0.5 * s;
  }
  if (want_grad(tp, {&logp, &logq})) {
    Tensor pc = logp, qc = logq, oc = out;
    std::vector<uint8_t> inc = include;
    mark(tp, out, [pc, qc, oc, inc, N, V]() mutable {
      if (!oc.has_grad()) return;
      const double* go = oc.grad();
      for (int64_t i = 0; i < N; ++i) {
        if (!inc[static_cast<size_t>(i)] || go[i] == 0.0) continue;
        const double* lp = pc.data() + i * V;
        const double* lq = qc.data() + i * V;
        double* gp = pc.requires_grad() ? pc.grad() + i * V : nullptr;
        double* gq = qc.requires_grad() ? qc.grad() + i * V : nullptr;
        for (int64_t v = 0; v < V; ++v) {
          const double p = std::exp(lp[v]);
          const double q = std::exp(lq[v]);
          const double diff = lp[v] - lq[v];
          if (gp) gp[v] += go[i] * 0.5 * (p * diff + p - q);
          if (gq) gq[v] += go[i] * 0.5 * (-q * diff + q - p);
        }
      }
    });
  }
  return out;
}

Tensor kl_bidirectional(Tape* tp, const Tensor& logp, const Tensor& logq) {
  const int64_t V = logp.numel();
  Tensor rows = kl_bidirectional_rows(tp, logp.reshaped({1, V}),
                                      logq.reshaped({1, V}), {1});
  return sum_all(tp, rows);
}

double cosine_similarity_raw(const double* a, const double* b, int64_t d) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (int64_t i = 0; i < d; ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == 0.0 || bb == 0.0)
    throw std::invalid_argument("cosine_similarity: zero vector");
  double c = ab / (std::sqrt(aa) * std::sqrt(bb));
  return std::clamp(c, -1.0, 1.0);
}

Tensor cosine_similarity(Tape* tp, const Tensor& a, const Tensor& b) {
  if (a.numel() != b.numel())
    throw std::invalid_argument("cosine_similarity: extent mismatch");
  const int64_t d = a.numel();
  const double c = cosine_similarity_raw(a.data(), b.data(), d);
  Tensor out = Tensor::scalar(c);
  if (want_grad(tp, {&a, &b})) {
    Tensor ac = a, bc = b, oc = out;
    mark(tp, out, [ac, bc, oc, d, c]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0];
      double aa = 0.0, bb = 0.0;
      for (int64_t i = 0; i < d; ++i) {
        aa += ac.data()[i] * ac.data()[i];
        bb += bc.data()[i] * bc.data()[i];
      }
      const double na = std::sqrt(aa), nb = std::sqrt(bb);
      if (ac.requires_grad()) {
        double* ga = ac.grad();
        for (int64_t i = 0; i < d; ++i)
          ga[i] += g * (bc.data()[i] / (na * nb) - c * ac.data()[i] / aa);
      }
      if (bc.requires_grad()) {
        double* gb = bc.grad();
        for (int64_t i = 0; i < d; ++i)
          gb[i] += g * (ac.data()[i] / (na * nb) - c * bc.data()[i] / bb);
      }
    });
  }
  return out;
}

}  // namespace cress::ad
