#pragma once

#include <cstdint>
#include <vector>

#include "ad/tensor.hpp"

namespace cress::ad {

// All operations compute values eagerly and, when `tp` is non-null and any
// input requires a gradient, record a backward closure on the tape. Passing
// tp = nullptr gives a plain forward evaluation.

Tensor add(Tape* tp, const Tensor& a, const Tensor& b);
Tensor sub(Tape* tp, const Tensor& a, const Tensor& b);
Tensor mul(Tape* tp, const Tensor& a, const Tensor& b);
Tensor scale(Tape* tp, const Tensor& a, double c);

// x: [N, C], bias: [C], broadcast over rows.
Tensor bias_add(Tape* tp, const Tensor& x, const Tensor& bias);

// a: [m, k], b: [k, n] -> [m, n]. Inner extents must agree.
Tensor matmul(Tape* tp, const Tensor& a, const Tensor& b);

Tensor relu(Tape* tp, const Tensor& x);

Tensor sum_all(Tape* tp, const Tensor& x);

// x: [N] -> scalar sum of w[i] * x[i]; the weights are constants.
Tensor weighted_sum(Tape* tp, const Tensor& x, const std::vector<double>& w);

Tensor softmax(Tape* tp, const Tensor& x, int axis);
Tensor log_softmax(Tape* tp, const Tensor& x, int axis);

// Normalizes the last axis. gain/bias: [d].
Tensor layer_norm(Tape* tp, const Tensor& x, const Tensor& gain,
                  const Tensor& bias, double eps = 1e-5);

// Inverted dropout with an explicit seed, so runs are bit-reproducible.
// rate = 0 returns x unchanged.
Tensor dropout(Tape* tp, const Tensor& x, double rate, uint64_t seed);

// q: [B, Tq, D], k/v: [B, Tk, D], mask: [B, Tq, Tk] with 1 = may attend.
// Scores are scaled by 1/sqrt(D/heads); masked positions get -inf before the
// softmax. A query row with no unmasked key is rejected.
Tensor scaled_dot_attention(Tape* tp, const Tensor& q, const Tensor& k,
                            const Tensor& v, int heads,
                            const std::vector<uint8_t>& mask);

// Single-sequence convenience wrapper: q [Tq, D], k/v [Tk, D], mask [Tq*Tk].
Tensor scaled_dot_attention_single(Tape* tp, const Tensor& q, const Tensor& k,
                                   const Tensor& v, int heads,
                                   const std::vector<uint8_t>& mask);

// x: [B, T, Cin], w: [Cout, Cin, K], b: [Cout] -> [B, T', Cout]
// with T' = floor((T + 2*pad - K) / stride) + 1, zero padding.
Tensor conv1d(Tape* tp, const Tensor& x, const Tensor& w, const Tensor& b,
              int stride, int pad);
int64_t conv1d_out_len(int64_t len, int kernel, int stride, int pad);

// table: [V, D], ids: [N] -> [N, D]; backward scatter-adds into the table.
Tensor embedding(Tape* tp, const Tensor& table, const std::vector<int>& ids);

// log_probs: [N, V]; targets[i] in [0, V) or -1 to exclude the position
// (excluded rows contribute loss 0 and no gradient). Per-position loss:
//   (1-eps) * nll(target) + eps * mean_v nll(v).
Tensor cross_entropy_label_smoothed(Tape* tp, const Tensor& log_probs,
                                    const std::vector<int>& targets,
                                    double eps);

// logp/logq: [N, V] log-distributions; include[i] = 0 excludes a row.
// Per-row 0.5 * (KL(p||q) + KL(q||p)); gradients flow to both sides.
Tensor kl_bidirectional_rows(Tape* tp, const Tensor& logp, const Tensor& logq,
                             const std::vector<uint8_t>& include);

// Vector form of the bidirectional KL: logp/logq [V] -> scalar.
Tensor kl_bidirectional(Tape* tp, const Tensor& logp, const Tensor& logq);

// a, b: [d] nonzero vectors -> scalar in [-1, 1]. Zero vectors are rejected.
Tensor cosine_similarity(Tape* tp, const Tensor& a, const Tensor& b);
double cosine_similarity_raw(const double* a, const double* b, int64_t d);

}  // namespace cress::ad
