#pragma once

#include <vector>

#include "sra/span_align.hpp"
#include "sra/tensor.hpp"

namespace sra {

// How a span of weighted hidden states is reduced to one vector.
enum class ComMode {
  Raw,  // plain weighted sum over the span's tokens
  Com,  // weighted sum divided by the span's weight mass (center of mass)
};

enum class SpanSide { Teacher, Student };

// Per-token salience from the final layer's attention: the probability mass
// each token receives from the last position, summed over heads and
// normalized to sum to one over the sequence. Differentiable when the
// attention tensor is tracked.
//   attn_final: (heads, S, S) attention probabilities -> returns (S)
Tensor token_weights(const Tensor& attn_final);

// Pools hidden rows [span.start, span.end] into one d-vector using the given
// per-token weights. In Com mode a span whose weight mass underflows falls
// back to the unweighted mean of its rows; `fallback_count`, when provided,
// is incremented each time that happens.
Tensor span_com(const Tensor& hidden, const Tensor& weights, Span span, ComMode mode,
                int* fallback_count = nullptr);

// Stacks span_com over all spans (choosing each pair's teacher or student
// range) into a (num_spans, d) matrix.
Tensor span_com_matrix(const Tensor& hidden, const Tensor& weights,
                       const std::vector<SpanPair>& spans, SpanSide side, ComMode mode,
                       int* fallback_count = nullptr);

// Per-span importance: each span's teacher-side weight mass raised to the
// power `p`, normalized to sum to one. p = 0 gives the exact uniform
// distribution; larger p sharpens toward heavy spans. Plain arithmetic on
// the teacher side, never differentiated.
std::vector<double> span_weights(const std::vector<double>& teacher_token_weights,
                                 const std::vector<SpanPair>& spans, double p);

}  // namespace sra
