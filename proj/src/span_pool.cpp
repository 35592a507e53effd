#include "sra/span_pool.hpp"

#include <cmath>
#include <stdexcept>

namespace sra {

Tensor token_weights(const Tensor& attn_final) {
  if (attn_final.rank() != 3 || attn_final.dim(1) != attn_final.dim(2)) {
    throw std::invalid_argument("token_weights: expected (heads, S, S) attention");
  }
  const int h = attn_final.dim(0);
  const int s = attn_final.dim(1);
  // attention received from the last position, summed over heads
  Tensor last_row = slice(attn_final, {0, s - 1, 0}, {h, s, s});  // (h, 1, s)
  Tensor summed = reshape(sum_axis(last_row, 0), {s});
  return div(summed, sum(summed));
}

Tensor span_com(const Tensor& hidden, const Tensor& weights, Span span, ComMode mode,
                int* fallback_count) {
  if (hidden.rank() != 2) {
    throw std::invalid_argument("span_com: hidden must be (S, d)");
  }
  const int s = hidden.dim(0);
  const int d = hidden.dim(1);
  if (weights.rank() != 1 || weights.dim(0) != s) {
    throw std::invalid_argument("span_com: weights must be (S) matching hidden");
  }
  if (span.start < 0 || span.end < span.start || span.end >= s) {
    throw std::invalid_argument("span_com: span outside the sequence");
  }
  const int len = span.end - span.start + 1;
  Tensor h_rows = slice(hidden, {span.start, 0}, {span.end + 1, d});          // (len, d)
  Tensor w_row = slice(reshape(weights, {1, s}), {0, span.start}, {1, span.end + 1});

  if (mode == ComMode::Com) {
    double mass = 0.0;
    for (int t = 0; t < len; ++t) {
      mass += w_row[t];
    }
    if (std::abs(mass) < 1e-300) {
      if (fallback_count != nullptr) {
        ++(*fallback_count);
      }
      return scale(reshape(sum_axis(h_rows, 0), {d}), 1.0 / len);
    }
  }

  Tensor pooled = reshape(matmul(w_row, h_rows), {d});  // sum_t w_t * H_t
  if (mode == ComMode::Raw) {
    return pooled;
  }
  return div(pooled, sum(w_row));
}

Tensor span_com_matrix(const Tensor& hidden, const Tensor& weights,
                       const std::vector<SpanPair>& spans, SpanSide side, ComMode mode,
                       int* fallback_count) {
  if (spans.empty()) {
    throw std::invalid_argument("span_com_matrix: no spans");
  }
  std::vector<Tensor> rows;
  rows.reserve(spans.size());
  for (const SpanPair& sp : spans) {
    const Span& span = side == SpanSide::Teacher ? sp.teacher : sp.student;
    rows.push_back(reshape(span_com(hidden, weights, span, mode, fallback_count),
                           {1, hidden.dim(1)}));
  }
  return concat(rows, 0);
}

std::vector<double> span_weights(const std::vector<double>& teacher_token_weights,
                                 const std::vector<SpanPair>& spans, double p) {
  if (spans.empty()) {
    throw std::invalid_argument("span_weights: no spans");
  }
  if (p < 0.0) {
    throw std::invalid_argument("span_weights: p must be >= 0");
  }
  const int n = static_cast<int>(teacher_token_weights.size());
  std::vector<double> masses;
  masses.reserve(spans.size());
  for (const SpanPair& sp : spans) {
    if (sp.teacher.start < 0 || sp.teacher.end >= n) {
      throw std::invalid_argument("span_weights: span outside the weight vector");
    }
    double m = 0.0;
    for (int t = sp.teacher.start; t <= sp.teacher.end; ++t) {
      if (teacher_token_weights[t] < 0.0) {
        throw std::invalid_argument("span_weights: negative token weight");
      }
      m += teacher_token_weights[t];
    }
    masses.push_back(m);
  }
  std::vector<double> out(masses.size());
  double total = 0.0;
  for (size_t k = 0; k < masses.size(); ++k) {
    out[k] = std::pow(masses[k], p);  // pow(x, 0) == 1, so p = 0 is exactly uniform
    total += out[k];
  }
  if (total <= 0.0) {
    const double uniform = 1.0 / static_cast<double>(out.size());
    for (double& v : out) {
      v = uniform;
    }
    return out;
  }
  for (double& v : out) {
    v /= total;
  }
  return out;
}

}  // namespace sra
