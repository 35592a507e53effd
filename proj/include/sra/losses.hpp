#pragma once

#include <vector>

#include "sra/tensor.hpp"

namespace sra {

// Cosine similarity of two vectors as a scalar tensor. Norms are guarded by
// a tiny additive epsilon under the square root, so degenerate (zero)
// vectors yield similarity 0 instead of NaN; for any vector of ordinary
// magnitude the guard is below double precision and changes nothing.
Tensor cosine_sim(const Tensor& u, const Tensor& v);

// 1 - cosine_sim(u, v): zero for parallel vectors, 2 for antiparallel.
Tensor cosine_loss(const Tensor& u, const Tensor& v);

// Weighted sum over matched rows of (1 - cosine similarity). `student_rows`
// is the projected student matrix (K, d), `teacher_rows` the teacher matrix
// (K, d) which must be untracked (teacher signals are never differentiated).
Tensor span_cosine_loss(const Tensor& student_rows, const Tensor& teacher_rows,
                        const std::vector<double>& span_w);

// Normalized products w_i * w_j over unordered pairs i < j, flattened in
// (i, j) lexicographic order. Sums to one. Returns an empty vector for
// fewer than two spans; falls back to uniform when every product vanishes.
std::vector<double> pair_weights(const std::vector<double>& span_w);

// Pairwise-geometry preservation: for every span pair, the squared gap
// between the student's and the teacher's cosine similarities, combined
// with pair_weights. Both inputs are raw (unprojected) span matrices;
// `teacher_rows` must be untracked. Zero when fewer than two spans exist.
Tensor geo_loss(const Tensor& student_rows, const Tensor& teacher_rows,
                const std::vector<double>& span_w);

// 0/1 matrix (vocab, |ids|) with a one at (ids[k], k): right-multiplying
// logits by it keeps exactly the chosen vocabulary columns, in order.
Tensor shared_selection_matrix(int vocab_size, const std::vector<int>& ids);

// (K, vocab) x selection -> (K, |ids|)
Tensor project_shared(const Tensor& logits, const Tensor& selection);

// Sum over rows of KL(teacher || student) after temperature-scaled softmax
// of both sides. The teacher rows must be untracked. With
// `scale_tau_sq`, the classic tau^2 correction multiplies the result.
Tensor kd_span_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau,
                    bool scale_tau_sq = false);

// Mean next-token cross-entropy over positions whose target is >= 0
// (targets of -1 are ignored). logits: (S, vocab); targets: length S.
Tensor ce_loss(const Tensor& logits, const std::vector<int>& targets);

// alpha * ce + (1 - alpha) * (hs + kd), alpha in [0, 1].
Tensor overall_loss(const Tensor& ce, const Tensor& hs, const Tensor& kd, double alpha);

}  // namespace sra
