#include "sra/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sra {

namespace {

constexpr double kNormGuard = 1e-24;  // added under the sqrt of squared norms

void require_untracked(const Tensor& t, const char* what) {
  if (t.tracked()) {
    throw std::invalid_argument(std::string(what) +
                                " must be untracked: teacher signals are constants");
  }
}

Tensor normalize_rank1(const Tensor& v) {
  Tensor norm = sqrt(add_const(sum(mul(v, v)), kNormGuard));
  return div(v, norm);
}

Tensor row(const Tensor& m, int i) {
  return reshape(slice(m, {i, 0}, {i + 1, m.dim(1)}), {m.dim(1)});
}

void check_matched_rows(const Tensor& a, const Tensor& b, size_t k, const char* what) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected (K, d) matrices");
  }
  if (a.dim(0) != b.dim(0) || static_cast<size_t>(a.dim(0)) != k) {
    throw std::invalid_argument(std::string(what) + ": row/weight counts disagree");
  }
}

// plain-double stable softmax of one row divided by tau
std::vector<double> plain_softmax(const double* z, int n, double tau) {
  std::vector<double> p(n);
  double mx = z[0] / tau;
  for (int v = 1; v < n; ++v) {
    mx = std::max(mx, z[v] / tau);
  }
  double total = 0.0;
  for (int v = 0; v < n; ++v) {
    p[v] = std::exp(z[v] / tau - mx);
    total += p[v];
  }
  for (int v = 0; v < n; ++v) {
    p[v] /= total;
  }
  return p;
}

}  // namespace

Tensor cosine_sim(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1 || v.rank() != 1 || u.dim(0) != v.dim(0)) {
    throw std::invalid_argument("cosine_sim: expected two equal-length vectors");
  }
  return sum(mul(normalize_rank1(u), normalize_rank1(v)));
}

Tensor cosine_loss(const Tensor& u, const Tensor& v) {
  return add_const(scale(cosine_sim(u, v), -1.0), 1.0);
}

Tensor span_cosine_loss(const Tensor& student_rows, const Tensor& teacher_rows,
                        const std::vector<double>& span_w) {
  check_matched_rows(student_rows, teacher_rows, span_w.size(), "span_cosine_loss");
  require_untracked(teacher_rows, "span_cosine_loss: teacher rows");
  Tensor acc = Tensor::scalar(0.0);
  for (size_t i = 0; i < span_w.size(); ++i) {
    Tensor li = cosine_loss(row(student_rows, static_cast<int>(i)),
                            row(teacher_rows, static_cast<int>(i)));
    acc = add(acc, scale(li, span_w[i]));
  }
  return acc;
}

std::vector<double> pair_weights(const std::vector<double>& span_w) {
  const size_t k = span_w.size();
  if (k < 2) {
    return {};
  }
  std::vector<double> out;
  out.reserve(k * (k - 1) / 2);
  double total = 0.0;
  for (size_t i = 0; i < k; ++i) {
    for (size_t j = i + 1; j < k; ++j) {
      out.push_back(span_w[i] * span_w[j]);
      total += out.back();
    }
  }
  if (total <= 0.0) {
    const double uniform = 1.0 / static_cast<double>(out.size());
    std::fill(out.begin(), out.end(), uniform);
    return out;
  }
  for (double& v : out) {
    v /= total;
  }
  return out;
}

Tensor geo_loss(const Tensor& student_rows, const Tensor& teacher_rows,
                const std::vector<double>& span_w) {
  check_matched_rows(student_rows, teacher_rows, span_w.size(), "geo_loss");
  require_untracked(teacher_rows, "geo_loss: teacher rows");
  const int k = static_cast<int>(span_w.size());
  if (k < 2) {
    return Tensor::scalar(0.0);
  }
  const std::vector<double> pw = pair_weights(span_w);

  // unit-normalized student rows once, so each pair costs only a dot product
  std::vector<Tensor> unit_s;
  unit_s.reserve(k);
  for (int i = 0; i < k; ++i) {
    unit_s.push_back(normalize_rank1(row(student_rows, i)));
  }
  // teacher similarities are plain numbers
  const int d = teacher_rows.dim(1);
  std::vector<std::vector<double>> tn(k, std::vector<double>(d));
  for (int i = 0; i < k; ++i) {
    double sq = 0.0;
    for (int c = 0; c < d; ++c) {
      tn[i][c] = teacher_rows[static_cast<int64_t>(i) * d + c];
      sq += tn[i][c] * tn[i][c];
    }
    const double norm = std::sqrt(sq + kNormGuard);
    for (int c = 0; c < d; ++c) {
      tn[i][c] /= norm;
    }
  }

  Tensor acc = Tensor::scalar(0.0);
  int pair = 0;
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j, ++pair) {
      double dt = 0.0;
      for (int c = 0; c < d; ++c) {
        dt += tn[i][c] * tn[j][c];
      }
      Tensor ds = sum(mul(unit_s[i], unit_s[j]));
      Tensor diff = add_const(ds, -dt);
      acc = add(acc, scale(mul(diff, diff), pw[pair]));
    }
  }
  return acc;
}

Tensor shared_selection_matrix(int vocab_size, const std::vector<int>& ids) {
  if (ids.empty()) {
    throw std::invalid_argument("shared_selection_matrix: empty id list");
  }
  Tensor sel = Tensor::zeros({vocab_size, static_cast<int>(ids.size())});
  std::vector<double>& data = sel.mutable_data();
  for (size_t col = 0; col < ids.size(); ++col) {
    if (ids[col] < 0 || ids[col] >= vocab_size) {
      throw std::invalid_argument("shared_selection_matrix: id out of range");
    }
    data[static_cast<int64_t>(ids[col]) * ids.size() + col] = 1.0;
  }
  return sel;
}

Tensor project_shared(const Tensor& logits, const Tensor& selection) {
  return matmul(logits, selection);
}

Tensor kd_span_loss(const Tensor& student_logits, const Tensor& teacher_logits, double tau,
                    bool scale_tau_sq) {
  if (tau <= 0.0) {
    throw std::invalid_argument("kd_span_loss: tau must be positive");
  }
  if (student_logits.rank() != 2 || teacher_logits.rank() != 2 ||
      student_logits.shape() != teacher_logits.shape()) {
    throw std::invalid_argument("kd_span_loss: logits must be matching (K, V) matrices");
  }
  require_untracked(teacher_logits, "kd_span_loss: teacher logits");
  const int k = student_logits.dim(0);
  const int v = student_logits.dim(1);

  // teacher distribution and its negative entropy, all plain arithmetic
  std::vector<double> pt(static_cast<size_t>(k) * v);
  double neg_entropy = 0.0;
  for (int i = 0; i < k; ++i) {
    std::vector<double> p = plain_softmax(teacher_logits.data().data() + static_cast<int64_t>(i) * v,
                                          v, tau);
    for (int c = 0; c < v; ++c) {
      pt[static_cast<int64_t>(i) * v + c] = p[c];
      if (p[c] > 0.0) {
        neg_entropy += p[c] * std::log(p[c]);
      }
    }
  }

  // sum_i KL_i = sum_i [ sum_v pt log pt - sum_v pt log ps ]
  //           = neg_entropy - (1/tau) sum(pt * z_s) + sum_i lse(z_s_i / tau)
  Tensor zs = scale(student_logits, 1.0 / tau);
  Tensor cross = sum(mul(zs, Tensor({k, v}, pt)));

  // log-sum-exp per row with a detached max shift (exact for any constant)
  std::vector<double> row_max(static_cast<size_t>(k) * v);
  std::vector<double> row_max_vec(k);
  for (int i = 0; i < k; ++i) {
    double mx = student_logits[static_cast<int64_t>(i) * v] / tau;
    for (int c = 1; c < v; ++c) {
      mx = std::max(mx, student_logits[static_cast<int64_t>(i) * v + c] / tau);
    }
    row_max_vec[i] = mx;
    for (int c = 0; c < v; ++c) {
      row_max[static_cast<int64_t>(i) * v + c] = mx;
    }
  }
  Tensor shifted = sub(zs, Tensor({k, v}, row_max));
  Tensor lse = add(log(sum_axis(exp(shifted), 1)), Tensor({k}, row_max_vec));

  Tensor out = add(add_const(sum(lse), neg_entropy), scale(cross, -1.0));
  if (scale_tau_sq) {
    out = scale(out, tau * tau);
  }
  return out;
}

Tensor ce_loss(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.rank() != 2) {
    throw std::invalid_argument("ce_loss: logits must be (S, vocab)");
  }
  const int s = logits.dim(0);
  const int v = logits.dim(1);
  if (static_cast<int>(targets.size()) != s) {
    throw std::invalid_argument("ce_loss: one target per position required");
  }
  int kept = 0;
  std::vector<double> onehot(static_cast<size_t>(s) * v, 0.0);
  std::vector<double> keep(s, 0.0);
  for (int i = 0; i < s; ++i) {
    if (targets[i] < 0) {
      continue;
    }
    if (targets[i] >= v) {
      throw std::invalid_argument("ce_loss: target id out of vocabulary");
    }
    onehot[static_cast<int64_t>(i) * v + targets[i]] = 1.0;
    keep[i] = 1.0;
    ++kept;
  }
  if (kept == 0) {
    throw std::invalid_argument("ce_loss: every position is ignored");
  }

  std::vector<double> row_max(static_cast<size_t>(s) * v);
  std::vector<double> row_max_vec(s);
  for (int i = 0; i < s; ++i) {
    double mx = logits[static_cast<int64_t>(i) * v];
    for (int c = 1; c < v; ++c) {
      mx = std::max(mx, logits[static_cast<int64_t>(i) * v + c]);
    }
    row_max_vec[i] = mx;
    for (int c = 0; c < v; ++c) {
      row_max[static_cast<int64_t>(i) * v + c] = mx;
    }
  }
  Tensor shifted = sub(logits, Tensor({s, v}, row_max));
  Tensor lse = add(log(sum_axis(exp(shifted), 1)), Tensor({s}, row_max_vec));
  Tensor kept_lse = sum(mul(lse, Tensor({s}, keep)));
  Tensor gathered = sum(mul(logits, Tensor({s, v}, onehot)));
  return scale(sub(kept_lse, gathered), 1.0 / kept);
}

Tensor overall_loss(const Tensor& ce, const Tensor& hs, const Tensor& kd, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) {
    throw std::invalid_argument("overall_loss: alpha must lie in [0, 1]");
  }
  return add(scale(ce, alpha), scale(add(hs, kd), 1.0 - alpha));
}

}  // namespace sra
