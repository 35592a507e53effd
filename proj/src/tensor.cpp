#include "sra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace sra {

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    os << shape[i] << (i + 1 < shape.size() ? "," : "");
  }
  os << ")";
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (int d : shape) {
    if (d <= 0) {
      throw std::invalid_argument("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }
}

void check_all_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw std::runtime_error(std::string(op) + ": non-finite result");
    }
  }
}

Tape* common_tape(std::initializer_list<const Tensor*> ts) {
  Tape* tape = nullptr;
  for (const Tensor* t : ts) {
    if (t->tracked()) {
      if (tape == nullptr) {
        tape = t->tape();
      } else if (tape != t->tape()) {
        throw std::invalid_argument("operands belong to different tapes");
      }
    }
  }
  return tape;
}

std::vector<int> row_strides(const Shape& shape) {
  std::vector<int> strides(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) {
    strides[i] = strides[i + 1] * shape[i + 1];
  }
  return strides;
}

// C[m,n] += A[m,k] * B[k,n]
void mm_accum(double* c, const double* a, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    double* crow = c + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) {
        continue;
      }
      const double* brow = b + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) {
        crow[j] += av * brow[j];
      }
    }
  }
}

// dA[m,k] += G[m,n] * B^T  (B is [k,n])
void mm_accum_gbt(double* da, const double* g, const double* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* grow = g + static_cast<int64_t>(i) * n;
    double* darow = da + static_cast<int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double* brow = b + static_cast<int64_t>(kk) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) {
        acc += grow[j] * brow[j];
      }
      darow[kk] += acc;
    }
  }
}

// dB[k,n] += A^T * G  (A is [m,k], G is [m,n])
void mm_accum_atg(double* db, const double* a, const double* g, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const double* arow = a + static_cast<int64_t>(i) * k;
    const double* grow = g + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      if (av == 0.0) {
        continue;
      }
      double* dbrow = db + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) {
        dbrow[j] += av * grow[j];
      }
    }
  }
}

enum class Broadcast { None, Left, Right };  // which operand is the smaller one

// Elementwise binary ops accept equal shapes, a size-1 operand, or a smaller
// operand whose shape is a trailing suffix of the larger one (row-major, so
// the smaller buffer repeats with period size(small)).
Broadcast resolve_broadcast(const Shape& a, const Shape& b) {
  if (a == b) {
    return Broadcast::None;
  }
  const int64_t na = numel(a), nb = numel(b);
  auto is_suffix = [](const Shape& small, const Shape& big) {
    if (small.size() > big.size()) {
      return false;
    }
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (nb == 1 || (nb < na && is_suffix(b, a))) {
    return Broadcast::Right;
  }
  if (na == 1 || (na < nb && is_suffix(a, b))) {
    return Broadcast::Left;
  }
  throw std::invalid_argument("shape mismatch: " + shape_str(a) + " vs " + shape_str(b));
}

using ParentGrads = const std::vector<std::vector<double>*>&;

void accum_equal(std::vector<double>& gin, const std::vector<double>& gout) {
  for (size_t i = 0; i < gout.size(); ++i) {
    gin[i] += gout[i];
  }
}

void accum_mod(std::vector<double>& gin, const std::vector<double>& gout) {
  const size_t period = gin.size();
  for (size_t i = 0; i < gout.size(); ++i) {
    gin[i % period] += gout[i];
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)) {
  validate_shape(shape_);
  if (numel(shape_) != static_cast<int64_t>(data.size())) {
    throw std::invalid_argument("data length " + std::to_string(data.size()) +
                                " does not match shape " + shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(data));
}

Tensor Tensor::zeros(const Shape& shape) {
  return Tensor(shape, std::vector<double>(numel(shape), 0.0));
}

Tensor Tensor::full(const Shape& shape, double value) {
  return Tensor(shape, std::vector<double>(numel(shape), value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng, double stddev) {
  std::vector<double> data(numel(shape));
  for (double& x : data) {
    x = rng.normal(0.0, stddev);
  }
  return Tensor(shape, std::move(data));
}

int Tensor::dim(int axis) const {
  if (axis < 0) {
    axis += rank();
  }
  if (axis < 0 || axis >= rank()) {
    throw std::invalid_argument("axis out of range for shape " + shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::value() const {
  if (size() != 1) {
    throw std::invalid_argument("value() requires a scalar, got shape " + shape_str(shape_));
  }
  return (*data_)[0];
}

Tensor Tensor::detached() const {
  Tensor t = *this;
  t.tape_ = nullptr;
  t.node_ = -1;
  return t;
}

const Tensor& GradientMap::at(const std::string& name) const {
  auto it = grads.find(name);
  if (it == grads.end()) {
    throw std::invalid_argument("no gradient entry for parameter '" + name + "'");
  }
  return it->second;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tensor Tape::leaf(const Tensor& param, const std::string& name) {
  if (!param.defined()) {
    throw std::invalid_argument("leaf: undefined tensor for '" + name + "'");
  }
  auto it = leaves_.find(name);
  if (it != leaves_.end()) {
    if (it->second.data != param.data_) {
      throw std::invalid_argument("leaf: name '" + name + "' already bound to another buffer");
    }
    Tensor t = param;
    t.tape_ = this;
    t.node_ = it->second.node;
    return t;
  }
  Tensor t = param;
  nodes_.push_back(Node{param.size(), {}, nullptr});
  t.tape_ = this;
  t.node_ = static_cast<int>(nodes_.size()) - 1;
  leaves_.emplace(name, Leaf{t.node_, param.data_, param.shape()});
  return t;
}

void Tape::attach(Tensor& out, std::vector<int> parents, BackwardFn fn) {
  nodes_.push_back(Node{out.size(), std::move(parents), std::move(fn)});
  out.tape_ = this;
  out.node_ = static_cast<int>(nodes_.size()) - 1;
}

GradientMap Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward: loss must be a scalar");
  }
  std::vector<std::vector<double>> grads(nodes_.size());
  std::vector<char> reached(nodes_.size(), 0);

  if (loss.tracked()) {
    if (loss.tape() != this) {
      throw std::invalid_argument("backward: loss was recorded on a different tape");
    }
    const int root = loss.node();
    reached[root] = 1;
    for (int i = root; i >= 0; --i) {
      if (!reached[i]) {
        continue;
      }
      for (int p : nodes_[i].parents) {
        reached[p] = 1;
      }
    }
    for (size_t i = 0; i < nodes_.size(); ++i) {
      if (reached[i]) {
        grads[i].assign(nodes_[i].size, 0.0);
      }
    }
    grads[root][0] = 1.0;
    for (int i = root; i >= 0; --i) {
      if (!reached[i] || !nodes_[i].backward) {
        continue;
      }
      std::vector<std::vector<double>*> parent_grads;
      parent_grads.reserve(nodes_[i].parents.size());
      for (int p : nodes_[i].parents) {
        parent_grads.push_back(&grads[p]);
      }
      nodes_[i].backward(grads[i], parent_grads);
    }
  }

  GradientMap out;
  for (const auto& [name, leaf] : leaves_) {
    if (loss.tracked() && !grads[leaf.node].empty()) {
      out.grads.emplace(name, Tensor(leaf.shape, std::move(grads[leaf.node])));
    } else {
      out.grads.emplace(name, Tensor::zeros(leaf.shape));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, Fwd fwd, BwdA bwd_a, BwdB bwd_b) {
  const Broadcast bc = resolve_broadcast(a.shape(), b.shape());
  const Tensor& big = (bc == Broadcast::Left) ? b : a;
  const int64_t n = big.size();
  const int64_t period_a = a.size();
  const int64_t period_b = b.size();

  std::vector<double> out(n);
  const auto& da = a.data();
  const auto& db = b.data();
  for (int64_t i = 0; i < n; ++i) {
    out[i] = fwd(da[i % period_a], db[i % period_b]);
  }

  Tensor result(big.shape(), std::move(out));
  Tape* tape = common_tape({&a, &b});
  if (tape == nullptr) {
    return result;
  }
  const bool ta = a.tracked(), tb = b.tracked();
  std::vector<int> parents;
  if (ta) {
    parents.push_back(a.node());
  }
  if (tb) {
    parents.push_back(b.node());
  }
  auto pa = a.buffer(), pb = b.buffer();
  tape->attach(result, std::move(parents),
               [ta, tb, pa, pb, period_a, period_b, bwd_a, bwd_b](
                   const std::vector<double>& gout, ParentGrads pg) {
                 int slot = 0;
                 if (ta) {
                   std::vector<double>& gin = *pg[slot++];
                   for (size_t i = 0; i < gout.size(); ++i) {
                     gin[i % period_a] += bwd_a(gout[i], (*pa)[i % period_a], (*pb)[i % period_b]);
                   }
                 }
                 if (tb) {
                   std::vector<double>& gin = *pg[slot++];
                   for (size_t i = 0; i < gout.size(); ++i) {
                     gin[i % period_b] += bwd_b(gout[i], (*pa)[i % period_a], (*pb)[i % period_b]);
                   }
                 }
               });
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

Tensor div(const Tensor& a, const Tensor& b) { return mul(a, power(b, -1.0)); }

Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (int64_t i = 0; i < a.size(); ++i) {
    out[i] = da[i] * c;
  }
  Tensor result(a.shape(), std::move(out));
  if (!a.tracked()) {
    return result;
  }
  a.tape()->attach(result, {a.node()}, [c](const std::vector<double>& gout, ParentGrads pg) {
    std::vector<double>& gin = *pg[0];
    for (size_t i = 0; i < gout.size(); ++i) {
      gin[i] += c * gout[i];
    }
  });
  return result;
}

Tensor add_const(const Tensor& a, double c) {
  std::vector<double> out(a.size());
  const auto& da = a.data();
  for (int64_t i = 0; i < a.size(); ++i) {
    out[i] = da[i] + c;
  }
  Tensor result(a.shape(), std::move(out));
  if (!a.tracked()) {
    return result;
  }
  a.tape()->attach(result, {a.node()}, [](const std::vector<double>& gout, ParentGrads pg) {
    accum_equal(*pg[0], gout);
  });
  return result;
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2 || a.rank() != b.rank()) {
    throw std::invalid_argument("matmul: ranks must match and be >= 2, got " +
                                shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int r = a.rank();
  for (int i = 0; i < r - 2; ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw std::invalid_argument("matmul: batch dims differ: " + shape_str(a.shape()) + " x " +
                                  shape_str(b.shape()));
    }
  }
  const int m = a.shape()[r - 2];
  const int k = a.shape()[r - 1];
  const int k2 = b.shape()[r - 2];
  const int n = b.shape()[r - 1];
  if (k != k2) {
    throw std::invalid_argument("matmul: inner dims differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  }
  int64_t batches = 1;
  for (int i = 0; i < r - 2; ++i) {
    batches *= a.shape()[i];
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);

  std::vector<double> out(batches * m * n, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t bi = 0; bi < batches; ++bi) {
    mm_accum(out.data() + bi * m * n, pa + bi * m * k, pb + bi * k * n, m, k, n);
  }

  Tensor result(out_shape, std::move(out));
  Tape* tape = common_tape({&a, &b});
  if (tape == nullptr) {
    return result;
  }
  const bool ta = a.tracked(), tb = b.tracked();
  std::vector<int> parents;
  if (ta) {
    parents.push_back(a.node());
  }
  if (tb) {
    parents.push_back(b.node());
  }
  auto da = a.buffer(), db = b.buffer();
  tape->attach(result, std::move(parents),
               [ta, tb, da, db, batches, m, k, n](const std::vector<double>& gout, ParentGrads pg) {
                 int slot = 0;
                 if (ta) {
                   std::vector<double>& gin = *pg[slot++];
                   for (int64_t bi = 0; bi < batches; ++bi) {
                     mm_accum_gbt(gin.data() + bi * m * k, gout.data() + bi * m * n,
                                  db->data() + bi * k * n, m, k, n);
                   }
                 }
                 if (tb) {
                   std::vector<double>& gin = *pg[slot++];
                   for (int64_t bi = 0; bi < batches; ++bi) {
                     mm_accum_atg(gin.data() + bi * k * n, da->data() + bi * m * k,
                                  gout.data() + bi * m * n, m, k, n);
                   }
                 }
               });
  return result;
}

// ---------------------------------------------------------------------------
// Row-wise ops
// ---------------------------------------------------------------------------

Tensor softmax_lastdim(const Tensor& x) {
  if (x.rank() < 1) {
    throw std::invalid_argument("softmax_lastdim: rank must be >= 1");
  }
  const int kdim = x.shape().back();
  const int64_t rows = x.size() / kdim;
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = dx.data() + r * kdim;
    double* orow = out.data() + r * kdim;
    double mx = row[0];
    for (int j = 1; j < kdim; ++j) {
      mx = std::max(mx, row[j]);
    }
    double s = 0.0;
    for (int j = 0; j < kdim; ++j) {
      orow[j] = std::exp(row[j] - mx);
      s += orow[j];
    }
    for (int j = 0; j < kdim; ++j) {
      orow[j] /= s;
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (!x.tracked()) {
    return result;
  }
  auto py = result.buffer();
  x.tape()->attach(result, {x.node()},
                   [py, rows, kdim](const std::vector<double>& gout, ParentGrads pg) {
                     std::vector<double>& gin = *pg[0];
                     for (int64_t r = 0; r < rows; ++r) {
                       const double* y = py->data() + r * kdim;
                       const double* g = gout.data() + r * kdim;
                       double dot = 0.0;
                       for (int j = 0; j < kdim; ++j) {
                         dot += g[j] * y[j];
                       }
                       for (int j = 0; j < kdim; ++j) {
                         gin[r * kdim + j] += y[j] * (g[j] - dot);
                       }
                     }
                   });
  return result;
}

Tensor layernorm_lastdim(const Tensor& x, double eps) {
  if (x.rank() < 1) {
    throw std::invalid_argument("layernorm_lastdim: rank must be >= 1");
  }
  const int kdim = x.shape().back();
  const int64_t rows = x.size() / kdim;
  std::vector<double> out(x.size());
  std::vector<double> inv_std(rows);
  const auto& dx = x.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = dx.data() + r * kdim;
    double* orow = out.data() + r * kdim;
    double mean_v = 0.0;
    for (int j = 0; j < kdim; ++j) {
      mean_v += row[j];
    }
    mean_v /= kdim;
    double var = 0.0;
    for (int j = 0; j < kdim; ++j) {
      const double c = row[j] - mean_v;
      var += c * c;
    }
    var /= kdim;
    const double s = 1.0 / std::sqrt(var + eps);
    inv_std[r] = s;
    for (int j = 0; j < kdim; ++j) {
      orow[j] = (row[j] - mean_v) * s;
    }
  }
  Tensor result(x.shape(), std::move(out));
  if (!x.tracked()) {
    return result;
  }
  auto py = result.buffer();
  auto pinv = std::make_shared<std::vector<double>>(std::move(inv_std));
  x.tape()->attach(result, {x.node()},
                   [py, pinv, rows, kdim](const std::vector<double>& gout, ParentGrads pg) {
                     std::vector<double>& gin = *pg[0];
                     for (int64_t r = 0; r < rows; ++r) {
                       const double* y = py->data() + r * kdim;
                       const double* g = gout.data() + r * kdim;
                       double gmean = 0.0, gymean = 0.0;
                       for (int j = 0; j < kdim; ++j) {
                         gmean += g[j];
                         gymean += g[j] * y[j];
                       }
                       gmean /= kdim;
                       gymean /= kdim;
                       const double s = (*pinv)[r];
                       for (int j = 0; j < kdim; ++j) {
                         gin[r * kdim + j] += s * (g[j] - gmean - y[j] * gymean);
                       }
                     }
                   });
  return result;
}

// ---------------------------------------------------------------------------
// Layout ops
// ---------------------------------------------------------------------------

namespace {

std::vector<double> permute_raw(const std::vector<double>& in, const Shape& shape,
                                const std::vector<int>& axes) {
  const int r = static_cast<int>(shape.size());
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = shape[axes[i]];
  }
  const auto in_strides = row_strides(shape);
  std::vector<double> out(in.size());
  std::vector<int> idx(r, 0);
  for (int64_t o = 0; o < static_cast<int64_t>(in.size()); ++o) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i) {
      src += static_cast<int64_t>(idx[i]) * in_strides[axes[i]];
    }
    out[o] = in[src];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) {
        break;
      }
      idx[i] = 0;
    }
  }
  return out;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  if (static_cast<int>(axes.size()) != r) {
    throw std::invalid_argument("permute: axes length must equal rank");
  }
  std::vector<char> seen(r, 0);
  for (int a : axes) {
    if (a < 0 || a >= r || seen[a]) {
      throw std::invalid_argument("permute: invalid axes");
    }
    seen[a] = 1;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[axes[i]];
  }
  Tensor result(out_shape, permute_raw(x.data(), x.shape(), axes));
  if (!x.tracked()) {
    return result;
  }
  std::vector<int> inverse(r);
  for (int i = 0; i < r; ++i) {
    inverse[axes[i]] = i;
  }
  Shape oshape = out_shape;
  x.tape()->attach(result, {x.node()},
                   [inverse, oshape](const std::vector<double>& gout, ParentGrads pg) {
                     std::vector<double> gperm = permute_raw(gout, oshape, inverse);
                     accum_equal(*pg[0], gperm);
                   });
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) {
    throw std::invalid_argument("transpose: rank must be >= 2");
  }
  std::vector<int> axes(x.rank());
  for (int i = 0; i < x.rank(); ++i) {
    axes[i] = i;
  }
  std::swap(axes[x.rank() - 2], axes[x.rank() - 1]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, const Shape& shape) {
  validate_shape(shape);
  if (numel(shape) != x.size()) {
    throw std::invalid_argument("reshape: cannot reshape " + shape_str(x.shape()) + " to " +
                                shape_str(shape));
  }
  Tensor result(shape, x.data());  // copies the buffer
  if (!x.tracked()) {
    return result;
  }
  x.tape()->attach(result, {x.node()}, [](const std::vector<double>& gout, ParentGrads pg) {
    accum_equal(*pg[0], gout);
  });
  return result;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) {
    throw std::invalid_argument("concat: no inputs");
  }
  const int r = xs[0].rank();
  if (axis < 0) {
    axis += r;
  }
  if (axis < 0 || axis >= r) {
    throw std::invalid_argument("concat: axis out of range");
  }
  int axis_total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != r) {
      throw std::invalid_argument("concat: ranks differ");
    }
    for (int i = 0; i < r; ++i) {
      if (i != axis && t.shape()[i] != xs[0].shape()[i]) {
        throw std::invalid_argument("concat: shapes differ off-axis: " + shape_str(t.shape()) +
                                    " vs " + shape_str(xs[0].shape()));
      }
    }
    axis_total += t.shape()[axis];
  }
  Shape out_shape = xs[0].shape();
  out_shape[axis] = axis_total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) {
    outer *= out_shape[i];
  }
  for (int i = axis + 1; i < r; ++i) {
    inner *= out_shape[i];
  }
  std::vector<double> out(numel(out_shape));
  std::vector<int64_t> chunk(xs.size());
  for (size_t t = 0; t < xs.size(); ++t) {
    chunk[t] = static_cast<int64_t>(xs[t].shape()[axis]) * inner;
  }
  const int64_t out_row = static_cast<int64_t>(axis_total) * inner;
  for (int64_t o = 0; o < outer; ++o) {
    int64_t off = o * out_row;
    for (size_t t = 0; t < xs.size(); ++t) {
      const double* src = xs[t].data().data() + o * chunk[t];
      std::copy(src, src + chunk[t], out.begin() + off);
      off += chunk[t];
    }
  }

  Tensor result(out_shape, std::move(out));
  Tape* tape = nullptr;
  for (const Tensor& t : xs) {
    if (t.tracked()) {
      if (tape && tape != t.tape()) {
        throw std::invalid_argument("concat: operands belong to different tapes");
      }
      tape = t.tape();
    }
  }
  if (tape == nullptr) {
    return result;
  }
  std::vector<int> parents;
  std::vector<char> tracked(xs.size());
  for (size_t t = 0; t < xs.size(); ++t) {
    tracked[t] = xs[t].tracked();
    if (tracked[t]) {
      parents.push_back(xs[t].node());
    }
  }
  tape->attach(result, std::move(parents),
               [tracked, chunk, outer, out_row](const std::vector<double>& gout, ParentGrads pg) {
                 for (int64_t o = 0; o < outer; ++o) {
                   int64_t off = o * out_row;
                   int slot = 0;
                   for (size_t t = 0; t < tracked.size(); ++t) {
                     if (tracked[t]) {
                       std::vector<double>& gin = *pg[slot++];
                       for (int64_t i = 0; i < chunk[t]; ++i) {
                         gin[o * chunk[t] + i] += gout[off + i];
                       }
                     }
                     off += chunk[t];
                   }
                 }
               });
  return result;
}

Tensor slice(const Tensor& x, const std::vector<int>& start, const std::vector<int>& stop) {
  const int r = x.rank();
  if (static_cast<int>(start.size()) != r || static_cast<int>(stop.size()) != r) {
    throw std::invalid_argument("slice: start/stop must have one entry per axis");
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    if (start[i] < 0 || stop[i] > x.shape()[i] || start[i] >= stop[i]) {
      throw std::invalid_argument("slice: invalid range on axis " + std::to_string(i) + " for " +
                                  shape_str(x.shape()));
    }
    out_shape[i] = stop[i] - start[i];
  }
  const auto strides = row_strides(x.shape());
  std::vector<double> out(numel(out_shape));
  std::vector<int> idx(r, 0);
  const auto& dx = x.data();
  for (int64_t o = 0; o < static_cast<int64_t>(out.size()); ++o) {
    int64_t src = 0;
    for (int i = 0; i < r; ++i) {
      src += static_cast<int64_t>(start[i] + idx[i]) * strides[i];
    }
    out[o] = dx[src];
    for (int i = r - 1; i >= 0; --i) {
      if (++idx[i] < out_shape[i]) {
        break;
      }
      idx[i] = 0;
    }
  }
  Tensor result(out_shape, std::move(out));
  if (!x.tracked()) {
    return result;
  }
  std::vector<int> st = start;
  Shape oshape = out_shape;
  std::vector<int> strides_copy = strides;
  x.tape()->attach(result, {x.node()},
                   [st, oshape, strides_copy](const std::vector<double>& gout, ParentGrads pg) {
                     std::vector<double>& gin = *pg[0];
                     const int r = static_cast<int>(oshape.size());
                     std::vector<int> idx(r, 0);
                     for (int64_t o = 0; o < static_cast<int64_t>(gout.size()); ++o) {
                       int64_t dst = 0;
                       for (int i = 0; i < r; ++i) {
                         dst += static_cast<int64_t>(st[i] + idx[i]) * strides_copy[i];
                       }
                       gin[dst] += gout[o];
                       for (int i = r - 1; i >= 0; --i) {
                         if (++idx[i] < oshape[i]) {
                           break;
                         }
                         idx[i] = 0;
                       }
                     }
                   });
  return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) {
    s += v;
  }
  Tensor result = Tensor::scalar(s);
  if (!x.tracked()) {
    return result;
  }
  x.tape()->attach(result, {x.node()}, [](const std::vector<double>& gout, ParentGrads pg) {
    std::vector<double>& gin = *pg[0];
    for (double& g : gin) {
      g += gout[0];
    }
  });
  return result;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.size())); }

Tensor sum_axis(const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) {
    axis += r;
  }
  if (axis < 0 || axis >= r) {
    throw std::invalid_argument("sum_axis: axis out of range");
  }
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) {
    outer *= x.shape()[i];
  }
  for (int i = axis + 1; i < r; ++i) {
    inner *= x.shape()[i];
  }
  const int kdim = x.shape()[axis];
  Shape out_shape;
  for (int i = 0; i < r; ++i) {
    if (i != axis) {
      out_shape.push_back(x.shape()[i]);
    }
  }
  std::vector<double> out(outer * inner, 0.0);
  const auto& dx = x.data();
  for (int64_t o = 0; o < outer; ++o) {
    for (int k = 0; k < kdim; ++k) {
      const double* src = dx.data() + (o * kdim + k) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) {
        dst[i] += src[i];
      }
    }
  }
  Tensor result(out_shape, std::move(out));
  if (!x.tracked()) {
    return result;
  }
  x.tape()->attach(result, {x.node()},
                   [outer, inner, kdim](const std::vector<double>& gout, ParentGrads pg) {
                     std::vector<double>& gin = *pg[0];
                     for (int64_t o = 0; o < outer; ++o) {
                       for (int k = 0; k < kdim; ++k) {
                         double* dst = gin.data() + (o * kdim + k) * inner;
                         const double* src = gout.data() + o * inner;
                         for (int64_t i = 0; i < inner; ++i) {
                           dst[i] += src[i];
                         }
                       }
                     }
                   });
  return result;
}

// ---------------------------------------------------------------------------
// Pointwise nonlinearities
// ---------------------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd, bool finite_check) {
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    out[i] = fwd(dx[i]);
  }
  if (finite_check) {
    check_all_finite(out, name);
  }
  Tensor result(x.shape(), std::move(out));
  if (!x.tracked()) {
    return result;
  }
  auto px = x.buffer();
  auto py = result.buffer();
  x.tape()->attach(result, {x.node()},
                   [px, py, bwd](const std::vector<double>& gout, ParentGrads pg) {
                     std::vector<double>& gin = *pg[0];
                     for (size_t i = 0; i < gout.size(); ++i) {
                       gin[i] += gout[i] * bwd((*px)[i], (*py)[i]);
                     }
                   });
  return result;
}

}  // namespace

Tensor power(const Tensor& x, double exponent) {
  const bool integral = exponent == std::floor(exponent);
  for (double v : x.data()) {
    if (!integral && v <= 0.0) {
      throw std::invalid_argument("power: non-integer exponent requires positive base");
    }
    if (integral && exponent < 0.0 && v == 0.0) {
      throw std::invalid_argument("power: negative exponent requires nonzero base");
    }
  }
  const double p = exponent;
  return unary_op(
      x, "power", [p](double v) { return std::pow(v, p); },
      [p](double v, double) { return p == 0.0 ? 0.0 : p * std::pow(v, p - 1.0); }, true);
}

Tensor sqrt(const Tensor& x) {
  for (double v : x.data()) {
    if (v < 0.0) {
      throw std::invalid_argument("sqrt: negative input");
    }
  }
  return unary_op(
      x, "sqrt", [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; }, false);
}

Tensor exp(const Tensor& x) {
  return unary_op(
      x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; }, true);
}

Tensor log(const Tensor& x) {
  for (double v : x.data()) {
    if (v <= 0.0) {
      throw std::invalid_argument("log: non-positive input");
    }
  }
  return unary_op(
      x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; },
      false);
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) {
          return 1.0 / (1.0 + std::exp(-v));
        }
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); }, false);
}

Tensor silu(const Tensor& x) { return mul(x, sigmoid(x)); }

// ---------------------------------------------------------------------------
// Indexing ops
// ---------------------------------------------------------------------------

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) {
    throw std::invalid_argument("embedding_lookup: table must be rank 2");
  }
  const int vocab = table.shape()[0];
  const int width = table.shape()[1];
  if (ids.empty()) {
    throw std::invalid_argument("embedding_lookup: empty id list");
  }
  for (int id : ids) {
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("embedding_lookup: id " + std::to_string(id) +
                                  " out of range [0," + std::to_string(vocab) + ")");
    }
  }
  std::vector<double> out(ids.size() * width);
  const auto& dt = table.data();
  for (size_t i = 0; i < ids.size(); ++i) {
    std::copy(dt.begin() + static_cast<int64_t>(ids[i]) * width,
              dt.begin() + static_cast<int64_t>(ids[i] + 1) * width,
              out.begin() + static_cast<int64_t>(i) * width);
  }
  Tensor result(Shape{static_cast<int>(ids.size()), width}, std::move(out));
  if (!table.tracked()) {
    return result;
  }
  std::vector<int> ids_copy = ids;
  table.tape()->attach(result, {table.node()},
                       [ids_copy, width](const std::vector<double>& gout, ParentGrads pg) {
                         std::vector<double>& gin = *pg[0];
                         for (size_t i = 0; i < ids_copy.size(); ++i) {
                           const double* src = gout.data() + static_cast<int64_t>(i) * width;
                           double* dst = gin.data() + static_cast<int64_t>(ids_copy[i]) * width;
                           for (int j = 0; j < width; ++j) {
                             dst[j] += src[j];
                           }
                         }
                       });
  return result;
}

Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
  if (mask.tracked()) {
    throw std::invalid_argument("masked_fill: mask must be untracked");
  }
  if (mask.shape() != x.shape()) {
    throw std::invalid_argument("masked_fill: mask shape " + shape_str(mask.shape()) +
                                " does not match " + shape_str(x.shape()));
  }
  std::vector<double> out(x.size());
  const auto& dx = x.data();
  const auto& dm = mask.data();
  for (int64_t i = 0; i < x.size(); ++i) {
    out[i] = dm[i] != 0.0 ? dx[i] + value : dx[i];
  }
  Tensor result(x.shape(), std::move(out));
  if (!x.tracked()) {
    return result;
  }
  x.tape()->attach(result, {x.node()}, [](const std::vector<double>& gout, ParentGrads pg) {
    accum_equal(*pg[0], gout);
  });
  return result;
}

// ---------------------------------------------------------------------------
// Dynamic dispatch
// ---------------------------------------------------------------------------

Tensor apply(const std::string& op_name, const std::vector<Tensor>& inputs, const OpAttrs& attrs) {
  auto want = [&](size_t n) {
    if (inputs.size() != n) {
      throw std::invalid_argument("apply(" + op_name + "): expected " + std::to_string(n) +
                                  " inputs, got " + std::to_string(inputs.size()));
    }
  };
  if (op_name == "add") {
    want(2);
    return add(inputs[0], inputs[1]);
  }
  if (op_name == "mul") {
    want(2);
    return mul(inputs[0], inputs[1]);
  }
  if (op_name == "matmul") {
    want(2);
    return matmul(inputs[0], inputs[1]);
  }
  if (op_name == "softmax_lastdim") {
    want(1);
    return softmax_lastdim(inputs[0]);
  }
  if (op_name == "layernorm_lastdim") {
    want(1);
    return layernorm_lastdim(inputs[0], attrs.value > 0.0 ? attrs.value : 1e-5);
  }
  if (op_name == "transpose") {
    want(1);
    return attrs.axes.empty() ? transpose(inputs[0]) : permute(inputs[0], attrs.axes);
  }
  if (op_name == "concat") {
    return concat(inputs, attrs.axis);
  }
  if (op_name == "slice") {
    want(1);
    return slice(inputs[0], attrs.start, attrs.stop);
  }
  if (op_name == "sum") {
    want(1);
    return sum(inputs[0]);
  }
  if (op_name == "sum_axis") {
    want(1);
    return sum_axis(inputs[0], attrs.axis);
  }
  if (op_name == "mean") {
    want(1);
    return mean(inputs[0]);
  }
  if (op_name == "power") {
    want(1);
    return power(inputs[0], attrs.value);
  }
  if (op_name == "sqrt") {
    want(1);
    return sqrt(inputs[0]);
  }
  if (op_name == "exp") {
    want(1);
    return exp(inputs[0]);
  }
  if (op_name == "log") {
    want(1);
    return log(inputs[0]);
  }
  if (op_name == "embedding_lookup") {
    want(1);
    return embedding_lookup(inputs[0], attrs.ids);
  }
  if (op_name == "masked_fill") {
    want(2);
    return masked_fill(inputs[0], inputs[1], attrs.value);
  }
  if (op_name == "reshape") {
    want(1);
    return reshape(inputs[0], attrs.shape);
  }
  throw std::invalid_argument("apply: unknown op '" + op_name + "'");
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

Tensor use_param(const ParamList& params, const std::string& name, Tape* tape) {
  for (const Param& p : params) {
    if (p.name == name) {
      return tape ? tape->leaf(p.value, p.name) : p.value;
    }
  }
  throw std::invalid_argument("use_param: no parameter named '" + name + "'");
}

double check_gradients(const LossFn& loss_fn, ParamList& params, double step) {
  if (step <= 0.0) {
    throw std::invalid_argument("check_gradients: step must be positive");
  }
  auto eval_plain = [&]() {
    Tensor loss = loss_fn(params, nullptr);
    if (loss.size() != 1) {
      throw std::invalid_argument("check_gradients: loss_fn must return a scalar");
    }
    return loss.value();
  };

  const double v1 = eval_plain();
  const double v2 = eval_plain();
  if (std::memcmp(&v1, &v2, sizeof(double)) != 0) {
    throw std::runtime_error("check_gradients: loss_fn is not deterministic");
  }

  Tape tape;
  Tensor loss = loss_fn(params, &tape);
  if (loss.size() != 1) {
    throw std::invalid_argument("check_gradients: loss_fn must return a scalar");
  }
  GradientMap grads = tape.backward(loss);

  double max_rel = 0.0;
  for (Param& p : params) {
    const Tensor* analytic = grads.contains(p.name) ? &grads.at(p.name) : nullptr;
    std::vector<double>& buf = p.value.mutable_data();
    for (size_t i = 0; i < buf.size(); ++i) {
      const double orig = buf[i];
      buf[i] = orig + step;
      const double up = eval_plain();
      buf[i] = orig - step;
      const double down = eval_plain();
      buf[i] = orig;
      const double fd = (up - down) / (2.0 * step);
      const double an = analytic ? analytic->data()[i] : 0.0;
      // The denominator floor must sit above the finite-difference oracle's own
      // rounding noise (~eps * |loss| / step); below that scale no gradient,
      // however exact, can match the oracle, so pure relative error is unsound.
      const double rel = std::abs(an - fd) / (std::abs(fd) + 1e-6);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace sra
