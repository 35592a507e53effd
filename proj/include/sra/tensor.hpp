#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "sra/rng.hpp"

namespace sra {

using Shape = std::vector<int>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tape;

// Dense row-major float64 tensor. Value-semantic handle: copies share the
// underlying buffer, operations never mutate their inputs. A tensor is
// "tracked" when it was produced on a tape (or registered as a leaf), in
// which case reverse-mode gradients can flow to it.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const;
  int64_t size() const { return data_ ? static_cast<int64_t>(data_->size()) : 0; }
  bool defined() const { return data_ != nullptr; }

  const std::vector<double>& data() const { return *data_; }
  // Shared handle to the buffer; ops capture it inside backward closures.
  std::shared_ptr<const std::vector<double>> buffer() const { return data_; }
  // In-place access for optimizer updates and finite-difference probes only.
  std::vector<double>& mutable_data() { return *data_; }
  double value() const;  // requires size() == 1
  double operator[](int64_t i) const { return (*data_)[i]; }

  bool tracked() const { return node_ >= 0; }
  Tape* tape() const { return tape_; }
  int node() const { return node_; }
  Tensor detached() const;

 private:
  friend class Tape;
  Shape shape_;
  std::shared_ptr<std::vector<double>> data_;
  Tape* tape_ = nullptr;
  int node_ = -1;
};

// Gradients keyed by parameter name. Every parameter registered on the tape
// has an entry; parameters the loss never touched map to zero tensors.
struct GradientMap {
  std::map<std::string, Tensor> grads;

  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return grads.count(name) != 0; }
};

// Reverse-mode tape. Single-threaded; distinct tapes are independent.
class Tape {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& grad_out,
                                        const std::vector<std::vector<double>*>& parent_grads)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers `param` as a differentiable leaf. Repeated calls with the same
  // name return the same tracked handle; the name must identify one buffer.
  Tensor leaf(const Tensor& param, const std::string& name);

  // Reverse sweep from a scalar loss. Rejects non-scalar losses. A loss that
  // is constant (untracked) yields all-zero gradients for registered leaves.
  GradientMap backward(const Tensor& loss);

  // Records a node for an op output. Internal to the op implementations.
  void attach(Tensor& out, std::vector<int> parents, BackwardFn fn);

  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    int64_t size;
    std::vector<int> parents;
    BackwardFn backward;
  };
  struct Leaf {
    int node;
    std::shared_ptr<std::vector<double>> data;
    Shape shape;
  };
  std::vector<Node> nodes_;
  std::map<std::string, Leaf> leaves_;
};

// ---------------------------------------------------------------------------
// Operations. Each returns a fresh tensor; the result is recorded on the tape
// whenever any input is tracked. Elementwise binary ops accept equal shapes,
// a scalar on either side, or a trailing-suffix shape on one side.
// ---------------------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);       // a * c
Tensor add_const(const Tensor& a, double c);   // a + c

// Batched matrix product: last two axes are the matrices, leading axes must
// match exactly. (m,k)x(k,n), (B,m,k)x(B,k,n), ...
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax_lastdim(const Tensor& x);
Tensor layernorm_lastdim(const Tensor& x, double eps = 1e-5);

// Swaps the last two axes; `permute` is the general form.
Tensor transpose(const Tensor& x);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor reshape(const Tensor& x, const Shape& shape);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, const std::vector<int>& start, const std::vector<int>& stop);

Tensor sum(const Tensor& x);              // all elements -> rank-0 scalar
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean(const Tensor& x);

Tensor power(const Tensor& x, double exponent);
Tensor sqrt(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);

Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids);

// Adds `value` at positions where mask != 0 and leaves the rest untouched.
// A finite fill (e.g. -1e9) before softmax underflows to exact zero
// probability without ever forming -inf. The mask must be untracked.
Tensor masked_fill(const Tensor& x, const Tensor& mask, double value);

// Composite helpers built from the primitives above.
Tensor sigmoid(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor div(const Tensor& a, const Tensor& b);

// Dynamic dispatch over the op set; used by generic sweeps in tests.
struct OpAttrs {
  int axis = std::numeric_limits<int>::min();
  double value = 0.0;  // exponent / fill / eps, depending on the op
  std::vector<int> start, stop, axes;
  std::vector<int> ids;
  Shape shape;
};
Tensor apply(const std::string& op_name, const std::vector<Tensor>& inputs,
             const OpAttrs& attrs = {});

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct Param {
  std::string name;
  Tensor value;
};
using ParamList = std::vector<Param>;

// Builds the loss; when `tape` is non-null the function must route every
// parameter it reads through tape->leaf().
using LossFn = std::function<Tensor(ParamList&, Tape*)>;

// Returns a tape-leaf view of the named parameter, or the plain value when
// no tape is given.
Tensor use_param(const ParamList& params, const std::string& name, Tape* tape);

// Max over all parameter entries of |analytic - central difference| /
// (|central difference| + 1e-8). Rejects a non-deterministic loss_fn.
double check_gradients(const LossFn& loss_fn, ParamList& params, double step);

}  // namespace sra
