#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace stealth {

class Tape;

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data when requires_grad
  bool requires_grad = false;
  Tape* tape = nullptr;
};

// Value handle over a shared node. Operations never mutate their inputs;
// results are fresh nodes, recorded on the tape of their inputs whenever a
// gradient has to flow.
class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(std::vector<int> shape, std::vector<double> data);
  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor scalar(double value);

  bool defined() const { return impl != nullptr; }
  const std::vector<int>& shape() const { return impl->shape; }
  std::size_t numel() const { return impl->data.size(); }
  bool requires_grad() const { return impl && impl->requires_grad; }
  const std::vector<double>& values() const { return impl->data; }
  std::vector<double>& raw_data() { return impl->data; }
  const std::vector<double>& grad() const;
  double item() const;

  std::shared_ptr<TensorImpl> impl;
};

// Ordered record of executed operations. Backward replays the record in
// exact reverse execution order. Grads are overwritten on every backward
// call (zeroed first, then accumulated), so running backward twice on the
// same tape yields identical grads.
class Tape {
 public:
  Tensor variable(std::vector<int> shape, std::vector<double> data);

  // Used by op implementations: register an op output node and the closure
  // that pulls its grad into the input grads.
  void adopt(const std::shared_ptr<TensorImpl>& node) { nodes_.push_back(node); }
  void record(std::function<void()> backward) { entries_.push_back(std::move(backward)); }

  void backward(const Tensor& loss);
  std::size_t op_count() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  std::vector<std::shared_ptr<TensorImpl>> nodes_;
};

std::string shape_str(const std::vector<int>& shape);

namespace detail {
// Resolves the single tape shared by the given inputs (errors if two
// distinct tapes meet) and builds the result node.
Tensor make_result(std::vector<int> shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs);
}  // namespace detail

// Elementwise. Binary ops require equal shapes or a 1-element operand
// broadcast against the other; anything wider fails loudly.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor sub(const Tensor& a, double b);
Tensor sub(double a, const Tensor& b);
Tensor mul(const Tensor& a, double b);
Tensor div(const Tensor& a, double b);
Tensor scale(const Tensor& a, double k);
Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, double b);
Tensor minimum(const Tensor& a, double b);
Tensor clamp01(const Tensor& a);

Tensor softmax(const Tensor& a, int axis);

// input [N,C,H,W], kernel [O,C,kh,kw]
Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding);
// x [N,C,H,W], bias [C]
Tensor add_channel_bias(const Tensor& x, const Tensor& bias);

// Reductions; empty axes reduce everything to a [1] scalar. Reduced axes
// are removed from the output shape.
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes = {});
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes = {});
// sqrt(sum of squares); gradient at an all-zero group is the zero vector.
Tensor reduce_l2norm(const Tensor& x, const std::vector<int>& axes = {});

Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor gather_scalar(const Tensor& x, std::size_t flat_index);
// x [C,H,W] scaled by m [H,W] broadcast over channels
Tensor mul_spatial(const Tensor& x, const Tensor& m);
// sum_i w_i * (softplus(z_i) - z_i * t_i); numerically stable BCE
Tensor bce_with_logits_sum(const Tensor& logits, const Tensor& targets,
                           const Tensor& weights);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(b, a); }

}  // namespace stealth
