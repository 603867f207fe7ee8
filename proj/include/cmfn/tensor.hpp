#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cmfn/error.hpp"

namespace cmfn {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Debug-mode sentinel: after every op, outputs are scanned for NaN/+Inf.
// -Inf is deliberately allowed; it is the mask value consumed by softmax.
void set_debug_checks(bool on);
bool debug_checks();

struct TensorImpl {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized like value iff requires_grad
  bool requires_grad = false;
};

// Dense row-major f64 tensor with value semantics over a shared buffer.
// Values are treated as immutable once an op has consumed the tensor.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor wrap(std::shared_ptr<TensorImpl> impl);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int64_t numel() const { return static_cast<int64_t>(impl_->value.size()); }
  int64_t dim(int axis) const;  // negative axis counts from the back

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool on);

  std::span<const double> values() const { return impl_->value; }
  std::span<double> values_mut() { return impl_->value; }
  std::span<const double> grad() const;
  std::span<double> grad_mut();
  void zero_grad();

  double item() const;
  double at(std::initializer_list<int64_t> idx) const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
};

// Reverse-mode tape. One instance per thread; forward ops record a backward
// closure when recording is enabled and any input carries requires_grad.
class GradTape {
 public:
  static GradTape& current();

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  void record(std::function<void()> backward_step);
  void backward(const Tensor& loss);
  void reset();
  size_t size() const { return entries_.size(); }

 private:
  std::vector<std::function<void()>> entries_;
  bool recording_ = true;
  bool consumed_ = false;
};

struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Runs the tape backward from a scalar loss. Every requires_grad leaf
// reachable from the loss ends up with accumulated gradients; a second call
// without a fresh forward raises a stale-tape error.
void backward(const Tensor& loss);

// --- differentiable ops -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);        // [m×k]·[k×n]
Tensor transpose2d(const Tensor& a);                    // [m×n] -> [n×m]
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);
Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride, int padding);
Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right);
Tensor upsample2x_nearest(const Tensor& x);             // [h×w×c] -> [2h×2w×c]
Tensor avg_pool_axis(const Tensor& x, int axis);
Tensor softmax_last_axis(const Tensor& x);
Tensor log_softmax_last_axis(const Tensor& x);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_broadcast_row(const Tensor& x, const Tensor& v);  // x[...×c] ⊙ v[c]
Tensor add_broadcast_row(const Tensor& x, const Tensor& v);  // x[...×c] + v[c]
Tensor crop2d(const Tensor& x, int64_t out_h, int64_t out_w);  // top-left crop
Tensor concat_last_axis(const std::vector<Tensor>& parts);
Tensor slice_last_axis(const Tensor& x, int64_t start, int64_t len);
Tensor reshape(const Tensor& x, Shape new_shape);
Tensor sum(const Tensor& x);  // -> scalar
Tensor gather_last_axis(const Tensor& x, const std::vector<int64_t>& idx);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

}  // namespace cmfn
