#include "cmfn/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

namespace cmfn {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_debug_checks{false};
#else
std::atomic<bool> g_debug_checks{true};
#endif

constexpr double kLayerNormEps = 1e-5;

void check_values_admissible(const std::vector<double>& v,
                             const char* where) {
  for (double x : v) {
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
      raise(ErrorCode::numeric,
            std::string(where) + ": NaN or +Inf value encountered");
    }
  }
}

std::shared_ptr<TensorImpl> make_impl(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  impl->shape = std::move(shape);
  impl->value.assign(static_cast<size_t>(n), 0.0);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(static_cast<size_t>(n), 0.0);
  return impl;
}

// Marks `out` as gradient-carrying and records the backward closure when the
// thread tape is recording and at least one input participates.
template <typename Fn>
void record_op(std::initializer_list<const Tensor*> inputs, Tensor& out,
               Fn&& backward_step) {
  auto& tape = GradTape::current();
  if (!tape.recording()) return;
  bool any = false;
  for (const Tensor* t : inputs) {
    if (t->defined() && t->requires_grad()) any = true;
  }
  if (!any) return;
  out.impl()->requires_grad = true;
  out.impl()->grad.assign(out.impl()->value.size(), 0.0);
  tape.record(std::forward<Fn>(backward_step));
}

void debug_check_output(const Tensor& out, const char* op) {
  if (!debug_checks()) return;
  for (double x : out.values()) {
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
      raise(ErrorCode::numeric, std::string(op) + ": produced NaN or +Inf");
    }
  }
}

// C[m×n] += or = A[m×k] · B[k×n], all row-major. The ikj order keeps the
// inner loop contiguous over B and C rows so the compiler vectorizes it.
void gemm_nn(const double* a, const double* b, double* c, int64_t m, int64_t k,
             int64_t n, bool accumulate) {
#ifdef _OPENMP
#pragma omp parallel for schedule(static) if (m > 1 && m * k * n > 32768)
#endif
  for (int64_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    if (!accumulate) std::fill(crow, crow + n, 0.0);
    const double* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      double av = arow[p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

std::vector<double> transpose_buf(const double* a, int64_t rows,
                                  int64_t cols) {
  std::vector<double> t(static_cast<size_t>(rows * cols));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

void require(bool cond, ErrorCode code, const std::string& msg) {
  if (!cond) raise(code, msg);
}

int64_t leading_rows(const Shape& shape) {
  int64_t r = 1;
  for (size_t i = 0; i + 1 < shape.size(); ++i) r *= shape[i];
  return r;
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) {
    if (e <= 0) raise(ErrorCode::shape, "non-positive extent in " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void set_debug_checks(bool on) { g_debug_checks.store(on); }
bool debug_checks() { return g_debug_checks.load(); }

// --- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return Tensor(make_impl(std::move(shape), requires_grad));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  Tensor t(make_impl(std::move(shape), requires_grad));
  std::fill(t.impl_->value.begin(), t.impl_->value.end(), v);
  check_values_admissible(t.impl_->value, "Tensor::full");
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  int64_t n = shape_numel(shape);
  require(n == static_cast<int64_t>(values.size()), ErrorCode::shape,
          "from_values: " + shape_str(shape) + " needs " + std::to_string(n) +
              " values, got " + std::to_string(values.size()));
  check_values_admissible(values, "Tensor::from_values");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->value = std::move(values);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->grad.assign(impl->value.size(), 0.0);
  return Tensor(impl);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_values({}, {v}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<TensorImpl> impl) {
  return Tensor(std::move(impl));
}

int64_t Tensor::dim(int axis) const {
  int r = rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, ErrorCode::shape,
          "axis out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on)
    impl_->grad.assign(impl_->value.size(), 0.0);
  else
    impl_->grad.clear();
}

std::span<const double> Tensor::grad() const {
  require(impl_->requires_grad, ErrorCode::invalid,
          "grad requested on a tensor without requires_grad");
  return impl_->grad;
}

std::span<double> Tensor::grad_mut() {
  require(impl_->requires_grad, ErrorCode::invalid,
          "grad requested on a tensor without requires_grad");
  return impl_->grad;
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

double Tensor::item() const {
  require(numel() == 1, ErrorCode::shape,
          "item() on non-scalar tensor " + shape_str(shape()));
  return impl_->value[0];
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
  require(static_cast<int>(idx.size()) == rank(), ErrorCode::shape,
          "at(): index rank mismatch for " + shape_str(shape()));
  int64_t flat = 0;
  int axis = 0;
  for (int64_t i : idx) {
    require(i >= 0 && i < impl_->shape[axis], ErrorCode::shape,
            "at(): index out of range");
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->value[static_cast<size_t>(flat)];
}

// --- GradTape ---------------------------------------------------------------

GradTape& GradTape::current() {
  thread_local GradTape tape;
  return tape;
}

void GradTape::record(std::function<void()> backward_step) {
  entries_.push_back(std::move(backward_step));
}

void GradTape::backward(const Tensor& loss) {
  require(loss.defined() && loss.numel() == 1, ErrorCode::invalid,
          "backward: loss must be a scalar");
  if (consumed_) {
    raise(ErrorCode::invalid,
          "backward: stale tape, run a fresh forward pass first");
  }
  require(loss.requires_grad(), ErrorCode::invalid,
          "backward: loss is not connected to the tape");
  loss.impl()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  consumed_ = true;
}

void GradTape::reset() {
  entries_.clear();
  consumed_ = false;
}

NoGradGuard::NoGradGuard() {
  prev_ = GradTape::current().recording();
  GradTape::current().set_recording(false);
}

NoGradGuard::~NoGradGuard() { GradTape::current().set_recording(prev_); }

void backward(const Tensor& loss) { GradTape::current().backward(loss); }

// --- ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorCode::shape,
          "matmul: expects rank-2 operands, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  require(k == k2, ErrorCode::shape,
          "matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
              shape_str(b.shape()));
  Tensor out = Tensor::zeros({m, n});
  gemm_nn(a.values().data(), b.values().data(), out.values_mut().data(), m, k,
          n, false);
  debug_check_output(out, "matmul");
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({&a, &b}, out, [ai, bi, oi, m, k, n] {
    if (ai->requires_grad) {  // dA += dC·Bᵀ
      auto bt = transpose_buf(bi->value.data(), k, n);
      gemm_nn(oi->grad.data(), bt.data(), ai->grad.data(), m, n, k, true);
    }
    if (bi->requires_grad) {  // dB += Aᵀ·dC
      auto at = transpose_buf(ai->value.data(), m, k);
      gemm_nn(at.data(), oi->grad.data(), bi->grad.data(), k, m, n, true);
    }
  });
  return out;
}

Tensor transpose2d(const Tensor& a) {
  require(a.rank() == 2, ErrorCode::shape,
          "transpose2d: expects rank-2, got " + shape_str(a.shape()));
  int64_t m = a.dim(0), n = a.dim(1);
  Tensor out = Tensor::zeros({n, m});
  auto t = transpose_buf(a.values().data(), m, n);
  std::copy(t.begin(), t.end(), out.values_mut().begin());
  auto ai = a.impl(), oi = out.impl();
  record_op({&a}, out, [ai, oi, m, n] {
    if (!ai->requires_grad) return;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) ai->grad[i * n + j] += oi->grad[j * m + i];
  });
  return out;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.rank() >= 1 && w.rank() == 2 && b.rank() == 1, ErrorCode::shape,
          "affine: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) +
              " b" + shape_str(b.shape()));
  int64_t din = x.dim(-1), dout = w.dim(1);
  require(w.dim(0) == din && b.dim(0) == dout, ErrorCode::shape,
          "affine: extents disagree, x" + shape_str(x.shape()) + " w" +
              shape_str(w.shape()) + " b" + shape_str(b.shape()));
  int64_t rows = leading_rows(x.shape());
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  Tensor out = Tensor::zeros(out_shape);
  gemm_nn(x.values().data(), w.values().data(), out.values_mut().data(), rows,
          din, dout, false);
  {
    double* o = out.values_mut().data();
    const double* bias = b.values().data();
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < dout; ++j) o[r * dout + j] += bias[j];
  }
  debug_check_output(out, "affine");
  auto xi = x.impl(), wi = w.impl(), bi = b.impl(), oi = out.impl();
  record_op({&x, &w, &b}, out, [xi, wi, bi, oi, rows, din, dout] {
    if (xi->requires_grad) {
      auto wt = transpose_buf(wi->value.data(), din, dout);
      gemm_nn(oi->grad.data(), wt.data(), xi->grad.data(), rows, dout, din,
              true);
    }
    if (wi->requires_grad) {
      auto xt = transpose_buf(xi->value.data(), rows, din);
      gemm_nn(xt.data(), oi->grad.data(), wi->grad.data(), din, rows, dout,
              true);
    }
    if (bi->requires_grad) {
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < dout; ++j)
          bi->grad[j] += oi->grad[r * dout + j];
    }
  });
  return out;
}

namespace {

// Gathers conv patches of x (padded view) into rows of (kh·kw·cin); row
// order matches the kernel tensor layout [kh×kw×cin×cout].
void im2col(const double* x, int64_t h, int64_t w, int64_t cin, int64_t kh,
            int64_t kw, int64_t stride, int64_t pad, int64_t oh, int64_t ow,
            double* patches) {
  int64_t pcols = kh * kw * cin;
  for (int64_t orow = 0; orow < oh; ++orow) {
    for (int64_t ocol = 0; ocol < ow; ++ocol) {
      double* prow = patches + (orow * ow + ocol) * pcols;
      for (int64_t ki = 0; ki < kh; ++ki) {
        int64_t ir = orow * stride - pad + ki;
        for (int64_t kj = 0; kj < kw; ++kj) {
          int64_t ic = ocol * stride - pad + kj;
          double* dst = prow + (ki * kw + kj) * cin;
          if (ir < 0 || ir >= h || ic < 0 || ic >= w) {
            std::fill(dst, dst + cin, 0.0);
          } else {
            const double* src = x + (ir * w + ic) * cin;
            std::copy(src, src + cin, dst);
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernels, int stride,
              int padding) {
  require(x.rank() == 3 && kernels.rank() == 4, ErrorCode::shape,
          "conv2d: x" + shape_str(x.shape()) + " kernels" +
              shape_str(kernels.shape()));
  int64_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  int64_t kh = kernels.dim(0), kw = kernels.dim(1);
  require(kernels.dim(2) == cin, ErrorCode::shape,
          "conv2d: channel extents disagree, x" + shape_str(x.shape()) +
              " kernels" + shape_str(kernels.shape()));
  require(kh % 2 == 1 && kw % 2 == 1, ErrorCode::invalid,
          "conv2d: kernel extents must be odd");
  require(stride == 1 || stride == 2, ErrorCode::invalid,
          "conv2d: stride must be 1 or 2");
  require(padding >= 0, ErrorCode::invalid, "conv2d: negative padding");
  int64_t cout = kernels.dim(3);
  int64_t hn = h + 2 * padding - kh;
  int64_t wn = w + 2 * padding - kw;
  require(hn >= 0 && wn >= 0 && hn % stride == 0 && wn % stride == 0,
          ErrorCode::shape,
          "conv2d: non-integral output extent for x" + shape_str(x.shape()) +
              " kernels" + shape_str(kernels.shape()) + " stride " +
              std::to_string(stride) + " padding " + std::to_string(padding));
  int64_t oh = hn / stride + 1, ow = wn / stride + 1;
  int64_t pcols = kh * kw * cin;

  std::vector<double> patches(static_cast<size_t>(oh * ow * pcols));
  im2col(x.values().data(), h, w, cin, kh, kw, stride, padding, oh, ow,
         patches.data());
  Tensor out = Tensor::zeros({oh, ow, cout});
  gemm_nn(patches.data(), kernels.values().data(), out.values_mut().data(),
          oh * ow, pcols, cout, false);
  debug_check_output(out, "conv2d");

  auto xi = x.impl(), ki = kernels.impl(), oi = out.impl();
  // patches are recomputed in backward instead of kept alive: the model
  // forward holds many conv nodes and the col buffers dominate memory.
  record_op({&x, &kernels}, out,
            [xi, ki, oi, h, w, cin, kh, kw, stride, padding, oh, ow, pcols,
             cout] {
              std::vector<double> patches(
                  static_cast<size_t>(oh * ow * pcols));
              im2col(xi->value.data(), h, w, cin, kh, kw, stride, padding, oh,
                     ow, patches.data());
              if (ki->requires_grad) {  // dK += Pᵀ·dOut
                auto pt = transpose_buf(patches.data(), oh * ow, pcols);
                gemm_nn(pt.data(), oi->grad.data(), ki->grad.data(), pcols,
                        oh * ow, cout, true);
              }
              if (xi->requires_grad) {  // dP = dOut·Kᵀ, then col2im scatter
                auto kt = transpose_buf(ki->value.data(), pcols, cout);
                std::vector<double> dpatches(
                    static_cast<size_t>(oh * ow * pcols));
                gemm_nn(oi->grad.data(), kt.data(), dpatches.data(), oh * ow,
                        cout, pcols, false);
                for (int64_t orow = 0; orow < oh; ++orow) {
                  for (int64_t ocol = 0; ocol < ow; ++ocol) {
                    const double* prow =
                        dpatches.data() + (orow * ow + ocol) * pcols;
                    for (int64_t kr = 0; kr < kh; ++kr) {
                      int64_t ir = orow * stride - padding + kr;
                      if (ir < 0 || ir >= h) continue;
                      for (int64_t kc = 0; kc < kw; ++kc) {
                        int64_t ic = ocol * stride - padding + kc;
                        if (ic < 0 || ic >= w) continue;
                        const double* src = prow + (kr * kw + kc) * cin;
                        double* dst = xi->grad.data() + (ir * w + ic) * cin;
                        for (int64_t ch = 0; ch < cin; ++ch) dst[ch] += src[ch];
                      }
                    }
                  }
                }
              }
            });
  return out;
}

Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right) {
  require(x.rank() == 3, ErrorCode::shape,
          "pad2d: expects [h×w×c], got " + shape_str(x.shape()));
  require(top >= 0 && bottom >= 0 && left >= 0 && right >= 0,
          ErrorCode::invalid, "pad2d: negative pad amount");
  int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  int64_t oh = h + top + bottom, ow = w + left + right;
  Tensor out = Tensor::zeros({oh, ow, c});
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  for (int64_t r = 0; r < h; ++r)
    std::copy(src + r * w * c, src + (r + 1) * w * c,
              dst + ((r + top) * ow + left) * c);
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, h, w, c, ow, top, left] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < h; ++r) {
      const double* g = oi->grad.data() + ((r + top) * ow + left) * c;
      double* d = xi->grad.data() + r * w * c;
      for (int64_t j = 0; j < w * c; ++j) d[j] += g[j];
    }
  });
  return out;
}

Tensor upsample2x_nearest(const Tensor& x) {
  require(x.rank() == 3, ErrorCode::shape,
          "upsample2x_nearest: expects [h×w×c], got " + shape_str(x.shape()));
  int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  Tensor out = Tensor::zeros({2 * h, 2 * w, c});
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  for (int64_t r = 0; r < 2 * h; ++r)
    for (int64_t col = 0; col < 2 * w; ++col)
      std::copy(src + ((r / 2) * w + col / 2) * c,
                src + ((r / 2) * w + col / 2 + 1) * c,
                dst + (r * 2 * w + col) * c);
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, h, w, c] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < 2 * h; ++r)
      for (int64_t col = 0; col < 2 * w; ++col) {
        const double* g = oi->grad.data() + (r * 2 * w + col) * c;
        double* d = xi->grad.data() + ((r / 2) * w + col / 2) * c;
        for (int64_t ch = 0; ch < c; ++ch) d[ch] += g[ch];
      }
  });
  return out;
}

Tensor avg_pool_axis(const Tensor& x, int axis) {
  int r = x.rank();
  if (axis < 0) axis += r;
  require(axis >= 0 && axis < r, ErrorCode::shape,
          "avg_pool_axis: axis out of range for " + shape_str(x.shape()));
  int64_t extent = x.shape()[axis];
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape()[i];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  Shape out_shape;
  for (int i = 0; i < r; ++i)
    if (i != axis) out_shape.push_back(x.shape()[i]);
  Tensor out = Tensor::zeros(out_shape);
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  double inv = 1.0 / static_cast<double>(extent);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t a = 0; a < extent; ++a)
      for (int64_t i = 0; i < inner; ++i)
        dst[o * inner + i] += src[(o * extent + a) * inner + i] * inv;
  debug_check_output(out, "avg_pool_axis");
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, outer, extent, inner, inv] {
    if (!xi->requires_grad) return;
    for (int64_t o = 0; o < outer; ++o)
      for (int64_t a = 0; a < extent; ++a)
        for (int64_t i = 0; i < inner; ++i)
          xi->grad[(o * extent + a) * inner + i] +=
              oi->grad[o * inner + i] * inv;
  });
  return out;
}

Tensor softmax_last_axis(const Tensor& x) {
  require(x.rank() >= 1, ErrorCode::shape, "softmax: scalar input");
  int64_t n = x.dim(-1);
  int64_t rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(x.shape());
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = src + r * n;
    double* yr = dst + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      raise(ErrorCode::numeric,
            "softmax_last_axis: degenerate distribution, slice is all -Inf");
    }
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      yr[j] = std::exp(xr[j] - mx);  // exp(-Inf) is exactly 0
      s += yr[j];
    }
    double inv = 1.0 / s;
    for (int64_t j = 0; j < n; ++j) yr[j] *= inv;
  }
  debug_check_output(out, "softmax_last_axis");
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, rows, n] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = oi->value.data() + r * n;
      const double* dy = oi->grad.data() + r * n;
      double* dx = xi->grad.data() + r * n;
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += dy[j] * y[j];
      for (int64_t j = 0; j < n; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  });
  return out;
}

Tensor log_softmax_last_axis(const Tensor& x) {
  require(x.rank() >= 1, ErrorCode::shape, "log_softmax: scalar input");
  int64_t n = x.dim(-1);
  int64_t rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(x.shape());
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = src + r * n;
    double* yr = dst + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < n; ++j) mx = std::max(mx, xr[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      raise(ErrorCode::numeric,
            "log_softmax_last_axis: degenerate distribution, slice is all -Inf");
    }
    double s = 0.0;
    for (int64_t j = 0; j < n; ++j) s += std::exp(xr[j] - mx);
    double lse = mx + std::log(s);
    for (int64_t j = 0; j < n; ++j) yr[j] = xr[j] - lse;
  }
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, rows, n] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r) {
      const double* y = oi->value.data() + r * n;
      const double* dy = oi->grad.data() + r * n;
      double* dx = xi->grad.data() + r * n;
      double s = 0.0;
      for (int64_t j = 0; j < n; ++j) s += dy[j];
      for (int64_t j = 0; j < n; ++j) dx[j] += dy[j] - std::exp(y[j]) * s;
    }
  });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  require(x.rank() >= 1 && gain.rank() == 1 && bias.rank() == 1,
          ErrorCode::shape, "layer_norm: x" + shape_str(x.shape()));
  int64_t n = x.dim(-1);
  require(n >= 2, ErrorCode::shape, "layer_norm: slice width must be >= 2");
  require(gain.dim(0) == n && bias.dim(0) == n, ErrorCode::shape,
          "layer_norm: gain/bias extent disagrees with " +
              shape_str(x.shape()));
  int64_t rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(x.shape());
  // cache normalized values and 1/stddev per row for backward
  auto xhat = std::make_shared<std::vector<double>>(x.values().begin(),
                                                    x.values().end());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const double* src = x.values().data();
  const double* g = gain.values().data();
  const double* b = bias.values().data();
  double* dst = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = src + r * n;
    double* hr = xhat->data() + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(n);
    double istd = 1.0 / std::sqrt(var + kLayerNormEps);
    (*inv_std)[r] = istd;
    for (int64_t j = 0; j < n; ++j) {
      hr[j] = (xr[j] - mean) * istd;
      dst[r * n + j] = hr[j] * g[j] + b[j];
    }
  }
  debug_check_output(out, "layer_norm");
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  record_op({&x, &gain, &bias}, out, [xi, gi, bi, oi, xhat, inv_std, rows, n] {
    for (int64_t r = 0; r < rows; ++r) {
      const double* dy = oi->grad.data() + r * n;
      const double* hr = xhat->data() + r * n;
      if (gi->requires_grad)
        for (int64_t j = 0; j < n; ++j) gi->grad[j] += dy[j] * hr[j];
      if (bi->requires_grad)
        for (int64_t j = 0; j < n; ++j) bi->grad[j] += dy[j];
      if (xi->requires_grad) {
        double istd = (*inv_std)[r];
        double m1 = 0.0, m2 = 0.0;  // mean(dxhat), mean(dxhat ⊙ xhat)
        for (int64_t j = 0; j < n; ++j) {
          double dh = dy[j] * gi->value[j];
          m1 += dh;
          m2 += dh * hr[j];
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        double* dx = xi->grad.data() + r * n;
        for (int64_t j = 0; j < n; ++j) {
          double dh = dy[j] * gi->value[j];
          dx[j] += istd * (dh - m1 - hr[j] * m2);
        }
      }
    }
  });
  return out;
}

namespace {

template <typename FwdFn, typename BwdFn>
Tensor unary_op(const Tensor& x, const char* name, FwdFn fwd, BwdFn bwd) {
  Tensor out = Tensor::zeros(x.shape());
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) dst[i] = fwd(src[i]);
  debug_check_output(out, name);
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, n, bwd] {
    if (!xi->requires_grad) return;
    for (int64_t i = 0; i < n; ++i)
      xi->grad[i] += oi->grad[i] * bwd(xi->value[i], oi->value[i]);
  });
  return out;
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      x, "scale", [c](double v) { return v * c; },
      [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      x, "add_scalar", [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), ErrorCode::shape,
          std::string(op) + ": shapes disagree, " + shape_str(a.shape()) +
              " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  int64_t n = a.numel();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values_mut().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  debug_check_output(out, "add");
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({&a, &b}, out, [ai, bi, oi, n] {
    if (ai->requires_grad)
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
    if (bi->requires_grad)
      for (int64_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  int64_t n = a.numel();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values_mut().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  debug_check_output(out, "sub");
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({&a, &b}, out, [ai, bi, oi, n] {
    if (ai->requires_grad)
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
    if (bi->requires_grad)
      for (int64_t i = 0; i < n; ++i) bi->grad[i] -= oi->grad[i];
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  int64_t n = a.numel();
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* po = out.values_mut().data();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  debug_check_output(out, "mul");
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_op({&a, &b}, out, [ai, bi, oi, n] {
    if (ai->requires_grad)
      for (int64_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->value[i];
    if (bi->requires_grad)
      for (int64_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->value[i];
  });
  return out;
}

Tensor mul_broadcast_row(const Tensor& x, const Tensor& v) {
  require(x.rank() >= 1, ErrorCode::shape, "mul_broadcast_row: scalar input");
  int64_t c = x.dim(-1);
  require(v.numel() == c, ErrorCode::shape,
          "mul_broadcast_row: x" + shape_str(x.shape()) + " vs v" +
              shape_str(v.shape()));
  int64_t rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.values().data();
  const double* pv = v.values().data();
  double* po = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] * pv[j];
  debug_check_output(out, "mul_broadcast_row");
  auto xi = x.impl(), vi = v.impl(), oi = out.impl();
  record_op({&x, &v}, out, [xi, vi, oi, rows, c] {
    if (xi->requires_grad)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j)
          xi->grad[r * c + j] += oi->grad[r * c + j] * vi->value[j];
    if (vi->requires_grad)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j)
          vi->grad[j] += oi->grad[r * c + j] * xi->value[r * c + j];
  });
  return out;
}

Tensor add_broadcast_row(const Tensor& x, const Tensor& v) {
  require(x.rank() >= 1, ErrorCode::shape, "add_broadcast_row: scalar input");
  int64_t c = x.dim(-1);
  require(v.numel() == c, ErrorCode::shape,
          "add_broadcast_row: x" + shape_str(x.shape()) + " vs v" +
              shape_str(v.shape()));
  int64_t rows = leading_rows(x.shape());
  Tensor out = Tensor::zeros(x.shape());
  const double* px = x.values().data();
  const double* pv = v.values().data();
  double* po = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < c; ++j) po[r * c + j] = px[r * c + j] + pv[j];
  debug_check_output(out, "add_broadcast_row");
  auto xi = x.impl(), vi = v.impl(), oi = out.impl();
  record_op({&x, &v}, out, [xi, vi, oi, rows, c] {
    if (xi->requires_grad)
      for (int64_t i = 0; i < rows * c; ++i) xi->grad[i] += oi->grad[i];
    if (vi->requires_grad)
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < c; ++j) vi->grad[j] += oi->grad[r * c + j];
  });
  return out;
}

Tensor crop2d(const Tensor& x, int64_t out_h, int64_t out_w) {
  require(x.rank() == 3, ErrorCode::shape,
          "crop2d: expects [h×w×c], got " + shape_str(x.shape()));
  int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  require(out_h >= 1 && out_w >= 1 && out_h <= h && out_w <= w,
          ErrorCode::shape,
          "crop2d: target " + std::to_string(out_h) + "x" +
              std::to_string(out_w) + " exceeds " + shape_str(x.shape()));
  if (out_h == h && out_w == w) return x;
  Tensor out = Tensor::zeros({out_h, out_w, c});
  const double* src = x.values().data();
  double* dst = out.values_mut().data();
  for (int64_t r = 0; r < out_h; ++r)
    std::copy(src + r * w * c, src + (r * w + out_w) * c,
              dst + r * out_w * c);
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, out_h, out_w, w, c] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < out_h; ++r)
      for (int64_t j = 0; j < out_w * c; ++j)
        xi->grad[r * w * c + j] += oi->grad[r * out_w * c + j];
  });
  return out;
}

Tensor concat_last_axis(const std::vector<Tensor>& parts) {
  require(!parts.empty(), ErrorCode::invalid, "concat_last_axis: no parts");
  Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
  int64_t total = 0;
  for (const Tensor& p : parts) {
    Shape plead(p.shape().begin(), p.shape().end() - 1);
    require(plead == lead, ErrorCode::shape,
            "concat_last_axis: leading extents disagree, " +
                shape_str(parts[0].shape()) + " vs " + shape_str(p.shape()));
    total += p.dim(-1);
  }
  Shape out_shape = parts[0].shape();
  out_shape.back() = total;
  Tensor out = Tensor::zeros(out_shape);
  int64_t rows = leading_rows(out_shape);
  double* po = out.values_mut().data();
  int64_t off = 0;
  for (const Tensor& p : parts) {
    int64_t c = p.dim(-1);
    const double* pp = p.values().data();
    for (int64_t r = 0; r < rows; ++r)
      std::copy(pp + r * c, pp + (r + 1) * c, po + r * total + off);
    off += c;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  bool any = false;
  for (const Tensor& p : parts) {
    impls.push_back(p.impl());
    any = any || p.requires_grad();
  }
  auto oi = out.impl();
  if (GradTape::current().recording() && any) {
    out.impl()->requires_grad = true;
    out.impl()->grad.assign(out.impl()->value.size(), 0.0);
    GradTape::current().record([impls, oi, rows, total] {
      int64_t off = 0;
      for (auto& pi : impls) {
        int64_t c = pi->shape.back();
        if (pi->requires_grad)
          for (int64_t r = 0; r < rows; ++r)
            for (int64_t j = 0; j < c; ++j)
              pi->grad[r * c + j] += oi->grad[r * total + off + j];
        off += c;
      }
    });
  }
  return out;
}

Tensor slice_last_axis(const Tensor& x, int64_t start, int64_t len) {
  int64_t c = x.dim(-1);
  require(start >= 0 && len > 0 && start + len <= c, ErrorCode::shape,
          "slice_last_axis: [" + std::to_string(start) + "," +
              std::to_string(start + len) + ") out of range for " +
              shape_str(x.shape()));
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor out = Tensor::zeros(out_shape);
  int64_t rows = leading_rows(x.shape());
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r)
    std::copy(px + r * c + start, px + r * c + start + len, po + r * len);
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, rows, c, start, len] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t j = 0; j < len; ++j)
        xi->grad[r * c + start + j] += oi->grad[r * len + j];
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape new_shape) {
  int64_t n = shape_numel(new_shape);
  require(n == x.numel(), ErrorCode::shape,
          "reshape: " + shape_str(x.shape()) + " has " +
              std::to_string(x.numel()) + " elements, target " +
              shape_str(new_shape) + " needs " + std::to_string(n));
  Tensor out = Tensor::zeros(new_shape);
  std::copy(x.values().begin(), x.values().end(),
            out.values_mut().begin());
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, n] {
    if (!xi->requires_grad) return;
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

Tensor sum(const Tensor& x) {
  Tensor out = Tensor::zeros({});
  double s = 0.0;
  for (double v : x.values()) s += v;
  out.values_mut()[0] = s;
  debug_check_output(out, "sum");
  auto xi = x.impl(), oi = out.impl();
  int64_t n = x.numel();
  record_op({&x}, out, [xi, oi, n] {
    if (!xi->requires_grad) return;
    double g = oi->grad[0];
    for (int64_t i = 0; i < n; ++i) xi->grad[i] += g;
  });
  return out;
}

Tensor gather_last_axis(const Tensor& x, const std::vector<int64_t>& idx) {
  require(x.rank() == 2, ErrorCode::shape,
          "gather_last_axis: expects rank-2, got " + shape_str(x.shape()));
  int64_t rows = x.dim(0), c = x.dim(1);
  require(static_cast<int64_t>(idx.size()) == rows, ErrorCode::shape,
          "gather_last_axis: index count disagrees with rows");
  Tensor out = Tensor::zeros({rows});
  const double* px = x.values().data();
  double* po = out.values_mut().data();
  for (int64_t r = 0; r < rows; ++r) {
    require(idx[r] >= 0 && idx[r] < c, ErrorCode::shape,
            "gather_last_axis: index out of range");
    po[r] = px[r * c + idx[r]];
  }
  auto xi = x.impl(), oi = out.impl();
  record_op({&x}, out, [xi, oi, idx, rows, c] {
    if (!xi->requires_grad) return;
    for (int64_t r = 0; r < rows; ++r)
      xi->grad[r * c + idx[r]] += oi->grad[r];
  });
  return out;
}

}  // namespace cmfn
