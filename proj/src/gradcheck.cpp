#include "cmfn/gradcheck.hpp"

#include <cmath>
#include <limits>

#include "cmfn/rng.hpp"

namespace cmfn {

double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double eps) {
  auto& tape = GradTape::current();
  tape.reset();
  for (const Tensor& p : params)
    if (p.requires_grad()) const_cast<Tensor&>(p).zero_grad();

  Tensor loss = f();
  if (!std::isfinite(loss.item()))
    raise(ErrorCode::numeric, "finite_diff_check: non-finite loss");
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params)
    analytic.emplace_back(p.grad().begin(), p.grad().end());
  tape.reset();

  double worst = 0.0;
  {
    NoGradGuard ng;
    for (size_t pi = 0; pi < params.size(); ++pi) {
      Tensor p = params[pi];
      auto vals = p.values_mut();
      for (size_t i = 0; i < vals.size(); ++i) {
        double keep = vals[i];
        vals[i] = keep + eps;
        double f_plus = f().item();
        vals[i] = keep - eps;
        double f_minus = f().item();
        vals[i] = keep;
        if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
          raise(ErrorCode::numeric, "finite_diff_check: non-finite loss");
        double fd = (f_plus - f_minus) / (2.0 * eps);
        double a = analytic[pi][i];
        double err = std::abs(a - fd) / std::max(1.0, std::abs(a));
        worst = std::max(worst, err);
      }
    }
  }
  return worst;
}

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true,
                     double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

GradCheckEntry check_one(const std::string& op, double tol,
                         const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params) {
  GradCheckEntry e;
  e.op = op;
  e.max_rel_err = finite_diff_check(f, params);
  e.pass = e.max_rel_err < tol;
  return e;
}

}  // namespace

std::vector<GradCheckEntry> run_kernel_grad_checks(uint64_t seed,
                                                   bool inject_bug) {
  constexpr double kTol = 1e-5;
  Rng rng(seed);
  std::vector<GradCheckEntry> out;

  {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    out.push_back(check_one("matmul", kTol,
                            [&] { return sum(matmul(a, b)); }, {a, b}));
  }
  {
    Tensor a = random_tensor({3, 5}, rng);
    out.push_back(check_one("transpose2d", kTol,
                            [&] { return sum(mul(transpose2d(a), transpose2d(a))); },
                            {a}));
  }
  {
    Tensor x = random_tensor({2, 3, 4}, rng);
    Tensor w = random_tensor({4, 5}, rng);
    Tensor b = random_tensor({5}, rng);
    out.push_back(check_one("affine", kTol,
                            [&] { return sum(mul(affine(x, w, b), affine(x, w, b))); },
                            {x, w, b}));
  }
  {
    Tensor x = random_tensor({4, 4, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 3}, rng);
    out.push_back(check_one("conv2d_s1", kTol,
                            [&] { return sum(mul(conv2d(x, k, 1, 1), conv2d(x, k, 1, 1))); },
                            {x, k}));
  }
  {
    Tensor x = random_tensor({5, 5, 2}, rng);
    Tensor k = random_tensor({3, 3, 2, 2}, rng);
    out.push_back(check_one("conv2d_s2", kTol,
                            [&] { return sum(conv2d(x, k, 2, 0)); }, {x, k}));
  }
  {
    Tensor x = random_tensor({3, 4, 2}, rng);
    out.push_back(check_one("pad2d", kTol,
                            [&] {
                              Tensor p = pad2d(x, 0, 1, 0, 1);
                              return sum(mul(p, p));
                            },
                            {x}));
  }
  {
    Tensor x = random_tensor({2, 3, 2}, rng);
    out.push_back(check_one("upsample2x_nearest", kTol,
                            [&] {
                              Tensor u = upsample2x_nearest(x);
                              return sum(mul(u, u));
                            },
                            {x}));
  }
  {
    Tensor x = random_tensor({3, 4, 2}, rng);
    out.push_back(check_one("avg_pool_axis", kTol,
                            [&] {
                              Tensor p = avg_pool_axis(x, 1);
                              return sum(mul(p, p));
                            },
                            {x}));
  }
  {
    Tensor x = random_tensor({4, 5}, rng, true, -2.0, 2.0);
    Tensor w = random_tensor({4, 5}, rng);
    out.push_back(check_one("softmax_last_axis", kTol,
                            [&] { return sum(mul(softmax_last_axis(x), w)); },
                            {x}));
  }
  {
    Tensor x = random_tensor({4, 5}, rng, true, -2.0, 2.0);
    Tensor w = random_tensor({4, 5}, rng);
    out.push_back(check_one("log_softmax_last_axis", kTol,
                            [&] { return sum(mul(log_softmax_last_axis(x), w)); },
                            {x}));
  }
  {
    Tensor x = random_tensor({3, 6}, rng);
    Tensor g = random_tensor({6}, rng, true, 0.5, 1.5);
    Tensor b = random_tensor({6}, rng);
    Tensor w = random_tensor({3, 6}, rng);
    out.push_back(check_one("layer_norm", kTol,
                            [&] { return sum(mul(layer_norm(x, g, b), w)); },
                            {x, g, b}));
  }
  {
    Tensor x = random_tensor({3, 4}, rng, true, 0.1, 2.0);
    out.push_back(check_one("relu", kTol,
                            [&] { return sum(mul(relu(x), relu(x))); }, {x}));
  }
  {
    Tensor x = random_tensor({3, 4}, rng);
    out.push_back(check_one("sigmoid", kTol,
                            [&] { return sum(mul(sigmoid(x), sigmoid(x))); },
                            {x}));
  }
  {
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    out.push_back(check_one("add_sub_mul_scale", kTol,
                            [&] {
                              Tensor y = add(mul(a, b), sub(scale(a, 0.5), add_scalar(b, 0.25)));
                              return sum(mul(y, y));
                            },
                            {a, b}));
  }
  {
    Tensor x = random_tensor({4, 3}, rng);
    Tensor v = random_tensor({3}, rng);
    out.push_back(check_one("mul_broadcast_row", kTol,
                            [&] {
                              Tensor y = mul_broadcast_row(x, v);
                              return sum(mul(y, y));
                            },
                            {x, v}));
  }
  {
    Tensor x = random_tensor({4, 3}, rng);
    Tensor v = random_tensor({3}, rng);
    out.push_back(check_one("add_broadcast_row", kTol,
                            [&] {
                              Tensor y = add_broadcast_row(x, v);
                              return sum(mul(y, y));
                            },
                            {x, v}));
  }
  {
    Tensor x = random_tensor({4, 5, 2}, rng);
    out.push_back(check_one("crop2d", kTol,
                            [&] {
                              Tensor y = crop2d(x, 3, 3);
                              return sum(mul(y, y));
                            },
                            {x}));
  }
  {
    Tensor a = random_tensor({3, 2}, rng);
    Tensor b = random_tensor({3, 4}, rng);
    out.push_back(check_one("concat_slice", kTol,
                            [&] {
                              Tensor y = concat_last_axis({a, b});
                              Tensor s = slice_last_axis(y, 1, 4);
                              return sum(mul(s, s));
                            },
                            {a, b}));
  }
  {
    Tensor x = random_tensor({2, 3, 2}, rng);
    out.push_back(check_one("reshape", kTol,
                            [&] {
                              Tensor y = reshape(x, {6, 2});
                              return sum(mul(y, y));
                            },
                            {x}));
  }
  {
    Tensor x = random_tensor({4, 6}, rng);
    std::vector<int64_t> idx = {1, 0, 5, 2};
    out.push_back(check_one("gather_last_axis", kTol,
                            [&] {
                              Tensor y = gather_last_axis(x, idx);
                              return sum(mul(y, y));
                            },
                            {x}));
  }

  if (inject_bug) {
    // fixture op with a deliberately wrong backward rule (d/dx x² recorded
    // as 1), so callers can prove the harness fails and names the op
    Tensor x = random_tensor({3, 3}, rng);
    auto broken_square = [](const Tensor& in) {
      Tensor y = Tensor::zeros(in.shape());
      for (int64_t i = 0; i < in.numel(); ++i)
        y.values_mut()[i] = in.values()[i] * in.values()[i];
      auto ii = in.impl();
      auto yi = y.impl();
      if (GradTape::current().recording() && in.requires_grad()) {
        yi->requires_grad = true;
        yi->grad.assign(yi->value.size(), 0.0);
        GradTape::current().record([ii, yi] {
          for (size_t i = 0; i < ii->grad.size(); ++i)
            ii->grad[i] += yi->grad[i];
        });
      }
      return y;
    };
    out.push_back(check_one("deliberate_bug_fixture", kTol,
                            [&] { return sum(broken_square(x)); }, {x}));
  }
  return out;
}

}  // namespace cmfn
