#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "cmfn/tensor.hpp"

namespace cmfn {

// Central finite-difference oracle. Runs f once with the tape to collect
// analytic gradients, then perturbs every parameter element by ±eps and
// returns max over elements of |analytic - central| / max(1, |analytic|).
// f must be deterministic; a non-finite f output raises a numeric error.
double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double eps = 1e-5);

struct GradCheckEntry {
  std::string op;
  double max_rel_err = 0.0;
  bool pass = false;
};

// Randomized per-kernel checks for every differentiable op. `inject_bug`
// adds a fixture entry whose backward rule is deliberately wrong, used to
// prove the harness actually fails when gradients are broken.
std::vector<GradCheckEntry> run_kernel_grad_checks(uint64_t seed,
                                                   bool inject_bug = false);

// Finite-difference check over every parameter of a tiny full model
// (T=6, C=16, 8x16 image, N=2). Defined with the model sources.
GradCheckEntry run_full_model_grad_check(uint64_t seed);

}  // namespace cmfn
