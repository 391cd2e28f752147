#pragma once

#include "sparsemap/tensor.hpp"

#include <functional>
#include <random>

namespace sparsemap {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// The analytic gradient comes from one backward pass on a fresh tape; the
// numeric side is two tape-free evaluations of f per coordinate. f must be
// deterministic and x must sit away from non-differentiable points (top-k
// ties, indicator edges).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h = 1e-5);

// Same check restricted to max_coords randomly chosen coordinates; used for
// whole-model losses where sweeping every coordinate is too slow.
double finite_diff_check_sampled(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                                 std::size_t max_coords, std::mt19937_64& rng);

} // namespace sparsemap
