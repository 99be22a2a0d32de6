#pragma once

#include "tide/tensor.hpp"

namespace tide {

/// Largest singular value of a 2-D tensor via power iteration on W^T W.
/// Deterministic start vector; stops after `iters` rounds or once the
/// estimate moves by less than `tol` relative.
double spectral_norm(const Tensor& w, int iters = 100, double tol = 1e-8);

struct SvdResult {
    Tensor u;                   // m x n, orthonormal columns (zero where sigma == 0)
    std::vector<double> sigma;  // n, descending
    Tensor v;                   // n x n, right singular vectors as columns
};

/// Thin SVD of an m x n matrix (m >= n not required) by one-sided Jacobi
/// rotations on columns. Sweeps until the largest normalized column
/// cross-correlation drops below `tol`.
SvdResult jacobi_svd(const Tensor& a, double tol = 1e-10, int max_sweeps = 60);

}  // namespace tide
