#pragma once

#include "mvcca/mat.hpp"

namespace mvcca::numkit {

struct SvdResult {
  Mat u;   // orthonormal columns
  Vec s;   // singular values, descending, nonnegative
  Mat vt;  // orthonormal rows
};

struct EigResult {
  Vec values;   // descending
  Mat vectors;  // eigenvector i in column i
};

/// One-sided Jacobi SVD. Throws on non-convergence with the sweep count.
SvdResult svd(const Mat& a);

/// Cyclic Jacobi eigendecomposition. Rejects asymmetric input.
EigResult sym_eig(const Mat& a);

/// B with B·a·B = I. Rejects matrices with min eig <= 1e-12 · max eig.
Mat spd_inv_sqrt(const Mat& a);

/// Symmetric square root of an SPD matrix.
Mat spd_sqrt(const Mat& a);

/// Symmetric square root of a PSD matrix; eigenvalues in [-1e-9·max, 0) are
/// clamped to zero, anything lower is rejected.
Mat psd_sqrt(const Mat& a);

/// Lower Cholesky factor. Rejects non-positive pivots.
Mat cholesky(const Mat& a);

/// Solves L·Lᵀ·x = b column-wise given the lower factor L.
Mat chol_solve(const Mat& l, const Mat& b);

/// log det(L·Lᵀ) from the lower factor.
double chol_logdet(const Mat& l);

/// x with a·x = b for SPD a.
Mat solve_spd(const Mat& a, const Mat& b);

}  // namespace mvcca::numkit
