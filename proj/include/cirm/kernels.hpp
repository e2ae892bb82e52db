#pragma once

#include <cstddef>

// Dense kernels behind the autograd ops. The primary entry points use
// OpenMP when the problem is large enough; cirm::kernels::ref holds the
// plain serial implementations kept for equivalence tests and the
// benchmark target. Both paths compute every output element with the same
// inner-loop order, so results are bit-identical at any thread count.

namespace cirm::kernels {

// C[n,m] = op(A)·op(B), where op(A) is [n,k] and op(B) is [k,m].
// transA: A stored as [k,n]; transB: B stored as [m,k].
// accumulate: add into C instead of overwriting.
void matmul(const double* A, const double* B, double* C,
            std::size_t n, std::size_t k, std::size_t m,
            bool transA = false, bool transB = false, bool accumulate = false);

// Depthwise causal 1-D convolution with k-1 implicit left zeros:
// y[t,c] = sum_{j<k} ker[j,c] * x[t-k+1+j, c].
void conv1d_depthwise_causal(const double* x, const double* ker, double* y,
                             std::size_t T, std::size_t d, std::size_t k);

// Selective-scan core on precomputed coefficients.
//   h_t[c,j] = exp(delta[t,c]*a[j]) * h_{t-1}[c,j] + delta[t,c]*B[t,j]*u[t,c]
//   y[t,c]   = sum_j C[t,j]*h_t[c,j] + D[c]*u[t,c]
// Shapes: u,delta [T,d]; B,C [T,S]; a [S]; D [d]; y [T,d].
// h_out, when non-null, receives all post-update states as [T,d,S].
void selective_scan_seq(const double* u, const double* delta, const double* B,
                        const double* C, const double* a, const double* D,
                        double* y, std::size_t T, std::size_t d, std::size_t S,
                        double* h_out = nullptr);

// Two-pass chunked version of the same recurrence: per chunk it builds the
// affine map (prod, shift) carrying the state across the chunk, combines the
// chunk summaries, then re-expands inside each chunk. Agrees with
// selective_scan_seq up to floating-point regrouping.
void selective_scan_chunked(const double* u, const double* delta, const double* B,
                            const double* C, const double* a, const double* D,
                            double* y, std::size_t T, std::size_t d, std::size_t S,
                            std::size_t chunk = 16);

namespace ref {

void matmul(const double* A, const double* B, double* C,
            std::size_t n, std::size_t k, std::size_t m,
            bool transA = false, bool transB = false, bool accumulate = false);

void conv1d_depthwise_causal(const double* x, const double* ker, double* y,
                             std::size_t T, std::size_t d, std::size_t k);

void selective_scan_seq(const double* u, const double* delta, const double* B,
                        const double* C, const double* a, const double* D,
                        double* y, std::size_t T, std::size_t d, std::size_t S,
                        double* h_out = nullptr);

}  // namespace ref

}  // namespace cirm::kernels
