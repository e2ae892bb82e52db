#include "cirm/kernels.hpp"

#include <cmath>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace cirm::kernels {

namespace {
// Below this many multiply-adds the OpenMP fork/join costs more than it buys.
constexpr std::size_t kParallelCutoff = 1u << 15;
}  // namespace

void matmul(const double* A, const double* B, double* C,
            std::size_t n, std::size_t k, std::size_t m,
            bool transA, bool transB, bool accumulate) {
    const std::ptrdiff_t N = static_cast<std::ptrdiff_t>(n);
    const bool par = n * k * m >= kParallelCutoff;
    (void)par;
#pragma omp parallel for if (par) schedule(static)
    for (std::ptrdiff_t ii = 0; ii < N; ++ii) {
        const std::size_t i = static_cast<std::size_t>(ii);
        double* crow = C + i * m;
        if (!accumulate)
            for (std::size_t j = 0; j < m; ++j) crow[j] = 0.0;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = transA ? A[p * n + i] : A[i * k + p];
            if (!transB) {
                const double* brow = B + p * m;
                for (std::size_t j = 0; j < m; ++j) crow[j] += aip * brow[j];
            } else {
                for (std::size_t j = 0; j < m; ++j) crow[j] += aip * B[j * k + p];
            }
        }
    }
}

void conv1d_depthwise_causal(const double* x, const double* ker, double* y,
                             std::size_t T, std::size_t d, std::size_t k) {
    const std::ptrdiff_t D = static_cast<std::ptrdiff_t>(d);
    const bool par = T * d * k >= kParallelCutoff;
    (void)par;
#pragma omp parallel for if (par) schedule(static)
    for (std::ptrdiff_t cc = 0; cc < D; ++cc) {
        const std::size_t c = static_cast<std::size_t>(cc);
        for (std::size_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) -
                                           static_cast<std::ptrdiff_t>(k) + 1;
                if (src >= 0) acc += ker[j * d + c] * x[static_cast<std::size_t>(src) * d + c];
            }
            y[t * d + c] = acc;
        }
    }
}

void selective_scan_seq(const double* u, const double* delta, const double* B,
                        const double* C, const double* a, const double* D,
                        double* y, std::size_t T, std::size_t d, std::size_t S,
                        double* h_out) {
    const std::ptrdiff_t Dn = static_cast<std::ptrdiff_t>(d);
    const bool par = T * d * S >= kParallelCutoff;
    (void)par;
#pragma omp parallel for if (par) schedule(static)
    for (std::ptrdiff_t cc = 0; cc < Dn; ++cc) {
        const std::size_t c = static_cast<std::size_t>(cc);
        std::vector<double> h(S, 0.0);
        for (std::size_t t = 0; t < T; ++t) {
            const double dt = delta[t * d + c];
            const double ut = u[t * d + c];
            double acc = 0.0;
            for (std::size_t j = 0; j < S; ++j) {
                h[j] = std::exp(dt * a[j]) * h[j] + dt * B[t * S + j] * ut;
                acc += C[t * S + j] * h[j];
            }
            y[t * d + c] = acc + D[c] * ut;
            if (h_out) std::memcpy(h_out + (t * d + c) * S, h.data(), S * sizeof(double));
        }
    }
}

void selective_scan_chunked(const double* u, const double* delta, const double* B,
                            const double* C, const double* a, const double* D,
                            double* y, std::size_t T, std::size_t d, std::size_t S,
                            std::size_t chunk) {
    if (chunk == 0) chunk = 1;
    const std::size_t nchunks = (T + chunk - 1) / chunk;
    const std::ptrdiff_t Dn = static_cast<std::ptrdiff_t>(d);
    const bool par = T * d * S >= kParallelCutoff;
    (void)par;
#pragma omp parallel for if (par) schedule(static)
    for (std::ptrdiff_t cc = 0; cc < Dn; ++cc) {
        const std::size_t c = static_cast<std::size_t>(cc);
        std::vector<double> prod(nchunks), shift(nchunks), hstart(nchunks), h(S);
        for (std::size_t t = 0; t < T; ++t) y[t * d + c] = D[c] * u[t * d + c];
        for (std::size_t j = 0; j < S; ++j) {
            // Pass 1: per-chunk affine summary h_end = prod*h_start + shift.
            for (std::size_t q = 0; q < nchunks; ++q) {
                double P = 1.0, Sacc = 0.0;
                const std::size_t t1 = std::min(T, (q + 1) * chunk);
                for (std::size_t t = q * chunk; t < t1; ++t) {
                    const double dt = delta[t * d + c];
                    const double A = std::exp(dt * a[j]);
                    P *= A;
                    Sacc = A * Sacc + dt * B[t * S + j] * u[t * d + c];
                }
                prod[q] = P;
                shift[q] = Sacc;
            }
            // Pass 2: carry the state across chunk boundaries.
            hstart[0] = 0.0;
            for (std::size_t q = 1; q < nchunks; ++q)
                hstart[q] = prod[q - 1] * hstart[q - 1] + shift[q - 1];
            // Pass 3: re-expand within each chunk and emit the readout.
            for (std::size_t q = 0; q < nchunks; ++q) {
                double hj = hstart[q];
                const std::size_t t1 = std::min(T, (q + 1) * chunk);
                for (std::size_t t = q * chunk; t < t1; ++t) {
                    const double dt = delta[t * d + c];
                    hj = std::exp(dt * a[j]) * hj + dt * B[t * S + j] * u[t * d + c];
                    y[t * d + c] += C[t * S + j] * hj;
                }
            }
        }
        (void)h;
    }
}

namespace ref {

void matmul(const double* A, const double* B, double* C,
            std::size_t n, std::size_t k, std::size_t m,
            bool transA, bool transB, bool accumulate) {
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            double acc = accumulate ? C[i * m + j] : 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                const double av = transA ? A[p * n + i] : A[i * k + p];
                const double bv = transB ? B[j * k + p] : B[p * m + j];
                acc += av * bv;
            }
            C[i * m + j] = acc;
        }
    }
}

void conv1d_depthwise_causal(const double* x, const double* ker, double* y,
                             std::size_t T, std::size_t d, std::size_t k) {
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t t = 0; t < T; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t + j) -
                                           static_cast<std::ptrdiff_t>(k) + 1;
                if (src >= 0) acc += ker[j * d + c] * x[static_cast<std::size_t>(src) * d + c];
            }
            y[t * d + c] = acc;
        }
    }
}

void selective_scan_seq(const double* u, const double* delta, const double* B,
                        const double* C, const double* a, const double* D,
                        double* y, std::size_t T, std::size_t d, std::size_t S,
                        double* h_out) {
    std::vector<double> h(S);
    for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t j = 0; j < S; ++j) h[j] = 0.0;
        for (std::size_t t = 0; t < T; ++t) {
            const double dt = delta[t * d + c];
            const double ut = u[t * d + c];
            double acc = 0.0;
            for (std::size_t j = 0; j < S; ++j) {
                h[j] = std::exp(dt * a[j]) * h[j] + dt * B[t * S + j] * ut;
                acc += C[t * S + j] * h[j];
            }
            y[t * d + c] = acc + D[c] * ut;
            if (h_out) std::memcpy(h_out + (t * d + c) * S, h.data(), S * sizeof(double));
        }
    }
}

}  // namespace ref

}  // namespace cirm::kernels
