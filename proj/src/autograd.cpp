#include "cirm/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "cirm/kernels.hpp"

namespace cirm::autograd {

namespace {

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double softplus(double x) {
    if (x > 30.0) return x;
    if (x < -30.0) return std::exp(x);
    return std::log1p(std::exp(x));
}

}  // namespace

Var Tape::leaf(Tensor value, bool requires_grad) {
    return make(std::move(value), requires_grad, nullptr);
}

Var Tape::make(Tensor value, bool requires_grad, std::function<void(Tape&)> bw) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.backward = std::move(bw);
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Tensor& Tape::grad(Var v) {
    Node& n = nodes_[check(v)];
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

bool Tape::any_grad(std::initializer_list<Var> vs) const {
    for (Var v : vs)
        if (v.valid() && requires_grad(v)) return true;
    return false;
}

void Tape::backward(Var loss) {
    if (val(loss).size() != 1) throw DimensionError("backward: loss must be scalar");
    grad(loss).fill(1.0);
    for (int i = check(loss); i >= 0; --i) {
        Node& n = nodes_[static_cast<std::size_t>(i)];
        if (n.grad_alloc && n.requires_grad && n.backward) n.backward(*this);
    }
}

// ---------------------------------------------------------------- elementwise

Var Tape::add(Var a, Var b) {
    check_same_shape(val(a), val(b), "add");
    Tensor y = val(a);
    const Tensor& vb = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += vb[i];
    const bool rg = any_grad({a, b});
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [a, b, out](Tape& t) {
            const Tensor& g = t.grad(out);
            if (t.requires_grad(a)) {
                Tensor& ga = t.grad(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.requires_grad(b)) {
                Tensor& gb = t.grad(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
            }
        };
    return out;
}

Var Tape::sub(Var a, Var b) {
    check_same_shape(val(a), val(b), "sub");
    Tensor y = val(a);
    const Tensor& vb = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= vb[i];
    const bool rg = any_grad({a, b});
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [a, b, out](Tape& t) {
            const Tensor& g = t.grad(out);
            if (t.requires_grad(a)) {
                Tensor& ga = t.grad(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
            }
            if (t.requires_grad(b)) {
                Tensor& gb = t.grad(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
            }
        };
    return out;
}

Var Tape::mul(Var a, Var b) {
    check_same_shape(val(a), val(b), "mul");
    Tensor y = val(a);
    const Tensor& vb = val(b);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= vb[i];
    const bool rg = any_grad({a, b});
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [a, b, out](Tape& t) {
            const Tensor& g = t.grad(out);
            const Tensor& va = t.val(a);
            const Tensor& vb2 = t.val(b);
            if (t.requires_grad(a)) {
                Tensor& ga = t.grad(a);
                for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb2[i];
            }
            if (t.requires_grad(b)) {
                Tensor& gb = t.grad(b);
                for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
            }
        };
    return out;
}

Var Tape::scale(Var a, double k) {
    Tensor y = val(a);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= k;
    const bool rg = requires_grad(a);
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [a, k, out](Tape& t) {
            const Tensor& g = t.grad(out);
            Tensor& ga = t.grad(a);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += k * g[i];
        };
    return out;
}

Var Tape::sigmoid(Var x) {
    Tensor y = val(x);
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(y[i]);
    const bool rg = requires_grad(x);
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, out](Tape& t) {
            const Tensor& g = t.grad(out);
            const Tensor& s = t.val(out);
            Tensor& gx = t.grad(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s[i] * (1.0 - s[i]);
        };
    return out;
}

Var Tape::silu(Var x) {
    const Tensor& vx = val(x);
    Tensor y(vx.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = vx[i] * stable_sigmoid(vx[i]);
    const bool rg = requires_grad(x);
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, out](Tape& t) {
            const Tensor& g = t.grad(out);
            const Tensor& vx2 = t.val(x);
            Tensor& gx = t.grad(x);
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double s = stable_sigmoid(vx2[i]);
                gx[i] += g[i] * s * (1.0 + vx2[i] * (1.0 - s));
            }
        };
    return out;
}

Var Tape::reshape(Var x, std::vector<std::size_t> shape) {
    if (Tensor::count(shape) != val(x).size()) throw DimensionError("reshape: size mismatch");
    Tensor y(shape, std::vector<double>(val(x).data(), val(x).data() + val(x).size()));
    const bool rg = requires_grad(x);
    Var out = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, out](Tape& t) {
            const Tensor& g = t.grad(out);
            Tensor& gx = t.grad(x);
            for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
        };
    return out;
}

Var Tape::reduce_sum(Var x) {
    double s = 0.0;
    const Tensor& vx = val(x);
    for (std::size_t i = 0; i < vx.size(); ++i) s += vx[i];
    const bool rg = requires_grad(x);
    Var out = make(Tensor::scalar(s), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, out](Tape& t) {
            const double g = t.grad(out)[0];
            Tensor& gx = t.grad(x);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g;
        };
    return out;
}

// -------------------------------------------------------------------- linear

Var Tape::linear(Var x, Var W, Var b) {
    const Tensor& vx = val(x);
    const Tensor& vw = val(W);
    if (vw.rank() != 2 || vx.cols() != vw.dim(0))
        throw DimensionError("linear: inner dims " + Tensor::shape_str(vx.shape()) + " · " +
                             Tensor::shape_str(vw.shape()));
    const std::size_t rows = vx.rows(), in = vw.dim(0), out_dim = vw.dim(1);
    std::vector<std::size_t> oshape(vx.shape());
    oshape.back() = out_dim;
    Tensor y(oshape);
    kernels::matmul(vx.data(), vw.data(), y.data(), rows, in, out_dim);
    if (b.valid()) {
        const Tensor& vb = val(b);
        if (vb.size() != out_dim) throw DimensionError("linear: bias size");
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < out_dim; ++j) y[r * out_dim + j] += vb[j];
    }
    const bool rg = any_grad({x, W, b});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, W, b, o, rows, in, out_dim](Tape& t) {
            const Tensor& g = t.grad(o);
            if (t.requires_grad(x))
                kernels::matmul(g.data(), t.val(W).data(), t.grad(x).data(), rows, out_dim, in,
                                false, true, true);
            if (t.requires_grad(W))
                kernels::matmul(t.val(x).data(), g.data(), t.grad(W).data(), in, rows, out_dim,
                                true, false, true);
            if (b.valid() && t.requires_grad(b)) {
                Tensor& gb = t.grad(b);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < out_dim; ++j) gb[j] += g[r * out_dim + j];
            }
        };
    return o;
}

// ---------------------------------------------------------------- layer norm

Var Tape::layer_norm(Var x, Var gamma, Var beta, double eps) {
    const Tensor& vx = val(x);
    const std::size_t m = vx.cols(), rows = vx.rows();
    if (val(gamma).size() != m || val(beta).size() != m)
        throw DimensionError("layer_norm: affine params must match last axis");
    if (m == 0) throw DimensionError("layer_norm: empty axis");
    Tensor y(vx.shape());
    Tensor xhat(vx.shape());
    Tensor inv_std({rows});
    const Tensor& vg = val(gamma);
    const Tensor& vb = val(beta);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = vx.data() + r * m;
        double mean = 0.0;
        for (std::size_t j = 0; j < m; ++j) mean += xr[j];
        mean /= static_cast<double>(m);
        double var = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            const double dlt = xr[j] - mean;
            var += dlt * dlt;
        }
        var /= static_cast<double>(m);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < m; ++j) {
            const double xh = (xr[j] - mean) * is;
            xhat[r * m + j] = xh;
            y[r * m + j] = xh * vg[j] + vb[j];
        }
    }
    const bool rg = any_grad({x, gamma, beta});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, gamma, beta, o, m, rows, xhat = std::move(xhat),
                                  inv_std = std::move(inv_std)](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& vg2 = t.val(gamma);
            if (t.requires_grad(gamma)) {
                Tensor& gg = t.grad(gamma);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < m; ++j)
                        gg[j] += g[r * m + j] * xhat[r * m + j];
            }
            if (t.requires_grad(beta)) {
                Tensor& gb = t.grad(beta);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < m; ++j) gb[j] += g[r * m + j];
            }
            if (t.requires_grad(x)) {
                Tensor& gx = t.grad(x);
                std::vector<double> gr(m);
                for (std::size_t r = 0; r < rows; ++r) {
                    double mg = 0.0, mgx = 0.0;
                    for (std::size_t j = 0; j < m; ++j) {
                        gr[j] = g[r * m + j] * vg2[j];
                        mg += gr[j];
                        mgx += gr[j] * xhat[r * m + j];
                    }
                    mg /= static_cast<double>(m);
                    mgx /= static_cast<double>(m);
                    for (std::size_t j = 0; j < m; ++j)
                        gx[r * m + j] += inv_std[r] * (gr[j] - mg - xhat[r * m + j] * mgx);
                }
            }
        };
    return o;
}

// ------------------------------------------------------------ masked softmax

Var Tape::masked_softmax(Var x, const Tensor& mask) {
    const Tensor& vx = val(x);
    const std::size_t m = vx.cols(), rows = vx.rows();
    const bool shared = mask.rank() == 1;
    if (shared ? mask.size() != m : !mask.same_shape(vx))
        throw DimensionError("masked_softmax: mask shape");
    Tensor y(vx.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* mr = shared ? mask.data() : mask.data() + r * m;
        const double* xr = vx.data() + r * m;
        double mx = -std::numeric_limits<double>::infinity();
        std::size_t valid = 0;
        for (std::size_t j = 0; j < m; ++j)
            if (mr[j] != 0.0) {
                mx = std::max(mx, xr[j]);
                ++valid;
            }
        if (valid == 0) throw AllMaskedError("masked_softmax: all entries masked in a row");
        double z = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
            if (mr[j] != 0.0) {
                y[r * m + j] = std::exp(xr[j] - mx);
                z += y[r * m + j];
            } else {
                y[r * m + j] = 0.0;
            }
        }
        for (std::size_t j = 0; j < m; ++j) y[r * m + j] /= z;
        for (std::size_t j = 0; j < m; ++j)
            if (mr[j] == 0.0) y[r * m + j] = 0.0;
    }
    const bool rg = requires_grad(x);
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, o, m, rows](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& p = t.val(o);
            Tensor& gx = t.grad(x);
            for (std::size_t r = 0; r < rows; ++r) {
                double dot = 0.0;
                for (std::size_t j = 0; j < m; ++j) dot += p[r * m + j] * g[r * m + j];
                for (std::size_t j = 0; j < m; ++j)
                    gx[r * m + j] += p[r * m + j] * (g[r * m + j] - dot);
            }
        };
    return o;
}

// ------------------------------------------------------- depthwise causal conv

Var Tape::conv1d_depthwise_causal(Var x, Var kernels_v) {
    const Tensor& vx = val(x);
    const Tensor& vk = val(kernels_v);
    const bool batched = vx.rank() == 3;
    if (!batched && vx.rank() != 2) throw DimensionError("conv1d: x must be [T,d] or [B,T,d]");
    const std::size_t B = batched ? vx.dim(0) : 1;
    const std::size_t T = batched ? vx.dim(1) : vx.dim(0);
    const std::size_t d = vx.cols();
    if (vk.rank() != 2 || vk.dim(1) != d) throw DimensionError("conv1d: kernels must be [k,d]");
    const std::size_t k = vk.dim(0);
    if (k < 1) throw DimensionError("conv1d: k >= 1");
    Tensor y(vx.shape());
    for (std::size_t b = 0; b < B; ++b)
        kernels::conv1d_depthwise_causal(vx.data() + b * T * d, vk.data(), y.data() + b * T * d,
                                         T, d, k);
    const bool rg = any_grad({x, kernels_v});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, kernels_v, o, B, T, d, k](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& vk2 = t.val(kernels_v);
            const Tensor& vx2 = t.val(x);
            const bool gx_on = t.requires_grad(x);
            const bool gk_on = t.requires_grad(kernels_v);
            Tensor* gx = gx_on ? &t.grad(x) : nullptr;
            Tensor* gk = gk_on ? &t.grad(kernels_v) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                const std::size_t base = b * T * d;
                for (std::size_t t2 = 0; t2 < T; ++t2) {
                    for (std::size_t j = 0; j < k; ++j) {
                        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t2 + j) -
                                                   static_cast<std::ptrdiff_t>(k) + 1;
                        if (src < 0) continue;
                        const std::size_t s = static_cast<std::size_t>(src);
                        for (std::size_t c = 0; c < d; ++c) {
                            const double gyv = g[base + t2 * d + c];
                            if (gx_on) (*gx)[base + s * d + c] += vk2[j * d + c] * gyv;
                            if (gk_on) (*gk)[j * d + c] += vx2[base + s * d + c] * gyv;
                        }
                    }
                }
            }
        };
    return o;
}

// ----------------------------------------------------------------- attention

Var Tape::attention(Var Q, Var K, Var V, const Tensor& key_mask, std::size_t heads,
                    bool empty_ok, Tensor* probs_out) {
    const Tensor& vq = val(Q);
    const Tensor& vk = val(K);
    const Tensor& vv = val(V);
    if (vq.rank() != 3 || vk.rank() != 3 || vv.rank() != 3)
        throw DimensionError("attention: expects [B,L,d] inputs");
    const std::size_t B = vq.dim(0), Lq = vq.dim(1), d = vq.dim(2);
    const std::size_t Lk = vk.dim(1);
    if (vk.dim(0) != B || vv.dim(0) != B || vk.dim(2) != d || vv.dim(2) != d ||
        vv.dim(1) != Lk)
        throw DimensionError("attention: stream shapes disagree");
    if (heads == 0 || d % heads != 0) throw DimensionError("attention: d must divide by heads");
    if (key_mask.rank() != 2 || key_mask.dim(0) != B || key_mask.dim(1) != Lk)
        throw DimensionError("attention: key_mask must be [B,Lk]");
    const std::size_t dh = d / heads;
    const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

    Tensor y({B, Lq, d});
    Tensor probs({B, heads, Lq, Lk});
    std::vector<char> sample_empty(B, 0);
    for (std::size_t b = 0; b < B; ++b) {
        std::size_t valid = 0;
        for (std::size_t j = 0; j < Lk; ++j)
            if (key_mask.at2(b, j) != 0.0) ++valid;
        if (valid == 0) {
            if (!empty_ok) throw AllMaskedError("attention: sample has no valid keys");
            sample_empty[b] = 1;
            continue;  // y rows stay zero
        }
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t c0 = h * dh;
            for (std::size_t i = 0; i < Lq; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                std::vector<double> s(Lk, 0.0);
                for (std::size_t j = 0; j < Lk; ++j) {
                    if (key_mask.at2(b, j) == 0.0) continue;
                    double acc = 0.0;
                    for (std::size_t c = 0; c < dh; ++c)
                        acc += vq.at3(b, i, c0 + c) * vk.at3(b, j, c0 + c);
                    s[j] = acc * sc;
                    mx = std::max(mx, s[j]);
                }
                double z = 0.0;
                for (std::size_t j = 0; j < Lk; ++j) {
                    if (key_mask.at2(b, j) == 0.0) continue;
                    s[j] = std::exp(s[j] - mx);
                    z += s[j];
                }
                for (std::size_t j = 0; j < Lk; ++j) {
                    const double p = (key_mask.at2(b, j) == 0.0) ? 0.0 : s[j] / z;
                    probs[((b * heads + h) * Lq + i) * Lk + j] = p;
                    if (p != 0.0)
                        for (std::size_t c = 0; c < dh; ++c)
                            y.at3(b, i, c0 + c) += p * vv.at3(b, j, c0 + c);
                }
            }
        }
    }
    if (probs_out) *probs_out = probs;
    const bool rg = any_grad({Q, K, V});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [Q, K, V, o, B, Lq, Lk, d, dh, heads, sc,
                                  probs = std::move(probs),
                                  sample_empty = std::move(sample_empty)](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& vq2 = t.val(Q);
            const Tensor& vk2 = t.val(K);
            const Tensor& vv2 = t.val(V);
            const bool gq_on = t.requires_grad(Q);
            const bool gk_on = t.requires_grad(K);
            const bool gv_on = t.requires_grad(V);
            Tensor* gq = gq_on ? &t.grad(Q) : nullptr;
            Tensor* gk = gk_on ? &t.grad(K) : nullptr;
            Tensor* gv = gv_on ? &t.grad(V) : nullptr;
            std::vector<double> dp(Lk), ds(Lk);
            for (std::size_t b = 0; b < B; ++b) {
                if (sample_empty[b]) continue;
                for (std::size_t h = 0; h < heads; ++h) {
                    const std::size_t c0 = h * dh;
                    for (std::size_t i = 0; i < Lq; ++i) {
                        const double* prow = probs.data() + ((b * heads + h) * Lq + i) * Lk;
                        double dot = 0.0;
                        for (std::size_t j = 0; j < Lk; ++j) {
                            double acc = 0.0;
                            for (std::size_t c = 0; c < dh; ++c)
                                acc += g.at3(b, i, c0 + c) * vv2.at3(b, j, c0 + c);
                            dp[j] = acc;
                            dot += prow[j] * acc;
                        }
                        for (std::size_t j = 0; j < Lk; ++j) ds[j] = prow[j] * (dp[j] - dot);
                        for (std::size_t j = 0; j < Lk; ++j) {
                            if (gv_on && prow[j] != 0.0)
                                for (std::size_t c = 0; c < dh; ++c)
                                    (*gv).at3(b, j, c0 + c) += prow[j] * g.at3(b, i, c0 + c);
                            if (ds[j] == 0.0) continue;
                            const double dsj = ds[j] * sc;
                            for (std::size_t c = 0; c < dh; ++c) {
                                if (gq_on) (*gq).at3(b, i, c0 + c) += dsj * vk2.at3(b, j, c0 + c);
                                if (gk_on) (*gk).at3(b, j, c0 + c) += dsj * vq2.at3(b, i, c0 + c);
                            }
                        }
                    }
                }
            }
        };
    return o;
}

// ------------------------------------------------------------ selective scan

Var Tape::selective_scan(Var u, Var W_delta, Var b_delta, Var a_log, Var W_B, Var W_C,
                         Var D) {
    const Tensor& vu = val(u);
    const bool batched = vu.rank() == 3;
    if (!batched && vu.rank() != 2) throw DimensionError("selective_scan: u must be [T,d] or [B,T,d]");
    const std::size_t B = batched ? vu.dim(0) : 1;
    const std::size_t T = batched ? vu.dim(1) : vu.dim(0);
    const std::size_t d = vu.cols();
    const std::size_t S = val(a_log).size();
    if (val(W_delta).rank() != 2 || val(W_delta).dim(0) != d || val(W_delta).dim(1) != d)
        throw DimensionError("selective_scan: W_delta must be [d,d]");
    if (val(b_delta).size() != d) throw DimensionError("selective_scan: b_delta must be [d]");
    if (val(W_B).rank() != 2 || val(W_B).dim(0) != d || val(W_B).dim(1) != S)
        throw DimensionError("selective_scan: W_B must be [d,S]");
    if (val(W_C).rank() != 2 || val(W_C).dim(0) != d || val(W_C).dim(1) != S)
        throw DimensionError("selective_scan: W_C must be [d,S]");
    if (val(D).size() != d) throw DimensionError("selective_scan: D must be [d]");
    if (S < 1) throw DimensionError("selective_scan: d_state >= 1");

    Tensor a({S});
    for (std::size_t j = 0; j < S; ++j) a[j] = -std::exp(val(a_log)[j]);

    Tensor pre({B, T, d});   // delta preactivations
    Tensor delta({B, T, d});
    Tensor Bm({B, T, S});
    Tensor Cm({B, T, S});
    Tensor h({B, T, d, S});
    Tensor y(vu.shape());
    const Tensor& vb = val(b_delta);
    for (std::size_t b = 0; b < B; ++b) {
        const double* ub = vu.data() + b * T * d;
        double* preb = pre.data() + b * T * d;
        double* delb = delta.data() + b * T * d;
        kernels::matmul(ub, val(W_delta).data(), preb, T, d, d);
        for (std::size_t t = 0; t < T; ++t)
            for (std::size_t c = 0; c < d; ++c) {
                preb[t * d + c] += vb[c];
                delb[t * d + c] = softplus(preb[t * d + c]);
            }
        kernels::matmul(ub, val(W_B).data(), Bm.data() + b * T * S, T, d, S);
        kernels::matmul(ub, val(W_C).data(), Cm.data() + b * T * S, T, d, S);
        kernels::selective_scan_seq(ub, delb, Bm.data() + b * T * S, Cm.data() + b * T * S,
                                    a.data(), val(D).data(), y.data() + b * T * d, T, d, S,
                                    h.data() + b * T * d * S);
    }
    const bool rg = any_grad({u, W_delta, b_delta, a_log, W_B, W_C, D});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [u, W_delta, b_delta, a_log, W_B, W_C, D, o, B, T, d, S,
                                  pre = std::move(pre), delta = std::move(delta),
                                  Bm = std::move(Bm), Cm = std::move(Cm), h = std::move(h),
                                  a = std::move(a)](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& vu2 = t.val(u);
            const Tensor& vD = t.val(D);
            Tensor gdelta({T, d});
            Tensor gB({T, S});
            Tensor gC({T, S});
            Tensor gu_local({T, d});
            std::vector<double> gh(d * S);
            Tensor ga({S});
            Tensor gD_acc({d});
            Tensor gpre({T, d});
            for (std::size_t b = 0; b < B; ++b) {
                gdelta.fill(0.0);
                gB.fill(0.0);
                gC.fill(0.0);
                gu_local.fill(0.0);
                std::fill(gh.begin(), gh.end(), 0.0);
                const double* ub = vu2.data() + b * T * d;
                const double* delb = delta.data() + b * T * d;
                const double* Bb = Bm.data() + b * T * S;
                const double* Cb = Cm.data() + b * T * S;
                const double* hb = h.data() + b * T * d * S;
                const double* gyb = g.data() + b * T * d;
                for (std::size_t ti = T; ti-- > 0;) {
                    for (std::size_t c = 0; c < d; ++c) {
                        const double gy = gyb[ti * d + c];
                        const double ut = ub[ti * d + c];
                        gD_acc[c] += gy * ut;
                        gu_local[ti * d + c] += gy * vD[c];
                        const double dt = delb[ti * d + c];
                        double* ghc = gh.data() + c * S;
                        const double* hc = hb + (ti * d + c) * S;
                        const double* hprev = ti > 0 ? hb + ((ti - 1) * d + c) * S : nullptr;
                        double gd_acc = 0.0, gu_acc = 0.0;
                        for (std::size_t j = 0; j < S; ++j) {
                            // readout contribution into h_t and C_t
                            ghc[j] += gy * Cb[ti * S + j];
                            gC[ti * S + j] += gy * hc[j];
                            // recurrence coefficients
                            const double A = std::exp(dt * a[j]);
                            const double hp = hprev ? hprev[j] : 0.0;
                            const double ghj = ghc[j];
                            gd_acc += ghj * (A * a[j] * hp + Bb[ti * S + j] * ut);
                            ga[j] += ghj * A * dt * hp;
                            gB[ti * S + j] += ghj * dt * ut;
                            gu_acc += ghj * dt * Bb[ti * S + j];
                            ghc[j] = ghj * A;  // pass to h_{t-1}
                        }
                        gdelta[ti * d + c] += gd_acc;
                        gu_local[ti * d + c] += gu_acc;
                    }
                }
                // delta = softplus(pre)
                const double* preb = pre.data() + b * T * d;
                for (std::size_t i = 0; i < T * d; ++i)
                    gpre[i] = gdelta[i] * stable_sigmoid(preb[i]);
                if (t.requires_grad(W_delta))
                    kernels::matmul(ub, gpre.data(), t.grad(W_delta).data(), d, T, d, true,
                                    false, true);
                if (t.requires_grad(b_delta)) {
                    Tensor& gbd = t.grad(b_delta);
                    for (std::size_t ti = 0; ti < T; ++ti)
                        for (std::size_t c = 0; c < d; ++c) gbd[c] += gpre[ti * d + c];
                }
                if (t.requires_grad(W_B))
                    kernels::matmul(ub, gB.data(), t.grad(W_B).data(), d, T, S, true, false,
                                    true);
                if (t.requires_grad(W_C))
                    kernels::matmul(ub, gC.data(), t.grad(W_C).data(), d, T, S, true, false,
                                    true);
                if (t.requires_grad(u)) {
                    Tensor& gu = t.grad(u);
                    double* gub = gu.data() + b * T * d;
                    kernels::matmul(gpre.data(), t.val(W_delta).data(), gub, T, d, d, false,
                                    true, true);
                    kernels::matmul(gB.data(), t.val(W_B).data(), gub, T, S, d, false, true,
                                    true);
                    kernels::matmul(gC.data(), t.val(W_C).data(), gub, T, S, d, false, true,
                                    true);
                    for (std::size_t i = 0; i < T * d; ++i) gub[i] += gu_local[i];
                }
            }
            if (t.requires_grad(a_log)) {
                Tensor& gal = t.grad(a_log);
                for (std::size_t j = 0; j < S; ++j) gal[j] += ga[j] * a[j];
            }
            if (t.requires_grad(D)) {
                Tensor& gD = t.grad(D);
                for (std::size_t c = 0; c < d; ++c) gD[c] += gD_acc[c];
            }
        };
    return o;
}

// ------------------------------------------------------------- masked pooling

Var Tape::masked_mean(Var x, const Tensor& mask) {
    const Tensor& vx = val(x);
    if (vx.rank() != 3) throw DimensionError("masked_mean: x must be [B,T,d]");
    const std::size_t B = vx.dim(0), T = vx.dim(1), d = vx.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != T)
        throw DimensionError("masked_mean: mask must be [B,T]");
    Tensor y({B, d});
    std::vector<double> inv_n(B);
    for (std::size_t b = 0; b < B; ++b) {
        double n = 0.0;
        for (std::size_t t = 0; t < T; ++t) n += (mask.at2(b, t) != 0.0) ? 1.0 : 0.0;
        if (n == 0.0) throw AllMaskedError("masked_mean: sample with empty mask");
        inv_n[b] = 1.0 / n;
        for (std::size_t t = 0; t < T; ++t) {
            if (mask.at2(b, t) == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c) y.at2(b, c) += vx.at3(b, t, c);
        }
        for (std::size_t c = 0; c < d; ++c) y.at2(b, c) *= inv_n[b];
    }
    const bool rg = requires_grad(x);
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, o, B, T, d, mask, inv_n = std::move(inv_n)](Tape& t) {
            const Tensor& g = t.grad(o);
            Tensor& gx = t.grad(x);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t2 = 0; t2 < T; ++t2) {
                    if (mask.at2(b, t2) == 0.0) continue;
                    for (std::size_t c = 0; c < d; ++c)
                        gx.at3(b, t2, c) += g.at2(b, c) * inv_n[b];
                }
        };
    return o;
}

Var Tape::mul_rowmask(Var x, const Tensor& mask) {
    const Tensor& vx = val(x);
    if (vx.rank() != 3) throw DimensionError("mul_rowmask: x must be [B,T,d]");
    const std::size_t B = vx.dim(0), T = vx.dim(1), d = vx.dim(2);
    if (mask.rank() != 2 || mask.dim(0) != B || mask.dim(1) != T)
        throw DimensionError("mul_rowmask: mask must be [B,T]");
    Tensor y = vx;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T; ++t)
            if (mask.at2(b, t) == 0.0)
                for (std::size_t c = 0; c < d; ++c) y.at3(b, t, c) = 0.0;
    const bool rg = requires_grad(x);
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, o, B, T, d, mask](Tape& t) {
            const Tensor& g = t.grad(o);
            Tensor& gx = t.grad(x);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t t2 = 0; t2 < T; ++t2) {
                    if (mask.at2(b, t2) == 0.0) continue;
                    for (std::size_t c = 0; c < d; ++c) gx.at3(b, t2, c) += g.at3(b, t2, c);
                }
        };
    return o;
}

Var Tape::add_slotwise(Var x, Var table) {
    const Tensor& vx = val(x);
    const Tensor& vt = val(table);
    if (vx.rank() != 3) throw DimensionError("add_slotwise: x must be [B,N,d]");
    const std::size_t B = vx.dim(0), N = vx.dim(1), d = vx.dim(2);
    if (vt.rank() != 2 || vt.dim(0) != N || vt.dim(1) != d)
        throw DimensionError("add_slotwise: table must be [N,d]");
    Tensor y = vx;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i)
            for (std::size_t c = 0; c < d; ++c) y.at3(b, i, c) += vt.at2(i, c);
    const bool rg = any_grad({x, table});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, table, o, B, N, d](Tape& t) {
            const Tensor& g = t.grad(o);
            if (t.requires_grad(x)) {
                Tensor& gx = t.grad(x);
                for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
            }
            if (t.requires_grad(table)) {
                Tensor& gt = t.grad(table);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t c = 0; c < d; ++c) gt.at2(i, c) += g.at3(b, i, c);
            }
        };
    return o;
}

Var Tape::concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const std::size_t B = val(parts[0]).dim(0);
    std::size_t total = 0;
    bool rg = false;
    for (Var p : parts) {
        const Tensor& v = val(p);
        if (v.rank() != 2 || v.dim(0) != B) throw DimensionError("concat_cols: parts must be [B,*]");
        total += v.dim(1);
        rg = rg || requires_grad(p);
    }
    Tensor y({B, total});
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& v = val(p);
        const std::size_t w = v.dim(1);
        for (std::size_t b = 0; b < B; ++b)
            std::memcpy(y.data() + b * total + off, v.data() + b * w, w * sizeof(double));
        off += w;
    }
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [parts, o, B, total](Tape& t) {
            const Tensor& g = t.grad(o);
            std::size_t off2 = 0;
            for (Var p : parts) {
                const std::size_t w = t.val(p).dim(1);
                if (t.requires_grad(p)) {
                    Tensor& gp = t.grad(p);
                    for (std::size_t b = 0; b < B; ++b)
                        for (std::size_t j = 0; j < w; ++j)
                            gp.at2(b, j) += g[b * total + off2 + j];
                }
                off2 += w;
            }
        };
    return o;
}

Var Tape::slice_cols(Var x, std::size_t start, std::size_t len) {
    const Tensor& vx = val(x);
    const std::size_t m = vx.cols(), rows = vx.rows();
    if (start + len > m) throw DimensionError("slice_cols: out of range");
    std::vector<std::size_t> oshape(vx.shape());
    oshape.back() = len;
    Tensor y(oshape);
    for (std::size_t r = 0; r < rows; ++r)
        std::memcpy(y.data() + r * len, vx.data() + r * m + start, len * sizeof(double));
    const bool rg = requires_grad(x);
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [x, o, start, len, m, rows](Tape& t) {
            const Tensor& g = t.grad(o);
            Tensor& gx = t.grad(x);
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t j = 0; j < len; ++j)
                    gx[r * m + start + j] += g[r * len + j];
        };
    return o;
}

Var Tape::concat_slot_text(Var V, Var t) {
    const Tensor& vv = val(V);
    const Tensor& vt = val(t);
    if (vv.rank() != 3 || vt.rank() != 2) throw DimensionError("concat_slot_text: shapes");
    const std::size_t B = vv.dim(0), N = vv.dim(1), d = vv.dim(2);
    if (vt.dim(0) != B || vt.dim(1) != d) throw DimensionError("concat_slot_text: t must be [B,d]");
    Tensor y({B, N, 2 * d});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i) {
            std::memcpy(y.data() + (b * N + i) * 2 * d, vv.data() + (b * N + i) * d,
                        d * sizeof(double));
            std::memcpy(y.data() + (b * N + i) * 2 * d + d, vt.data() + b * d,
                        d * sizeof(double));
        }
    const bool rg = any_grad({V, t});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [V, t, o, B, N, d](Tape& tp) {
            const Tensor& g = tp.grad(o);
            if (tp.requires_grad(V)) {
                Tensor& gv = tp.grad(V);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t c = 0; c < d; ++c)
                            gv.at3(b, i, c) += g[(b * N + i) * 2 * d + c];
            }
            if (tp.requires_grad(t)) {
                Tensor& gt = tp.grad(t);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t i = 0; i < N; ++i)
                        for (std::size_t c = 0; c < d; ++c)
                            gt.at2(b, c) += g[(b * N + i) * 2 * d + d + c];
            }
        };
    return o;
}

Var Tape::cosine_scores(Var A, Var u) {
    const Tensor& va = val(A);
    const Tensor& vu = val(u);
    if (va.rank() != 3 || vu.rank() != 2) throw DimensionError("cosine_scores: shapes");
    const std::size_t B = va.dim(0), N = va.dim(1), d = va.dim(2);
    if (vu.dim(0) != B || vu.dim(1) != d) throw DimensionError("cosine_scores: u must be [B,d]");
    constexpr double kTiny = 1e-12;
    Tensor y({B, N});
    for (std::size_t b = 0; b < B; ++b) {
        double nu = 0.0;
        for (std::size_t c = 0; c < d; ++c) nu += vu.at2(b, c) * vu.at2(b, c);
        nu = std::sqrt(nu);
        for (std::size_t i = 0; i < N; ++i) {
            double na = 0.0, dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                na += va.at3(b, i, c) * va.at3(b, i, c);
                dot += va.at3(b, i, c) * vu.at2(b, c);
            }
            na = std::sqrt(na);
            y.at2(b, i) = (na < kTiny || nu < kTiny) ? 0.0 : dot / (na * nu);
        }
    }
    const bool rg = any_grad({A, u});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [A, u, o, B, N, d, kTiny](Tape& t) {
            const Tensor& g = t.grad(o);
            const Tensor& va2 = t.val(A);
            const Tensor& vu2 = t.val(u);
            const Tensor& s = t.val(o);
            const bool ga_on = t.requires_grad(A);
            const bool gu_on = t.requires_grad(u);
            Tensor* ga = ga_on ? &t.grad(A) : nullptr;
            Tensor* gu = gu_on ? &t.grad(u) : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                double nu = 0.0;
                for (std::size_t c = 0; c < d; ++c) nu += vu2.at2(b, c) * vu2.at2(b, c);
                nu = std::sqrt(nu);
                if (nu < kTiny) continue;
                for (std::size_t i = 0; i < N; ++i) {
                    double na = 0.0;
                    for (std::size_t c = 0; c < d; ++c)
                        na += va2.at3(b, i, c) * va2.at3(b, i, c);
                    na = std::sqrt(na);
                    if (na < kTiny) continue;
                    const double gi = g.at2(b, i);
                    if (gi == 0.0) continue;
                    const double sv = s.at2(b, i);
                    for (std::size_t c = 0; c < d; ++c) {
                        if (ga_on)
                            (*ga).at3(b, i, c) += gi * (vu2.at2(b, c) / (na * nu) -
                                                        sv * va2.at3(b, i, c) / (na * na));
                        if (gu_on)
                            (*gu).at2(b, c) += gi * (va2.at3(b, i, c) / (na * nu) -
                                                     sv * vu2.at2(b, c) / (nu * nu));
                    }
                }
            }
        };
    return o;
}

Var Tape::rgf_fuse(Var w, Var t, Var V) {
    const Tensor& vw = val(w);
    const Tensor& vt = val(t);
    const Tensor& vv = val(V);
    if (vw.rank() != 2 || vt.rank() != 2 || vv.rank() != 3) throw DimensionError("rgf_fuse: shapes");
    const std::size_t B = vw.dim(0), N = vw.dim(1), d = vt.dim(1);
    if (vv.dim(0) != B || vv.dim(1) != N || vv.dim(2) != d || vt.dim(0) != B)
        throw DimensionError("rgf_fuse: shapes disagree");
    Tensor y({B, d});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < N; ++i) {
            const double wi = vw.at2(b, i);
            if (wi == 0.0) continue;
            for (std::size_t c = 0; c < d; ++c)
                y.at2(b, c) += wi * vt.at2(b, c) * vv.at3(b, i, c);
        }
    const bool rg = any_grad({w, t, V});
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [w, t, V, o, B, N, d](Tape& tp) {
            const Tensor& g = tp.grad(o);
            const Tensor& vw2 = tp.val(w);
            const Tensor& vt2 = tp.val(t);
            const Tensor& vv2 = tp.val(V);
            const bool gw_on = tp.requires_grad(w);
            const bool gt_on = tp.requires_grad(t);
            const bool gv_on = tp.requires_grad(V);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t i = 0; i < N; ++i) {
                    const double wi = vw2.at2(b, i);
                    for (std::size_t c = 0; c < d; ++c) {
                        const double gc = g.at2(b, c);
                        if (gw_on)
                            tp.grad(w).at2(b, i) += gc * vt2.at2(b, c) * vv2.at3(b, i, c);
                        if (gt_on) tp.grad(t).at2(b, c) += gc * wi * vv2.at3(b, i, c);
                        if (gv_on) tp.grad(V).at3(b, i, c) += gc * wi * vt2.at2(b, c);
                    }
                }
        };
    return o;
}

Var Tape::embedding(Var table, const std::vector<int>& idx) {
    const Tensor& vt = val(table);
    if (vt.rank() != 2) throw DimensionError("embedding: table must be [V,d]");
    const std::size_t V = vt.dim(0), d = vt.dim(1), B = idx.size();
    for (int i : idx)
        if (i < 0 || static_cast<std::size_t>(i) >= V)
            throw DimensionError("embedding: index out of range");
    Tensor y({B, d});
    for (std::size_t b = 0; b < B; ++b)
        std::memcpy(y.data() + b * d, vt.data() + static_cast<std::size_t>(idx[b]) * d,
                    d * sizeof(double));
    const bool rg = requires_grad(table);
    Var o = make(std::move(y), rg, nullptr);
    if (rg)
        nodes_.back().backward = [table, o, idx, d, B](Tape& t) {
            const Tensor& g = t.grad(o);
            Tensor& gt = t.grad(table);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t c = 0; c < d; ++c)
                    gt.at2(static_cast<std::size_t>(idx[b]), c) += g.at2(b, c);
        };
    return o;
}

Var Tape::weighted_cross_entropy(Var logits, const std::vector<int>& labels,
                                 const std::vector<double>& class_weights) {
    const Tensor& vl = val(logits);
    if (vl.rank() != 2) throw DimensionError("weighted_ce: logits must be [B,K]");
    const std::size_t B = vl.dim(0), K = vl.dim(1);
    if (labels.size() != B) throw DimensionError("weighted_ce: label count");
    if (class_weights.size() != K) throw DimensionError("weighted_ce: weight count");
    if (!vl.all_finite()) throw NonFiniteGradient("weighted_ce: non-finite logits");
    Tensor p({B, K});
    double loss = 0.0;
    for (std::size_t b = 0; b < B; ++b) {
        const int yb = labels[b];
        if (yb < 0 || static_cast<std::size_t>(yb) >= K)
            throw DimensionError("weighted_ce: label out of range");
        double mx = vl.at2(b, 0);
        for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, vl.at2(b, k));
        double z = 0.0;
        for (std::size_t k = 0; k < K; ++k) {
            p.at2(b, k) = std::exp(vl.at2(b, k) - mx);
            z += p.at2(b, k);
        }
        for (std::size_t k = 0; k < K; ++k) p.at2(b, k) /= z;
        const double lse = mx + std::log(z);
        loss += class_weights[static_cast<std::size_t>(yb)] *
                (lse - vl.at2(b, static_cast<std::size_t>(yb)));
    }
    loss /= static_cast<double>(B);
    const bool rg = requires_grad(logits);
    Var o = make(Tensor::scalar(loss), rg, nullptr);
    if (rg)
        nodes_.back().backward = [logits, o, labels, class_weights, B, K,
                                  p = std::move(p)](Tape& t) {
            const double go = t.grad(o)[0];
            Tensor& gl = t.grad(logits);
            for (std::size_t b = 0; b < B; ++b) {
                const double wb = class_weights[static_cast<std::size_t>(labels[b])];
                for (std::size_t k = 0; k < K; ++k) {
                    const double ind = (static_cast<std::size_t>(labels[b]) == k) ? 1.0 : 0.0;
                    gl.at2(b, k) += go * wb * (p.at2(b, k) - ind) / static_cast<double>(B);
                }
            }
        };
    return o;
}

}  // namespace cirm::autograd
