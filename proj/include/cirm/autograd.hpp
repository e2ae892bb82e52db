#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm::autograd {

struct Var {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

// Reverse-mode tape over dense double tensors. Each op appends a node
// holding the forward value plus a closure that scatters the node's
// gradient into its parents. backward() walks the tape once in reverse
// creation order, which is a valid topological order by construction.
class Tape {
public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false);

    const Tensor& val(Var v) const { return nodes_[check(v)].value; }
    Tensor& grad(Var v);
    bool has_grad(Var v) const { return nodes_[check(v)].grad_alloc; }
    bool requires_grad(Var v) const { return nodes_[check(v)].requires_grad; }
    std::size_t size() const { return nodes_.size(); }

    // Seeds d(loss)/d(loss)=1 and propagates. loss must be a scalar node.
    void backward(Var loss);

    // ---- elementwise / shape ----
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, double k);
    Var sigmoid(Var x);
    Var silu(Var x);
    Var reshape(Var x, std::vector<std::size_t> shape);
    Var reduce_sum(Var x);

    // y = x·W (+ b). x is [..., in], W [in,out], optional b [out].
    Var linear(Var x, Var W, Var b = {});

    Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

    // Softmax over the last axis restricted to mask==1 entries; masked-out
    // outputs are exactly zero. mask is either rank-1 [k] (shared by all
    // rows) or the same shape as x. A row with no valid entry throws
    // AllMaskedError.
    Var masked_softmax(Var x, const Tensor& mask);

    // x [B,T,d] (or [T,d]), kernels [k,d], causal left zero padding.
    Var conv1d_depthwise_causal(Var x, Var kernels);

    // Scaled dot-product attention over pre-projected streams.
    // Q [B,Lq,d], K/V [B,Lk,d], key_mask [B,Lk]. If a sample has no valid
    // key: empty_ok => its output rows are zero, else AllMaskedError.
    // probs_out, when non-null, receives the [B,heads,Lq,Lk] attention maps.
    Var attention(Var Q, Var K, Var V, const Tensor& key_mask, std::size_t heads,
                  bool empty_ok = false, Tensor* probs_out = nullptr);

    // Diagonal input-selective state space over u [B,T,d].
    //   delta_t = softplus(u_t·W_delta + b_delta), a_j = -exp(a_log_j),
    //   B_t = u_t·W_B, C_t = u_t·W_C,
    //   h_t[c,j] = exp(delta_t[c] a_j) h_{t-1}[c,j] + delta_t[c] B_t[j] u_t[c],
    //   y_t[c] = sum_j C_t[j] h_t[c,j] + D[c] u_t[c].
    Var selective_scan(Var u, Var W_delta, Var b_delta, Var a_log, Var W_B, Var W_C,
                       Var D);

    // x [B,T,d], mask [B,T] -> [B,d]; mean over mask==1 rows (>=1 required).
    Var masked_mean(Var x, const Tensor& mask);

    // Zero out rows whose mask entry is 0. x [B,T,d], mask [B,T].
    Var mul_rowmask(Var x, const Tensor& mask);

    // x [B,N,d] + table [N,d], broadcast over the batch.
    Var add_slotwise(Var x, Var table);

    // parts each [B,d_i] -> [B, sum d_i].
    Var concat_cols(const std::vector<Var>& parts);

    // Last-axis slice [..., start, start+len).
    Var slice_cols(Var x, std::size_t start, std::size_t len);

    // [B,N,2d] rows [V[b,i,:] ; t[b,:]].
    Var concat_slot_text(Var V, Var t);

    // s[b,i] = cos(A[b,i,:], u[b,:]); zero-norm inputs score 0 with zero grad.
    Var cosine_scores(Var A, Var u);

    // f[b,:] = sum_i w[b,i] * (t[b,:] ⊙ V[b,i,:]).
    Var rgf_fuse(Var w, Var t, Var V);

    // table [V,dr], idx per batch row -> [B,dr].
    Var embedding(Var table, const std::vector<int>& idx);

    // Mean over the batch of w[y_b] * (logsumexp(logits_b) - logits_b[y_b]).
    Var weighted_cross_entropy(Var logits, const std::vector<int>& labels,
                               const std::vector<double>& class_weights);

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool grad_alloc = false;
        bool requires_grad = false;
        std::function<void(Tape&)> backward;
    };

    int check(Var v) const {
        if (!v.valid() || v.idx >= static_cast<int>(nodes_.size()))
            throw std::logic_error("autograd: invalid var");
        return v.idx;
    }

    Var make(Tensor value, bool requires_grad, std::function<void(Tape&)> bw);
    bool any_grad(std::initializer_list<Var> vs) const;

    std::vector<Node> nodes_;
};

}  // namespace cirm::autograd
