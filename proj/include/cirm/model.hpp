#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "cirm/autograd.hpp"
#include "cirm/batch.hpp"
#include "cirm/params.hpp"

#include <json.hpp>

namespace cirm::model {

using autograd::Tape;
using autograd::Var;

struct Toggles {
    bool dsbm = true;
    bool pre_bridge = true;
    bool seq_block = true;
    bool post_bridge = true;
    bool pe = true;
    bool ocr = true;
    bool rgf = true;
};

struct ModelConfig {
    std::size_t d = 32;
    std::size_t n_images = kMaxImages;
    std::size_t heads = 4;
    std::size_t d_state = 16;
    std::size_t conv_k = 4;
    double alpha = 0.3;
    std::size_t fuse_hidden = 64;
    std::size_t rating_vocab = 6;
    std::array<double, 2> class_weights{1.0, 1.0};
    Toggles toggles;
    std::uint64_t seed = 42;

    std::size_t rating_dim() const { return std::max<std::size_t>(4, d / 4); }

    // A disabled dual-stage bridge disables all three of its stages.
    bool eff_pre() const { return toggles.dsbm && toggles.pre_bridge; }
    bool eff_seq() const { return toggles.dsbm && toggles.seq_block; }
    bool eff_post() const { return toggles.dsbm && toggles.post_bridge; }
    // OCR alignment lives inside the relevance-guided branch.
    bool eff_ocr() const { return toggles.rgf && toggles.ocr; }
    bool eff_rgf() const { return toggles.rgf; }

    void validate() const;
};

nlohmann::ordered_json config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const nlohmann::json& j);
std::string config_hash(const ModelConfig& cfg);

// Deterministic initialization; only parameters of enabled stages exist.
ParameterStore init_parameters(const ModelConfig& cfg);
std::size_t parameter_count(const ModelConfig& cfg);

// Table-4 style variants: dsbm, pe, ocr, rgf, dsbm_pre, dsbm_sequence,
// dsbm_post. Unknown names raise ConfigError.
ModelConfig ablation_variant(const ModelConfig& base, const std::string& name);
// (internal name, display name) rows in presentation order, full model last.
const std::vector<std::pair<std::string, std::string>>& ablation_rows();

// Per-sample activations exposed for tests and the attention dump.
struct SampleTrace {
    std::string id;
    std::size_t L = 0, n = 0, N = 0;
    std::vector<double> s_cos, s_lrn, s, w;  // [N]; empty when RGF disabled
    double gate_min = 1.0, gate_max = 0.0;
    double gate_pre_text = 0.0, gate_pre_img = 0.0;
    double gate_post_text = 0.0, gate_post_img = 0.0;
    bool has_gates = false;
    // Head-mean attention maps, row-major.
    std::vector<std::vector<double>> attn_pre_t2v, attn_pre_v2t;
    std::vector<std::vector<double>> attn_post_t2v, attn_post_v2t;
    std::vector<std::vector<double>> attn_ocr_text, attn_ocr_img;
    std::vector<double> logits;  // [2]
    int pred = 0;
    int label = 0;
};

struct ForwardOutput {
    Var logits_var;
    Var loss_var;  // invalid unless with_loss
    Tensor logits;
    double loss = 0.0;
    std::vector<Var> param_vars;  // aligned with ParameterStore order
    std::vector<SampleTrace> trace;
};

// Full pipeline: positional encoding -> parallel relevance-guided branch on
// the literal (T, V, O) inputs -> pre-bridge -> per-stream sequential block
// -> post-bridge -> pooled classification head. Disabled toggles are
// identity maps. train_mode controls whether parameters track gradients.
ForwardOutput forward_batch(Tape& tape, const Batch& batch, const ParameterStore& params,
                            const ModelConfig& cfg, bool with_loss, bool train_mode,
                            bool want_trace = false);

// Argmax with ties broken toward label 0.
inline int predict_from_logits(double l0, double l1) { return l1 > l0 ? 1 : 0; }

// ----- submodule entry points, exposed so tests can drive them directly -----

struct BridgeStreamVars {
    Var wq, wk, wv, wo;
    Var gate_w, gate_b;
    Var ln_g, ln_b;
};
struct BridgeVars {
    BridgeStreamVars text, img;
};

// Gated cross-modal exchange: each stream attends over the other (keys
// masked), sigmoid gates scale the attended update, LayerNorm over the
// gated residual, then padded query rows are zeroed.
std::pair<Var, Var> cross_modal_bridge(Tape& t, Var T, Var V, const Tensor& text_mask,
                                       const Tensor& image_mask, const BridgeVars& p,
                                       std::size_t heads, Tensor* probs_t2v = nullptr,
                                       Tensor* probs_v2t = nullptr, Var* gate_t = nullptr,
                                       Var* gate_v = nullptr);

struct SeqVars {
    Var ln_g, ln_b;
    Var w_in;             // [d,2d] -> main stream U and gate stream Z
    Var conv;             // [k,d]
    Var w_delta, b_delta;
    Var a_log, w_b, w_c, skip_d;
    Var w_out;
};

// LN -> split -> masked depthwise causal conv + SiLU -> masked selective
// scan -> SiLU(Z) gate -> output projection; residual added with padded
// steps restored to their input.
Var sequential_block(Tape& t, Var H, const Tensor& mask, const SeqVars& p);

// Bound parameter handles for one tape.
struct BoundParams {
    std::vector<Var> by_index;
    std::unordered_map<std::string, Var> by_name;
    Var operator()(const std::string& name) const {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw LookupError("unbound parameter: " + name);
        return it->second;
    }
};
BoundParams bind_parameters(Tape& t, const ParameterStore& params, bool requires_grad);

}  // namespace cirm::model
