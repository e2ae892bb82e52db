#include "cirm/model.hpp"

#include <cmath>

#include "cirm/rng.hpp"

namespace cirm::model {

void ModelConfig::validate() const {
    if (d < 1) throw ConfigError("model: d must be >= 1");
    if (heads < 1 || d % heads != 0) throw ConfigError("model: d must be divisible by heads");
    if (n_images < 1) throw ConfigError("model: n_images must be >= 1");
    if (d_state < 1) throw ConfigError("model: d_state must be >= 1");
    if (conv_k < 1) throw ConfigError("model: conv_k must be >= 1");
    if (fuse_hidden < 1) throw ConfigError("model: fuse_hidden must be >= 1");
    if (rating_vocab != 6) throw ConfigError("model: rating_vocab must be 6");
    if (alpha < 0.0 || alpha > 1.0) throw ConfigError("model: alpha must be in [0,1]");
    if (class_weights[0] <= 0.0 || class_weights[1] <= 0.0)
        throw ConfigError("model: class weights must be positive");
}

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
    nlohmann::ordered_json j;
    j["d"] = c.d;
    j["n_images"] = c.n_images;
    j["heads"] = c.heads;
    j["d_state"] = c.d_state;
    j["conv_k"] = c.conv_k;
    j["alpha"] = c.alpha;
    j["fuse_hidden"] = c.fuse_hidden;
    j["rating_vocab"] = c.rating_vocab;
    j["class_weights"] = {c.class_weights[0], c.class_weights[1]};
    j["toggles"] = {{"dsbm", c.toggles.dsbm},
                    {"pre_bridge", c.toggles.pre_bridge},
                    {"seq_block", c.toggles.seq_block},
                    {"post_bridge", c.toggles.post_bridge},
                    {"pe", c.toggles.pe},
                    {"ocr", c.toggles.ocr},
                    {"rgf", c.toggles.rgf}};
    j["seed"] = c.seed;
    return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "d") c.d = it->get<std::size_t>();
        else if (k == "n_images") c.n_images = it->get<std::size_t>();
        else if (k == "heads") c.heads = it->get<std::size_t>();
        else if (k == "d_state") c.d_state = it->get<std::size_t>();
        else if (k == "conv_k") c.conv_k = it->get<std::size_t>();
        else if (k == "alpha") c.alpha = it->get<double>();
        else if (k == "fuse_hidden") c.fuse_hidden = it->get<std::size_t>();
        else if (k == "rating_vocab") c.rating_vocab = it->get<std::size_t>();
        else if (k == "class_weights") {
            if (!it->is_array() || it->size() != 2)
                throw ConfigError("model config: class_weights must have 2 entries");
            c.class_weights = {(*it)[0].get<double>(), (*it)[1].get<double>()};
        } else if (k == "toggles") {
            for (auto t = it->begin(); t != it->end(); ++t) {
                const std::string& n = t.key();
                const bool v = t->get<bool>();
                if (n == "dsbm") c.toggles.dsbm = v;
                else if (n == "pre_bridge") c.toggles.pre_bridge = v;
                else if (n == "seq_block") c.toggles.seq_block = v;
                else if (n == "post_bridge") c.toggles.post_bridge = v;
                else if (n == "pe") c.toggles.pe = v;
                else if (n == "ocr") c.toggles.ocr = v;
                else if (n == "rgf") c.toggles.rgf = v;
                else throw ConfigError("model config: unknown toggle '" + n + "'");
            }
        } else if (k == "seed") c.seed = it->get<std::uint64_t>();
        else throw ConfigError("model config: unknown field '" + k + "'");
    }
    c.validate();
    return c;
}

std::string config_hash(const ModelConfig& c) {
    const std::string s = config_to_json(c).dump();
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

Tensor init_linear(Rng& rng, std::size_t in, std::size_t out) {
    Tensor w({in, out});
    const double lim = std::sqrt(1.0 / static_cast<double>(in));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.uniform(-lim, lim);
    return w;
}

Tensor init_gauss(Rng& rng, std::vector<std::size_t> shape, double sd) {
    Tensor t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = sd * rng.gaussian();
    return t;
}

void add_bridge_stream(ParameterStore& ps, Rng& rng, const std::string& prefix,
                       std::size_t d) {
    ps.add(prefix + ".wq", init_linear(rng, d, d));
    ps.add(prefix + ".wk", init_linear(rng, d, d));
    ps.add(prefix + ".wv", init_linear(rng, d, d));
    ps.add(prefix + ".wo", init_linear(rng, d, d));
    ps.add(prefix + ".gate_w", init_linear(rng, d, d));
    ps.add(prefix + ".gate_b", Tensor({d}));
    ps.add(prefix + ".ln_g", Tensor::full({d}, 1.0));
    ps.add(prefix + ".ln_b", Tensor({d}));
}

void add_seq_stream(ParameterStore& ps, Rng& rng, const std::string& prefix,
                    const ModelConfig& c) {
    const std::size_t d = c.d, S = c.d_state, k = c.conv_k;
    ps.add(prefix + ".ln_g", Tensor::full({d}, 1.0));
    ps.add(prefix + ".ln_b", Tensor({d}));
    ps.add(prefix + ".w_in", init_linear(rng, d, 2 * d));
    Tensor conv({k, d});
    const double clim = std::sqrt(1.0 / static_cast<double>(k));
    for (std::size_t i = 0; i < conv.size(); ++i) conv[i] = rng.uniform(-clim, clim);
    ps.add(prefix + ".conv", std::move(conv));
    ps.add(prefix + ".w_delta", init_linear(rng, d, d));
    ps.add(prefix + ".b_delta", Tensor({d}));
    // Decay timescales 1/|a| log-spaced over [1,16].
    Tensor a_log({S});
    for (std::size_t j = 0; j < S; ++j)
        a_log[j] = S > 1 ? -(static_cast<double>(j) / static_cast<double>(S - 1)) *
                               std::log(16.0)
                         : 0.0;
    ps.add(prefix + ".a_log", std::move(a_log));
    ps.add(prefix + ".w_b", init_linear(rng, d, S));
    ps.add(prefix + ".w_c", init_linear(rng, d, S));
    ps.add(prefix + ".skip_d", Tensor::full({d}, 1.0));
    ps.add(prefix + ".w_out", init_linear(rng, d, d));
}

void add_attn_only(ParameterStore& ps, Rng& rng, const std::string& prefix, std::size_t d) {
    ps.add(prefix + ".wq", init_linear(rng, d, d));
    ps.add(prefix + ".wk", init_linear(rng, d, d));
    ps.add(prefix + ".wv", init_linear(rng, d, d));
    ps.add(prefix + ".wo", init_linear(rng, d, d));
}

}  // namespace

ParameterStore init_parameters(const ModelConfig& c) {
    c.validate();
    Rng rng(Rng::mix(c.seed, 0x706172616d73ULL));
    ParameterStore ps;
    const std::size_t d = c.d;
    if (c.toggles.pe) ps.add("pe.table", init_gauss(rng, {c.n_images, d}, 0.02));
    if (c.eff_pre()) {
        add_bridge_stream(ps, rng, "pre.text", d);
        add_bridge_stream(ps, rng, "pre.img", d);
    }
    if (c.eff_seq()) {
        add_seq_stream(ps, rng, "seq.text", c);
        add_seq_stream(ps, rng, "seq.img", c);
    }
    if (c.eff_post()) {
        add_bridge_stream(ps, rng, "post.text", d);
        add_bridge_stream(ps, rng, "post.img", d);
    }
    if (c.eff_ocr()) {
        add_attn_only(ps, rng, "ocr.text", d);
        add_attn_only(ps, rng, "ocr.img", d);
    }
    if (c.eff_rgf()) {
        ps.add("rgf.w_v", init_linear(rng, d, d));
        ps.add("rgf.w_t", init_linear(rng, d, d));
        ps.add("rgf.score.w1", init_linear(rng, 2 * d, c.fuse_hidden));
        ps.add("rgf.score.b1", Tensor({c.fuse_hidden}));
        ps.add("rgf.score.w2", init_linear(rng, c.fuse_hidden, 1));
        ps.add("rgf.score.b2", Tensor({1}));
    }
    const std::size_t dr = c.rating_dim();
    ps.add("head.rating_emb", init_gauss(rng, {c.rating_vocab, dr}, 0.02));
    const std::size_t in_w = 2 * d + dr + (c.eff_rgf() ? d : 0);
    ps.add("head.fuse.w1", init_linear(rng, in_w, c.fuse_hidden));
    ps.add("head.fuse.b1", Tensor({c.fuse_hidden}));
    ps.add("head.fuse.w2", init_linear(rng, c.fuse_hidden, d));
    ps.add("head.fuse.b2", Tensor({d}));
    ps.add("head.cls.w", init_linear(rng, d, 2));
    ps.add("head.cls.b", Tensor({2}));
    return ps;
}

std::size_t parameter_count(const ModelConfig& c) {
    return init_parameters(c).total_scalars();
}

ModelConfig ablation_variant(const ModelConfig& base, const std::string& name) {
    ModelConfig c = base;
    if (name == "dsbm") {
        c.toggles.dsbm = false;
        c.toggles.pre_bridge = false;
        c.toggles.seq_block = false;
        c.toggles.post_bridge = false;
    } else if (name == "pe") {
        c.toggles.pe = false;
    } else if (name == "ocr") {
        c.toggles.ocr = false;
    } else if (name == "rgf") {
        c.toggles.rgf = false;
    } else if (name == "dsbm_pre") {
        c.toggles.pre_bridge = false;
    } else if (name == "dsbm_sequence") {
        c.toggles.seq_block = false;
    } else if (name == "dsbm_post") {
        c.toggles.post_bridge = false;
    } else {
        throw ConfigError("unknown ablation: " + name);
    }
    return c;
}

const std::vector<std::pair<std::string, std::string>>& ablation_rows() {
    static const std::vector<std::pair<std::string, std::string>> rows = {
        {"dsbm", "w/o DSBM"},
        {"pe", "w/o PE"},
        {"ocr", "w/o OCR"},
        {"rgf", "w/o RGF"},
        {"dsbm_pre", "w/o DSBM_pre"},
        {"dsbm_sequence", "w/o DSBM_sequence"},
        {"dsbm_post", "w/o DSBM_post"},
        {"", "CIRM"},
    };
    return rows;
}

BoundParams bind_parameters(Tape& t, const ParameterStore& params, bool requires_grad) {
    BoundParams bp;
    bp.by_index.reserve(params.count());
    for (std::size_t i = 0; i < params.count(); ++i) {
        Var v = t.leaf(params[i], requires_grad);
        bp.by_index.push_back(v);
        bp.by_name.emplace(params.name(i), v);
    }
    return bp;
}

namespace {

struct AttnProj {
    Var wq, wk, wv, wo;
};

Var attention_sublayer(Tape& t, Var q_src, Var kv_src, const Tensor& key_mask,
                       std::size_t heads, const AttnProj& p, bool empty_ok,
                       Tensor* probs) {
    Var q = t.linear(q_src, p.wq);
    Var k = t.linear(kv_src, p.wk);
    Var v = t.linear(kv_src, p.wv);
    Var core = t.attention(q, k, v, key_mask, heads, empty_ok, probs);
    return t.linear(core, p.wo);
}

}  // namespace

std::pair<Var, Var> cross_modal_bridge(Tape& t, Var T, Var V, const Tensor& text_mask,
                                       const Tensor& image_mask, const BridgeVars& p,
                                       std::size_t heads, Tensor* probs_t2v,
                                       Tensor* probs_v2t, Var* gate_t, Var* gate_v) {
    AttnProj at{p.text.wq, p.text.wk, p.text.wv, p.text.wo};
    Var attended_t = attention_sublayer(t, T, V, image_mask, heads, at, false, probs_t2v);
    Var gt = t.sigmoid(t.linear(T, p.text.gate_w, p.text.gate_b));
    Var t_out = t.mul_rowmask(
        t.layer_norm(t.add(T, t.mul(gt, attended_t)), p.text.ln_g, p.text.ln_b), text_mask);

    AttnProj av{p.img.wq, p.img.wk, p.img.wv, p.img.wo};
    Var attended_v = attention_sublayer(t, V, T, text_mask, heads, av, false, probs_v2t);
    Var gv = t.sigmoid(t.linear(V, p.img.gate_w, p.img.gate_b));
    Var v_out = t.mul_rowmask(
        t.layer_norm(t.add(V, t.mul(gv, attended_v)), p.img.ln_g, p.img.ln_b), image_mask);

    if (gate_t) *gate_t = gt;
    if (gate_v) *gate_v = gv;
    return {t_out, v_out};
}

Var sequential_block(Tape& t, Var H, const Tensor& mask, const SeqVars& p) {
    const std::size_t d = t.val(H).cols();
    Var normed = t.layer_norm(H, p.ln_g, p.ln_b);
    Var uz = t.linear(normed, p.w_in);
    Var U = t.slice_cols(uz, 0, d);
    Var Z = t.slice_cols(uz, d, d);
    U = t.mul_rowmask(U, mask);
    Var u_hat = t.silu(t.conv1d_depthwise_causal(U, p.conv));
    u_hat = t.mul_rowmask(u_hat, mask);
    Var S = t.selective_scan(u_hat, p.w_delta, p.b_delta, p.a_log, p.w_b, p.w_c, p.skip_d);
    Var gated = t.mul(S, t.silu(Z));
    Var delta_out = t.mul_rowmask(t.linear(gated, p.w_out), mask);
    return t.add(H, delta_out);
}

namespace {

BridgeVars bridge_vars(const BoundParams& bp, const std::string& stage) {
    BridgeVars v;
    auto fill = [&](BridgeStreamVars& s, const std::string& stream) {
        const std::string pre = stage + "." + stream;
        s.wq = bp(pre + ".wq");
        s.wk = bp(pre + ".wk");
        s.wv = bp(pre + ".wv");
        s.wo = bp(pre + ".wo");
        s.gate_w = bp(pre + ".gate_w");
        s.gate_b = bp(pre + ".gate_b");
        s.ln_g = bp(pre + ".ln_g");
        s.ln_b = bp(pre + ".ln_b");
    };
    fill(v.text, "text");
    fill(v.img, "img");
    return v;
}

SeqVars seq_vars(const BoundParams& bp, const std::string& stream) {
    SeqVars s;
    const std::string pre = "seq." + stream;
    s.ln_g = bp(pre + ".ln_g");
    s.ln_b = bp(pre + ".ln_b");
    s.w_in = bp(pre + ".w_in");
    s.conv = bp(pre + ".conv");
    s.w_delta = bp(pre + ".w_delta");
    s.b_delta = bp(pre + ".b_delta");
    s.a_log = bp(pre + ".a_log");
    s.w_b = bp(pre + ".w_b");
    s.w_c = bp(pre + ".w_c");
    s.skip_d = bp(pre + ".skip_d");
    s.w_out = bp(pre + ".w_out");
    return s;
}

// Head-mean attention map for sample b, trimmed to nq valid query rows.
std::vector<std::vector<double>> head_mean_map(const Tensor& probs, std::size_t b,
                                               std::size_t nq) {
    const std::size_t h = probs.dim(1), Lq = probs.dim(2), Lk = probs.dim(3);
    std::vector<std::vector<double>> out(nq, std::vector<double>(Lk, 0.0));
    for (std::size_t i = 0; i < nq && i < Lq; ++i)
        for (std::size_t j = 0; j < Lk; ++j) {
            double acc = 0.0;
            for (std::size_t hh = 0; hh < h; ++hh)
                acc += probs[((b * h + hh) * Lq + i) * Lk + j];
            out[i][j] = acc / static_cast<double>(h);
        }
    return out;
}

struct GateStats {
    double mean = 0.0, mn = 1.0, mx = 0.0;
};

GateStats gate_stats(const Tensor& g, std::size_t b, std::size_t valid_rows) {
    GateStats s;
    const std::size_t T = g.dim(1), d = g.dim(2);
    double acc = 0.0;
    std::size_t cnt = 0;
    for (std::size_t t = 0; t < valid_rows && t < T; ++t)
        for (std::size_t c = 0; c < d; ++c) {
            const double v = g.at3(b, t, c);
            acc += v;
            s.mn = std::min(s.mn, v);
            s.mx = std::max(s.mx, v);
            ++cnt;
        }
    s.mean = cnt ? acc / static_cast<double>(cnt) : 0.0;
    return s;
}

}  // namespace

ForwardOutput forward_batch(Tape& tape, const Batch& batch, const ParameterStore& params,
                            const ModelConfig& cfg, bool with_loss, bool train_mode,
                            bool want_trace) {
    cfg.validate();
    if (batch.d != cfg.d)
        throw DimensionError("forward: batch d=" + std::to_string(batch.d) +
                             " but model d=" + std::to_string(cfg.d));
    if (batch.N != cfg.n_images) throw DimensionError("forward: image slot count mismatch");
    const std::size_t B = batch.B, N = batch.N;

    BoundParams bp = bind_parameters(tape, params, train_mode);
    ForwardOutput out;
    out.param_vars = bp.by_index;

    Var T = tape.leaf(batch.text);
    Var V = tape.leaf(batch.images);
    Var O = tape.leaf(batch.ocr);
    if (cfg.toggles.pe) V = tape.add_slotwise(V, bp("pe.table"));

    // Relevance-guided branch over the raw (post-PE, pre-bridge) streams.
    Var fuse_f, s_cos, s_lrn, s_mix, w_rel;
    Tensor probs_ocr_t, probs_ocr_v;
    if (cfg.eff_rgf()) {
        Var To = T, Vo = V;
        if (cfg.eff_ocr()) {
            AttnProj pt{bp("ocr.text.wq"), bp("ocr.text.wk"), bp("ocr.text.wv"),
                        bp("ocr.text.wo")};
            To = tape.add(T, attention_sublayer(tape, T, O, batch.ocr_mask, cfg.heads, pt,
                                                true, want_trace ? &probs_ocr_t : nullptr));
            AttnProj pv{bp("ocr.img.wq"), bp("ocr.img.wk"), bp("ocr.img.wv"),
                        bp("ocr.img.wo")};
            Vo = tape.add(V, attention_sublayer(tape, V, O, batch.ocr_mask, cfg.heads, pv,
                                                true, want_trace ? &probs_ocr_v : nullptr));
        }
        Var t_rel = tape.masked_mean(To, batch.text_mask);
        s_cos = tape.cosine_scores(tape.linear(Vo, bp("rgf.w_v")),
                                   tape.linear(t_rel, bp("rgf.w_t")));
        Var pair = tape.concat_slot_text(Vo, t_rel);
        Var hidden = tape.silu(tape.linear(pair, bp("rgf.score.w1"), bp("rgf.score.b1")));
        s_lrn = tape.reshape(tape.linear(hidden, bp("rgf.score.w2"), bp("rgf.score.b2")),
                             {B, N});
        s_mix = tape.add(tape.scale(s_cos, cfg.alpha), tape.scale(s_lrn, 1.0 - cfg.alpha));
        w_rel = tape.masked_softmax(s_mix, batch.image_mask);
        fuse_f = tape.rgf_fuse(w_rel, t_rel, Vo);
    }

    // Dual-stage bridge.
    Var gate_pre_t, gate_pre_v, gate_post_t, gate_post_v;
    Tensor probs_pre_t2v, probs_pre_v2t, probs_post_t2v, probs_post_v2t;
    if (cfg.eff_pre()) {
        auto pv = bridge_vars(bp, "pre");
        auto [t2, v2] = cross_modal_bridge(tape, T, V, batch.text_mask, batch.image_mask, pv,
                                           cfg.heads, want_trace ? &probs_pre_t2v : nullptr,
                                           want_trace ? &probs_pre_v2t : nullptr, &gate_pre_t,
                                           &gate_pre_v);
        T = t2;
        V = v2;
    }
    if (cfg.eff_seq()) {
        T = sequential_block(tape, T, batch.text_mask, seq_vars(bp, "text"));
        V = sequential_block(tape, V, batch.image_mask, seq_vars(bp, "img"));
    }
    if (cfg.eff_post()) {
        auto pv = bridge_vars(bp, "post");
        auto [t2, v2] = cross_modal_bridge(tape, T, V, batch.text_mask, batch.image_mask, pv,
                                           cfg.heads, want_trace ? &probs_post_t2v : nullptr,
                                           want_trace ? &probs_post_v2t : nullptr,
                                           &gate_post_t, &gate_post_v);
        T = t2;
        V = v2;
    }

    // Classification head over masked pools.
    Var t_cls = tape.masked_mean(T, batch.text_mask);
    Var v_bar = tape.masked_mean(V, batch.image_mask);
    for (int r : batch.rating)
        if (r < 0 || static_cast<std::size_t>(r) >= cfg.rating_vocab)
            throw DimensionError("forward: rating out of range");
    Var emb = tape.embedding(bp("head.rating_emb"), batch.rating);
    std::vector<Var> parts = {t_cls, v_bar};
    if (cfg.eff_rgf()) parts.push_back(fuse_f);
    parts.push_back(emb);
    Var zin = tape.concat_cols(parts);
    Var z = tape.linear(tape.silu(tape.linear(zin, bp("head.fuse.w1"), bp("head.fuse.b1"))),
                        bp("head.fuse.w2"), bp("head.fuse.b2"));
    Var logits = tape.linear(z, bp("head.cls.w"), bp("head.cls.b"));

    out.logits_var = logits;
    out.logits = tape.val(logits);
    if (with_loss) {
        out.loss_var = tape.weighted_cross_entropy(
            logits, batch.label, {cfg.class_weights[0], cfg.class_weights[1]});
        out.loss = tape.val(out.loss_var)[0];
    }

    if (want_trace) {
        out.trace.resize(B);
        for (std::size_t b = 0; b < B; ++b) {
            SampleTrace& tr = out.trace[b];
            tr.id = batch.ids[b];
            tr.N = N;
            std::size_t L = 0, n = 0;
            for (std::size_t t = 0; t < batch.Lmax; ++t)
                if (batch.text_mask.at2(b, t) != 0.0) ++L;
            for (std::size_t i = 0; i < N; ++i)
                if (batch.image_mask.at2(b, i) != 0.0) ++n;
            tr.L = L;
            tr.n = n;
            tr.logits = {out.logits.at2(b, 0), out.logits.at2(b, 1)};
            tr.pred = predict_from_logits(tr.logits[0], tr.logits[1]);
            tr.label = b < batch.label.size() ? batch.label[b] : 0;
            if (cfg.eff_rgf()) {
                const Tensor& sc = tape.val(s_cos);
                const Tensor& sl = tape.val(s_lrn);
                const Tensor& sm = tape.val(s_mix);
                const Tensor& wr = tape.val(w_rel);
                for (std::size_t i = 0; i < N; ++i) {
                    tr.s_cos.push_back(sc.at2(b, i));
                    tr.s_lrn.push_back(sl.at2(b, i));
                    tr.s.push_back(sm.at2(b, i));
                    tr.w.push_back(wr.at2(b, i));
                }
                if (cfg.eff_ocr()) {
                    tr.attn_ocr_text = head_mean_map(probs_ocr_t, b, L);
                    tr.attn_ocr_img = head_mean_map(probs_ocr_v, b, n);
                }
            }
            auto fold = [&tr](const GateStats& s) {
                tr.gate_min = std::min(tr.gate_min, s.mn);
                tr.gate_max = std::max(tr.gate_max, s.mx);
                tr.has_gates = true;
            };
            if (cfg.eff_pre()) {
                GateStats st = gate_stats(tape.val(gate_pre_t), b, L);
                GateStats sv = gate_stats(tape.val(gate_pre_v), b, n);
                tr.gate_pre_text = st.mean;
                tr.gate_pre_img = sv.mean;
                fold(st);
                fold(sv);
                tr.attn_pre_t2v = head_mean_map(probs_pre_t2v, b, L);
                tr.attn_pre_v2t = head_mean_map(probs_pre_v2t, b, n);
            }
            if (cfg.eff_post()) {
                GateStats st = gate_stats(tape.val(gate_post_t), b, L);
                GateStats sv = gate_stats(tape.val(gate_post_v), b, n);
                tr.gate_post_text = st.mean;
                tr.gate_post_img = sv.mean;
                fold(st);
                fold(sv);
                tr.attn_post_t2v = head_mean_map(probs_post_t2v, b, L);
                tr.attn_post_v2t = head_mean_map(probs_post_v2t, b, n);
            }
        }
    }
    return out;
}

}  // namespace cirm::model
