#include "cirm/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "cirm/batch.hpp"
#include "cirm/optimizer.hpp"
#include "cirm/rng.hpp"

namespace cirm::train {

using ordered_json = nlohmann::ordered_json;

std::array<double, 2> inverse_frequency_weights(const std::vector<EmbeddingRecord>& records) {
    double n1 = 0.0;
    for (const auto& r : records) n1 += r.label;
    const double n = static_cast<double>(records.size());
    const double n0 = n - n1;
    if (n0 == 0.0 || n1 == 0.0) return {1.0, 1.0};
    return {n / (2.0 * n0), n / (2.0 * n1)};
}

namespace {

std::vector<int> predict_records(const ParameterStore& params, const model::ModelConfig& cfg,
                                 const std::vector<EmbeddingRecord>& records,
                                 std::size_t batch_size) {
    std::vector<int> preds;
    preds.reserve(records.size());
    for (std::size_t start = 0; start < records.size(); start += batch_size) {
        const std::size_t end = std::min(records.size(), start + batch_size);
        std::vector<EmbeddingRecord> chunk(records.begin() + start, records.begin() + end);
        Batch b = make_batch(chunk, cfg.n_images);
        autograd::Tape tape;
        auto out = model::forward_batch(tape, b, params, cfg, false, false);
        for (std::size_t i = 0; i < b.B; ++i)
            preds.push_back(model::predict_from_logits(out.logits.at2(i, 0),
                                                       out.logits.at2(i, 1)));
    }
    return preds;
}

MetricsReport metrics_for(const std::vector<int>& preds,
                          const std::vector<EmbeddingRecord>& records) {
    std::vector<int> labels;
    labels.reserve(records.size());
    for (const auto& r : records) labels.push_back(r.label);
    return macro_metrics(preds, labels);
}

}  // namespace

TrainResult train_model(const std::vector<EmbeddingRecord>& train_recs,
                        const std::vector<EmbeddingRecord>& val_recs, model::ModelConfig cfg,
                        const TrainSettings& ts) {
    if (train_recs.empty()) throw ConfigError("train: empty training split");
    cfg.validate();
    TrainResult res;
    ParameterStore params = model::init_parameters(cfg);
    AdamWConfig ocfg;
    ocfg.lr = ts.lr;
    ocfg.weight_decay = ts.weight_decay;
    OptimizerState opt = OptimizerState::init(params, ocfg);

    res.config = cfg;
    res.best_params = params;
    res.best_epoch = 0;
    res.best_val_f1 = -1.0;

    std::vector<std::size_t> order(train_recs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t epoch = 1; epoch <= ts.epochs; ++epoch) {
        Rng shuffle_rng(Rng::mix(ts.seed, 0x65706f63ULL + epoch));
        for (std::size_t i = order.size() - 1; i > 0; --i)
            std::swap(order[i], order[shuffle_rng.uniform_index(i + 1)]);

        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += ts.batch_size) {
            const std::size_t end = std::min(order.size(), start + ts.batch_size);
            std::vector<EmbeddingRecord> chunk;
            chunk.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) chunk.push_back(train_recs[order[i]]);
            Batch b = make_batch(chunk, cfg.n_images);
            autograd::Tape tape;
            auto out = model::forward_batch(tape, b, params, cfg, true, true);
            if (!std::isfinite(out.loss))
                throw NonFiniteGradient("train: non-finite loss at epoch " +
                                        std::to_string(epoch) + " batch " +
                                        std::to_string(batches));
            tape.backward(out.loss_var);
            ParameterStore grads = params.zeros_like();
            for (std::size_t i = 0; i < params.count(); ++i)
                if (tape.has_grad(out.param_vars[i])) grads[i] = tape.grad(out.param_vars[i]);
            adamw_step(params, grads, opt);
            loss_sum += out.loss;
            ++batches;
        }

        EpochStats st;
        st.epoch = epoch;
        st.train_loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
        if (!val_recs.empty()) {
            auto preds = predict_records(params, cfg, val_recs, ts.batch_size);
            st.val = metrics_for(preds, val_recs);
            st.val.config_hash = model::config_hash(cfg);
            st.val.seed = ts.seed;
            if (st.val.macro_f1 > res.best_val_f1) {
                res.best_val_f1 = st.val.macro_f1;
                res.best_epoch = epoch;
                res.best_params = params;
            }
        } else {
            res.best_params = params;
            res.best_epoch = epoch;
        }
        res.history.push_back(std::move(st));
    }
    if (res.best_val_f1 < 0.0) res.best_val_f1 = 0.0;
    return res;
}

std::vector<EmbeddingRecord> select_eval_records(const std::vector<EmbeddingRecord>& records,
                                                 const EvalOptions& opt) {
    std::vector<EmbeddingRecord> pool;
    for (const auto& r : records)
        if (opt.min_len == 0 || r.text_len() >= opt.min_len) pool.push_back(r);
    if (opt.subset > 0 && opt.subset < pool.size()) {
        Rng rng(Rng::mix(opt.subset_seed, 0x737562ULL));
        std::vector<std::size_t> idx(pool.size());
        for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
        for (std::size_t i = idx.size() - 1; i > 0; --i)
            std::swap(idx[i], idx[rng.uniform_index(i + 1)]);
        idx.resize(opt.subset);
        std::sort(idx.begin(), idx.end());
        std::vector<EmbeddingRecord> sub;
        sub.reserve(opt.subset);
        for (std::size_t i : idx) sub.push_back(pool[i]);
        pool = std::move(sub);
    }
    std::vector<EmbeddingRecord> out;
    out.reserve(pool.size());
    for (std::size_t i = 0; i < pool.size(); ++i) {
        switch (opt.view) {
            case EvalOptions::View::plain:
                out.push_back(pool[i]);
                break;
            case EvalOptions::View::shuffled:
                out.push_back(shuffle_images_view(pool[i], Rng::mix(opt.shuffle_seed, i)));
                break;
            case EvalOptions::View::truncated:
                out.push_back(truncate_view(pool[i], opt.truncate_k));
                break;
        }
    }
    return out;
}

MetricsReport evaluate(const ParameterStore& params, const model::ModelConfig& cfg,
                       const std::vector<EmbeddingRecord>& records, const EvalOptions& opt) {
    const auto viewed = select_eval_records(records, opt);
    if (viewed.empty()) throw ConfigError("evaluate: no records after filtering");
    auto preds = predict_records(params, cfg, viewed, opt.batch_size);
    MetricsReport rep = metrics_for(preds, viewed);
    if (opt.with_ci)
        rep.wilson_ci = wilson_interval(rep.tp + rep.tn, static_cast<long>(rep.n));
    rep.config_hash = model::config_hash(cfg);
    rep.seed = opt.report_seed;
    return rep;
}

void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const ParameterStore& params, std::size_t best_epoch,
                     double best_val_f1) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw CheckpointError("cannot open for writing: " + path);
    ordered_json header;
    header["format"] = "cirm-checkpoint";
    header["version"] = 1;
    header["config"] = model::config_to_json(cfg);
    header["best_epoch"] = best_epoch;
    header["best_val_f1"] = best_val_f1;
    out << header.dump() << "\n";
    for (const auto& [name, t] : params) {
        ordered_json o;
        o["name"] = name;
        o["shape"] = t.shape();
        o["data"] = std::vector<double>(t.data(), t.data() + t.size());
        out << o.dump() << "\n";
    }
    if (!out) throw CheckpointError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw CheckpointError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw CheckpointError(path + ": empty file");
    ordered_json header;
    try {
        header = ordered_json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
        throw CheckpointError(path + ": bad header: " + e.what());
    }
    if (!header.contains("format") || header["format"] != "cirm-checkpoint")
        throw CheckpointError(path + ": not a cirm checkpoint");
    if (header["version"] != 1) throw CheckpointError(path + ": unsupported version");
    Checkpoint ck;
    try {
        ck.config = model::config_from_json(header.at("config"));
    } catch (const ConfigError& e) {
        throw CheckpointError(path + ": " + e.what());
    }
    ck.best_epoch = header.value("best_epoch", std::size_t{0});
    ck.best_val_f1 = header.value("best_val_f1", 0.0);

    // Structural check: the stored tensors must match what the config builds.
    ParameterStore expected = model::init_parameters(ck.config);
    std::size_t i = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (i >= expected.count()) throw CheckpointError(path + ": too many parameter lines");
        ordered_json o;
        try {
            o = ordered_json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw CheckpointError(path + ": bad parameter line: " + e.what());
        }
        const std::string name = o.at("name").get<std::string>();
        if (name != expected.name(i))
            throw CheckpointError(path + ": parameter order mismatch: expected " +
                                  expected.name(i) + ", got " + name);
        const auto shape = o.at("shape").get<std::vector<std::size_t>>();
        if (shape != expected[i].shape())
            throw CheckpointError(path + ": shape mismatch for " + name);
        auto data = o.at("data").get<std::vector<double>>();
        if (data.size() != expected[i].size())
            throw CheckpointError(path + ": data size mismatch for " + name);
        ck.params.add(name, Tensor(shape, std::move(data)));
        ++i;
    }
    if (i != expected.count())
        throw CheckpointError(path + ": missing parameter lines (" + std::to_string(i) + "/" +
                              std::to_string(expected.count()) + ")");
    return ck;
}

}  // namespace cirm::train
