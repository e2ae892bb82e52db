#include "cirm/commands.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>
#include <unordered_map>

#include <json.hpp>

#include "cirm/batch.hpp"
#include "cirm/rng.hpp"

namespace cirm::cmd {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

std::vector<double> default_alpha_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 10; ++i) g.push_back(static_cast<double>(i) / 10.0);
    return g;
}

ExperimentConfig default_experiment_config() { return {}; }

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError("config " + path + ": bad JSON: " + e.what());
    }
    ExperimentConfig c;
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    c.gen.seed = c.seed;
    c.ts.seed = c.seed;
    c.mc.seed = c.seed;
    for (auto it = j.begin(); it != j.end(); ++it) {
        const std::string& k = it.key();
        if (k == "seed") {
        } else if (k == "out") {
            c.out_dir = it->get<std::string>();
        } else if (k == "workers") {
            c.workers = it->get<std::size_t>();
        } else if (k == "data") {
            for (auto d = it->begin(); d != it->end(); ++d) {
                const std::string& dk = d.key();
                if (dk == "train") c.train_path = d->get<std::string>();
                else if (dk == "val") c.val_path = d->get<std::string>();
                else if (dk == "test") c.test_path = d->get<std::string>();
                else if (dk == "generator") {
                    c.has_generator = true;
                    for (auto g = d->begin(); g != d->end(); ++g) {
                        const std::string& gk = g.key();
                        if (gk == "count") c.gen.count = g->get<std::size_t>();
                        else if (gk == "d") c.gen.d = g->get<std::size_t>();
                        else if (gk == "noise") c.gen.noise = g->get<double>();
                        else if (gk == "tau") c.gen.tau = g->get<double>();
                        else if (gk == "seed") c.gen.seed = g->get<std::uint64_t>();
                        else throw ConfigError("config: unknown generator field '" + gk + "'");
                    }
                } else {
                    throw ConfigError("config: unknown data field '" + dk + "'");
                }
            }
        } else if (k == "model") {
            nlohmann::json m = *it;
            if (m.contains("class_weights") && m["class_weights"].is_string()) {
                if (m["class_weights"] != "auto")
                    throw ConfigError("config: class_weights must be \"auto\" or [w0,w1]");
                m.erase("class_weights");
                c.auto_class_weights = true;
            } else if (m.contains("class_weights")) {
                c.auto_class_weights = false;
            }
            if (!m.contains("seed")) m["seed"] = c.seed;
            c.mc = model::config_from_json(m);
            c.has_model_section = true;
        } else if (k == "optimizer") {
            for (auto o = it->begin(); o != it->end(); ++o) {
                const std::string& ok = o.key();
                if (ok == "lr") c.ts.lr = o->get<double>();
                else if (ok == "weight_decay") c.ts.weight_decay = o->get<double>();
                else if (ok == "batch_size") c.ts.batch_size = o->get<std::size_t>();
                else if (ok == "epochs") c.ts.epochs = o->get<std::size_t>();
                else throw ConfigError("config: unknown optimizer field '" + ok + "'");
            }
        } else if (k == "eval") {
            for (auto e = it->begin(); e != it->end(); ++e) {
                const std::string& ek = e.key();
                if (ek == "view") c.view = e->get<std::string>();
                else if (ek == "shuffle_seed") c.shuffle_seed = e->get<std::uint64_t>();
                else if (ek == "truncate_k") c.truncate_k = e->get<std::size_t>();
                else if (ek == "min_len") c.min_len = e->get<std::size_t>();
                else if (ek == "subset") c.subset = e->get<std::size_t>();
                else throw ConfigError("config: unknown eval field '" + ek + "'");
            }
        } else if (k == "alpha_grid") {
            c.alpha_grid = it->get<std::vector<double>>();
            for (double a : c.alpha_grid)
                if (a < 0.0 || a > 1.0) throw ConfigError("config: alpha_grid entries must be in [0,1]");
        } else {
            throw ConfigError("config: unknown field '" + k + "'");
        }
    }
    if (c.gen.d != 0 && c.has_generator && !c.has_model_section) c.mc.d = c.gen.d;
    return c;
}

namespace {

void ensure_out_dir(const ExperimentConfig& cfg) {
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw ConfigError("cannot create output dir " + cfg.out_dir + ": " + ec.message());
}

struct LoadedData {
    std::vector<EmbeddingRecord> train, val, test;
};

LoadedData load_data(const ExperimentConfig& cfg) {
    LoadedData d;
    if (!cfg.train_path.empty()) {
        d.train = read_records(cfg.train_path);
        if (!cfg.val_path.empty()) d.val = read_records(cfg.val_path);
        if (!cfg.test_path.empty()) d.test = read_records(cfg.test_path);
    } else if (cfg.has_generator) {
        auto ds = generate_synthetic_dataset(cfg.gen);
        d.train = std::move(ds.train.records);
        d.val = std::move(ds.val.records);
        d.test = std::move(ds.test.records);
    } else {
        throw ConfigError("no data source: set data.train/val/test paths or data.generator");
    }
    return d;
}

model::ModelConfig resolve_model_config(const ExperimentConfig& cfg,
                                        const std::vector<EmbeddingRecord>& train) {
    model::ModelConfig mc = cfg.mc;
    if (!train.empty()) {
        if (!cfg.has_model_section) mc.d = train.front().dim();
        if (cfg.auto_class_weights) mc.class_weights = train::inverse_frequency_weights(train);
    }
    mc.validate();
    return mc;
}

void write_epoch_report(const std::string& path, const train::TrainResult& tr) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + path);
    out << report_file_header() << "\n";
    for (const auto& ep : tr.history) {
        ordered_json o;
        o["epoch"] = ep.epoch;
        o["train_loss"] = ep.train_loss;
        o["val"] = nlohmann::ordered_json::parse(render_report(ep.val, ReportFormat::lines));
        out << o.dump() << "\n";
    }
}

train::TrainResult train_one(const ExperimentConfig& cfg, const model::ModelConfig& mc,
                             const LoadedData& data) {
    train::TrainSettings ts = cfg.ts;
    return train::train_model(data.train, data.val, mc, ts);
}

MetricsReport eval_plain_test(const ExperimentConfig& cfg, const model::ModelConfig& mc,
                              const ParameterStore& params,
                              const std::vector<EmbeddingRecord>& test) {
    train::EvalOptions opt;
    opt.view = train::EvalOptions::View::plain;
    opt.batch_size = cfg.ts.batch_size;
    opt.report_seed = cfg.seed;
    return train::evaluate(params, mc, test, opt);
}

}  // namespace

GenDataResult cmd_gen_data(const ExperimentConfig& cfg) {
    if (!cfg.has_generator) throw ConfigError("gen-data: config has no data.generator section");
    ensure_out_dir(cfg);
    auto ds = generate_synthetic_dataset(cfg.gen);
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const auto& r : split->records)
            if (contrast_label(r.images, cfg.gen.tau) != r.label)
                throw ConfigError("gen-data: label oracle disagreement on " + r.id);
    GenDataResult res;
    res.train_path = cfg.out_dir + "/train.records";
    res.val_path = cfg.out_dir + "/val.records";
    res.test_path = cfg.out_dir + "/test.records";
    write_records(res.train_path, ds.train.records, cfg.gen.d);
    write_records(res.val_path, ds.val.records, cfg.gen.d);
    write_records(res.test_path, ds.test.records, cfg.gen.d);
    res.n_train = ds.train.records.size();
    res.n_val = ds.val.records.size();
    res.n_test = ds.test.records.size();
    double pos = 0.0;
    for (const auto* split : {&ds.train, &ds.val, &ds.test})
        for (const auto& r : split->records) pos += r.label;
    res.positive_rate = pos / static_cast<double>(cfg.gen.count);
    return res;
}

TrainCmdResult cmd_train(const ExperimentConfig& cfg) {
    ensure_out_dir(cfg);
    LoadedData data = load_data(cfg);
    model::ModelConfig mc = resolve_model_config(cfg, data.train);
    TrainCmdResult res;
    res.result = train_one(cfg, mc, data);
    res.checkpoint_path = cfg.out_dir + "/model.ckpt";
    res.epochs_path = cfg.out_dir + "/epochs.report";
    train::save_checkpoint(res.checkpoint_path, mc, res.result.best_params,
                           res.result.best_epoch, res.result.best_val_f1);
    write_epoch_report(res.epochs_path, res.result);
    return res;
}

EvalCmdResult cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path) {
    ensure_out_dir(cfg);
    train::Checkpoint ck = train::load_checkpoint(checkpoint_path);
    if (cfg.has_model_section) {
        // Flag overrides must not silently disagree with the stored network.
        model::ModelConfig a = cfg.mc, b = ck.config;
        a.seed = b.seed;
        a.class_weights = b.class_weights;
        a.alpha = b.alpha;
        if (model::config_hash(a) != model::config_hash(b))
            throw CheckpointError("eval: config model section does not match checkpoint");
    }
    const model::ModelConfig& mc = ck.config;
    if (cfg.test_path.empty() && !cfg.has_generator)
        throw ConfigError("eval: no test data configured");
    LoadedData data = load_data(cfg);
    if (data.test.empty()) throw ConfigError("eval: test split is empty");

    train::EvalOptions opt;
    opt.batch_size = cfg.ts.batch_size;
    opt.shuffle_seed = cfg.shuffle_seed;
    opt.truncate_k = cfg.truncate_k;
    opt.min_len = cfg.min_len;
    opt.subset = cfg.subset;
    opt.subset_seed = cfg.seed;
    opt.report_seed = cfg.seed;

    EvalCmdResult res;
    if (cfg.view == "plain" || cfg.view == "shuffled") {
        opt.view = cfg.view == "plain" ? train::EvalOptions::View::plain
                                       : train::EvalOptions::View::shuffled;
        res.primary = train::evaluate(ck.params, mc, data.test, opt);
        res.rows.emplace_back(cfg.view, res.primary);
    } else if (cfg.view == "truncated") {
        // Paired protocol: full and truncated views of the same subset.
        opt.with_ci = true;
        opt.view = train::EvalOptions::View::plain;
        MetricsReport full = train::evaluate(ck.params, mc, data.test, opt);
        opt.view = train::EvalOptions::View::truncated;
        MetricsReport trunc = train::evaluate(ck.params, mc, data.test, opt);
        res.rows.emplace_back("full", full);
        res.rows.emplace_back("trunc", trunc);
        res.primary = trunc;
    } else {
        throw ConfigError("eval: unknown view '" + cfg.view + "'");
    }
    res.report_path = cfg.out_dir + "/eval_" + cfg.view + ".report";
    std::ofstream out(res.report_path, std::ios::binary);
    out << render_report(res.rows, ReportFormat::lines);
    res.table = render_report(res.rows, ReportFormat::table);
    return res;
}

namespace {

template <typename Cell>
void run_cells(std::size_t n, std::size_t workers, const Cell& cell) {
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) cell(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    const std::size_t nw = std::min(workers, n);
    pool.reserve(nw);
    for (std::size_t w = 0; w < nw; ++w)
        pool.emplace_back([&]() {
            for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) cell(i);
        });
    for (auto& th : pool) th.join();
}

}  // namespace

AblateResult cmd_ablate(const ExperimentConfig& cfg) {
    ensure_out_dir(cfg);
    LoadedData data = load_data(cfg);
    model::ModelConfig base = resolve_model_config(cfg, data.train);
    const auto& spec_rows = model::ablation_rows();
    AblateResult res;
    res.rows.resize(spec_rows.size());
    run_cells(spec_rows.size(), cfg.workers, [&](std::size_t i) {
        const auto& [variant, display] = spec_rows[i];
        model::ModelConfig mc = variant.empty() ? base : model::ablation_variant(base, variant);
        AblateRow row;
        row.name = display;
        row.variant = variant;
        row.param_count = model::parameter_count(mc);
        auto tr = train_one(cfg, mc, data);
        row.test = eval_plain_test(cfg, mc, tr.best_params, data.test);
        res.rows[i] = std::move(row);
    });
    res.report_path = cfg.out_dir + "/ablate.report";
    std::ofstream out(res.report_path, std::ios::binary);
    out << report_file_header() << "\n";
    std::vector<std::pair<std::string, MetricsReport>> table_rows;
    for (const auto& row : res.rows) {
        ordered_json o;
        o["name"] = row.name;
        o["param_count"] = row.param_count;
        o["metrics"] = ordered_json::parse(render_report(row.test, ReportFormat::lines));
        out << o.dump() << "\n";
        table_rows.emplace_back(row.name, row.test);
    }
    res.table = render_report(table_rows, ReportFormat::table);
    return res;
}

SweepResult cmd_sweep_alpha(const ExperimentConfig& cfg) {
    ensure_out_dir(cfg);
    LoadedData data = load_data(cfg);
    model::ModelConfig base = resolve_model_config(cfg, data.train);
    std::vector<double> grid = cfg.alpha_grid.empty() ? default_alpha_grid() : cfg.alpha_grid;
    SweepResult res;
    res.points.resize(grid.size());
    run_cells(grid.size(), cfg.workers, [&](std::size_t i) {
        model::ModelConfig mc = base;
        mc.alpha = grid[i];
        SweepPoint pt;
        pt.alpha = grid[i];
        auto tr = train_one(cfg, mc, data);
        pt.test = eval_plain_test(cfg, mc, tr.best_params, data.test);
        // Trace a small test batch to expose the relevance mixing identity.
        const std::size_t nb = std::min<std::size_t>(data.test.size(), 16);
        if (nb > 0 && mc.toggles.rgf) {
            std::vector<EmbeddingRecord> probe(data.test.begin(), data.test.begin() + nb);
            Batch b = make_batch(probe, mc.n_images);
            autograd::Tape tape;
            auto fw = model::forward_batch(tape, b, tr.best_params, mc, false, false, true);
            for (const auto& s : fw.trace)
                for (std::size_t k = 0; k < s.n; ++k) {
                    pt.max_dev_s_vs_lrn =
                        std::max(pt.max_dev_s_vs_lrn, std::abs(s.s[k] - s.s_lrn[k]));
                    pt.max_dev_s_vs_cos =
                        std::max(pt.max_dev_s_vs_cos, std::abs(s.s[k] - s.s_cos[k]));
                }
        }
        res.points[i] = std::move(pt);
    });
    res.report_path = cfg.out_dir + "/alpha_sweep.report";
    res.csv_path = cfg.out_dir + "/alpha_sweep.csv";
    {
        std::ofstream out(res.report_path, std::ios::binary);
        out << report_file_header() << "\n";
        for (const auto& pt : res.points) {
            ordered_json o;
            o["alpha"] = pt.alpha;
            o["metrics"] = ordered_json::parse(render_report(pt.test, ReportFormat::lines));
            out << o.dump() << "\n";
        }
    }
    {
        std::ofstream csv(res.csv_path, std::ios::binary);
        csv << "alpha,accuracy,macro_precision,macro_recall,macro_f1\n";
        char buf[160];
        for (const auto& pt : res.points) {
            std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g,%.17g\n", pt.alpha,
                          pt.test.accuracy, pt.test.macro_precision, pt.test.macro_recall,
                          pt.test.macro_f1);
            csv << buf;
        }
    }
    return res;
}

GradCheckCmdResult cmd_grad_check(const ExperimentConfig& cfg) {
    model::ModelConfig mc;
    if (cfg.has_model_section) {
        mc = cfg.mc;
    } else {
        mc.d = 8;
        mc.heads = 2;
        mc.d_state = 4;
        mc.conv_k = 2;
        mc.fuse_hidden = 8;
        mc.seed = cfg.seed;
    }
    if (mc.d > 16) throw ConfigError("grad-check: needs a tiny config (d <= 16)");
    mc.validate();

    SyntheticParams sp;
    sp.seed = cfg.seed;
    sp.count = 12;
    sp.d = mc.d;
    sp.noise = 0.1;
    auto ds = generate_synthetic_dataset(sp);
    std::vector<EmbeddingRecord> probe;
    for (std::size_t i = 0; i < 3 && i < ds.train.records.size(); ++i)
        probe.push_back(truncate_view(ds.train.records[i], 6));
    probe[0].rating = 3;  // keep the rating path live
    Batch batch = make_batch(probe, mc.n_images);

    ParameterStore params = model::init_parameters(mc);
    LossFn loss = [&](ParameterStore& p, ParameterStore* g) -> double {
        autograd::Tape tape;
        auto out = model::forward_batch(tape, batch, p, mc, true, g != nullptr);
        if (g) {
            tape.backward(out.loss_var);
            for (std::size_t i = 0; i < p.count(); ++i)
                if (tape.has_grad(out.param_vars[i])) {
                    const Tensor& gi = tape.grad(out.param_vars[i]);
                    for (std::size_t j = 0; j < gi.size(); ++j) (*g)[i][j] += gi[j];
                }
        }
        return out.loss;
    };
    GradCheckCmdResult res;
    res.report = grad_check(loss, params, 1e-4, 1e-4);
    return res;
}

DumpResult cmd_dump_attention(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                              const std::vector<std::string>& ids, const std::string& split) {
    ensure_out_dir(cfg);
    train::Checkpoint ck = train::load_checkpoint(checkpoint_path);
    LoadedData data = load_data(cfg);
    const std::vector<EmbeddingRecord>* recs = nullptr;
    if (split == "train") recs = &data.train;
    else if (split == "val") recs = &data.val;
    else if (split == "test") recs = &data.test;
    else throw ConfigError("dump-attention: unknown split '" + split + "'");

    std::unordered_map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < recs->size(); ++i) index.emplace((*recs)[i].id, i);
    std::vector<EmbeddingRecord> chosen;
    for (const auto& id : ids) {
        auto it = index.find(id);
        if (it == index.end()) throw LookupError("dump-attention: unknown id '" + id + "'");
        chosen.push_back((*recs)[it->second]);
    }

    DumpResult res;
    res.trace_path = cfg.out_dir + "/attention.trace";
    std::ofstream out(res.trace_path, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + res.trace_path);
    out << "{\"format\":\"cirm-trace\",\"version\":1}\n";
    const std::size_t bs = cfg.ts.batch_size;
    for (std::size_t start = 0; start < chosen.size(); start += bs) {
        const std::size_t end = std::min(chosen.size(), start + bs);
        std::vector<EmbeddingRecord> chunk(chosen.begin() + start, chosen.begin() + end);
        Batch b = make_batch(chunk, ck.config.n_images);
        autograd::Tape tape;
        auto fw = model::forward_batch(tape, b, ck.params, ck.config, false, false, true);
        for (const auto& tr : fw.trace) {
            ordered_json o;
            o["id"] = tr.id;
            o["L"] = tr.L;
            o["n"] = tr.n;
            o["label"] = tr.label;
            o["pred"] = tr.pred;
            o["logits"] = tr.logits;
            if (!tr.s.empty())
                o["relevance"] = {{"s_cos", tr.s_cos}, {"s_lrn", tr.s_lrn}, {"s", tr.s},
                                  {"w", tr.w}};
            if (tr.has_gates)
                o["gates"] = {{"pre_text", tr.gate_pre_text},   {"pre_img", tr.gate_pre_img},
                              {"post_text", tr.gate_post_text}, {"post_img", tr.gate_post_img},
                              {"min", tr.gate_min},             {"max", tr.gate_max}};
            ordered_json attn;
            if (!tr.attn_pre_t2v.empty()) attn["pre_t2v"] = tr.attn_pre_t2v;
            if (!tr.attn_pre_v2t.empty()) attn["pre_v2t"] = tr.attn_pre_v2t;
            if (!tr.attn_post_t2v.empty()) attn["post_t2v"] = tr.attn_post_t2v;
            if (!tr.attn_post_v2t.empty()) attn["post_v2t"] = tr.attn_post_v2t;
            if (!tr.attn_ocr_text.empty()) attn["ocr_text"] = tr.attn_ocr_text;
            if (!tr.attn_ocr_img.empty()) attn["ocr_img"] = tr.attn_ocr_img;
            if (!attn.empty()) o["attention"] = std::move(attn);
            out << o.dump() << "\n";
            ++res.count;
        }
    }
    return res;
}

}  // namespace cirm::cmd
