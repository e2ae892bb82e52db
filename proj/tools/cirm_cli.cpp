#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cirm/commands.hpp"

namespace {

using namespace cirm;

struct CommonFlags {
    std::optional<std::string> config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::size_t> workers;
    std::optional<std::string> train_path, val_path, test_path;
    std::optional<std::size_t> epochs, batch_size;
    std::optional<double> lr, weight_decay;
};

void add_common(CLI::App* sub, CommonFlags& f) {
    sub->add_option("--config", f.config, "experiment config file (JSON)");
    sub->add_option("--seed", f.seed, "master seed; overrides the config");
    sub->add_option("--out", f.out, "output directory");
    sub->add_option("--workers", f.workers, "parallel cells for ablate/sweep");
    sub->add_option("--train", f.train_path, "train records file");
    sub->add_option("--val", f.val_path, "val records file");
    sub->add_option("--test", f.test_path, "test records file");
    sub->add_option("--epochs", f.epochs, "training epochs");
    sub->add_option("--batch", f.batch_size, "batch size");
    sub->add_option("--lr", f.lr, "learning rate");
    sub->add_option("--weight-decay", f.weight_decay, "decoupled weight decay");
}

cmd::ExperimentConfig build_config(const CommonFlags& f) {
    cmd::ExperimentConfig c = f.config ? cmd::load_experiment_config(*f.config)
                                       : cmd::default_experiment_config();
    if (f.seed) {
        c.seed = *f.seed;
        c.gen.seed = *f.seed;
        c.ts.seed = *f.seed;
        c.mc.seed = *f.seed;
    }
    if (f.out) c.out_dir = *f.out;
    if (f.workers) c.workers = *f.workers;
    if (f.train_path) c.train_path = *f.train_path;
    if (f.val_path) c.val_path = *f.val_path;
    if (f.test_path) c.test_path = *f.test_path;
    if (f.epochs) c.ts.epochs = *f.epochs;
    if (f.batch_size) c.ts.batch_size = *f.batch_size;
    if (f.lr) c.ts.lr = *f.lr;
    if (f.weight_decay) c.ts.weight_decay = *f.weight_decay;
    return c;
}

template <typename F>
int run_guarded(const F& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return cmd::kConfigError;
    } catch (const CheckpointError& e) {
        std::fprintf(stderr, "checkpoint error: %s\n", e.what());
        return cmd::kCheckpointError;
    } catch (const NonFiniteGradient& e) {
        std::fprintf(stderr, "check failure: %s\n", e.what());
        return cmd::kCheckFailure;
    } catch (const ParseError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return cmd::kDataError;
    } catch (const LookupError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return cmd::kDataError;
    } catch (const DimensionError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return cmd::kDataError;
    } catch (const AllMaskedError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return cmd::kDataError;
    } catch (const DomainError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return cmd::kDataError;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"CIRM multi-image sarcasm fusion: data, training and experiment harness"};
    app.require_subcommand(1);

    CommonFlags fl;

    auto* gen = app.add_subcommand("gen-data", "generate synthetic records (70/15/15 split)");
    add_common(gen, fl);
    std::optional<std::size_t> g_count, g_dim;
    std::optional<double> g_noise, g_tau;
    gen->add_option("--count", g_count, "total records");
    gen->add_option("--dim", g_dim, "embedding dim");
    gen->add_option("--noise", g_noise, "perturbation scale in [0,1)");
    gen->add_option("--tau", g_tau, "contrast threshold");

    auto* tr = app.add_subcommand("train", "train a model, save best-val-F1 checkpoint");
    add_common(tr, fl);

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint under a view");
    add_common(ev, fl);
    std::string e_ckpt;
    std::optional<std::string> e_view;
    std::optional<std::size_t> e_trunc_k, e_min_len, e_subset;
    std::optional<std::uint64_t> e_shuffle_seed;
    ev->add_option("--checkpoint", e_ckpt, "checkpoint path")->required();
    ev->add_option("--view", e_view, "plain | shuffled | truncated");
    ev->add_option("--truncate-k", e_trunc_k, "prefix length for the truncated view");
    ev->add_option("--min-len", e_min_len, "keep records with L >= this");
    ev->add_option("--subset", e_subset, "seeded random subset size");
    ev->add_option("--shuffle-seed", e_shuffle_seed, "seed for the shuffled view");

    auto* ab = app.add_subcommand("ablate", "train the 7 ablations plus the full model");
    add_common(ab, fl);

    auto* sw = app.add_subcommand("sweep-alpha", "train/evaluate over the relevance mixing grid");
    add_common(sw, fl);

    auto* gc = app.add_subcommand("grad-check", "finite-difference check of the full loss");
    add_common(gc, fl);

    auto* da = app.add_subcommand("dump-attention", "write forward traces for selected ids");
    add_common(da, fl);
    std::string d_ckpt;
    std::vector<std::string> d_ids;
    std::string d_split = "test";
    da->add_option("--checkpoint", d_ckpt, "checkpoint path")->required();
    da->add_option("--ids", d_ids, "record ids")->delimiter(',');
    da->add_option("--split", d_split, "train | val | test");

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            c.has_generator = true;
            if (g_count) c.gen.count = *g_count;
            if (g_dim) c.gen.d = *g_dim;
            if (g_noise) c.gen.noise = *g_noise;
            if (g_tau) c.gen.tau = *g_tau;
            auto r = cmd::cmd_gen_data(c);
            std::printf("train %zu  val %zu  test %zu  positive rate %.4f\n", r.n_train,
                        r.n_val, r.n_test, r.positive_rate);
            std::printf("wrote %s, %s, %s\n", r.train_path.c_str(), r.val_path.c_str(),
                        r.test_path.c_str());
            return cmd::kOk;
        });

    if (tr->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            auto r = cmd::cmd_train(c);
            for (const auto& ep : r.result.history)
                std::printf("epoch %zu  train_loss %.6f  val_acc %.4f  val_f1 %.4f\n",
                            ep.epoch, ep.train_loss, ep.val.accuracy, ep.val.macro_f1);
            std::printf("best epoch %zu (val macro-F1 %.4f)\n", r.result.best_epoch,
                        r.result.best_val_f1);
            std::printf("checkpoint %s\nepochs     %s\n", r.checkpoint_path.c_str(),
                        r.epochs_path.c_str());
            return cmd::kOk;
        });

    if (ev->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            if (e_view) c.view = *e_view;
            if (e_trunc_k) c.truncate_k = *e_trunc_k;
            if (e_min_len) c.min_len = *e_min_len;
            if (e_subset) c.subset = *e_subset;
            if (e_shuffle_seed) c.shuffle_seed = *e_shuffle_seed;
            auto r = cmd::cmd_eval(c, e_ckpt);
            std::fputs(r.table.c_str(), stdout);
            std::printf("report %s\n", r.report_path.c_str());
            return cmd::kOk;
        });

    if (ab->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            auto r = cmd::cmd_ablate(c);
            std::fputs(r.table.c_str(), stdout);
            for (const auto& row : r.rows)
                std::printf("%-20s params %zu\n", row.name.c_str(), row.param_count);
            std::printf("report %s\n", r.report_path.c_str());
            return cmd::kOk;
        });

    if (sw->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            auto r = cmd::cmd_sweep_alpha(c);
            for (const auto& pt : r.points)
                std::printf("alpha %.1f  acc %.4f  macro_f1 %.4f\n", pt.alpha,
                            pt.test.accuracy, pt.test.macro_f1);
            std::printf("report %s\ncsv    %s\n", r.report_path.c_str(), r.csv_path.c_str());
            return cmd::kOk;
        });

    if (gc->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            auto r = cmd::cmd_grad_check(c);
            std::printf("parameters: %zu tensors, %zu scalars\n", r.report.param_tensors,
                        r.report.param_scalars);
            std::printf("worst relative error: %.3e (tol %.1e)\n", r.report.worst(),
                        r.report.tol);
            if (!r.report.all_ok()) {
                for (const auto& e : r.report.entries)
                    if (!e.ok)
                        std::printf("FAIL %-24s rel err %.3e (analytic %.6e, numeric %.6e)\n",
                                    e.name.c_str(), e.max_rel_err, e.analytic, e.numeric);
                return cmd::kCheckFailure;
            }
            std::printf("gradient check passed\n");
            return cmd::kOk;
        });

    if (da->parsed())
        return run_guarded([&]() {
            cmd::ExperimentConfig c = build_config(fl);
            auto r = cmd::cmd_dump_attention(c, d_ckpt, d_ids, d_split);
            std::printf("wrote %zu traces to %s\n", r.count, r.trace_path.c_str());
            return cmd::kOk;
        });

    return cmd::kOk;
}
