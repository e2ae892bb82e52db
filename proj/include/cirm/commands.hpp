#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cirm/grad_check.hpp"
#include "cirm/metrics.hpp"
#include "cirm/model.hpp"
#include "cirm/synthetic.hpp"
#include "cirm/train.hpp"

namespace cirm::cmd {

// Exit code classes used by the CLI binary.
enum ExitCode : int {
    kOk = 0,
    kConfigError = 2,
    kDataError = 3,
    kCheckpointError = 4,
    kCheckFailure = 5,
};

struct ExperimentConfig {
    std::uint64_t seed = 42;
    std::string out_dir = "runs/out";
    std::size_t workers = 1;

    std::string train_path, val_path, test_path;
    bool has_generator = false;
    SyntheticParams gen;

    model::ModelConfig mc;
    bool has_model_section = false;
    bool auto_class_weights = true;

    train::TrainSettings ts;

    std::string view = "plain";
    std::uint64_t shuffle_seed = 1;
    std::size_t truncate_k = 15;
    std::size_t min_len = 0;
    std::size_t subset = 0;

    std::vector<double> alpha_grid;  // empty -> 0.0..1.0 step 0.1
};

ExperimentConfig load_experiment_config(const std::string& path);
ExperimentConfig default_experiment_config();
std::vector<double> default_alpha_grid();

struct GenDataResult {
    std::string train_path, val_path, test_path;
    std::size_t n_train = 0, n_val = 0, n_test = 0;
    double positive_rate = 0.0;
};
GenDataResult cmd_gen_data(const ExperimentConfig& cfg);

struct TrainCmdResult {
    std::string checkpoint_path;
    std::string epochs_path;
    train::TrainResult result;
};
TrainCmdResult cmd_train(const ExperimentConfig& cfg);

struct EvalCmdResult {
    MetricsReport primary;
    std::vector<std::pair<std::string, MetricsReport>> rows;
    std::string report_path;
    std::string table;
};
EvalCmdResult cmd_eval(const ExperimentConfig& cfg, const std::string& checkpoint_path);

struct AblateRow {
    std::string name;          // display name, e.g. "w/o DSBM"
    std::string variant;       // internal name, "" for the full model
    std::size_t param_count = 0;
    MetricsReport test;
};
struct AblateResult {
    std::vector<AblateRow> rows;
    std::string report_path;
    std::string table;
};
AblateResult cmd_ablate(const ExperimentConfig& cfg);

struct SweepPoint {
    double alpha = 0.0;
    MetricsReport test;
    double max_dev_s_vs_lrn = 0.0;  // max |s - s_lrn| over traced samples
    double max_dev_s_vs_cos = 0.0;  // max |s - s_cos|
};
struct SweepResult {
    std::vector<SweepPoint> points;
    std::string report_path;
    std::string csv_path;
};
SweepResult cmd_sweep_alpha(const ExperimentConfig& cfg);

struct GradCheckCmdResult {
    GradCheckReport report;
};
GradCheckCmdResult cmd_grad_check(const ExperimentConfig& cfg);

struct DumpResult {
    std::string trace_path;
    std::size_t count = 0;
};
DumpResult cmd_dump_attention(const ExperimentConfig& cfg, const std::string& checkpoint_path,
                              const std::vector<std::string>& ids,
                              const std::string& split = "test");

}  // namespace cirm::cmd
