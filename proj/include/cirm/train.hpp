#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "cirm/metrics.hpp"
#include "cirm/model.hpp"
#include "cirm/records.hpp"

namespace cirm::train {

struct TrainSettings {
    double lr = 2e-5;
    double weight_decay = 1e-5;
    std::size_t batch_size = 16;
    std::size_t epochs = 30;
    std::uint64_t seed = 42;
};

struct EpochStats {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    MetricsReport val;
};

struct TrainResult {
    model::ModelConfig config;
    ParameterStore best_params;
    std::size_t best_epoch = 0;  // 0 = initialization
    double best_val_f1 = 0.0;
    std::vector<EpochStats> history;
};

// Inverse class frequency normalized so the expected weight over the
// training samples is 1 (w_c = n / (2 n_c)).
std::array<double, 2> inverse_frequency_weights(const std::vector<EmbeddingRecord>& records);

// Deterministic given the seed: sample order is reshuffled once per epoch
// by a seeded generator, the best validation-macro-F1 parameters are kept.
// A non-finite loss aborts with the epoch and batch index in the message.
TrainResult train_model(const std::vector<EmbeddingRecord>& train_recs,
                        const std::vector<EmbeddingRecord>& val_recs, model::ModelConfig cfg,
                        const TrainSettings& ts);

struct EvalOptions {
    enum class View { plain, shuffled, truncated };
    View view = View::plain;
    std::uint64_t shuffle_seed = 1;
    std::size_t truncate_k = 15;
    std::size_t min_len = 0;       // keep records with L >= min_len (0 = no filter)
    std::size_t subset = 0;        // seeded random subset size (0 = all)
    std::uint64_t subset_seed = 7;
    std::size_t batch_size = 16;
    bool with_ci = false;          // attach Wilson 95% interval on accuracy
    std::uint64_t report_seed = 0;
};

std::vector<EmbeddingRecord> select_eval_records(const std::vector<EmbeddingRecord>& records,
                                                 const EvalOptions& opt);

MetricsReport evaluate(const ParameterStore& params, const model::ModelConfig& cfg,
                       const std::vector<EmbeddingRecord>& records, const EvalOptions& opt);

// Line-delimited checkpoint: header object with the embedded config, then
// one {name, shape, data} object per parameter in store order.
void save_checkpoint(const std::string& path, const model::ModelConfig& cfg,
                     const ParameterStore& params, std::size_t best_epoch,
                     double best_val_f1);

struct Checkpoint {
    model::ModelConfig config;
    ParameterStore params;
    std::size_t best_epoch = 0;
    double best_val_f1 = 0.0;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace cirm::train
