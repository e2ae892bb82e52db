#pragma once

#include <cstdint>

#include "cirm/records.hpp"

namespace cirm {

// Desk-scale stand-in for the pretrained encoders: plants a cross-image
// contrast signal. Image features are unit vectors; a record is positive
// exactly when some pair of its images points in opposing directions
// (min pairwise cosine < -tau). Text embeddings are pure noise, so any
// classifier that beats chance must reason across images.
struct SyntheticParams {
    std::uint64_t seed = 42;
    std::size_t count = 1000;
    std::size_t d = 32;
    double noise = 0.1;
    double tau = 0.0;
};

struct SyntheticDataset {
    DatasetSplit train;
    DatasetSplit val;
    DatasetSplit test;
};

SyntheticDataset generate_synthetic_dataset(const SyntheticParams& p);

// Independent label rule used by tests and gen-data verification: scans
// every valid pair of image rows.
int contrast_label(const Tensor& images, double tau);

}  // namespace cirm
