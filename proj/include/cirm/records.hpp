#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cirm/tensor.hpp"

namespace cirm {

inline constexpr std::size_t kMaxImages = 4;

// One sample at the embedding level: token embeddings for the caption,
// per-image CLS features, per-image OCR CLS features (zero row + flag 0
// when the image had no detectable text), star rating (0 = none) and label.
struct EmbeddingRecord {
    std::string id;
    Tensor text;                   // [L,d], L >= 1
    Tensor images;                 // [n,d], 1 <= n <= kMaxImages
    Tensor ocr;                    // [n,d]
    std::vector<int> ocr_present;  // n entries of 0/1
    int rating = 0;                // 0..5, 0 = absent
    int label = 0;                 // 0/1

    std::size_t n_images() const { return images.dim(0); }
    std::size_t text_len() const { return text.dim(0); }
    std::size_t dim() const { return text.dim(1); }

    void validate() const;
};

struct DatasetSplit {
    std::vector<EmbeddingRecord> records;
    std::string split;  // train / val / test
    std::uint64_t seed = 0;
};

// Line-delimited record file. First line is the header object
// {"format":"cirm-records","version":1,"d":D,"n_max":4}; every following
// line is one record object. Unknown or missing fields are rejected with
// the offending line number and field name.
void write_records(const std::string& path, const std::vector<EmbeddingRecord>& records,
                   std::size_t d);
std::vector<EmbeddingRecord> read_records(const std::string& path);

}  // namespace cirm
