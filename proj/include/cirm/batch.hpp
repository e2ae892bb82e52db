#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cirm/records.hpp"
#include "cirm/tensor.hpp"

namespace cirm {

// Padded, masked stack of records. image_mask per row is [1]^n ++ [0]^{N-n};
// padded rows of every matrix are zero vectors; ocr_mask <= image_mask.
struct Batch {
    std::size_t B = 0, Lmax = 0, N = 0, d = 0;
    Tensor text;        // [B,Lmax,d]
    Tensor text_mask;   // [B,Lmax]
    Tensor images;      // [B,N,d]
    Tensor image_mask;  // [B,N]
    Tensor ocr;         // [B,N,d]
    Tensor ocr_mask;    // [B,N]
    std::vector<int> rating;
    std::vector<int> label;
    std::vector<std::string> ids;
};

Batch make_batch(const std::vector<EmbeddingRecord>& records, std::size_t N = kMaxImages);

// Keep only the first min(L,K) text rows; everything else untouched.
EmbeddingRecord truncate_view(const EmbeddingRecord& r, std::size_t K = 15);

// Seeded permutation of the n valid images, applied jointly to image rows,
// OCR rows and OCR flags. Padding structure and label are unchanged.
EmbeddingRecord shuffle_images_view(const EmbeddingRecord& r, std::uint64_t seed);

}  // namespace cirm
