#include "cirm/batch.hpp"

#include <algorithm>
#include <cstring>

#include "cirm/rng.hpp"

namespace cirm {

Batch make_batch(const std::vector<EmbeddingRecord>& records, std::size_t N) {
    if (records.empty()) throw DimensionError("make_batch: empty record list");
    const std::size_t d = records.front().dim();
    std::size_t Lmax = 0;
    for (const auto& r : records) {
        r.validate();
        if (r.dim() != d) throw DimensionError("make_batch: mixed embedding dims");
        if (r.n_images() > N) throw DimensionError("make_batch: record " + r.id + " exceeds N");
        Lmax = std::max(Lmax, r.text_len());
    }
    const std::size_t B = records.size();
    Batch b;
    b.B = B;
    b.Lmax = Lmax;
    b.N = N;
    b.d = d;
    b.text = Tensor({B, Lmax, d});
    b.text_mask = Tensor({B, Lmax});
    b.images = Tensor({B, N, d});
    b.image_mask = Tensor({B, N});
    b.ocr = Tensor({B, N, d});
    b.ocr_mask = Tensor({B, N});
    for (std::size_t i = 0; i < B; ++i) {
        const auto& r = records[i];
        const std::size_t L = r.text_len(), n = r.n_images();
        for (std::size_t t = 0; t < L; ++t) {
            std::memcpy(b.text.data() + (i * Lmax + t) * d, r.text.data() + t * d,
                        d * sizeof(double));
            b.text_mask.at2(i, t) = 1.0;
        }
        for (std::size_t k = 0; k < n; ++k) {
            std::memcpy(b.images.data() + (i * N + k) * d, r.images.data() + k * d,
                        d * sizeof(double));
            b.image_mask.at2(i, k) = 1.0;
            if (r.ocr_present[k]) {
                std::memcpy(b.ocr.data() + (i * N + k) * d, r.ocr.data() + k * d,
                            d * sizeof(double));
                b.ocr_mask.at2(i, k) = 1.0;
            }
        }
        b.rating.push_back(r.rating);
        b.label.push_back(r.label);
        b.ids.push_back(r.id);
    }
    return b;
}

EmbeddingRecord truncate_view(const EmbeddingRecord& r, std::size_t K) {
    if (K < 1) throw ConfigError("truncate_view: K must be >= 1");
    EmbeddingRecord out = r;
    const std::size_t L = r.text_len(), d = r.dim();
    const std::size_t Lp = std::min(L, K);
    if (Lp == L) return out;
    out.text = Tensor({Lp, d});
    std::memcpy(out.text.data(), r.text.data(), Lp * d * sizeof(double));
    return out;
}

EmbeddingRecord shuffle_images_view(const EmbeddingRecord& r, std::uint64_t seed) {
    EmbeddingRecord out = r;
    const std::size_t n = r.n_images(), d = r.dim();
    if (n <= 1) return out;
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    Rng rng(seed);
    for (std::size_t i = n - 1; i > 0; --i)
        std::swap(perm[i], perm[rng.uniform_index(i + 1)]);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t src = perm[i];
        std::memcpy(out.images.data() + i * d, r.images.data() + src * d, d * sizeof(double));
        std::memcpy(out.ocr.data() + i * d, r.ocr.data() + src * d, d * sizeof(double));
        out.ocr_present[i] = r.ocr_present[src];
    }
    return out;
}

}  // namespace cirm
