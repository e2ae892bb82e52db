#include "cirm/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "cirm/rng.hpp"

namespace cirm {

namespace {

void normalize_row(double* v, std::size_t d) {
    double n = 0.0;
    for (std::size_t c = 0; c < d; ++c) n += v[c] * v[c];
    n = std::sqrt(n);
    if (n > 0.0)
        for (std::size_t c = 0; c < d; ++c) v[c] /= n;
}

}  // namespace

int contrast_label(const Tensor& images, double tau) {
    const std::size_t n = images.dim(0), d = images.dim(1);
    double min_dot = 1.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            double dot = 0.0, ni = 0.0, nj = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                dot += images.at2(i, c) * images.at2(j, c);
                ni += images.at2(i, c) * images.at2(i, c);
                nj += images.at2(j, c) * images.at2(j, c);
            }
            const double denom = std::sqrt(ni) * std::sqrt(nj);
            if (denom > 0.0) min_dot = std::min(min_dot, dot / denom);
        }
    return min_dot < -tau ? 1 : 0;
}

SyntheticDataset generate_synthetic_dataset(const SyntheticParams& p) {
    if (p.d < 4) throw ConfigError("generator: d must be >= 4");
    if (p.count < 10) throw ConfigError("generator: count must be >= 10");
    if (p.noise < 0.0 || p.noise >= 1.0) throw ConfigError("generator: noise must be in [0,1)");

    Rng rng(p.seed);
    std::vector<EmbeddingRecord> records;
    records.reserve(p.count);
    for (std::size_t i = 0; i < p.count; ++i) {
        EmbeddingRecord r;
        char buf[32];
        std::snprintf(buf, sizeof(buf), "syn-%06zu", i);
        r.id = buf;

        const std::size_t n = 2 + rng.uniform_index(3);
        r.images = Tensor({n, p.d});
        std::vector<double> base(p.d);
        for (auto& v : base) v = rng.gaussian();
        normalize_row(base.data(), p.d);
        for (std::size_t c = 0; c < p.d; ++c) r.images.at2(0, c) = base[c];

        // Half the records carry a contrast; inside those every later image
        // flips a fair coin, with at least one forced to the opposing side
        // so the planted label is unambiguous.
        const bool has_contrast = rng.coin();
        std::vector<int> sign(n, 1);
        if (has_contrast) {
            bool any = false;
            for (std::size_t k = 1; k < n; ++k) {
                sign[k] = rng.coin() ? -1 : 1;
                any = any || sign[k] < 0;
            }
            if (!any) sign[1 + rng.uniform_index(n - 1)] = -1;
        }
        for (std::size_t k = 1; k < n; ++k) {
            for (std::size_t c = 0; c < p.d; ++c)
                r.images.at2(k, c) = sign[k] * base[c] + p.noise * rng.gaussian();
            normalize_row(r.images.data() + k * p.d, p.d);
        }
        r.label = contrast_label(r.images, p.tau);

        const std::size_t L = 4 + rng.uniform_index(9);  // 4..12 noise tokens
        r.text = Tensor({L, p.d});
        const double ts = 1.0 / std::sqrt(static_cast<double>(p.d));
        for (std::size_t t = 0; t < L; ++t)
            for (std::size_t c = 0; c < p.d; ++c) r.text.at2(t, c) = ts * rng.gaussian();

        r.ocr = Tensor({n, p.d});
        r.ocr_present.assign(n, 0);
        for (std::size_t k = 0; k < n; ++k) {
            if (rng.coin()) {
                r.ocr_present[k] = 1;
                for (std::size_t c = 0; c < p.d; ++c)
                    r.ocr.at2(k, c) = r.images.at2(k, c) + p.noise * rng.gaussian();
                normalize_row(r.ocr.data() + k * p.d, p.d);
            }
        }
        r.rating = 0;
        records.push_back(std::move(r));
    }

    const std::size_t n_train = p.count * 70 / 100;
    const std::size_t n_val = p.count * 15 / 100;
    SyntheticDataset ds;
    ds.train.split = "train";
    ds.val.split = "val";
    ds.test.split = "test";
    ds.train.seed = ds.val.seed = ds.test.seed = p.seed;
    for (std::size_t i = 0; i < records.size(); ++i) {
        if (i < n_train)
            ds.train.records.push_back(std::move(records[i]));
        else if (i < n_train + n_val)
            ds.val.records.push_back(std::move(records[i]));
        else
            ds.test.records.push_back(std::move(records[i]));
    }
    return ds;
}

}  // namespace cirm
