#include "abpe/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace abpe::quant {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError("quantizer: " + msg);
}

// Flattened view over a list of feature matrices.
struct FrameSet {
    std::vector<const float*> rows;
    std::size_t dim = 0;
};

FrameSet flatten(std::span<const corpus::FeatureMatrix> frames) {
    require(!frames.empty(), "no feature matrices given");
    FrameSet fs;
    fs.dim = frames.front().cols;
    std::size_t total = 0;
    for (const auto& m : frames) total += m.rows;
    fs.rows.reserve(total);
    for (const auto& m : frames) {
        require(m.cols == fs.dim, "feature dimension mismatch across matrices");
        corpus::validate(m);
        for (std::size_t r = 0; r < m.rows; ++r) fs.rows.push_back(m.data.data() + r * m.cols);
    }
    return fs;
}

template <typename C>
double sq_dist(const float* x, const C* c, std::size_t dim) {
    double acc = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
        const double diff = static_cast<double>(x[d]) - static_cast<double>(c[d]);
        acc += diff * diff;
    }
    return acc;
}

// Nearest centroid in squared-Euclidean distance, smallest index on ties.
template <typename C>
std::pair<std::uint32_t, double> nearest(const float* x, const C* centroids, std::uint32_t k,
                                         std::size_t dim) {
    std::uint32_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::uint32_t j = 0; j < k; ++j) {
        const double d = sq_dist(x, centroids + static_cast<std::size_t>(j) * dim, dim);
        if (d < best_d) {
            best_d = d;
            best = j;
        }
    }
    return {best, best_d};
}

// Assignment pass over all frames. Each frame's result is independent, so the
// OpenMP and serial paths are bit-identical.
void assign_all(const FrameSet& fs, const double* centroids, std::uint32_t k,
                std::vector<std::uint32_t>& out_idx, std::vector<double>& out_dist) {
    const auto n = static_cast<std::int64_t>(fs.rows.size());
    out_idx.resize(fs.rows.size());
    out_dist.resize(fs.rows.size());
#pragma omp parallel for schedule(static) if (parallel_enabled() && n > 256)
    for (std::int64_t i = 0; i < n; ++i) {
        auto [j, d] = nearest(fs.rows[i], centroids, k, fs.dim);
        out_idx[i] = j;
        out_dist[i] = d;
    }
}

std::vector<double> init_centroids(const FrameSet& fs, const KmeansConfig& cfg, Rng& rng) {
    const std::size_t dim = fs.dim;
    const std::size_t n = fs.rows.size();
    std::vector<double> centroids(static_cast<std::size_t>(cfg.k) * dim);

    auto copy_point = [&](std::uint32_t c, std::size_t p) {
        for (std::size_t d = 0; d < dim; ++d) centroids[c * dim + d] = fs.rows[p][d];
    };

    if (cfg.init == KmeansInit::RandomPoints) {
        // Partial Fisher-Yates over frame indices gives k distinct points.
        std::vector<std::size_t> idx(n);
        for (std::size_t i = 0; i < n; ++i) idx[i] = i;
        for (std::uint32_t c = 0; c < cfg.k; ++c) {
            const std::size_t j = c + static_cast<std::size_t>(rng.uniform_below(n - c));
            std::swap(idx[c], idx[j]);
            copy_point(c, idx[c]);
        }
        return centroids;
    }

    // k-means++: first point uniform, then proportional to squared distance
    // from the nearest already-chosen centroid.
    std::vector<double> dist(n, std::numeric_limits<double>::infinity());
    copy_point(0, static_cast<std::size_t>(rng.uniform_below(n)));
    for (std::uint32_t c = 1; c < cfg.k; ++c) {
        const double* prev = centroids.data() + static_cast<std::size_t>(c - 1) * dim;
        const auto ni = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static) if (parallel_enabled() && ni > 256)
        for (std::int64_t i = 0; i < ni; ++i) {
            const double d = sq_dist(fs.rows[i], prev, dim);
            if (d < dist[i]) dist[i] = d;
        }
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) total += dist[i];
        std::size_t pick = 0;
        if (total > 0.0) {
            const double target = rng.uniform01() * total;
            double acc = 0.0;
            pick = n - 1;
            for (std::size_t i = 0; i < n; ++i) {
                acc += dist[i];
                if (acc > target) {
                    pick = i;
                    break;
                }
            }
        } else {
            // All remaining mass is zero (duplicated points); fall back to uniform.
            pick = static_cast<std::size_t>(rng.uniform_below(n));
        }
        copy_point(c, pick);
    }
    return centroids;
}

}  // namespace

Codebook kmeans_train(std::span<const corpus::FeatureMatrix> frames, const KmeansConfig& cfg,
                      KmeansStats* stats) {
    require(cfg.k >= 1, "k must be >= 1");
    require(cfg.max_iters >= 1, "max_iters must be >= 1");
    require(cfg.rel_tol >= 0.0, "rel_tol must be >= 0");
    const FrameSet fs = flatten(frames);
    const std::size_t n = fs.rows.size();
    const std::size_t dim = fs.dim;
    require(n >= cfg.k, "k (" + std::to_string(cfg.k) + ") exceeds frame count (" +
                            std::to_string(n) + ")");

    Rng rng(cfg.seed);
    std::vector<double> centroids = init_centroids(fs, cfg, rng);
    std::vector<std::uint32_t> assign_idx;
    std::vector<double> assign_dist;
    std::vector<double> sums(static_cast<std::size_t>(cfg.k) * dim);
    std::vector<std::size_t> counts(cfg.k);

    if (stats) {
        stats->inertia_per_iter.clear();
        stats->iters = 0;
    }

    double prev_inertia = std::numeric_limits<double>::infinity();
    for (std::uint32_t iter = 0; iter < cfg.max_iters; ++iter) {
        assign_all(fs, centroids.data(), cfg.k, assign_idx, assign_dist);
        double cur = 0.0;
        for (std::size_t i = 0; i < n; ++i) cur += assign_dist[i];
        if (stats) {
            stats->inertia_per_iter.push_back(cur);
            stats->iters = iter + 1;
        }

        // Update step: cluster means, accumulated serially in frame order so
        // the result does not depend on the thread count.
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), std::size_t{0});
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint32_t c = assign_idx[i];
            double* s = sums.data() + static_cast<std::size_t>(c) * dim;
            const float* x = fs.rows[i];
            for (std::size_t d = 0; d < dim; ++d) s[d] += x[d];
            ++counts[c];
        }
        std::vector<char> taken(n, 0);
        for (std::uint32_t c = 0; c < cfg.k; ++c) {
            if (counts[c] > 0) {
                double* dst = centroids.data() + static_cast<std::size_t>(c) * dim;
                const double* s = sums.data() + static_cast<std::size_t>(c) * dim;
                const auto inv = 1.0 / static_cast<double>(counts[c]);
                for (std::size_t d = 0; d < dim; ++d) dst[d] = s[d] * inv;
            } else {
                // Re-seed the empty cluster to the point farthest from its
                // assigned centroid (distinct points for successive empties).
                std::size_t far = 0;
                double far_d = -1.0;
                for (std::size_t i = 0; i < n; ++i) {
                    if (!taken[i] && assign_dist[i] > far_d) {
                        far_d = assign_dist[i];
                        far = i;
                    }
                }
                taken[far] = 1;
                double* dst = centroids.data() + static_cast<std::size_t>(c) * dim;
                for (std::size_t d = 0; d < dim; ++d) dst[d] = fs.rows[far][d];
            }
        }

        if (std::isfinite(prev_inertia)) {
            const double improvement = prev_inertia <= 0.0
                                           ? 0.0
                                           : (prev_inertia - cur) / prev_inertia;
            if (improvement < cfg.rel_tol) break;
        }
        prev_inertia = cur;
    }

    Codebook cb;
    cb.k = cfg.k;
    cb.dim = static_cast<std::uint32_t>(dim);
    cb.centroids.resize(centroids.size());
    for (std::size_t i = 0; i < centroids.size(); ++i)
        cb.centroids[i] = static_cast<float>(centroids[i]);
    cb.training_inertia = inertia(frames, cb);
    return cb;
}

corpus::TokenSequence kmeans_assign(const corpus::FeatureMatrix& m, const Codebook& cb) {
    require(cb.k >= 1 && cb.dim >= 1, "empty codebook");
    require(m.cols == cb.dim, "frame dimension " + std::to_string(m.cols) +
                                  " != codebook dimension " + std::to_string(cb.dim));
    corpus::TokenSequence out;
    out.utt_id = m.utt_id;
    out.alphabet_size = cb.k;
    out.tokens.resize(m.rows);
    const auto n = static_cast<std::int64_t>(m.rows);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n > 256)
    for (std::int64_t i = 0; i < n; ++i)
        out.tokens[i] = nearest(m.data.data() + i * m.cols, cb.centroids.data(), cb.k, cb.dim).first;
    return out;
}

double inertia(std::span<const corpus::FeatureMatrix> frames, const Codebook& cb) {
    require(cb.k >= 1 && cb.dim >= 1, "empty codebook");
    const FrameSet fs = flatten(frames);
    require(fs.dim == cb.dim, "frame dimension != codebook dimension");
    const auto n = static_cast<std::int64_t>(fs.rows.size());
    std::vector<double> dists(fs.rows.size());
#pragma omp parallel for schedule(static) if (parallel_enabled() && n > 256)
    for (std::int64_t i = 0; i < n; ++i)
        dists[i] = nearest(fs.rows[i], cb.centroids.data(), cb.k, cb.dim).second;
    double total = 0.0;  // serial sum in frame order keeps the value thread-count independent
    for (double d : dists) total += d;
    return total;
}

namespace ref {

corpus::TokenSequence kmeans_assign(const corpus::FeatureMatrix& m, const Codebook& cb) {
    require(m.cols == cb.dim, "frame dimension != codebook dimension");
    corpus::TokenSequence out;
    out.utt_id = m.utt_id;
    out.alphabet_size = cb.k;
    out.tokens.resize(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i)
        out.tokens[i] = nearest(m.data.data() + i * m.cols, cb.centroids.data(), cb.k, cb.dim).first;
    return out;
}

double inertia(std::span<const corpus::FeatureMatrix> frames, const Codebook& cb) {
    const FrameSet fs = flatten(frames);
    require(fs.dim == cb.dim, "frame dimension != codebook dimension");
    double total = 0.0;
    for (const float* x : fs.rows) total += nearest(x, cb.centroids.data(), cb.k, cb.dim).second;
    return total;
}

}  // namespace ref

static constexpr char kCodebookMagic[8] = {'A', 'B', 'P', 'E', 'C', 'B', '0', '1'};

Codebook read_codebook_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("quantizer: cannot open " + path);
    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCodebookMagic, 8) != 0)
        throw ParseError("quantizer: " + path + ": bad magic, not a codebook file");
    Codebook cb;
    if (!in.read(reinterpret_cast<char*>(&cb.k), 4) ||
        !in.read(reinterpret_cast<char*>(&cb.dim), 4) ||
        !in.read(reinterpret_cast<char*>(&cb.training_inertia), 8))
        throw ParseError("quantizer: " + path + ": truncated header");
    if (cb.k == 0 || cb.dim == 0) throw ParseError("quantizer: " + path + ": zero K or D");
    cb.centroids.resize(static_cast<std::size_t>(cb.k) * cb.dim);
    if (!in.read(reinterpret_cast<char*>(cb.centroids.data()),
                 static_cast<std::streamsize>(cb.centroids.size() * sizeof(float))))
        throw ParseError("quantizer: " + path + ": truncated centroid payload");
    for (float v : cb.centroids)
        if (!std::isfinite(v)) throw DomainError("quantizer: " + path + ": non-finite centroid");
    return cb;
}

void write_codebook_file(const Codebook& cb, const std::string& path) {
    require(cb.k >= 1 && cb.dim >= 1, "empty codebook");
    require(cb.centroids.size() == static_cast<std::size_t>(cb.k) * cb.dim,
            "centroid payload size mismatch");
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("quantizer: cannot open " + path + " for writing");
    out.write(kCodebookMagic, 8);
    out.write(reinterpret_cast<const char*>(&cb.k), 4);
    out.write(reinterpret_cast<const char*>(&cb.dim), 4);
    out.write(reinterpret_cast<const char*>(&cb.training_inertia), 8);
    out.write(reinterpret_cast<const char*>(cb.centroids.data()),
              static_cast<std::streamsize>(cb.centroids.size() * sizeof(float)));
    out.flush();
    if (!out.good()) throw IoError("quantizer: write failure on " + path);
}

}  // namespace abpe::quant
