#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "abpe/corpus.hpp"

namespace abpe::quant {

/// Trained k-means codebook: K centroids of dimension D, float storage.
struct Codebook {
    std::uint32_t k = 0;
    std::uint32_t dim = 0;
    double training_inertia = 0.0;
    std::vector<float> centroids;  // row-major k*dim

    std::span<const float> centroid(std::uint32_t i) const {
        return {centroids.data() + static_cast<std::size_t>(i) * dim, dim};
    }
};

enum class KmeansInit { KmeansPlusPlus, RandomPoints };

struct KmeansConfig {
    std::uint32_t k = 1;
    std::uint32_t max_iters = 100;
    double rel_tol = 1e-6;  // relative inertia improvement stop
    std::uint64_t seed = 0;
    KmeansInit init = KmeansInit::KmeansPlusPlus;
};

/// Per-iteration training diagnostics.
struct KmeansStats {
    std::vector<double> inertia_per_iter;  // objective after each assignment step
    std::uint32_t iters = 0;
};

/// Lloyd's algorithm, squared-Euclidean objective, 64-bit accumulation.
/// Empty clusters are re-seeded to the point farthest from its centroid.
/// Deterministic given the seed (independent of thread count).
Codebook kmeans_train(std::span<const corpus::FeatureMatrix> frames, const KmeansConfig& cfg,
                      KmeansStats* stats = nullptr);

/// Nearest-centroid ids per frame; ties go to the smallest centroid index.
corpus::TokenSequence kmeans_assign(const corpus::FeatureMatrix& m, const Codebook& cb);

/// Sum of squared distances from each frame to its nearest centroid.
double inertia(std::span<const corpus::FeatureMatrix> frames, const Codebook& cb);

// Serial reference kernels. Same element-wise arithmetic as the OpenMP
// paths above; kept for tests and the kernel benchmark.
namespace ref {
corpus::TokenSequence kmeans_assign(const corpus::FeatureMatrix& m, const Codebook& cb);
double inertia(std::span<const corpus::FeatureMatrix> frames, const Codebook& cb);
}  // namespace ref

// Codebook binary format: magic "ABPECB01", u32 K, u32 D,
// f64 training_inertia, K*D f32 LE row-major.
Codebook read_codebook_file(const std::string& path);
void write_codebook_file(const Codebook& cb, const std::string& path);

}  // namespace abpe::quant
