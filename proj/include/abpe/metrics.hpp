#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abpe/corpus.hpp"

namespace abpe::metrics {

struct WerResult {
    double rate = 0.0;
    std::uint32_t substitutions = 0;
    std::uint32_t deletions = 0;
    std::uint32_t insertions = 0;
};

/// Levenshtein word alignment with unit costs; rate = (S+D+I)/|ref|.
WerResult wer(std::span<const std::string> ref, std::span<const std::string> hyp);

/// DTW-aligned mel cepstral distortion. Inputs are cepstral coefficient
/// matrices (c0 excluded by the caller). Local cost is
/// (10/ln10)*sqrt(2*sum_d diff^2); steps {(1,0),(0,1),(1,1)} with anchored
/// endpoints; the accumulated cost is divided by the number of path nodes.
double mcd_dtw(const corpus::FeatureMatrix& ref, const corpus::FeatureMatrix& hyp);

struct ZTestResult {
    double z = 0.0;
    double p_value = 1.0;
};

/// Two-sided two-proportion z-test with pooled variance.
ZTestResult two_proportion_z(std::uint64_t c1, std::uint64_t n1, std::uint64_t c2,
                             std::uint64_t n2);

/// Jensen-Shannon divergence, natural log. Inputs must each sum to 1
/// within 1e-9.
double js_divergence(std::span<const double> p, std::span<const double> q);

struct ProsodyFrame {
    float pitch = 0.0f;   // Hz, 0 if unvoiced
    float pov = 0.0f;     // probability of voicing in [0,1]
    float energy = 0.0f;  // log scale
};

/// Per-frame log energy, autocorrelation pitch in [60,400] Hz and a
/// voicing score. Returns a FeatureMatrix with D=3 columns
/// [pitch, pov, energy] and frame_shift_ms = hop_ms.
corpus::FeatureMatrix extract_prosody(std::span<const float> samples, double sample_rate,
                                      double frame_ms = 25.0, double hop_ms = 10.0,
                                      std::string utt_id = {});

struct DiversityReport {
    double ndb = 0.0;  // fraction of bins in [0,1]
    double js = 0.0;
    std::uint32_t k_bins = 0;
    double alpha = 0.0;
    std::uint32_t repeats = 0;
    std::vector<std::pair<double, double>> per_repeat;  // (ndb, js)
};

/// NDB / JS diversity procedure: k-means bins trained on samples_a
/// (rows = samples), both sets histogrammed over nearest-centroid bins,
/// per-bin two-proportion z-tests at level alpha. Repeats vary only the
/// k-means seed (seed + repeat index); the report averages over repeats.
DiversityReport ndb_js(const corpus::FeatureMatrix& samples_a,
                       const corpus::FeatureMatrix& samples_b, std::uint32_t k_bins, double alpha,
                       std::uint32_t repeats, std::uint64_t seed);

}  // namespace abpe::metrics
