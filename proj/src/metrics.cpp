#include "abpe/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "abpe/quantizer.hpp"

namespace abpe::metrics {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError("metrics: " + msg);
}

constexpr double kMcdScale = 4.342944819032518;  // 10 / ln(10)

}  // namespace

WerResult wer(std::span<const std::string> ref, std::span<const std::string> hyp) {
    require(!ref.empty(), "WER reference is empty");
    const std::size_t R = ref.size();
    const std::size_t H = hyp.size();

    // Full DP table kept for the backtrace; desk-scale transcripts are short.
    std::vector<std::uint32_t> d((R + 1) * (H + 1));
    auto at = [&](std::size_t i, std::size_t j) -> std::uint32_t& { return d[i * (H + 1) + j]; };
    for (std::size_t i = 0; i <= R; ++i) at(i, 0) = static_cast<std::uint32_t>(i);
    for (std::size_t j = 0; j <= H; ++j) at(0, j) = static_cast<std::uint32_t>(j);
    for (std::size_t i = 1; i <= R; ++i) {
        for (std::size_t j = 1; j <= H; ++j) {
            const std::uint32_t sub = at(i - 1, j - 1) + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            const std::uint32_t del = at(i - 1, j) + 1;
            const std::uint32_t ins = at(i, j - 1) + 1;
            at(i, j) = std::min({sub, del, ins});
        }
    }

    WerResult res;
    std::size_t i = R, j = H;
    while (i > 0 || j > 0) {
        if (i > 0 && j > 0) {
            const std::uint32_t sub_cost = ref[i - 1] == hyp[j - 1] ? 0 : 1;
            if (at(i, j) == at(i - 1, j - 1) + sub_cost) {
                res.substitutions += sub_cost;
                --i;
                --j;
                continue;
            }
        }
        if (i > 0 && at(i, j) == at(i - 1, j) + 1) {
            ++res.deletions;
            --i;
            continue;
        }
        ++res.insertions;
        --j;
    }
    res.rate = static_cast<double>(res.substitutions + res.deletions + res.insertions) /
               static_cast<double>(R);
    return res;
}

double mcd_dtw(const corpus::FeatureMatrix& ref, const corpus::FeatureMatrix& hyp) {
    corpus::validate(ref);
    corpus::validate(hyp);
    require(ref.cols == hyp.cols, "MCD inputs have different dimensions");
    const std::size_t n = ref.rows;
    const std::size_t m = hyp.rows;

    auto local = [&](std::size_t i, std::size_t j) {
        double acc = 0.0;
        const float* a = ref.data.data() + i * ref.cols;
        const float* b = hyp.data.data() + j * hyp.cols;
        for (std::size_t d = 0; d < ref.cols; ++d) {
            const double diff = static_cast<double>(a[d]) - static_cast<double>(b[d]);
            acc += diff * diff;
        }
        return kMcdScale * std::sqrt(2.0 * acc);
    };

    std::vector<double> cost(n * m);
    std::vector<std::uint32_t> steps(n * m);
    auto c = [&](std::size_t i, std::size_t j) -> double& { return cost[i * m + j]; };
    auto l = [&](std::size_t i, std::size_t j) -> std::uint32_t& { return steps[i * m + j]; };

    const double inf = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < m; ++j) {
            const double lc = local(i, j);
            if (i == 0 && j == 0) {
                c(i, j) = lc;
                l(i, j) = 1;
                continue;
            }
            // Tie preference: diagonal, then (i-1,j), then (i,j-1). The
            // exhaustive-path oracle uses the same order.
            double best = inf;
            std::uint32_t best_len = 0;
            if (i > 0 && j > 0 && c(i - 1, j - 1) < best) {
                best = c(i - 1, j - 1);
                best_len = l(i - 1, j - 1);
            }
            if (i > 0 && c(i - 1, j) < best) {
                best = c(i - 1, j);
                best_len = l(i - 1, j);
            }
            if (j > 0 && c(i, j - 1) < best) {
                best = c(i, j - 1);
                best_len = l(i, j - 1);
            }
            c(i, j) = best + lc;
            l(i, j) = best_len + 1;
        }
    }
    return c(n - 1, m - 1) / static_cast<double>(l(n - 1, m - 1));
}

ZTestResult two_proportion_z(std::uint64_t c1, std::uint64_t n1, std::uint64_t c2,
                             std::uint64_t n2) {
    require(n1 >= 1 && n2 >= 1, "z-test sample sizes must be >= 1");
    require(c1 <= n1 && c2 <= n2, "z-test counts exceed sample sizes");
    const double pooled = static_cast<double>(c1 + c2) / static_cast<double>(n1 + n2);
    if (pooled <= 0.0 || pooled >= 1.0) return {0.0, 1.0};
    const double se = std::sqrt(pooled * (1.0 - pooled) *
                                (1.0 / static_cast<double>(n1) + 1.0 / static_cast<double>(n2)));
    const double z =
        (static_cast<double>(c1) / static_cast<double>(n1) -
         static_cast<double>(c2) / static_cast<double>(n2)) /
        se;
    // Two-sided p = 2*(1 - Phi(|z|)) = erfc(|z|/sqrt(2)).
    const double p = std::erfc(std::abs(z) / 1.4142135623730951);
    return {z, p};
}

double js_divergence(std::span<const double> p, std::span<const double> q) {
    require(p.size() == q.size(), "JS inputs have different lengths");
    require(!p.empty(), "JS inputs are empty");
    double sp = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        require(p[i] >= 0.0 && q[i] >= 0.0, "JS inputs must be non-negative");
        sp += p[i];
        sq += q[i];
    }
    require(std::abs(sp - 1.0) <= 1e-9, "first JS input does not sum to 1");
    require(std::abs(sq - 1.0) <= 1e-9, "second JS input does not sum to 1");

    double acc = 0.0;  // 0*ln(0/x) == 0
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double m = 0.5 * (p[i] + q[i]);
        if (p[i] > 0.0) acc += 0.5 * p[i] * std::log(p[i] / m);
        if (q[i] > 0.0) acc += 0.5 * q[i] * std::log(q[i] / m);
    }
    return std::max(0.0, acc);
}

corpus::FeatureMatrix extract_prosody(std::span<const float> samples, double sample_rate,
                                      double frame_ms, double hop_ms, std::string utt_id) {
    require(sample_rate >= 8000.0, "sample rate must be >= 8000 Hz");
    require(frame_ms > 0.0 && hop_ms > 0.0, "frame and hop must be positive");
    const auto frame_len = static_cast<std::size_t>(std::lround(frame_ms * 1e-3 * sample_rate));
    const auto hop = static_cast<std::size_t>(std::lround(hop_ms * 1e-3 * sample_rate));
    require(frame_len >= 2 && hop >= 1, "frame too short at this sample rate");
    require(samples.size() >= frame_len, "signal shorter than one frame");

    constexpr double kEnergyFloor = 1e-10;
    const auto lag_min = static_cast<std::size_t>(std::floor(sample_rate / 400.0));
    const auto lag_max =
        std::min(frame_len - 1, static_cast<std::size_t>(std::ceil(sample_rate / 60.0)));

    const std::size_t n_frames = 1 + (samples.size() - frame_len) / hop;
    corpus::FeatureMatrix out;
    out.utt_id = std::move(utt_id);
    out.frame_shift_ms = static_cast<float>(hop_ms);
    out.rows = n_frames;
    out.cols = 3;
    out.data.resize(n_frames * 3);

    const auto nf = static_cast<std::int64_t>(n_frames);
#pragma omp parallel for schedule(static) if (parallel_enabled() && nf > 8)
    for (std::int64_t f = 0; f < nf; ++f) {
        const float* x = samples.data() + static_cast<std::size_t>(f) * hop;
        double energy_acc = 0.0;
        for (std::size_t t = 0; t < frame_len; ++t)
            energy_acc += static_cast<double>(x[t]) * static_cast<double>(x[t]);
        const double log_energy = std::log(kEnergyFloor + energy_acc);

        // Normalized autocorrelation peak over the pitch lag range; the
        // first (shortest) lag wins ties so the fundamental beats its
        // multiples.
        double best_r = 0.0;
        std::size_t best_lag = 0;
        for (std::size_t lag = lag_min; lag <= lag_max; ++lag) {
            double num = 0.0, e0 = 0.0, e1 = 0.0;
            const std::size_t span = frame_len - lag;
            for (std::size_t t = 0; t < span; ++t) {
                const double a = x[t];
                const double b = x[t + lag];
                num += a * b;
                e0 += a * a;
                e1 += b * b;
            }
            const double denom = std::sqrt(e0 * e1);
            const double r = denom > 1e-20 ? num / denom : 0.0;
            if (r > best_r) {
                best_r = r;
                best_lag = lag;
            }
        }
        const bool voiced = best_lag > 0 && best_r > 0.0;
        const double pitch = voiced ? sample_rate / static_cast<double>(best_lag) : 0.0;
        const double pov = std::clamp(best_r, 0.0, 1.0);

        float* row = out.data.data() + static_cast<std::size_t>(f) * 3;
        row[0] = static_cast<float>(pitch);
        row[1] = static_cast<float>(pov);
        row[2] = static_cast<float>(log_energy);
    }
    return out;
}

DiversityReport ndb_js(const corpus::FeatureMatrix& samples_a,
                       const corpus::FeatureMatrix& samples_b, std::uint32_t k_bins, double alpha,
                       std::uint32_t repeats, std::uint64_t seed) {
    corpus::validate(samples_a);
    corpus::validate(samples_b);
    require(samples_a.cols == samples_b.cols, "sample sets have different dimensionality");
    require(k_bins >= 1, "k_bins must be >= 1");
    require(k_bins <= samples_a.rows, "k_bins (" + std::to_string(k_bins) +
                                          ") exceeds |samples_a| (" +
                                          std::to_string(samples_a.rows) + ")");
    require(alpha > 0.0 && alpha < 1.0, "alpha must be in (0,1)");
    require(repeats >= 1, "repeats must be >= 1");

    DiversityReport rep;
    rep.k_bins = k_bins;
    rep.alpha = alpha;
    rep.repeats = repeats;
    rep.per_repeat.resize(repeats);

    const std::uint64_t n1 = samples_a.rows;
    const std::uint64_t n2 = samples_b.rows;

    for (std::uint32_t r = 0; r < repeats; ++r) {
        quant::KmeansConfig cfg;
        cfg.k = k_bins;
        cfg.seed = seed + r;
        const corpus::FeatureMatrix train_set[] = {samples_a};
        const quant::Codebook cb = quant::kmeans_train(train_set, cfg);

        std::vector<std::uint64_t> ca(k_bins, 0), cb_counts(k_bins, 0);
        for (std::uint32_t t : quant::kmeans_assign(samples_a, cb).tokens) ++ca[t];
        for (std::uint32_t t : quant::kmeans_assign(samples_b, cb).tokens) ++cb_counts[t];

        std::uint32_t different = 0;
        for (std::uint32_t b = 0; b < k_bins; ++b) {
            if (two_proportion_z(ca[b], n1, cb_counts[b], n2).p_value < alpha) ++different;
        }
        std::vector<double> pa(k_bins), pb(k_bins);
        for (std::uint32_t b = 0; b < k_bins; ++b) {
            pa[b] = static_cast<double>(ca[b]) / static_cast<double>(n1);
            pb[b] = static_cast<double>(cb_counts[b]) / static_cast<double>(n2);
        }
        rep.per_repeat[r] = {static_cast<double>(different) / static_cast<double>(k_bins),
                             js_divergence(pa, pb)};
    }

    for (const auto& [n, j] : rep.per_repeat) {
        rep.ndb += n;
        rep.js += j;
    }
    rep.ndb /= repeats;
    rep.js /= repeats;
    return rep;
}

}  // namespace abpe::metrics
