// Compares the OpenMP kernels against their serial reference implementations:
// same arithmetic, same results, different wall time. Prints one line per
// kernel with both timings and the checked-equal flag.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "abpe/bench.hpp"
#include "abpe/bpe.hpp"
#include "abpe/corpus.hpp"
#include "abpe/lm.hpp"
#include "abpe/quantizer.hpp"

using namespace abpe;

namespace {

double time_of(const std::function<void()>& fn, int reps) {
    fn();  // warmup
    const auto t0 = std::chrono::steady_clock::now();
    for (int r = 0; r < reps; ++r) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_s, double parallel_s, bool equal) {
    std::printf("%-22s serial %9.4f ms   omp %9.4f ms   speedup %5.2fx   results %s\n", name,
                serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s,
                equal ? "equal" : "DIFFER");
}

}  // namespace

int main(int argc, char** argv) {
    int reps = 3;
    if (argc > 1) reps = std::max(1, std::atoi(argv[1]));
    std::printf("threads: %d, reps: %d\n", omp_get_max_threads(), reps);

    Rng rng(42);

    // --- k-means assign + inertia ------------------------------------------
    {
        const std::size_t n = 20000, d = 32;
        const std::uint32_t k = 256;
        corpus::FeatureMatrix m;
        m.utt_id = "bench";
        m.rows = n;
        m.cols = d;
        m.data.resize(n * d);
        for (auto& v : m.data) v = static_cast<float>(rng.normal());
        quant::Codebook cb;
        cb.k = k;
        cb.dim = d;
        cb.centroids.resize(static_cast<std::size_t>(k) * d);
        for (auto& v : cb.centroids) v = static_cast<float>(rng.normal());

        corpus::TokenSequence out_p, out_s;
        const double tp = time_of([&] {
            set_parallel_enabled(true);
            out_p = quant::kmeans_assign(m, cb);
        }, reps);
        const double ts = time_of([&] { out_s = quant::ref::kmeans_assign(m, cb); }, reps);
        report("kmeans_assign", ts, tp, out_p.tokens == out_s.tokens);

        const corpus::FeatureMatrix frames[] = {m};
        double ip = 0, is = 0;
        const double tp2 = time_of([&] {
            set_parallel_enabled(true);
            ip = quant::inertia(frames, cb);
        }, reps);
        const double ts2 = time_of([&] { is = quant::ref::inertia(frames, cb); }, reps);
        report("inertia", ts2, tp2, ip == is);
    }

    // --- BPE pair counting and corpus encode --------------------------------
    {
        corpus::SynthConfig sc;
        sc.phoneme_alphabet = 64;
        sc.token_alphabet = 512;
        sc.runs_per_phoneme = 2;
        sc.mean_run_length = 4.0;
        sc.num_utterances = 1500;
        sc.min_phonemes = 20;
        sc.max_phonemes = 40;
        sc.seed = 7;
        const corpus::SynthCorpus corp = corpus::synth_corpus(sc);

        std::unordered_map<std::uint64_t, std::int64_t> cp, cs;
        const double tp = time_of([&] {
            set_parallel_enabled(true);
            cp = bpe::count_pairs(corp.tokens);
        }, reps);
        const double ts = time_of([&] { cs = bpe::ref::count_pairs(corp.tokens); }, reps);
        report("bpe_count_pairs", ts, tp, cp == cs);

        const bpe::BpeVocab vocab = bpe::bpe_train(corp.tokens, 4000, 2);
        std::vector<bpe::BpeSequence> ep;
        const double te = time_of([&] {
            set_parallel_enabled(true);
            ep = bpe::bpe_encode_corpus(corp.tokens, vocab);
        }, reps);
        std::vector<bpe::BpeSequence> es;
        const double te_s = time_of([&] {
            es.clear();
            for (const auto& t : corp.tokens) es.push_back(bpe::ref::bpe_encode(t, vocab));
        }, reps);
        bool equal = ep.size() == es.size();
        for (std::size_t i = 0; equal && i < ep.size(); ++i) equal = ep[i].ids == es[i].ids;
        report("bpe_encode_corpus", te_s, te, equal);
    }

    // --- LM forward ----------------------------------------------------------
    {
        lm::LmConfig cfg;
        cfg.text_vocab = 64;
        cfg.speech_vocab = 512;
        cfg.dim = 128;
        cfg.layers = 2;
        cfg.heads = 4;
        cfg.max_len = 512;
        cfg.seed = 3;
        const lm::LmParams params = lm::LmParams::init(cfg);
        std::vector<std::uint32_t> x(30), s(200);
        for (auto& v : x) v = static_cast<std::uint32_t>(rng.uniform_below(cfg.text_vocab));
        for (auto& v : s) v = static_cast<std::uint32_t>(rng.uniform_below(cfg.speech_vocab));

        lm::ForwardResult rp, rs;
        const double tp = time_of([&] {
            set_parallel_enabled(true);
            rp = lm::lm_forward(params, x, s);
        }, reps);
        const double ts = time_of([&] {
            set_parallel_enabled(false);
            rs = lm::lm_forward(params, x, s);
        }, reps);
        set_parallel_enabled(true);
        report("lm_forward", ts, tp, rp.logits == rs.logits && rp.loss == rs.loss);
    }

    return 0;
}
