#include "abpe/bench.hpp"

#include <algorithm>
#include <cmath>

namespace abpe::bench {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError("bench: " + msg);
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

Pipeline build_pipeline(const PipelineConfig& cfg) {
    Pipeline p;
    p.synth = cfg.synth;
    p.train = corpus::synth_corpus(cfg.synth);

    p.vocab = bpe::bpe_train(p.train.tokens, cfg.bpe_vocab_target, cfg.min_pair_freq);
    p.identity_vocab.base_size = cfg.synth.token_alphabet;
    p.compression = bpe::compression_stats(p.train.tokens, p.vocab);
    std::vector<bpe::BpeSequence> encoded = bpe::bpe_encode_corpus(p.train.tokens, p.vocab);

    // Keep only pairs whose longer (base) layout fits max_len, so both
    // generators train on exactly the same utterances.
    std::vector<corpus::SymbolSequence> xs;
    std::vector<bpe::BpeSequence> base_stream, bpe_stream;
    for (std::size_t i = 0; i < p.train.phonemes.size(); ++i) {
        const std::size_t base_len = 2 + p.train.phonemes[i].symbols.size() +
                                     p.train.tokens[i].tokens.size();
        if (base_len > cfg.max_len) continue;
        xs.push_back(p.train.phonemes[i]);
        base_stream.push_back({p.train.tokens[i].utt_id, p.train.tokens[i].tokens});
        bpe_stream.push_back(encoded[i]);
    }
    require(!xs.empty(), "no training pairs fit max_len; raise max_len or shorten utterances");
    p.train_examples_used = static_cast<std::uint32_t>(xs.size());

    lm::LmConfig base_cfg;
    base_cfg.text_vocab = cfg.synth.phoneme_alphabet;
    base_cfg.speech_vocab = cfg.synth.token_alphabet;
    base_cfg.dim = cfg.dim;
    base_cfg.layers = cfg.layers;
    base_cfg.heads = cfg.heads;
    base_cfg.ff_mult = cfg.ff_mult;
    base_cfg.max_len = cfg.max_len;
    base_cfg.seed = cfg.seed;

    lm::LmConfig bpe_cfg = base_cfg;
    bpe_cfg.speech_vocab = p.vocab.vocab_size();
    bpe_cfg.seed = cfg.seed + 1;

    p.lm_base = lm::LmParams::init(base_cfg);
    p.lm_bpe = lm::LmParams::init(bpe_cfg);
    p.loss_curve_base = lm::lm_train(p.lm_base, xs, base_stream, cfg.opt, cfg.seed + 2).loss_curve;
    p.loss_curve_bpe = lm::lm_train(p.lm_bpe, xs, bpe_stream, cfg.opt, cfg.seed + 3).loss_curve;
    return p;
}

std::vector<corpus::SymbolSequence> make_prompts(const corpus::SynthConfig& synth,
                                                 std::uint32_t count, std::uint64_t seed) {
    Rng rng(splitmix64(seed ^ 0x70726F6D707473ULL));
    std::vector<corpus::SymbolSequence> out;
    out.reserve(count);
    for (std::uint32_t u = 0; u < count; ++u) {
        const std::uint32_t span = synth.max_phonemes - synth.min_phonemes + 1;
        const std::uint32_t len =
            synth.min_phonemes + static_cast<std::uint32_t>(rng.uniform_below(span));
        corpus::SymbolSequence s;
        s.utt_id = "prompt-" + std::to_string(u);
        s.alphabet_size = synth.phoneme_alphabet;
        s.symbols.reserve(len);
        for (std::uint32_t i = 0; i < len; ++i)
            s.symbols.push_back(static_cast<std::uint32_t>(rng.uniform_below(synth.phoneme_alphabet)));
        out.push_back(std::move(s));
    }
    return out;
}

GeneratedSet generate_set(const Pipeline& p, std::span<const corpus::SymbolSequence> prompts,
                          bool use_bpe, std::uint32_t max_new, double temperature, bool greedy,
                          std::uint64_t seed, double frame_shift_ms) {
    const lm::LmParams& model = use_bpe ? p.lm_bpe : p.lm_base;
    const bpe::BpeVocab& vocab = use_bpe ? p.vocab : p.identity_vocab;

    GeneratedSet out;
    const corpus::SymbolSequence empty_x{"", {}, model.cfg.text_vocab};
    const bpe::BpeSequence empty_s{"", {}};
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        lm::SamplingConfig sc;
        sc.temperature = temperature;
        sc.greedy = greedy;
        sc.max_new = max_new;
        sc.seed = splitmix64(seed + 0x9E37 * i + (use_bpe ? 1 : 0));
        const lm::GenerationResult r = lm::lm_generate(model, empty_x, prompts[i], empty_s, sc);
        out.wall_time_s += r.wall_time_s;
        if (r.ids.ids.empty()) continue;  // immediate EOS contributes no audio
        corpus::TokenSequence base = bpe::bpe_decode(r.ids, vocab);
        base.utt_id = prompts[i].utt_id;
        out.audio_seconds +=
            static_cast<double>(base.tokens.size()) * frame_shift_ms / 1000.0;
        out.base_tokens.push_back(std::move(base));
    }
    return out;
}

RtfReport bench_rtf(const Pipeline& p, std::uint32_t runs, std::uint32_t prompts_per_run,
                    std::uint32_t max_new, double temperature, std::uint64_t seed,
                    double frame_shift_ms) {
    require(runs >= 1 && prompts_per_run >= 1, "runs and prompts_per_run must be >= 1");
    RtfReport rep;
    rep.mean_compression = p.compression.mean_ratio;
    rep.achieved_vocab = p.vocab.vocab_size();
    if (!p.loss_curve_base.empty()) rep.final_loss_base = p.loss_curve_base.back();
    if (!p.loss_curve_bpe.empty()) rep.final_loss_bpe = p.loss_curve_bpe.back();

    // Cap the BPE id budget by the same audio budget the base stream gets.
    const std::uint32_t max_new_bpe = max_new;

    for (std::uint32_t r = 0; r < runs; ++r) {
        const std::vector<corpus::SymbolSequence> prompts =
            make_prompts(p.synth, prompts_per_run, seed + 1000 + r);

        const GeneratedSet gb =
            generate_set(p, prompts, false, max_new, temperature, false, seed + 7 * r + 1,
                         frame_shift_ms);
        const GeneratedSet gs =
            generate_set(p, prompts, true, max_new_bpe, temperature, false, seed + 7 * r + 2,
                         frame_shift_ms);
        require(gb.audio_seconds > 0.0 && gs.audio_seconds > 0.0,
                "a benchmark run produced no audio; the generators are undertrained");
        rep.run_rtf_base.push_back(gb.wall_time_s / gb.audio_seconds);
        rep.run_rtf_bpe.push_back(gs.wall_time_s / gs.audio_seconds);
    }
    rep.median_rtf_base = median(rep.run_rtf_base);
    rep.median_rtf_bpe = median(rep.run_rtf_bpe);
    rep.speedup = rep.median_rtf_base / rep.median_rtf_bpe;
    return rep;
}

corpus::FeatureMatrix token_pseudo_prosody(std::span<const corpus::TokenSequence> utts,
                                           std::string utt_id) {
    std::size_t total = 0;
    for (const auto& u : utts) total += u.tokens.size();
    require(total > 0, "no frames to map");

    corpus::FeatureMatrix m;
    m.utt_id = std::move(utt_id);
    m.cols = 3;
    m.rows = total;
    m.frame_shift_ms = 20.0f;
    m.data.reserve(total * 3);

    auto coord = [](std::uint64_t h) {
        return static_cast<float>(static_cast<double>(h >> 11) * 0x1.0p-53);
    };
    for (const auto& u : utts) {
        std::size_t i = 0;
        while (i < u.tokens.size()) {
            const std::uint32_t t = u.tokens[i];
            std::size_t j = i;
            while (j < u.tokens.size() && u.tokens[j] == t) ++j;
            const auto run = static_cast<double>(j - i);
            const float c1 = coord(splitmix64(2 * t + 1));
            const float c2 = coord(splitmix64(2 * t + 2));
            const auto c3 = static_cast<float>(std::log1p(run));
            for (std::size_t f = i; f < j; ++f) {
                m.data.push_back(c1);
                m.data.push_back(c2);
                m.data.push_back(c3);
            }
            i = j;
        }
    }
    return m;
}

metrics::DiversityReport diversity_of(std::span<const corpus::TokenSequence> utts,
                                      std::uint32_t k_bins, double alpha, std::uint32_t repeats,
                                      std::uint64_t seed) {
    require(utts.size() >= 2, "need at least two utterances to split");
    std::vector<corpus::TokenSequence> half_a, half_b;
    for (std::size_t i = 0; i < utts.size(); ++i)
        (i % 2 == 0 ? half_a : half_b).push_back(utts[i]);
    const corpus::FeatureMatrix fa = token_pseudo_prosody(half_a, "half-a");
    const corpus::FeatureMatrix fb = token_pseudo_prosody(half_b, "half-b");
    return metrics::ndb_js(fa, fb, k_bins, alpha, repeats, seed);
}

}  // namespace abpe::bench
