#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "abpe/bpe.hpp"
#include "abpe/corpus.hpp"
#include "abpe/lm.hpp"
#include "abpe/metrics.hpp"

namespace abpe::bench {

/// End-to-end benchmark setup: one synthetic corpus, one BPE vocab, and a
/// pair of generators trained with the same budget on the raw token stream
/// and on its BPE encoding.
struct PipelineConfig {
    corpus::SynthConfig synth;
    std::uint32_t bpe_vocab_target = 20000;
    std::uint32_t min_pair_freq = 2;
    std::uint32_t dim = 128;
    std::uint32_t layers = 2;
    std::uint32_t heads = 4;
    std::uint32_t ff_mult = 4;
    std::uint32_t max_len = 768;
    lm::OptConfig opt;
    std::uint64_t seed = 0;
};

struct Pipeline {
    corpus::SynthConfig synth;
    corpus::SynthCorpus train;
    bpe::BpeVocab vocab;           // trained acoustic BPE vocab
    bpe::BpeVocab identity_vocab;  // zero merges over the base alphabet
    bpe::CompressionStats compression;
    lm::LmParams lm_base;  // trained on raw token streams
    lm::LmParams lm_bpe;   // trained on BPE id streams
    std::vector<double> loss_curve_base, loss_curve_bpe;
    std::uint32_t train_examples_used = 0;  // after the max_len fit filter
};

/// Builds the corpus, trains the vocab and both generators. Deterministic
/// from the config.
Pipeline build_pipeline(const PipelineConfig& cfg);

/// Fresh phoneme-only prompts from the synth distribution (motifs unused).
std::vector<corpus::SymbolSequence> make_prompts(const corpus::SynthConfig& synth,
                                                 std::uint32_t count, std::uint64_t seed);

struct GeneratedSet {
    std::vector<corpus::TokenSequence> base_tokens;  // decoded to the base alphabet
    double wall_time_s = 0.0;                        // summed autoregressive time
    double audio_seconds = 0.0;                      // duration of the decoded tokens
};

/// Samples one continuation per prompt from the chosen generator and decodes
/// the result to base tokens. use_bpe selects lm_bpe + vocab vs
/// lm_base + identity_vocab.
GeneratedSet generate_set(const Pipeline& p, std::span<const corpus::SymbolSequence> prompts,
                          bool use_bpe, std::uint32_t max_new, double temperature, bool greedy,
                          std::uint64_t seed, double frame_shift_ms = 20.0);

struct RtfReport {
    double median_rtf_base = 0.0;
    double median_rtf_bpe = 0.0;
    double speedup = 0.0;  // median_rtf_base / median_rtf_bpe
    std::vector<double> run_rtf_base, run_rtf_bpe;
    double final_loss_base = 0.0, final_loss_bpe = 0.0;
    double mean_compression = 0.0;
    std::uint32_t achieved_vocab = 0;
};

/// Times generation under both configurations; one aggregate RTF per run
/// (total wall time / total synthesized seconds), medians across runs.
RtfReport bench_rtf(const Pipeline& p, std::uint32_t runs, std::uint32_t prompts_per_run,
                    std::uint32_t max_new, double temperature, std::uint64_t seed,
                    double frame_shift_ms = 20.0);

/// Maps token streams to 3-d pseudo-prosody frames (two hash coordinates per
/// token id, log run length) so the diversity metrics can run on token-domain
/// pipelines that have no waveform stage.
corpus::FeatureMatrix token_pseudo_prosody(std::span<const corpus::TokenSequence> utts,
                                           std::string utt_id = "pseudo-prosody");

/// Splits utterances alternately, maps each half to pseudo-prosody frames and
/// runs the NDB/JS procedure on them.
metrics::DiversityReport diversity_of(std::span<const corpus::TokenSequence> utts,
                                      std::uint32_t k_bins, double alpha, std::uint32_t repeats,
                                      std::uint64_t seed);

}  // namespace abpe::bench
