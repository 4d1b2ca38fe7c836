#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abpe/common.hpp"

namespace abpe::corpus {

/// T x D matrix of 32-bit float feature frames for one utterance.
struct FeatureMatrix {
    std::string utt_id;
    float frame_shift_ms = 20.0f;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<float> data;  // row-major, rows*cols entries

    std::span<const float> row(std::size_t r) const { return {data.data() + r * cols, cols}; }
    std::span<float> row(std::size_t r) { return {data.data() + r * cols, cols}; }
};

/// Per-utterance discrete unit ids in [0, alphabet_size).
struct TokenSequence {
    std::string utt_id;
    std::vector<std::uint32_t> tokens;
    std::uint32_t alphabet_size = 0;
};

/// Per-utterance condition-stream ids (phoneme-like) in [0, alphabet_size).
struct SymbolSequence {
    std::string utt_id;
    std::vector<std::uint32_t> symbols;
    std::uint32_t alphabet_size = 0;
};

struct SynthConfig {
    std::uint32_t phoneme_alphabet = 8;    // P
    std::uint32_t token_alphabet = 64;     // K
    std::uint32_t runs_per_phoneme = 1;
    double mean_run_length = 4.0;
    std::uint32_t num_utterances = 100;
    std::uint32_t min_phonemes = 10;
    std::uint32_t max_phonemes = 30;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SynthCorpus {
    std::vector<SymbolSequence> phonemes;
    std::vector<TokenSequence> tokens;
};

void validate(const FeatureMatrix& m);
void validate(const TokenSequence& s);
void validate(const SymbolSequence& s);

// --- token / symbol text files ------------------------------------------
//
// Line 1: "<kind>=<alphabet_size>" where kind is K (tokens), P (symbols) or
// V (BPE ids). Each following non-blank line: "<utt_id>\t<i1> <i2> ... <in>".

std::vector<TokenSequence> read_token_file(const std::string& path);
void write_token_file(std::span<const TokenSequence> seqs, const std::string& path);

std::vector<SymbolSequence> read_symbol_file(const std::string& path);
void write_symbol_file(std::span<const SymbolSequence> seqs, const std::string& path);

// Generic form used by the V= BPE sequence files as well.
struct IdRecord {
    std::string utt_id;
    std::vector<std::uint32_t> ids;
};
std::pair<std::uint32_t, std::vector<IdRecord>> read_id_file(const std::string& path, char kind);
void write_id_file(std::span<const IdRecord> rows, std::uint32_t alphabet, const std::string& path,
                   char kind);

// --- feature binary files -------------------------------------------------
//
// Magic "ABPEFT01", u32 LE rows, u32 LE cols, f32 LE frame_shift_ms,
// rows*cols f32 LE row-major payload, u16 LE id length, UTF-8 utt_id bytes.

FeatureMatrix read_feature_file(const std::string& path);
void write_feature_file(const FeatureMatrix& m, const std::string& path);

// --- synthetic paired corpus ----------------------------------------------

/// Generates a paired (phoneme, token) corpus. Each phoneme owns
/// `runs_per_phoneme` candidate motif tokens; every occurrence emits one of
/// its motifs repeated for a geometric run with the configured mean. Pure
/// function of the config, including the seed.
SynthCorpus synth_corpus(const SynthConfig& cfg);

}  // namespace abpe::corpus
