#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "abpe/corpus.hpp"

namespace abpe::bpe {

inline constexpr char32_t kDefaultCodepointOffset = 0x4E00;  // CJK Unified Ideographs

/// Ordered merge list over integer ids. Base tokens are 0..base_size-1; the
/// i-th merge produces id base_size+i. Merges never reference ids created by
/// later merges.
struct BpeVocab {
    std::uint32_t base_size = 0;
    char32_t codepoint_offset = kDefaultCodepointOffset;
    std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;

    std::uint32_t vocab_size() const {
        return base_size + static_cast<std::uint32_t>(merges.size());
    }
    void validate() const;
};

/// Compressed id sequence under some BpeVocab.
struct BpeSequence {
    std::string utt_id;
    std::vector<std::uint32_t> ids;
};

// --- token <-> codepoint bijection ----------------------------------------

std::u32string tokens_to_codepoints(const corpus::TokenSequence& seq, char32_t offset);
corpus::TokenSequence codepoints_to_tokens(std::u32string_view text, char32_t offset,
                                           std::uint32_t alphabet_size, std::string utt_id = {});

std::string utf8_encode(std::u32string_view text);
std::u32string utf8_decode(std::string_view bytes);

// --- training / encode / decode -------------------------------------------

/// Classic BPE over a token corpus. Repeatedly merges the most frequent
/// adjacent pair (ties: lexicographically smallest pair), never crossing
/// utterance boundaries, until vocab_size reaches the target or the best
/// pair frequency drops below min_pair_freq.
BpeVocab bpe_train(std::span<const corpus::TokenSequence> corpus,
                   std::uint32_t target_vocab_size, std::uint32_t min_pair_freq = 2);

/// Applies the vocab's merges in training order (greedy left-to-right per
/// rule). Lossless: bpe_decode(bpe_encode(s)) == s.
BpeSequence bpe_encode(const corpus::TokenSequence& seq, const BpeVocab& vocab);

/// Expands every id back to base tokens.
corpus::TokenSequence bpe_decode(const BpeSequence& seq, const BpeVocab& vocab);

/// Parallel over utterances; identical per-utterance results to bpe_encode.
std::vector<BpeSequence> bpe_encode_corpus(std::span<const corpus::TokenSequence> corpus,
                                           const BpeVocab& vocab);

struct CompressionStats {
    double mean_ratio = 0.0;
    std::uint64_t total_base_tokens = 0;
    std::uint64_t total_bpe_ids = 0;
    std::vector<double> per_utt;
};
CompressionStats compression_stats(std::span<const corpus::TokenSequence> corpus,
                                   const BpeVocab& vocab);

/// Adjacent-pair counts across the corpus (pairs never span utterances).
/// Keys pack (left << 32) | right.
std::unordered_map<std::uint64_t, std::int64_t> count_pairs(
    std::span<const corpus::TokenSequence> corpus);

inline std::uint64_t pair_key(std::uint32_t l, std::uint32_t r) {
    return (static_cast<std::uint64_t>(l) << 32) | r;
}

// Serial reference kernels (tests and the kernel benchmark). ref::bpe_encode
// is the rule-by-rule scan the merge-list semantics are defined by; the
// production encoder must match it exactly.
namespace ref {
BpeSequence bpe_encode(const corpus::TokenSequence& seq, const BpeVocab& vocab);
std::unordered_map<std::uint64_t, std::int64_t> count_pairs(
    std::span<const corpus::TokenSequence> corpus);
}  // namespace ref

// --- file formats -----------------------------------------------------------

// Vocab text file: line 1 "ABPEVOC1 K=<uint> OFFSET=<hex>", then one merge
// "<left_id> <right_id>" per line in training order.
BpeVocab read_vocab_file(const std::string& path);
void write_vocab_file(const BpeVocab& vocab, const std::string& path);

// BPE sequence file: the token text format with header "V=<uint>".
std::vector<BpeSequence> read_bpe_file(const std::string& path, std::uint32_t expected_vocab = 0);
void write_bpe_file(std::span<const BpeSequence> seqs, std::uint32_t vocab_size,
                    const std::string& path);

// Codepoint export: UTF-8 text, one utterance per line with the offset
// mapping applied (for interchange with external subword tools).
void write_codepoint_file(std::span<const corpus::TokenSequence> seqs, char32_t offset,
                          const std::string& path);
std::vector<corpus::TokenSequence> read_codepoint_file(const std::string& path, char32_t offset,
                                                       std::uint32_t alphabet_size);

}  // namespace abpe::bpe
