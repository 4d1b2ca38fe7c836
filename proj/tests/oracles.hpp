#pragma once

// Independent brute-force oracles used by the tests. Everything here is
// written from the definitions, not by calling the library's optimized
// paths, so a bug in the implementation cannot hide in its own oracle.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "abpe/bpe.hpp"
#include "abpe/corpus.hpp"

namespace oracles {

// Nearest-centroid scan (O(T*K*D)) and summed squared distances.
std::vector<std::uint32_t> naive_assign(const abpe::corpus::FeatureMatrix& m,
                                        std::span<const float> centroids, std::uint32_t k);
double naive_inertia(const abpe::corpus::FeatureMatrix& m, std::span<const float> centroids,
                     std::uint32_t k);

// Exhaustive k-way partition search over n points (n small); returns the
// globally optimal inertia with centroids at partition means.
double best_partition_inertia(const abpe::corpus::FeatureMatrix& points, std::uint32_t k);

// BPE trained by recounting every adjacent pair from scratch after each
// merge; greedy left-to-right replacement; ties to the smallest pair.
abpe::bpe::BpeVocab bpe_train_recount(std::span<const abpe::corpus::TokenSequence> corpus,
                                      std::uint32_t target_vocab_size,
                                      std::uint32_t min_pair_freq);

// Rule-by-rule encoder written directly from the merge-list semantics.
std::vector<std::uint32_t> bpe_encode_rules(std::span<const std::uint32_t> tokens,
                                            const abpe::bpe::BpeVocab& vocab);

// Decode by repeated single-step substitution: replace any non-base id with
// its pair until only base tokens remain.
std::vector<std::uint32_t> bpe_expand_stepwise(std::span<const std::uint32_t> ids,
                                               const abpe::bpe::BpeVocab& vocab);

// Minimal word edit distance via plain recursion with memoization.
std::uint32_t wer_min_cost(std::span<const std::string> ref, std::span<const std::string> hyp);

// DTW by exhaustive enumeration of all monotone paths: minimal accumulated
// cost and the node count of that path; value = cost / nodes.
double dtw_exhaustive(const abpe::corpus::FeatureMatrix& ref,
                      const abpe::corpus::FeatureMatrix& hyp);

}  // namespace oracles
