#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "abpe/bpe.hpp"
#include "abpe/corpus.hpp"

namespace abpe::lm {

struct LmConfig {
    std::uint32_t text_vocab = 0;    // P
    std::uint32_t speech_vocab = 0;  // V
    std::uint32_t dim = 64;
    std::uint32_t layers = 2;
    std::uint32_t heads = 4;
    std::uint32_t ff_mult = 4;
    std::uint32_t max_len = 512;
    float dropout = 0.0f;
    std::uint64_t seed = 0;

    std::uint32_t v_total() const { return speech_vocab + 1; }  // speech ids + EOS
    std::uint32_t eos_id() const { return speech_vocab; }
    void validate() const;
};

struct TensorInfo {
    std::string name;
    std::size_t offset = 0;
    std::vector<std::uint32_t> shape;
    std::size_t size() const;
};

/// All model weights in one flat buffer with a named-tensor index. T is float
/// for training / inference and double for gradient verification.
template <typename T>
struct ParamsT {
    LmConfig cfg;
    std::vector<TensorInfo> tensors;
    std::vector<T> data;

    static ParamsT zeros_like(const LmConfig& cfg);
    /// Seeded init: normal(0, 0.02) weights, zero biases, unit LN gains.
    static ParamsT init(const LmConfig& cfg);

    std::span<T> tensor(std::string_view name);
    std::span<const T> tensor(std::string_view name) const;

    template <typename U>
    ParamsT<U> cast() const {
        ParamsT<U> out;
        out.cfg = cfg;
        out.tensors = tensors;
        out.data.assign(data.begin(), data.end());
        return out;
    }
};

using LmParams = ParamsT<float>;

/// Sinusoidal table, row-major length x dim; entry (pos, 2i) = sin(pos /
/// 10000^(2i/dim)), (pos, 2i+1) = cos of the same argument.
std::vector<double> positional_encoding(std::uint32_t length, std::uint32_t dim);

struct ForwardResult {
    double loss = 0.0;
    std::vector<double> logits;  // (|s|+1) x v_total, row-major
    std::size_t rows = 0;
    std::size_t cols = 0;
};

/// Teacher-forced pass over the layout [BOS_TEXT, x..., BOS_SPEECH, s...].
/// Loss is the mean next-id cross-entropy at speech positions (targets
/// s1..sT then EOS). When grads is non-null, parameter gradients of the loss
/// are accumulated into it (same tensor layout as params).
template <typename T>
ForwardResult lm_forward(const ParamsT<T>& params, std::span<const std::uint32_t> x,
                         std::span<const std::uint32_t> s, ParamsT<T>* grads = nullptr);

struct OptConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    std::uint32_t epochs = 1;
    std::uint32_t batch_tokens = 4096;  // layout-token budget per mini-batch
    std::uint32_t grad_accum = 1;
};

struct TrainReport {
    std::vector<double> loss_curve;  // per-epoch mean example loss
    std::uint64_t optimizer_steps = 0;
};

/// Adam with decoupled weight decay over paired (text, speech) examples.
/// Deterministic given the seed regardless of thread count. Throws on
/// non-finite loss.
TrainReport lm_train(LmParams& params, std::span<const corpus::SymbolSequence> text,
                     std::span<const bpe::BpeSequence> speech, const OptConfig& opt,
                     std::uint64_t seed);

struct SamplingConfig {
    double temperature = 1.0;
    std::uint32_t top_k = 0;  // 0 disables the filter
    double top_p = 1.0;
    std::uint32_t max_new = 1;
    std::uint64_t seed = 0;
    bool greedy = false;  // argmax decoding (the temperature -> 0 limit)
};

enum class StopReason { Eos, MaxNew };

struct GenerationResult {
    bpe::BpeSequence ids;      // EOS not included
    double wall_time_s = 0.0;  // autoregressive loop only
    std::uint32_t steps = 0;   // sampling iterations (the EOS draw counts)
    StopReason stopped_by = StopReason::MaxNew;
};

/// Prompted generation over [BOS_TEXT, x_prompt..., x..., BOS_SPEECH,
/// s_prompt...] with cached incremental decoding.
GenerationResult lm_generate(const LmParams& params, const corpus::SymbolSequence& x_prompt,
                             const corpus::SymbolSequence& x, const bpe::BpeSequence& s_prompt,
                             const SamplingConfig& sampling);

/// Next-id logits for the generation layout via full recomputation; reference
/// for the cached decoder (they must agree within 1e-5).
std::vector<double> next_logits_uncached(const LmParams& params,
                                         std::span<const std::uint32_t> x_all,
                                         std::span<const std::uint32_t> s_all);

/// Same logits through the incremental KV-cached decoder generation uses.
std::vector<double> next_logits_cached(const LmParams& params,
                                       std::span<const std::uint32_t> x_all,
                                       std::span<const std::uint32_t> s_all);

/// RTF = wall time / synthesized duration, where duration = decoded base
/// token count * frame_shift_ms / 1000.
double measure_rtf(const GenerationResult& res, const bpe::BpeVocab& vocab,
                   double frame_shift_ms);

// Checkpoint binary: magic "ABPELM01", field-tagged config, then named
// tensors as (u16 name length, name, u32 rank, u32 dims..., f32 LE payload).
void save_checkpoint(const LmParams& params, const std::string& path);
LmParams load_checkpoint(const std::string& path);

void write_loss_curve_csv(std::span<const double> curve, const std::string& path);

extern template struct ParamsT<float>;
extern template struct ParamsT<double>;
extern template ForwardResult lm_forward<float>(const ParamsT<float>&,
                                                std::span<const std::uint32_t>,
                                                std::span<const std::uint32_t>, ParamsT<float>*);
extern template ForwardResult lm_forward<double>(const ParamsT<double>&,
                                                 std::span<const std::uint32_t>,
                                                 std::span<const std::uint32_t>, ParamsT<double>*);

}  // namespace abpe::lm
