#include "abpe/lm.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>

namespace abpe::lm {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError("lm: " + msg);
}

constexpr double kInitStd = 0.02;
constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

// Input item kinds for the concatenated layout.
enum Table : std::uint8_t { TextTab = 0, SpeechTab = 1, SpecialTab = 2 };
enum Special : std::uint32_t { BosText = 0, BosSpeech = 1, EosEmb = 2 };

struct LayoutItem {
    std::uint8_t table;
    std::uint32_t row;
    std::uint32_t pos;  // segment-reset position
};

// [BOS_TEXT, text..., BOS_SPEECH, speech...]; the position counter restarts
// at the start of each segment.
std::vector<LayoutItem> build_layout(std::span<const std::uint32_t> text,
                                     std::span<const std::uint32_t> speech) {
    std::vector<LayoutItem> items;
    items.reserve(text.size() + speech.size() + 2);
    items.push_back({SpecialTab, BosText, 0});
    for (std::size_t i = 0; i < text.size(); ++i)
        items.push_back({TextTab, text[i], static_cast<std::uint32_t>(i + 1)});
    items.push_back({SpecialTab, BosSpeech, 0});
    for (std::size_t i = 0; i < speech.size(); ++i)
        items.push_back({SpeechTab, speech[i], static_cast<std::uint32_t>(i + 1)});
    return items;
}

template <typename T>
T gelu(T u) {
    return T(0.5) * u * (T(1) + T(std::erf(static_cast<double>(u) / 1.4142135623730951)));
}

template <typename T>
T gelu_grad(T u) {
    const double x = static_cast<double>(u);
    return T(0.5 * (1.0 + std::erf(x / 1.4142135623730951)) +
             x * std::exp(-0.5 * x * x) * kInvSqrt2Pi);
}

// y[t,:] = W a[t,:] + b with W row-major [out, in]. Each output element is
// one serial dot product, so the parallel and serial paths agree bit-wise.
template <typename T>
void linear_fwd(const T* a, std::size_t rows, std::size_t in, const T* W, const T* b,
                std::size_t out, T* y) {
    const auto n = static_cast<std::int64_t>(rows * out);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n >= 4096)
    for (std::int64_t idx = 0; idx < n; ++idx) {
        const std::size_t t = static_cast<std::size_t>(idx) / out;
        const std::size_t o = static_cast<std::size_t>(idx) % out;
        const T* arow = a + t * in;
        const T* wrow = W + o * in;
        T acc = b ? b[o] : T(0);
        for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * arow[i];
        y[t * out + o] = acc;
    }
}

// Gradients of linear_fwd. dW/db accumulate serially over rows (fixed
// order); da is per-element.
template <typename T>
void linear_bwd(const T* a, const T* W, const T* dy, std::size_t rows, std::size_t in,
                std::size_t out, T* da, T* dW, T* db) {
    if (da) {
        const auto n = static_cast<std::int64_t>(rows * in);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n >= 4096)
        for (std::int64_t idx = 0; idx < n; ++idx) {
            const std::size_t t = static_cast<std::size_t>(idx) / in;
            const std::size_t i = static_cast<std::size_t>(idx) % in;
            T acc = T(0);
            const T* dyrow = dy + t * out;
            for (std::size_t o = 0; o < out; ++o) acc += dyrow[o] * W[o * in + i];
            da[t * in + i] += acc;
        }
    }
    const auto no = static_cast<std::int64_t>(out);
#pragma omp parallel for schedule(static) if (parallel_enabled() && no * (std::int64_t)in >= 4096)
    for (std::int64_t o = 0; o < no; ++o) {
        T* dWrow = dW + static_cast<std::size_t>(o) * in;
        T dbacc = T(0);
        for (std::size_t t = 0; t < rows; ++t) {
            const T g = dy[t * out + static_cast<std::size_t>(o)];
            dbacc += g;
            const T* arow = a + t * in;
            for (std::size_t i = 0; i < in; ++i) dWrow[i] += g * arow[i];
        }
        if (db) db[static_cast<std::size_t>(o)] += dbacc;
    }
}

template <typename T>
struct LayerCache {
    std::vector<T> ln1_in, ln1_out, q, k, v, probs, ctx, ln2_in, ln2_out, ff_pre, ff_act;
    std::vector<T> ln1_mean, ln1_rstd, ln2_mean, ln2_rstd;
    std::vector<T> drop_attn, drop_ff;  // inverted-dropout masks, empty when unused
};

template <typename T>
struct Caches {
    std::vector<LayerCache<T>> layer;
    std::vector<T> fin_in, fin_out;
    std::vector<T> fin_mean, fin_rstd;
};

template <typename T>
void layer_norm_fwd(const T* x, std::size_t rows, std::size_t dim, const T* gain, const T* bias,
                    T* y, T* mean, T* rstd) {
    const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n >= 64)
    for (std::int64_t t = 0; t < n; ++t) {
        const T* xr = x + static_cast<std::size_t>(t) * dim;
        T m = T(0);
        for (std::size_t i = 0; i < dim; ++i) m += xr[i];
        m /= T(dim);
        T var = T(0);
        for (std::size_t i = 0; i < dim; ++i) {
            const T d = xr[i] - m;
            var += d * d;
        }
        var /= T(dim);
        const T r = T(1) / std::sqrt(var + T(kLnEps));
        mean[t] = m;
        rstd[t] = r;
        T* yr = y + static_cast<std::size_t>(t) * dim;
        for (std::size_t i = 0; i < dim; ++i) yr[i] = gain[i] * ((xr[i] - m) * r) + bias[i];
    }
}

template <typename T>
void layer_norm_bwd(const T* x, const T* mean, const T* rstd, const T* gain, const T* dy,
                    std::size_t rows, std::size_t dim, T* dx, T* dgain, T* dbias) {
    const auto n = static_cast<std::int64_t>(rows);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n >= 64)
    for (std::int64_t t = 0; t < n; ++t) {
        const std::size_t off = static_cast<std::size_t>(t) * dim;
        const T* xr = x + off;
        const T* dyr = dy + off;
        const T m = mean[t];
        const T r = rstd[t];
        T s1 = T(0), s2 = T(0);
        for (std::size_t i = 0; i < dim; ++i) {
            const T xh = (xr[i] - m) * r;
            const T dg = dyr[i] * gain[i];
            s1 += dg;
            s2 += dg * xh;
        }
        s1 /= T(dim);
        s2 /= T(dim);
        T* dxr = dx + off;
        for (std::size_t i = 0; i < dim; ++i) {
            const T xh = (xr[i] - m) * r;
            dxr[i] += r * (dyr[i] * gain[i] - s1 - xh * s2);
        }
    }
    // Parameter grads: fixed-order sum over rows per coordinate.
    const auto dn = static_cast<std::int64_t>(dim);
#pragma omp parallel for schedule(static) if (parallel_enabled() && dn >= 64)
    for (std::int64_t i = 0; i < dn; ++i) {
        T dg = T(0), db = T(0);
        for (std::size_t t = 0; t < rows; ++t) {
            const T xh = (x[t * dim + i] - mean[t]) * rstd[t];
            dg += dy[t * dim + i] * xh;
            db += dy[t * dim + i];
        }
        dgain[i] += dg;
        dbias[i] += db;
    }
}

// Causal multi-head attention over precomputed q/k/v. probs is [heads, L, L]
// row-major with entries only at j <= t.
template <typename T>
void attention_fwd(const T* q, const T* k, const T* v, std::size_t L, std::size_t dim,
                   std::size_t heads, T* probs, T* ctx) {
    const std::size_t hd = dim / heads;
    const T inv_sqrt = T(1.0 / std::sqrt(static_cast<double>(hd)));
    const auto n = static_cast<std::int64_t>(heads * L);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n >= 16)
    for (std::int64_t hi = 0; hi < n; ++hi) {
        const std::size_t h = static_cast<std::size_t>(hi) / L;
        const std::size_t t = static_cast<std::size_t>(hi) % L;
        const std::size_t ho = h * hd;
        T* prow = probs + (h * L + t) * L;
        // Scores over the causal prefix only; masked entries stay zero.
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j <= t; ++j) {
            T acc = T(0);
            for (std::size_t d = 0; d < hd; ++d)
                acc += q[t * dim + ho + d] * k[j * dim + ho + d];
            acc *= inv_sqrt;
            prow[j] = acc;
            if (acc > mx) mx = acc;
        }
        T denom = T(0);
        for (std::size_t j = 0; j <= t; ++j) {
            prow[j] = std::exp(prow[j] - mx);
            denom += prow[j];
        }
        const T inv = T(1) / denom;
        for (std::size_t j = 0; j <= t; ++j) prow[j] *= inv;
        for (std::size_t d = 0; d < hd; ++d) {
            T acc = T(0);
            for (std::size_t j = 0; j <= t; ++j) acc += prow[j] * v[j * dim + ho + d];
            ctx[t * dim + ho + d] = acc;
        }
    }
}

template <typename T>
void attention_bwd(const T* q, const T* k, const T* v, const T* probs, const T* dctx,
                   std::size_t L, std::size_t dim, std::size_t heads, T* dq, T* dk, T* dv,
                   std::vector<T>& dprob_buf) {
    const std::size_t hd = dim / heads;
    const T inv_sqrt = T(1.0 / std::sqrt(static_cast<double>(hd)));
    dprob_buf.assign(heads * L * L, T(0));
    T* dscore = dprob_buf.data();  // reused: first dp, then ds in place

    const auto n = static_cast<std::int64_t>(heads * L);
#pragma omp parallel for schedule(static) if (parallel_enabled() && n >= 16)
    for (std::int64_t hi = 0; hi < n; ++hi) {
        const std::size_t h = static_cast<std::size_t>(hi) / L;
        const std::size_t t = static_cast<std::size_t>(hi) % L;
        const std::size_t ho = h * hd;
        const T* prow = probs + (h * L + t) * L;
        T* drow = dscore + (h * L + t) * L;
        for (std::size_t j = 0; j <= t; ++j) {
            T acc = T(0);
            for (std::size_t d = 0; d < hd; ++d)
                acc += dctx[t * dim + ho + d] * v[j * dim + ho + d];
            drow[j] = acc;
        }
        T dot = T(0);
        for (std::size_t j = 0; j <= t; ++j) dot += drow[j] * prow[j];
        for (std::size_t j = 0; j <= t; ++j) drow[j] = prow[j] * (drow[j] - dot);
        for (std::size_t d = 0; d < hd; ++d) {
            T acc = T(0);
            for (std::size_t j = 0; j <= t; ++j) acc += drow[j] * k[j * dim + ho + d];
            dq[t * dim + ho + d] += acc * inv_sqrt;
        }
    }
    // dk / dv gather over t >= j with a fixed serial order in t.
    const auto nj = static_cast<std::int64_t>(heads * L);
#pragma omp parallel for schedule(static) if (parallel_enabled() && nj >= 16)
    for (std::int64_t hj = 0; hj < nj; ++hj) {
        const std::size_t h = static_cast<std::size_t>(hj) / L;
        const std::size_t j = static_cast<std::size_t>(hj) % L;
        const std::size_t ho = h * hd;
        for (std::size_t d = 0; d < hd; ++d) {
            T acck = T(0), accv = T(0);
            for (std::size_t t = j; t < L; ++t) {
                acck += dscore[(h * L + t) * L + j] * q[t * dim + ho + d];
                accv += probs[(h * L + t) * L + j] * dctx[t * dim + ho + d];
            }
            dk[j * dim + ho + d] += acck * inv_sqrt;
            dv[j * dim + ho + d] += accv;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config / params
// ---------------------------------------------------------------------------

void LmConfig::validate() const {
    require(text_vocab >= 1, "text_vocab must be >= 1");
    require(speech_vocab >= 1, "speech_vocab must be >= 1");
    require(dim >= 2 && heads >= 1 && dim % heads == 0, "dim must be a positive multiple of heads");
    require(dim % 2 == 0, "dim must be even for the sinusoidal positional encoding");
    require(layers >= 1, "layers must be >= 1");
    require(ff_mult >= 1, "ff_mult must be >= 1");
    require(max_len >= 4, "max_len must be >= 4");
    require(dropout >= 0.0f && dropout < 1.0f, "dropout must be in [0,1)");
}

std::size_t TensorInfo::size() const {
    std::size_t s = 1;
    for (std::uint32_t d : shape) s *= d;
    return s;
}

namespace {

std::vector<TensorInfo> tensor_layout(const LmConfig& cfg) {
    std::vector<TensorInfo> out;
    std::size_t off = 0;
    auto add = [&](std::string name, std::vector<std::uint32_t> shape) {
        TensorInfo ti{std::move(name), off, std::move(shape)};
        off += ti.size();
        out.push_back(std::move(ti));
    };
    const std::uint32_t d = cfg.dim;
    const std::uint32_t ff = cfg.ff_mult * d;
    add("text_emb", {cfg.text_vocab, d});
    add("speech_emb", {cfg.speech_vocab, d});
    add("special_emb", {3, d});
    for (std::uint32_t l = 0; l < cfg.layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "ln1.gain", {d});
        add(p + "ln1.bias", {d});
        add(p + "attn.wq", {d, d});
        add(p + "attn.bq", {d});
        add(p + "attn.wk", {d, d});
        add(p + "attn.bk", {d});
        add(p + "attn.wv", {d, d});
        add(p + "attn.bv", {d});
        add(p + "attn.wo", {d, d});
        add(p + "attn.bo", {d});
        add(p + "ln2.gain", {d});
        add(p + "ln2.bias", {d});
        add(p + "ff.w1", {ff, d});
        add(p + "ff.b1", {ff});
        add(p + "ff.w2", {d, ff});
        add(p + "ff.b2", {d});
    }
    add("final_ln.gain", {d});
    add("final_ln.bias", {d});
    add("out_proj.w", {cfg.v_total(), d});
    add("out_proj.b", {cfg.v_total()});
    return out;
}

std::size_t total_size(const std::vector<TensorInfo>& ts) {
    return ts.empty() ? 0 : ts.back().offset + ts.back().size();
}

}  // namespace

template <typename T>
ParamsT<T> ParamsT<T>::zeros_like(const LmConfig& cfg) {
    cfg.validate();
    ParamsT<T> p;
    p.cfg = cfg;
    p.tensors = tensor_layout(cfg);
    p.data.assign(total_size(p.tensors), T(0));
    return p;
}

template <typename T>
ParamsT<T> ParamsT<T>::init(const LmConfig& cfg) {
    ParamsT<T> p = zeros_like(cfg);
    Rng rng(cfg.seed);
    for (const TensorInfo& ti : p.tensors) {
        const bool is_gain = ti.name.ends_with("ln1.gain") || ti.name.ends_with("ln2.gain") ||
                             ti.name.ends_with("final_ln.gain");
        const bool is_bias = ti.name.ends_with(".bias") || ti.name.find(".b") != std::string::npos;
        T* dst = p.data.data() + ti.offset;
        if (is_gain) {
            std::fill(dst, dst + ti.size(), T(1));
        } else if (is_bias) {
            // biases start at zero
        } else {
            for (std::size_t i = 0; i < ti.size(); ++i)
                dst[i] = T(rng.normal() * kInitStd);
        }
    }
    return p;
}

template <typename T>
std::span<T> ParamsT<T>::tensor(std::string_view name) {
    for (const TensorInfo& ti : tensors)
        if (ti.name == name) return {data.data() + ti.offset, ti.size()};
    throw DomainError("lm: unknown tensor '" + std::string(name) + "'");
}

template <typename T>
std::span<const T> ParamsT<T>::tensor(std::string_view name) const {
    for (const TensorInfo& ti : tensors)
        if (ti.name == name) return {data.data() + ti.offset, ti.size()};
    throw DomainError("lm: unknown tensor '" + std::string(name) + "'");
}

template struct ParamsT<float>;
template struct ParamsT<double>;

std::vector<double> positional_encoding(std::uint32_t length, std::uint32_t dim) {
    require(dim >= 2 && dim % 2 == 0, "positional encoding needs an even dim");
    std::vector<double> pe(static_cast<std::size_t>(length) * dim);
    for (std::uint32_t pos = 0; pos < length; ++pos) {
        for (std::uint32_t i = 0; i * 2 < dim; ++i) {
            const double angle =
                pos / std::pow(10000.0, (2.0 * i) / static_cast<double>(dim));
            pe[static_cast<std::size_t>(pos) * dim + 2 * i] = std::sin(angle);
            pe[static_cast<std::size_t>(pos) * dim + 2 * i + 1] = std::cos(angle);
        }
    }
    return pe;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

namespace {

template <typename T>
const T* emb_row(const ParamsT<T>& p, std::uint8_t table, std::uint32_t row) {
    switch (table) {
        case TextTab: return p.tensor("text_emb").data() + static_cast<std::size_t>(row) * p.cfg.dim;
        case SpeechTab:
            return p.tensor("speech_emb").data() + static_cast<std::size_t>(row) * p.cfg.dim;
        default:
            return p.tensor("special_emb").data() + static_cast<std::size_t>(row) * p.cfg.dim;
    }
}

template <typename T>
T* grad_emb_row(ParamsT<T>& g, std::uint8_t table, std::uint32_t row) {
    switch (table) {
        case TextTab: return g.tensor("text_emb").data() + static_cast<std::size_t>(row) * g.cfg.dim;
        case SpeechTab:
            return g.tensor("speech_emb").data() + static_cast<std::size_t>(row) * g.cfg.dim;
        default:
            return g.tensor("special_emb").data() + static_cast<std::size_t>(row) * g.cfg.dim;
    }
}

// Runs the transformer stack over the embedded layout; h is modified in
// place to the pre-final-LN residual stream.
template <typename T>
void run_stack(const ParamsT<T>& p, std::vector<T>& h, std::size_t L, Caches<T>* cache,
               Rng* dropout_rng) {
    const std::size_t dim = p.cfg.dim;
    const std::size_t ff = static_cast<std::size_t>(p.cfg.ff_mult) * dim;
    const float drop = p.cfg.dropout;
    const bool use_dropout = dropout_rng != nullptr && drop > 0.0f;

    std::vector<T> a(L * dim), q(L * dim), k(L * dim), v(L * dim), ctx(L * dim), tmp(L * dim);
    std::vector<T> fpre(L * ff), fact(L * ff);

    for (std::uint32_t l = 0; l < p.cfg.layers; ++l) {
        const std::string pre = "layer" + std::to_string(l) + ".";
        LayerCache<T>* lc = cache ? &cache->layer[l] : nullptr;
        if (lc) lc->ln1_in = h;

        std::vector<T> mean(L), rstd(L);
        layer_norm_fwd(h.data(), L, dim, p.tensor(pre + "ln1.gain").data(),
                       p.tensor(pre + "ln1.bias").data(), a.data(), mean.data(), rstd.data());
        if (lc) {
            lc->ln1_out = a;
            lc->ln1_mean = mean;
            lc->ln1_rstd = rstd;
        }

        linear_fwd(a.data(), L, dim, p.tensor(pre + "attn.wq").data(),
                   p.tensor(pre + "attn.bq").data(), dim, q.data());
        linear_fwd(a.data(), L, dim, p.tensor(pre + "attn.wk").data(),
                   p.tensor(pre + "attn.bk").data(), dim, k.data());
        linear_fwd(a.data(), L, dim, p.tensor(pre + "attn.wv").data(),
                   p.tensor(pre + "attn.bv").data(), dim, v.data());

        std::vector<T> probs(static_cast<std::size_t>(p.cfg.heads) * L * L, T(0));
        attention_fwd(q.data(), k.data(), v.data(), L, dim, p.cfg.heads, probs.data(), ctx.data());
        if (lc) {
            lc->q = q;
            lc->k = k;
            lc->v = v;
            lc->probs = std::move(probs);
            lc->ctx = ctx;
        }

        linear_fwd(ctx.data(), L, dim, p.tensor(pre + "attn.wo").data(),
                   p.tensor(pre + "attn.bo").data(), dim, tmp.data());
        if (use_dropout) {
            std::vector<T> mask(L * dim);
            const T scale = T(1) / T(1.0f - drop);
            for (auto& mv : mask) mv = dropout_rng->uniform01() < drop ? T(0) : scale;
            for (std::size_t i = 0; i < L * dim; ++i) tmp[i] *= mask[i];
            if (lc) lc->drop_attn = std::move(mask);
        }
        for (std::size_t i = 0; i < L * dim; ++i) h[i] += tmp[i];

        if (lc) lc->ln2_in = h;
        layer_norm_fwd(h.data(), L, dim, p.tensor(pre + "ln2.gain").data(),
                       p.tensor(pre + "ln2.bias").data(), a.data(), mean.data(), rstd.data());
        if (lc) {
            lc->ln2_out = a;
            lc->ln2_mean = mean;
            lc->ln2_rstd = rstd;
        }

        linear_fwd(a.data(), L, dim, p.tensor(pre + "ff.w1").data(),
                   p.tensor(pre + "ff.b1").data(), ff, fpre.data());
        for (std::size_t i = 0; i < L * ff; ++i) fact[i] = gelu(fpre[i]);
        if (lc) {
            lc->ff_pre = fpre;
            lc->ff_act = fact;
        }
        linear_fwd(fact.data(), L, ff, p.tensor(pre + "ff.w2").data(),
                   p.tensor(pre + "ff.b2").data(), dim, tmp.data());
        if (use_dropout) {
            std::vector<T> mask(L * dim);
            const T scale = T(1) / T(1.0f - drop);
            for (auto& mv : mask) mv = dropout_rng->uniform01() < drop ? T(0) : scale;
            for (std::size_t i = 0; i < L * dim; ++i) tmp[i] *= mask[i];
            if (lc) lc->drop_ff = std::move(mask);
        }
        for (std::size_t i = 0; i < L * dim; ++i) h[i] += tmp[i];
    }
}

}  // namespace

template <typename T>
ForwardResult lm_forward_impl(const ParamsT<T>& p, std::span<const std::uint32_t> x,
                              std::span<const std::uint32_t> s, ParamsT<T>* grads,
                              Rng* dropout_rng) {
    const LmConfig& cfg = p.cfg;
    cfg.validate();
    require(!s.empty(), "speech sequence is empty");
    for (std::uint32_t xi : x)
        require(xi < cfg.text_vocab, "text id " + std::to_string(xi) + " out of range");
    for (std::uint32_t si : s)
        require(si < cfg.speech_vocab, "speech id " + std::to_string(si) + " out of range");

    const std::vector<LayoutItem> items = build_layout(x, s);
    const std::size_t L = items.size();
    require(L <= cfg.max_len, "layout length " + std::to_string(L) + " exceeds max_len " +
                                  std::to_string(cfg.max_len));
    const std::size_t dim = cfg.dim;
    const std::size_t vt = cfg.v_total();

    std::uint32_t max_pos = 0;
    for (const auto& it : items) max_pos = std::max(max_pos, it.pos);
    const std::vector<double> pe = positional_encoding(max_pos + 1, cfg.dim);

    std::vector<T> h(L * dim);
    for (std::size_t t = 0; t < L; ++t) {
        const T* e = emb_row(p, items[t].table, items[t].row);
        const double* per = pe.data() + static_cast<std::size_t>(items[t].pos) * dim;
        for (std::size_t i = 0; i < dim; ++i) h[t * dim + i] = e[i] + T(per[i]);
    }

    Caches<T> caches;
    Caches<T>* cptr = grads ? &caches : nullptr;
    if (cptr) cptr->layer.resize(cfg.layers);
    run_stack(p, h, L, cptr, dropout_rng);

    // Final LN + logits at the |s|+1 speech prediction rows.
    std::vector<T> g(L * dim), fin_mean(L), fin_rstd(L);
    layer_norm_fwd(h.data(), L, dim, p.tensor("final_ln.gain").data(),
                   p.tensor("final_ln.bias").data(), g.data(), fin_mean.data(), fin_rstd.data());
    if (cptr) {
        cptr->fin_in = h;
        cptr->fin_out = g;
        cptr->fin_mean = fin_mean;
        cptr->fin_rstd = fin_rstd;
    }

    const std::size_t n_rows = s.size() + 1;
    const std::size_t speech_row0 = 1 + x.size();  // index of BOS_SPEECH in the layout
    std::vector<std::uint32_t> targets(n_rows);
    for (std::size_t i = 0; i < s.size(); ++i) targets[i] = s[i];
    targets[s.size()] = cfg.eos_id();

    ForwardResult res;
    res.rows = n_rows;
    res.cols = vt;
    res.logits.resize(n_rows * vt);
    std::vector<T> logit_rows(n_rows * vt);
    {
        // Gather prediction-row activations, then one dense projection.
        std::vector<T> gsel(n_rows * dim);
        for (std::size_t r = 0; r < n_rows; ++r)
            std::memcpy(gsel.data() + r * dim, g.data() + (speech_row0 + r) * dim,
                        dim * sizeof(T));
        linear_fwd(gsel.data(), n_rows, dim, p.tensor("out_proj.w").data(),
                   p.tensor("out_proj.b").data(), vt, logit_rows.data());
    }
    for (std::size_t i = 0; i < n_rows * vt; ++i) res.logits[i] = logit_rows[i];

    double loss_acc = 0.0;
    std::vector<T> dlogits;
    if (grads) dlogits.assign(n_rows * vt, T(0));
    for (std::size_t r = 0; r < n_rows; ++r) {
        const double* lr = res.logits.data() + r * vt;
        double mx = lr[0];
        for (std::size_t o = 1; o < vt; ++o) mx = std::max(mx, lr[o]);
        double denom = 0.0;
        for (std::size_t o = 0; o < vt; ++o) denom += std::exp(lr[o] - mx);
        const double lse = mx + std::log(denom);
        loss_acc += lse - lr[targets[r]];
        if (grads) {
            const double invn = 1.0 / static_cast<double>(n_rows);
            for (std::size_t o = 0; o < vt; ++o)
                dlogits[r * vt + o] = T(std::exp(lr[o] - lse) * invn);
            dlogits[r * vt + targets[r]] -= T(invn);
        }
    }
    res.loss = loss_acc / static_cast<double>(n_rows);
    if (!std::isfinite(res.loss))
        throw DomainError("lm: non-finite loss (diverged or invalid inputs)");
    if (!grads) return res;

    // ---- backward ----
    ParamsT<T>& gr = *grads;
    std::vector<T> dg(L * dim, T(0));
    {
        std::vector<T> gsel(n_rows * dim), dgsel(n_rows * dim, T(0));
        for (std::size_t r = 0; r < n_rows; ++r)
            std::memcpy(gsel.data() + r * dim, g.data() + (speech_row0 + r) * dim,
                        dim * sizeof(T));
        linear_bwd(gsel.data(), p.tensor("out_proj.w").data(), dlogits.data(), n_rows, dim, vt,
                   dgsel.data(), gr.tensor("out_proj.w").data(), gr.tensor("out_proj.b").data());
        for (std::size_t r = 0; r < n_rows; ++r)
            for (std::size_t i = 0; i < dim; ++i)
                dg[(speech_row0 + r) * dim + i] += dgsel[r * dim + i];
    }

    std::vector<T> dh(L * dim, T(0));
    layer_norm_bwd(caches.fin_in.data(), caches.fin_mean.data(), caches.fin_rstd.data(),
                   p.tensor("final_ln.gain").data(), dg.data(), L, dim, dh.data(),
                   gr.tensor("final_ln.gain").data(), gr.tensor("final_ln.bias").data());

    const std::size_t ff = static_cast<std::size_t>(cfg.ff_mult) * dim;
    std::vector<T> dtmp(L * dim), dfact(L * ff), dfpre(L * ff), dln_out(L * dim);
    std::vector<T> dq(L * dim), dk(L * dim), dv(L * dim), dctx(L * dim), dprob_buf;

    for (std::uint32_t li = cfg.layers; li-- > 0;) {
        const std::string pre = "layer" + std::to_string(li) + ".";
        LayerCache<T>& lc = caches.layer[li];

        // FF block. dh covers both the residual bypass and the branch.
        std::copy(dh.begin(), dh.end(), dtmp.begin());
        if (!lc.drop_ff.empty())
            for (std::size_t i = 0; i < L * dim; ++i) dtmp[i] *= lc.drop_ff[i];
        std::fill(dfact.begin(), dfact.end(), T(0));
        linear_bwd(lc.ff_act.data(), p.tensor(pre + "ff.w2").data(), dtmp.data(), L, ff, dim,
                   dfact.data(), gr.tensor(pre + "ff.w2").data(), gr.tensor(pre + "ff.b2").data());
        for (std::size_t i = 0; i < L * ff; ++i) dfpre[i] = dfact[i] * gelu_grad(lc.ff_pre[i]);
        std::fill(dln_out.begin(), dln_out.end(), T(0));
        linear_bwd(lc.ln2_out.data(), p.tensor(pre + "ff.w1").data(), dfpre.data(), L, dim, ff,
                   dln_out.data(), gr.tensor(pre + "ff.w1").data(),
                   gr.tensor(pre + "ff.b1").data());
        layer_norm_bwd(lc.ln2_in.data(), lc.ln2_mean.data(), lc.ln2_rstd.data(),
                       p.tensor(pre + "ln2.gain").data(), dln_out.data(), L, dim, dh.data(),
                       gr.tensor(pre + "ln2.gain").data(), gr.tensor(pre + "ln2.bias").data());

        // Attention block.
        std::copy(dh.begin(), dh.end(), dtmp.begin());
        if (!lc.drop_attn.empty())
            for (std::size_t i = 0; i < L * dim; ++i) dtmp[i] *= lc.drop_attn[i];
        std::fill(dctx.begin(), dctx.end(), T(0));
        linear_bwd(lc.ctx.data(), p.tensor(pre + "attn.wo").data(), dtmp.data(), L, dim, dim,
                   dctx.data(), gr.tensor(pre + "attn.wo").data(),
                   gr.tensor(pre + "attn.bo").data());
        std::fill(dq.begin(), dq.end(), T(0));
        std::fill(dk.begin(), dk.end(), T(0));
        std::fill(dv.begin(), dv.end(), T(0));
        attention_bwd(lc.q.data(), lc.k.data(), lc.v.data(), lc.probs.data(), dctx.data(), L, dim,
                      cfg.heads, dq.data(), dk.data(), dv.data(), dprob_buf);
        std::fill(dln_out.begin(), dln_out.end(), T(0));
        linear_bwd(lc.ln1_out.data(), p.tensor(pre + "attn.wq").data(), dq.data(), L, dim, dim,
                   dln_out.data(), gr.tensor(pre + "attn.wq").data(),
                   gr.tensor(pre + "attn.bq").data());
        linear_bwd(lc.ln1_out.data(), p.tensor(pre + "attn.wk").data(), dk.data(), L, dim, dim,
                   dln_out.data(), gr.tensor(pre + "attn.wk").data(),
                   gr.tensor(pre + "attn.bk").data());
        linear_bwd(lc.ln1_out.data(), p.tensor(pre + "attn.wv").data(), dv.data(), L, dim, dim,
                   dln_out.data(), gr.tensor(pre + "attn.wv").data(),
                   gr.tensor(pre + "attn.bv").data());
        layer_norm_bwd(lc.ln1_in.data(), lc.ln1_mean.data(), lc.ln1_rstd.data(),
                       p.tensor(pre + "ln1.gain").data(), dln_out.data(), L, dim, dh.data(),
                       gr.tensor(pre + "ln1.gain").data(), gr.tensor(pre + "ln1.bias").data());
    }

    for (std::size_t t = 0; t < L; ++t) {
        T* erow = grad_emb_row(gr, items[t].table, items[t].row);
        for (std::size_t i = 0; i < dim; ++i) erow[i] += dh[t * dim + i];
    }
    return res;
}

template <typename T>
ForwardResult lm_forward(const ParamsT<T>& params, std::span<const std::uint32_t> x,
                         std::span<const std::uint32_t> s, ParamsT<T>* grads) {
    return lm_forward_impl(params, x, s, grads, nullptr);
}

template ForwardResult lm_forward<float>(const ParamsT<float>&, std::span<const std::uint32_t>,
                                         std::span<const std::uint32_t>, ParamsT<float>*);
template ForwardResult lm_forward<double>(const ParamsT<double>&, std::span<const std::uint32_t>,
                                          std::span<const std::uint32_t>, ParamsT<double>*);

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainReport lm_train(LmParams& params, std::span<const corpus::SymbolSequence> text,
                     std::span<const bpe::BpeSequence> speech, const OptConfig& opt,
                     std::uint64_t seed) {
    const LmConfig& cfg = params.cfg;
    cfg.validate();
    require(text.size() == speech.size(), "text / speech corpus size mismatch");
    require(!text.empty(), "training corpus is empty");
    require(opt.grad_accum >= 1, "grad_accum must be >= 1");
    require(opt.batch_tokens >= 1, "batch_tokens must be >= 1");
    for (std::size_t i = 0; i < text.size(); ++i) {
        require(2 + text[i].symbols.size() + speech[i].ids.size() <= cfg.max_len,
                "example " + std::to_string(i) + " does not fit max_len");
        require(!speech[i].ids.empty(), "empty speech sequence at example " + std::to_string(i));
    }

    TrainReport report;
    if (opt.epochs == 0) return report;

    LmParams grads = LmParams::zeros_like(cfg);
    std::vector<float> m(params.data.size(), 0.0f), v(params.data.size(), 0.0f);
    std::uint64_t adam_t = 0;
    Rng rng(splitmix64(seed));
    Rng dropout_rng(splitmix64(seed ^ 0x6Eb6E5C92D9F3A11ULL));
    Rng* drop = cfg.dropout > 0.0f ? &dropout_rng : nullptr;

    std::vector<std::size_t> order(text.size());
    std::iota(order.begin(), order.end(), std::size_t{0});

    auto adam_step = [&](std::size_t examples) {
        ++adam_t;
        const double scale = 1.0 / static_cast<double>(examples);
        const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(adam_t));
        const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(adam_t));
        for (std::size_t i = 0; i < params.data.size(); ++i) {
            const double g = grads.data[i] * scale;
            m[i] = static_cast<float>(opt.beta1 * m[i] + (1.0 - opt.beta1) * g);
            v[i] = static_cast<float>(opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g);
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            params.data[i] = static_cast<float>(
                params.data[i] -
                opt.lr * (mhat / (std::sqrt(vhat) + opt.eps) + opt.weight_decay * params.data[i]));
        }
        std::fill(grads.data.begin(), grads.data.end(), 0.0f);
    };

    for (std::uint32_t epoch = 0; epoch < opt.epochs; ++epoch) {
        // Deterministic per-epoch shuffle.
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_below(i)]);

        double epoch_loss = 0.0;
        std::size_t pending_batches = 0, pending_examples = 0;
        std::size_t b_start = 0;
        while (b_start < order.size()) {
            std::size_t b_end = b_start;
            std::size_t budget = 0;
            while (b_end < order.size()) {
                const std::size_t ex = order[b_end];
                const std::size_t len = 2 + text[ex].symbols.size() + speech[ex].ids.size();
                if (b_end > b_start && budget + len > opt.batch_tokens) break;
                budget += len;
                ++b_end;
            }
            for (std::size_t bi = b_start; bi < b_end; ++bi) {
                const std::size_t ex = order[bi];
                const ForwardResult r =
                    lm_forward_impl(params, text[ex].symbols, speech[ex].ids, &grads, drop);
                if (!std::isfinite(r.loss))
                    throw DomainError("lm: training diverged at epoch " + std::to_string(epoch));
                epoch_loss += r.loss;
            }
            pending_examples += b_end - b_start;
            ++pending_batches;
            if (pending_batches == opt.grad_accum) {
                adam_step(pending_examples);
                pending_batches = 0;
                pending_examples = 0;
            }
            b_start = b_end;
        }
        if (pending_examples > 0) {
            adam_step(pending_examples);
            pending_batches = 0;
            pending_examples = 0;
        }
        report.loss_curve.push_back(epoch_loss / static_cast<double>(order.size()));
    }
    report.optimizer_steps = adam_t;
    return report;
}

// ---------------------------------------------------------------------------
// Generation (cached incremental decoding)
// ---------------------------------------------------------------------------

namespace {

// Single-position decoder with per-layer KV caches. The arithmetic per
// output element matches the batched forward exactly.
class Decoder {
public:
    explicit Decoder(const LmParams& p) : p_(p), dim_(p.cfg.dim) {
        const std::size_t cap = static_cast<std::size_t>(p.cfg.max_len) * dim_;
        kc_.assign(p.cfg.layers, std::vector<float>(cap));
        vc_.assign(p.cfg.layers, std::vector<float>(cap));
        pe_ = positional_encoding(p.cfg.max_len, p.cfg.dim);
    }

    std::size_t len() const { return len_; }

    // Feeds one layout item; returns next-id logits.
    std::vector<double> step(std::uint8_t table, std::uint32_t row, std::uint32_t pos) {
        require(len_ < p_.cfg.max_len, "generation layout exceeded max_len");
        const std::size_t dim = dim_;
        const std::size_t heads = p_.cfg.heads;
        const std::size_t hd = dim / heads;
        const std::size_t ff = static_cast<std::size_t>(p_.cfg.ff_mult) * dim;
        const float inv_sqrt = static_cast<float>(1.0 / std::sqrt(static_cast<double>(hd)));

        std::vector<float> h(dim), a(dim), q(dim), ctx(dim), tmp(dim), fpre(ff), fact(ff);
        const float* e = emb_row(p_, table, row);
        const double* per = pe_.data() + static_cast<std::size_t>(pos) * dim;
        for (std::size_t i = 0; i < dim; ++i) h[i] = e[i] + static_cast<float>(per[i]);

        for (std::uint32_t l = 0; l < p_.cfg.layers; ++l) {
            const std::string pre = "layer" + std::to_string(l) + ".";
            float mean, rstd;
            ln_row(h.data(), p_.tensor(pre + "ln1.gain").data(),
                   p_.tensor(pre + "ln1.bias").data(), a.data(), mean, rstd);
            matvec(p_.tensor(pre + "attn.wq"), p_.tensor(pre + "attn.bq"), a, q);
            float* krow = kc_[l].data() + len_ * dim;
            float* vrow = vc_[l].data() + len_ * dim;
            {
                std::vector<float> kv(dim);
                matvec(p_.tensor(pre + "attn.wk"), p_.tensor(pre + "attn.bk"), a, kv);
                std::memcpy(krow, kv.data(), dim * sizeof(float));
                matvec(p_.tensor(pre + "attn.wv"), p_.tensor(pre + "attn.bv"), a, kv);
                std::memcpy(vrow, kv.data(), dim * sizeof(float));
            }
            const std::size_t t = len_;  // current row attends to 0..t
            for (std::size_t hh = 0; hh < heads; ++hh) {
                const std::size_t ho = hh * hd;
                scores_.resize(t + 1);
                float mx = -std::numeric_limits<float>::infinity();
                for (std::size_t j = 0; j <= t; ++j) {
                    float acc = 0.0f;
                    const float* kj = kc_[l].data() + j * dim + ho;
                    for (std::size_t d = 0; d < hd; ++d) acc += q[ho + d] * kj[d];
                    acc *= inv_sqrt;
                    scores_[j] = acc;
                    if (acc > mx) mx = acc;
                }
                float denom = 0.0f;
                for (std::size_t j = 0; j <= t; ++j) {
                    scores_[j] = std::exp(scores_[j] - mx);
                    denom += scores_[j];
                }
                const float inv = 1.0f / denom;
                for (std::size_t j = 0; j <= t; ++j) scores_[j] *= inv;
                for (std::size_t d = 0; d < hd; ++d) {
                    float acc = 0.0f;
                    for (std::size_t j = 0; j <= t; ++j)
                        acc += scores_[j] * vc_[l][j * dim + ho + d];
                    ctx[ho + d] = acc;
                }
            }
            matvec(p_.tensor(pre + "attn.wo"), p_.tensor(pre + "attn.bo"), ctx, tmp);
            for (std::size_t i = 0; i < dim; ++i) h[i] += tmp[i];

            ln_row(h.data(), p_.tensor(pre + "ln2.gain").data(),
                   p_.tensor(pre + "ln2.bias").data(), a.data(), mean, rstd);
            matvec(p_.tensor(pre + "ff.w1"), p_.tensor(pre + "ff.b1"), a, fpre);
            for (std::size_t i = 0; i < ff; ++i) fact[i] = gelu(fpre[i]);
            matvec(p_.tensor(pre + "ff.w2"), p_.tensor(pre + "ff.b2"), fact, tmp);
            for (std::size_t i = 0; i < dim; ++i) h[i] += tmp[i];
        }
        ++len_;

        float mean, rstd;
        ln_row(h.data(), p_.tensor("final_ln.gain").data(), p_.tensor("final_ln.bias").data(),
               a.data(), mean, rstd);
        const std::size_t vt = p_.cfg.v_total();
        std::vector<float> logits_f(vt);
        matvec(p_.tensor("out_proj.w"), p_.tensor("out_proj.b"), a, logits_f);
        return {logits_f.begin(), logits_f.end()};
    }

private:
    void ln_row(const float* x, const float* gain, const float* bias, float* y, float& mean,
                float& rstd) const {
        float mu = 0.0f;
        for (std::size_t i = 0; i < dim_; ++i) mu += x[i];
        mu /= static_cast<float>(dim_);
        float var = 0.0f;
        for (std::size_t i = 0; i < dim_; ++i) {
            const float d = x[i] - mu;
            var += d * d;
        }
        var /= static_cast<float>(dim_);
        const float r = 1.0f / std::sqrt(var + static_cast<float>(kLnEps));
        for (std::size_t i = 0; i < dim_; ++i) y[i] = gain[i] * ((x[i] - mu) * r) + bias[i];
        mean = mu;
        rstd = r;
    }

    void matvec(std::span<const float> W, std::span<const float> b, const std::vector<float>& x,
                std::vector<float>& y) const {
        const std::size_t out = b.size();
        const std::size_t in = x.size();
        const auto no = static_cast<std::int64_t>(out);
#pragma omp parallel for schedule(static) if (parallel_enabled() && no >= 4096)
        for (std::int64_t o = 0; o < no; ++o) {
            const float* wrow = W.data() + static_cast<std::size_t>(o) * in;
            float acc = b[static_cast<std::size_t>(o)];
            for (std::size_t i = 0; i < in; ++i) acc += wrow[i] * x[i];
            y[static_cast<std::size_t>(o)] = acc;
        }
    }

    const LmParams& p_;
    std::size_t dim_;
    std::size_t len_ = 0;
    std::vector<std::vector<float>> kc_, vc_;
    std::vector<double> pe_;
    mutable std::vector<float> scores_;
};

std::uint32_t sample_from_logits(const std::vector<double>& logits, const SamplingConfig& sc,
                                 Rng& rng) {
    const std::size_t n = logits.size();
    if (sc.greedy) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < n; ++i)
            if (logits[i] > logits[best]) best = i;
        return static_cast<std::uint32_t>(best);
    }

    std::vector<std::pair<double, std::uint32_t>> cand;
    cand.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        cand.emplace_back(logits[i] / sc.temperature, static_cast<std::uint32_t>(i));

    // Highest logit first, smallest id on ties; filters and the final
    // cumulative walk all use this order.
    std::sort(cand.begin(), cand.end(), [](const auto& a, const auto& b) {
        if (a.first != b.first) return a.first > b.first;
        return a.second < b.second;
    });
    if (sc.top_k > 0 && sc.top_k < cand.size()) cand.resize(sc.top_k);

    double mx = cand.front().first;
    double denom = 0.0;
    for (auto& [l, i] : cand) {
        l = std::exp(l - mx);
        denom += l;
    }
    for (auto& [l, i] : cand) l /= denom;

    if (sc.top_p < 1.0) {
        double cum = 0.0;
        std::size_t keep = 0;
        while (keep < cand.size()) {
            cum += cand[keep].first;
            ++keep;
            if (cum >= sc.top_p) break;
        }
        cand.resize(keep);
        double renorm = 0.0;
        for (const auto& [l, i] : cand) renorm += l;
        for (auto& [l, i] : cand) l /= renorm;
    }

    const double u = rng.uniform01();
    double acc = 0.0;
    for (const auto& [l, i] : cand) {
        acc += l;
        if (u < acc) return i;
    }
    return cand.back().second;
}

}  // namespace

GenerationResult lm_generate(const LmParams& params, const corpus::SymbolSequence& x_prompt,
                             const corpus::SymbolSequence& x, const bpe::BpeSequence& s_prompt,
                             const SamplingConfig& sampling) {
    const LmConfig& cfg = params.cfg;
    cfg.validate();
    require(sampling.max_new >= 1, "max_new must be >= 1");
    require(sampling.temperature > 0.0, "temperature must be positive");
    require(sampling.top_p > 0.0 && sampling.top_p <= 1.0, "top_p must be in (0,1]");

    std::vector<std::uint32_t> x_all;
    x_all.reserve(x_prompt.symbols.size() + x.symbols.size());
    x_all.insert(x_all.end(), x_prompt.symbols.begin(), x_prompt.symbols.end());
    x_all.insert(x_all.end(), x.symbols.begin(), x.symbols.end());
    for (std::uint32_t xi : x_all)
        require(xi < cfg.text_vocab, "text id out of range in prompt");
    for (std::uint32_t si : s_prompt.ids)
        require(si < cfg.speech_vocab, "speech id out of range in prompt");

    const std::size_t prompt_len = 2 + x_all.size() + s_prompt.ids.size();
    require(prompt_len + 1 <= cfg.max_len, "prompt layout leaves no room for new ids");

    Decoder dec(params);
    const std::vector<LayoutItem> items = build_layout(x_all, s_prompt.ids);
    std::vector<double> logits;
    for (const LayoutItem& it : items) logits = dec.step(it.table, it.row, it.pos);

    GenerationResult res;
    res.ids.utt_id = x.utt_id.empty() ? s_prompt.utt_id : x.utt_id;
    res.stopped_by = StopReason::MaxNew;
    Rng rng(sampling.seed);
    std::uint32_t next_pos = static_cast<std::uint32_t>(s_prompt.ids.size()) + 1;

    const auto t0 = std::chrono::steady_clock::now();
    while (true) {
        const std::uint32_t id = sample_from_logits(logits, sampling, rng);
        ++res.steps;
        if (id == cfg.eos_id()) {
            res.stopped_by = StopReason::Eos;
            break;
        }
        res.ids.ids.push_back(id);
        if (res.ids.ids.size() >= sampling.max_new || dec.len() >= cfg.max_len) break;
        logits = dec.step(SpeechTab, id, next_pos++);
    }
    const auto t1 = std::chrono::steady_clock::now();
    res.wall_time_s = std::chrono::duration<double>(t1 - t0).count();
    return res;
}

std::vector<double> next_logits_uncached(const LmParams& params,
                                         std::span<const std::uint32_t> x_all,
                                         std::span<const std::uint32_t> s_all) {
    const ForwardResult r = lm_forward(params, x_all, s_all);
    return {r.logits.end() - static_cast<std::ptrdiff_t>(r.cols), r.logits.end()};
}

std::vector<double> next_logits_cached(const LmParams& params,
                                       std::span<const std::uint32_t> x_all,
                                       std::span<const std::uint32_t> s_all) {
    params.cfg.validate();
    Decoder dec(params);
    std::vector<double> logits;
    for (const LayoutItem& it : build_layout(x_all, s_all))
        logits = dec.step(it.table, it.row, it.pos);
    return logits;
}

double measure_rtf(const GenerationResult& res, const bpe::BpeVocab& vocab,
                   double frame_shift_ms) {
    require(frame_shift_ms > 0.0, "frame_shift_ms must be positive");
    if (res.ids.ids.empty()) throw DomainError("lm: RTF undefined for an empty generation");
    const corpus::TokenSequence base = bpe::bpe_decode(res.ids, vocab);
    const double seconds =
        static_cast<double>(base.tokens.size()) * frame_shift_ms / 1000.0;
    return res.wall_time_s / seconds;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

namespace {

constexpr char kLmMagic[8] = {'A', 'B', 'P', 'E', 'L', 'M', '0', '1'};

void put_bytes(std::ofstream& out, const void* p, std::size_t n) {
    out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void get_bytes(std::ifstream& in, void* p, std::size_t n, const std::string& path) {
    if (!in.read(static_cast<char*>(p), static_cast<std::streamsize>(n)))
        throw ParseError("lm: truncated checkpoint " + path);
}

void put_name(std::ofstream& out, std::string_view name) {
    const auto len = static_cast<std::uint16_t>(name.size());
    put_bytes(out, &len, 2);
    put_bytes(out, name.data(), name.size());
}

std::string get_name(std::ifstream& in, const std::string& path) {
    std::uint16_t len;
    get_bytes(in, &len, 2, path);
    std::string s(len, '\0');
    get_bytes(in, s.data(), len, path);
    return s;
}

}  // namespace

void save_checkpoint(const LmParams& params, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("lm: cannot open " + path + " for writing");
    put_bytes(out, kLmMagic, 8);

    // Field-tagged config: (name, type u8: 0 = u64, 1 = f64, 8-byte payload).
    const LmConfig& c = params.cfg;
    const std::pair<const char*, std::uint64_t> u64_fields[] = {
        {"text_vocab", c.text_vocab}, {"speech_vocab", c.speech_vocab},
        {"dim", c.dim},               {"layers", c.layers},
        {"heads", c.heads},           {"ff_mult", c.ff_mult},
        {"max_len", c.max_len},       {"seed", c.seed},
    };
    const std::uint32_t n_fields = 8 + 1;
    put_bytes(out, &n_fields, 4);
    for (const auto& [name, value] : u64_fields) {
        put_name(out, name);
        const std::uint8_t type = 0;
        put_bytes(out, &type, 1);
        put_bytes(out, &value, 8);
    }
    {
        put_name(out, "dropout");
        const std::uint8_t type = 1;
        put_bytes(out, &type, 1);
        const double d = c.dropout;
        put_bytes(out, &d, 8);
    }

    const auto n_tensors = static_cast<std::uint32_t>(params.tensors.size());
    put_bytes(out, &n_tensors, 4);
    for (const TensorInfo& ti : params.tensors) {
        put_name(out, ti.name);
        const auto rank = static_cast<std::uint32_t>(ti.shape.size());
        put_bytes(out, &rank, 4);
        for (std::uint32_t d : ti.shape) put_bytes(out, &d, 4);
        put_bytes(out, params.data.data() + ti.offset, ti.size() * sizeof(float));
    }
    out.flush();
    if (!out.good()) throw IoError("lm: write failure on " + path);
}

LmParams load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("lm: cannot open " + path);
    char magic[8];
    get_bytes(in, magic, 8, path);
    if (std::memcmp(magic, kLmMagic, 8) != 0)
        throw ParseError("lm: " + path + ": bad magic, not a checkpoint");

    LmConfig cfg;
    std::uint32_t n_fields;
    get_bytes(in, &n_fields, 4, path);
    for (std::uint32_t f = 0; f < n_fields; ++f) {
        const std::string name = get_name(in, path);
        std::uint8_t type;
        get_bytes(in, &type, 1, path);
        std::uint64_t raw;
        get_bytes(in, &raw, 8, path);
        double dval = 0.0;
        if (type == 1) std::memcpy(&dval, &raw, 8);
        if (name == "text_vocab") cfg.text_vocab = static_cast<std::uint32_t>(raw);
        else if (name == "speech_vocab") cfg.speech_vocab = static_cast<std::uint32_t>(raw);
        else if (name == "dim") cfg.dim = static_cast<std::uint32_t>(raw);
        else if (name == "layers") cfg.layers = static_cast<std::uint32_t>(raw);
        else if (name == "heads") cfg.heads = static_cast<std::uint32_t>(raw);
        else if (name == "ff_mult") cfg.ff_mult = static_cast<std::uint32_t>(raw);
        else if (name == "max_len") cfg.max_len = static_cast<std::uint32_t>(raw);
        else if (name == "seed") cfg.seed = raw;
        else if (name == "dropout") cfg.dropout = static_cast<float>(dval);
        else throw ParseError("lm: " + path + ": unknown config field '" + name + "'");
    }

    LmParams p = LmParams::zeros_like(cfg);
    std::uint32_t n_tensors;
    get_bytes(in, &n_tensors, 4, path);
    if (n_tensors != p.tensors.size())
        throw ParseError("lm: " + path + ": tensor count mismatch");
    for (std::uint32_t t = 0; t < n_tensors; ++t) {
        const std::string name = get_name(in, path);
        std::uint32_t rank;
        get_bytes(in, &rank, 4, path);
        std::vector<std::uint32_t> shape(rank);
        for (auto& d : shape) get_bytes(in, &d, 4, path);
        const TensorInfo& ti = p.tensors[t];
        if (ti.name != name || ti.shape != shape)
            throw ParseError("lm: " + path + ": tensor '" + name + "' does not match layout");
        get_bytes(in, p.data.data() + ti.offset, ti.size() * sizeof(float), path);
    }
    for (float x : p.data)
        if (!std::isfinite(x)) throw DomainError("lm: " + path + ": non-finite parameter");
    return p;
}

void write_loss_curve_csv(std::span<const double> curve, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("lm: cannot open " + path + " for writing");
    out << "epoch,mean_loss\n";
    out.precision(17);
    for (std::size_t i = 0; i < curve.size(); ++i) out << i << ',' << curve[i] << "\n";
    out.flush();
    if (!out.good()) throw IoError("lm: write failure on " + path);
}

}  // namespace abpe::lm
