#include <doctest.h>

#include <cmath>

#include "abpe/lm.hpp"
#include "test_util.hpp"

using namespace abpe;

namespace {

lm::LmConfig tiny_cfg(std::uint32_t dim = 16, std::uint32_t layers = 2) {
    lm::LmConfig cfg;
    cfg.text_vocab = 5;
    cfg.speech_vocab = 7;
    cfg.dim = dim;
    cfg.layers = layers;
    cfg.heads = 4;
    cfg.ff_mult = 4;
    cfg.max_len = 64;
    cfg.seed = 42;
    return cfg;
}

const std::vector<std::uint32_t> kX{1, 3};
const std::vector<std::uint32_t> kS{0, 2, 5, 2, 6};

}  // namespace

TEST_CASE("positional_encoding: documented entries and range") {
    const auto pe = lm::positional_encoding(8, 6);
    for (std::uint32_t i = 0; i < 3; ++i) {
        CHECK(pe[2 * i] == 0.0);      // sin 0
        CHECK(pe[2 * i + 1] == 1.0);  // cos 0
    }
    for (const double v : pe) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }
    const auto pe4 = lm::positional_encoding(2, 4);
    CHECK(pe4[4] == doctest::Approx(0.8414709848078965).epsilon(1e-12));
    CHECK(pe4[5] == doctest::Approx(0.5403023058681398).epsilon(1e-12));

    CHECK_THROWS_AS(lm::positional_encoding(4, 3), DomainError);
}

TEST_CASE("lm_forward: zeroed output projection gives the uniform loss ln(V_total)") {
    const lm::LmConfig cfg = tiny_cfg();
    lm::LmParams p = lm::LmParams::init(cfg);
    auto w = p.tensor("out_proj.w");
    auto b = p.tensor("out_proj.b");
    std::fill(w.begin(), w.end(), 0.0f);
    std::fill(b.begin(), b.end(), 0.0f);
    const auto res = lm::lm_forward(p, kX, kS);
    CHECK(res.loss == doctest::Approx(std::log(cfg.v_total())).epsilon(1e-9));
    CHECK(res.rows == kS.size() + 1);
    CHECK(res.cols == cfg.v_total());
}

TEST_CASE("lm_forward: pure function of its inputs") {
    const lm::LmParams p = lm::LmParams::init(tiny_cfg());
    const auto a = lm::lm_forward(p, kX, kS);
    const auto b = lm::lm_forward(p, kX, kS);
    CHECK(a.loss == b.loss);
    CHECK(a.logits == b.logits);
}

TEST_CASE("lm_forward: causality - earlier logits unchanged when later input changes") {
    const lm::LmParams p = lm::LmParams::init(tiny_cfg());
    auto s2 = kS;
    s2.back() = (s2.back() + 3) % 7;
    const auto a = lm::lm_forward(p, kX, kS);
    const auto b = lm::lm_forward(p, kX, s2);
    // rows 0..|s|-1 predict from prefixes that exclude the altered id
    for (std::size_t r = 0; r + 1 < a.rows; ++r)
        for (std::size_t c = 0; c < a.cols; ++c)
            CHECK(a.logits[r * a.cols + c] == b.logits[r * b.cols + c]);
}

TEST_CASE("lm_forward: next-step distribution sums to 1") {
    const lm::LmParams p = lm::LmParams::init(tiny_cfg());
    const auto res = lm::lm_forward(p, kX, kS);
    for (std::size_t r = 0; r < res.rows; ++r) {
        double mx = res.logits[r * res.cols];
        for (std::size_t c = 1; c < res.cols; ++c)
            mx = std::max(mx, res.logits[r * res.cols + c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < res.cols; ++c)
            sum += std::exp(res.logits[r * res.cols + c] - mx);
        double total = 0.0;
        for (std::size_t c = 0; c < res.cols; ++c)
            total += std::exp(res.logits[r * res.cols + c] - mx) / sum;
        CHECK(total == doctest::Approx(1.0).epsilon(1e-5));
    }
}

TEST_CASE("lm_forward: rejects out-of-range ids and over-long layouts") {
    const lm::LmParams p = lm::LmParams::init(tiny_cfg());
    const std::vector<std::uint32_t> bad_x{9};
    CHECK_THROWS_AS(lm::lm_forward(p, bad_x, kS), DomainError);
    const std::vector<std::uint32_t> bad_s{99};
    CHECK_THROWS_AS(lm::lm_forward(p, kX, bad_s), DomainError);
    const std::vector<std::uint32_t> long_s(200, 0);
    CHECK_THROWS_AS(lm::lm_forward(p, kX, long_s), DomainError);
}

TEST_CASE("lm gradients match central finite differences in 64-bit mode") {
    const lm::LmConfig cfg = tiny_cfg(16, 2);
    const auto p64 = lm::LmParams::init(cfg).cast<double>();

    auto loss_of = [&](const lm::ParamsT<double>& q) {
        return lm::lm_forward<double>(q, kX, kS).loss;
    };
    lm::ParamsT<double> grads = lm::ParamsT<double>::zeros_like(cfg);
    lm::lm_forward<double>(p64, kX, kS, &grads);

    // Per parameter group: L2 relative error < 1e-4. Scalar entries are also
    // held to 1e-4 relative with a 1e-9 floor for the finite-difference noise
    // on near-zero gradients.
    const double eps = 1e-4;
    lm::ParamsT<double> probe = p64;
    for (const auto& ti : p64.tensors) {
        double n_an = 0.0, n_fd = 0.0, n_diff = 0.0;
        for (std::size_t i = ti.offset; i < ti.offset + ti.size(); ++i) {
            const double keep = probe.data[i];
            probe.data[i] = keep + eps;
            const double up = loss_of(probe);
            probe.data[i] = keep - eps;
            const double dn = loss_of(probe);
            probe.data[i] = keep;
            const double fd = (up - dn) / (2.0 * eps);
            const double an = grads.data[i];
            n_an += an * an;
            n_fd += fd * fd;
            n_diff += (an - fd) * (an - fd);
            CHECK(std::abs(an - fd) <= 1e-4 * std::max(std::abs(an), std::abs(fd)) + 1e-9);
        }
        const double group_rel =
            std::sqrt(n_diff) / std::max(std::sqrt(std::max(n_an, n_fd)), 1e-12);
        CAPTURE(ti.name);
        CHECK(group_rel < 1e-4);
    }
}

TEST_CASE("lm_train: epochs=0 returns the initial params unchanged") {
    lm::LmParams p = lm::LmParams::init(tiny_cfg());
    const std::vector<float> before = p.data;
    const std::vector<corpus::SymbolSequence> xs = {{"u", kX, 5}};
    const std::vector<bpe::BpeSequence> ss = {{"u", kS}};
    lm::OptConfig opt;
    opt.epochs = 0;
    const auto rep = lm::lm_train(p, xs, ss, opt, 0);
    CHECK(p.data == before);
    CHECK(rep.loss_curve.empty());
}

TEST_CASE("lm_train: single-pair overfit reaches loss < 0.01 and greedy decoding replays it") {
    lm::LmConfig cfg;
    cfg.text_vocab = 6;
    cfg.speech_vocab = 10;
    cfg.dim = 64;
    cfg.layers = 2;
    cfg.heads = 4;
    cfg.max_len = 64;
    cfg.seed = 7;
    lm::LmParams p = lm::LmParams::init(cfg);

    const std::vector<std::uint32_t> x{2, 4, 1};
    const std::vector<std::uint32_t> s{3, 3, 7, 1, 9, 0};
    const std::vector<corpus::SymbolSequence> xs = {{"pair", x, 6}};
    const std::vector<bpe::BpeSequence> ss = {{"pair", s}};

    lm::OptConfig opt;
    opt.lr = 1e-3;
    opt.epochs = 500;  // one example per epoch = 500 optimizer steps
    const auto rep = lm::lm_train(p, xs, ss, opt, 11);
    REQUIRE(rep.loss_curve.size() == 500);
    CHECK(rep.loss_curve.back() < 0.01);
    for (const double l : rep.loss_curve) CHECK(std::isfinite(l));

    lm::SamplingConfig sc;
    sc.greedy = true;
    sc.max_new = 32;
    const corpus::SymbolSequence empty_x{"", {}, 6};
    const bpe::BpeSequence empty_s{"", {}};
    const auto gen = lm::lm_generate(p, empty_x, {"pair", x, 6}, empty_s, sc);
    CHECK(gen.ids.ids == s);
    CHECK(gen.stopped_by == lm::StopReason::Eos);
    CHECK(gen.steps == s.size() + 1);
}

TEST_CASE("lm_train: loss decreases on a small synthetic corpus") {
    corpus::SynthConfig sc;
    sc.phoneme_alphabet = 6;
    sc.token_alphabet = 16;
    sc.mean_run_length = 3.0;
    sc.num_utterances = 24;
    sc.min_phonemes = 4;
    sc.max_phonemes = 8;
    sc.seed = 3;
    const auto synth = corpus::synth_corpus(sc);
    std::vector<bpe::BpeSequence> ss;
    for (const auto& t : synth.tokens) ss.push_back({t.utt_id, t.tokens});

    lm::LmConfig cfg;
    cfg.text_vocab = 6;
    cfg.speech_vocab = 16;
    cfg.dim = 32;
    cfg.layers = 1;
    cfg.heads = 2;
    cfg.max_len = 128;
    cfg.seed = 5;
    lm::LmParams p = lm::LmParams::init(cfg);
    lm::OptConfig opt;
    opt.epochs = 5;
    opt.lr = 3e-3;
    opt.batch_tokens = 512;
    const auto rep = lm::lm_train(p, synth.phonemes, ss, opt, 21);
    REQUIRE(rep.loss_curve.size() == 5);
    for (const double l : rep.loss_curve) CHECK(std::isfinite(l));
    CHECK(rep.loss_curve.back() < rep.loss_curve.front());
}

TEST_CASE("lm_train: deterministic given seed") {
    const std::vector<corpus::SymbolSequence> xs = {{"a", {0, 1}, 5}, {"b", {2}, 5}};
    const std::vector<bpe::BpeSequence> ss = {{"a", {1, 2, 3}}, {"b", {4, 5}}};
    lm::OptConfig opt;
    opt.epochs = 3;
    lm::LmParams p1 = lm::LmParams::init(tiny_cfg());
    lm::LmParams p2 = lm::LmParams::init(tiny_cfg());
    lm::lm_train(p1, xs, ss, opt, 99);
    lm::lm_train(p2, xs, ss, opt, 99);
    CHECK(p1.data == p2.data);
}

TEST_CASE("lm_generate: greedy path is deterministic and seed-independent; top_k=1 matches") {
    const lm::LmParams p = lm::LmParams::init(tiny_cfg());
    const corpus::SymbolSequence x{"x", {1, 2, 4}, 5};
    const corpus::SymbolSequence empty_x{"", {}, 5};
    const bpe::BpeSequence empty_s{"", {}};

    lm::SamplingConfig g1;
    g1.greedy = true;
    g1.max_new = 12;
    g1.seed = 1;
    lm::SamplingConfig g2 = g1;
    g2.seed = 999;
    const auto r1 = lm::lm_generate(p, empty_x, x, empty_s, g1);
    const auto r2 = lm::lm_generate(p, empty_x, x, empty_s, g2);
    CHECK(r1.ids.ids == r2.ids.ids);

    lm::SamplingConfig k1;
    k1.top_k = 1;
    k1.max_new = 12;
    k1.seed = 31337;
    const auto r3 = lm::lm_generate(p, empty_x, x, empty_s, k1);
    CHECK(r3.ids.ids == r1.ids.ids);
}

TEST_CASE("lm_generate: cached decoding equals full recomputation within 1e-5") {
    Rng rng(55);
    const lm::LmParams p = lm::LmParams::init(tiny_cfg(32, 2));
    for (int t = 0; t < 10; ++t) {
        std::vector<std::uint32_t> x_all(1 + rng.uniform_below(6));
        std::vector<std::uint32_t> s_all(1 + rng.uniform_below(10));
        for (auto& v : x_all) v = static_cast<std::uint32_t>(rng.uniform_below(5));
        for (auto& v : s_all) v = static_cast<std::uint32_t>(rng.uniform_below(7));
        const auto cached = lm::next_logits_cached(p, x_all, s_all);
        const auto full = lm::next_logits_uncached(p, x_all, s_all);
        REQUIRE(cached.size() == full.size());
        for (std::size_t i = 0; i < cached.size(); ++i)
            CHECK(cached[i] == doctest::Approx(full[i]).epsilon(1e-5));
    }
}

TEST_CASE("lm_generate: prompt overflow rejected") {
    lm::LmConfig cfg = tiny_cfg();
    cfg.max_len = 8;
    const lm::LmParams p = lm::LmParams::init(cfg);
    const corpus::SymbolSequence x{"x", {0, 1, 2, 3, 0, 1}, 5};
    const corpus::SymbolSequence empty_x{"", {}, 5};
    const bpe::BpeSequence empty_s{"", {}};
    lm::SamplingConfig sc;
    sc.max_new = 4;
    CHECK_THROWS_AS(lm::lm_generate(p, empty_x, x, empty_s, sc), DomainError);
}

TEST_CASE("measure_rtf: definition and linearity") {
    bpe::BpeVocab identity;
    identity.base_size = 500;
    lm::GenerationResult res;
    res.ids.ids.assign(100, 7);  // 100 base tokens under the identity vocab
    res.wall_time_s = 1.0;
    res.steps = 100;
    CHECK(lm::measure_rtf(res, identity, 20.0) == doctest::Approx(0.5).epsilon(1e-12));
    res.wall_time_s = 2.0;
    CHECK(lm::measure_rtf(res, identity, 20.0) == doctest::Approx(1.0).epsilon(1e-12));

    lm::GenerationResult empty;
    empty.wall_time_s = 0.5;
    CHECK_THROWS_AS(lm::measure_rtf(empty, identity, 20.0), DomainError);
}

TEST_CASE("checkpoint: save/load roundtrip preserves config and tensors") {
    testutil::TempDir td("ckpt");
    lm::LmConfig cfg = tiny_cfg();
    cfg.dropout = 0.25f;
    const lm::LmParams p = lm::LmParams::init(cfg);
    lm::save_checkpoint(p, td.file("m.ckpt"));
    const lm::LmParams q = lm::load_checkpoint(td.file("m.ckpt"));
    CHECK(q.cfg.text_vocab == cfg.text_vocab);
    CHECK(q.cfg.speech_vocab == cfg.speech_vocab);
    CHECK(q.cfg.dim == cfg.dim);
    CHECK(q.cfg.layers == cfg.layers);
    CHECK(q.cfg.heads == cfg.heads);
    CHECK(q.cfg.ff_mult == cfg.ff_mult);
    CHECK(q.cfg.max_len == cfg.max_len);
    CHECK(q.cfg.dropout == cfg.dropout);
    CHECK(q.cfg.seed == cfg.seed);
    CHECK(q.data == p.data);

    CHECK_THROWS_AS(lm::load_checkpoint(td.file("missing.ckpt")), IoError);
}

TEST_CASE("lm_forward: serial and OpenMP paths agree bit-for-bit") {
    const lm::LmParams p = lm::LmParams::init(tiny_cfg(32, 2));
    set_parallel_enabled(true);
    const auto a = lm::lm_forward(p, kX, kS);
    set_parallel_enabled(false);
    const auto b = lm::lm_forward(p, kX, kS);
    set_parallel_enabled(true);
    CHECK(a.loss == b.loss);
    CHECK(a.logits == b.logits);
}

TEST_CASE("lm_train: nonzero dropout trains, stays finite, and is seed-deterministic") {
    lm::LmConfig cfg = tiny_cfg();
    cfg.dropout = 0.2f;
    const std::vector<corpus::SymbolSequence> xs = {{"a", {0, 1}, 5}, {"b", {2, 4}, 5}};
    const std::vector<bpe::BpeSequence> ss = {{"a", {1, 2, 3}}, {"b", {4, 5, 0}}};
    lm::OptConfig opt;
    opt.epochs = 3;
    lm::LmParams p1 = lm::LmParams::init(cfg);
    lm::LmParams p2 = lm::LmParams::init(cfg);
    const auto r1 = lm::lm_train(p1, xs, ss, opt, 5);
    const auto r2 = lm::lm_train(p2, xs, ss, opt, 5);
    for (const double l : r1.loss_curve) CHECK(std::isfinite(l));
    CHECK(p1.data == p2.data);
}

TEST_CASE("lm config validation") {
    lm::LmConfig cfg = tiny_cfg();
    cfg.dim = 30;  // not divisible by heads=4
    CHECK_THROWS_AS(cfg.validate(), DomainError);
    cfg = tiny_cfg();
    cfg.dropout = 1.5f;
    CHECK_THROWS_AS(cfg.validate(), DomainError);
}
