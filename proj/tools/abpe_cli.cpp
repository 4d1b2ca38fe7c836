// abpe: command-line pipeline for discrete-token BPE experiments: corpus
// synthesis, k-means quantization, BPE train/encode/decode, a toy conditional
// token generator, and the evaluation metrics.

#include <omp.h>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "abpe/bench.hpp"
#include "abpe/bpe.hpp"
#include "abpe/corpus.hpp"
#include "abpe/lm.hpp"
#include "abpe/metrics.hpp"
#include "abpe/quantizer.hpp"
#include "manifest.hpp"

namespace fs = std::filesystem;
using namespace abpe;

namespace {

// ---------------------------------------------------------------------------
// Config file plumbing: "key = value" lines, '#' comments, module-namespaced
// keys. File values act as defaults; command-line flags override them.
// ---------------------------------------------------------------------------

std::map<std::string, std::string> load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cli: cannot open config file " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            if (b == std::string::npos) return std::string{};
            const auto e = s.find_last_not_of(" \t\r");
            return s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ParseError("cli: " + path + ":" + std::to_string(line_no) +
                             ": expected 'key = value'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ParseError("cli: " + path + ":" + std::to_string(line_no) +
                                          ": empty key");
        kv[key] = value;
    }
    return kv;
}

struct Binding {
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
};

struct CommandContext {
    std::string name;
    std::map<std::string, Binding> bindings;          // config key -> accessor
    std::map<std::string, CLI::Option*> key_options;  // config key -> CLI option
};

std::map<std::string, CommandContext*>& registry() {
    static std::map<std::string, CommandContext*> r;
    return r;
}

template <typename T>
std::string render(const T& v) {
    if constexpr (std::is_same_v<T, std::string>) {
        return v;
    } else if constexpr (std::is_same_v<T, bool>) {
        return v ? "true" : "false";
    } else if constexpr (std::is_floating_point_v<T>) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        return ss.str();
    } else {
        return std::to_string(v);
    }
}

template <typename T>
void parse_into(const std::string& s, T& out, const std::string& key) {
    if constexpr (std::is_same_v<T, std::string>) {
        out = s;
    } else if constexpr (std::is_same_v<T, bool>) {
        if (s == "true" || s == "1") out = true;
        else if (s == "false" || s == "0") out = false;
        else throw ParseError("cli: config key " + key + ": expected a boolean, got '" + s + "'");
    } else if constexpr (std::is_floating_point_v<T>) {
        try {
            out = static_cast<T>(std::stod(s));
        } catch (...) {
            throw ParseError("cli: config key " + key + ": expected a number, got '" + s + "'");
        }
    } else {
        T v{};
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
        if (ec != std::errc{} || p != s.data() + s.size())
            throw ParseError("cli: config key " + key + ": expected an integer, got '" + s + "'");
        out = v;
    }
}

template <typename T>
void bind(CommandContext& ctx, const std::string& key, T* target, CLI::Option* opt) {
    ctx.bindings[key] = Binding{
        [target, key](const std::string& s) { parse_into(s, *target, key); },
        [target] { return render(*target); }};
    ctx.key_options[key] = opt;
}

struct CommonArgs {
    std::string config_path;
    std::uint64_t seed = 0;
    int threads = 0;
};

void add_common(CLI::App* sub, CommandContext& ctx, CommonArgs& common) {
    sub->add_option("--config", common.config_path, "key = value config file");
    CLI::Option* so = sub->add_option("--seed", common.seed, "random seed");
    CLI::Option* to = sub->add_option("--threads", common.threads, "OpenMP thread count (0 = default)");
    bind(ctx, "cli.seed", &common.seed, so);
    bind(ctx, "cli.threads", &common.threads, to);
}

// Applies config-file values to every binding whose flag was not given on the
// command line, and rejects keys no subcommand knows.
void apply_config(const std::map<std::string, std::string>& kv, CommandContext& active) {
    std::set<std::string> known;
    for (const auto& [name, ctx] : registry())
        for (const auto& [key, b] : ctx->bindings) known.insert(key);
    for (const auto& [key, value] : kv) {
        if (!known.count(key)) throw CLI::ParseError("unknown config key: " + key, 2);
        const auto it = active.bindings.find(key);
        if (it == active.bindings.end()) continue;  // belongs to another subcommand
        CLI::Option* opt = active.key_options[key];
        if (opt != nullptr && opt->count() > 0) continue;  // flag wins
        it->second.set(value);
    }
}

std::string effective_config_text(const CommandContext& ctx) {
    std::ostringstream ss;
    for (const auto& [key, b] : ctx.bindings) ss << key << " = " << b.get() << "\n";
    return ss.str();
}

void apply_threads(const CommonArgs& common) {
    if (common.threads > 0) omp_set_num_threads(common.threads);
}

void finish_outputs(const CommandContext& ctx, const CommonArgs& common,
                    const std::vector<std::string>& inputs, const std::vector<std::string>& outputs,
                    const std::string& manifest_base = "") {
    cli::Manifest m;
    m.command = ctx.name;
    for (const auto& [key, b] : ctx.bindings) m.effective_config[key] = b.get();
    m.seed = common.seed;
    m.threads = common.threads;
    m.inputs = inputs;
    m.outputs = outputs;

    const std::string base = manifest_base.empty() ? outputs.front() : manifest_base;
    std::ofstream cfg(base + ".effective.cfg", std::ios::binary | std::ios::trunc);
    cfg << effective_config_text(ctx);
    cfg.close();
    write_manifest(m, base);
}

// transcript format: "<utt_id>\t<word> <word> ...", one utterance per line
std::vector<std::pair<std::string, std::vector<std::string>>> read_transcripts(
    const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cli: cannot open " + path);
    std::vector<std::pair<std::string, std::vector<std::string>>> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError("cli: " + path + ":" + std::to_string(line_no) + ": missing tab");
        std::vector<std::string> words;
        std::istringstream ws(line.substr(tab + 1));
        std::string w;
        while (ws >> w) words.push_back(w);
        out.emplace_back(line.substr(0, tab), std::move(words));
    }
    return out;
}

char peek_stream_kind(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cli: cannot open " + path);
    const int c = in.peek();
    if (c == 'V' || c == 'K') return static_cast<char>(c);
    throw ParseError("cli: " + path + ": expected a K= or V= id file");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acoustic BPE pipeline toolkit"};
    app.require_subcommand(1);

    // --- synth-corpus -------------------------------------------------------
    CommandContext cx_synth{"synth-corpus", {}, {}};
    CommonArgs ca_synth;
    corpus::SynthConfig synth_cfg;
    std::string synth_out_tokens, synth_out_symbols;
    {
        CLI::App* sub = app.add_subcommand("synth-corpus", "generate a paired phoneme/token corpus");
        add_common(sub, cx_synth, ca_synth);
        sub->add_option("--out-tokens", synth_out_tokens, "token file to write")->required();
        sub->add_option("--out-symbols", synth_out_symbols, "symbol file to write")->required();
        bind(cx_synth, "corpus.phoneme_alphabet", &synth_cfg.phoneme_alphabet,
             sub->add_option("--phoneme-alphabet", synth_cfg.phoneme_alphabet));
        bind(cx_synth, "corpus.token_alphabet", &synth_cfg.token_alphabet,
             sub->add_option("--token-alphabet", synth_cfg.token_alphabet));
        bind(cx_synth, "corpus.runs_per_phoneme", &synth_cfg.runs_per_phoneme,
             sub->add_option("--runs-per-phoneme", synth_cfg.runs_per_phoneme));
        bind(cx_synth, "corpus.mean_run_length", &synth_cfg.mean_run_length,
             sub->add_option("--mean-run-length", synth_cfg.mean_run_length));
        bind(cx_synth, "corpus.num_utterances", &synth_cfg.num_utterances,
             sub->add_option("--num-utterances", synth_cfg.num_utterances));
        bind(cx_synth, "corpus.min_phonemes", &synth_cfg.min_phonemes,
             sub->add_option("--min-phonemes", synth_cfg.min_phonemes));
        bind(cx_synth, "corpus.max_phonemes", &synth_cfg.max_phonemes,
             sub->add_option("--max-phonemes", synth_cfg.max_phonemes));
        registry()["synth-corpus"] = &cx_synth;
        sub->callback([&] {
            apply_threads(ca_synth);
            synth_cfg.seed = ca_synth.seed;
            const corpus::SynthCorpus sc = corpus::synth_corpus(synth_cfg);
            corpus::write_token_file(sc.tokens, synth_out_tokens);
            corpus::write_symbol_file(sc.phonemes, synth_out_symbols);
            finish_outputs(cx_synth, ca_synth, {}, {synth_out_tokens, synth_out_symbols});
            std::cout << "wrote " << sc.tokens.size() << " utterances\n";
        });
    }

    // --- quantize-train -----------------------------------------------------
    CommandContext cx_qt{"quantize-train", {}, {}};
    CommonArgs ca_qt;
    std::vector<std::string> qt_inputs;
    std::string qt_out, qt_init = "kmeans++";
    quant::KmeansConfig qt_cfg;
    {
        CLI::App* sub = app.add_subcommand("quantize-train", "train a k-means codebook on features");
        add_common(sub, cx_qt, ca_qt);
        sub->add_option("--in", qt_inputs, "feature file(s)")->required();
        sub->add_option("--out", qt_out, "codebook file to write")->required();
        bind(cx_qt, "quantizer.k", &qt_cfg.k, sub->add_option("--k", qt_cfg.k));
        bind(cx_qt, "quantizer.max_iters", &qt_cfg.max_iters,
             sub->add_option("--max-iters", qt_cfg.max_iters));
        bind(cx_qt, "quantizer.rel_tol", &qt_cfg.rel_tol,
             sub->add_option("--rel-tol", qt_cfg.rel_tol));
        bind(cx_qt, "quantizer.init", &qt_init,
             sub->add_option("--init", qt_init, "kmeans++ | random"));
        registry()["quantize-train"] = &cx_qt;
        sub->callback([&] {
            apply_threads(ca_qt);
            qt_cfg.seed = ca_qt.seed;
            if (qt_init == "kmeans++") qt_cfg.init = quant::KmeansInit::KmeansPlusPlus;
            else if (qt_init == "random") qt_cfg.init = quant::KmeansInit::RandomPoints;
            else throw DomainError("quantizer: unknown init '" + qt_init + "'");
            std::vector<corpus::FeatureMatrix> feats;
            for (const auto& f : qt_inputs) feats.push_back(corpus::read_feature_file(f));
            const quant::Codebook cb = quant::kmeans_train(feats, qt_cfg);
            quant::write_codebook_file(cb, qt_out);
            finish_outputs(cx_qt, ca_qt, qt_inputs, {qt_out});
            std::cout << "k=" << cb.k << " dim=" << cb.dim << " inertia=" << cb.training_inertia
                      << "\n";
        });
    }

    // --- quantize-encode ----------------------------------------------------
    CommandContext cx_qe{"quantize-encode", {}, {}};
    CommonArgs ca_qe;
    std::vector<std::string> qe_features;
    std::string qe_codebook, qe_out;
    {
        CLI::App* sub = app.add_subcommand("quantize-encode", "assign frames to nearest centroids");
        add_common(sub, cx_qe, ca_qe);
        sub->add_option("--features", qe_features, "feature file(s)")->required();
        sub->add_option("--codebook", qe_codebook, "codebook file")->required();
        sub->add_option("--out", qe_out, "token file to write")->required();
        registry()["quantize-encode"] = &cx_qe;
        sub->callback([&] {
            apply_threads(ca_qe);
            const quant::Codebook cb = quant::read_codebook_file(qe_codebook);
            std::vector<corpus::TokenSequence> toks;
            for (const auto& f : qe_features)
                toks.push_back(quant::kmeans_assign(corpus::read_feature_file(f), cb));
            corpus::write_token_file(toks, qe_out);
            std::vector<std::string> ins = qe_features;
            ins.push_back(qe_codebook);
            finish_outputs(cx_qe, ca_qe, ins, {qe_out});
            std::cout << "encoded " << toks.size() << " utterances\n";
        });
    }

    // --- bpe-train ----------------------------------------------------------
    CommandContext cx_bt{"bpe-train", {}, {}};
    CommonArgs ca_bt;
    std::string bt_in, bt_out, bt_offset_hex = "4E00";
    std::uint32_t bt_vocab = 5000, bt_min_freq = 2;
    {
        CLI::App* sub = app.add_subcommand("bpe-train", "train BPE merges on a token corpus");
        add_common(sub, cx_bt, ca_bt);
        sub->add_option("--in", bt_in, "token file")->required();
        sub->add_option("--out", bt_out, "vocab file to write")->required();
        bind(cx_bt, "abpe.vocab_size", &bt_vocab, sub->add_option("--vocab-size", bt_vocab));
        bind(cx_bt, "abpe.min_pair_freq", &bt_min_freq,
             sub->add_option("--min-pair-freq", bt_min_freq));
        bind(cx_bt, "abpe.codepoint_offset", &bt_offset_hex,
             sub->add_option("--offset", bt_offset_hex, "codepoint offset, hex"));
        registry()["bpe-train"] = &cx_bt;
        sub->callback([&] {
            apply_threads(ca_bt);
            const std::vector<corpus::TokenSequence> corp = corpus::read_token_file(bt_in);
            bpe::BpeVocab v = bpe::bpe_train(corp, bt_vocab, bt_min_freq);
            v.codepoint_offset = static_cast<char32_t>(std::stoul(bt_offset_hex, nullptr, 16));
            bpe::write_vocab_file(v, bt_out);
            finish_outputs(cx_bt, ca_bt, {bt_in}, {bt_out});
            std::cout << "vocab_size=" << v.vocab_size() << " merges=" << v.merges.size() << "\n";
        });
    }

    // --- bpe-encode ---------------------------------------------------------
    CommandContext cx_be{"bpe-encode", {}, {}};
    CommonArgs ca_be;
    std::string be_in, be_vocab, be_out, be_codepoints;
    {
        CLI::App* sub = app.add_subcommand("bpe-encode", "encode token streams with a BPE vocab");
        add_common(sub, cx_be, ca_be);
        sub->add_option("--in", be_in, "token file")->required();
        sub->add_option("--vocab", be_vocab, "vocab file")->required();
        sub->add_option("--out", be_out, "BPE id file to write")->required();
        sub->add_option("--codepoints-out", be_codepoints,
                        "also export the UTF-8 codepoint form of the input");
        registry()["bpe-encode"] = &cx_be;
        sub->callback([&] {
            apply_threads(ca_be);
            const bpe::BpeVocab v = bpe::read_vocab_file(be_vocab);
            const std::vector<corpus::TokenSequence> corp = corpus::read_token_file(be_in);
            const std::vector<bpe::BpeSequence> enc = bpe::bpe_encode_corpus(corp, v);
            bpe::write_bpe_file(enc, v.vocab_size(), be_out);
            std::vector<std::string> outs{be_out};
            if (!be_codepoints.empty()) {
                bpe::write_codepoint_file(corp, v.codepoint_offset, be_codepoints);
                outs.push_back(be_codepoints);
            }
            finish_outputs(cx_be, ca_be, {be_in, be_vocab}, outs);
            std::cout << "encoded " << enc.size() << " utterances\n";
        });
    }

    // --- bpe-decode ---------------------------------------------------------
    CommandContext cx_bd{"bpe-decode", {}, {}};
    CommonArgs ca_bd;
    std::string bd_in, bd_vocab, bd_out;
    {
        CLI::App* sub = app.add_subcommand("bpe-decode", "decode BPE ids back to base tokens");
        add_common(sub, cx_bd, ca_bd);
        sub->add_option("--in", bd_in, "BPE id file")->required();
        sub->add_option("--vocab", bd_vocab, "vocab file")->required();
        sub->add_option("--out", bd_out, "token file to write")->required();
        registry()["bpe-decode"] = &cx_bd;
        sub->callback([&] {
            apply_threads(ca_bd);
            const bpe::BpeVocab v = bpe::read_vocab_file(bd_vocab);
            const std::vector<bpe::BpeSequence> ids = bpe::read_bpe_file(bd_in, v.vocab_size());
            std::vector<corpus::TokenSequence> toks;
            toks.reserve(ids.size());
            for (const auto& s : ids) toks.push_back(bpe::bpe_decode(s, v));
            corpus::write_token_file(toks, bd_out);
            finish_outputs(cx_bd, ca_bd, {bd_in, bd_vocab}, {bd_out});
            std::cout << "decoded " << toks.size() << " utterances\n";
        });
    }

    // --- bpe-stats ----------------------------------------------------------
    CommandContext cx_bs{"bpe-stats", {}, {}};
    CommonArgs ca_bs;
    std::string bs_in, bs_vocab, bs_out;
    {
        CLI::App* sub = app.add_subcommand("bpe-stats", "compression statistics for a vocab");
        add_common(sub, cx_bs, ca_bs);
        sub->add_option("--in", bs_in, "token file")->required();
        sub->add_option("--vocab", bs_vocab, "vocab file")->required();
        sub->add_option("--out", bs_out, "CSV report to write")->required();
        registry()["bpe-stats"] = &cx_bs;
        sub->callback([&] {
            apply_threads(ca_bs);
            const bpe::BpeVocab v = bpe::read_vocab_file(bs_vocab);
            const std::vector<corpus::TokenSequence> corp = corpus::read_token_file(bs_in);
            const bpe::CompressionStats st = bpe::compression_stats(corp, v);
            std::ofstream out(bs_out, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cli: cannot write " + bs_out);
            out.precision(17);
            out << "utt_id,base_tokens,bpe_ids,ratio\n";
            for (std::size_t i = 0; i < corp.size(); ++i) {
                const auto base = corp[i].tokens.size();
                const auto ids = static_cast<std::size_t>(
                    std::llround(static_cast<double>(base) / st.per_utt[i]));
                out << corp[i].utt_id << ',' << base << ',' << ids << ',' << st.per_utt[i] << "\n";
            }
            out << "TOTAL," << st.total_base_tokens << ',' << st.total_bpe_ids << ','
                << st.mean_ratio << "\n";
            out.close();
            finish_outputs(cx_bs, ca_bs, {bs_in, bs_vocab}, {bs_out});
            std::cout << "mean_ratio=" << st.mean_ratio << " total_base=" << st.total_base_tokens
                      << " total_ids=" << st.total_bpe_ids << "\n";
        });
    }

    // --- lm-train -----------------------------------------------------------
    CommandContext cx_lt{"lm-train", {}, {}};
    CommonArgs ca_lt;
    std::string lt_tokens, lt_symbols, lt_out, lt_curve;
    lm::LmConfig lt_cfg;
    lm::OptConfig lt_opt;
    {
        CLI::App* sub = app.add_subcommand("lm-train", "train the conditional token generator");
        add_common(sub, cx_lt, ca_lt);
        sub->add_option("--tokens", lt_tokens, "speech stream (K= or V= id file)")->required();
        sub->add_option("--symbols", lt_symbols, "condition stream (P= id file)")->required();
        sub->add_option("--out", lt_out, "checkpoint to write")->required();
        sub->add_option("--curve", lt_curve, "loss curve CSV (default <out>.curve.csv)");
        bind(cx_lt, "lm.dim", &lt_cfg.dim, sub->add_option("--dim", lt_cfg.dim));
        bind(cx_lt, "lm.layers", &lt_cfg.layers, sub->add_option("--layers", lt_cfg.layers));
        bind(cx_lt, "lm.heads", &lt_cfg.heads, sub->add_option("--heads", lt_cfg.heads));
        bind(cx_lt, "lm.ff_mult", &lt_cfg.ff_mult, sub->add_option("--ff-mult", lt_cfg.ff_mult));
        bind(cx_lt, "lm.max_len", &lt_cfg.max_len, sub->add_option("--max-len", lt_cfg.max_len));
        bind(cx_lt, "lm.dropout", &lt_cfg.dropout, sub->add_option("--dropout", lt_cfg.dropout));
        bind(cx_lt, "lm.lr", &lt_opt.lr, sub->add_option("--lr", lt_opt.lr));
        bind(cx_lt, "lm.weight_decay", &lt_opt.weight_decay,
             sub->add_option("--weight-decay", lt_opt.weight_decay));
        bind(cx_lt, "lm.epochs", &lt_opt.epochs, sub->add_option("--epochs", lt_opt.epochs));
        bind(cx_lt, "lm.batch_tokens", &lt_opt.batch_tokens,
             sub->add_option("--batch-tokens", lt_opt.batch_tokens));
        bind(cx_lt, "lm.grad_accum", &lt_opt.grad_accum,
             sub->add_option("--grad-accum", lt_opt.grad_accum));
        registry()["lm-train"] = &cx_lt;
        sub->callback([&] {
            apply_threads(ca_lt);
            const char kind = peek_stream_kind(lt_tokens);
            auto [v_alpha, v_rows] = corpus::read_id_file(lt_tokens, kind);
            const std::vector<corpus::SymbolSequence> xs = corpus::read_symbol_file(lt_symbols);
            if (xs.empty() || v_rows.empty())
                throw DomainError("lm: empty training corpus");
            if (v_rows.size() != xs.size())
                throw DomainError("lm: token and symbol corpora have different sizes");
            std::vector<bpe::BpeSequence> ss;
            ss.reserve(v_rows.size());
            for (auto& r : v_rows) ss.push_back({std::move(r.utt_id), std::move(r.ids)});

            lt_cfg.text_vocab = xs.front().alphabet_size;
            lt_cfg.speech_vocab = v_alpha;
            lt_cfg.seed = ca_lt.seed;
            lm::LmParams params = lm::LmParams::init(lt_cfg);
            const lm::TrainReport rep = lm::lm_train(params, xs, ss, lt_opt, ca_lt.seed);
            lm::save_checkpoint(params, lt_out);
            const std::string curve = lt_curve.empty() ? lt_out + ".curve.csv" : lt_curve;
            lm::write_loss_curve_csv(rep.loss_curve, curve);
            finish_outputs(cx_lt, ca_lt, {lt_tokens, lt_symbols}, {lt_out, curve});
            std::cout << "epochs=" << rep.loss_curve.size() << " final_loss="
                      << (rep.loss_curve.empty() ? 0.0 : rep.loss_curve.back()) << "\n";
        });
    }

    // --- lm-generate --------------------------------------------------------
    CommandContext cx_lg{"lm-generate", {}, {}};
    CommonArgs ca_lg;
    std::string lg_model, lg_symbols, lg_sym_prompt, lg_tok_prompt, lg_out;
    double lg_temperature = 1.0, lg_top_p = 1.0;
    std::uint32_t lg_top_k = 0, lg_max_new = 256;
    bool lg_greedy = false;
    {
        CLI::App* sub = app.add_subcommand("lm-generate", "sample token continuations");
        add_common(sub, cx_lg, ca_lg);
        sub->add_option("--model", lg_model, "checkpoint")->required();
        sub->add_option("--symbols", lg_symbols, "condition stream x (P= file)")->required();
        sub->add_option("--symbols-prompt", lg_sym_prompt, "x_prompt stream (P= file)");
        sub->add_option("--tokens-prompt", lg_tok_prompt, "s_prompt stream (K= or V= file)");
        sub->add_option("--out", lg_out, "generated id file to write")->required();
        bind(cx_lg, "lm.temperature", &lg_temperature,
             sub->add_option("--temperature", lg_temperature));
        bind(cx_lg, "lm.top_k", &lg_top_k, sub->add_option("--top-k", lg_top_k));
        bind(cx_lg, "lm.top_p", &lg_top_p, sub->add_option("--top-p", lg_top_p));
        bind(cx_lg, "lm.max_new", &lg_max_new, sub->add_option("--max-new", lg_max_new));
        bind(cx_lg, "lm.greedy", &lg_greedy, sub->add_flag("--greedy", lg_greedy));
        registry()["lm-generate"] = &cx_lg;
        sub->callback([&] {
            apply_threads(ca_lg);
            const lm::LmParams params = lm::load_checkpoint(lg_model);
            const std::vector<corpus::SymbolSequence> xs = corpus::read_symbol_file(lg_symbols);
            std::vector<corpus::SymbolSequence> xps;
            if (!lg_sym_prompt.empty()) xps = corpus::read_symbol_file(lg_sym_prompt);
            std::vector<bpe::BpeSequence> sps;
            if (!lg_tok_prompt.empty()) {
                auto [a, rows] = corpus::read_id_file(lg_tok_prompt, peek_stream_kind(lg_tok_prompt));
                for (auto& r : rows) sps.push_back({std::move(r.utt_id), std::move(r.ids)});
            }
            const corpus::SymbolSequence empty_x{"", {}, params.cfg.text_vocab};
            const bpe::BpeSequence empty_s{"", {}};

            std::vector<bpe::BpeSequence> outs;
            nlohmann::json timing = nlohmann::json::array();
            for (std::size_t i = 0; i < xs.size(); ++i) {
                lm::SamplingConfig sc;
                sc.temperature = lg_temperature;
                sc.top_k = lg_top_k;
                sc.top_p = lg_top_p;
                sc.max_new = lg_max_new;
                sc.greedy = lg_greedy;
                sc.seed = splitmix64(ca_lg.seed + i);
                const lm::GenerationResult r =
                    lm::lm_generate(params, i < xps.size() ? xps[i] : empty_x, xs[i],
                                    i < sps.size() ? sps[i] : empty_s, sc);
                if (!r.ids.ids.empty()) {
                    bpe::BpeSequence s = r.ids;
                    s.utt_id = xs[i].utt_id;
                    outs.push_back(std::move(s));
                }
                timing.push_back({{"utt_id", xs[i].utt_id},
                                  {"wall_time_s", r.wall_time_s},
                                  {"steps", r.steps},
                                  {"stopped_by",
                                   r.stopped_by == lm::StopReason::Eos ? "EOS" : "max_new"}});
            }
            if (outs.empty()) throw DomainError("lm: every generation stopped at EOS immediately");
            bpe::write_bpe_file(outs, params.cfg.speech_vocab, lg_out);
            std::ofstream tf(lg_out + ".timing.json", std::ios::binary | std::ios::trunc);
            tf << timing.dump(2) << "\n";
            tf.close();
            std::vector<std::string> ins{lg_model, lg_symbols};
            if (!lg_sym_prompt.empty()) ins.push_back(lg_sym_prompt);
            if (!lg_tok_prompt.empty()) ins.push_back(lg_tok_prompt);
            finish_outputs(cx_lg, ca_lg, ins, {lg_out});
            std::cout << "generated " << outs.size() << " sequences\n";
        });
    }

    // --- eval-wer -----------------------------------------------------------
    CommandContext cx_ew{"eval-wer", {}, {}};
    CommonArgs ca_ew;
    std::string ew_ref, ew_hyp, ew_out, ew_keep;
    double ew_cutoff = -1.0;
    {
        CLI::App* sub = app.add_subcommand("eval-wer", "word error rate from transcript pairs");
        add_common(sub, cx_ew, ca_ew);
        sub->add_option("--ref", ew_ref, "reference transcripts")->required();
        sub->add_option("--hyp", ew_hyp, "hypothesis transcripts")->required();
        sub->add_option("--out", ew_out, "CSV report to write")->required();
        sub->add_option("--keep-out", ew_keep,
                        "write ids of utterances with WER <= the cutoff (selection list for"
                        " diversity evaluation)");
        bind(cx_ew, "metrics.wer_cutoff", &ew_cutoff,
             sub->add_option("--wer-cutoff", ew_cutoff, "cutoff used with --keep-out"));
        registry()["eval-wer"] = &cx_ew;
        sub->callback([&] {
            apply_threads(ca_ew);
            const auto refs = read_transcripts(ew_ref);
            const auto hyps = read_transcripts(ew_hyp);
            std::map<std::string, const std::vector<std::string>*> hyp_by_id;
            for (const auto& [id, words] : hyps) hyp_by_id[id] = &words;
            std::ofstream out(ew_out, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cli: cannot write " + ew_out);
            out.precision(17);
            out << "utt_id,rate,substitutions,deletions,insertions,ref_words\n";
            std::uint64_t edits = 0, ref_words = 0;
            std::vector<std::string> kept;
            for (const auto& [id, ref_w] : refs) {
                const auto it = hyp_by_id.find(id);
                if (it == hyp_by_id.end())
                    throw DomainError("metrics: hypothesis missing utterance '" + id + "'");
                const metrics::WerResult w = metrics::wer(ref_w, *it->second);
                out << id << ',' << w.rate << ',' << w.substitutions << ',' << w.deletions << ','
                    << w.insertions << ',' << ref_w.size() << "\n";
                edits += w.substitutions + w.deletions + w.insertions;
                ref_words += ref_w.size();
                if (ew_cutoff >= 0.0 && w.rate <= ew_cutoff) kept.push_back(id);
            }
            const double aggregate = static_cast<double>(edits) / static_cast<double>(ref_words);
            out << "TOTAL," << aggregate << ",,,," << ref_words << "\n";
            out.close();
            std::vector<std::string> outs{ew_out};
            if (!ew_keep.empty()) {
                if (ew_cutoff < 0.0)
                    throw DomainError("metrics: --keep-out requires --wer-cutoff");
                std::ofstream kf(ew_keep, std::ios::binary | std::ios::trunc);
                for (const auto& id : kept) kf << id << "\n";
                kf.close();
                outs.push_back(ew_keep);
            }
            finish_outputs(cx_ew, ca_ew, {ew_ref, ew_hyp}, outs);
            std::cout << "WER " << aggregate << "\n";
        });
    }

    // --- eval-mcd -----------------------------------------------------------
    CommandContext cx_em{"eval-mcd", {}, {}};
    CommonArgs ca_em;
    std::string em_ref, em_hyp, em_out;
    {
        CLI::App* sub = app.add_subcommand("eval-mcd", "DTW-aligned mel cepstral distortion");
        add_common(sub, cx_em, ca_em);
        sub->add_option("--ref", em_ref, "reference cepstra (.feat)")->required();
        sub->add_option("--hyp", em_hyp, "hypothesis cepstra (.feat)")->required();
        sub->add_option("--out", em_out, "CSV report to write")->required();
        registry()["eval-mcd"] = &cx_em;
        sub->callback([&] {
            apply_threads(ca_em);
            const corpus::FeatureMatrix a = corpus::read_feature_file(em_ref);
            const corpus::FeatureMatrix b = corpus::read_feature_file(em_hyp);
            const double mcd = metrics::mcd_dtw(a, b);
            std::ofstream out(em_out, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cli: cannot write " + em_out);
            out.precision(17);
            out << "ref,hyp,mcd\n" << a.utt_id << ',' << b.utt_id << ',' << mcd << "\n";
            out.close();
            finish_outputs(cx_em, ca_em, {em_ref, em_hyp}, {em_out});
            std::cout << "MCD " << mcd << "\n";
        });
    }

    // --- eval-ndb-js --------------------------------------------------------
    CommandContext cx_en{"eval-ndb-js", {}, {}};
    CommonArgs ca_en;
    std::string en_a, en_b, en_out;
    std::uint32_t en_bins = 100, en_repeats = 10;
    double en_alpha = 0.05;
    {
        CLI::App* sub = app.add_subcommand("eval-ndb-js", "NDB / JS sample diversity");
        add_common(sub, cx_en, ca_en);
        sub->add_option("--a", en_a, "sample set A (.feat, rows = samples)")->required();
        sub->add_option("--b", en_b, "sample set B (.feat)")->required();
        sub->add_option("--out", en_out, "CSV report to write")->required();
        bind(cx_en, "metrics.k_bins", &en_bins, sub->add_option("--k-bins", en_bins));
        bind(cx_en, "metrics.alpha", &en_alpha, sub->add_option("--alpha", en_alpha));
        bind(cx_en, "metrics.repeats", &en_repeats, sub->add_option("--repeats", en_repeats));
        registry()["eval-ndb-js"] = &cx_en;
        sub->callback([&] {
            apply_threads(ca_en);
            const corpus::FeatureMatrix a = corpus::read_feature_file(en_a);
            const corpus::FeatureMatrix b = corpus::read_feature_file(en_b);
            const metrics::DiversityReport rep =
                metrics::ndb_js(a, b, en_bins, en_alpha, en_repeats, ca_en.seed);
            std::ofstream out(en_out, std::ios::binary | std::ios::trunc);
            if (!out) throw IoError("cli: cannot write " + en_out);
            out.precision(17);
            out << "repeat,ndb,js\n";
            for (std::size_t i = 0; i < rep.per_repeat.size(); ++i)
                out << i << ',' << rep.per_repeat[i].first << ',' << rep.per_repeat[i].second
                    << "\n";
            out << "MEAN," << rep.ndb << ',' << rep.js << "\n";
            out.close();
            finish_outputs(cx_en, ca_en, {en_a, en_b}, {en_out});
            char line[96];
            std::printf("%8s %8s %10s\n", "repeat", "ndb", "js");
            for (std::size_t i = 0; i < rep.per_repeat.size(); ++i)
                std::printf("%8zu %8.3f %10.5f\n", i, rep.per_repeat[i].first,
                            rep.per_repeat[i].second);
            std::snprintf(line, sizeof(line), "NDB %.3f, JS %.3f\n", rep.ndb, rep.js);
            std::cout << line;
        });
    }

    // --- bench-rtf ----------------------------------------------------------
    CommandContext cx_br{"bench-rtf", {}, {}};
    CommonArgs ca_br;
    std::string br_out_dir;
    bench::PipelineConfig br_cfg;
    std::uint32_t br_runs = 5, br_prompts = 6, br_max_new = 512;
    double br_temperature = 1.0;
    {
        CLI::App* sub = app.add_subcommand(
            "bench-rtf", "train matched generators with and without BPE and compare RTF");
        add_common(sub, cx_br, ca_br);
        sub->add_option("--out-dir", br_out_dir, "output directory")->required();
        bind(cx_br, "bench.phoneme_alphabet", &br_cfg.synth.phoneme_alphabet,
             sub->add_option("--phoneme-alphabet", br_cfg.synth.phoneme_alphabet));
        bind(cx_br, "bench.token_alphabet", &br_cfg.synth.token_alphabet,
             sub->add_option("--token-alphabet", br_cfg.synth.token_alphabet));
        bind(cx_br, "bench.runs_per_phoneme", &br_cfg.synth.runs_per_phoneme,
             sub->add_option("--runs-per-phoneme", br_cfg.synth.runs_per_phoneme));
        bind(cx_br, "bench.mean_run_length", &br_cfg.synth.mean_run_length,
             sub->add_option("--mean-run-length", br_cfg.synth.mean_run_length));
        bind(cx_br, "bench.num_utterances", &br_cfg.synth.num_utterances,
             sub->add_option("--num-utterances", br_cfg.synth.num_utterances));
        bind(cx_br, "bench.min_phonemes", &br_cfg.synth.min_phonemes,
             sub->add_option("--min-phonemes", br_cfg.synth.min_phonemes));
        bind(cx_br, "bench.max_phonemes", &br_cfg.synth.max_phonemes,
             sub->add_option("--max-phonemes", br_cfg.synth.max_phonemes));
        bind(cx_br, "bench.vocab_size", &br_cfg.bpe_vocab_target,
             sub->add_option("--vocab-size", br_cfg.bpe_vocab_target));
        bind(cx_br, "bench.dim", &br_cfg.dim, sub->add_option("--dim", br_cfg.dim));
        bind(cx_br, "bench.layers", &br_cfg.layers, sub->add_option("--layers", br_cfg.layers));
        bind(cx_br, "bench.heads", &br_cfg.heads, sub->add_option("--heads", br_cfg.heads));
        bind(cx_br, "bench.max_len", &br_cfg.max_len, sub->add_option("--max-len", br_cfg.max_len));
        bind(cx_br, "bench.epochs", &br_cfg.opt.epochs, sub->add_option("--epochs", br_cfg.opt.epochs));
        bind(cx_br, "bench.lr", &br_cfg.opt.lr, sub->add_option("--lr", br_cfg.opt.lr));
        bind(cx_br, "bench.batch_tokens", &br_cfg.opt.batch_tokens,
             sub->add_option("--batch-tokens", br_cfg.opt.batch_tokens));
        bind(cx_br, "bench.runs", &br_runs, sub->add_option("--runs", br_runs));
        bind(cx_br, "bench.prompts", &br_prompts, sub->add_option("--prompts", br_prompts));
        bind(cx_br, "bench.max_new", &br_max_new, sub->add_option("--max-new", br_max_new));
        bind(cx_br, "bench.temperature", &br_temperature,
             sub->add_option("--temperature", br_temperature));
        registry()["bench-rtf"] = &cx_br;
        sub->callback([&] {
            apply_threads(ca_br);
            fs::create_directories(br_out_dir);
            br_cfg.seed = ca_br.seed;
            br_cfg.synth.seed = ca_br.seed;
            const bench::Pipeline p = bench::build_pipeline(br_cfg);
            const bench::RtfReport rep = bench::bench_rtf(p, br_runs, br_prompts, br_max_new,
                                                          br_temperature, ca_br.seed);
            const std::string vocab_path = br_out_dir + "/vocab.vocab";
            const std::string base_ckpt = br_out_dir + "/lm_base.ckpt";
            const std::string bpe_ckpt = br_out_dir + "/lm_bpe.ckpt";
            bpe::write_vocab_file(p.vocab, vocab_path);
            lm::save_checkpoint(p.lm_base, base_ckpt);
            lm::save_checkpoint(p.lm_bpe, bpe_ckpt);

            nlohmann::json j;
            j["median_rtf_base"] = rep.median_rtf_base;
            j["median_rtf_bpe"] = rep.median_rtf_bpe;
            j["speedup"] = rep.speedup;
            j["run_rtf_base"] = rep.run_rtf_base;
            j["run_rtf_bpe"] = rep.run_rtf_bpe;
            j["final_loss_base"] = rep.final_loss_base;
            j["final_loss_bpe"] = rep.final_loss_bpe;
            j["mean_compression"] = rep.mean_compression;
            j["achieved_vocab"] = rep.achieved_vocab;
            j["train_examples_used"] = p.train_examples_used;
            const std::string report_path = br_out_dir + "/report.timing.json";
            std::ofstream out(report_path, std::ios::binary | std::ios::trunc);
            out << j.dump(2) << "\n";
            out.close();
            finish_outputs(cx_br, ca_br, {}, {vocab_path, base_ckpt, bpe_ckpt, report_path},
                           br_out_dir + "/run");
            char line[128];
            std::snprintf(line, sizeof(line),
                          "rtf_base %.4f rtf_bpe %.4f speedup %.2f (compression %.2f)\n",
                          rep.median_rtf_base, rep.median_rtf_bpe, rep.speedup,
                          rep.mean_compression);
            std::cout << line;
        });
    }

    // --- parse & run ----------------------------------------------------------
    try {
        // Config file values must be in place before CLI11 runs the callbacks,
        // so locate the subcommand and --config by hand first.
        std::string sub_name, config_path;
        for (int i = 1; i < argc; ++i) {
            const std::string a = argv[i];
            if (sub_name.empty() && !a.empty() && a[0] != '-' && registry().count(a)) sub_name = a;
            if (a == "--config" && i + 1 < argc) config_path = argv[i + 1];
            else if (a.rfind("--config=", 0) == 0) config_path = a.substr(9);
        }
        if (!config_path.empty()) {
            if (sub_name.empty())
                throw CLI::ParseError("--config requires a subcommand", 2);
            apply_config(load_config_file(config_path), *registry()[sub_name]);
        }

        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: usage: " << e.what() << "\n";
        return 2;
    } catch (const ParseError& e) {
        std::cerr << "error: parse: " << e.what() << "\n";
        return 1;
    } catch (const IoError& e) {
        std::cerr << "error: io: " << e.what() << "\n";
        return 1;
    } catch (const DomainError& e) {
        std::cerr << "error: domain: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: internal: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
