#include "abpe/corpus.hpp"

#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace abpe::corpus {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError("corpus: " + msg);
}

// Little-endian scalar I/O. The on-disk formats are LE regardless of host.
template <typename T>
void put_le(std::string& out, T v) {
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T get_le(const std::string& in, std::size_t& off, const std::string& path) {
    if (off + sizeof(T) > in.size())
        throw ParseError("corpus: truncated file: " + path);
    T v;
    std::memcpy(&v, in.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

std::string read_all(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    if (!in.good() && !in.eof()) throw IoError("corpus: read failure on " + path);
    return std::move(ss).str();
}

void write_all(const std::string& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("corpus: cannot open " + path + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out.good()) throw IoError("corpus: write failure on " + path);
}

std::uint32_t parse_u32_field(std::string_view field, const std::string& path, std::size_t line_no) {
    std::uint32_t v = 0;
    const char* b = field.data();
    const char* e = field.data() + field.size();
    auto [ptr, ec] = std::from_chars(b, e, v);
    if (ec != std::errc{} || ptr != e)
        throw ParseError("corpus: " + path + ":" + std::to_string(line_no) +
                         ": non-integer field '" + std::string(field) + "'");
    return v;
}

}  // namespace

void SynthConfig::validate() const {
    require(phoneme_alphabet >= 2, "synth: phoneme_alphabet must be >= 2");
    require(token_alphabet >= 2, "synth: token_alphabet must be >= 2");
    require(runs_per_phoneme >= 1, "synth: runs_per_phoneme must be >= 1");
    require(mean_run_length >= 1.0, "synth: mean_run_length must be >= 1");
    require(num_utterances >= 1, "synth: num_utterances must be >= 1");
    require(min_phonemes >= 1, "synth: min_phonemes must be >= 1");
    require(min_phonemes <= max_phonemes, "synth: min_phonemes must be <= max_phonemes");
}

void validate(const FeatureMatrix& m) {
    require(m.rows >= 1 && m.cols >= 1, "feature matrix must have T >= 1 and D >= 1");
    require(m.data.size() == m.rows * m.cols, "feature matrix payload size mismatch");
    require(m.frame_shift_ms > 0.0f && std::isfinite(m.frame_shift_ms),
            "frame_shift_ms must be a positive finite real");
    for (float v : m.data)
        require(std::isfinite(v), "feature matrix contains a non-finite value");
}

void validate(const TokenSequence& s) {
    require(!s.tokens.empty(), "token sequence '" + s.utt_id + "' is empty");
    for (std::uint32_t t : s.tokens)
        require(t < s.alphabet_size, "token " + std::to_string(t) + " >= alphabet size " +
                                         std::to_string(s.alphabet_size) + " in '" + s.utt_id + "'");
}

void validate(const SymbolSequence& s) {
    require(!s.symbols.empty(), "symbol sequence '" + s.utt_id + "' is empty");
    for (std::uint32_t t : s.symbols)
        require(t < s.alphabet_size, "symbol " + std::to_string(t) + " >= alphabet size " +
                                         std::to_string(s.alphabet_size) + " in '" + s.utt_id + "'");
}

std::pair<std::uint32_t, std::vector<IdRecord>> read_id_file(const std::string& path, char kind) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("corpus: cannot open " + path);

    std::string line;
    std::size_t line_no = 0;

    if (!std::getline(in, line)) throw ParseError("corpus: " + path + ": empty file");
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.size() < 3 || line[0] != kind || line[1] != '=')
        throw ParseError("corpus: " + path + ":1: expected header '" + std::string(1, kind) +
                         "=<uint>', got '" + line + "'");
    const std::uint32_t alphabet = parse_u32_field({line.data() + 2, line.size() - 2}, path, 1);
    if (alphabet == 0) throw ParseError("corpus: " + path + ":1: alphabet size must be positive");

    std::vector<IdRecord> rows;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError("corpus: " + path + ":" + std::to_string(line_no) +
                             ": missing tab separator");
        IdRecord rec;
        rec.utt_id = line.substr(0, tab);
        std::size_t pos = tab + 1;
        while (pos < line.size()) {
            std::size_t end = line.find(' ', pos);
            if (end == std::string::npos) end = line.size();
            const std::uint32_t v =
                parse_u32_field({line.data() + pos, end - pos}, path, line_no);
            if (v >= alphabet)
                throw DomainError("corpus: " + path + ":" + std::to_string(line_no) + ": id " +
                                  std::to_string(v) + " >= alphabet size " +
                                  std::to_string(alphabet));
            rec.ids.push_back(v);
            pos = end + 1;
        }
        if (rec.ids.empty())
            throw ParseError("corpus: " + path + ":" + std::to_string(line_no) +
                             ": no ids on line");
        rows.push_back(std::move(rec));
    }
    return {alphabet, std::move(rows)};
}

void write_id_file(std::span<const IdRecord> rows, std::uint32_t alphabet, const std::string& path,
                   char kind) {
    require(!rows.empty(), "nothing to serialize to " + path);
    require(alphabet > 0, "alphabet size must be positive");
    std::string out;
    out += kind;
    out += '=';
    out += std::to_string(alphabet);
    out += '\n';
    for (const IdRecord& r : rows) {
        require(r.utt_id.find('\t') == std::string::npos &&
                    r.utt_id.find('\n') == std::string::npos,
                "utt_id '" + r.utt_id + "' contains a separator character");
        require(!r.ids.empty(), "sequence '" + r.utt_id + "' is empty");
        out += r.utt_id;
        out += '\t';
        for (std::size_t i = 0; i < r.ids.size(); ++i) {
            require(r.ids[i] < alphabet, "id out of range in '" + r.utt_id + "'");
            if (i) out += ' ';
            out += std::to_string(r.ids[i]);
        }
        out += '\n';
    }
    write_all(path, out);
}

std::vector<TokenSequence> read_token_file(const std::string& path) {
    auto [alphabet, rows] = read_id_file(path, 'K');
    std::vector<TokenSequence> seqs;
    seqs.reserve(rows.size());
    for (IdRecord& r : rows)
        seqs.push_back({std::move(r.utt_id), std::move(r.ids), alphabet});
    return seqs;
}

void write_token_file(std::span<const TokenSequence> seqs, const std::string& path) {
    require(!seqs.empty(), "nothing to serialize to " + path);
    const std::uint32_t alphabet = seqs.front().alphabet_size;
    std::vector<IdRecord> rows;
    rows.reserve(seqs.size());
    for (const TokenSequence& s : seqs) {
        require(s.alphabet_size == alphabet, "mixed alphabet sizes in token file " + path);
        rows.push_back({s.utt_id, s.tokens});
    }
    write_id_file(rows, alphabet, path, 'K');
}

std::vector<SymbolSequence> read_symbol_file(const std::string& path) {
    auto [alphabet, rows] = read_id_file(path, 'P');
    std::vector<SymbolSequence> seqs;
    seqs.reserve(rows.size());
    for (IdRecord& r : rows)
        seqs.push_back({std::move(r.utt_id), std::move(r.ids), alphabet});
    return seqs;
}

void write_symbol_file(std::span<const SymbolSequence> seqs, const std::string& path) {
    require(!seqs.empty(), "nothing to serialize to " + path);
    const std::uint32_t alphabet = seqs.front().alphabet_size;
    std::vector<IdRecord> rows;
    rows.reserve(seqs.size());
    for (const SymbolSequence& s : seqs) {
        require(s.alphabet_size == alphabet, "mixed alphabet sizes in symbol file " + path);
        rows.push_back({s.utt_id, s.symbols});
    }
    write_id_file(rows, alphabet, path, 'P');
}

static constexpr char kFeatureMagic[8] = {'A', 'B', 'P', 'E', 'F', 'T', '0', '1'};

FeatureMatrix read_feature_file(const std::string& path) {
    const std::string bytes = read_all(path);
    std::size_t off = 0;
    if (bytes.size() < 8 || std::memcmp(bytes.data(), kFeatureMagic, 8) != 0)
        throw ParseError("corpus: " + path + ": bad magic, not a feature file");
    off = 8;

    FeatureMatrix m;
    const std::uint32_t rows = get_le<std::uint32_t>(bytes, off, path);
    const std::uint32_t cols = get_le<std::uint32_t>(bytes, off, path);
    m.frame_shift_ms = get_le<float>(bytes, off, path);
    m.rows = rows;
    m.cols = cols;

    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    if (off + count * sizeof(float) > bytes.size())
        throw ParseError("corpus: " + path + ": truncated payload (header says " +
                         std::to_string(rows) + "x" + std::to_string(cols) + ")");
    m.data.resize(count);
    std::memcpy(m.data.data(), bytes.data() + off, count * sizeof(float));
    off += count * sizeof(float);

    const std::uint16_t id_len = get_le<std::uint16_t>(bytes, off, path);
    if (off + id_len > bytes.size())
        throw ParseError("corpus: " + path + ": truncated utt_id");
    m.utt_id.assign(bytes.data() + off, id_len);
    off += id_len;
    if (off != bytes.size())
        throw ParseError("corpus: " + path + ": trailing bytes after payload");

    validate(m);
    return m;
}

void write_feature_file(const FeatureMatrix& m, const std::string& path) {
    validate(m);
    if (m.utt_id.size() > 0xFFFF) throw DomainError("corpus: utt_id longer than 65535 bytes");
    std::string out;
    out.append(kFeatureMagic, 8);
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.cols));
    put_le<float>(out, m.frame_shift_ms);
    out.append(reinterpret_cast<const char*>(m.data.data()), m.data.size() * sizeof(float));
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(m.utt_id.size()));
    out.append(m.utt_id);
    write_all(path, out);
}

SynthCorpus synth_corpus(const SynthConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);

    // Motif table: phoneme p owns tokens motifs[p*runs .. p*runs+runs).
    std::vector<std::uint32_t> motifs(static_cast<std::size_t>(cfg.phoneme_alphabet) *
                                      cfg.runs_per_phoneme);
    for (auto& m : motifs)
        m = static_cast<std::uint32_t>(rng.uniform_below(cfg.token_alphabet));

    SynthCorpus out;
    out.phonemes.reserve(cfg.num_utterances);
    out.tokens.reserve(cfg.num_utterances);

    char id_buf[32];
    for (std::uint32_t u = 0; u < cfg.num_utterances; ++u) {
        const std::uint32_t span = cfg.max_phonemes - cfg.min_phonemes + 1;
        const std::uint32_t len =
            cfg.min_phonemes + static_cast<std::uint32_t>(rng.uniform_below(span));

        SymbolSequence xs;
        TokenSequence ts;
        std::snprintf(id_buf, sizeof(id_buf), "synth-%06u", u);
        xs.utt_id = id_buf;
        ts.utt_id = id_buf;
        xs.alphabet_size = cfg.phoneme_alphabet;
        ts.alphabet_size = cfg.token_alphabet;
        xs.symbols.reserve(len);

        for (std::uint32_t i = 0; i < len; ++i) {
            const auto p = static_cast<std::uint32_t>(rng.uniform_below(cfg.phoneme_alphabet));
            xs.symbols.push_back(p);
            const auto variant = static_cast<std::uint32_t>(
                cfg.runs_per_phoneme == 1 ? 0 : rng.uniform_below(cfg.runs_per_phoneme));
            const std::uint32_t motif = motifs[static_cast<std::size_t>(p) * cfg.runs_per_phoneme +
                                               variant];
            const std::uint32_t run = rng.geometric(cfg.mean_run_length);
            ts.tokens.insert(ts.tokens.end(), run, motif);
        }
        out.phonemes.push_back(std::move(xs));
        out.tokens.push_back(std::move(ts));
    }
    return out;
}

}  // namespace abpe::corpus
