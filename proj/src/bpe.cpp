#include "abpe/bpe.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <queue>
#include <sstream>

namespace abpe::bpe {

namespace {

void require(bool cond, const std::string& msg) {
    if (!cond) throw DomainError("abpe: " + msg);
}

constexpr char32_t kSurrogateLo = 0xD800;
constexpr char32_t kSurrogateHi = 0xDFFF;
constexpr char32_t kMaxScalar = 0x10FFFF;

void check_codepoint_range(char32_t offset, std::uint32_t alphabet) {
    require(static_cast<std::uint64_t>(offset) + alphabet <= kMaxScalar + 1ULL,
            "codepoint range overflows U+10FFFF");
    const std::uint64_t lo = offset;
    const std::uint64_t hi = static_cast<std::uint64_t>(offset) + alphabet;  // exclusive
    require(!(lo <= kSurrogateHi && hi > kSurrogateLo),
            "codepoint range collides with the surrogate block U+D800..U+DFFF");
}

std::uint32_t checked_alphabet(std::span<const corpus::TokenSequence> corp) {
    require(!corp.empty(), "corpus is empty");
    const std::uint32_t k = corp.front().alphabet_size;
    for (const auto& s : corp) {
        require(s.alphabet_size == k, "corpus mixes alphabet sizes");
        corpus::validate(s);
    }
    return k;
}

}  // namespace

void BpeVocab::validate() const {
    require(base_size >= 1, "vocab base size must be >= 1");
    for (std::size_t i = 0; i < merges.size(); ++i) {
        const std::uint32_t own = base_size + static_cast<std::uint32_t>(i);
        require(merges[i].first < own && merges[i].second < own,
                "merge " + std::to_string(i) + " references a forward id");
    }
}

std::u32string tokens_to_codepoints(const corpus::TokenSequence& seq, char32_t offset) {
    corpus::validate(seq);
    check_codepoint_range(offset, seq.alphabet_size);
    std::u32string out;
    out.reserve(seq.tokens.size());
    for (std::uint32_t t : seq.tokens) out.push_back(static_cast<char32_t>(offset + t));
    return out;
}

corpus::TokenSequence codepoints_to_tokens(std::u32string_view text, char32_t offset,
                                           std::uint32_t alphabet_size, std::string utt_id) {
    check_codepoint_range(offset, alphabet_size);
    corpus::TokenSequence seq;
    seq.utt_id = std::move(utt_id);
    seq.alphabet_size = alphabet_size;
    seq.tokens.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char32_t c = text[i];
        if (c < offset || c >= offset + alphabet_size)
            throw DomainError("abpe: codepoint U+" + [&] {
                std::ostringstream ss;
                ss << std::hex << std::uppercase << static_cast<std::uint32_t>(c);
                return ss.str();
            }() + " at position " + std::to_string(i) + " is outside the mapped range");
        seq.tokens.push_back(static_cast<std::uint32_t>(c - offset));
    }
    require(!seq.tokens.empty(), "empty codepoint string");
    return seq;
}

std::string utf8_encode(std::u32string_view text) {
    std::string out;
    out.reserve(text.size() * 3);
    for (char32_t c : text) {
        const auto v = static_cast<std::uint32_t>(c);
        require(v <= kMaxScalar && !(v >= kSurrogateLo && v <= kSurrogateHi),
                "invalid Unicode scalar value");
        if (v < 0x80) {
            out.push_back(static_cast<char>(v));
        } else if (v < 0x800) {
            out.push_back(static_cast<char>(0xC0 | (v >> 6)));
            out.push_back(static_cast<char>(0x80 | (v & 0x3F)));
        } else if (v < 0x10000) {
            out.push_back(static_cast<char>(0xE0 | (v >> 12)));
            out.push_back(static_cast<char>(0x80 | ((v >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (v & 0x3F)));
        } else {
            out.push_back(static_cast<char>(0xF0 | (v >> 18)));
            out.push_back(static_cast<char>(0x80 | ((v >> 12) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | ((v >> 6) & 0x3F)));
            out.push_back(static_cast<char>(0x80 | (v & 0x3F)));
        }
    }
    return out;
}

std::u32string utf8_decode(std::string_view bytes) {
    std::u32string out;
    std::size_t i = 0;
    auto cont = [&](std::size_t j) -> std::uint32_t {
        if (j >= bytes.size() || (static_cast<unsigned char>(bytes[j]) & 0xC0) != 0x80)
            throw ParseError("abpe: truncated or malformed UTF-8 at byte " + std::to_string(j));
        return static_cast<unsigned char>(bytes[j]) & 0x3F;
    };
    while (i < bytes.size()) {
        const auto b0 = static_cast<unsigned char>(bytes[i]);
        std::uint32_t v;
        std::size_t len;
        if (b0 < 0x80) {
            v = b0;
            len = 1;
        } else if ((b0 & 0xE0) == 0xC0) {
            v = (static_cast<std::uint32_t>(b0 & 0x1F) << 6) | cont(i + 1);
            len = 2;
            if (v < 0x80) throw ParseError("abpe: overlong UTF-8 sequence");
        } else if ((b0 & 0xF0) == 0xE0) {
            v = (static_cast<std::uint32_t>(b0 & 0x0F) << 12) | (cont(i + 1) << 6) | cont(i + 2);
            len = 3;
            if (v < 0x800 || (v >= kSurrogateLo && v <= kSurrogateHi))
                throw ParseError("abpe: overlong or surrogate UTF-8 sequence");
        } else if ((b0 & 0xF8) == 0xF0) {
            v = (static_cast<std::uint32_t>(b0 & 0x07) << 18) | (cont(i + 1) << 12) |
                (cont(i + 2) << 6) | cont(i + 3);
            len = 4;
            if (v < 0x10000 || v > kMaxScalar) throw ParseError("abpe: invalid UTF-8 scalar");
        } else {
            throw ParseError("abpe: malformed UTF-8 lead byte at " + std::to_string(i));
        }
        out.push_back(static_cast<char32_t>(v));
        i += len;
    }
    return out;
}

std::unordered_map<std::uint64_t, std::int64_t> count_pairs(
    std::span<const corpus::TokenSequence> corp) {
    std::unordered_map<std::uint64_t, std::int64_t> counts;
    const auto n = static_cast<std::int64_t>(corp.size());
#pragma omp parallel if (parallel_enabled() && n > 8)
    {
        std::unordered_map<std::uint64_t, std::int64_t> local;
#pragma omp for schedule(static) nowait
        for (std::int64_t u = 0; u < n; ++u) {
            const auto& toks = corp[u].tokens;
            for (std::size_t i = 0; i + 1 < toks.size(); ++i)
                ++local[pair_key(toks[i], toks[i + 1])];
        }
#pragma omp critical(abpe_count_pairs)
        {
            for (const auto& [k, v] : local) counts[k] += v;
        }
    }
    return counts;
}

namespace ref {
std::unordered_map<std::uint64_t, std::int64_t> count_pairs(
    std::span<const corpus::TokenSequence> corp) {
    std::unordered_map<std::uint64_t, std::int64_t> counts;
    for (const auto& s : corp)
        for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i)
            ++counts[pair_key(s.tokens[i], s.tokens[i + 1])];
    return counts;
}
}  // namespace ref

// ---------------------------------------------------------------------------
// Trainer. Utterances are kept as doubly-linked symbol lists over a flat node
// array; a lazy max-heap proposes merge candidates that are validated against
// the live pair-count map. Merging one pair updates neighbour counts in
// place, so no global recount is ever needed. Node indices are assigned once
// and never move, which makes index order the left-to-right order required
// for greedy merging.
// ---------------------------------------------------------------------------

namespace {

struct HeapEntry {
    std::int64_t count;
    std::uint32_t left, right;
    // Max-heap: highest count first, lexicographically smallest pair on ties.
    bool operator<(const HeapEntry& o) const {
        if (count != o.count) return count < o.count;
        if (left != o.left) return left > o.left;
        return right > o.right;
    }
};

}  // namespace

BpeVocab bpe_train(std::span<const corpus::TokenSequence> corp, std::uint32_t target_vocab_size,
                   std::uint32_t min_pair_freq) {
    const std::uint32_t base = checked_alphabet(corp);
    require(target_vocab_size >= base, "target vocab size " + std::to_string(target_vocab_size) +
                                           " < base alphabet " + std::to_string(base));
    const std::int64_t min_freq = std::max<std::int64_t>(1, min_pair_freq);

    BpeVocab vocab;
    vocab.base_size = base;
    if (target_vocab_size == base) return vocab;

    // Flat node storage; -1 links mark utterance boundaries.
    std::size_t total = 0;
    for (const auto& s : corp) total += s.tokens.size();
    std::vector<std::uint32_t> id(total);
    std::vector<std::int64_t> prev(total), next(total);
    std::vector<char> alive(total, 1);
    {
        std::size_t at = 0;
        for (const auto& s : corp) {
            const std::size_t len = s.tokens.size();
            for (std::size_t i = 0; i < len; ++i) {
                id[at + i] = s.tokens[i];
                prev[at + i] = (i == 0) ? -1 : static_cast<std::int64_t>(at + i - 1);
                next[at + i] = (i + 1 == len) ? -1 : static_cast<std::int64_t>(at + i + 1);
            }
            at += len;
        }
    }

    std::unordered_map<std::uint64_t, std::int64_t> counts = count_pairs(corp);
    std::unordered_map<std::uint64_t, std::vector<std::uint64_t>> positions;
    positions.reserve(counts.size() * 2);
    {
        std::size_t at = 0;
        for (const auto& s : corp) {
            for (std::size_t i = 0; i + 1 < s.tokens.size(); ++i)
                positions[pair_key(s.tokens[i], s.tokens[i + 1])].push_back(at + i);
            at += s.tokens.size();
        }
    }

    std::priority_queue<HeapEntry> heap;
    for (const auto& [k, v] : counts)
        if (v > 0)
            heap.push({v, static_cast<std::uint32_t>(k >> 32),
                       static_cast<std::uint32_t>(k & 0xFFFFFFFFu)});

    std::vector<std::uint64_t> touched;
    while (vocab.vocab_size() < target_vocab_size && !heap.empty()) {
        const HeapEntry top = heap.top();
        heap.pop();
        const std::uint64_t key = pair_key(top.left, top.right);
        const auto it = counts.find(key);
        const std::int64_t live = (it == counts.end()) ? 0 : it->second;
        if (live != top.count || live <= 0) continue;  // stale entry
        if (live < min_freq) break;

        const std::uint32_t new_id = vocab.vocab_size();
        vocab.merges.emplace_back(top.left, top.right);

        auto pos_it = positions.find(key);
        std::vector<std::uint64_t> occ =
            pos_it == positions.end() ? std::vector<std::uint64_t>{} : std::move(pos_it->second);
        if (pos_it != positions.end()) positions.erase(pos_it);
        std::sort(occ.begin(), occ.end());  // left-to-right across the whole corpus

        touched.clear();
        auto bump = [&](std::uint64_t k, std::int64_t delta) {
            counts[k] += delta;
            touched.push_back(k);
        };

        for (const std::uint64_t oi : occ) {
            const auto i = static_cast<std::size_t>(oi);
            if (!alive[i] || id[i] != top.left) continue;
            const std::int64_t j = next[i];
            if (j < 0 || !alive[j] || id[j] != top.right) continue;

            const std::int64_t p = prev[i];
            const std::int64_t n = next[j];
            bump(key, -1);
            if (p >= 0) {
                bump(pair_key(id[p], top.left), -1);
                bump(pair_key(id[p], new_id), +1);
                positions[pair_key(id[p], new_id)].push_back(static_cast<std::uint64_t>(p));
            }
            if (n >= 0) {
                bump(pair_key(top.right, id[n]), -1);
                bump(pair_key(new_id, id[n]), +1);
                positions[pair_key(new_id, id[n])].push_back(oi);
            }
            id[i] = new_id;
            alive[j] = 0;
            next[i] = n;
            if (n >= 0) prev[n] = i;
        }

        std::sort(touched.begin(), touched.end());
        touched.erase(std::unique(touched.begin(), touched.end()), touched.end());
        for (const std::uint64_t k : touched) {
            const std::int64_t c = counts[k];
            if (c > 0)
                heap.push({c, static_cast<std::uint32_t>(k >> 32),
                           static_cast<std::uint32_t>(k & 0xFFFFFFFFu)});
        }
    }
    return vocab;
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

namespace {

struct EncodeCandidate {
    std::uint32_t rank;
    std::uint32_t node;
    bool operator>(const EncodeCandidate& o) const {
        if (rank != o.rank) return rank > o.rank;
        return node > o.node;  // leftmost first within a rank
    }
};

// Heap-driven merge application. Because no merge rule can reference an id a
// later rule creates, always applying the lowest-rank candidate (leftmost on
// ties) yields exactly the same result as replaying the rules one by one.
std::vector<std::uint32_t> encode_ids(std::span<const std::uint32_t> tokens, const BpeVocab& vocab,
                                      const std::unordered_map<std::uint64_t, std::uint32_t>& rank) {
    const std::size_t n = tokens.size();
    std::vector<std::uint32_t> id(tokens.begin(), tokens.end());
    std::vector<std::int64_t> prev(n), next(n);
    std::vector<char> alive(n, 1);
    for (std::size_t i = 0; i < n; ++i) {
        prev[i] = static_cast<std::int64_t>(i) - 1;
        next[i] = (i + 1 == n) ? -1 : static_cast<std::int64_t>(i + 1);
    }

    std::priority_queue<EncodeCandidate, std::vector<EncodeCandidate>, std::greater<>> heap;
    auto propose = [&](std::int64_t left_node) {
        if (left_node < 0) return;
        const std::int64_t r = next[left_node];
        if (r < 0) return;
        const auto it = rank.find(pair_key(id[left_node], id[r]));
        if (it != rank.end())
            heap.push({it->second, static_cast<std::uint32_t>(left_node)});
    };
    for (std::size_t i = 0; i + 1 < n; ++i) propose(static_cast<std::int64_t>(i));

    while (!heap.empty()) {
        const auto [rk, ni] = heap.top();
        heap.pop();
        const std::size_t i = ni;
        if (!alive[i]) continue;
        const auto& rule = vocab.merges[rk];
        if (id[i] != rule.first) continue;
        const std::int64_t j = next[i];
        if (j < 0 || !alive[j] || id[j] != rule.second) continue;

        id[i] = vocab.base_size + rk;
        alive[j] = 0;
        next[i] = next[j];
        if (next[i] >= 0) prev[next[i]] = static_cast<std::int64_t>(i);
        propose(prev[i]);
        propose(static_cast<std::int64_t>(i));
    }

    std::vector<std::uint32_t> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
        if (alive[i]) out.push_back(id[i]);
    return out;
}

std::unordered_map<std::uint64_t, std::uint32_t> build_rank_index(const BpeVocab& vocab) {
    std::unordered_map<std::uint64_t, std::uint32_t> rank;
    rank.reserve(vocab.merges.size() * 2);
    for (std::size_t i = 0; i < vocab.merges.size(); ++i)
        rank.emplace(pair_key(vocab.merges[i].first, vocab.merges[i].second),
                     static_cast<std::uint32_t>(i));
    return rank;
}

}  // namespace

BpeSequence bpe_encode(const corpus::TokenSequence& seq, const BpeVocab& vocab) {
    vocab.validate();
    corpus::validate(seq);
    require(seq.alphabet_size == vocab.base_size,
            "sequence alphabet " + std::to_string(seq.alphabet_size) + " != vocab base " +
                std::to_string(vocab.base_size));
    const auto rank = build_rank_index(vocab);
    return {seq.utt_id, encode_ids(seq.tokens, vocab, rank)};
}

std::vector<BpeSequence> bpe_encode_corpus(std::span<const corpus::TokenSequence> corp,
                                           const BpeVocab& vocab) {
    vocab.validate();
    for (const auto& s : corp) {
        corpus::validate(s);
        require(s.alphabet_size == vocab.base_size, "corpus alphabet != vocab base");
    }
    const auto rank = build_rank_index(vocab);
    std::vector<BpeSequence> out(corp.size());
    const auto n = static_cast<std::int64_t>(corp.size());
#pragma omp parallel for schedule(dynamic, 8) if (parallel_enabled() && n > 8)
    for (std::int64_t u = 0; u < n; ++u)
        out[u] = {corp[u].utt_id, encode_ids(corp[u].tokens, vocab, rank)};
    return out;
}

corpus::TokenSequence bpe_decode(const BpeSequence& seq, const BpeVocab& vocab) {
    vocab.validate();
    require(!seq.ids.empty(), "empty BPE sequence '" + seq.utt_id + "'");
    const std::uint32_t vs = vocab.vocab_size();
    corpus::TokenSequence out;
    out.utt_id = seq.utt_id;
    out.alphabet_size = vocab.base_size;
    std::vector<std::uint32_t> stack;
    for (std::uint32_t v : seq.ids) {
        require(v < vs, "id " + std::to_string(v) + " >= vocab size " + std::to_string(vs));
        stack.push_back(v);
        while (!stack.empty()) {
            const std::uint32_t t = stack.back();
            stack.pop_back();
            if (t < vocab.base_size) {
                out.tokens.push_back(t);
            } else {
                const auto& m = vocab.merges[t - vocab.base_size];
                stack.push_back(m.second);
                stack.push_back(m.first);
            }
        }
    }
    return out;
}

CompressionStats compression_stats(std::span<const corpus::TokenSequence> corp,
                                   const BpeVocab& vocab) {
    const std::vector<BpeSequence> enc = bpe_encode_corpus(corp, vocab);
    CompressionStats st;
    st.per_utt.reserve(corp.size());
    for (std::size_t u = 0; u < corp.size(); ++u) {
        st.total_base_tokens += corp[u].tokens.size();
        st.total_bpe_ids += enc[u].ids.size();
        st.per_utt.push_back(static_cast<double>(corp[u].tokens.size()) /
                             static_cast<double>(enc[u].ids.size()));
    }
    for (double r : st.per_utt) st.mean_ratio += r;
    st.mean_ratio /= static_cast<double>(st.per_utt.size());
    return st;
}

namespace ref {

BpeSequence bpe_encode(const corpus::TokenSequence& seq, const BpeVocab& vocab) {
    vocab.validate();
    corpus::validate(seq);
    require(seq.alphabet_size == vocab.base_size, "sequence alphabet != vocab base");
    std::vector<std::uint32_t> cur(seq.tokens.begin(), seq.tokens.end());
    std::vector<std::uint32_t> nxt;
    for (std::size_t r = 0; r < vocab.merges.size(); ++r) {
        const auto [l, rgt] = vocab.merges[r];
        const std::uint32_t new_id = vocab.base_size + static_cast<std::uint32_t>(r);
        nxt.clear();
        std::size_t i = 0;
        while (i < cur.size()) {
            if (i + 1 < cur.size() && cur[i] == l && cur[i + 1] == rgt) {
                nxt.push_back(new_id);
                i += 2;
            } else {
                nxt.push_back(cur[i]);
                ++i;
            }
        }
        cur.swap(nxt);
    }
    return {seq.utt_id, std::move(cur)};
}

}  // namespace ref

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

BpeVocab read_vocab_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("abpe: cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) throw ParseError("abpe: " + path + ": empty vocab file");
    if (!line.empty() && line.back() == '\r') line.pop_back();

    BpeVocab v;
    {
        std::istringstream hdr(line);
        std::string magic, kfield, ofield;
        hdr >> magic >> kfield >> ofield;
        if (magic != "ABPEVOC1" || kfield.rfind("K=", 0) != 0 || ofield.rfind("OFFSET=", 0) != 0)
            throw ParseError("abpe: " + path + ":1: bad vocab header '" + line + "'");
        v.base_size = static_cast<std::uint32_t>(std::stoul(kfield.substr(2)));
        v.codepoint_offset = static_cast<char32_t>(std::stoul(ofield.substr(7), nullptr, 16));
    }
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::uint32_t l = 0, r = 0;
        const char* b = line.data();
        const char* e = line.data() + line.size();
        auto res1 = std::from_chars(b, e, l);
        if (res1.ec != std::errc{} || res1.ptr == e || *res1.ptr != ' ')
            throw ParseError("abpe: " + path + ":" + std::to_string(line_no) + ": bad merge line");
        auto res2 = std::from_chars(res1.ptr + 1, e, r);
        if (res2.ec != std::errc{} || res2.ptr != e)
            throw ParseError("abpe: " + path + ":" + std::to_string(line_no) + ": bad merge line");
        v.merges.emplace_back(l, r);
    }
    v.validate();
    return v;
}

void write_vocab_file(const BpeVocab& vocab, const std::string& path) {
    vocab.validate();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("abpe: cannot open " + path + " for writing");
    out << "ABPEVOC1 K=" << vocab.base_size << " OFFSET=" << std::hex << std::uppercase
        << static_cast<std::uint32_t>(vocab.codepoint_offset) << std::dec << "\n";
    for (const auto& [l, r] : vocab.merges) out << l << ' ' << r << "\n";
    out.flush();
    if (!out.good()) throw IoError("abpe: write failure on " + path);
}

std::vector<BpeSequence> read_bpe_file(const std::string& path, std::uint32_t expected_vocab) {
    auto [alphabet, rows] = corpus::read_id_file(path, 'V');
    if (expected_vocab != 0 && alphabet != expected_vocab)
        throw DomainError("abpe: " + path + ": header V=" + std::to_string(alphabet) +
                          " does not match vocab size " + std::to_string(expected_vocab));
    std::vector<BpeSequence> seqs;
    seqs.reserve(rows.size());
    for (auto& r : rows) seqs.push_back({std::move(r.utt_id), std::move(r.ids)});
    return seqs;
}

void write_bpe_file(std::span<const BpeSequence> seqs, std::uint32_t vocab_size,
                    const std::string& path) {
    std::vector<corpus::IdRecord> rows;
    rows.reserve(seqs.size());
    for (const auto& s : seqs) rows.push_back({s.utt_id, s.ids});
    corpus::write_id_file(rows, vocab_size, path, 'V');
}

void write_codepoint_file(std::span<const corpus::TokenSequence> seqs, char32_t offset,
                          const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("abpe: cannot open " + path + " for writing");
    for (const auto& s : seqs) out << utf8_encode(tokens_to_codepoints(s, offset)) << "\n";
    out.flush();
    if (!out.good()) throw IoError("abpe: write failure on " + path);
}

std::vector<corpus::TokenSequence> read_codepoint_file(const std::string& path, char32_t offset,
                                                       std::uint32_t alphabet_size) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("abpe: cannot open " + path);
    std::vector<corpus::TokenSequence> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        out.push_back(codepoints_to_tokens(utf8_decode(line), offset, alphabet_size,
                                           "line-" + std::to_string(line_no)));
    }
    return out;
}

}  // namespace abpe::bpe
