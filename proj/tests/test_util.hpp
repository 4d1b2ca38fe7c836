#pragma once

#include <cstdio>
#include <filesystem>
#include <random>
#include <string>

#include "abpe/corpus.hpp"

namespace testutil {

/// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::mt19937_64 rng(std::random_device{}());
        path_ = std::filesystem::temp_directory_path() /
                ("abpe-" + tag + "-" + std::to_string(rng()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    std::string file(const std::string& name) const { return (path_ / name).string(); }
    const std::filesystem::path& path() const { return path_; }

private:
    std::filesystem::path path_;
};

inline abpe::corpus::TokenSequence random_tokens(abpe::Rng& rng, std::uint32_t alphabet,
                                                 std::size_t min_len, std::size_t max_len,
                                                 std::string id) {
    abpe::corpus::TokenSequence s;
    s.utt_id = std::move(id);
    s.alphabet_size = alphabet;
    const std::size_t len = min_len + rng.uniform_below(max_len - min_len + 1);
    s.tokens.reserve(len);
    for (std::size_t i = 0; i < len; ++i)
        s.tokens.push_back(static_cast<std::uint32_t>(rng.uniform_below(alphabet)));
    return s;
}

inline abpe::corpus::FeatureMatrix random_features(abpe::Rng& rng, std::size_t rows,
                                                   std::size_t cols, std::string id = "m",
                                                   double scale = 1.0) {
    abpe::corpus::FeatureMatrix m;
    m.utt_id = std::move(id);
    m.rows = rows;
    m.cols = cols;
    m.data.resize(rows * cols);
    for (auto& v : m.data) v = static_cast<float>(rng.normal() * scale);
    return m;
}

}  // namespace testutil
