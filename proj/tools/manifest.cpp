#include "manifest.hpp"

#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "abpe/common.hpp"

namespace abpe::cli {

std::string file_sha256(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cli: cannot open " + path + " for hashing");

    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
        EVP_MD_CTX_free(ctx);
        throw std::runtime_error("cli: SHA-256 init failed");
    }
    char buf[65536];
    while (in.good()) {
        in.read(buf, sizeof(buf));
        const std::streamsize got = in.gcount();
        if (got > 0) EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(got));
    }
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);

    static const char* hex = "0123456789abcdef";
    std::string out = "sha256:";
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xF]);
    }
    return out;
}

void write_manifest(const Manifest& m, const std::string& base_path) {
    if (m.outputs.empty()) throw IoError("cli: manifest has no outputs");
    nlohmann::json j;
    j["tool"] = "abpe";
    j["version"] = kToolVersion;
    j["command"] = m.command;
    j["seed"] = m.seed;
    j["threads"] = m.threads;
    j["effective_config"] = m.effective_config;
    nlohmann::json inputs = nlohmann::json::object();
    for (const std::string& p : m.inputs)
        inputs[std::filesystem::path(p).filename().string()] = file_sha256(p);
    j["inputs"] = inputs;
    nlohmann::json outs = nlohmann::json::array();
    for (const std::string& p : m.outputs)
        outs.push_back(std::filesystem::path(p).filename().string());
    j["outputs"] = outs;

    const std::string path = base_path + ".manifest.json";
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cli: cannot write manifest " + path);
    out << j.dump(2) << "\n";
}

}  // namespace abpe::cli
