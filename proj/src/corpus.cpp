#include "salab/corpus.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "salab/digest.hpp"

namespace salab {

std::string fnv1a64_hex(const void* data, size_t n) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(fnv1a64(data, n)));
    return std::string(buf);
}

std::string fnv1a64_hex(const std::string& s) { return fnv1a64_hex(s.data(), s.size()); }

std::string file_digest_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("digest: cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    const std::string content = buffer.str();
    return fnv1a64_hex(content);
}

Corpus corpus_from_bytes(const std::string& bytes, double split_fraction, bool add_bos) {
    if (bytes.empty()) throw std::invalid_argument("corpus: empty input");
    if (!(split_fraction > 0.0 && split_fraction < 1.0))
        throw std::invalid_argument("corpus: split_fraction must be in (0, 1)");

    Corpus c;
    c.has_bos = add_bos;
    c.tokens.reserve(bytes.size() + (add_bos ? 1 : 0));
    if (add_bos) c.tokens.push_back(256);
    for (unsigned char b : bytes) c.tokens.push_back(static_cast<int>(b));
    c.train_len = static_cast<size_t>(std::floor(split_fraction * c.tokens.size()));
    if (c.train_len == 0 || c.train_len == c.tokens.size())
        throw std::invalid_argument("corpus: split leaves an empty side");
    c.digest = fnv1a64_hex(bytes);
    return c;
}

Corpus ingest_corpus(const std::string& path, double split_fraction, bool add_bos) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("corpus: cannot open " + path);
    std::stringstream buffer;
    buffer << in.rdbuf();
    return corpus_from_bytes(buffer.str(), split_fraction, add_bos);
}

} // namespace salab
