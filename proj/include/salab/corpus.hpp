#pragma once

#include <string>
#include <vector>

namespace salab {

// Byte-level token stream (vocab 256, optional BOS id 256) with a
// deterministic contiguous-tail heldout split.
struct Corpus {
    std::vector<int> tokens;
    size_t train_len = 0;
    std::string digest;
    bool has_bos = false;

    std::vector<int> train_tokens() const {
        return {tokens.begin(), tokens.begin() + train_len};
    }
    std::vector<int> heldout_tokens() const {
        return {tokens.begin() + train_len, tokens.end()};
    }
    int vocab_size() const { return has_bos ? 257 : 256; }
};

Corpus corpus_from_bytes(const std::string& bytes, double split_fraction, bool add_bos = false);
Corpus ingest_corpus(const std::string& path, double split_fraction, bool add_bos = false);

} // namespace salab
