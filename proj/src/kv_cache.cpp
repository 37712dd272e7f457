#include "salab/kv_cache.hpp"

#include <stdexcept>

#include "attention_core.hpp"

namespace salab {

KvCache::KvCache(int n_layers, int n_heads, int d_head)
    : n_layers_(n_layers), n_heads_(n_heads), d_head_(d_head),
      slots_(n_layers, std::vector<std::vector<KvEntry>>(n_heads)) {}

int KvCache::size(int layer, int head) const {
    return static_cast<int>(slots_[layer][head].size());
}

void KvCache::append(int layer, int head, KvEntry entry) {
    auto& rows = slots_[layer][head];
    if (entry.position != static_cast<int>(rows.size()))
        throw std::runtime_error("kv cache: non-contiguous append");
    rows.push_back(std::move(entry));
}

KvEntry& KvCache::entry(int layer, int head, int pos) {
    auto& rows = slots_[layer][head];
    if (pos < 0 || pos >= static_cast<int>(rows.size()))
        throw std::runtime_error("kv cache: missing position");
    return rows[pos];
}

const KvEntry& KvCache::entry(int layer, int head, int pos) const {
    const auto& rows = slots_[layer][head];
    if (pos < 0 || pos >= static_cast<int>(rows.size()))
        throw std::runtime_error("kv cache: missing position");
    return rows[pos];
}

void KvCache::materialize_prefix(const AttnWeights& w, int layer, int head, int upto,
                                 bool rope_enabled) {
    auto& rows = slots_[layer][head];
    if (upto > static_cast<int>(rows.size()))
        throw std::runtime_error("kv cache: prefix exceeds stored positions");
    for (int pos = 0; pos < upto; ++pos) {
        KvEntry& e = rows[pos];
        if (e.k_state != RowState::deferred && e.v_state != RowState::deferred) continue;
        if (e.embedding.empty())
            throw std::runtime_error("kv cache: deferred row without stored embedding");
        Vec k, v;
        detail::head_kv(w, e.embedding, head, d_head_, e.position, rope_enabled, k, v);
        if (e.k_state == RowState::deferred) {
            e.k_row = std::move(k);
            e.k_state = RowState::materialized;
        }
        if (e.v_state == RowState::deferred) {
            e.v_row = std::move(v);
            e.v_state = RowState::materialized;
        }
        e.embedding.clear();
        e.embedding.shrink_to_fit();
    }
}

void KvCache::clear() {
    for (auto& layer : slots_)
        for (auto& head : layer) head.clear();
}

} // namespace salab
