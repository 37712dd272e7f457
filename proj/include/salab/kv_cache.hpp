#pragma once

#include <cstdint>
#include <vector>

#include "salab/linalg.hpp"

namespace salab {

struct AttnWeights;

enum class RowState : uint8_t {
    materialized, // projected (and, for keys, position-rotated) vector
    deferred,     // projection postponed; raw block input + position kept instead
    raw,          // block-input slice substituted verbatim, no projection
};

enum class EntryKind : uint8_t { materialized, deferred, raw_substituted };

// One cached position of one head. Keys are stored post-rotation, so a
// deferred entry must remember the position it was written at.
struct KvEntry {
    RowState k_state = RowState::materialized;
    RowState v_state = RowState::materialized;
    Vec k_row;     // d_head; empty while k_state == deferred
    Vec v_row;     // d_head; empty while v_state == deferred
    Vec embedding; // exact pre-projection attention-block input; kept while any state is deferred
    int position = 0;

    EntryKind kind() const {
        if (k_state == RowState::deferred || v_state == RowState::deferred)
            return EntryKind::deferred;
        if (k_state == RowState::raw || v_state == RowState::raw)
            return EntryKind::raw_substituted;
        return EntryKind::materialized;
    }
};

// Per-layer, per-head key/value store. Positions are contiguous from 0;
// appends must arrive in position order.
class KvCache {
  public:
    KvCache() = default;
    KvCache(int n_layers, int n_heads, int d_head);

    int n_layers() const { return n_layers_; }
    int n_heads() const { return n_heads_; }
    int d_head() const { return d_head_; }

    int size(int layer, int head) const;
    void append(int layer, int head, KvEntry entry);
    KvEntry& entry(int layer, int head, int pos);
    const KvEntry& entry(int layer, int head, int pos) const;

    // Resolve deferred rows of one head for positions [0, upto), projecting the
    // stored embeddings and rotating keys at their recorded positions. Throws
    // if a deferred row lost its embedding.
    void materialize_prefix(const AttnWeights& w, int layer, int head, int upto, bool rope_enabled);

    void clear();

  private:
    int n_layers_ = 0, n_heads_ = 0, d_head_ = 0;
    std::vector<std::vector<std::vector<KvEntry>>> slots_; // [layer][head][pos]
};

} // namespace salab
