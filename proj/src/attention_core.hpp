#pragma once

// Per-head attention primitives shared by the dense step, the masked sparse
// step, and deferred-row materialization. Keeping one code path is what makes
// "lazy" cache entries resolve to bit-identical rows.

#include "salab/model.hpp"

namespace salab::detail {

// Head slice of x . W_q, rotated at `position` when rope is enabled.
Vec head_query(const AttnWeights& w, const Vec& x, int head, int d_head, int position, bool rope);

// Head slices of x . W_k (rotated) and x . W_v.
void head_kv(const AttnWeights& w, const Vec& x, int head, int d_head, int position, bool rope,
             Vec& k_out, Vec& v_out);

// Causal attention of one head over cache rows [0, position) plus the current
// token's own k/v. Cache rows must be materialized.
Vec head_attend(const KvCache& cache, int layer, int head, const Vec& q, const Vec& k_cur,
                const Vec& v_cur, int position);

// concat(head slots) . W_o; inactive slots are zeros in `concat`.
Vec project_heads(const AttnWeights& w, const Vec& concat);

} // namespace salab::detail
