#include <cmath>
#include <stdexcept>

#include "attention_core.hpp"

namespace salab {

namespace detail {

Vec head_query(const AttnWeights& w, const Vec& x, int head, int d_head, int position, bool rope) {
    Vec q(d_head, 0.0);
    vecmat_slice(x.data(), w.w_q, head * d_head, (head + 1) * d_head, q.data());
    if (rope) rope_rotate(q.data(), d_head, position);
    return q;
}

void head_kv(const AttnWeights& w, const Vec& x, int head, int d_head, int position, bool rope,
             Vec& k_out, Vec& v_out) {
    k_out.assign(d_head, 0.0);
    v_out.assign(d_head, 0.0);
    vecmat_slice(x.data(), w.w_k, head * d_head, (head + 1) * d_head, k_out.data());
    vecmat_slice(x.data(), w.w_v, head * d_head, (head + 1) * d_head, v_out.data());
    if (rope) rope_rotate(k_out.data(), d_head, position);
}

Vec head_attend(const KvCache& cache, int layer, int head, const Vec& q, const Vec& k_cur,
                const Vec& v_cur, int position) {
    const int d_head = static_cast<int>(q.size());
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(d_head));
    Vec scores(position + 1);
    for (int s = 0; s < position; ++s) {
        const KvEntry& e = cache.entry(layer, head, s);
        if (e.k_state == RowState::deferred || e.v_state == RowState::deferred)
            throw std::runtime_error("attention: unresolved deferred cache row");
        scores[s] = dot(q.data(), e.k_row.data(), d_head) * inv_sqrt;
    }
    scores[position] = dot(q.data(), k_cur.data(), d_head) * inv_sqrt;
    softmax_inplace(scores.data(), position + 1);
    Vec out(d_head, 0.0);
    for (int s = 0; s < position; ++s)
        axpy(scores[s], cache.entry(layer, head, s).v_row.data(), out.data(), d_head);
    axpy(scores[position], v_cur.data(), out.data(), d_head);
    return out;
}

Vec project_heads(const AttnWeights& w, const Vec& concat) {
    Vec out(w.w_o.cols, 0.0);
    vecmat_slice(concat.data(), w.w_o, 0, w.w_o.cols, out.data());
    return out;
}

} // namespace detail

AttentionResult attention_step(const AttnWeights& w, const Vec& x_t, KvCache& cache, int layer,
                               int position, bool rope_enabled) {
    const int n_heads = cache.n_heads();
    const int d_head = cache.d_head();
    if (cache.size(layer, 0) != position)
        throw std::runtime_error("attention: cache gap at position " + std::to_string(position));

    AttentionResult res;
    res.per_head = Mat(n_heads, d_head);
    Vec concat(static_cast<size_t>(n_heads) * d_head, 0.0);

    for (int h = 0; h < n_heads; ++h) {
        cache.materialize_prefix(w, layer, h, position, rope_enabled);
        const Vec q = detail::head_query(w, x_t, h, d_head, position, rope_enabled);
        Vec k_cur, v_cur;
        detail::head_kv(w, x_t, h, d_head, position, rope_enabled, k_cur, v_cur);
        const Vec head_out = detail::head_attend(cache, layer, h, q, k_cur, v_cur, position);
        for (int j = 0; j < d_head; ++j) {
            res.per_head.at(h, j) = head_out[j];
            concat[static_cast<size_t>(h) * d_head + j] = head_out[j];
        }
        KvEntry e;
        e.k_row = std::move(k_cur);
        e.v_row = std::move(v_cur);
        e.position = position;
        cache.append(layer, h, std::move(e));
    }
    res.combined = detail::project_heads(w, concat);
    return res;
}

} // namespace salab
