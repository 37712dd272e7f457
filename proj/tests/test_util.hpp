#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here
// re-derive expected values through separate code paths (whole-sequence
// attention, per-neuron summation, event-merged grid scans) and must not call
// into the implementation routines they are checking.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "salab/calibrate.hpp"
#include "salab/model.hpp"
#include "salab/rng.hpp"
#include "salab/train_toy.hpp"

namespace salab::test {

inline ModelConfig tiny_config(Activation act = Activation::silu, bool rope = true) {
    ModelConfig c;
    c.n_layers = 2;
    c.d_model = 32;
    c.n_heads = 4;
    c.d_head = 8;
    c.d_hidden = 64;
    c.vocab_size = 256;
    c.activation = act;
    c.rope_enabled = rope;
    c.max_seq_len = 32;
    return c;
}

inline Checkpoint tiny_ckpt(uint64_t seed = 1, Activation act = Activation::silu,
                            bool rope = true) {
    return init_checkpoint(tiny_config(act, rope), seed);
}

inline Vec random_vec(int n, Rng& rng, double scale = 1.0) {
    Vec v(n);
    for (double& x : v) x = rng.normal(0.0, scale);
    return v;
}

inline Mat random_mat(int r, int c, Rng& rng, double scale = 1.0) {
    Mat m(r, c);
    for (double& x : m.data) x = rng.normal(0.0, scale);
    return m;
}

inline MlpWeights random_mlp(int d_model, int d_hidden, uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    MlpWeights w;
    w.w_in = random_mat(d_hidden, d_model, rng, scale);
    w.v_in = random_mat(d_hidden, d_model, rng, scale);
    w.w_out = random_mat(d_model, d_hidden, rng, scale);
    w.recompute_col_norms();
    return w;
}

inline AttnWeights random_attn(int d_model, uint64_t seed, double scale = 0.3) {
    Rng rng(seed);
    AttnWeights w;
    w.w_q = random_mat(d_model, d_model, rng, scale);
    w.w_k = random_mat(d_model, d_model, rng, scale);
    w.w_v = random_mat(d_model, d_model, rng, scale);
    w.w_o = random_mat(d_model, d_model, rng, scale);
    return w;
}

inline double max_abs_diff(const Vec& a, const Vec& b) {
    double m = 0.0;
    for (size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

// Whole-sequence batched causal attention, computed non-incrementally.
inline Mat oracle_full_attention(const AttnWeights& w, const std::vector<Vec>& xs, int n_heads,
                                 int d_head, bool rope) {
    const int T = static_cast<int>(xs.size());
    const int d = n_heads * d_head;
    Mat q(T, d), k(T, d), v(T, d);
    for (int t = 0; t < T; ++t) {
        for (int j = 0; j < d; ++j) {
            double qa = 0.0, ka = 0.0, va = 0.0;
            for (int i = 0; i < d; ++i) {
                qa += xs[t][i] * w.w_q.at(i, j);
                ka += xs[t][i] * w.w_k.at(i, j);
                va += xs[t][i] * w.w_v.at(i, j);
            }
            q.at(t, j) = qa;
            k.at(t, j) = ka;
            v.at(t, j) = va;
        }
        if (rope)
            for (int h = 0; h < n_heads; ++h) {
                rope_rotate(q.row(t) + h * d_head, d_head, t);
                rope_rotate(k.row(t) + h * d_head, d_head, t);
            }
    }
    Mat out(T, d);
    for (int h = 0; h < n_heads; ++h) {
        for (int t = 0; t < T; ++t) {
            std::vector<double> scores(t + 1);
            for (int s = 0; s <= t; ++s) {
                double acc = 0.0;
                for (int j = 0; j < d_head; ++j)
                    acc += q.at(t, h * d_head + j) * k.at(s, h * d_head + j);
                scores[s] = acc / std::sqrt(static_cast<double>(d_head));
            }
            double mx = scores[0];
            for (double sc : scores) mx = std::max(mx, sc);
            double sum = 0.0;
            for (double& sc : scores) {
                sc = std::exp(sc - mx);
                sum += sc;
            }
            for (int s = 0; s <= t; ++s) {
                const double p = scores[s] / sum;
                for (int j = 0; j < d_head; ++j)
                    out.at(t, h * d_head + j) += p * v.at(s, h * d_head + j);
            }
        }
    }
    Mat combined(T, d);
    for (int t = 0; t < T; ++t)
        for (int j = 0; j < d; ++j) {
            double acc = 0.0;
            for (int i = 0; i < d; ++i) acc += out.at(t, i) * w.w_o.at(i, j);
            combined.at(t, j) = acc;
        }
    return combined;
}

// Post-norm block inputs for feeding attention oracles directly.
inline std::vector<Vec> random_inputs(int T, int d, uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    std::vector<Vec> xs;
    for (int t = 0; t < T; ++t) xs.push_back(random_vec(d, rng, scale));
    return xs;
}

// ---- grid-scan threshold oracle (independent of the search implementation) ----

// Per-record tail curve rebuilt from public per-neuron / per-head primitives.
struct OracleRecordCurve {
    Vec mags;    // ascending
    Vec cett_at; // size units+1
};

inline OracleRecordCurve oracle_mlp_curve(const MlpWeights& w, const Vec& y, Activation kind) {
    OracleRecordCurve rc;
    const Vec mags = neuron_magnitudes(w, y, kind);
    const int dh = static_cast<int>(mags.size());
    const Vec full = mlp_forward(w, y, kind);
    const double denom = norm2(full);
    std::vector<int> order(dh);
    for (int i = 0; i < dh; ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return mags[a] < mags[b]; });
    rc.mags.resize(dh);
    rc.cett_at.assign(dh + 1, 0.0);
    Vec run(full.size(), 0.0);
    for (int j = 0; j < dh; ++j) {
        rc.mags[j] = mags[order[j]];
        const Vec n = neuron_output(w, y, order[j], kind);
        for (size_t r = 0; r < run.size(); ++r) run[r] += n[r];
        rc.cett_at[j + 1] = norm2(run) / denom;
    }
    return rc;
}

// Largest observed-magnitude grid value whose mean CETT stays within target.
// `strict_below`: drop rule m < eps (mlp); otherwise m <= eps (attention).
inline double oracle_grid_threshold(const std::vector<OracleRecordCurve>& records, double target,
                                    bool strict_below = true) {
    struct Event {
        double mag;
        double delta;
    };
    std::vector<Event> events;
    for (const auto& rc : records)
        for (size_t j = 0; j < rc.mags.size(); ++j)
            events.push_back({rc.mags[j], rc.cett_at[j + 1] - rc.cett_at[j]});
    std::sort(events.begin(), events.end(),
              [](const Event& a, const Event& b) { return a.mag < b.mag; });
    const double n = static_cast<double>(records.size());
    double best = 0.0;
    double sum = 0.0;
    size_t i = 0;
    while (i < events.size()) {
        const double u = events[i].mag;
        if (strict_below) {
            // counts for eps = u reflect m < u: evaluate before applying u
            if (sum / n <= target) best = u;
            while (i < events.size() && events[i].mag == u) sum += events[i++].delta;
        } else {
            while (i < events.size() && events[i].mag == u) sum += events[i++].delta;
            if (sum / n <= target) best = u;
        }
    }
    return best;
}

// Adjacent grid values around eps over the pooled observed magnitudes.
inline std::pair<double, double> grid_neighbors(const std::vector<OracleRecordCurve>& records,
                                                double eps) {
    std::vector<double> grid;
    for (const auto& rc : records) grid.insert(grid.end(), rc.mags.begin(), rc.mags.end());
    std::sort(grid.begin(), grid.end());
    grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
    auto it = std::lower_bound(grid.begin(), grid.end(), eps);
    double lo = it == grid.begin() ? 0.0 : *(it - 1);
    double hi = it == grid.end() ? grid.back() : *it;
    if (it != grid.end() && *it == eps) hi = (it + 1) == grid.end() ? *it : *(it + 1);
    return {lo, hi};
}

inline std::string test_tmp_dir() {
#ifdef SALAB_TEST_TMP
    return SALAB_TEST_TMP;
#else
    return ".";
#endif
}

inline std::string data_dir() {
#ifdef SALAB_DATA_DIR
    return SALAB_DATA_DIR;
#else
    return "data";
#endif
}

} // namespace salab::test
