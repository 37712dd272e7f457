#include <doctest.h>

#include <cstring>

#include "salab/calibrate.hpp"
#include "salab/perplexity.hpp"
#include "salab/sparse_exec.hpp"
#include "test_util.hpp"

using namespace salab;
using namespace salab::test;

namespace {

bool bits_equal(const Vec& a, const Vec& b) {
    return a.size() == b.size() &&
           std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

std::vector<int> random_tokens(int n, uint64_t seed, int vocab) {
    Rng rng(seed);
    std::vector<int> toks(n);
    for (int& t : toks) t = rng.uniform_int(vocab);
    return toks;
}

// scripted mask schedule: pseudo-random active sets per (layer, position)
SelectionStrategy scripted_masks(uint64_t seed, int n_heads, double keep_prob) {
    auto fn = [seed, n_heads, keep_prob](int layer, int position, const Vec&) {
        Rng rng(seed ^ (static_cast<uint64_t>(layer) << 32) ^ static_cast<uint64_t>(position));
        std::vector<int> active;
        for (int h = 0; h < n_heads; ++h)
            if (rng.uniform() < keep_prob) active.push_back(h);
        if (active.empty()) active.push_back(static_cast<int>(rng.uniform_int(n_heads)));
        return active;
    };
    return SelectionStrategy::with_predictor(fn, PredictorWiring::serial);
}

} // namespace

TEST_CASE("select_topk") {
    CHECK(select_topk({0.1, 2.0, -1.0}, 1) == std::vector<int>{1});
    CHECK(select_topk({0.1, 2.0, -1.0}, 0).empty());
    CHECK(select_topk({0.1, 2.0, -1.0}, 3) == std::vector<int>{0, 1, 2});
    CHECK(select_topk({5.0, 5.0, 1.0}, 1) == std::vector<int>{0}); // tie to lower index
    CHECK_THROWS_AS(select_topk({1.0}, 2), std::invalid_argument);
    CHECK_THROWS_AS(select_topk({1.0}, -1), std::invalid_argument);

    SUBCASE("matches the full-sort oracle on a large vector") {
        Rng rng(17);
        Vec scores(1000);
        for (double& s : scores) s = rng.normal();
        const std::vector<int> got = select_topk(scores, 317);
        std::vector<int> idx(1000);
        for (int i = 0; i < 1000; ++i) idx[i] = i;
        std::stable_sort(idx.begin(), idx.end(),
                         [&](int a, int b) { return scores[a] > scores[b]; });
        std::vector<int> expect(idx.begin(), idx.begin() + 317);
        std::sort(expect.begin(), expect.end());
        CHECK(got == expect);
        CHECK(select_topk(scores, 317) == got); // deterministic
    }
}

TEST_CASE("select_heads_threshold boundary semantics") {
    CHECK(select_heads_threshold({3.0, 1.0, 2.0}, 1.5) == std::vector<uint8_t>{1, 0, 1});
    CHECK(select_heads_threshold({3.0, 1.0, 2.0}, 0.0) == std::vector<uint8_t>{1, 1, 1});
    // a norm exactly at the threshold is masked off (strict >)
    CHECK(select_heads_threshold({2.0, 3.0}, 2.0) == std::vector<uint8_t>{0, 1});
    CHECK_THROWS_AS(select_heads_threshold({1.0}, -0.1), std::invalid_argument);
}

TEST_CASE("mlp_sparse_forward") {
    MlpWeights w = random_mlp(16, 48, 5);
    Rng rng(6);
    const Vec y = random_vec(16, rng);

    SUBCASE("threshold zero is bit-identical to the dense block") {
        const Vec dense = mlp_forward(w, y, Activation::silu);
        const SparseMlpResult r =
            mlp_sparse_forward(w, y, SelectionStrategy::with_threshold({0.0}), Activation::silu);
        CHECK(bits_equal(r.output, dense));
        CHECK(r.active.size() == 48);
    }
    SUBCASE("full topk is bit-identical to the dense block") {
        const Vec dense = mlp_forward(w, y, Activation::silu);
        const SparseMlpResult r =
            mlp_sparse_forward(w, y, SelectionStrategy::with_topk(48), Activation::silu);
        CHECK(bits_equal(r.output, dense));
    }
    SUBCASE("hand case drops the small neuron") {
        MlpWeights hand;
        hand.w_in = Mat(2, 2);
        hand.w_in.at(0, 0) = 6.0;
        hand.w_in.at(1, 0) = 8.0;
        hand.v_in = Mat(2, 2);
        hand.v_in.at(0, 0) = 1.0;
        hand.v_in.at(1, 0) = 1.0;
        hand.w_out = Mat(2, 2);
        hand.w_out.at(0, 0) = 1.0;
        hand.w_out.at(1, 1) = 1.0;
        hand.recompute_col_norms();
        const Vec yy{1.0, 0.0};
        const SparseMlpResult r =
            mlp_sparse_forward(hand, yy, SelectionStrategy::with_threshold({7.0}), Activation::relu);
        CHECK(r.active == std::vector<int>{1});
        const Vec n1 = neuron_output(hand, yy, 1, Activation::relu);
        CHECK(max_abs_diff(r.output, n1) == 0.0);
    }
    SUBCASE("output deficit reproduces the truncation ratio") {
        const Vec dense = mlp_forward(w, y, Activation::silu);
        const Vec mags = neuron_magnitudes(w, y, Activation::silu);
        Vec sorted = mags;
        std::sort(sorted.begin(), sorted.end());
        const double eps = sorted[sorted.size() / 2];
        const SparseMlpResult r =
            mlp_sparse_forward(w, y, SelectionStrategy::with_threshold({eps}), Activation::silu);
        Vec deficit(dense.size());
        for (size_t i = 0; i < dense.size(); ++i) deficit[i] = dense[i] - r.output[i];
        LayerRecord rec;
        rec.neuron_magnitudes = mags;
        const double direct = cett_mlp(rec, w, y, eps, Activation::silu);
        CHECK(std::fabs(norm2(deficit) / norm2(dense) - direct) <= 1e-9);
    }
    SUBCASE("k out of range") {
        CHECK_THROWS_AS(
            mlp_sparse_forward(w, y, SelectionStrategy::with_topk(49), Activation::silu),
            std::invalid_argument);
    }
    SUBCASE("predictor path computes only the chosen neurons") {
        std::vector<int> chosen{1, 5, 7};
        SelectionStrategy s =
            SelectionStrategy::with_predictor([](int, int, const Vec&) { return std::vector<int>{}; },
                  PredictorWiring::serial);
        const SparseMlpResult r =
            mlp_sparse_forward(w, y, s, Activation::silu, 0, &chosen);
        Vec expect(16, 0.0);
        for (int i : chosen) {
            const Vec n = neuron_output(w, y, i, Activation::silu);
            for (int j = 0; j < 16; ++j) expect[j] += n[j];
        }
        CHECK(max_abs_diff(r.output, expect) <= 1e-12);
        CHECK(r.active == chosen);
    }
}

TEST_CASE("attention_sparse_step dense equivalence and cache states") {
    const int d = 16, heads = 4, hd = 4;
    AttnWeights w = random_attn(d, 7);
    const std::vector<Vec> xs = random_inputs(5, d, 71);

    SUBCASE("all-ones mask matches the dense step bit for bit") {
        for (auto mode : {SkipMode::none, SkipMode::skip_kv, SkipMode::skip_v}) {
            KvCache dense_cache(1, heads, hd);
            KvCache sparse_cache(1, heads, hd);
            SkipPolicy policy{mode, Substitution::defer_lazy, std::nullopt};
            const std::vector<uint8_t> ones(heads, 1);
            for (int t = 0; t < 5; ++t) {
                const AttentionResult dr = attention_step(w, xs[t], dense_cache, 0, t, true);
                const Vec sr = attention_sparse_step(w, xs[t], ones, sparse_cache, policy, 0, t, true);
                CHECK(bits_equal(dr.combined, sr));
            }
            for (int h = 0; h < heads; ++h)
                for (int t = 0; t < 5; ++t)
                    CHECK(sparse_cache.entry(0, h, t).kind() == EntryKind::materialized);
        }
    }
    SUBCASE("deferred rows materialize to the dense rows exactly") {
        KvCache dense_cache(1, heads, hd);
        KvCache lazy_cache(1, heads, hd);
        SkipPolicy lazy{SkipMode::skip_kv, Substitution::defer_lazy, std::nullopt};
        // head 2 inactive at t=0,1; everything active at t=2
        std::vector<uint8_t> some(heads, 1);
        some[2] = 0;
        const std::vector<uint8_t> ones(heads, 1);
        attention_step(w, xs[0], dense_cache, 0, 0, true);
        attention_step(w, xs[1], dense_cache, 0, 1, true);
        attention_step(w, xs[2], dense_cache, 0, 2, true);
        attention_sparse_step(w, xs[0], some, lazy_cache, lazy, 0, 0, true);
        attention_sparse_step(w, xs[1], some, lazy_cache, lazy, 0, 1, true);
        CHECK(lazy_cache.entry(0, 2, 0).kind() == EntryKind::deferred);
        CHECK(lazy_cache.entry(0, 2, 1).kind() == EntryKind::deferred);
        attention_sparse_step(w, xs[2], ones, lazy_cache, lazy, 0, 2, true);
        for (int t = 0; t <= 1; ++t) {
            const KvEntry& lazy_e = lazy_cache.entry(0, 2, t);
            const KvEntry& dense_e = dense_cache.entry(0, 2, t);
            CHECK(lazy_e.kind() == EntryKind::materialized);
            CHECK(max_abs_diff(lazy_e.k_row, dense_e.k_row) <= 1e-12);
            CHECK(max_abs_diff(lazy_e.v_row, dense_e.v_row) <= 1e-12);
        }
    }
    SUBCASE("identity value projection makes raw substitution exact") {
        AttnWeights wi = random_attn(d, 8);
        wi.w_v = Mat(d, d);
        for (int i = 0; i < d; ++i) wi.w_v.at(i, i) = 1.0;
        KvCache dense_cache(1, heads, hd);
        KvCache raw_cache(1, heads, hd);
        SkipPolicy skip_v{SkipMode::skip_v, Substitution::raw_substitute, std::nullopt};
        std::vector<uint8_t> none_active(heads, 0);
        const std::vector<uint8_t> ones(heads, 1);
        attention_step(wi, xs[0], dense_cache, 0, 0, true);
        attention_sparse_step(wi, xs[0], none_active, raw_cache, skip_v, 0, 0, true);
        for (int h = 0; h < heads; ++h) {
            CHECK(max_abs_diff(raw_cache.entry(0, h, 0).v_row, dense_cache.entry(0, h, 0).v_row) <=
                  1e-12);
            // k row is the true projection: only v was skipped
            CHECK(max_abs_diff(raw_cache.entry(0, h, 0).k_row, dense_cache.entry(0, h, 0).k_row) <=
                  1e-12);
        }
        // with all heads active afterwards the outputs agree with dense
        const AttentionResult dr = attention_step(wi, xs[1], dense_cache, 0, 1, true);
        const Vec sr = attention_sparse_step(wi, xs[1], ones, raw_cache, skip_v, 0, 1, true);
        CHECK(max_abs_diff(dr.combined, sr) <= 1e-12);
    }
    SUBCASE("raw substitution touches only the skipped rows") {
        for (auto [mode, k_raw, v_raw] :
             {std::tuple{SkipMode::skip_k, true, false}, std::tuple{SkipMode::skip_v, false, true},
              std::tuple{SkipMode::skip_kv, true, true}}) {
            KvCache none_cache(1, heads, hd);
            KvCache raw_cache(1, heads, hd);
            SkipPolicy none{SkipMode::none, Substitution::raw_substitute, std::nullopt};
            SkipPolicy raw{mode, Substitution::raw_substitute, std::nullopt};
            std::vector<uint8_t> mask(heads, 1);
            mask[1] = 0;
            attention_sparse_step(w, xs[0], mask, none_cache, none, 0, 0, true);
            attention_sparse_step(w, xs[0], mask, raw_cache, raw, 0, 0, true);
            for (int h = 0; h < heads; ++h) {
                const KvEntry& a = none_cache.entry(0, h, 0);
                const KvEntry& b = raw_cache.entry(0, h, 0);
                if (h != 1) {
                    CHECK(bits_equal(a.k_row, b.k_row));
                    CHECK(bits_equal(a.v_row, b.v_row));
                    continue;
                }
                if (k_raw)
                    CHECK_FALSE(bits_equal(a.k_row, b.k_row));
                else
                    CHECK(bits_equal(a.k_row, b.k_row));
                if (v_raw)
                    CHECK_FALSE(bits_equal(a.v_row, b.v_row));
                else
                    CHECK(bits_equal(a.v_row, b.v_row));
                CHECK(b.kind() == EntryKind::raw_substituted);
            }
        }
    }
    SUBCASE("layer filter below the cutoff behaves as policy none") {
        KvCache none_cache(1, heads, hd);
        KvCache filtered_cache(1, heads, hd);
        SkipPolicy none{SkipMode::none, Substitution::raw_substitute, std::nullopt};
        SkipPolicy filtered{SkipMode::skip_kv, Substitution::raw_substitute, 0.5};
        std::vector<uint8_t> mask(heads, 1);
        mask[0] = 0;
        // estimate 0.4 <= 0.5: the policy must not engage
        attention_sparse_step(w, xs[0], mask, none_cache, none, 0, 0, true, 0.4);
        attention_sparse_step(w, xs[0], mask, filtered_cache, filtered, 0, 0, true, 0.4);
        CHECK(bits_equal(none_cache.entry(0, 0, 0).k_row, filtered_cache.entry(0, 0, 0).k_row));
        CHECK(bits_equal(none_cache.entry(0, 0, 0).v_row, filtered_cache.entry(0, 0, 0).v_row));
        CHECK(filtered_cache.entry(0, 0, 0).kind() == EntryKind::materialized);
        // above the cutoff it engages
        KvCache engaged_cache(1, heads, hd);
        attention_sparse_step(w, xs[0], mask, engaged_cache, filtered, 0, 0, true, 0.6);
        CHECK(engaged_cache.entry(0, 0, 0).kind() == EntryKind::raw_substituted);
    }
    SUBCASE("mask size mismatch and cache gaps") {
        KvCache cache(1, heads, hd);
        SkipPolicy none{};
        CHECK_THROWS_AS(
            attention_sparse_step(w, xs[0], std::vector<uint8_t>(heads + 1, 1), cache, none, 0, 0, true),
            std::invalid_argument);
        CHECK_THROWS_AS(
            attention_sparse_step(w, xs[0], std::vector<uint8_t>(heads, 1), cache, none, 0, 3, true),
            std::runtime_error);
    }
}

TEST_CASE("session dense equivalence") {
    const Checkpoint ckpt = tiny_ckpt(61);
    const std::vector<int> toks = random_tokens(12, 62, ckpt.config.vocab_size);
    const ForwardResult dense = dense_forward(ckpt, toks, TraceLevel::none);

    auto run = [&](ExecConfig cfg) {
        Session s(ckpt, std::move(cfg));
        Mat logits(static_cast<int>(toks.size()), ckpt.config.vocab_size);
        for (size_t t = 0; t < toks.size(); ++t) {
            const Vec row = s.step(toks[t]);
            std::copy(row.begin(), row.end(), logits.row(static_cast<int>(t)));
        }
        return logits;
    };

    SUBCASE("threshold zero everywhere") {
        ExecConfig cfg;
        cfg.mlp = SelectionStrategy::with_threshold({0.0});
        cfg.attn = SelectionStrategy::with_threshold({0.0});
        const Mat logits = run(cfg);
        CHECK(std::memcmp(logits.data.data(), dense.logits.data.data(),
                          logits.data.size() * sizeof(double)) == 0);
    }
    SUBCASE("full topk everywhere plus a kv policy with no inactive heads") {
        ExecConfig cfg;
        cfg.mlp = SelectionStrategy::with_topk(ckpt.config.d_hidden);
        cfg.attn = SelectionStrategy::with_topk(ckpt.config.n_heads);
        cfg.policy = {SkipMode::skip_kv, Substitution::raw_substitute, std::nullopt};
        const Mat logits = run(cfg);
        CHECK(std::memcmp(logits.data.data(), dense.logits.data.data(),
                          logits.data.size() * sizeof(double)) == 0);
    }
    SUBCASE("all-active predictor stubs") {
        ExecConfig cfg;
        auto all_neurons = [&](int, int, const Vec&) {
            std::vector<int> v(ckpt.config.d_hidden);
            for (int i = 0; i < ckpt.config.d_hidden; ++i) v[i] = i;
            return v;
        };
        auto all_heads = [&](int, int, const Vec&) {
            std::vector<int> v(ckpt.config.n_heads);
            for (int i = 0; i < ckpt.config.n_heads; ++i) v[i] = i;
            return v;
        };
        cfg.mlp = SelectionStrategy::with_predictor(all_neurons, PredictorWiring::serial);
        cfg.attn = SelectionStrategy::with_predictor(all_heads, PredictorWiring::serial);
        const Mat logits = run(cfg);
        CHECK(std::memcmp(logits.data.data(), dense.logits.data.data(),
                          logits.data.size() * sizeof(double)) == 0);
    }
}

TEST_CASE("lazy materialization never changes outputs") {
    const Checkpoint ckpt = tiny_ckpt(71);
    const std::vector<int> toks = random_tokens(16, 72, ckpt.config.vocab_size);

    for (auto mode : {SkipMode::skip_kv, SkipMode::skip_k, SkipMode::skip_v}) {
        for (uint64_t seed : {1ull, 2ull, 3ull, 4ull}) {
            const SelectionStrategy masks = scripted_masks(seed, ckpt.config.n_heads, 0.6);
            ExecConfig none_cfg;
            none_cfg.attn = masks;
            none_cfg.policy = {SkipMode::none, Substitution::raw_substitute, std::nullopt};
            ExecConfig lazy_cfg;
            lazy_cfg.attn = masks;
            lazy_cfg.policy = {mode, Substitution::defer_lazy, std::nullopt};
            Session a(ckpt, none_cfg), b(ckpt, lazy_cfg);
            for (int t = 0; t < 16; ++t) {
                const Vec la = a.step(toks[t]);
                const Vec lb = b.step(toks[t]);
                CHECK(max_abs_diff(la, lb) <= 1e-10);
            }
        }
    }
}

TEST_CASE("oracle masking consistency with the truncation measure") {
    const Checkpoint ckpt = tiny_ckpt(81);
    const std::vector<int> toks = random_tokens(8, 82, ckpt.config.vocab_size);
    const ForwardResult r = dense_forward(ckpt, toks, TraceLevel::full);

    // pick a mid-range threshold from observed norms at layer 0
    Vec norms;
    for (const auto& recs : r.trace.tokens)
        for (double n : recs[0].head_out_norms) norms.push_back(n);
    std::sort(norms.begin(), norms.end());
    const double eps = norms[norms.size() / 2];

    // replay the decode with threshold masking, policy none
    ExecConfig cfg;
    cfg.attn = SelectionStrategy::with_threshold({eps});
    cfg.trace_level = TraceLevel::full;
    Session s(ckpt, cfg);
    for (int tok : toks) s.step(tok);
    const ForwardTrace masked = s.take_trace();

    for (int t = 0; t < 8; ++t) {
        const LayerRecord& dense_rec = r.trace.tokens[t][0];
        const LayerRecord& masked_rec = masked.tokens[t][0];
        const std::vector<uint8_t> mask = select_heads_threshold(dense_rec.head_out_norms, eps);
        // masked combined norm = (1 - cett) * dense norm
        const double cett = cett_attention(dense_rec, ckpt.layers[0].attn.w_o, eps);
        const double expect = (1.0 - cett) * dense_rec.mha_out_norm;
        CHECK(std::fabs(masked_rec.mha_out_norm - expect) <= 1e-10 * std::max(1.0, expect));
        for (int h = 0; h < ckpt.config.n_heads; ++h)
            if (!mask[h])
                for (int j = 0; j < ckpt.config.d_head; ++j)
                    CHECK(masked_rec.head_outputs.at(h, j) == 0.0);
    }
}

TEST_CASE("generate") {
    const Checkpoint ckpt = tiny_ckpt(91);
    const std::vector<int> prompt{10, 20, 30};
    const SelectionStrategy dense = SelectionStrategy::dense_all();
    const SkipPolicy none{};

    SUBCASE("zero new tokens returns the prompt") {
        CHECK(generate(ckpt, prompt, dense, dense, none, 0) == prompt);
    }
    SUBCASE("dense generation matches a step-by-step argmax oracle") {
        const std::vector<int> got = generate(ckpt, prompt, dense, dense, none, 6);
        std::vector<int> expect = prompt;
        for (int i = 0; i < 6; ++i) {
            const ForwardResult r = dense_forward(ckpt, expect, TraceLevel::none);
            const double* row = r.logits.row(r.logits.rows - 1);
            int best = 0;
            for (int v = 1; v < ckpt.config.vocab_size; ++v)
                if (row[v] > row[best]) best = v;
            expect.push_back(best);
        }
        CHECK(got == expect);
    }
    SUBCASE("lazy skipping does not change generated tokens") {
        Vec norms;
        const ForwardResult r = dense_forward(ckpt, prompt, TraceLevel::full);
        for (const auto& recs : r.trace.tokens)
            for (int l = 0; l < ckpt.config.n_layers; ++l)
                for (double n : recs[l].head_out_norms) norms.push_back(n);
        std::sort(norms.begin(), norms.end());
        const SelectionStrategy masked =
            SelectionStrategy::with_threshold({norms[norms.size() / 2]});
        const SkipPolicy lazy{SkipMode::skip_kv, Substitution::defer_lazy, std::nullopt};
        const std::vector<int> a = generate(ckpt, prompt, dense, masked, none, 8);
        const std::vector<int> b = generate(ckpt, prompt, dense, masked, lazy, 8);
        CHECK(a == b);
    }
    SUBCASE("context overflow") {
        CHECK_THROWS_AS(generate(ckpt, prompt, dense, dense, none, ckpt.config.max_seq_len),
                        std::length_error);
    }
    SUBCASE("empty prompt") {
        CHECK_THROWS_AS(generate(ckpt, {}, dense, dense, none, 1), std::invalid_argument);
    }
}

TEST_CASE("perplexity sanity") {
    const Checkpoint ckpt = tiny_ckpt(95);
    const std::vector<int> toks = random_tokens(200, 96, ckpt.config.vocab_size);
    const SelectionStrategy dense = SelectionStrategy::dense_all();
    const SkipPolicy none{};

    SUBCASE("untrained model sits near the uniform baseline") {
        const double ppl = perplexity(ckpt, toks, dense, dense, none);
        CHECK(ppl > 0.9 * ckpt.config.vocab_size);
        CHECK(ppl < 1.1 * ckpt.config.vocab_size);
    }
    SUBCASE("threshold zero changes nothing") {
        const double a = perplexity(ckpt, toks, dense, dense, none);
        const double b = perplexity(ckpt, toks, SelectionStrategy::with_threshold({0.0}),
                                    SelectionStrategy::with_threshold({0.0}), none);
        CHECK(a == b);
    }
}
