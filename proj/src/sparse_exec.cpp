#include "salab/sparse_exec.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "attention_core.hpp"

namespace salab {

SelectionStrategy SelectionStrategy::with_threshold(std::vector<double> eps) {
    SelectionStrategy s;
    s.kind = StrategyKind::threshold;
    s.thresholds = std::move(eps);
    return s;
}

SelectionStrategy SelectionStrategy::with_topk(int k) {
    SelectionStrategy s;
    s.kind = StrategyKind::topk;
    s.k = k;
    return s;
}

SelectionStrategy SelectionStrategy::with_predictor(ActivePredictorFn fn, PredictorWiring wiring) {
    SelectionStrategy s;
    s.kind = StrategyKind::predictor;
    s.predictor = std::move(fn);
    s.wiring = wiring;
    return s;
}

double SelectionStrategy::threshold_for_layer(int layer) const {
    if (thresholds.empty()) throw std::invalid_argument("strategy: no thresholds set");
    if (thresholds.size() == 1) return thresholds[0];
    if (layer < 0 || layer >= static_cast<int>(thresholds.size()))
        throw std::invalid_argument("strategy: no threshold for layer");
    return thresholds[layer];
}

std::vector<int> select_topk(const Vec& scores, int k) {
    const int n = static_cast<int>(scores.size());
    if (k < 0 || k > n) throw std::invalid_argument("select_topk: k out of range");
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    // stable partial sort by descending score; equal scores keep lower index
    std::stable_sort(idx.begin(), idx.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<uint8_t> select_heads_threshold(const Vec& head_norms, double eps) {
    if (eps < 0.0) throw std::invalid_argument("select_heads_threshold: eps must be >= 0");
    std::vector<uint8_t> mask(head_norms.size());
    for (size_t i = 0; i < head_norms.size(); ++i) mask[i] = head_norms[i] > eps ? 1 : 0;
    return mask;
}

SparseMlpResult mlp_sparse_forward(const MlpWeights& w, const Vec& y, const SelectionStrategy& strategy,
                                   Activation kind, int layer, const std::vector<int>* predicted_active,
                                   bool want_magnitudes) {
    const int dh = w.w_in.rows;
    SparseMlpResult res;

    if (strategy.kind == StrategyKind::predictor) {
        if (predicted_active == nullptr)
            throw std::invalid_argument("mlp_sparse_forward: predictor strategy needs a resolved active set");
        res.active = *predicted_active;
        std::sort(res.active.begin(), res.active.end());
        Vec h(dh, 0.0);
        for (int i : res.active) {
            if (i < 0 || i >= dh) throw std::out_of_range("mlp_sparse_forward: active index out of range");
            const double gate = dot(w.w_in.row(i), y.data(), w.w_in.cols);
            const double up = dot(w.v_in.row(i), y.data(), w.v_in.cols);
            h[i] = activation_fn(kind, gate) * up;
        }
        accumulate_neurons(w, h, &res.active, res.output);
        if (want_magnitudes) res.magnitudes = neuron_magnitudes(w, y, kind);
        return res;
    }

    Vec h;
    mlp_hidden(w, y, kind, h);

    switch (strategy.kind) {
        case StrategyKind::dense: {
            res.active.resize(dh);
            for (int i = 0; i < dh; ++i) res.active[i] = i;
            accumulate_neurons(w, h, nullptr, res.output);
            break;
        }
        case StrategyKind::threshold: {
            const double eps = strategy.threshold_for_layer(layer);
            if (eps < 0.0) throw std::invalid_argument("mlp_sparse_forward: threshold must be >= 0");
            res.magnitudes.resize(dh);
            for (int i = 0; i < dh; ++i) res.magnitudes[i] = std::fabs(h[i]) * w.w_out_col_norms[i];
            for (int i = 0; i < dh; ++i)
                if (res.magnitudes[i] >= eps) res.active.push_back(i);
            accumulate_neurons(w, h, &res.active, res.output);
            break;
        }
        case StrategyKind::topk: {
            if (strategy.k < 0 || strategy.k > dh)
                throw std::invalid_argument("mlp_sparse_forward: k out of range");
            res.magnitudes.resize(dh);
            for (int i = 0; i < dh; ++i) res.magnitudes[i] = std::fabs(h[i]) * w.w_out_col_norms[i];
            res.active = select_topk(res.magnitudes, strategy.k);
            accumulate_neurons(w, h, &res.active, res.output);
            break;
        }
        default: break;
    }
    if (want_magnitudes && res.magnitudes.empty()) {
        res.magnitudes.resize(dh);
        for (int i = 0; i < dh; ++i) res.magnitudes[i] = std::fabs(h[i]) * w.w_out_col_norms[i];
    }
    return res;
}

namespace {

// All-head attention without cache writes; used to pick oracle masks and to
// fill trace norms. Resolves deferred rows (memoized, exact), so repeating the
// computation for the surviving heads afterwards yields identical values.
void attention_probe(const AttnWeights& w, const Vec& x_t, KvCache& cache, int layer, int position,
                     bool rope_enabled, Mat& per_head, Vec& norms) {
    const int n_heads = cache.n_heads();
    const int d_head = cache.d_head();
    per_head = Mat(n_heads, d_head);
    norms.assign(n_heads, 0.0);
    for (int h = 0; h < n_heads; ++h) {
        cache.materialize_prefix(w, layer, h, position, rope_enabled);
        const Vec q = detail::head_query(w, x_t, h, d_head, position, rope_enabled);
        Vec k_cur, v_cur;
        detail::head_kv(w, x_t, h, d_head, position, rope_enabled, k_cur, v_cur);
        const Vec out = detail::head_attend(cache, layer, h, q, k_cur, v_cur, position);
        for (int j = 0; j < d_head; ++j) per_head.at(h, j) = out[j];
        norms[h] = norm2(out);
    }
}

Vec head_slice(const Vec& x, int head, int d_head) {
    return Vec(x.begin() + static_cast<size_t>(head) * d_head,
               x.begin() + static_cast<size_t>(head + 1) * d_head);
}

} // namespace

Vec attention_sparse_step(const AttnWeights& w, const Vec& x_t, const std::vector<uint8_t>& mask,
                          KvCache& cache, const SkipPolicy& policy, int layer, int position,
                          bool rope_enabled, double layer_sparsity_estimate, Mat* per_head_out) {
    const int n_heads = cache.n_heads();
    const int d_head = cache.d_head();
    if (static_cast<int>(mask.size()) != n_heads)
        throw std::invalid_argument("attention_sparse_step: mask/head-count mismatch");
    for (int h = 0; h < n_heads; ++h)
        if (cache.size(layer, h) != position)
            throw std::runtime_error("attention_sparse_step: cache gap");

    SkipMode mode = policy.mode;
    if (policy.layer_filter_min_sparsity.has_value() &&
        !(layer_sparsity_estimate > *policy.layer_filter_min_sparsity))
        mode = SkipMode::none;

    Vec concat(static_cast<size_t>(n_heads) * d_head, 0.0);
    if (per_head_out) *per_head_out = Mat(n_heads, d_head);

    for (int h = 0; h < n_heads; ++h) {
        if (mask[h]) {
            cache.materialize_prefix(w, layer, h, position, rope_enabled);
            const Vec q = detail::head_query(w, x_t, h, d_head, position, rope_enabled);
            Vec k_cur, v_cur;
            detail::head_kv(w, x_t, h, d_head, position, rope_enabled, k_cur, v_cur);
            const Vec out = detail::head_attend(cache, layer, h, q, k_cur, v_cur, position);
            for (int j = 0; j < d_head; ++j) {
                concat[static_cast<size_t>(h) * d_head + j] = out[j];
                if (per_head_out) per_head_out->at(h, j) = out[j];
            }
            KvEntry e;
            e.k_row = std::move(k_cur);
            e.v_row = std::move(v_cur);
            e.position = position;
            cache.append(layer, h, std::move(e));
            continue;
        }

        // Inactive head: zero slot; cache write follows the (filtered) policy.
        KvEntry e;
        e.position = position;
        if (mode == SkipMode::none) {
            detail::head_kv(w, x_t, h, d_head, position, rope_enabled, e.k_row, e.v_row);
        } else if (policy.substitution == Substitution::defer_lazy) {
            const bool defer_k = (mode == SkipMode::skip_kv || mode == SkipMode::skip_k);
            const bool defer_v = (mode == SkipMode::skip_kv || mode == SkipMode::skip_v);
            Vec k_true, v_true;
            if (!defer_k || !defer_v)
                detail::head_kv(w, x_t, h, d_head, position, rope_enabled, k_true, v_true);
            if (defer_k) e.k_state = RowState::deferred; else e.k_row = std::move(k_true);
            if (defer_v) e.v_state = RowState::deferred; else e.v_row = std::move(v_true);
            e.embedding = x_t;
        } else { // raw_substitute
            const bool raw_k = (mode == SkipMode::skip_kv || mode == SkipMode::skip_k);
            const bool raw_v = (mode == SkipMode::skip_kv || mode == SkipMode::skip_v);
            Vec k_true, v_true;
            if (!raw_k || !raw_v)
                detail::head_kv(w, x_t, h, d_head, position, rope_enabled, k_true, v_true);
            if (raw_k) {
                e.k_row = head_slice(x_t, h, d_head);
                e.k_state = RowState::raw;
            } else {
                e.k_row = std::move(k_true);
            }
            if (raw_v) {
                e.v_row = head_slice(x_t, h, d_head);
                e.v_state = RowState::raw;
            } else {
                e.v_row = std::move(v_true);
            }
        }
        cache.append(layer, h, std::move(e));
    }
    return detail::project_heads(w, concat);
}

Session::Session(const Checkpoint& ckpt, ExecConfig cfg)
    : ckpt_(ckpt), cfg_(std::move(cfg)),
      cache_(ckpt.config.n_layers, ckpt.config.n_heads, ckpt.config.d_head) {
    ckpt_.config.validate();
    if (!cfg_.layer_sparsity.empty() &&
        static_cast<int>(cfg_.layer_sparsity.size()) != ckpt_.config.n_layers)
        throw std::invalid_argument("session: layer_sparsity size mismatch");
    trace_.level = cfg_.trace_level;
    trace_.n_layers = ckpt_.config.n_layers;
    trace_.d_hidden = ckpt_.config.d_hidden;
    trace_.n_heads = ckpt_.config.n_heads;
    trace_.d_head = ckpt_.config.d_head;
}

void Session::reset() {
    cache_.clear();
    position_ = 0;
    trace_.tokens.clear();
    prev_layer_mlp_input_.clear();
}

ForwardTrace Session::take_trace() { return std::move(trace_); }

std::vector<uint8_t> Session::resolve_head_mask(int layer, const Vec& attn_input) {
    const int n_heads = ckpt_.config.n_heads;
    switch (cfg_.attn.kind) {
        case StrategyKind::dense:
            return std::vector<uint8_t>(n_heads, 1);
        case StrategyKind::threshold:
        case StrategyKind::topk: {
            Mat per_head;
            Vec norms;
            attention_probe(ckpt_.layers[layer].attn, attn_input, cache_, layer, position_,
                            ckpt_.config.rope_enabled, per_head, norms);
            probe_norms_ = norms;
            if (cfg_.attn.kind == StrategyKind::threshold)
                return select_heads_threshold(norms, cfg_.attn.threshold_for_layer(layer));
            const std::vector<int> keep = select_topk(norms, cfg_.attn.k);
            std::vector<uint8_t> mask(n_heads, 0);
            for (int i : keep) mask[i] = 1;
            return mask;
        }
        case StrategyKind::predictor: {
            const Vec& input = (cfg_.attn.wiring == PredictorWiring::prepositioned &&
                                !prev_layer_mlp_input_.empty())
                                   ? prev_layer_mlp_input_
                                   : attn_input;
            const std::vector<int> active = cfg_.attn.predictor(layer, position_, input);
            std::vector<uint8_t> mask(n_heads, 0);
            for (int i : active) {
                if (i < 0 || i >= n_heads)
                    throw std::out_of_range("attention predictor returned a bad head index");
                mask[i] = 1;
            }
            return mask;
        }
    }
    return std::vector<uint8_t>(n_heads, 1);
}

Vec Session::step(int token) {
    const ModelConfig& cfg = ckpt_.config;
    if (token < 0 || token >= cfg.vocab_size)
        throw std::out_of_range("session: token id out of range");
    if (position_ >= cfg.max_seq_len) throw std::length_error("session: sequence too long");

    const int d = cfg.d_model;
    Vec x(ckpt_.token_embedding.row(token), ckpt_.token_embedding.row(token) + d);
    prev_layer_mlp_input_.clear();

    std::vector<LayerRecord> step_records;
    if (cfg_.trace_level != TraceLevel::none) step_records.resize(cfg.n_layers);

    for (int l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = ckpt_.layers[l];

        Vec a_in(d);
        rmsnorm(x.data(), lw.attn_norm_gain.data(), d, cfg.norm_eps, a_in.data());

        probe_norms_.clear();
        const std::vector<uint8_t> mask = resolve_head_mask(l, a_in);
        const double sparsity_est = cfg_.layer_sparsity.empty() ? 0.0 : cfg_.layer_sparsity[l];
        Mat per_head;
        Mat* per_head_ptr = cfg_.trace_level != TraceLevel::none ? &per_head : nullptr;
        Vec mha = attention_sparse_step(lw.attn, a_in, mask, cache_, cfg_.policy, l, position_,
                                        cfg.rope_enabled, sparsity_est, per_head_ptr);
        for (int j = 0; j < d; ++j) x[j] += mha[j];

        Vec y(d);
        rmsnorm(x.data(), lw.mlp_norm_gain.data(), d, cfg.norm_eps, y.data());

        std::vector<int> predicted;
        const std::vector<int>* predicted_ptr = nullptr;
        if (cfg_.mlp.kind == StrategyKind::predictor) {
            const Vec& input = (cfg_.mlp.wiring == PredictorWiring::prepositioned) ? a_in : mha;
            predicted = cfg_.mlp.predictor(l, position_, input);
            predicted_ptr = &predicted;
        }
        const bool want_mag = cfg_.trace_level != TraceLevel::none;
        SparseMlpResult mlp = mlp_sparse_forward(lw.mlp, y, cfg_.mlp, cfg.activation, l,
                                                 predicted_ptr, want_mag);
        for (int j = 0; j < d; ++j) x[j] += mlp.output[j];

        if (cfg_.trace_level != TraceLevel::none) {
            LayerRecord& rec = step_records[l];
            rec.neuron_magnitudes = std::move(mlp.magnitudes);
            rec.head_out_norms.assign(cfg.n_heads, 0.0);
            for (int h = 0; h < cfg.n_heads; ++h) {
                if (mask[h])
                    rec.head_out_norms[h] = norm2(per_head.row(h), cfg.d_head);
                else if (!probe_norms_.empty())
                    rec.head_out_norms[h] = probe_norms_[h];
            }
            rec.mha_out_norm = norm2(mha);
            rec.mlp_out_norm = norm2(mlp.output);
            if (cfg_.trace_level == TraceLevel::full) {
                rec.mlp_input = y;
                rec.attn_input = a_in;
                rec.mha_output = mha;
                rec.mlp_output = mlp.output;
                rec.head_outputs = per_head;
            }
        }
        prev_layer_mlp_input_ = std::move(y);
    }

    Vec f(d);
    rmsnorm(x.data(), ckpt_.final_norm_gain.data(), d, cfg.norm_eps, f.data());
    Vec logits(cfg.vocab_size);
    matvec_rows(ckpt_.lm_head, f.data(), logits.data());

    if (cfg_.trace_level != TraceLevel::none) trace_.tokens.push_back(std::move(step_records));
    ++position_;
    return logits;
}

ForwardResult dense_forward(const Checkpoint& ckpt, const std::vector<int>& tokens, TraceLevel level) {
    if (static_cast<int>(tokens.size()) > ckpt.config.max_seq_len)
        throw std::length_error("dense_forward: sequence too long");
    ForwardResult res;
    res.logits = Mat(static_cast<int>(tokens.size()), ckpt.config.vocab_size);
    ExecConfig cfg;
    cfg.trace_level = level;
    Session session(ckpt, cfg);
    for (size_t t = 0; t < tokens.size(); ++t) {
        const Vec logits = session.step(tokens[t]);
        std::copy(logits.begin(), logits.end(), res.logits.row(static_cast<int>(t)));
    }
    res.trace = session.take_trace();
    return res;
}

std::vector<int> generate(const Checkpoint& ckpt, const std::vector<int>& prompt,
                          const SelectionStrategy& mlp_strategy, const SelectionStrategy& attn_strategy,
                          const SkipPolicy& policy, int n_new, const std::vector<double>& layer_sparsity) {
    if (prompt.empty()) throw std::invalid_argument("generate: prompt must be non-empty");
    if (n_new < 0) throw std::invalid_argument("generate: n_new must be >= 0");
    if (static_cast<int>(prompt.size()) + n_new > ckpt.config.max_seq_len)
        throw std::length_error("generate: context overflow");

    ExecConfig cfg;
    cfg.mlp = mlp_strategy;
    cfg.attn = attn_strategy;
    cfg.policy = policy;
    cfg.layer_sparsity = layer_sparsity;
    Session session(ckpt, cfg);

    std::vector<int> out = prompt;
    Vec logits;
    for (int tok : prompt) logits = session.step(tok);
    for (int i = 0; i < n_new; ++i) {
        int best = 0;
        for (int v = 1; v < static_cast<int>(logits.size()); ++v)
            if (logits[v] > logits[best]) best = v;
        out.push_back(best);
        if (i + 1 < n_new) logits = session.step(best);
    }
    return out;
}

} // namespace salab
