#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "salab/model.hpp"

namespace salab {

enum class StrategyKind { dense, threshold, topk, predictor };
enum class PredictorWiring { serial, prepositioned };

// Predicted-active unit indices for one block, given the wiring-selected
// input of the live pass.
using ActivePredictorFn = std::function<std::vector<int>(int layer, int position, const Vec& input)>;

struct SelectionStrategy {
    StrategyKind kind = StrategyKind::dense;
    std::vector<double> thresholds; // threshold kind; length 1 (universal) or n_layers
    int k = 0;                      // topk kind
    ActivePredictorFn predictor;    // predictor kind
    PredictorWiring wiring = PredictorWiring::serial;

    static SelectionStrategy dense_all() { return {}; }
    static SelectionStrategy with_threshold(std::vector<double> eps);
    static SelectionStrategy with_topk(int k);
    static SelectionStrategy with_predictor(ActivePredictorFn fn, PredictorWiring wiring);

    double threshold_for_layer(int layer) const;
};

enum class SkipMode { none, skip_kv, skip_k, skip_v };
enum class Substitution { raw_substitute, defer_lazy };

// Cache handling for heads masked off at a step. `raw_substitute` writes the
// head's slice of the block input in place of the skipped projection(s);
// `defer_lazy` stores the block input and projects on the head's next use.
// With a layer filter, the policy applies only to layers whose static head
// sparsity estimate exceeds the cutoff; other layers fall back to `none`.
struct SkipPolicy {
    SkipMode mode = SkipMode::none;
    Substitution substitution = Substitution::raw_substitute;
    std::optional<double> layer_filter_min_sparsity;
};

// Indices of the k largest scores, ascending; ties keep the lower index.
std::vector<int> select_topk(const Vec& scores, int k);

// mask[i] = 1 iff head_norms[i] > eps (a norm exactly at eps is masked off).
std::vector<uint8_t> select_heads_threshold(const Vec& head_norms, double eps);

struct SparseMlpResult {
    Vec output;
    std::vector<int> active; // ascending
    Vec magnitudes;          // filled for threshold/topk, or when requested
};

// Threshold mode keeps neurons with magnitude >= eps; topk keeps the k
// largest magnitudes. For predictor strategies the caller resolves the
// active set (the wiring input is not y) and passes it in.
SparseMlpResult mlp_sparse_forward(const MlpWeights& w, const Vec& y, const SelectionStrategy& strategy,
                                   Activation kind, int layer = 0,
                                   const std::vector<int>* predicted_active = nullptr,
                                   bool want_magnitudes = false);

// One masked decode step. Active heads attend (resolving deferred rows on
// demand) and store materialized k/v; inactive heads contribute zero slots
// and their cache write follows the policy. Returns concat(slots) . W_o.
Vec attention_sparse_step(const AttnWeights& w, const Vec& x_t, const std::vector<uint8_t>& mask,
                          KvCache& cache, const SkipPolicy& policy, int layer, int position,
                          bool rope_enabled, double layer_sparsity_estimate = 0.0,
                          Mat* per_head_out = nullptr);

struct ExecConfig {
    SelectionStrategy mlp;
    SelectionStrategy attn;
    SkipPolicy policy;
    std::vector<double> layer_sparsity; // static per-layer head-sparsity estimates (layer filter)
    TraceLevel trace_level = TraceLevel::none;
};

// Single-sequence decode session: owns the cache, position counter and trace.
// One writer per session; the checkpoint itself is immutable and shareable.
class Session {
  public:
    Session(const Checkpoint& ckpt, ExecConfig cfg);

    // Feed one token, get the logits for its position.
    Vec step(int token);

    int position() const { return position_; }
    void reset();

    const ForwardTrace& trace() const { return trace_; }
    ForwardTrace take_trace();
    KvCache& cache() { return cache_; }
    const Checkpoint& checkpoint() const { return ckpt_; }

  private:
    const Checkpoint& ckpt_;
    ExecConfig cfg_;
    KvCache cache_;
    int position_ = 0;
    ForwardTrace trace_;
    Vec prev_layer_mlp_input_; // previous layer's y within the current step (prepositioned wiring)
    Vec probe_norms_;          // head norms from the oracle probe of the current layer

    std::vector<uint8_t> resolve_head_mask(int layer, const Vec& attn_input);
};

// Greedy decode: argmax logits, ties to the lower token id. Deterministic.
std::vector<int> generate(const Checkpoint& ckpt, const std::vector<int>& prompt,
                          const SelectionStrategy& mlp_strategy, const SelectionStrategy& attn_strategy,
                          const SkipPolicy& policy, int n_new,
                          const std::vector<double>& layer_sparsity = {});

} // namespace salab
