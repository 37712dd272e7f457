#pragma once

#include <string>
#include <vector>

#include "salab/kv_cache.hpp"
#include "salab/linalg.hpp"

namespace salab {

enum class Activation { silu, relu, relu_squared };

Activation activation_from_string(const std::string& s);
std::string to_string(Activation a);

struct ModelConfig {
    int n_layers = 4;
    int d_model = 128;
    int n_heads = 8;
    int d_head = 16;
    int d_hidden = 512;
    int vocab_size = 256;
    Activation activation = Activation::silu;
    bool rope_enabled = true;
    double norm_eps = 1e-5;
    int max_seq_len = 128;

    void validate() const; // throws std::invalid_argument
};

// Gated MLP block: out = W_out [act(W_in y) * (V_in y)].
struct MlpWeights {
    Mat w_in;  // d_hidden x d_model, gate
    Mat v_in;  // d_hidden x d_model, up
    Mat w_out; // d_model x d_hidden
    Vec w_out_col_norms; // cached l2 norm per w_out column; refresh after edits

    void recompute_col_norms();
};

// Square projections; head i owns columns [i*d_head, (i+1)*d_head).
struct AttnWeights {
    Mat w_q, w_k, w_v, w_o; // d_model x d_model
};

struct LayerWeights {
    AttnWeights attn;
    MlpWeights mlp;
    Vec attn_norm_gain; // d_model
    Vec mlp_norm_gain;  // d_model
};

struct Checkpoint {
    ModelConfig config;
    Mat token_embedding; // vocab x d_model
    std::vector<LayerWeights> layers;
    Vec final_norm_gain; // d_model
    Mat lm_head;         // vocab x d_model

    void validate() const; // shapes consistent with config, entries finite
    void finalize();       // recompute derived caches (column norms)
};

enum class TraceLevel { none, norms, full };

// One token x layer observation. `norms` level fills the magnitude/norm
// fields; `full` additionally keeps block inputs/outputs and raw head outputs.
struct LayerRecord {
    Vec neuron_magnitudes; // d_hidden, ||n_i(y)||
    Vec head_out_norms;    // n_heads, pre-output-projection
    double mlp_out_norm = 0.0;
    double mha_out_norm = 0.0;
    Vec mlp_input;    // d_model, post-norm y (full)
    Vec attn_input;   // d_model, post-norm attention input (full)
    Vec mha_output;   // d_model, post-W_o, pre-residual (full)
    Vec mlp_output;   // d_model (full)
    Mat head_outputs; // n_heads x d_head (full)
};

struct ForwardTrace {
    TraceLevel level = TraceLevel::none;
    int n_layers = 0, d_hidden = 0, n_heads = 0, d_head = 0;
    std::vector<std::vector<LayerRecord>> tokens; // [token][layer]

    int token_count() const { return static_cast<int>(tokens.size()); }
    bool empty() const { return tokens.empty(); }
};

double activation_fn(Activation kind, double x);
double activation_grad(Activation kind, double x);

// Interleaved-pair rotary embedding, base 10000.
void rope_rotate(double* v, int d_head, int position);

// h_i = act(w_in_i . y) * (v_in_i . y)
void mlp_hidden(const MlpWeights& w, const Vec& y, Activation kind, Vec& h);

// out = sum over `active` (ascending; nullptr = all) of h_i * w_out column i.
// Component-wise the sum runs in ascending neuron order, so any active set
// that happens to cover all neurons reproduces the dense result bit-for-bit.
void accumulate_neurons(const MlpWeights& w, const Vec& h, const std::vector<int>* active, Vec& out);

Vec mlp_forward(const MlpWeights& w, const Vec& y, Activation kind);
Vec neuron_output(const MlpWeights& w, const Vec& y, int i, Activation kind);
Vec neuron_magnitudes(const MlpWeights& w, const Vec& y, Activation kind);

struct AttentionResult {
    Mat per_head; // n_heads x d_head, pre-output-projection
    Vec combined; // d_model
};

// One causal decode step over the cache plus the current token; appends the
// current position's materialized k/v for every head. Deferred rows of prior
// positions are resolved in place.
AttentionResult attention_step(const AttnWeights& w, const Vec& x_t, KvCache& cache, int layer,
                               int position, bool rope_enabled);

struct ForwardResult {
    Mat logits; // seq x vocab
    ForwardTrace trace;
};

// Teacher-forced pass over a token sequence (length <= max_seq_len).
// Tracing is observation-only: logits are identical across trace levels.
ForwardResult dense_forward(const Checkpoint& ckpt, const std::vector<int>& tokens, TraceLevel level);

} // namespace salab
