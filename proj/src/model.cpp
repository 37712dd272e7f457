#include "salab/model.hpp"

#include <cmath>
#include <stdexcept>

namespace salab {

Activation activation_from_string(const std::string& s) {
    if (s == "silu") return Activation::silu;
    if (s == "relu") return Activation::relu;
    if (s == "relu_squared" || s == "relu2") return Activation::relu_squared;
    throw std::invalid_argument("unknown activation: " + s);
}

std::string to_string(Activation a) {
    switch (a) {
        case Activation::silu: return "silu";
        case Activation::relu: return "relu";
        case Activation::relu_squared: return "relu_squared";
    }
    return "silu";
}

void ModelConfig::validate() const {
    if (n_layers < 1 || d_model < 1 || n_heads < 1 || d_head < 1 || d_hidden < 1 ||
        vocab_size < 1 || max_seq_len < 1)
        throw std::invalid_argument("model config: all dimensions must be >= 1");
    if (d_model != n_heads * d_head)
        throw std::invalid_argument("model config: d_model must equal n_heads * d_head");
    if (!(norm_eps > 0.0))
        throw std::invalid_argument("model config: norm_eps must be positive");
}

void MlpWeights::recompute_col_norms() {
    const int dh = w_out.cols;
    w_out_col_norms.assign(dh, 0.0);
    for (int r = 0; r < w_out.rows; ++r) {
        const double* row = w_out.row(r);
        for (int i = 0; i < dh; ++i) w_out_col_norms[i] += row[i] * row[i];
    }
    for (int i = 0; i < dh; ++i) w_out_col_norms[i] = std::sqrt(w_out_col_norms[i]);
}

static void check_shape(bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(std::string("checkpoint: bad shape for ") + what);
}

void Checkpoint::validate() const {
    config.validate();
    const int d = config.d_model, dh = config.d_hidden, v = config.vocab_size;
    check_shape(token_embedding.rows == v && token_embedding.cols == d, "token_embedding");
    check_shape(lm_head.rows == v && lm_head.cols == d, "lm_head");
    check_shape(static_cast<int>(final_norm_gain.size()) == d, "final_norm_gain");
    check_shape(static_cast<int>(layers.size()) == config.n_layers, "layers");
    for (const auto& l : layers) {
        check_shape(l.attn.w_q.rows == d && l.attn.w_q.cols == d, "w_q");
        check_shape(l.attn.w_k.rows == d && l.attn.w_k.cols == d, "w_k");
        check_shape(l.attn.w_v.rows == d && l.attn.w_v.cols == d, "w_v");
        check_shape(l.attn.w_o.rows == d && l.attn.w_o.cols == d, "w_o");
        check_shape(l.mlp.w_in.rows == dh && l.mlp.w_in.cols == d, "w_in");
        check_shape(l.mlp.v_in.rows == dh && l.mlp.v_in.cols == d, "v_in");
        check_shape(l.mlp.w_out.rows == d && l.mlp.w_out.cols == dh, "w_out");
        check_shape(static_cast<int>(l.attn_norm_gain.size()) == d, "attn_norm_gain");
        check_shape(static_cast<int>(l.mlp_norm_gain.size()) == d, "mlp_norm_gain");
        if (!all_finite(l.attn.w_q) || !all_finite(l.attn.w_k) || !all_finite(l.attn.w_v) ||
            !all_finite(l.attn.w_o) || !all_finite(l.mlp.w_in) || !all_finite(l.mlp.v_in) ||
            !all_finite(l.mlp.w_out) || !all_finite(l.attn_norm_gain) || !all_finite(l.mlp_norm_gain))
            throw std::invalid_argument("checkpoint: non-finite layer weights");
    }
    if (!all_finite(token_embedding) || !all_finite(lm_head) || !all_finite(final_norm_gain))
        throw std::invalid_argument("checkpoint: non-finite weights");
}

void Checkpoint::finalize() {
    for (auto& l : layers) l.mlp.recompute_col_norms();
}

double activation_fn(Activation kind, double x) {
    switch (kind) {
        case Activation::silu: return x / (1.0 + std::exp(-x));
        case Activation::relu: return x > 0.0 ? x : 0.0;
        case Activation::relu_squared: {
            const double r = x > 0.0 ? x : 0.0;
            return r * r;
        }
    }
    return 0.0;
}

double activation_grad(Activation kind, double x) {
    switch (kind) {
        case Activation::silu: {
            const double s = 1.0 / (1.0 + std::exp(-x));
            return s * (1.0 + x * (1.0 - s));
        }
        case Activation::relu: return x > 0.0 ? 1.0 : 0.0;
        case Activation::relu_squared: return x > 0.0 ? 2.0 * x : 0.0;
    }
    return 0.0;
}

void rope_rotate(double* v, int d_head, int position) {
    for (int j = 0; 2 * j + 1 < d_head; ++j) {
        const double theta = position * std::pow(10000.0, -2.0 * j / d_head);
        const double c = std::cos(theta), s = std::sin(theta);
        const double a = v[2 * j], b = v[2 * j + 1];
        v[2 * j] = a * c - b * s;
        v[2 * j + 1] = a * s + b * c;
    }
}

void mlp_hidden(const MlpWeights& w, const Vec& y, Activation kind, Vec& h) {
    if (static_cast<int>(y.size()) != w.w_in.cols)
        throw std::invalid_argument("mlp: input size does not match d_model");
    const int dh = w.w_in.rows;
    h.resize(dh);
    for (int i = 0; i < dh; ++i) {
        const double gate = dot(w.w_in.row(i), y.data(), w.w_in.cols);
        const double up = dot(w.v_in.row(i), y.data(), w.v_in.cols);
        h[i] = activation_fn(kind, gate) * up;
    }
}

void accumulate_neurons(const MlpWeights& w, const Vec& h, const std::vector<int>* active, Vec& out) {
    const int d_model = w.w_out.rows;
    const int dh = w.w_out.cols;
    out.assign(d_model, 0.0);
    if (active == nullptr) {
        for (int r = 0; r < d_model; ++r) {
            const double* row = w.w_out.row(r);
            double acc = 0.0;
            for (int i = 0; i < dh; ++i) acc += h[i] * row[i];
            out[r] = acc;
        }
    } else {
        for (int r = 0; r < d_model; ++r) {
            const double* row = w.w_out.row(r);
            double acc = 0.0;
            for (int i : *active) acc += h[i] * row[i];
            out[r] = acc;
        }
    }
}

Vec mlp_forward(const MlpWeights& w, const Vec& y, Activation kind) {
    Vec h;
    mlp_hidden(w, y, kind, h);
    Vec out;
    accumulate_neurons(w, h, nullptr, out);
    return out;
}

Vec neuron_output(const MlpWeights& w, const Vec& y, int i, Activation kind) {
    if (i < 0 || i >= w.w_in.rows) throw std::out_of_range("neuron index out of range");
    const double gate = dot(w.w_in.row(i), y.data(), w.w_in.cols);
    const double up = dot(w.v_in.row(i), y.data(), w.v_in.cols);
    const double h = activation_fn(kind, gate) * up;
    Vec out(w.w_out.rows);
    for (int r = 0; r < w.w_out.rows; ++r) out[r] = h * w.w_out.at(r, i);
    return out;
}

Vec neuron_magnitudes(const MlpWeights& w, const Vec& y, Activation kind) {
    Vec h;
    mlp_hidden(w, y, kind, h);
    const int dh = static_cast<int>(h.size());
    if (static_cast<int>(w.w_out_col_norms.size()) != dh)
        throw std::invalid_argument("mlp: column-norm cache out of date");
    Vec m(dh);
    for (int i = 0; i < dh; ++i) m[i] = std::fabs(h[i]) * w.w_out_col_norms[i];
    return m;
}

} // namespace salab
