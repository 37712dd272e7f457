#include "salab/train_toy.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "salab/rng.hpp"

namespace salab {

namespace {

void fill_normal(Rng& rng, std::vector<double>& v, double stddev) {
    for (double& x : v) x = rng.normal(0.0, stddev);
}

// Fixed enumeration order; pairs parameters with their grad/moment mirrors.
std::vector<std::vector<double>*> tensor_list(Checkpoint& c) {
    std::vector<std::vector<double>*> out;
    out.push_back(&c.token_embedding.data);
    for (auto& l : c.layers) {
        out.push_back(&l.attn.w_q.data);
        out.push_back(&l.attn.w_k.data);
        out.push_back(&l.attn.w_v.data);
        out.push_back(&l.attn.w_o.data);
        out.push_back(&l.mlp.w_in.data);
        out.push_back(&l.mlp.v_in.data);
        out.push_back(&l.mlp.w_out.data);
        out.push_back(&l.attn_norm_gain);
        out.push_back(&l.mlp_norm_gain);
    }
    out.push_back(&c.final_norm_gain);
    out.push_back(&c.lm_head.data);
    return out;
}

Checkpoint zeros_like(const ModelConfig& cfg) {
    Checkpoint c;
    c.config = cfg;
    c.token_embedding = Mat(cfg.vocab_size, cfg.d_model);
    c.lm_head = Mat(cfg.vocab_size, cfg.d_model);
    c.final_norm_gain.assign(cfg.d_model, 0.0);
    c.layers.resize(cfg.n_layers);
    for (auto& l : c.layers) {
        l.attn.w_q = Mat(cfg.d_model, cfg.d_model);
        l.attn.w_k = Mat(cfg.d_model, cfg.d_model);
        l.attn.w_v = Mat(cfg.d_model, cfg.d_model);
        l.attn.w_o = Mat(cfg.d_model, cfg.d_model);
        l.mlp.w_in = Mat(cfg.d_hidden, cfg.d_model);
        l.mlp.v_in = Mat(cfg.d_hidden, cfg.d_model);
        l.mlp.w_out = Mat(cfg.d_model, cfg.d_hidden);
        l.attn_norm_gain.assign(cfg.d_model, 0.0);
        l.mlp_norm_gain.assign(cfg.d_model, 0.0);
    }
    return c;
}

// d(rmsnorm)/dx given upstream dy; accumulates into dx and dgain.
void rmsnorm_backward(const double* x, const double* gain, const double* dy, int n, double eps,
                      double* dx, double* dgain) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    ms /= n;
    const double r = 1.0 / std::sqrt(ms + eps);
    double gdx = 0.0; // sum_j dy_j * gain_j * x_j
    for (int i = 0; i < n; ++i) gdx += dy[i] * gain[i] * x[i];
    const double k = r * r * r * gdx / n;
    for (int i = 0; i < n; ++i) {
        dx[i] += gain[i] * r * dy[i] - k * x[i];
        dgain[i] += dy[i] * x[i] * r;
    }
}

struct LayerActs {
    Mat x_in;     // T x d, residual stream entering the layer
    Mat a_norm;   // T x d
    Mat q, k, v;  // T x d (q, k post-rotation)
    std::vector<Mat> probs; // per head, T x T (row t holds t+1 entries)
    Mat head_cat; // T x d
    Mat mha;      // T x d
    Mat x_mid;    // T x d, after the attention residual
    Mat m_norm;   // T x d (y)
    Mat gate, up, hidden; // T x dh
    Mat mlp_out;  // T x d
};

} // namespace

Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    Checkpoint c = zeros_like(cfg);
    const double base_std = 0.02;
    const double resid_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    fill_normal(rng, c.token_embedding.data, base_std);
    for (auto& l : c.layers) {
        fill_normal(rng, l.attn.w_q.data, base_std);
        fill_normal(rng, l.attn.w_k.data, base_std);
        fill_normal(rng, l.attn.w_v.data, base_std);
        fill_normal(rng, l.attn.w_o.data, resid_std);
        fill_normal(rng, l.mlp.w_in.data, base_std);
        fill_normal(rng, l.mlp.v_in.data, base_std);
        fill_normal(rng, l.mlp.w_out.data, resid_std);
        l.attn_norm_gain.assign(cfg.d_model, 1.0);
        l.mlp_norm_gain.assign(cfg.d_model, 1.0);
    }
    c.final_norm_gain.assign(cfg.d_model, 1.0);
    fill_normal(rng, c.lm_head.data, base_std);
    c.finalize();
    return c;
}

TrainResult train_toy_model(const ModelConfig& cfg, const Corpus& corpus, TrainOptions opts) {
    cfg.validate();
    if (opts.steps < 0) throw std::invalid_argument("train: steps must be >= 0");
    const int T = opts.window > 0 ? opts.window : cfg.max_seq_len;
    if (T < 2 || T > cfg.max_seq_len)
        throw std::invalid_argument("train: window must be in [2, max_seq_len]");
    const std::vector<int> train = corpus.train_tokens();
    if (static_cast<long>(train.size()) < T + 1)
        throw std::invalid_argument("train: corpus train split shorter than the context window");

    Rng rng(opts.seed);
    TrainResult res;
    res.ckpt = init_checkpoint(cfg, opts.seed);
    if (opts.steps == 0) return res;

    Checkpoint grads = zeros_like(cfg);
    Checkpoint adam_m = zeros_like(cfg);
    Checkpoint adam_v = zeros_like(cfg);
    auto params = tensor_list(res.ckpt);
    auto gparams = tensor_list(grads);
    auto mparams = tensor_list(adam_m);
    auto vparams = tensor_list(adam_v);

    const int d = cfg.d_model, dh = cfg.d_hidden, H = cfg.n_heads, hd = cfg.d_head;
    const int V = cfg.vocab_size;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    std::vector<LayerActs> acts(cfg.n_layers);
    for (auto& a : acts) {
        a.x_in = Mat(T, d);
        a.a_norm = Mat(T, d);
        a.q = Mat(T, d);
        a.k = Mat(T, d);
        a.v = Mat(T, d);
        a.probs.assign(H, Mat(T, T));
        a.head_cat = Mat(T, d);
        a.mha = Mat(T, d);
        a.x_mid = Mat(T, d);
        a.m_norm = Mat(T, d);
        a.gate = Mat(T, dh);
        a.up = Mat(T, dh);
        a.hidden = Mat(T, dh);
        a.mlp_out = Mat(T, d);
    }
    Mat x_final(T, d), f_norm(T, d), logits(T, V);
    Mat dx(T, d), dtmp(T, d), d_norm(T, d);
    Mat dq(T, d), dk(T, d), dv(T, d), dcat(T, d);
    Mat dgate(T, dh), dup(T, dh), dhid(T, dh);
    std::vector<int> window(T + 1);

    for (int step = 0; step < opts.steps; ++step) {
        const int start = rng.uniform_int(static_cast<int>(train.size()) - T);
        for (int t = 0; t <= T; ++t) window[t] = train[start + t];

        // ---- forward ----
        for (int t = 0; t < T; ++t) {
            const double* emb = res.ckpt.token_embedding.row(window[t]);
            std::copy(emb, emb + d, acts[0].x_in.row(t));
        }
        for (int l = 0; l < cfg.n_layers; ++l) {
            LayerActs& a = acts[l];
            LayerWeights& lw = res.ckpt.layers[l];
            for (int t = 0; t < T; ++t)
                rmsnorm(a.x_in.row(t), lw.attn_norm_gain.data(), d, cfg.norm_eps, a.a_norm.row(t));
            a.q.data.assign(a.q.data.size(), 0.0);
            a.k.data.assign(a.k.data.size(), 0.0);
            a.v.data.assign(a.v.data.size(), 0.0);
            for (int t = 0; t < T; ++t) {
                vecmat_slice(a.a_norm.row(t), lw.attn.w_q, 0, d, a.q.row(t));
                vecmat_slice(a.a_norm.row(t), lw.attn.w_k, 0, d, a.k.row(t));
                vecmat_slice(a.a_norm.row(t), lw.attn.w_v, 0, d, a.v.row(t));
                if (cfg.rope_enabled) {
                    for (int h = 0; h < H; ++h) {
                        rope_rotate(a.q.row(t) + h * hd, hd, t);
                        rope_rotate(a.k.row(t) + h * hd, hd, t);
                    }
                }
            }
            for (int h = 0; h < H; ++h) {
                Mat& p = a.probs[h];
                for (int t = 0; t < T; ++t) {
                    double* row = p.row(t);
                    for (int s = 0; s <= t; ++s)
                        row[s] = dot(a.q.row(t) + h * hd, a.k.row(s) + h * hd, hd) * inv_sqrt_hd;
                    softmax_inplace(row, t + 1);
                }
            }
            a.head_cat.data.assign(a.head_cat.data.size(), 0.0);
            for (int h = 0; h < H; ++h) {
                const Mat& p = a.probs[h];
                for (int t = 0; t < T; ++t) {
                    double* out = a.head_cat.row(t) + h * hd;
                    const double* prow = p.row(t);
                    for (int s = 0; s <= t; ++s) axpy(prow[s], a.v.row(s) + h * hd, out, hd);
                }
            }
            a.mha.data.assign(a.mha.data.size(), 0.0);
            for (int t = 0; t < T; ++t)
                vecmat_slice(a.head_cat.row(t), lw.attn.w_o, 0, d, a.mha.row(t));
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < d; ++j) a.x_mid.at(t, j) = a.x_in.at(t, j) + a.mha.at(t, j);

            for (int t = 0; t < T; ++t)
                rmsnorm(a.x_mid.row(t), lw.mlp_norm_gain.data(), d, cfg.norm_eps, a.m_norm.row(t));
            for (int t = 0; t < T; ++t) {
                matvec_rows(lw.mlp.w_in, a.m_norm.row(t), a.gate.row(t));
                matvec_rows(lw.mlp.v_in, a.m_norm.row(t), a.up.row(t));
                for (int i = 0; i < dh; ++i)
                    a.hidden.at(t, i) = activation_fn(cfg.activation, a.gate.at(t, i)) * a.up.at(t, i);
            }
            for (int t = 0; t < T; ++t)
                matvec_rows(lw.mlp.w_out, a.hidden.row(t), a.mlp_out.row(t));

            Mat& next = (l + 1 < cfg.n_layers) ? acts[l + 1].x_in : x_final;
            for (int t = 0; t < T; ++t)
                for (int j = 0; j < d; ++j) next.at(t, j) = a.x_mid.at(t, j) + a.mlp_out.at(t, j);
        }
        for (int t = 0; t < T; ++t)
            rmsnorm(x_final.row(t), res.ckpt.final_norm_gain.data(), d, cfg.norm_eps, f_norm.row(t));
        for (int t = 0; t < T; ++t) matvec_rows(res.ckpt.lm_head, f_norm.row(t), logits.row(t));

        double loss = 0.0;
        const int n_pred = T - 1;
        for (int t = 0; t < n_pred; ++t) {
            double* row = logits.row(t);
            softmax_inplace(row, V); // logits now hold probabilities
            loss -= std::log(row[window[t + 1]]);
        }
        loss /= n_pred;
        res.loss_curve.push_back(loss);
        if (!std::isfinite(loss))
            throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
        if (opts.log_every > 0 && step % opts.log_every == 0)
            std::fprintf(stderr, "step %d loss %.4f\n", step, loss);

        // ---- backward ----
        for (auto* g : gparams) g->assign(g->size(), 0.0);
        Mat& dlm_head = grads.lm_head;
        Mat& demb = grads.token_embedding;

        dx.data.assign(dx.data.size(), 0.0); // d(f_norm)
        for (int t = 0; t < n_pred; ++t) {
            double* row = logits.row(t); // probabilities
            row[window[t + 1]] -= 1.0;
            const double scale = 1.0 / n_pred;
            for (int v = 0; v < V; ++v) {
                const double g = row[v] * scale;
                axpy(g, res.ckpt.lm_head.row(v), dx.row(t), d);
                axpy(g, f_norm.row(t), dlm_head.row(v), d);
            }
        }
        d_norm.data.assign(d_norm.data.size(), 0.0); // d(x_final)
        for (int t = 0; t < T; ++t)
            rmsnorm_backward(x_final.row(t), res.ckpt.final_norm_gain.data(), dx.row(t), d,
                             cfg.norm_eps, d_norm.row(t), grads.final_norm_gain.data());

        // d_norm now carries the residual-stream gradient flowing down
        for (int l = cfg.n_layers - 1; l >= 0; --l) {
            LayerActs& a = acts[l];
            LayerWeights& lw = res.ckpt.layers[l];
            LayerWeights& gw = grads.layers[l];

            // MLP branch: d_norm = d(x_out) = d(x_mid) + d(mlp_out)
            dgate.data.assign(dgate.data.size(), 0.0);
            dup.data.assign(dup.data.size(), 0.0);
            dhid.data.assign(dhid.data.size(), 0.0);
            for (int t = 0; t < T; ++t) {
                const double* dmo = d_norm.row(t);
                for (int r = 0; r < d; ++r) {
                    axpy(dmo[r], lw.mlp.w_out.row(r), dhid.row(t), dh);
                    axpy(dmo[r], a.hidden.row(t), gw.mlp.w_out.row(r), dh);
                }
            }
            for (int t = 0; t < T; ++t) {
                for (int i = 0; i < dh; ++i) {
                    const double dh_ti = dhid.at(t, i);
                    dgate.at(t, i) = dh_ti * a.up.at(t, i) * activation_grad(cfg.activation, a.gate.at(t, i));
                    dup.at(t, i) = dh_ti * activation_fn(cfg.activation, a.gate.at(t, i));
                }
            }
            dtmp.data.assign(dtmp.data.size(), 0.0); // d(m_norm)
            for (int t = 0; t < T; ++t) {
                for (int i = 0; i < dh; ++i) {
                    axpy(dgate.at(t, i), lw.mlp.w_in.row(i), dtmp.row(t), d);
                    axpy(dgate.at(t, i), a.m_norm.row(t), gw.mlp.w_in.row(i), d);
                    axpy(dup.at(t, i), lw.mlp.v_in.row(i), dtmp.row(t), d);
                    axpy(dup.at(t, i), a.m_norm.row(t), gw.mlp.v_in.row(i), d);
                }
            }
            dx.data.assign(dx.data.size(), 0.0); // d(x_mid)
            for (int t = 0; t < T; ++t)
                rmsnorm_backward(a.x_mid.row(t), lw.mlp_norm_gain.data(), dtmp.row(t), d,
                                 cfg.norm_eps, dx.row(t), gw.mlp_norm_gain.data());
            for (size_t i = 0; i < dx.data.size(); ++i) dx.data[i] += d_norm.data[i];

            // attention branch: dx = d(x_mid) = d(x_in) + d(mha)
            dcat.data.assign(dcat.data.size(), 0.0);
            for (int t = 0; t < T; ++t) {
                const double* dmha = dx.row(t);
                for (int k = 0; k < d; ++k) {
                    dcat.at(t, k) = dot(lw.attn.w_o.row(k), dmha, d);
                    axpy(a.head_cat.at(t, k), dmha, gw.attn.w_o.row(k), d);
                }
            }
            dq.data.assign(dq.data.size(), 0.0);
            dk.data.assign(dk.data.size(), 0.0);
            dv.data.assign(dv.data.size(), 0.0);
            std::vector<double> dp(T), ds(T);
            for (int h = 0; h < H; ++h) {
                const Mat& p = a.probs[h];
                for (int t = 0; t < T; ++t) {
                    const double* dho = dcat.row(t) + h * hd;
                    const double* prow = p.row(t);
                    for (int s = 0; s <= t; ++s) dp[s] = dot(dho, a.v.row(s) + h * hd, hd);
                    for (int s = 0; s <= t; ++s) axpy(prow[s], dho, dv.row(s) + h * hd, hd);
                    double inner = 0.0;
                    for (int s = 0; s <= t; ++s) inner += dp[s] * prow[s];
                    for (int s = 0; s <= t; ++s) ds[s] = prow[s] * (dp[s] - inner) * inv_sqrt_hd;
                    for (int s = 0; s <= t; ++s) {
                        axpy(ds[s], a.k.row(s) + h * hd, dq.row(t) + h * hd, hd);
                        axpy(ds[s], a.q.row(t) + h * hd, dk.row(s) + h * hd, hd);
                    }
                }
            }
            if (cfg.rope_enabled) {
                for (int t = 0; t < T; ++t)
                    for (int h = 0; h < H; ++h) {
                        rope_rotate(dq.row(t) + h * hd, hd, -t);
                        rope_rotate(dk.row(t) + h * hd, hd, -t);
                    }
            }
            dtmp.data.assign(dtmp.data.size(), 0.0); // d(a_norm)
            for (int t = 0; t < T; ++t) {
                for (int k = 0; k < d; ++k) {
                    dtmp.at(t, k) += dot(lw.attn.w_q.row(k), dq.row(t), d);
                    dtmp.at(t, k) += dot(lw.attn.w_k.row(k), dk.row(t), d);
                    dtmp.at(t, k) += dot(lw.attn.w_v.row(k), dv.row(t), d);
                    axpy(a.a_norm.at(t, k), dq.row(t), gw.attn.w_q.row(k), d);
                    axpy(a.a_norm.at(t, k), dk.row(t), gw.attn.w_k.row(k), d);
                    axpy(a.a_norm.at(t, k), dv.row(t), gw.attn.w_v.row(k), d);
                }
            }
            d_norm.data.assign(d_norm.data.size(), 0.0); // d(x_in)
            for (int t = 0; t < T; ++t)
                rmsnorm_backward(a.x_in.row(t), lw.attn_norm_gain.data(), dtmp.row(t), d,
                                 cfg.norm_eps, d_norm.row(t), gw.attn_norm_gain.data());
            for (size_t i = 0; i < d_norm.data.size(); ++i) d_norm.data[i] += dx.data[i];
        }
        for (int t = 0; t < T; ++t)
            axpy(1.0, d_norm.row(t), demb.row(window[t]), d);

        // ---- Adam ----
        if (opts.grad_clip > 0.0) {
            double sq = 0.0;
            for (auto* g : gparams)
                for (double x : *g) sq += x * x;
            const double gn = std::sqrt(sq);
            if (gn > opts.grad_clip) {
                const double scale = opts.grad_clip / gn;
                for (auto* g : gparams)
                    for (double& x : *g) x *= scale;
            }
        }
        const double t_adam = static_cast<double>(step + 1);
        const double bc1 = 1.0 - std::pow(beta1, t_adam);
        const double bc2 = 1.0 - std::pow(beta2, t_adam);
        for (size_t p = 0; p < params.size(); ++p) {
            auto& w = *params[p];
            auto& g = *gparams[p];
            auto& m = *mparams[p];
            auto& v = *vparams[p];
            for (size_t i = 0; i < w.size(); ++i) {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                w[i] -= opts.lr * mhat / (std::sqrt(vhat) + adam_eps);
            }
        }
    }

    res.ckpt.finalize();
    return res;
}

} // namespace salab
