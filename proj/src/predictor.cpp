#include "salab/predictor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "salab/checkpoint_io.hpp"
#include "salab/rng.hpp"

namespace salab {

using nlohmann::json;

void PredictorArch::validate() const {
    if (input_dim < 1 || hidden_dim < 1 || output_dim < 1)
        throw std::invalid_argument("predictor arch: dims must be >= 1");
}

static double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

Vec PredictorModel::logits(const Vec& input) const {
    if (static_cast<int>(input.size()) != arch.input_dim)
        throw std::invalid_argument("predictor: input dimension mismatch");
    Vec out(arch.output_dim, 0.0);
    if (arch.kind == PredictorArchKind::two_linear) {
        Vec h(arch.hidden_dim);
        for (int i = 0; i < arch.hidden_dim; ++i) {
            const double z = dot(w1.row(i), input.data(), arch.input_dim) + b1[i];
            h[i] = z > 0.0 ? z : 0.0;
        }
        for (int o = 0; o < arch.output_dim; ++o)
            out[o] = dot(w2.row(o), h.data(), arch.hidden_dim) + b2[o];
    } else {
        Vec h(arch.hidden_dim);
        for (int i = 0; i < arch.hidden_dim; ++i) {
            const double g = dot(w_gate.row(i), input.data(), arch.input_dim);
            const double u = dot(w_up.row(i), input.data(), arch.input_dim);
            h[i] = activation_fn(arch.gate_activation, g) * u;
        }
        for (int o = 0; o < arch.output_dim; ++o)
            out[o] = dot(w_down.row(o), h.data(), arch.hidden_dim);
    }
    return out;
}

PredictorModel init_predictor(PredictorArch arch, uint64_t seed, InitKind init,
                              const MlpWeights* down_projection_source) {
    arch.validate();
    Rng rng(seed);
    PredictorModel m;
    m.arch = arch;
    if (arch.kind == PredictorArchKind::two_linear) {
        m.w1 = Mat(arch.hidden_dim, arch.input_dim);
        m.w2 = Mat(arch.output_dim, arch.hidden_dim);
        m.b1.assign(arch.hidden_dim, 0.0);
        m.b2.assign(arch.output_dim, 0.0);
        const double s1 = std::sqrt(2.0 / arch.input_dim);
        const double s2 = std::sqrt(1.0 / arch.hidden_dim);
        for (double& x : m.w1.data) x = rng.normal(0.0, s1);
        for (double& x : m.w2.data) x = rng.normal(0.0, s2);
        if (init == InitKind::down_projection)
            throw std::invalid_argument("predictor: down_projection init needs the mlp_shaped arch");
    } else {
        m.w_gate = Mat(arch.hidden_dim, arch.input_dim);
        m.w_up = Mat(arch.hidden_dim, arch.input_dim);
        m.w_down = Mat(arch.output_dim, arch.hidden_dim);
        const double s_in = std::sqrt(1.0 / arch.input_dim);
        const double s_dn = std::sqrt(1.0 / arch.hidden_dim);
        for (double& x : m.w_gate.data) x = rng.normal(0.0, s_in);
        for (double& x : m.w_up.data) x = rng.normal(0.0, s_in);
        for (double& x : m.w_down.data) x = rng.normal(0.0, s_dn);
        if (init == InitKind::down_projection) {
            if (down_projection_source == nullptr)
                throw std::invalid_argument("predictor: down_projection init needs source weights");
            const Mat& src = down_projection_source->w_out; // d_model x d_hidden
            if (src.cols != arch.output_dim || src.rows != arch.hidden_dim)
                throw std::invalid_argument("predictor: down_projection shape mismatch");
            for (int o = 0; o < arch.output_dim; ++o)
                for (int i = 0; i < arch.hidden_dim; ++i) m.w_down.at(o, i) = src.at(i, o);
        }
    }
    return m;
}

namespace {

struct LossGrad {
    double loss;
    double dlogit;
};

LossGrad unit_loss(double logit, bool positive, LossKind kind, const FocalParams& fp) {
    const double p_raw = sigmoid(logit);
    const double p = std::min(1.0 - 1e-12, std::max(1e-12, p_raw));
    if (kind == LossKind::bce) {
        const double y = positive ? 1.0 : 0.0;
        return {-(y * std::log(p) + (1.0 - y) * std::log(1.0 - p)), p_raw - y};
    }
    // alpha-balanced focal loss
    const double u = positive ? p : 1.0 - p;
    const double a = positive ? fp.alpha : 1.0 - fp.alpha;
    const double loss = -a * std::pow(1.0 - u, fp.gamma) * std::log(u);
    double d = a * std::pow(1.0 - u, fp.gamma) * (fp.gamma * u * std::log(u) - (1.0 - u));
    if (!positive) d = -d;
    return {loss, d};
}

struct AdamState {
    std::vector<Vec> m, v;
    long t = 0;

    explicit AdamState(const std::vector<Vec*>& params) {
        for (const Vec* p : params) {
            m.emplace_back(p->size(), 0.0);
            v.emplace_back(p->size(), 0.0);
        }
    }

    void step(const std::vector<Vec*>& params, const std::vector<Vec*>& grads, double lr) {
        ++t;
        const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
        for (size_t p = 0; p < params.size(); ++p) {
            Vec& w = *params[p];
            const Vec& g = *grads[p];
            for (size_t i = 0; i < w.size(); ++i) {
                m[p][i] = beta1 * m[p][i] + (1.0 - beta1) * g[i];
                v[p][i] = beta2 * v[p][i] + (1.0 - beta2) * g[i] * g[i];
                w[i] -= lr * (m[p][i] / bc1) / (std::sqrt(v[p][i] / bc2) + eps);
            }
        }
    }
};

} // namespace

PredictorTrainResult train_predictor(const LabeledDataset& ds, PredictorArch arch,
                                     TrainPredictorOptions opts) {
    if (ds.examples.empty()) throw std::invalid_argument("train_predictor: empty dataset");
    if (arch.hidden_dim == 0) arch.hidden_dim = ds.input_dim;
    if (arch.input_dim == 0) arch.input_dim = ds.input_dim;
    if (arch.output_dim == 0) arch.output_dim = ds.output_dim;
    arch.validate();
    if (arch.input_dim != ds.input_dim || arch.output_dim != ds.output_dim)
        throw std::invalid_argument("train_predictor: arch does not match dataset dims");
    if (opts.batch_size < 1 || !(opts.lr > 0.0) || opts.epochs < 0)
        throw std::invalid_argument("train_predictor: bad hyperparameters");

    PredictorTrainResult res;
    res.model = init_predictor(arch, opts.seed, opts.init, opts.down_projection_source);
    res.model.target = ds.target;
    res.model.layer = ds.layer;
    res.model.wiring = ds.wiring;
    res.final_loss = std::numeric_limits<double>::quiet_NaN();
    if (opts.epochs == 0) return res;

    PredictorModel& m = res.model;
    const bool linear = arch.kind == PredictorArchKind::two_linear;
    std::vector<Vec*> params = linear
                                   ? std::vector<Vec*>{&m.w1.data, &m.b1, &m.w2.data, &m.b2}
                                   : std::vector<Vec*>{&m.w_gate.data, &m.w_up.data, &m.w_down.data};
    std::vector<Vec> grad_store;
    for (Vec* p : params) grad_store.emplace_back(p->size(), 0.0);
    std::vector<Vec*> grads;
    for (Vec& g : grad_store) grads.push_back(&g);
    AdamState adam(params);

    Rng rng(opts.seed + 0x9e3779b97f4a7c15ull);
    std::vector<int> order(ds.examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    const int U = arch.output_dim;
    const int Hd = arch.hidden_dim;
    const int In = arch.input_dim;
    Vec z1(Hd), hbuf(Hd), gbuf(Hd), ubuf(Hd), logit(U), dlogit(U), dh(Hd);
    long batch_index = 0;

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        rng.shuffle(order);
        double epoch_loss = 0.0;
        long epoch_units = 0;
        for (size_t begin = 0; begin < order.size(); begin += opts.batch_size) {
            const size_t end = std::min(order.size(), begin + opts.batch_size);
            for (Vec& g : grad_store) g.assign(g.size(), 0.0);
            double batch_loss = 0.0;
            const double inv_scale = 1.0 / (static_cast<double>(end - begin) * U);

            for (size_t bi = begin; bi < end; ++bi) {
                const LabeledExample& ex = ds.examples[order[bi]];
                const double* x = ex.input.data();
                if (linear) {
                    for (int i = 0; i < Hd; ++i) {
                        z1[i] = dot(m.w1.row(i), x, In) + m.b1[i];
                        hbuf[i] = z1[i] > 0.0 ? z1[i] : 0.0;
                    }
                    for (int o = 0; o < U; ++o)
                        logit[o] = dot(m.w2.row(o), hbuf.data(), Hd) + m.b2[o];
                } else {
                    for (int i = 0; i < Hd; ++i) {
                        gbuf[i] = dot(m.w_gate.row(i), x, In);
                        ubuf[i] = dot(m.w_up.row(i), x, In);
                        hbuf[i] = activation_fn(arch.gate_activation, gbuf[i]) * ubuf[i];
                    }
                    for (int o = 0; o < U; ++o) logit[o] = dot(m.w_down.row(o), hbuf.data(), Hd);
                }
                for (int o = 0; o < U; ++o) {
                    if (!std::isfinite(logit[o]))
                        throw std::runtime_error("train_predictor: loss diverged at batch " +
                                                 std::to_string(batch_index));
                    const LossGrad lg =
                        unit_loss(logit[o], ex.labels[o] != 0, opts.loss, opts.focal);
                    batch_loss += lg.loss;
                    dlogit[o] = lg.dlogit * inv_scale;
                }
                dh.assign(Hd, 0.0);
                if (linear) {
                    for (int o = 0; o < U; ++o) {
                        axpy(dlogit[o], hbuf.data(), grad_store[2].data() + static_cast<size_t>(o) * Hd, Hd);
                        grad_store[3][o] += dlogit[o];
                        axpy(dlogit[o], m.w2.row(o), dh.data(), Hd);
                    }
                    for (int i = 0; i < Hd; ++i) {
                        const double dz = z1[i] > 0.0 ? dh[i] : 0.0;
                        if (dz != 0.0) {
                            axpy(dz, x, grad_store[0].data() + static_cast<size_t>(i) * In, In);
                            grad_store[1][i] += dz;
                        }
                    }
                } else {
                    for (int o = 0; o < U; ++o) {
                        axpy(dlogit[o], hbuf.data(), grad_store[2].data() + static_cast<size_t>(o) * Hd, Hd);
                        axpy(dlogit[o], m.w_down.row(o), dh.data(), Hd);
                    }
                    for (int i = 0; i < Hd; ++i) {
                        const double act = activation_fn(arch.gate_activation, gbuf[i]);
                        const double dgi = dh[i] * ubuf[i] * activation_grad(arch.gate_activation, gbuf[i]);
                        const double dui = dh[i] * act;
                        if (dgi != 0.0)
                            axpy(dgi, x, grad_store[0].data() + static_cast<size_t>(i) * In, In);
                        if (dui != 0.0)
                            axpy(dui, x, grad_store[1].data() + static_cast<size_t>(i) * In, In);
                    }
                }
            }
            if (!std::isfinite(batch_loss))
                throw std::runtime_error("train_predictor: loss diverged at batch " +
                                         std::to_string(batch_index));
            adam.step(params, grads, opts.lr);
            epoch_loss += batch_loss;
            epoch_units += static_cast<long>((end - begin)) * U;
            ++batch_index;
        }
        res.epoch_losses.push_back(epoch_loss / static_cast<double>(epoch_units));
    }
    res.final_loss = res.epoch_losses.back();
    return res;
}

std::vector<int> predict_active(const PredictorModel& m, const Vec& input) {
    const Vec z = m.logits(input);
    if (m.selection.rule == SelectionRule::topk) return select_topk(z, m.selection.k);
    std::vector<int> active;
    for (int i = 0; i < static_cast<int>(z.size()); ++i)
        if (sigmoid(z[i]) > m.selection.tau) active.push_back(i);
    return active;
}

PredictorMetrics evaluate_predictor(const PredictorModel& m, const LabeledDataset& heldout) {
    if (heldout.examples.empty()) throw std::invalid_argument("evaluate_predictor: empty dataset");
    PredictorMetrics out;
    long predicted_active = 0, actual_active = 0, tp = 0;
    long units = 0;
    std::vector<uint8_t> flags(heldout.output_dim);
    for (const auto& ex : heldout.examples) {
        const std::vector<int> pred = predict_active(m, ex.input);
        std::fill(flags.begin(), flags.end(), 0);
        for (int i : pred) flags[i] = 1;
        predicted_active += static_cast<long>(pred.size());
        for (int i = 0; i < heldout.output_dim; ++i) {
            if (ex.labels[i]) {
                ++actual_active;
                if (flags[i]) ++tp;
            }
        }
        units += heldout.output_dim;
    }
    out.examples = static_cast<long>(heldout.examples.size());
    out.true_positive = tp;
    out.actual_positive = actual_active;
    out.recall_defined = actual_active > 0;
    out.recall = out.recall_defined ? static_cast<double>(tp) / actual_active : 0.0;
    out.predicted_sparsity = 1.0 - static_cast<double>(predicted_active) / units;
    out.real_sparsity = 1.0 - static_cast<double>(actual_active) / units;
    out.sparsity_delta = out.real_sparsity - out.predicted_sparsity;
    return out;
}

AggregateMetrics evaluate_predictors(const std::vector<PredictorModel>& models,
                                     const std::vector<LabeledDataset>& heldout) {
    if (models.size() != heldout.size())
        throw std::invalid_argument("evaluate_predictors: model/dataset count mismatch");
    AggregateMetrics agg;
    long tp = 0, ap = 0, pred_active_units = 0, real_inactive = 0, units = 0, examples = 0;
    double recall_sum = 0.0, pred_sum = 0.0, real_sum = 0.0;
    int defined = 0;
    for (size_t i = 0; i < models.size(); ++i) {
        PredictorMetrics pm = evaluate_predictor(models[i], heldout[i]);
        tp += pm.true_positive;
        ap += pm.actual_positive;
        const long layer_units = pm.examples * heldout[i].output_dim;
        pred_active_units += layer_units - static_cast<long>(pm.predicted_sparsity * layer_units + 0.5);
        real_inactive += static_cast<long>(pm.real_sparsity * layer_units + 0.5);
        units += layer_units;
        examples += pm.examples;
        if (pm.recall_defined) {
            recall_sum += pm.recall;
            ++defined;
        }
        pred_sum += pm.predicted_sparsity;
        real_sum += pm.real_sparsity;
        agg.per_layer.push_back(std::move(pm));
    }
    const double n = static_cast<double>(models.size());
    agg.macro.recall_defined = defined > 0;
    agg.macro.recall = defined > 0 ? recall_sum / defined : 0.0;
    agg.macro.predicted_sparsity = pred_sum / n;
    agg.macro.real_sparsity = real_sum / n;
    agg.macro.sparsity_delta = agg.macro.real_sparsity - agg.macro.predicted_sparsity;
    agg.macro.examples = examples;

    agg.micro.recall_defined = ap > 0;
    agg.micro.recall = ap > 0 ? static_cast<double>(tp) / ap : 0.0;
    agg.micro.predicted_sparsity = 1.0 - static_cast<double>(pred_active_units) / units;
    agg.micro.real_sparsity = static_cast<double>(real_inactive) / units;
    agg.micro.sparsity_delta = agg.micro.real_sparsity - agg.micro.predicted_sparsity;
    agg.micro.examples = examples;
    agg.micro.true_positive = tp;
    agg.micro.actual_positive = ap;
    return agg;
}

TrainingData collect_training_data(const Checkpoint& ckpt, const std::vector<int>& tokens,
                                   const ThresholdTable* mlp_tt, const ThresholdTable* attn_tt,
                                   PredictorWiring wiring, long token_idx_offset) {
    if (tokens.empty()) throw std::invalid_argument("collect_training_data: empty corpus slice");
    if (mlp_tt == nullptr && attn_tt == nullptr)
        throw std::invalid_argument("collect_training_data: no threshold table given");
    const ModelConfig& cfg = ckpt.config;

    TrainingData data;
    auto make_ds = [&](PredictorTarget target, int layer, int output_dim, double eps) {
        LabeledDataset ds;
        ds.input_dim = cfg.d_model;
        ds.output_dim = output_dim;
        ds.layer = layer;
        ds.target = target;
        ds.wiring = wiring;
        ds.labeling_threshold = eps;
        ds.wiring_fallback_serial = wiring == PredictorWiring::prepositioned && layer == 0;
        return ds;
    };
    if (mlp_tt)
        for (int l = 0; l < cfg.n_layers; ++l)
            data.mlp.push_back(make_ds(PredictorTarget::mlp_neurons, l, cfg.d_hidden,
                                       mlp_tt->threshold_for_layer(l)));
    if (attn_tt)
        for (int l = 0; l < cfg.n_layers; ++l)
            data.attn.push_back(make_ds(PredictorTarget::attention_heads, l, cfg.n_heads,
                                        attn_tt->threshold_for_layer(l)));

    long token_idx = token_idx_offset;
    const int window = cfg.max_seq_len;
    for (size_t start = 0; start < tokens.size(); start += window) {
        const size_t end = std::min(tokens.size(), start + window);
        std::vector<int> chunk(tokens.begin() + start, tokens.begin() + end);
        const ForwardResult r = dense_forward(ckpt, chunk, TraceLevel::full);
        for (const auto& token_recs : r.trace.tokens) {
            for (int l = 0; l < cfg.n_layers; ++l) {
                const LayerRecord& rec = token_recs[l];
                if (mlp_tt) {
                    LabeledExample ex;
                    ex.token_idx = token_idx;
                    ex.layer = l;
                    ex.input = wiring == PredictorWiring::serial ? rec.mha_output : rec.attn_input;
                    const double eps = mlp_tt->threshold_for_layer(l);
                    ex.labels.resize(cfg.d_hidden);
                    for (int i = 0; i < cfg.d_hidden; ++i)
                        ex.labels[i] = rec.neuron_magnitudes[i] >= eps ? 1 : 0;
                    data.mlp[l].examples.push_back(std::move(ex));
                }
                if (attn_tt) {
                    LabeledExample ex;
                    ex.token_idx = token_idx;
                    ex.layer = l;
                    if (wiring == PredictorWiring::serial || l == 0)
                        ex.input = rec.attn_input;
                    else
                        ex.input = token_recs[l - 1].mlp_input;
                    const double eps = attn_tt->threshold_for_layer(l);
                    ex.labels.resize(cfg.n_heads);
                    for (int i = 0; i < cfg.n_heads; ++i)
                        ex.labels[i] = rec.head_out_norms[i] > eps ? 1 : 0;
                    data.attn[l].examples.push_back(std::move(ex));
                }
            }
            ++token_idx;
        }
    }
    return data;
}

SelectionStrategy wire_into_model(const Checkpoint& ckpt, std::vector<PredictorModel> per_layer,
                                  PredictorWiring wiring) {
    if (static_cast<int>(per_layer.size()) != ckpt.config.n_layers)
        throw std::invalid_argument("wire_into_model: need one predictor per layer");
    auto models = std::make_shared<std::vector<PredictorModel>>(std::move(per_layer));
    ActivePredictorFn fn = [models](int layer, int /*position*/, const Vec& input) {
        return predict_active((*models)[layer], input);
    };
    return SelectionStrategy::with_predictor(std::move(fn), wiring);
}

// ---- dataset and predictor files ----

void save_predictor(const PredictorModel& m, const std::string& path) {
    json j;
    j["kind"] = "predictor";
    json p;
    p["arch"] = {{"kind", m.arch.kind == PredictorArchKind::two_linear ? "two_linear" : "mlp_shaped"},
                 {"input_dim", m.arch.input_dim},
                 {"hidden_dim", m.arch.hidden_dim},
                 {"output_dim", m.arch.output_dim},
                 {"gate_activation", to_string(m.arch.gate_activation)}};
    p["selection"] = {{"rule", m.selection.rule == SelectionRule::sigmoid_threshold
                                   ? "sigmoid_threshold"
                                   : "topk"},
                      {"tau", m.selection.tau},
                      {"k", m.selection.k}};
    p["target"] = m.target == PredictorTarget::mlp_neurons ? "mlp_neurons" : "attention_heads";
    p["layer"] = m.layer;
    p["wiring"] = m.wiring == PredictorWiring::serial ? "serial" : "prepositioned";
    j["predictor"] = p;

    auto mat_tensor = [](const Mat& mat) {
        NamedTensor t;
        t.shape = {static_cast<uint64_t>(mat.rows), static_cast<uint64_t>(mat.cols)};
        t.data = mat.data;
        return t;
    };
    auto vec_tensor = [](const Vec& v) {
        NamedTensor t;
        t.shape = {static_cast<uint64_t>(v.size())};
        t.data = v;
        return t;
    };
    std::vector<std::pair<std::string, NamedTensor>> tensors;
    if (m.arch.kind == PredictorArchKind::two_linear) {
        tensors.emplace_back("w1", mat_tensor(m.w1));
        tensors.emplace_back("b1", vec_tensor(m.b1));
        tensors.emplace_back("w2", mat_tensor(m.w2));
        tensors.emplace_back("b2", vec_tensor(m.b2));
    } else {
        tensors.emplace_back("w_gate", mat_tensor(m.w_gate));
        tensors.emplace_back("w_up", mat_tensor(m.w_up));
        tensors.emplace_back("w_down", mat_tensor(m.w_down));
    }
    write_container(path, j.dump(), tensors);
}

PredictorModel load_predictor(const std::string& path) {
    const Container c = read_container(path);
    const json j = json::parse(c.json_header);
    if (j.at("kind").get<std::string>() != "predictor")
        throw std::runtime_error("predictor: container does not hold a predictor");
    const json& p = j.at("predictor");
    PredictorModel m;
    const json& a = p.at("arch");
    m.arch.kind = a.at("kind").get<std::string>() == "two_linear" ? PredictorArchKind::two_linear
                                                                  : PredictorArchKind::mlp_shaped;
    m.arch.input_dim = a.at("input_dim").get<int>();
    m.arch.hidden_dim = a.at("hidden_dim").get<int>();
    m.arch.output_dim = a.at("output_dim").get<int>();
    m.arch.gate_activation = activation_from_string(a.at("gate_activation").get<std::string>());
    const json& s = p.at("selection");
    m.selection.rule = s.at("rule").get<std::string>() == "topk" ? SelectionRule::topk
                                                                 : SelectionRule::sigmoid_threshold;
    m.selection.tau = s.at("tau").get<double>();
    m.selection.k = s.at("k").get<int>();
    m.target = p.at("target").get<std::string>() == "mlp_neurons" ? PredictorTarget::mlp_neurons
                                                                  : PredictorTarget::attention_heads;
    m.layer = p.at("layer").get<int>();
    m.wiring = p.at("wiring").get<std::string>() == "serial" ? PredictorWiring::serial
                                                             : PredictorWiring::prepositioned;

    auto get_mat = [&](const std::string& name) {
        const NamedTensor& t = c.tensors.at(name);
        if (t.shape.size() != 2) throw std::runtime_error("predictor: tensor " + name + " not 2-d");
        Mat mat(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]));
        mat.data = t.data;
        return mat;
    };
    if (m.arch.kind == PredictorArchKind::two_linear) {
        m.w1 = get_mat("w1");
        m.w2 = get_mat("w2");
        m.b1 = c.tensors.at("b1").data;
        m.b2 = c.tensors.at("b2").data;
    } else {
        m.w_gate = get_mat("w_gate");
        m.w_up = get_mat("w_up");
        m.w_down = get_mat("w_down");
    }
    m.arch.validate();
    return m;
}

namespace {

constexpr char kDatasetMagic[4] = {'S', 'A', 'L', 'D'};

void write_u32(std::ostream& out, uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& out, uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }

uint32_t read_u32(std::istream& in) {
    uint32_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw std::runtime_error("dataset: truncated");
    return v;
}

uint64_t read_u64(std::istream& in) {
    uint64_t v = 0;
    if (!in.read(reinterpret_cast<char*>(&v), 8)) throw std::runtime_error("dataset: truncated");
    return v;
}

} // namespace

void save_dataset(const LabeledDataset& ds, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("dataset: cannot open " + path);
    out.write(kDatasetMagic, 4);
    write_u32(out, 1);
    write_u32(out, static_cast<uint32_t>(ds.input_dim));
    write_u32(out, static_cast<uint32_t>(ds.output_dim));
    write_u32(out, ds.target == PredictorTarget::mlp_neurons ? 0 : 1);
    write_u32(out, ds.wiring == PredictorWiring::serial ? 0 : 1);
    write_u32(out, static_cast<uint32_t>(ds.layer));
    out.write(reinterpret_cast<const char*>(&ds.labeling_threshold), 8);
    write_u32(out, ds.wiring_fallback_serial ? 1 : 0);
    write_u64(out, ds.examples.size());
    const size_t label_bytes = (ds.output_dim + 7) / 8;
    std::vector<uint8_t> packed(label_bytes);
    std::vector<float> f32(ds.input_dim);
    for (const auto& ex : ds.examples) {
        write_u32(out, static_cast<uint32_t>(ex.input.size()));
        for (size_t i = 0; i < ex.input.size(); ++i) f32[i] = static_cast<float>(ex.input[i]);
        out.write(reinterpret_cast<const char*>(f32.data()),
                  static_cast<std::streamsize>(f32.size() * sizeof(float)));
        write_u64(out, static_cast<uint64_t>(ex.token_idx));
        std::fill(packed.begin(), packed.end(), 0);
        for (int i = 0; i < ds.output_dim; ++i)
            if (ex.labels[i]) packed[i / 8] |= static_cast<uint8_t>(1u << (i % 8));
        out.write(reinterpret_cast<const char*>(packed.data()),
                  static_cast<std::streamsize>(packed.size()));
    }
    if (!out) throw std::runtime_error("dataset: write failed for " + path);
}

LabeledDataset load_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("dataset: cannot open " + path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kDatasetMagic, 4) != 0)
        throw std::runtime_error("dataset: bad magic");
    if (read_u32(in) != 1) throw std::runtime_error("dataset: unsupported version");
    LabeledDataset ds;
    ds.input_dim = static_cast<int>(read_u32(in));
    ds.output_dim = static_cast<int>(read_u32(in));
    ds.target = read_u32(in) == 0 ? PredictorTarget::mlp_neurons : PredictorTarget::attention_heads;
    ds.wiring = read_u32(in) == 0 ? PredictorWiring::serial : PredictorWiring::prepositioned;
    ds.layer = static_cast<int>(read_u32(in));
    if (!in.read(reinterpret_cast<char*>(&ds.labeling_threshold), 8))
        throw std::runtime_error("dataset: truncated");
    ds.wiring_fallback_serial = read_u32(in) != 0;
    const uint64_t count = read_u64(in);
    const size_t label_bytes = (ds.output_dim + 7) / 8;
    std::vector<uint8_t> packed(label_bytes);
    for (uint64_t e = 0; e < count; ++e) {
        LabeledExample ex;
        const uint32_t len = read_u32(in);
        std::vector<float> f32(len);
        if (!in.read(reinterpret_cast<char*>(f32.data()),
                     static_cast<std::streamsize>(len * sizeof(float))))
            throw std::runtime_error("dataset: truncated");
        ex.input.assign(f32.begin(), f32.end());
        ex.token_idx = static_cast<long>(read_u64(in));
        if (!in.read(reinterpret_cast<char*>(packed.data()),
                     static_cast<std::streamsize>(packed.size())))
            throw std::runtime_error("dataset: truncated");
        ex.labels.resize(ds.output_dim);
        for (int i = 0; i < ds.output_dim; ++i)
            ex.labels[i] = (packed[i / 8] >> (i % 8)) & 1u;
        ex.layer = ds.layer;
        ds.examples.push_back(std::move(ex));
    }
    return ds;
}

} // namespace salab
