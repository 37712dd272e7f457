#include "salab/calibrate.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace salab {

int CalibrationSet::n_layers() const {
    for (const auto& tr : traces)
        if (!tr.empty()) return tr.n_layers;
    return 0;
}

CalibrationSet collect_calibration(std::shared_ptr<const Checkpoint> ckpt,
                                   const std::vector<int>& tokens, TraceLevel level) {
    if (!ckpt) throw std::invalid_argument("collect_calibration: null checkpoint");
    CalibrationSet cal;
    cal.model = ckpt;
    const int window = ckpt->config.max_seq_len;
    for (size_t start = 0; start < tokens.size(); start += window) {
        const size_t end = std::min(tokens.size(), start + window);
        std::vector<int> chunk(tokens.begin() + start, tokens.begin() + end);
        ForwardResult r = dense_forward(*ckpt, chunk, level);
        cal.token_count += static_cast<long>(chunk.size());
        cal.traces.push_back(std::move(r.trace));
    }
    return cal;
}

std::string to_string(BlockKind b) { return b == BlockKind::mlp ? "mlp" : "attention"; }
std::string to_string(ThresholdMode m) {
    return m == ThresholdMode::universal ? "universal" : "layer_wise";
}

double ThresholdTable::threshold_for_layer(int layer) const {
    if (thresholds.empty()) throw std::invalid_argument("threshold table: empty");
    if (thresholds.size() == 1) return thresholds[0];
    if (layer < 0 || layer >= static_cast<int>(thresholds.size()))
        throw std::invalid_argument("threshold table: layer out of range");
    return thresholds[layer];
}

double cett_mlp(const LayerRecord& rec, const MlpWeights& w, const Vec& y, double eps,
                Activation kind) {
    if (eps < 0.0) throw std::invalid_argument("cett_mlp: eps must be >= 0");
    if (rec.neuron_magnitudes.empty())
        throw std::invalid_argument("cett_mlp: record has no neuron magnitudes");
    const Vec full = mlp_forward(w, y, kind);
    const double denom = norm2(full);
    if (denom == 0.0) throw UndefinedCettError("cett_mlp: zero-norm block output");

    std::vector<int> dropped;
    for (int i = 0; i < static_cast<int>(rec.neuron_magnitudes.size()); ++i)
        if (rec.neuron_magnitudes[i] < eps) dropped.push_back(i);
    if (dropped.empty()) return 0.0;

    Vec h;
    mlp_hidden(w, y, kind, h);
    Vec tail;
    accumulate_neurons(w, h, &dropped, tail);
    return norm2(tail) / denom;
}

namespace {

// contribution of one head to the output projection: head_row . W_o rows of
// its slice, accumulated into out.
void head_contribution(const Mat& w_o, const double* head_row, int head, int d_head, double* out) {
    for (int j = 0; j < d_head; ++j) {
        const int k = head * d_head + j;
        axpy(head_row[j], w_o.row(k), out, w_o.cols);
    }
}

Vec masked_projection(const LayerRecord& rec, const Mat& w_o, const std::vector<uint8_t>& keep) {
    const int n_heads = rec.head_outputs.rows;
    const int d_head = rec.head_outputs.cols;
    Vec concat(static_cast<size_t>(n_heads) * d_head, 0.0);
    for (int h = 0; h < n_heads; ++h) {
        if (!keep[h]) continue;
        const double* row = rec.head_outputs.row(h);
        std::copy(row, row + d_head, concat.begin() + static_cast<size_t>(h) * d_head);
    }
    Vec out(w_o.cols, 0.0);
    vecmat_slice(concat.data(), w_o, 0, w_o.cols, out.data());
    return out;
}

void require_head_outputs(const LayerRecord& rec, const char* who) {
    if (rec.head_outputs.rows == 0)
        throw std::invalid_argument(std::string(who) +
                                    ": record lacks head outputs (needs a full-level trace)");
}

} // namespace

double cett_attention(const LayerRecord& rec, const Mat& w_o, double eps) {
    if (eps < 0.0) throw std::invalid_argument("cett_attention: eps must be >= 0");
    require_head_outputs(rec, "cett_attention");
    const double denom = rec.mha_out_norm;
    if (denom == 0.0) throw UndefinedCettError("cett_attention: zero-norm block output");
    const int n_heads = rec.head_outputs.rows;
    std::vector<uint8_t> keep(n_heads);
    for (int h = 0; h < n_heads; ++h) keep[h] = rec.head_out_norms[h] > eps ? 1 : 0;
    const Vec retained = masked_projection(rec, w_o, keep);
    return 1.0 - norm2(retained) / denom;
}

double cett_attention_tail(const LayerRecord& rec, const Mat& w_o, double eps) {
    if (eps < 0.0) throw std::invalid_argument("cett_attention_tail: eps must be >= 0");
    require_head_outputs(rec, "cett_attention_tail");
    const double denom = rec.mha_out_norm;
    if (denom == 0.0) throw UndefinedCettError("cett_attention_tail: zero-norm block output");
    const int n_heads = rec.head_outputs.rows;
    std::vector<uint8_t> dropped(n_heads);
    for (int h = 0; h < n_heads; ++h) dropped[h] = rec.head_out_norms[h] > eps ? 0 : 1;
    const Vec tail = masked_projection(rec, w_o, dropped);
    return norm2(tail) / denom;
}

namespace {

// Per-record truncation curve: unit magnitudes sorted ascending and the CETT
// value after dropping the j smallest units. Evaluating any threshold then
// costs one binary search, which is what makes the bisection and the sweep
// over many targets affordable.
struct RecordCurve {
    Vec mags;    // ascending
    Vec cett_at; // size units+1; cett_at[j] = CETT with j units dropped
};

struct CettCurves {
    BlockKind block = BlockKind::mlp;
    std::vector<std::vector<RecordCurve>> by_layer;
    std::vector<long> skipped_by_layer;
    std::vector<double> max_mag_by_layer;

    long records(int layer) const { return static_cast<long>(by_layer[layer].size()); }
    long total_records() const {
        long n = 0;
        for (const auto& v : by_layer) n += static_cast<long>(v.size());
        return n;
    }
    long total_skipped() const {
        return std::accumulate(skipped_by_layer.begin(), skipped_by_layer.end(), 0L);
    }
    double max_mag(int layer) const { // layer < 0: pooled
        if (layer >= 0) return max_mag_by_layer[layer];
        double m = 0.0;
        for (double x : max_mag_by_layer) m = std::max(m, x);
        return m;
    }

    static double eval_record(const RecordCurve& rc, double eps, BlockKind block) {
        // mlp drops magnitudes strictly below eps; attention drops norms <= eps
        const auto cnt = block == BlockKind::mlp
                             ? std::lower_bound(rc.mags.begin(), rc.mags.end(), eps) - rc.mags.begin()
                             : std::upper_bound(rc.mags.begin(), rc.mags.end(), eps) - rc.mags.begin();
        return rc.cett_at[static_cast<size_t>(cnt)];
    }

    // mean or max CETT over records in scope (layer < 0: pooled)
    double aggregate(double eps, int layer, CettAggregate agg) const {
        double sum = 0.0, mx = 0.0;
        long n = 0;
        const int lo = layer >= 0 ? layer : 0;
        const int hi = layer >= 0 ? layer + 1 : static_cast<int>(by_layer.size());
        for (int l = lo; l < hi; ++l) {
            for (const auto& rc : by_layer[l]) {
                const double c = eval_record(rc, eps, block);
                sum += c;
                mx = std::max(mx, c);
                ++n;
            }
        }
        if (n == 0) throw UndefinedCettError("cett: no evaluable records in scope");
        return agg == CettAggregate::mean ? sum / static_cast<double>(n) : mx;
    }

    double sparsity(double eps, int layer) const {
        double sum = 0.0;
        long n = 0;
        for (const auto& rc : by_layer[layer]) {
            const auto cnt = block == BlockKind::mlp
                                 ? std::lower_bound(rc.mags.begin(), rc.mags.end(), eps) - rc.mags.begin()
                                 : std::upper_bound(rc.mags.begin(), rc.mags.end(), eps) - rc.mags.begin();
            sum += static_cast<double>(cnt) / static_cast<double>(rc.mags.size());
            ++n;
        }
        return n > 0 ? sum / static_cast<double>(n) : 0.0;
    }

    // distinct observed magnitudes in (lo, hi] for the scope (layer < 0: pooled)
    std::vector<double> grid_in_range(int layer, double lo, double hi) const {
        std::vector<double> out;
        const int l0 = layer >= 0 ? layer : 0;
        const int l1 = layer >= 0 ? layer + 1 : static_cast<int>(by_layer.size());
        for (int l = l0; l < l1; ++l)
            for (const auto& rc : by_layer[l]) {
                auto a = std::upper_bound(rc.mags.begin(), rc.mags.end(), lo);
                auto b = std::upper_bound(rc.mags.begin(), rc.mags.end(), hi);
                out.insert(out.end(), a, b);
            }
        std::sort(out.begin(), out.end());
        out.erase(std::unique(out.begin(), out.end()), out.end());
        return out;
    }
};

CettCurves build_curves(const CalibrationSet& cal, const Checkpoint& ckpt, BlockKind block) {
    CettCurves curves;
    curves.block = block;
    const int n_layers = ckpt.config.n_layers;
    curves.by_layer.resize(n_layers);
    curves.skipped_by_layer.assign(n_layers, 0);
    curves.max_mag_by_layer.assign(n_layers, 0.0);

    for (const auto& trace : cal.traces) {
        if (trace.level != TraceLevel::full)
            throw std::invalid_argument("calibration: threshold work needs full-level traces");
        for (const auto& token_recs : trace.tokens) {
            for (int l = 0; l < n_layers; ++l) {
                const LayerRecord& rec = token_recs[l];
                RecordCurve rc;
                if (block == BlockKind::mlp) {
                    if (rec.mlp_out_norm == 0.0) {
                        ++curves.skipped_by_layer[l];
                        continue;
                    }
                    const MlpWeights& w = ckpt.layers[l].mlp;
                    Vec h;
                    mlp_hidden(w, rec.mlp_input, ckpt.config.activation, h);
                    const int dh = static_cast<int>(h.size());
                    std::vector<int> order(dh);
                    for (int i = 0; i < dh; ++i) order[i] = i;
                    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                        return rec.neuron_magnitudes[a] < rec.neuron_magnitudes[b];
                    });
                    rc.mags.resize(dh);
                    rc.cett_at.assign(dh + 1, 0.0);
                    Vec run(ckpt.config.d_model, 0.0);
                    for (int j = 0; j < dh; ++j) {
                        const int i = order[j];
                        rc.mags[j] = rec.neuron_magnitudes[i];
                        for (int r = 0; r < ckpt.config.d_model; ++r)
                            run[r] += h[i] * w.w_out.at(r, i);
                        rc.cett_at[j + 1] = norm2(run) / rec.mlp_out_norm;
                    }
                } else {
                    require_head_outputs(rec, "calibration");
                    if (rec.mha_out_norm == 0.0) {
                        ++curves.skipped_by_layer[l];
                        continue;
                    }
                    const Mat& w_o = ckpt.layers[l].attn.w_o;
                    const int n_heads = rec.head_outputs.rows;
                    const int d_head = rec.head_outputs.cols;
                    std::vector<int> order(n_heads);
                    for (int i = 0; i < n_heads; ++i) order[i] = i;
                    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
                        return rec.head_out_norms[a] < rec.head_out_norms[b];
                    });
                    // full output, accumulated per component in ascending k, so
                    // dropping zero heads reproduces the recorded norm exactly
                    Vec full(w_o.cols, 0.0);
                    for (int h = 0; h < n_heads; ++h)
                        head_contribution(w_o, rec.head_outputs.row(h), h, d_head, full.data());
                    rc.mags.resize(n_heads);
                    rc.cett_at.assign(n_heads + 1, 0.0);
                    rc.cett_at[0] = 1.0 - norm2(full) / rec.mha_out_norm;
                    Vec run(w_o.cols, 0.0);
                    Vec rem(w_o.cols);
                    for (int j = 0; j < n_heads; ++j) {
                        const int hidx = order[j];
                        rc.mags[j] = rec.head_out_norms[hidx];
                        head_contribution(w_o, rec.head_outputs.row(hidx), hidx, d_head, run.data());
                        for (int r = 0; r < w_o.cols; ++r) rem[r] = full[r] - run[r];
                        rc.cett_at[j + 1] = 1.0 - norm2(rem) / rec.mha_out_norm;
                    }
                }
                if (!rc.mags.empty())
                    curves.max_mag_by_layer[l] = std::max(curves.max_mag_by_layer[l], rc.mags.back());
                curves.by_layer[l].push_back(std::move(rc));
            }
        }
    }
    return curves;
}

double bisect_threshold(const CettCurves& curves, int layer, double target, const SearchOptions& opts) {
    const double hi_bound = curves.max_mag(layer);
    if (hi_bound <= 0.0) return 0.0; // every unit already exactly zero
    if (curves.aggregate(hi_bound, layer, opts.aggregate) <= target) return hi_bound;
    double lo = 0.0, hi = hi_bound;
    for (int it = 0; it < opts.max_iters && (hi - lo) > opts.tol; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (curves.aggregate(mid, layer, opts.aggregate) <= target)
            lo = mid; // ties resolve toward the larger epsilon
        else
            hi = mid;
    }
    // the aggregate is piecewise constant between observed magnitudes, so the
    // maximal feasible threshold is a grid value inside the final bracket;
    // snap up to it rather than returning the raw bisection iterate
    const std::vector<double> grid = curves.grid_in_range(layer, lo, hi);
    for (auto it = grid.rbegin(); it != grid.rend(); ++it)
        if (curves.aggregate(*it, layer, opts.aggregate) <= target) return *it;
    return lo;
}

} // namespace

ThresholdTable search_threshold(const CalibrationSet& cal, const Checkpoint& ckpt, BlockKind block,
                                ThresholdMode mode, double cett_target, SearchOptions opts) {
    if (!(cett_target >= 0.0 && cett_target < 1.0))
        throw std::invalid_argument("search_threshold: cett_target must be in [0, 1)");
    if (!(opts.tol > 0.0)) throw std::invalid_argument("search_threshold: tol must be positive");
    if (cal.token_count <= 0 || cal.traces.empty())
        throw std::invalid_argument("search_threshold: empty calibration set");

    const CettCurves curves = build_curves(cal, ckpt, block);
    if (curves.total_records() == 0)
        throw UndefinedCettError("search_threshold: all records undefined");

    const int n_layers = ckpt.config.n_layers;
    ThresholdTable tt;
    tt.block = block;
    tt.mode = mode;
    tt.cett_target = cett_target;
    tt.tol = opts.tol;
    tt.skipped_records = curves.total_skipped();

    if (mode == ThresholdMode::universal) {
        tt.thresholds = {bisect_threshold(curves, -1, cett_target, opts)};
        tt.scope_mean_cett = curves.aggregate(tt.thresholds[0], -1, opts.aggregate);
    } else {
        tt.thresholds.resize(n_layers);
        for (int l = 0; l < n_layers; ++l)
            tt.thresholds[l] = curves.records(l) > 0
                                   ? bisect_threshold(curves, l, cett_target, opts)
                                   : 0.0;
        double sum = 0.0;
        long n = 0;
        for (int l = 0; l < n_layers; ++l) {
            for (const auto& rc : curves.by_layer[l]) {
                sum += CettCurves::eval_record(rc, tt.thresholds[l], block);
                ++n;
            }
        }
        tt.scope_mean_cett = n > 0 ? sum / static_cast<double>(n) : 0.0;
    }

    tt.achieved_cett.assign(n_layers, 0.0);
    tt.achieved_sparsity.assign(n_layers, 0.0);
    for (int l = 0; l < n_layers; ++l) {
        const double eps = tt.threshold_for_layer(l);
        if (curves.records(l) > 0) {
            tt.achieved_cett[l] = curves.aggregate(eps, l, CettAggregate::mean);
            tt.achieved_sparsity[l] = curves.sparsity(eps, l);
        }
    }
    return tt;
}

SparsityReport measure_sparsity(const CalibrationSet& cal, const ThresholdTable& tt) {
    const int n_layers = cal.n_layers();
    if (n_layers == 0) throw std::invalid_argument("measure_sparsity: empty calibration set");
    if (tt.thresholds.size() != 1 && static_cast<int>(tt.thresholds.size()) != n_layers)
        throw std::invalid_argument("measure_sparsity: layer/threshold mismatch");

    SparsityReport rep;
    rep.per_layer_sparsity.assign(n_layers, 0.0);
    rep.per_layer_mean_cett.assign(n_layers, std::numeric_limits<double>::quiet_NaN());
    std::vector<long> counts(n_layers, 0);

    for (const auto& trace : cal.traces) {
        for (const auto& token_recs : trace.tokens) {
            rep.token_count += 1;
            for (int l = 0; l < n_layers; ++l) {
                const LayerRecord& rec = token_recs[l];
                const double eps = tt.threshold_for_layer(l);
                long below = 0;
                long total = 0;
                if (tt.block == BlockKind::mlp) {
                    total = static_cast<long>(rec.neuron_magnitudes.size());
                    for (double m : rec.neuron_magnitudes)
                        if (m < eps) ++below;
                } else {
                    total = static_cast<long>(rec.head_out_norms.size());
                    for (double m : rec.head_out_norms)
                        if (m <= eps) ++below;
                }
                if (total == 0) throw std::invalid_argument("measure_sparsity: empty record");
                rep.per_layer_sparsity[l] += static_cast<double>(below) / static_cast<double>(total);
                ++counts[l];
            }
        }
    }
    for (int l = 0; l < n_layers; ++l)
        if (counts[l] > 0) rep.per_layer_sparsity[l] /= static_cast<double>(counts[l]);

    // mean CETT needs the tail structure, which imported traces do not carry
    if (cal.model) {
        bool full = true;
        for (const auto& t : cal.traces)
            if (t.level != TraceLevel::full) full = false;
        if (full) {
            const CettCurves curves = build_curves(cal, *cal.model, tt.block);
            rep.skipped_records = curves.total_skipped();
            for (int l = 0; l < n_layers; ++l)
                if (curves.records(l) > 0)
                    rep.per_layer_mean_cett[l] =
                        curves.aggregate(tt.threshold_for_layer(l), l, CettAggregate::mean);
        }
    }

    double sum = 0.0;
    for (double s : rep.per_layer_sparsity) sum += s;
    rep.mean_sparsity = n_layers > 0 ? sum / n_layers : 0.0;
    return rep;
}

} // namespace salab
