#pragma once

#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "salab/model.hpp"

namespace salab {

// Traces collected from a dense pass over a token stream, the substrate for
// threshold search, sparsity measurement and predictor labeling. `model` is
// the checkpoint the traces came from; imported trace files leave it null,
// which restricts the set to magnitude-only operations.
struct CalibrationSet {
    std::vector<ForwardTrace> traces; // one per window
    long token_count = 0;
    std::string source_digest;
    std::shared_ptr<const Checkpoint> model;

    int n_layers() const;
};

// Windows the stream to max_seq_len and runs traced dense passes.
CalibrationSet collect_calibration(std::shared_ptr<const Checkpoint> ckpt,
                                   const std::vector<int>& tokens,
                                   TraceLevel level = TraceLevel::full);

enum class BlockKind { mlp, attention };
enum class ThresholdMode { universal, layer_wise };
enum class CettAggregate { mean, max };

std::string to_string(BlockKind b);
std::string to_string(ThresholdMode m);

struct ThresholdTable {
    BlockKind block = BlockKind::mlp;
    ThresholdMode mode = ThresholdMode::universal;
    double cett_target = 0.0;
    std::vector<double> thresholds;        // length 1 (universal) or n_layers
    std::vector<double> achieved_cett;     // per layer, at the chosen threshold
    std::vector<double> achieved_sparsity; // per layer
    double scope_mean_cett = 0.0;          // search objective at the returned threshold(s)
    long skipped_records = 0;              // zero-norm block outputs
    double tol = 1e-6;

    double threshold_for_layer(int layer) const;
};

struct SparsityReport {
    std::vector<double> per_layer_sparsity;
    std::vector<double> per_layer_mean_cett; // NaN when tail structure is unavailable
    double mean_sparsity = 0.0;
    long token_count = 0;
    long skipped_records = 0;
};

// Blocks whose output norm is zero have no defined truncation ratio.
struct UndefinedCettError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// || sum of neuron outputs with magnitude < eps || / ||MLP(y)||.
double cett_mlp(const LayerRecord& rec, const MlpWeights& w, const Vec& y, double eps,
                Activation kind);

// 1 - ||concat(masked heads) . W_o|| / ||MHA||, head active iff norm > eps.
double cett_attention(const LayerRecord& rec, const Mat& w_o, double eps);

// Dropped-tail variant for comparison: ||concat(dropped heads) . W_o|| / ||MHA||.
double cett_attention_tail(const LayerRecord& rec, const Mat& w_o, double eps);

struct SearchOptions {
    double tol = 1e-6;
    int max_iters = 40;
    CettAggregate aggregate = CettAggregate::mean;
};

// Largest threshold whose aggregate CETT stays within the target, found by
// bisection over [0, max observed magnitude]; per layer in layer_wise mode,
// over the pooled records in universal mode.
ThresholdTable search_threshold(const CalibrationSet& cal, const Checkpoint& ckpt, BlockKind block,
                                ThresholdMode mode, double cett_target, SearchOptions opts = {});

SparsityReport measure_sparsity(const CalibrationSet& cal, const ThresholdTable& tt);

// JSON-lines interop: one record per token x layer with magnitudes and norms.
void export_trace_jsonl(const CalibrationSet& cal, const std::string& path);
CalibrationSet import_trace_jsonl(const std::string& path);

void save_threshold_table(const ThresholdTable& tt, const std::string& path);
ThresholdTable load_threshold_table(const std::string& path);

} // namespace salab
