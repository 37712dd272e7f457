#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "salab/calibrate.hpp"
#include "salab/corpus.hpp"
#include "salab/predictor.hpp"
#include "salab/train_toy.hpp"

namespace salab {

inline constexpr const char* kVersionString = "salab 0.1.0";
inline constexpr const char* kReportSchema = "salab-report v1";

// One CSV line; NaN / empty string renders as a blank cell.
struct ReportRow {
    std::string experiment;
    std::string layer; // index or "mean"
    double cett_target = NAN;
    double threshold = NAN;
    double sparsity = NAN;
    double perplexity = NAN;
    double recall = NAN;
    double predicted_sparsity = NAN;
    double sparsity_delta = NAN;
    std::string policy;
    std::string strategy;
};

void write_report_csv(const std::vector<ReportRow>& rows, const std::string& path);
std::vector<ReportRow> read_report_csv(const std::string& path);
void merge_reports(const std::vector<std::string>& inputs, const std::string& out_path);

// ---- recipes ----

struct SweepOptions {
    std::vector<double> targets = {0.01, 0.02, 0.04, 0.1, 0.2, 0.4, 0.5};
    bool universal = true;
    bool layer_wise = true;
    BlockKind block = BlockKind::mlp;
};

struct SweepResult {
    std::vector<ReportRow> rows;
    std::vector<ThresholdTable> tables;
};

SweepResult cett_sweep(const CalibrationSet& cal, const Checkpoint& ckpt, const SweepOptions& opts);

struct HeadMaskEvalResult {
    std::vector<ReportRow> rows;
    ThresholdTable table;
};

HeadMaskEvalResult head_mask_eval(const CalibrationSet& cal, const Checkpoint& ckpt,
                                  const std::vector<int>& eval_tokens, double cett_target);

struct KvAblationOptions {
    double head_sparsity = 0.45; // pooled head-norm quantile for the mask threshold
    double layer_filter = 0.5;
};

struct KvAblationResult {
    std::vector<ReportRow> rows; // dense, head-mask-only, and the five skip variants
    double head_threshold = 0.0;
    std::vector<double> layer_sparsity;
    double mean_head_sparsity = 0.0;
};

KvAblationResult kv_ablation(const CalibrationSet& cal, const Checkpoint& ckpt,
                             const std::vector<int>& eval_tokens, const KvAblationOptions& opts);

struct FrontierOptions {
    std::vector<double> sparsity_grid = {0.05, 0.15, 0.30, 0.50};
    double cett_target = 0.2;
    int epochs = 4;
    int batch_size = 64;
    double lr = 1e-3;
    int hidden_dim = 0; // 0 = d_model
    LossKind loss = LossKind::bce;
    uint64_t seed = 0;
};

struct FrontierResult {
    std::vector<ReportRow> rows;
    std::vector<double> macro_recall; // one per grid point, grid order
    std::vector<PredictorModel> predictors;
    std::vector<LabeledDataset> heldout;
};

FrontierResult predictor_frontier(const Checkpoint& ckpt, const std::vector<int>& train_tokens,
                                  const std::vector<int>& heldout_tokens, const CalibrationSet& cal,
                                  const FrontierOptions& opts);

// ---- config-driven runner ----

struct ToyTrainSpec {
    ModelConfig config;
    int steps = 2000;
    double lr = 1e-3;
    int window = 0;
};

struct ExperimentConfig {
    uint64_t seed = 0;
    std::string out_dir = ".";
    std::string corpus_path;
    double split_fraction = 0.9;
    std::string checkpoint_path; // or train:
    std::optional<ToyTrainSpec> train;
    long calibration_tokens = 4096;
    std::vector<std::string> recipes;
    SweepOptions sweep;
    long eval_tokens = 4096;
    double head_mask_cett = 0.2;
    KvAblationOptions kv;
    FrontierOptions frontier;
    long predictor_train_tokens = 8192;
    long predictor_eval_tokens = 2048;

    void validate() const;
    static ExperimentConfig from_json_file(const std::string& path);
    std::string to_json() const;
};

struct ExperimentResult {
    std::vector<std::string> files; // everything written, manifest last
    bool complete = true;
    std::string failed_stage;
};

// Executes the requested recipes, writing CSV + JSON reports plus a manifest
// (config digest, seed, code version, per-file digests). Aborts on the first
// failing stage; the manifest then flags the partial output set.
ExperimentResult run_experiment(const ExperimentConfig& cfg);

} // namespace salab
