#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "salab/calibrate.hpp"
#include "salab/sparse_exec.hpp"

namespace salab {

enum class PredictorArchKind { two_linear, mlp_shaped };
enum class PredictorTarget { mlp_neurons, attention_heads };
enum class SelectionRule { sigmoid_threshold, topk };
enum class LossKind { bce, focal };
enum class InitKind { random, down_projection };

struct PredictorArch {
    PredictorArchKind kind = PredictorArchKind::two_linear;
    int input_dim = 0;
    int hidden_dim = 0; // default d_model when 0
    int output_dim = 0;
    Activation gate_activation = Activation::silu; // mlp_shaped only

    void validate() const;
};

struct PredictorSelection {
    SelectionRule rule = SelectionRule::sigmoid_threshold;
    double tau = 0.5; // sigmoid threshold, in (0, 1)
    int k = 0;        // topk
};

// Per-unit activity classifier. two_linear: sigmoid(W2 relu(W1 x + b1) + b2);
// mlp_shaped mirrors the gated MLP block: sigmoid(W_down [act(W_gate x) * (W_up x)]).
struct PredictorModel {
    PredictorArch arch;
    Mat w1, w2;
    Vec b1, b2;
    Mat w_gate, w_up, w_down;
    PredictorSelection selection;
    PredictorTarget target = PredictorTarget::mlp_neurons;
    int layer = 0;
    PredictorWiring wiring = PredictorWiring::serial;

    Vec logits(const Vec& input) const;
};

struct LabeledExample {
    Vec input;
    std::vector<uint8_t> labels; // 1 = active
    long token_idx = 0;
    int layer = 0;
};

struct LabeledDataset {
    std::vector<LabeledExample> examples;
    int input_dim = 0;
    int output_dim = 0;
    int layer = 0;
    PredictorTarget target = PredictorTarget::mlp_neurons;
    PredictorWiring wiring = PredictorWiring::serial;
    double labeling_threshold = 0.0;
    bool wiring_fallback_serial = false; // layer 0 under prepositioned wiring
};

struct TrainingData {
    std::vector<LabeledDataset> mlp;  // one per layer (when requested)
    std::vector<LabeledDataset> attn; // one per layer (when requested)
};

// Labels come from a dense traced pass: neuron i is active iff its magnitude
// >= the layer threshold, head i iff its norm > the layer threshold. Inputs
// follow the wiring; serial reads the current block's signals, prepositioned
// reads the previous layer's MLP input (attention) or the current layer's
// attention-block input (MLP).
TrainingData collect_training_data(const Checkpoint& ckpt, const std::vector<int>& tokens,
                                   const ThresholdTable* mlp_tt, const ThresholdTable* attn_tt,
                                   PredictorWiring wiring, long token_idx_offset = 0);

struct FocalParams {
    double alpha = 0.25;
    double gamma = 2.0;
};

struct TrainPredictorOptions {
    int batch_size = 64;
    double lr = 1e-3;
    int epochs = 4;
    uint64_t seed = 0;
    LossKind loss = LossKind::bce;
    FocalParams focal;
    InitKind init = InitKind::random;
    const MlpWeights* down_projection_source = nullptr; // init == down_projection
};

struct PredictorTrainResult {
    PredictorModel model;
    double final_loss = 0.0;
    std::vector<double> epoch_losses;
};

PredictorModel init_predictor(PredictorArch arch, uint64_t seed, InitKind init = InitKind::random,
                              const MlpWeights* down_projection_source = nullptr);

// Mini-batch training of the mean per-unit sigmoid loss; adaptive-moment
// updates, deterministic shuffle and accumulation order per seed.
PredictorTrainResult train_predictor(const LabeledDataset& ds, PredictorArch arch,
                                     TrainPredictorOptions opts);

// sigmoid_threshold: {i : sigmoid(logit_i) > tau}; topk: k largest logits.
std::vector<int> predict_active(const PredictorModel& m, const Vec& input);

struct PredictorMetrics {
    double recall = 0.0;             // caught true-active fraction
    double predicted_sparsity = 0.0; // fraction predicted inactive
    double real_sparsity = 0.0;
    double sparsity_delta = 0.0;     // real - predicted
    bool recall_defined = true;
    long examples = 0;
    long true_positive = 0;
    long actual_positive = 0;
};

PredictorMetrics evaluate_predictor(const PredictorModel& m, const LabeledDataset& heldout);

struct AggregateMetrics {
    std::vector<PredictorMetrics> per_layer;
    PredictorMetrics macro; // unweighted mean over layers
    PredictorMetrics micro; // pooled over all examples
};

AggregateMetrics evaluate_predictors(const std::vector<PredictorModel>& models,
                                     const std::vector<LabeledDataset>& heldout);

// Strategy handle whose per-token evaluation runs the layer's predictor on
// the wiring-selected live input. One predictor per layer.
SelectionStrategy wire_into_model(const Checkpoint& ckpt, std::vector<PredictorModel> per_layer,
                                  PredictorWiring wiring);

// Binary dataset records: length-prefixed float32 input + bit-packed labels.
void save_dataset(const LabeledDataset& ds, const std::string& path);
LabeledDataset load_dataset(const std::string& path);

void save_predictor(const PredictorModel& m, const std::string& path);
PredictorModel load_predictor(const std::string& path);

} // namespace salab
