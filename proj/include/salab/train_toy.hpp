#pragma once

#include <cstdint>
#include <vector>

#include "salab/corpus.hpp"
#include "salab/model.hpp"

namespace salab {

struct TrainOptions {
    int steps = 2000;
    double lr = 1e-3;
    uint64_t seed = 0;
    int window = 0; // training context length; 0 means max_seq_len
    double grad_clip = 1.0;
    int log_every = 0; // 0: silent
};

struct TrainResult {
    Checkpoint ckpt;
    std::vector<double> loss_curve; // one entry per step
};

// Seeded random initialization (what steps == 0 training returns).
Checkpoint init_checkpoint(const ModelConfig& cfg, uint64_t seed);

// Next-token cross-entropy over random contiguous train-split windows,
// optimized with Adam. Deterministic given the seed; throws on a non-finite
// loss with the offending step index.
TrainResult train_toy_model(const ModelConfig& cfg, const Corpus& corpus, TrainOptions opts);

} // namespace salab
