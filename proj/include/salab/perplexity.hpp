#pragma once

#include <vector>

#include "salab/sparse_exec.hpp"

namespace salab {

// exp(mean next-token cross-entropy) under teacher forcing, windowed to
// max_seq_len (non-overlapping; boundary predictions are skipped so every
// strategy sees identical data).
double perplexity(const Checkpoint& ckpt, const std::vector<int>& tokens, const ExecConfig& cfg);

double perplexity(const Checkpoint& ckpt, const std::vector<int>& tokens,
                  const SelectionStrategy& mlp_strategy, const SelectionStrategy& attn_strategy,
                  const SkipPolicy& policy, const std::vector<double>& layer_sparsity = {});

} // namespace salab
