#include "salab/perplexity.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace salab {

double perplexity(const Checkpoint& ckpt, const std::vector<int>& tokens, const ExecConfig& cfg) {
    if (tokens.size() < 2) throw std::invalid_argument("perplexity: need at least two tokens");
    const int window = ckpt.config.max_seq_len;
    double nll = 0.0;
    long n_pred = 0;
    for (size_t start = 0; start < tokens.size(); start += window) {
        const size_t end = std::min(tokens.size(), start + window);
        if (end - start < 2) break;
        ExecConfig run_cfg = cfg;
        run_cfg.trace_level = TraceLevel::none;
        Session session(ckpt, run_cfg);
        Vec logits;
        for (size_t t = start; t < end; ++t) {
            if (t > start) {
                // logits currently belong to position t-1; score token t
                double mx = logits[0];
                for (double v : logits) mx = std::max(mx, v);
                double sum = 0.0;
                for (double v : logits) sum += std::exp(v - mx);
                nll -= (logits[tokens[t]] - mx) - std::log(sum);
                ++n_pred;
            }
            logits = session.step(tokens[t]);
        }
    }
    if (n_pred == 0) throw std::invalid_argument("perplexity: no predictions possible");
    return std::exp(nll / static_cast<double>(n_pred));
}

double perplexity(const Checkpoint& ckpt, const std::vector<int>& tokens,
                  const SelectionStrategy& mlp_strategy, const SelectionStrategy& attn_strategy,
                  const SkipPolicy& policy, const std::vector<double>& layer_sparsity) {
    ExecConfig cfg;
    cfg.mlp = mlp_strategy;
    cfg.attn = attn_strategy;
    cfg.policy = policy;
    cfg.layer_sparsity = layer_sparsity;
    return perplexity(ckpt, tokens, cfg);
}

} // namespace salab
