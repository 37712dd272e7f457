"""Python bindings for the salab dynamic-activation laboratory."""

from salab._core import (
    Checkpoint,
    Corpus,
    ModelConfig,
    ThresholdInfo,
    activation_fn,
    dense_logits,
    generate,
    ingest_corpus,
    init_checkpoint,
    load_checkpoint,
    measure_sparsity,
    perplexity,
    run_experiment,
    save_checkpoint,
    search_threshold,
    trace_stats,
    train_toy_model,
)

__all__ = [
    "Checkpoint",
    "Corpus",
    "ModelConfig",
    "ThresholdInfo",
    "activation_fn",
    "dense_logits",
    "generate",
    "ingest_corpus",
    "init_checkpoint",
    "load_checkpoint",
    "measure_sparsity",
    "perplexity",
    "run_experiment",
    "save_checkpoint",
    "search_threshold",
    "trace_stats",
    "train_toy_model",
]
