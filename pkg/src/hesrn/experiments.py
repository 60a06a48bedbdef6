"""Shared setups for the learnability/ablation experiment."""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import ABLATIONS, ModelConfig
from .graph import HeteroGraph, SynthSpec, synth_graph
from .train import train

# 600 nodes, 3 types, 300 labelled targets; 60 of them in the test split
LEARN_SPEC = SynthSpec(num_types=3, nodes_per_type=(300, 150, 150), feature_dim=16, avg_degree=10.0, skew=0.8)

LEARN_MODEL = ModelConfig(
    hidden=32,
    heads=2,
    structure_layers=1,
    type_layers=1,
    retentive_layers=2,
    seq_len=20,
    beta_t=0.5,
    ffn_dim=32,
    lr=1e-3,
    l2=1e-4,
    epochs=200,
    batch_size=64,
)


def learn_graph(seed: int) -> HeteroGraph:
    return synth_graph(dataclasses.replace(LEARN_SPEC, seed=seed))


def learn_config(seed: int, ablation: str | None = None, **overrides) -> ModelConfig:
    cfg = dataclasses.replace(LEARN_MODEL, seed=seed, **overrides)
    if ablation:
        cfg = dataclasses.replace(cfg, ablations=(ablation,))
    return cfg


def ablation_study(seeds=range(5), variants=(None,) + ABLATIONS, log=None) -> dict[str, list[float]]:
    """Test micro-F1 per variant and seed; ``None`` is the full model, keyed "full"."""
    scores: dict[str, list[float]] = {}
    for variant in variants:
        key = variant or "full"
        for seed in seeds:
            report, _ = train(learn_config(seed, variant), learn_graph(seed))
            scores.setdefault(key, []).append(report.test_micro_f1)
            if log:
                log(f"{key}\tseed={seed}\ttest_micro_f1={report.test_micro_f1:.4f}\tbest_epoch={report.best_epoch}")
    return scores


def summarize(scores: dict[str, list[float]]) -> dict[str, float]:
    return {k: float(np.mean(v)) for k, v in scores.items()}
