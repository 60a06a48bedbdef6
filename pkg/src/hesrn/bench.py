"""Wall-clock scaling of the HeSRN forward pass against dense self-attention.

The retention path encodes every target node's fixed-length token sequence,
so with L fixed its cost grows linearly in the node count.  The reference is
one softmax self-attention over the whole target-node set (an N x N score
matrix), built from the same numeric core.
"""

from __future__ import annotations

import logging
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .errors import ParameterError
from .graph import SynthSpec, synth_graph
from .model import GraphContext, HeSRN, readout
from .slots import glorot
from .tensor import Tensor

log = logging.getLogger(__name__)

CHUNK = 1024
FLOAT = 8


def dense_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over all rows of ``x`` at once."""
    q, k, v = T.matmul(x, wq), T.matmul(x, wk), T.matmul(x, wv)
    scores = T.matmul(q, T.transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    return T.matmul(T.softmax(scores), v)


def physical_memory() -> int:
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 8 << 30


def retention_memory(n_nodes: int, n_targets: int, cfg: ModelConfig, num_types: int) -> int:
    """Rough peak bytes: slot tensors over all nodes plus one chunk of sequences."""
    b = min(n_targets, CHUNK)
    d, length = cfg.hidden, cfg.seq_len
    slots = 8 * n_nodes * num_types * d
    seqs = 12 * b * length * d + 3 * b * length * length
    return FLOAT * (slots + seqs)


def attention_memory(n: int, d: int) -> int:
    return FLOAT * (3 * n * n + 4 * n * d)


def loglog_slope(sizes, times) -> float:
    return float(np.polyfit(np.log(sizes), np.log(times), 1)[0])


def time_call(fn, reps: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return statistics.median(samples)


@dataclass
class BenchPoint:
    n: int
    num_nodes: int
    num_edges: int
    retention_seconds: float
    attention_seconds: float | None  # None = OOM
    retention_bytes: int
    attention_bytes: int
    sampling_seconds: float


@dataclass
class BenchReport:
    points: list[BenchPoint] = field(default_factory=list)
    retention_slope: float = float("nan")
    attention_slope: float = float("nan")
    seq_len: int = 0
    reps: int = 0
    total_seconds: float = 0.0


def bench_config(hidden: int, seq_len: int, seed: int) -> ModelConfig:
    return ModelConfig(
        hidden=hidden, heads=2, structure_layers=2, type_layers=2, retentive_layers=2,
        seq_len=seq_len, ffn_dim=32, seed=seed,
    )


def run_bench(
    sizes,
    seq_len: int = 50,
    reps: int = 5,
    hidden: int = 32,
    seed: int = 0,
    memory_budget: int | None = None,
) -> BenchReport:
    """Median forward time per target-node count; fits log-log slopes."""
    sizes = [int(n) for n in sizes]
    if len(sizes) < 3:
        raise ParameterError(f"need >= 3 sizes for a slope fit, got {len(sizes)}")
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ParameterError("sizes must be strictly ascending")
    if reps < 5:
        raise ParameterError("reps must be >= 5")
    budget = memory_budget if memory_budget is not None else physical_memory() // 2
    cfg = bench_config(hidden, seq_len, seed)
    report = BenchReport(seq_len=seq_len, reps=reps)
    wall = time.perf_counter()
    rng = np.random.default_rng(seed)
    wq, wk, wv = (glorot(rng, (hidden, hidden), hidden, hidden) for _ in range(3))
    for n in sizes:
        g = synth_graph(SynthSpec(nodes_per_type=(n, n // 2, n // 2), avg_degree=8.0, seed=seed))
        targets = g.type_members(g.target_type)
        start = time.perf_counter()
        ctx = GraphContext.build(g, cfg, targets)
        sampling = time.perf_counter() - start
        model = HeSRN(cfg, g.feature_dims, g.num_classes)

        def forward():
            emb = model.node_embeddings(ctx)
            out = []
            for lo in range(0, targets.size, CHUNK):
                ids, mask = ctx.tokens(targets[lo : lo + CHUNK])
                out.append(readout(model.encode_sequences(emb, ctx, ids, mask)).data)
            return np.concatenate(out)

        ret_t = time_call(forward, reps)
        emb = Tensor(model.node_embeddings(ctx).data[targets])
        att_bytes = attention_memory(n, hidden)
        att_t = None
        if att_bytes <= budget:
            try:
                att_t = time_call(lambda: dense_attention(emb, wq, wk, wv), reps)
            except MemoryError:
                att_t = None
        point = BenchPoint(
            n=n,
            num_nodes=g.num_nodes,
            num_edges=int(g.edges.shape[0]),
            retention_seconds=ret_t,
            attention_seconds=att_t,
            retention_bytes=retention_memory(g.num_nodes, n, cfg, g.num_types),
            attention_bytes=att_bytes,
            sampling_seconds=sampling,
        )
        log.info("bench n=%d retention %.4fs attention %s", n, ret_t, att_t)
        report.points.append(point)
    report.retention_slope = loglog_slope([p.n for p in report.points], [p.retention_seconds for p in report.points])
    feasible = [p for p in report.points if p.attention_seconds is not None]
    if len(feasible) >= 2:
        report.attention_slope = loglog_slope([p.n for p in feasible], [p.attention_seconds for p in feasible])
    report.total_seconds = time.perf_counter() - wall
    return report
