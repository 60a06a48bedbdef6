"""Self-check suites run by ``hesrn check``.

Each check yields ``(name, passed, detail)``.  Exceptions raised inside a check
count as failures, with the error class in the detail (a decay outside (0, 1)
shows up as ``range error``).
"""

from __future__ import annotations

import itertools
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .config import ModelConfig, RunConfig, emit_config, parse_config_text
from .errors import ParameterError
from .graph import (
    NormalizedAdjacency,
    SynthSpec,
    gcn_aggregate,
    load_graph,
    permute_graph,
    sample_sequence,
    save_graph,
    synth_graph,
    type_onehot,
)
from .metrics import f1_scores
from .model import GraphContext, HeSRN
from .retention import (
    decay_mask,
    he_retention,
    head_gammas,
    retention_parallel,
    retention_recurrent,
    xpos_modulate,
    xpos_thetas,
)
from .slots import SlotParams, build_slots, fuse_slots, project_types, slot_encode, slot_retention
from .tensor import Tensor, grad_check_report
from .train import Adam, classification_loss

SUITES = ("grad", "equivalence", "invariants")

EQUIV_LENGTHS = (1, 2, 16, 64, 128)
EQUIV_HEAD_DIMS = (2, 8, 32)
EQUIV_SEEDS = 5


@dataclass
class CheckResult:
    suite: str
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"check\t{self.suite}.{self.name}\t{'PASS' if self.passed else 'FAIL'}\t{self.detail}"


def tiny_instance(seed: int = 0, beta_t: float = 0.5, ablations=()) -> tuple[HeSRN, GraphContext, np.ndarray]:
    """N=30, C=3, d=8, h=2, L=6, two retentive layers."""
    g = synth_graph(SynthSpec(nodes_per_type=10, feature_dim=4, avg_degree=4.0, seed=seed))
    cfg = ModelConfig(
        hidden=8, heads=2, structure_layers=2, type_layers=2, retentive_layers=2, seq_len=6,
        beta_t=beta_t, ffn_dim=8, seed=seed, ablations=tuple(ablations),
    )
    targets = g.type_members(g.target_type)
    ctx = GraphContext.build(g, cfg, targets)
    return HeSRN(cfg, g.feature_dims, g.num_classes), ctx, targets


def jitter_biases(model: HeSRN, scale: float = 1.0, seed: int = 0) -> None:
    """Move zero-initialised biases to a generic point.

    An empty slot reaches layer norm as the constant row ``align_b[s]``, so the
    loss curvature grows like 1/std(align_b[s])**3.  At zero (or 0.1-scale)
    biases the O(eps**2) truncation term of central differences swamps a
    1e-4 tolerance even though the analytic gradient is exact; unit-scale
    biases keep the difference quotient accurate.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        if name.endswith(("_b", "_bias", ".b")) and not p.data.any():
            p.data = rng.normal(scale=scale, size=p.shape)


def _fmt(x: float) -> str:
    return f"{x:.3e}"


# ---------------------------------------------------------------------------
# grad


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    mask = rng.random((3, 4)) < 0.7
    mask[:, 0] = True
    cos, sin = np.cos(rng.normal(size=(3, 2))), np.sin(rng.normal(size=(3, 2)))
    return {
        "add": (lambda a, b: a + b, [x, y]),
        "sub": (lambda a, b: a - b, [x, y]),
        "mul": (lambda a, b: a * b, [x, y]),
        "div": (lambda a, b: a / b, [x, pos]),
        "exp": (T.exp, [x]),
        "log": (T.log, [pos]),
        "sqrt": (T.sqrt, [pos]),
        "matmul": (lambda a, b: T.matmul(a, T.transpose(b)), [x, y]),
        "batched_matmul": (T.matmul, [rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))]),
        "tanh": (T.tanh, [x]),
        "sigmoid": (T.sigmoid, [x]),
        "softplus": (T.softplus, [x]),
        "gelu": (T.gelu, [x]),
        "swish": (T.swish, [x]),
        "softmax": (T.softmax, [x]),
        "masked_softmax": (lambda a: T.masked_softmax(a, mask), [x]),
        "log_softmax": (T.log_softmax, [x]),
        "layer_norm": (T.layer_norm, [x, rng.normal(size=4), rng.normal(size=4)]),
        "group_norm": (lambda a: T.group_norm(a, 2), [x]),
        "rotate_pairs": (lambda a: T.rotate_pairs(a, cos, sin), [x]),
        "take": (lambda a: T.take(a, np.array([[2, 0], [2, 1]])), [x]),
        "getitem": (lambda a: a[:, 1:3], [x]),
        "concat": (lambda a, b: T.concat([a, b], axis=0), [x, y]),
        "mean": (lambda a: T.mean(a, axis=1), [x]),
    }


def _weighted_sum(out: Tensor, rng_seed: int) -> Tensor:
    w = np.random.default_rng(rng_seed).normal(size=out.shape)
    return T.tensor_sum(out * w)


def suite_grad(tol: float) -> Iterator[tuple[str, bool, str]]:
    rng = np.random.default_rng(0)
    limit = min(1e-6, tol)
    for name, (fn, arrays) in _op_cases(rng).items():
        params = [Tensor(a.copy(), requires_grad=True) for a in arrays]
        err = max(grad_check_report(lambda: _weighted_sum(fn(*params), 1), params, eps=1e-5))
        yield f"op.{name}", err < limit, f"rel_err={_fmt(err)} tol={_fmt(limit)}"

    # slot pipeline, N=6, C=3, d=4
    limit = min(1e-5, tol)
    node_type = np.array([0, 1, 2, 0, 1, 2])
    feats = [Tensor(rng.normal(size=(2, 3))) for _ in range(3)]
    sp = SlotParams.init([3, 3, 3], 4, rng)
    sp.align_b.data = rng.normal(scale=0.1, size=sp.align_b.shape)
    sp.attn_b.data = rng.normal(scale=0.1, size=sp.attn_b.shape)
    params = list(sp.named().values())
    err = max(grad_check_report(lambda: _weighted_sum(slot_encode(feats, node_type, sp).fused, 2), params))
    yield "slot_pipeline", err < limit, f"rel_err={_fmt(err)} tol={_fmt(limit)}"

    limit = min(1e-4, tol)
    model, ctx, targets = tiny_instance()
    jitter_biases(model)
    labels = ctx.graph.labels[targets]
    report = grad_check_report(
        lambda: classification_loss(model.logits(ctx, targets), labels, "multiclass", 1e-4),
        list(model.parameters().values()),
    )
    worst = max(report)
    yield "full_encoder", worst < limit, f"rel_err={_fmt(worst)} tol={_fmt(limit)} tensors={len(report)}"


# ---------------------------------------------------------------------------
# equivalence


def _recurrent_he(q, k, v, qt, kt, gamma, beta, mask=None):
    s = np.sqrt(beta)
    return retention_recurrent(np.concatenate([q, s * qt], -1), np.concatenate([k, s * kt], -1), v, gamma, mask)


def equivalence_grid(gammas, tol: float, seeds: int = EQUIV_SEEDS) -> float:
    """Worst parallel-vs-recurrent gap over the length x head-width grid."""
    worst = 0.0
    for length, dh, seed in itertools.product(EQUIV_LENGTHS, EQUIV_HEAD_DIMS, range(seeds)):
        rng = np.random.default_rng([length, dh, seed])
        gamma = float(gammas[seed % len(gammas)])
        q, k, v = (rng.normal(size=(length, dh)) for _ in range(3))
        par = retention_parallel(q, k, v, gamma).data
        worst = max(worst, float(np.abs(par - retention_recurrent(q, k, v, gamma)).max()))
    return worst


def suite_equivalence(tol: float, gamma: float = 0.0) -> Iterator[tuple[str, bool, str]]:
    gammas = [gamma] if gamma else list(head_gammas(4)) + [0.5, 0.9]
    worst = equivalence_grid(gammas, tol)
    yield "parallel_recurrent", worst < tol, f"max_abs={_fmt(worst)} tol={_fmt(tol)}"

    rng = np.random.default_rng(1)
    worst = 0.0
    for length in (1, 7, 33):
        mask = rng.random((3, length)) < 0.8
        mask[:, 0] = True
        q, k, v = (rng.normal(size=(3, length, 8)) for _ in range(3))
        qt, kt = rng.normal(size=(3, length, 3)), rng.normal(size=(3, length, 3))
        for g_ in gammas:
            par = he_retention(q, k, v, qt, kt, float(g_), 0.7, mask).data
            worst = max(worst, float(np.abs(par - _recurrent_he(q, k, v, qt, kt, float(g_), 0.7, mask)).max()))
    yield "he_retention_masked", worst < tol, f"max_abs={_fmt(worst)} tol={_fmt(tol)}"

    q, k, v = (rng.normal(size=(16, 8)) for _ in range(3))
    qt, kt = rng.normal(size=(16, 3)), rng.normal(size=(16, 3))
    g0 = float(gammas[0])
    same = np.array_equal(he_retention(q, k, v, qt, kt, g0, 0.0).data, retention_parallel(q, k, v, g0).data)
    yield "beta_zero_plain", same, "bit-identical" if same else "outputs differ"

    model, ctx, targets = tiny_instance(beta_t=0.0)
    ablated, _, _ = tiny_instance(beta_t=0.5, ablations=("no_he_retention",))
    same = np.array_equal(model.logits(ctx, targets).data, ablated.logits(ctx, targets).data)
    yield "no_he_retention_ablation", same, "bit-identical" if same else "outputs differ"


# ---------------------------------------------------------------------------
# invariants


def _naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def brute_f1(pred, true, classes: int) -> tuple[float, float]:
    """Per-class counts by enumeration; independent of the confusion-matrix path."""
    per = []
    tp_all = fp_all = fn_all = 0
    for c in range(classes):
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        per.append(0.0 if 2 * tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn))
        tp_all, fp_all, fn_all = tp_all + tp, fp_all + fp, fn_all + fn
    denom = 2 * tp_all + fp_all + fn_all
    return (0.0 if denom == 0 else 2 * tp_all / denom), sum(per) / classes


def suite_invariants(tol: float) -> Iterator[tuple[str, bool, str]]:
    rng = np.random.default_rng(2)

    x = rng.normal(size=(50, 9)) * 700 / 3
    x[0] = 700.0
    x[1, :4] = -700.0
    s = T.softmax(Tensor(x)).data
    gap = float(np.abs(s.sum(axis=1) - 1).max())
    yield "softmax_simplex", bool(s.min() >= 0) and gap <= 1e-12, f"sum_gap={_fmt(gap)}"

    x = rng.normal(size=(6, 8))
    shift = rng.normal(size=(6, 1)) * 10
    ln = float(np.abs(T.layer_norm(Tensor(x + shift)).data - T.layer_norm(Tensor(x)).data).max())
    gn = float(np.abs(T.group_norm(Tensor(x + shift), 2).data - T.group_norm(Tensor(x), 2).data).max())
    yield "norm_shift_invariance", max(ln, gn) < 1e-8, f"layer={_fmt(ln)} group={_fmt(gn)}"

    a, b = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    gap = float(np.abs(T.matmul(Tensor(a), Tensor(b)).data - _naive_matmul(a, b)).max())
    yield "matmul_naive", gap < 1e-12, f"max_abs={_fmt(gap)}"

    g = synth_graph(SynthSpec(nodes_per_type=12, feature_dim=3, avg_degree=4.0, seed=3))
    adj = NormalizedAdjacency(g)
    perm = rng.permutation(g.num_nodes)
    gp = permute_graph(g, perm)
    h = rng.normal(size=(g.num_nodes, 5))
    hp = np.empty_like(h)
    hp[perm] = h
    lhs = gcn_aggregate(Tensor(hp), NormalizedAdjacency(gp), 2).data
    rhs = np.empty_like(h)
    rhs[perm] = gcn_aggregate(Tensor(h), adj, 2).data
    gap = float(np.abs(lhs - rhs).max())
    yield "aggregate_permutation", gap < 1e-12, f"max_abs={_fmt(gap)}"

    y = rng.normal(size=h.shape)
    lin = gcn_aggregate(Tensor(2.5 * h - 0.5 * y), adj, 2).data
    ref = 2.5 * gcn_aggregate(Tensor(h), adj, 2).data - 0.5 * gcn_aggregate(Tensor(y), adj, 2).data
    gap = float(np.abs(lin - ref).max())
    onehot = type_onehot(g).data
    exact = bool(np.all(onehot.sum(1) == 1) and np.all((onehot == 0) | (onehot == 1)))
    yield "aggregate_linear_onehot", gap < 1e-12 and exact, f"max_abs={_fmt(gap)} onehot={exact}"

    seqs = [sample_sequence(g, int(v), 9, 11, adj) for v in g.type_members(0)]
    again = [sample_sequence(g, int(v), 9, 11) for v in g.type_members(0)]
    yield "sampling_pure", seqs == again, "repeat calls agree" if seqs == again else "repeat calls differ"

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "g.hgraph"
        save_graph(g, path)
        back = load_graph(path)
    same = (
        back.num_nodes == g.num_nodes
        and np.array_equal(back.node_type, g.node_type)
        and all(np.array_equal(a, b) for a, b in zip(back.features, g.features))
        and np.array_equal(back.edges, g.edges)
        and np.array_equal(back.labels, g.labels)
        and all(np.array_equal(back.splits[k], g.splits[k]) for k in g.splits)
    )
    yield "graph_roundtrip", same, "identical" if same else "fields differ"

    sp = SlotParams.init(g.feature_dims, 6, rng)
    slots = build_slots(project_types([Tensor(f) for f in g.features], sp), g.node_type).data
    nonzero = (np.abs(slots).sum(-1) > 0).sum(1)
    sparse = bool(np.all(nonzero <= 1) and np.all(np.abs(slots[np.arange(g.num_nodes), g.node_type]).sum(-1) > 0))
    yield "slot_sparsity", sparse, f"max_nonzero_slots={int(nonzero.max())}"

    state = slot_encode([Tensor(f) for f in g.features], g.node_type, sp)
    w = state.fusion_weights.data
    gap = float(np.abs(w.sum(1) - 1).max())
    yield "fusion_simplex", bool(w.min() >= 0) and gap <= 1e-12, f"sum_gap={_fmt(gap)}"

    sp.alpha.data = np.array(0.0)
    z = Tensor(rng.normal(size=(5, 3, 6)))
    same = np.array_equal(slot_retention(z, sp).data, z.data)
    yield "slot_residual_zero", same, "identity" if same else "not identity"

    worst = 0.0
    for _ in range(5):
        length = 12
        n = int(rng.integers(length - 1))
        q, k, v = (rng.normal(size=(length, 4)) for _ in range(3))
        base = retention_parallel(q, k, v, 0.8).data[: n + 1]
        k2, v2, q2 = k.copy(), v.copy(), q.copy()
        for arr in (k2, v2, q2):
            arr[n + 1 :] = rng.normal(size=arr[n + 1 :].shape) * 100
        worst = max(worst, float(np.abs(retention_parallel(q2, k2, v2, 0.8).data[: n + 1] - base).max()))
    yield "causality", worst < 1e-14, f"max_abs={_fmt(worst)}"

    # unit q, k and one-hot values: out[n, m] is the weight of token m at step n
    ones = np.ones((10, 1))
    contrib = retention_parallel(ones, ones, np.eye(10), 0.7).data
    ratios = np.array([contrib[n + 1, m] / contrib[n, m] for m in range(10) for n in range(m, 9)])
    ok = bool(np.allclose(ratios, 0.7, rtol=0, atol=1e-14)) and not np.triu(contrib, 1).any()
    yield "decay_geometric", ok, f"ratio_range=[{ratios.min():.15f}, {ratios.max():.15f}]"

    qx, kx = rng.normal(size=(20, 8)), rng.normal(size=(20, 8))
    th = xpos_thetas(8)
    pos = np.arange(20)
    qm = xpos_modulate(qx, pos, th, sign="query").data
    km = xpos_modulate(kx, pos, th, sign="key").data
    gap = float(np.abs((qm * km).sum(1) - (qx * kx).sum(1)).max())
    yield "xpos_same_position", gap < 1e-12, f"max_abs={_fmt(gap)}"

    logits = Tensor(rng.normal(size=(7, 3)) * 3)
    labels = rng.integers(3, size=7)
    loss = classification_loss(logits, labels, "multiclass", 0.0).item()
    sat = np.full((7, 3), -60.0)
    sat[np.arange(7), labels] = 60.0
    near = classification_loss(Tensor(sat), labels, "multiclass", 0.0).item()
    yield "loss_nonnegative", loss >= 0 and 0 <= near < 1e-12, f"loss={loss:.6f} saturated={_fmt(near)}"

    model, ctx, targets = tiny_instance()
    params = model.parameters()
    before = {k_: p.data.copy() for k_, p in params.items()}
    opt = Adam(params, 0.0)
    with T.Tape() as tape:
        out = classification_loss(model.logits(ctx, targets), ctx.graph.labels[targets], "multiclass", 1e-4)
    T.backward(tape, out)
    opt.step()
    same = all(np.array_equal(before[k_], p.data) for k_, p in params.items())
    yield "zero_lr_step", same, "unchanged" if same else "parameters moved"

    mismatches = 0
    for n in range(1, 5):
        vecs = list(itertools.product(range(3), repeat=n))
        for p_, t_ in itertools.product(vecs, vecs):
            got = f1_scores(np.array(p_), np.array(t_), 3)
            mi, ma = brute_f1(p_, t_, 3)
            mismatches += got["micro_f1"] != mi or got["macro_f1"] != ma
    yield "f1_enumeration", mismatches == 0, f"mismatches={mismatches} lengths<=4"

    cfg = parse_config_text("hidden = 48\nheads = 2\nablations = no_slot,no_retentive\nbench_sizes = 10,20,40\n")
    again = parse_config_text(emit_config(cfg))
    yield "config_roundtrip", again == cfg, "identical" if again == cfg else "differs"


def run_suites(suites, grad_tol: float = 1e-4, equiv_tol: float = 1e-8, gamma: float = 0.0) -> list[CheckResult]:
    unknown = [s for s in suites if s not in SUITES]
    if unknown:
        raise ParameterError(f"unknown check suite(s) {unknown}; choose from {', '.join(SUITES)}")
    makers = {
        "grad": lambda: suite_grad(grad_tol),
        "equivalence": lambda: suite_equivalence(equiv_tol, gamma),
        "invariants": lambda: suite_invariants(equiv_tol),
    }
    results = []
    for suite in suites:
        it = makers[suite]()
        while True:
            try:
                name, ok, detail = next(it)
            except StopIteration:
                break
            except ParameterError as exc:
                results.append(CheckResult(suite, "error", False, f"range error: {exc}"))
                break
            except Exception as exc:  # a crashing check is a failed check
                results.append(CheckResult(suite, "error", False, f"{type(exc).__name__}: {exc}"))
                break
            results.append(CheckResult(suite, name, bool(ok), detail))
    return results
