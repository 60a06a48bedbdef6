"""Heterogeneous graph data model, text file format and structural operators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParameterError, ParseError, ShapeError, ValidationError
from .tensor import Tensor, sparse_matmul

log = logging.getLogger(__name__)

PAD = -1
SPLITS = ("train", "val", "test")


@dataclass
class HeteroGraph:
    """Typed nodes and edges with per-type feature matrices.

    ``features[t]`` holds the rows of type-``t`` nodes in ascending node id.
    Multiclass labels are an int array with -1 for unlabeled nodes; multilabel
    graphs store an ``N x K`` 0/1 matrix and mark labeled rows in ``labeled``.
    """

    num_nodes: int
    node_type: np.ndarray
    type_names: list[str]
    features: list[np.ndarray]
    edges: np.ndarray  # E x 3: src, dst, edge type
    target_type: int
    labels: np.ndarray | None = None
    labeled: np.ndarray | None = None
    multilabel: bool = False
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.node_type = np.asarray(self.node_type, dtype=np.int64)
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 3)
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labeled is None:
                self.labeled = self.labels >= 0 if not self.multilabel else np.ones(self.num_nodes, bool)
        self.splits = {k: np.asarray(v, dtype=np.int64) for k, v in self.splits.items()}

    @property
    def num_types(self) -> int:
        return len(self.type_names)

    @property
    def feature_dims(self) -> list[int]:
        return [f.shape[1] for f in self.features]

    @property
    def num_classes(self) -> int:
        if self.labels is None:
            return 0
        if self.multilabel:
            return self.labels.shape[1]
        return int(self.labels.max()) + 1 if self.labels.size else 0

    def type_members(self, t: int) -> np.ndarray:
        return np.flatnonzero(self.node_type == t)

    def validate(self) -> "HeteroGraph":
        n, c = self.num_nodes, self.num_types
        if self.node_type.shape != (n,):
            raise ValidationError(f"node_type has {self.node_type.size} entries for {n} nodes")
        if n and (self.node_type.min() < 0 or self.node_type.max() >= c):
            raise ValidationError("node type index out of range")
        if not 0 <= self.target_type < c:
            raise ValidationError(f"target type {self.target_type} out of range for C={c}")
        if len(self.features) != c:
            raise ValidationError(f"{len(self.features)} feature matrices for {c} types")
        counts = np.bincount(self.node_type, minlength=c)
        for t, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] != counts[t]:
                raise ValidationError(
                    f"type {t} ({self.type_names[t]}): {f.shape[0]} feature rows for {counts[t]} nodes"
                )
        if self.edges.size and (self.edges[:, :2].min() < 0 or self.edges[:, :2].max() >= n):
            bad = self.edges[(self.edges[:, :2] >= n).any(1) | (self.edges[:, :2] < 0).any(1)][0]
            raise ValidationError(f"edge {int(bad[0])}->{int(bad[1])} has an endpoint outside [0, {n})")
        seen = set()
        for name, ids in self.splits.items():
            if name not in SPLITS:
                raise ValidationError(f"unknown split {name!r}")
            if ids.size and (ids.min() < 0 or ids.max() >= n):
                raise ValidationError(f"split {name} references a node outside [0, {n})")
            if ids.size and np.any(self.node_type[ids] != self.target_type):
                raise ValidationError(f"split {name} contains non-target nodes")
            overlap = seen.intersection(ids.tolist())
            if overlap:
                raise ValidationError(f"split {name} overlaps another split at node {min(overlap)}")
            seen.update(ids.tolist())
        return self


# ---------------------------------------------------------------------------
# file format


def _fmt(x: float) -> str:
    return repr(float(x))


def save_graph(g: HeteroGraph, path) -> None:
    lines = [f"HGRAPH v1 N={g.num_nodes} C={g.num_types} TARGET={g.target_type}"]
    for t, name in enumerate(g.type_names):
        lines.append(f"T {t} {name} {g.feature_dims[t]}")
    rows = {t: iter(f) for t, f in enumerate(g.features)}
    for v in range(g.num_nodes):
        t = int(g.node_type[v])
        feats = " ".join(_fmt(x) for x in next(rows[t]))
        lines.append(f"N {v} {t} {feats}".rstrip())
    for s, d, e in g.edges.tolist():
        lines.append(f"E {s} {d} {e}")
    if g.labels is not None:
        for v in np.flatnonzero(g.labeled):
            if g.multilabel:
                lines.append(f"L {v} m " + " ".join(str(int(b)) for b in g.labels[v]))
            else:
                lines.append(f"L {v} {int(g.labels[v])}")
    for name in SPLITS:
        if name in g.splits:
            lines.append(f"S {name} " + " ".join(str(int(i)) for i in g.splits[name]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _int(tok: str, lineno: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"expected integer, got {tok!r}", lineno) from None


def _float(tok: str, lineno: int) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"expected float, got {tok!r}", lineno) from None


def load_graph(path) -> HeteroGraph:
    """Parse and validate a graph file."""
    text = Path(path).read_text(encoding="utf-8")
    header = None
    types: dict[int, tuple[str, int]] = {}
    nodes: dict[int, tuple[int, list[float]]] = {}
    edges: list[tuple[int, int, int]] = []
    single: dict[int, int] = {}
    multi: dict[int, list[int]] = {}
    splits: dict[str, list[int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tok = line.split()
        if header is None:
            if tok[:2] != ["HGRAPH", "v1"] or len(tok) != 5:
                raise ParseError("expected header 'HGRAPH v1 N=<int> C=<int> TARGET=<int>'", lineno)
            fields = {}
            for item in tok[2:]:
                key, _, val = item.partition("=")
                fields[key] = _int(val, lineno)
            if set(fields) != {"N", "C", "TARGET"}:
                raise ParseError("header must define N, C and TARGET", lineno)
            header = fields
            continue
        kind = tok[0]
        if kind == "T":
            if len(tok) != 4:
                raise ParseError("type line is 'T <index> <name> <feature_dim>'", lineno)
            types[_int(tok[1], lineno)] = (tok[2], _int(tok[3], lineno))
        elif kind == "N":
            if len(tok) < 3:
                raise ParseError("node line is 'N <id> <type> <features...>'", lineno)
            v = _int(tok[1], lineno)
            if v in nodes:
                raise ParseError(f"duplicate node {v}", lineno)
            nodes[v] = (_int(tok[2], lineno), [_float(x, lineno) for x in tok[3:]])
        elif kind == "E":
            if len(tok) != 4:
                raise ParseError("edge line is 'E <src> <dst> <etype>'", lineno)
            edges.append((_int(tok[1], lineno), _int(tok[2], lineno), _int(tok[3], lineno)))
        elif kind == "L":
            if len(tok) >= 3 and tok[2] == "m":
                bits = tok[3:]
                if len(bits) == 1 and len(bits[0]) > 1:
                    bits = list(bits[0])
                vals = [_int(b, lineno) for b in bits]
                if any(b not in (0, 1) for b in vals):
                    raise ParseError("multi-label bits must be 0 or 1", lineno)
                multi[_int(tok[1], lineno)] = vals
            elif len(tok) == 3:
                single[_int(tok[1], lineno)] = _int(tok[2], lineno)
            else:
                raise ParseError("label line is 'L <id> <class>' or 'L <id> m <bits>'", lineno)
        elif kind == "S":
            if len(tok) < 2 or tok[1] not in SPLITS:
                raise ParseError("split line is 'S train|val|test <ids...>'", lineno)
            splits.setdefault(tok[1], []).extend(_int(x, lineno) for x in tok[2:])
        else:
            raise ParseError(f"unknown record kind {kind!r}", lineno)
    if header is None:
        raise ParseError("missing header")
    n, c = header["N"], header["C"]
    if sorted(types) != list(range(c)):
        raise ValidationError(f"type lines must declare indices 0..{c - 1}")
    if sorted(nodes) != list(range(n)):
        missing = sorted(set(range(n)) - set(nodes))
        raise ValidationError(f"node lines must cover ids 0..{n - 1}; missing {missing[:5]}")
    if single and multi:
        raise ValidationError("file mixes single- and multi-label records")
    node_type = np.array([nodes[v][0] for v in range(n)], dtype=np.int64)
    if n and (node_type.min() < 0 or node_type.max() >= c):
        raise ValidationError("node type index out of range")
    features = []
    for t in range(c):
        dim = types[t][1]
        rows = [nodes[v][1] for v in range(n) if nodes[v][0] == t]
        for v in range(n):
            if nodes[v][0] == t and len(nodes[v][1]) != dim:
                raise ValidationError(f"node {v}: {len(nodes[v][1])} features, type {t} declares {dim}")
        features.append(np.array(rows, dtype=np.float64).reshape(len(rows), dim))
    labels = labeled = None
    if multi:
        width = {len(b) for b in multi.values()}
        if len(width) != 1:
            raise ValidationError("multi-label vectors have inconsistent widths")
        labels = np.zeros((n, width.pop()), dtype=np.int64)
        labeled = np.zeros(n, dtype=bool)
        for v, bits in multi.items():
            if not 0 <= v < n:
                raise ValidationError(f"label for unknown node {v}")
            labels[v] = bits
            labeled[v] = True
    elif single:
        labels = np.full(n, -1, dtype=np.int64)
        for v, y in single.items():
            if not 0 <= v < n:
                raise ValidationError(f"label for unknown node {v}")
            if y < 0:
                raise ValidationError(f"node {v}: negative class {y}")
            labels[v] = y
        labeled = labels >= 0
    g = HeteroGraph(
        num_nodes=n,
        node_type=node_type,
        type_names=[types[t][0] for t in range(c)],
        features=features,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 3),
        target_type=header["TARGET"],
        labels=labels,
        labeled=labeled,
        multilabel=bool(multi),
        splits=splits,
    )
    return g.validate()


# ---------------------------------------------------------------------------
# structure


class NormalizedAdjacency:
    """Symmetric-normalized adjacency with self-loops, D^-1/2 (A + I) D^-1/2.

    Edges are symmetrized and deduplicated; edge types are ignored.
    """

    def __init__(self, g: HeteroGraph):
        n = g.num_nodes
        e = g.edges
        keep = e[:, 0] != e[:, 1]
        src, dst = e[keep, 0], e[keep, 1]
        a = sp.coo_matrix(
            (np.ones(2 * src.size), (np.concatenate([src, dst]), np.concatenate([dst, src]))), shape=(n, n)
        ).tocsr()
        a.data[:] = 1.0  # duplicates collapse to a 0/1 matrix
        a.sort_indices()
        self.adjacency = a
        self.degree = np.diff(a.indptr)  # neighbors, excluding the self-loop
        inv = 1.0 / np.sqrt(self.degree + 1.0)
        a_hat = a + sp.identity(n, format="csr")
        self.matrix = sp.diags(inv) @ a_hat @ sp.diags(inv)
        self.matrix = self.matrix.tocsr()
        self.matrix.sort_indices()

    @property
    def num_nodes(self) -> int:
        return self.matrix.shape[0]

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v] : a.indptr[v + 1]]

    def apply(self, h):
        return sparse_matmul(self.matrix, h)

    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def normalized_adjacency(g: HeteroGraph) -> NormalizedAdjacency:
    return NormalizedAdjacency(g)


def gcn_aggregate(h, adj: NormalizedAdjacency, layers: int) -> Tensor:
    """Apply the normalized adjacency ``layers`` times (no learnable weights)."""
    h = h if isinstance(h, Tensor) else Tensor(h)
    if layers < 0:
        raise ParameterError(f"layers must be >= 0, got {layers}")
    if h.ndim != 2 or h.shape[1] == 0:
        raise ShapeError(f"gcn_aggregate expects a non-empty N x k tensor, got {h.shape}")
    for _ in range(layers):
        h = adj.apply(h)
    return h


def type_onehot(g: HeteroGraph) -> Tensor:
    out = np.zeros((g.num_nodes, g.num_types))
    out[np.arange(g.num_nodes), g.node_type] = 1.0
    return Tensor(out)


def sample_sequence(g: HeteroGraph, v: int, length: int, seed: int, adj: NormalizedAdjacency | None = None) -> list[int]:
    """Token ids for target ``v``: itself, then neighbors breadth-first by hop.

    Within a hop, nodes are ordered by descending degree then ascending id.
    A hop larger than the remaining budget is subsampled uniformly with a
    generator seeded by ``(seed, v)``. Unfilled positions hold ``PAD``.
    """
    if length < 1:
        raise ParameterError(f"sequence length must be >= 1, got {length}")
    if g.node_type[v] != g.target_type:
        raise ValidationError(f"node {v} is not of the target type {g.target_type}")
    adj = adj or NormalizedAdjacency(g)
    deg = adj.degree
    seq = [v]
    visited = {v}
    frontier = [v]
    while frontier and len(seq) < length:
        hop = set()
        for u in frontier:
            for w in adj.neighbors(u).tolist():
                if w not in visited:
                    hop.add(w)
        if not hop:
            break
        ordered = sorted(hop, key=lambda w: (-deg[w], w))
        budget = length - len(seq)
        if len(ordered) > budget:
            rng = np.random.default_rng([seed, v])
            pick = np.sort(rng.choice(len(ordered), size=budget, replace=False))
            ordered = [ordered[i] for i in pick]
        seq.extend(ordered)
        visited.update(hop)
        frontier = ordered
    seq.extend([PAD] * (length - len(seq)))
    return seq


def sample_sequences(g: HeteroGraph, nodes, length: int, seed: int, adj: NormalizedAdjacency | None = None):
    """Stacked sequences for many targets: (token ids with pads resolved, pad mask).

    Padded slots repeat the target id and are flagged ``False`` in the mask.
    """
    adj = adj or NormalizedAdjacency(g)
    nodes = np.asarray(nodes, dtype=np.int64)
    ids = np.empty((nodes.size, length), dtype=np.int64)
    for i, v in enumerate(nodes.tolist()):
        ids[i] = sample_sequence(g, v, length, seed, adj)
    mask = ids != PAD
    ids = np.where(mask, ids, nodes[:, None])
    return ids, mask


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SynthSpec:
    num_types: int = 3
    nodes_per_type: int | tuple[int, ...] = 200
    feature_dim: int | tuple[int, ...] = 16
    avg_degree: float = 8.0  # edges drawn per target node
    skew: float = 0.7  # probability a drawn neighbor has the target's preferred type
    label_rule: str = "majority-neighbor-type"
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)
    target_type: int = 0
    feature_scale: float = 1.0
    seed: int = 0

    def per_type(self, value) -> tuple[int, ...]:
        if isinstance(value, (int, np.integer)):
            return (int(value),) * self.num_types
        value = tuple(int(x) for x in value)
        if len(value) != self.num_types:
            raise ParameterError(f"expected {self.num_types} per-type values, got {len(value)}")
        return value


def majority_neighbor_type(g: HeteroGraph, v: int, adj: NormalizedAdjacency | None = None) -> int:
    """Most frequent type among the 1-hop neighbors of ``v``; ties go to the lowest index."""
    adj = adj or NormalizedAdjacency(g)
    counts = np.bincount(g.node_type[adj.neighbors(v)], minlength=g.num_types)
    return int(np.argmax(counts))


def synth_graph(spec: SynthSpec) -> HeteroGraph:
    """Reproducible heterogeneous graph with majority-neighbor-type labels.

    Every target node draws about ``avg_degree`` neighbors; each neighbor's type
    is the node's (hidden) preferred type with probability ``skew`` and uniform
    otherwise. Features are Gaussian around a type-specific mean.
    """
    if spec.num_types < 1:
        raise ParameterError("num_types must be >= 1")
    if spec.label_rule != "majority-neighbor-type":
        raise ParameterError(f"unknown label rule {spec.label_rule!r}")
    c = spec.num_types
    counts = spec.per_type(spec.nodes_per_type)
    dims = spec.per_type(spec.feature_dim)
    rng = np.random.default_rng(spec.seed)
    node_type = np.repeat(np.arange(c), counts)
    n = node_type.size
    members = [np.flatnonzero(node_type == t) for t in range(c)]
    features = []
    for t in range(c):
        centre = rng.normal(0.0, spec.feature_scale, size=dims[t])
        features.append(centre + rng.normal(0.0, 1.0, size=(counts[t], dims[t])))
    targets = members[spec.target_type]
    edges = []
    load = np.zeros(n, dtype=np.int64)
    for v in targets.tolist():
        preferred = rng.integers(c)
        k = 1 + rng.poisson(max(spec.avg_degree - 1.0, 0.0))
        for _ in range(k):
            t = preferred if rng.random() < spec.skew else rng.integers(c)
            pool = members[t]
            # less loaded of two random candidates keeps degrees within a type tight
            a, b = pool[rng.integers(pool.size, size=2)]
            w = int(a if load[a] <= load[b] else b)
            if w != v:
                edges.append((v, w, int(spec.target_type * c + t)))
                load[v] += 1
                load[w] += 1
    g = HeteroGraph(
        num_nodes=n,
        node_type=node_type,
        type_names=[f"type{t}" for t in range(c)],
        features=features,
        edges=np.array(edges, dtype=np.int64).reshape(-1, 3),
        target_type=spec.target_type,
    )
    adj = NormalizedAdjacency(g)
    labels = np.full(n, -1, dtype=np.int64)
    for v in targets.tolist():
        labels[v] = majority_neighbor_type(g, v, adj)
    g.labels = labels
    g.labeled = labels >= 0
    order = rng.permutation(targets)
    n_train = int(round(spec.split[0] * order.size))
    n_val = int(round(spec.split[1] * order.size))
    g.splits = {
        "train": np.sort(order[:n_train]),
        "val": np.sort(order[n_train : n_train + n_val]),
        "test": np.sort(order[n_train + n_val :]),
    }
    return g.validate()


def permute_graph(g: HeteroGraph, perm: np.ndarray) -> HeteroGraph:
    """Relabel node ``v`` as ``perm[v]``, carrying features, edges, labels and splits."""
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.argsort(perm)
    node_type = g.node_type[inv]
    features = []
    for t in range(g.num_types):
        old_members = g.type_members(t)
        row_of = {int(v): i for i, v in enumerate(old_members)}
        new_order = [int(inv[u]) for u in np.flatnonzero(node_type == t)]
        features.append(g.features[t][[row_of[v] for v in new_order]])
    edges = g.edges.copy()
    edges[:, 0] = perm[edges[:, 0]]
    edges[:, 1] = perm[edges[:, 1]]
    labels = labeled = None
    if g.labels is not None:
        labels = g.labels[inv]
        labeled = g.labeled[inv]
    return HeteroGraph(
        num_nodes=g.num_nodes,
        node_type=node_type,
        type_names=list(g.type_names),
        features=features,
        edges=edges,
        target_type=g.target_type,
        labels=labels,
        labeled=labeled,
        multilabel=g.multilabel,
        splits={k: np.sort(perm[v]) for k, v in g.splits.items()},
    ).validate()
