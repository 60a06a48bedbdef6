"""Slot-aware structure encoding: per-type slots, alignment, slot retention, fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError, ValidationError
from .graph import NormalizedAdjacency, gcn_aggregate
from .tensor import Tensor


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def attention_dim(d: int) -> int:
    return max(8, d // 4)


@dataclass
class SlotParams:
    type_proj: list[Tensor]  # W_t: d_t x d
    align_w: Tensor  # C x d x d, one U_s per slot
    align_b: Tensor  # C x d
    align_gain: Tensor  # d
    align_bias: Tensor  # d
    wq: Tensor
    wk: Tensor
    wv: Tensor
    gamma_raw: Tensor  # scalar; decay = sigmoid(gamma_raw)
    alpha: Tensor  # scalar residual scale
    attn_w: Tensor  # d x a
    attn_b: Tensor  # a
    attn_p: Tensor  # a

    @classmethod
    def init(cls, feature_dims, d: int, rng: np.random.Generator, gamma: float = 0.9, alpha: float = 0.1):
        c = len(feature_dims)
        a = attention_dim(d)
        return cls(
            type_proj=[glorot(rng, (dt, d), dt, d) for dt in feature_dims],
            align_w=glorot(rng, (c, d, d), d, d),
            align_b=Tensor(np.zeros((c, d)), requires_grad=True),
            align_gain=Tensor(np.ones(d), requires_grad=True),
            align_bias=Tensor(np.zeros(d), requires_grad=True),
            wq=glorot(rng, (d, d), d, d),
            wk=glorot(rng, (d, d), d, d),
            wv=glorot(rng, (d, d), d, d),
            gamma_raw=Tensor(np.log(gamma / (1.0 - gamma)), requires_grad=True),
            alpha=Tensor(alpha, requires_grad=True),
            attn_w=glorot(rng, (d, a), d, a),
            attn_b=Tensor(np.zeros(a), requires_grad=True),
            attn_p=glorot(rng, (a,), a, 1),
        )

    @property
    def num_types(self) -> int:
        return len(self.type_proj)

    @property
    def gamma(self) -> float:
        return float(1.0 / (1.0 + np.exp(-self.gamma_raw.data)))

    def named(self) -> dict[str, Tensor]:
        out = {f"slot.type_proj.{t}": w for t, w in enumerate(self.type_proj)}
        for key in (
            "align_w", "align_b", "align_gain", "align_bias", "wq", "wk", "wv",
            "gamma_raw", "alpha", "attn_w", "attn_b", "attn_p",
        ):
            out[f"slot.{key}"] = getattr(self, key)
        return out


@dataclass
class SlotState:
    slots: Tensor  # N x C x d, one populated slot per node
    fused: Tensor  # N x d
    fusion_weights: Tensor  # N x C


def project_types(features, params: SlotParams) -> list[Tensor]:
    """Map each type's features into the shared width: H_t = X_t W_t."""
    if len(features) != params.num_types:
        raise ShapeError(f"{len(features)} feature matrices for {params.num_types} projections")
    out = []
    for t, (x, w) in enumerate(zip(features, params.type_proj)):
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"type {t}: features {x.shape} do not match projection {w.shape}")
        out.append(T.matmul(x, w))
    return out


def scatter_types(projected: list[Tensor], node_type: np.ndarray) -> Tensor:
    """Arrange per-type rows back into node-id order, giving an N x d tensor."""
    node_type = np.asarray(node_type)
    counts = np.bincount(node_type, minlength=len(projected))
    for t, h in enumerate(projected):
        if h.shape[0] != counts[t]:
            raise ValidationError(f"type {t}: {h.shape[0]} embedding rows for {counts[t]} nodes")
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])
    # row of node v inside the type-major concatenation
    rank_in_type = np.zeros(node_type.size, dtype=np.int64)
    for t in range(len(projected)):
        members = np.flatnonzero(node_type == t)
        rank_in_type[members] = np.arange(members.size)
    rows = offsets[node_type] + rank_in_type
    stacked = projected[0] if len(projected) == 1 else T.concat(projected, axis=0)
    return T.take(stacked, rows)


def build_slots(projected: list[Tensor], node_type: np.ndarray) -> Tensor:
    """N x C x d slot tensor; slot s of node v is h_v when type(v) == s, else zero."""
    h = scatter_types(projected, node_type)
    n, d = h.shape
    c = len(projected)
    onehot = np.zeros((n, c, 1))
    onehot[np.arange(n), np.asarray(node_type), 0] = 1.0
    return T.reshape(h, (n, 1, d)) * onehot


def align_slots(slots: Tensor, params: SlotParams) -> Tensor:
    """Per-slot affine map, layer norm, then GeLU on every slot row."""
    n, c, d = slots.shape
    by_slot = T.swapaxes(slots, 0, 1)  # C x N x d
    z = T.matmul(by_slot, params.align_w) + T.reshape(params.align_b, (c, 1, d))
    z = T.swapaxes(z, 0, 1)
    return T.gelu(T.layer_norm(z, params.align_gain, params.align_bias))


def slot_decay(gamma_raw: Tensor, c: int) -> Tensor:
    """C x C lower-triangular kernel gamma**(s1 - s2), differentiable in gamma_raw."""
    s = np.arange(c)
    power = np.subtract.outer(s, s).astype(np.float64)
    lower = power >= 0
    power = np.where(lower, power, 0.0)
    log_gamma = -T.softplus(-gamma_raw)  # log(sigmoid(raw))
    return T.exp(log_gamma * power) * lower.astype(np.float64)


def slot_retention(aligned: Tensor, params: SlotParams, use_attention: bool = False) -> Tensor:
    """aligned + alpha * ((Q K^T) * D) V per node, over the slot axis.

    With ``use_attention`` the decayed score is replaced by softmax(Q K^T / sqrt(d)).
    """
    n, c, d = aligned.shape
    q = T.matmul(aligned, params.wq)
    k = T.matmul(aligned, params.wk)
    v = T.matmul(aligned, params.wv)
    scores = T.matmul(q, T.transpose(k))  # N x C x C
    if use_attention:
        weights = T.softmax(scores * (1.0 / np.sqrt(d)))
    else:
        weights = scores * slot_decay(params.gamma_raw, c)
    return aligned + params.alpha * T.matmul(weights, v)


def fuse_slots(retained: Tensor, params: SlotParams) -> tuple[Tensor, Tensor]:
    """Semantic attention over slots. Returns (fused N x d, weights N x C)."""
    n, c, d = retained.shape
    s = T.tanh(T.matmul(retained, params.attn_w) + params.attn_b)
    a = params.attn_p.shape[0]
    logits = T.reshape(T.matmul(s, T.reshape(params.attn_p, (a, 1))), (n, c))
    beta = T.softmax(logits)
    fused = T.tensor_sum(retained * T.reshape(beta, (n, c, 1)), axis=1)
    return fused, beta


def structure_encode(fused: Tensor, adj: NormalizedAdjacency, layers: int) -> Tensor:
    return gcn_aggregate(fused, adj, layers)


def slot_encode(
    features,
    node_type: np.ndarray,
    params: SlotParams,
    *,
    alignment: bool = True,
    retention: bool = True,
) -> SlotState:
    """Projection through fusion. ``retention=False`` swaps slot retention for softmax attention."""
    slots = build_slots(project_types(features, params), node_type)
    aligned = align_slots(slots, params) if alignment else slots
    retained = slot_retention(aligned, params, use_attention=not retention)
    fused, beta = fuse_slots(retained, params)
    return SlotState(slots=slots, fused=fused, fusion_weights=beta)


def direct_embed(features, node_type: np.ndarray, params: SlotParams) -> Tensor:
    """Slot-free path: per-type projection placed straight into one N x d matrix."""
    return scatter_types(project_types(features, params), node_type)
