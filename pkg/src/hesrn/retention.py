"""Retention over node token sequences: xPos rotation, decay masks, He-Retention,
multi-scale heads and the full pre-norm HeSRN layer.

Decay is applied exactly once, through the mask D; the xPos modulation used by
the model only rotates queries and keys.  ``xpos_modulate`` can also apply the
magnitude factors gamma**n / gamma**-m for checking the relative-position identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ParameterError, ShapeError
from .slots import glorot
from .tensor import Tensor

XPOS_BASE = 10000.0


def head_gammas(heads: int) -> np.ndarray:
    """Fixed per-head decays 1 - exp(linspace(log 1/32, log 1/512, h))."""
    if heads < 1:
        raise ParameterError(f"heads must be >= 1, got {heads}")
    return 1.0 - np.exp(np.linspace(np.log(1 / 32), np.log(1 / 512), heads))


def xpos_thetas(head_dim: int, base: float = XPOS_BASE) -> np.ndarray:
    if head_dim % 2:
        raise ShapeError(f"head width {head_dim} must be even for pairwise rotation")
    return base ** (-2.0 * np.arange(head_dim // 2) / head_dim)


def _check_gamma(gamma: float):
    if not 0.0 < gamma < 1.0:
        raise ParameterError(f"decay gamma={gamma} outside (0, 1)")


def xpos_modulate(x, positions, thetas, gamma: float | None = None, sign: str = "query") -> Tensor:
    """Apply (gamma e^{i theta})^n to queries or its conjugate-side inverse to keys.

    Consecutive feature pairs are complex numbers.  Both sides are rotated by
    +position * theta in real arithmetic: the real dot product of pair vectors
    is Re(q conj(k)), so this realizes the conjugate key phase and the score
    picks up exactly e^{i (n - m) theta}.  With ``gamma`` the query is scaled by
    gamma**n and the key by gamma**-m.
    """
    if sign not in ("query", "key"):
        raise ParameterError(f"sign must be 'query' or 'key', got {sign!r}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] % 2:
        raise ShapeError(f"xpos_modulate: width {x.shape[-1]} is odd")
    pos = np.asarray(positions, dtype=np.float64)
    angle = pos[:, None] * np.asarray(thetas, dtype=np.float64)[None, :]
    out = T.rotate_pairs(x, np.cos(angle), np.sin(angle))
    if gamma is not None:
        _check_gamma(gamma)
        power = pos if sign == "query" else -pos
        out = out * (gamma ** power)[:, None]
    return out


def decay_mask(length: int, gamma: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Lower-triangular D[n, m] = gamma**(n - m); padded rows and columns zeroed.

    ``mask`` (L or B x L, True = real token) gives a B x L x L result.
    """
    _check_gamma(gamma)
    idx = np.arange(length)
    diff = np.subtract.outer(idx, idx)
    d = np.where(diff >= 0, gamma ** np.maximum(diff, 0).astype(np.float64), 0.0)
    if mask is None:
        return d
    m = np.asarray(mask, dtype=np.float64)
    return d * m[..., :, None] * m[..., None, :]


def retention_parallel(q, k, v, gamma: float, mask: np.ndarray | None = None) -> Tensor:
    """((Q K^T) * D) V for one head; q, k, v are L x d_h or B x L x d_h."""
    q, k, v = (t if isinstance(t, Tensor) else Tensor(t) for t in (q, k, v))
    d = decay_mask(q.shape[-2], gamma, mask)
    return T.matmul(T.matmul(q, T.transpose(k)) * d, v)


def retention_recurrent(q, k, v, gamma: float, mask: np.ndarray | None = None) -> np.ndarray:
    """Recurrent form: S_n = gamma S_{n-1} + k_n^T v_n, out_n = q_n S_n.

    Padded steps neither write to the state nor emit output.  Between two real
    tokens the state decays once per position, matching the parallel mask.
    """
    _check_gamma(gamma)
    q, k, v = (np.asarray(getattr(t, "data", t), dtype=np.float64) for t in (q, k, v))
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
        mask = None if mask is None else np.asarray(mask)[None]
    b, length, dk = q.shape
    dv = v.shape[-1]
    real = np.ones((b, length), bool) if mask is None else np.asarray(mask, bool)
    out = np.zeros((b, length, dv))
    state = np.zeros((b, dk, dv))
    for n in range(length):
        w = real[:, n][:, None, None]
        state = gamma * state + np.where(w, k[:, n, :, None] * v[:, n, None, :], 0.0)
        out[:, n] = np.where(real[:, n][:, None], np.einsum("bk,bkv->bv", q[:, n], state), 0.0)
    return out[0] if squeeze else out


def he_retention(q, k, v, qt, kt, gamma: float, beta: float, mask: np.ndarray | None = None) -> Tensor:
    """((Q K^T + beta Q^T K^T_types) * D) V.  beta == 0 is plain retention."""
    if beta == 0:
        return retention_parallel(q, k, v, gamma, mask)
    if qt.shape[-1] != kt.shape[-1]:
        raise ShapeError(f"type query {qt.shape} and key {kt.shape} widths differ")
    d = decay_mask(q.shape[-2], gamma, mask)
    scores = T.matmul(q, T.transpose(k)) + beta * T.matmul(qt, T.transpose(kt))
    return T.matmul(scores * d, v)


def attention_head(q, k, v, qt, kt, beta: float, mask: np.ndarray | None = None) -> Tensor:
    """Non-causal softmax attention with the same score terms (Transformer ablation)."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.matmul(q, T.transpose(k))
    if beta != 0:
        scores = scores + beta * T.matmul(qt, T.transpose(kt))
    length = q.shape[-2]
    if mask is None:
        keep = np.ones((length, length), bool)
    else:
        m = np.asarray(mask, bool)
        keep = m[..., :, None] & m[..., None, :]
    return T.matmul(T.masked_softmax(scores * scale, keep), v)


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    lnt_gain: Tensor
    lnt_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wtq: Tensor  # h x C x C
    wtk: Tensor  # h x C x C
    wg: Tensor
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn1: Tensor
    ffn2: Tensor

    FIELDS = (
        "ln1_gain", "ln1_bias", "lnt_gain", "lnt_bias", "wq", "wk", "wv", "wtq", "wtk",
        "wg", "wo", "ln2_gain", "ln2_bias", "ffn1", "ffn2",
    )

    @classmethod
    def init(cls, d: int, c: int, heads: int, ffn: int, rng: np.random.Generator):
        ones = lambda n: Tensor(np.ones(n), requires_grad=True)  # noqa: E731
        zeros = lambda n: Tensor(np.zeros(n), requires_grad=True)  # noqa: E731
        return cls(
            ln1_gain=ones(d), ln1_bias=zeros(d),
            lnt_gain=ones(c), lnt_bias=zeros(c),
            wq=glorot(rng, (d, d), d, d),
            wk=glorot(rng, (d, d), d, d),
            wv=glorot(rng, (d, d), d, d),
            wtq=glorot(rng, (heads, c, c), c, c),
            wtk=glorot(rng, (heads, c, c), c, c),
            wg=glorot(rng, (d, d), d, d),
            wo=glorot(rng, (d, d), d, d),
            ln2_gain=ones(d), ln2_bias=zeros(d),
            ffn1=glorot(rng, (d, ffn), d, ffn),
            ffn2=glorot(rng, (ffn, d), ffn, d),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{k}": getattr(self, k) for k in self.FIELDS}


def msr(
    hs: Tensor,
    ht: Tensor,
    p: LayerParams,
    heads: int,
    beta: float,
    mask: np.ndarray | None = None,
    use_attention: bool = False,
) -> Tensor:
    """Multi-scale He-Retention: per-head decays, GroupNorm, swish gate, output map."""
    d = hs.shape[-1]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    dh = d // heads
    length = hs.shape[-2]
    positions = np.arange(length)
    thetas = xpos_thetas(dh)
    q_all = T.matmul(hs, p.wq)
    k_all = T.matmul(hs, p.wk)
    v_all = T.matmul(hs, p.wv)
    outs = []
    for i, gamma in enumerate(head_gammas(heads)):
        cols = (Ellipsis, slice(i * dh, (i + 1) * dh))
        q = xpos_modulate(q_all[cols], positions, thetas, sign="query")
        k = xpos_modulate(k_all[cols], positions, thetas, sign="key")
        v = v_all[cols]
        qt = kt = None
        if beta != 0:
            qt = T.matmul(ht, p.wtq[i])
            kt = T.matmul(ht, p.wtk[i])
        if use_attention:
            outs.append(attention_head(q, k, v, qt, kt, beta, mask))
        else:
            outs.append(he_retention(q, k, v, qt, kt, float(gamma), beta, mask))
    y = T.group_norm(outs[0] if heads == 1 else T.concat(outs, axis=-1), heads)
    gate = T.swish(T.matmul(hs, p.wg))
    return T.matmul(gate * y, p.wo)


def ffn(x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    return T.matmul(T.gelu(T.matmul(x, w1)), w2)


def hesrn_layer(
    hs: Tensor,
    ht: Tensor,
    p: LayerParams,
    heads: int,
    beta: float,
    mask: np.ndarray | None = None,
    use_attention: bool = False,
) -> Tensor:
    """Y = MSR(LN(H_S), LN(H_T)) + H_S;  H_S' = FFN(LN(Y)) + Y.  Padded rows stay zero."""
    y = msr(
        T.layer_norm(hs, p.ln1_gain, p.ln1_bias),
        T.layer_norm(ht, p.lnt_gain, p.lnt_bias),
        p, heads, beta, mask, use_attention,
    ) + hs
    out = ffn(T.layer_norm(y, p.ln2_gain, p.ln2_bias), p.ffn1, p.ffn2) + y
    if mask is not None:
        out = out * np.asarray(mask, dtype=np.float64)[..., None]
    return out
