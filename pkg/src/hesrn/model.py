"""HeSRN forward pass: slot encoder -> structure encoding -> token sequences ->
retentive layers -> readout -> class logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ModelConfig
from .graph import HeteroGraph, NormalizedAdjacency, gcn_aggregate, sample_sequences, type_onehot
from .retention import LayerParams, hesrn_layer
from .slots import SlotParams, direct_embed, glorot, slot_encode, structure_encode
from .tensor import Tensor


@dataclass
class GraphContext:
    """Constant, per-graph inputs shared by every forward pass."""

    graph: HeteroGraph
    adj: NormalizedAdjacency
    features: list[Tensor]
    type_embed: np.ndarray  # N x C, GCN-propagated one-hot types
    token_ids: np.ndarray  # one row per target node in ``row_of``
    token_mask: np.ndarray
    row_of: dict[int, int]

    @classmethod
    def build(cls, g: HeteroGraph, cfg: ModelConfig, nodes=None) -> "GraphContext":
        adj = NormalizedAdjacency(g)
        if nodes is None:
            nodes = g.type_members(g.target_type)
        nodes = np.asarray(nodes, dtype=np.int64)
        ids, mask = sample_sequences(g, nodes, cfg.seq_len, cfg.seed, adj)
        h_t = gcn_aggregate(type_onehot(g), adj, cfg.type_layers).data
        return cls(
            graph=g,
            adj=adj,
            features=[Tensor(f) for f in g.features],
            type_embed=h_t,
            token_ids=ids,
            token_mask=mask,
            row_of={int(v): i for i, v in enumerate(nodes.tolist())},
        )

    def tokens(self, targets) -> tuple[np.ndarray, np.ndarray]:
        rows = np.array([self.row_of[int(v)] for v in targets], dtype=np.int64)
        return self.token_ids[rows], self.token_mask[rows]


def readout(hs: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Target-node (position 0) representation of each sequence."""
    return hs[:, 0, :]


def predict(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.matmul(h, w) + b


class HeSRN:
    def __init__(self, cfg: ModelConfig, feature_dims, num_classes: int):
        cfg.validate()
        self.cfg = cfg
        self.feature_dims = list(feature_dims)
        self.num_types = len(self.feature_dims)
        self.num_classes = num_classes
        rng = np.random.default_rng(cfg.seed)
        d = cfg.hidden
        self.slot = SlotParams.init(self.feature_dims, d, rng)
        self.layers = [
            LayerParams.init(d, self.num_types, cfg.heads, cfg.ffn_dim, rng) for _ in range(cfg.retentive_layers)
        ]
        self.head_w = glorot(rng, (d, num_classes), d, num_classes)
        self.head_b = Tensor(np.zeros(num_classes), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        out = dict(self.slot.named())
        for i, layer in enumerate(self.layers):
            out.update(layer.named(f"layer{i}"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def node_embeddings(self, ctx: GraphContext) -> Tensor:
        """Structure-encoded embeddings for all N nodes."""
        cfg = self.cfg
        g = ctx.graph
        if cfg.ablated("no_slot"):
            fused = direct_embed(ctx.features, g.node_type, self.slot)
        else:
            fused = slot_encode(
                ctx.features,
                g.node_type,
                self.slot,
                alignment=not cfg.ablated("no_slot_alignment"),
                retention=not cfg.ablated("no_slot_retention"),
            ).fused
        return structure_encode(fused, ctx.adj, cfg.structure_layers)

    def encode_sequences(self, nodes: Tensor, ctx: GraphContext, token_ids, mask) -> Tensor:
        """Run the retentive layers over B x L token sequences; returns B x L x d."""
        cfg = self.cfg
        m = mask.astype(np.float64)[..., None]
        hs = T.take(nodes, token_ids) * m
        ht = Tensor(ctx.type_embed[token_ids] * m)
        for layer in self.layers:
            hs = hesrn_layer(
                hs, ht, layer, cfg.heads, cfg.effective_beta, mask,
                use_attention=cfg.ablated("no_retentive"),
            )
        return hs

    def logits(self, ctx: GraphContext, targets, nodes: Tensor | None = None) -> Tensor:
        if nodes is None:
            nodes = self.node_embeddings(ctx)
        ids, mask = ctx.tokens(targets)
        hs = self.encode_sequences(nodes, ctx, ids, mask)
        return predict(readout(hs, mask), self.head_w, self.head_b)
