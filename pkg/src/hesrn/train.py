"""Loss, optimizer, training loop and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ModelConfig, model_config_from_dict, model_config_to_dict
from .errors import ConfigError, DivergenceError, HesrnError, NumericError, ShapeError, ValidationError
from .graph import HeteroGraph
from .metrics import f1_scores
from .model import GraphContext, HeSRN
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HESRN-CHECKPOINT v1\n"


class CheckpointError(HesrnError, ValueError):
    """Unreadable or corrupted checkpoint."""


def classification_loss(logits: Tensor, labels: np.ndarray, mode: str, l2: float) -> Tensor:
    """Mean cross-entropy over the batch plus ``l2 * mean(logits**2)``.

    ``multiclass``: softmax cross-entropy with integer labels.
    ``multilabel``: per-label sigmoid cross-entropy with 0/1 targets.
    """
    labels = np.asarray(labels)
    b, k = logits.shape
    if mode == "multiclass":
        if labels.shape != (b,):
            raise ValidationError(f"expected {b} integer labels, got shape {labels.shape}")
        if labels.min() < 0 or labels.max() >= k:
            raise ValidationError(f"label outside [0, {k})")
        onehot = np.zeros((b, k))
        onehot[np.arange(b), labels] = 1.0
        ce = -T.tensor_sum(T.log_softmax(logits) * onehot) * (1.0 / b)
    elif mode == "multilabel":
        if labels.shape != (b, k):
            raise ValidationError(f"expected {b} x {k} label bits, got shape {labels.shape}")
        y = labels.astype(np.float64)
        ce = T.mean(T.softplus(logits) - logits * y)
    else:
        raise ValidationError(f"unknown loss mode {mode!r}")
    if l2:
        ce = ce + l2 * T.mean(logits * logits)
    return ce


def predictions(logits: np.ndarray, mode: str) -> np.ndarray:
    if mode == "multilabel":
        return (logits > 0).astype(np.int64)  # sigmoid(x) > 0.5
    return logits.argmax(axis=1)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_micro_f1: list[float] = field(default_factory=list)
    val_macro_f1: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    initial_val_micro_f1: float = 0.0
    initial_val_macro_f1: float = 0.0
    best_epoch: int = 0  # 0 = initial parameters
    test_micro_f1: float = 0.0
    test_macro_f1: float = 0.0
    num_parameters: int = 0

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def split_labels(g: HeteroGraph, name: str) -> tuple[np.ndarray, np.ndarray]:
    if g.labels is None:
        raise ValidationError("graph has no labels")
    ids = g.splits.get(name)
    if ids is None or ids.size == 0:
        raise ValidationError(f"graph has no {name!r} split")
    if not np.all(g.labeled[ids]):
        raise ValidationError(f"{name} split contains unlabeled nodes")
    return ids, g.labels[ids]


def evaluate(model: HeSRN, ctx: GraphContext, nodes, labels, batch_size: int = 1024) -> dict[str, float]:
    """Micro/macro F1 of the model on ``nodes`` (no tape is recorded)."""
    emb = model.node_embeddings(ctx)
    nodes = np.asarray(nodes)
    chunks = [model.logits(ctx, nodes[i : i + batch_size], emb).data for i in range(0, nodes.size, batch_size)]
    pred = predictions(np.concatenate(chunks), model.cfg.loss_mode)
    return f1_scores(pred, labels, model.num_classes, multilabel=model.cfg.loss_mode == "multilabel")


def _check_mode(cfg: ModelConfig, g: HeteroGraph):
    if g.multilabel != (cfg.loss_mode == "multilabel"):
        raise ConfigError(f"loss_mode={cfg.loss_mode} does not match a {'multi' if g.multilabel else 'single'}-label graph")


def train(cfg: ModelConfig, g: HeteroGraph, ctx: GraphContext | None = None) -> tuple[TrainReport, HeSRN]:
    """Seeded full training run with best-validation parameter selection."""
    cfg.validate()
    _check_mode(cfg, g)
    train_ids, train_y = split_labels(g, "train")
    val_ids, val_y = split_labels(g, "val")
    test_ids, test_y = split_labels(g, "test")
    if ctx is None:
        ctx = GraphContext.build(g, cfg, np.concatenate([train_ids, val_ids, test_ids]))
    model = HeSRN(cfg, g.feature_dims, g.num_classes)
    params = model.parameters()
    opt = Adam(params, cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    report = TrainReport(num_parameters=model.num_parameters())

    val = evaluate(model, ctx, val_ids, val_y)
    report.initial_val_micro_f1, report.initial_val_macro_f1 = val["micro_f1"], val["macro_f1"]
    best_score = val["micro_f1"]
    best = {k: p.data.copy() for k, p in params.items()}

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(train_ids.size)
        total, seen = 0.0, 0
        for lo in range(0, order.size, cfg.batch_size):
            batch = order[lo : lo + cfg.batch_size]
            opt.zero_grad()
            try:
                with Tape() as tape:
                    logits = model.logits(ctx, train_ids[batch])
                    loss = classification_loss(logits, train_y[batch], cfg.loss_mode, cfg.l2)
            except NumericError as exc:
                raise DivergenceError(f"epoch {epoch}: non-finite activations ({exc})") from exc
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"epoch {epoch}: loss is {value}")
            backward(tape, loss)
            opt.step()
            total += value * batch.size
            seen += batch.size
        report.train_loss.append(total / seen)
        try:
            val = evaluate(model, ctx, val_ids, val_y)
        except NumericError as exc:
            raise DivergenceError(f"epoch {epoch}: non-finite activations ({exc})") from exc
        report.val_micro_f1.append(val["micro_f1"])
        report.val_macro_f1.append(val["macro_f1"])
        report.epoch_seconds.append(time.perf_counter() - start)
        if val["micro_f1"] > best_score:
            best_score = val["micro_f1"]
            report.best_epoch = epoch
            best = {k: p.data.copy() for k, p in params.items()}
        log.debug("epoch %d loss %.6f val micro %.4f", epoch, report.train_loss[-1], val["micro_f1"])

    for k, p in params.items():
        p.data = best[k]
    test = evaluate(model, ctx, test_ids, test_y)
    report.test_micro_f1, report.test_macro_f1 = test["micro_f1"], test["macro_f1"]
    return report, model


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: HeSRN, path) -> None:
    """Header line (JSON: config, shapes, digest) followed by raw little-endian float64."""
    params = model.parameters()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params.values())
    header = {
        "config": model_config_to_dict(model.cfg),
        "feature_dims": model.feature_dims,
        "num_classes": model.num_classes,
        "tensors": [{"name": k, "shape": list(p.shape)} for k, p in params.items()],
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = CHECKPOINT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> HeSRN:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    rest = blob[len(CHECKPOINT_MAGIC) :]
    line, sep, payload = rest.partition(b"\n")
    try:
        header = json.loads(line)
        cfg = model_config_from_dict(header["config"])
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    if not sep or hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: payload digest mismatch (corrupted)")
    model = HeSRN(cfg, header["feature_dims"], header["num_classes"])
    params = model.parameters()
    offset = 0
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in params or params[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name} {shape} does not fit the model")
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset * 8).astype(np.float64)
        params[name].data = arr.reshape(shape)
        offset += count
    if offset * 8 != len(payload):
        raise CheckpointError(f"{path}: trailing or missing tensor data")
    return model


def check_compatible(model: HeSRN, g: HeteroGraph):
    have = (g.num_types, tuple(g.feature_dims), g.num_classes)
    want = (model.num_types, tuple(model.feature_dims), model.num_classes)
    if have[:2] != want[:2] or have[2] > want[2]:
        raise ShapeError(
            f"checkpoint expects (types, feature dims, classes) = {want}, graph has {have}"
        )


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return dataclasses.replace(cfg, **kw)
