"""Micro/macro F1 for multiclass and multilabel node classification."""

from __future__ import annotations

import numpy as np

from .errors import ValidationError


def _f1(tp, fp, fn):
    tp, fp, fn = (np.asarray(x, dtype=np.float64) for x in (tp, fp, fn))
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(denom), where=denom > 0)


def f1_scores(pred, true, num_classes: int, multilabel: bool = False) -> dict[str, float]:
    """Pooled (micro) and unweighted per-class (macro) F1.

    A class with no support in either vector scores F1 = 0 in the macro mean.
    Multilabel inputs are B x K 0/1 matrices; micro pools all (sample, label) pairs.
    """
    pred = np.asarray(pred, dtype=np.int64)
    true = np.asarray(true, dtype=np.int64)
    if pred.size == 0 or true.size == 0:
        raise ValidationError("f1_scores: empty input")
    if pred.shape != true.shape:
        raise ValidationError(f"f1_scores: prediction shape {pred.shape} != truth shape {true.shape}")
    if multilabel:
        tp = ((pred == 1) & (true == 1)).sum(axis=0)
        fp = ((pred == 1) & (true == 0)).sum(axis=0)
        fn = ((pred == 0) & (true == 1)).sum(axis=0)
    else:
        if pred.min() < 0 or true.min() < 0 or max(pred.max(), true.max()) >= num_classes:
            raise ValidationError(f"f1_scores: class index outside [0, {num_classes})")
        conf = np.bincount(true * num_classes + pred, minlength=num_classes * num_classes)
        conf = conf.reshape(num_classes, num_classes)
        tp = np.diag(conf)
        fp = conf.sum(axis=0) - tp
        fn = conf.sum(axis=1) - tp
    micro = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    macro = float(np.mean(_f1(tp, fp, fn)))
    return {"micro_f1": micro, "macro_f1": macro}
