import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hesrn.checks import tiny_instance
from hesrn.config import ABLATIONS, ModelConfig
from hesrn.errors import ShapeError, ValidationError
from hesrn.graph import SynthSpec, synth_graph
from hesrn.model import GraphContext, HeSRN, readout
from hesrn.tensor import Tape, Tensor, backward
from hesrn.train import (
    Adam,
    CheckpointError,
    check_compatible,
    classification_loss,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)

TINY = ModelConfig(hidden=8, heads=2, structure_layers=1, type_layers=1, seq_len=6, ffn_dim=8, epochs=3, batch_size=8, lr=1e-2)


@pytest.fixture(scope="module")
def tiny_graph():
    return synth_graph(SynthSpec(nodes_per_type=(30, 15, 15), feature_dim=4, avg_degree=4.0, seed=0))


@given(arrays(np.float64, (4, 3), elements=st.floats(-20, 20)), st.lists(st.integers(0, 2), min_size=4, max_size=4))
def test_multiclass_loss_nonnegative(logits, labels):
    assert classification_loss(Tensor(logits), np.array(labels), "multiclass", 0.0).item() >= 0


def test_loss_formulas():
    logits = np.array([[2.0, -1.0, 0.5], [0.0, 0.0, 3.0]])
    y = np.array([0, 2])
    ce = -np.mean([2.0 - np.log(np.exp(logits[0]).sum()), 3.0 - np.log(np.exp(logits[1]).sum())])
    assert np.isclose(classification_loss(Tensor(logits), y, "multiclass", 0.0).item(), ce, rtol=1e-14)
    got = classification_loss(Tensor(logits), y, "multiclass", 0.1).item()
    assert np.isclose(got, ce + 0.1 * np.mean(logits**2), rtol=1e-14)
    bits = np.array([[1, 0, 1], [0, 0, 1]])
    p = 1 / (1 + np.exp(-logits))
    bce = -np.mean(bits * np.log(p) + (1 - bits) * np.log(1 - p))
    assert np.isclose(classification_loss(Tensor(logits), bits, "multilabel", 0.0).item(), bce, rtol=1e-12)


def test_saturated_logits_give_zero_loss():
    y = np.array([1, 0, 2])
    logits = np.full((3, 3), -40.0)
    logits[np.arange(3), y] = 40.0
    assert classification_loss(Tensor(logits), y, "multiclass", 0.0).item() < 1e-30
    assert classification_loss(Tensor(logits), np.eye(3)[y], "multilabel", 0.0).item() < 1e-16


def test_loss_rejects_bad_labels():
    with pytest.raises(ValidationError):
        classification_loss(Tensor(np.zeros((2, 3))), np.array([0, 3]), "multiclass", 0.0)
    with pytest.raises(ValidationError):
        classification_loss(Tensor(np.zeros((2, 3))), np.array([0, 1]), "multilabel", 0.0)


def test_adam_first_step_and_zero_lr():
    w = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.array([0.5, -4.0, 0.0])
    opt.step()
    # bias-corrected first step moves by lr * g / (|g| + eps)
    assert np.allclose(w.data, [0.9, -1.9, 3.0], atol=1e-7)
    frozen = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"f": frozen}, lr=0.0)
    frozen.grad = np.array([3.0, -1.0])
    opt.step()
    assert frozen.data.tolist() == [1.0, 2.0]


def test_zero_learning_rate_step_changes_nothing():
    model, ctx, targets = tiny_instance()
    params = model.parameters()
    before = {k: p.data.copy() for k, p in params.items()}
    with Tape() as tape:
        loss = classification_loss(model.logits(ctx, targets), ctx.graph.labels[targets], "multiclass", 1e-4)
    backward(tape, loss)
    Adam(params, 0.0).step()
    assert all(np.array_equal(before[k], p.data) for k, p in params.items())


def test_training_is_deterministic(tiny_graph):
    r1, m1 = train(TINY, tiny_graph)
    r2, m2 = train(TINY, tiny_graph)
    assert r1.train_loss == r2.train_loss and r1.val_micro_f1 == r2.val_micro_f1
    assert r1.test_micro_f1 == r2.test_micro_f1 and r1.best_epoch == r2.best_epoch
    assert all(np.array_equal(a.data, b.data) for a, b in zip(m1.parameters().values(), m2.parameters().values()))


def test_zero_epochs_reports_initial_model(tiny_graph):
    report, _ = train(dataclasses.replace(TINY, epochs=0), tiny_graph)
    assert report.epochs == 0 and report.best_epoch == 0
    assert 0 <= report.test_micro_f1 <= 1


def test_restored_best_parameters_reproduce_test_score(tiny_graph):
    report, model = train(TINY, tiny_graph)
    ids = tiny_graph.splits["test"]
    ctx = GraphContext.build(tiny_graph, TINY, ids)
    assert evaluate(model, ctx, ids, tiny_graph.labels[ids])["micro_f1"] == report.test_micro_f1
    if report.best_epoch:
        assert max(report.val_micro_f1) == report.val_micro_f1[report.best_epoch - 1]


def test_no_he_retention_flag_equals_zero_beta():
    for seed in range(3):
        a, ctx, targets = tiny_instance(seed, beta_t=0.0)
        b, _, _ = tiny_instance(seed, beta_t=1.0, ablations=("no_he_retention",))
        assert np.array_equal(a.logits(ctx, targets).data, b.logits(ctx, targets).data)


@pytest.mark.parametrize("flag", ABLATIONS)
def test_every_ablation_trains(flag, tiny_graph):
    cfg = dataclasses.replace(TINY, epochs=1, ablations=(flag,))
    report, model = train(cfg, tiny_graph)
    assert np.isfinite(report.train_loss[0])


def test_readout_picks_the_target_token():
    hs = Tensor(np.arange(24.0).reshape(2, 3, 4))
    assert np.array_equal(readout(hs).data, hs.data[:, 0])


def test_readout_ignores_later_tokens_under_identity_encoder():
    rng = np.random.default_rng(0)
    hs = rng.normal(size=(2, 5, 4))
    perm = np.concatenate([[0], 1 + rng.permutation(4)])
    assert np.array_equal(readout(Tensor(hs[:, perm])).data, readout(Tensor(hs)).data)


def test_multilabel_training_runs():
    g = synth_graph(SynthSpec(nodes_per_type=(20, 10, 10), feature_dim=3, avg_degree=4.0, seed=2))
    g.labels = np.eye(3, dtype=np.int64)[np.maximum(g.labels, 0)]
    g.labels[:, 2] |= (np.arange(g.num_nodes) % 2).astype(np.int64)
    g.labeled = g.node_type == 0
    g.multilabel = True
    cfg = dataclasses.replace(TINY, epochs=2, loss_mode="multilabel")
    report, _ = train(cfg, g)
    assert len(report.train_loss) == 2


# checkpoints ------------------------------------------------------------------


def test_checkpoint_roundtrip_is_exact(tmp_path, tiny_graph):
    _, model = train(TINY, tiny_graph)
    save_checkpoint(model, tmp_path / "a.ckpt")
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.cfg == model.cfg
    for (k, a), b in zip(model.parameters().items(), back.parameters().values()):
        assert np.array_equal(a.data, b.data), k
    save_checkpoint(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("damage", ["flip", "truncate", "magic"])
def test_corrupted_checkpoint_rejected(tmp_path, damage):
    model, _, _ = tiny_instance()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    if damage == "flip":
        blob[-5] ^= 0xFF
    elif damage == "truncate":
        blob = blob[:-16]
    else:
        blob[:5] = b"XXXXX"
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_incompatible_graph_names_both_shapes(tiny_graph):
    model = HeSRN(TINY, [4, 4, 4], 3)
    check_compatible(model, tiny_graph)
    other = synth_graph(SynthSpec(nodes_per_type=6, feature_dim=5, seed=0))
    with pytest.raises(ShapeError, match=r"\(3, \(4, 4, 4\), 3\).*\(3, \(5, 5, 5\), \d\)"):
        check_compatible(model, other)


def test_zero_bias_gradient_is_the_difference_quotient_limit():
    # at initialisation the empty-slot rows are constant, so central differences
    # converge slowly; shrinking eps must close the gap toward the analytic value
    model, ctx, targets = tiny_instance(2)
    labels = ctx.graph.labels[targets]
    f = lambda: classification_loss(model.logits(ctx, targets), labels, "multiclass", 1e-4).item()
    params = model.parameters()
    for p in params.values():
        p.grad, p.requires_grad = None, True
    with Tape() as tape:
        loss = classification_loss(model.logits(ctx, targets), labels, "multiclass", 1e-4)
    backward(tape, loss)
    bias = params["slot.align_b"]
    assert not bias.data.any()
    flat = bias.data.reshape(-1)
    for i in range(0, flat.size, 5):
        gaps = []
        for eps in (1e-4, 1e-6):
            flat[i] = eps
            up = f()
            flat[i] = -eps
            down = f()
            flat[i] = 0.0
            gaps.append(abs((up - down) / (2 * eps) - bias.grad.reshape(-1)[i]))
        assert gaps[1] <= max(1e-6 * abs(bias.grad.reshape(-1)[i]), 1e-6) or gaps[1] < gaps[0] / 10
