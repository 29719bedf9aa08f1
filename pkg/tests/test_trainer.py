import numpy as np
import pytest

from conftest import unit_rows
from odpc.errors import ConfigError, InvalidArgumentError
from odpc.head import init_head
from odpc.losses import HeadGrads, LossConfig
from odpc.trainer import (
    TrainingConfig,
    TrainingState,
    lr_at,
    sgd_step,
    train,
    write_loss_history,
)


def test_lr_schedule_values():
    cfg = TrainingConfig()
    assert lr_at(0, cfg) == pytest.approx(1e-5)
    assert lr_at(29, cfg) == pytest.approx(1e-5)
    assert lr_at(30, cfg) == pytest.approx(2.5e-6)
    assert lr_at(159, cfg) == pytest.approx(1e-5 * 0.25**5)
    with pytest.raises(InvalidArgumentError):
        lr_at(-1, cfg)


def _scalar_state():
    head = init_head(2, 0, seed=0, feature_dim=4)
    for _, p in head.param_items():
        p[...] = 0.0
    head.weights[0][0, 0] = 1.0
    return TrainingState.fresh(head)


def _grads_like(head, fill):
    return HeadGrads(
        weights=[np.full(w.shape, fill) for w in head.weights],
        biases=[np.full(b.shape, fill) for b in head.biases],
        clf_weight=np.full(head.clf_weight.shape, fill),
        clf_bias=np.full(head.clf_bias.shape, fill),
    )


def test_sgd_plain_step():
    state = _scalar_state()
    grads = _grads_like(state.head, 0.5)
    sgd_step(state, grads, lr=0.1, momentum=0.0)
    assert state.head.weights[0][0, 0] == pytest.approx(0.95, rel=1e-6)


def test_sgd_momentum_two_steps():
    state = _scalar_state()
    grads = _grads_like(state.head, 1.0)
    sgd_step(state, grads, lr=0.1, momentum=0.9)
    assert state.head.weights[0][0, 0] == pytest.approx(0.9, rel=1e-6)
    sgd_step(state, grads, lr=0.1, momentum=0.9)
    # v = 0.9*1 + 1 = 1.9 -> theta = 0.9 - 0.19
    assert state.head.weights[0][0, 0] == pytest.approx(0.71, rel=1e-6)


def test_sgd_zero_lr_updates_buffers_only():
    state = _scalar_state()
    before = state.head.weights[0].copy()
    sgd_step(state, _grads_like(state.head, 1.0), lr=0.0, momentum=0.5)
    assert np.array_equal(state.head.weights[0], before)
    assert state.velocities["fc1.weight"][0, 0] == pytest.approx(1.0)


def _toy_training_setup(seed=0, n_per_class=20, n_classes=3, dim=16):
    rng = np.random.default_rng(seed)
    centers = unit_rows(rng, n_classes, dim)
    rows, labels = [], []
    for c in range(n_classes):
        pts = centers[c] + 0.3 * rng.standard_normal((n_per_class, dim))
        rows.append(pts / np.linalg.norm(pts, axis=1, keepdims=True))
        labels += [c] * n_per_class
    features = np.vstack(rows)
    labels = np.array(labels)
    class_text = unit_rows(rng, n_classes, dim)
    peer_text = {c: unit_rows(rng, 2, dim) for c in range(n_classes)}
    return features, labels, class_text, peer_text


def test_train_deterministic_given_seed():
    features, labels, class_text, peer_text = _toy_training_setup()
    cfg = TrainingConfig(epochs=3, batch_size=8, lr=1e-4, seed=5,
                         loss=LossConfig(temperature=0.05))
    runs = []
    for _ in range(2):
        head = init_head(3, 6, seed=1, feature_dim=16)
        state = train(features, labels, class_text, peer_text, head, cfg)
        runs.append(state)
    for a, b in zip(runs[0].history, runs[1].history):
        assert a.total == b.total and a.ce == b.ce and a.pcc_layers == b.pcc_layers
    for (_, pa), (_, pb) in zip(runs[0].head.param_items(), runs[1].head.param_items()):
        assert np.array_equal(pa, pb)


def test_train_zero_epochs_leaves_head_unchanged():
    features, labels, class_text, peer_text = _toy_training_setup()
    head = init_head(3, 6, seed=1, feature_dim=16)
    before = [p.copy() for _, p in head.param_items()]
    state = train(features, labels, class_text, peer_text, head,
                  TrainingConfig(epochs=0, batch_size=8))
    assert state.history == []
    for (_, now), old in zip(state.head.param_items(), before):
        assert np.array_equal(now, old)


def test_train_loss_decreases_on_toy_data():
    features, labels, class_text, peer_text = _toy_training_setup()
    head = init_head(3, 6, seed=1, feature_dim=16)
    cfg = TrainingConfig(epochs=8, batch_size=8, lr=1e-4, seed=2,
                         loss=LossConfig(temperature=0.05))
    state = train(features, labels, class_text, peer_text, head, cfg)
    assert state.history[-1].total < state.history[0].total
    assert all(np.isfinite(st.total) for st in state.history)


def test_train_inputs_stay_frozen():
    features, labels, class_text, peer_text = _toy_training_setup()
    snap = features.copy()
    head = init_head(3, 6, seed=1, feature_dim=16)
    train(features, labels, class_text, peer_text, head,
          TrainingConfig(epochs=1, batch_size=8))
    assert np.array_equal(features, snap)


def test_train_skips_single_class_batches(caplog):
    rng = np.random.default_rng(0)
    # 8 samples of class 0 then 8 of class 1 with batch_size 8 and a shuffle
    # seed chosen freely; skipped batches must be logged, not fatal
    features = unit_rows(rng, 16, 8)
    labels = np.array([0] * 8 + [1] * 8)
    class_text = unit_rows(rng, 2, 8)
    peer_text = {0: unit_rows(rng, 1, 8), 1: unit_rows(rng, 1, 8)}
    head = init_head(2, 2, seed=0, feature_dim=8)
    cfg = TrainingConfig(epochs=6, batch_size=8, lr=1e-4, seed=0,
                         loss=LossConfig(temperature=0.05))
    with caplog.at_level("WARNING"):
        state = train(features, labels, class_text, peer_text, head, cfg)
    total_skipped = sum(st.skipped for st in state.history)
    if total_skipped:
        assert any("single-class batch" in rec.message for rec in caplog.records)
    assert len(state.history) == 6


def test_train_requires_two_classes():
    rng = np.random.default_rng(0)
    features = unit_rows(rng, 10, 8)
    labels = np.zeros(10, dtype=int)
    with pytest.raises(ConfigError):
        train(features, labels, unit_rows(rng, 1, 8), {0: unit_rows(rng, 1, 8)},
              init_head(2, 0, seed=0, feature_dim=8), TrainingConfig(epochs=1, batch_size=4))


def test_train_missing_peers_rejected():
    features, labels, class_text, peer_text = _toy_training_setup()
    del peer_text[1]
    with pytest.raises(ConfigError):
        train(features, labels, class_text, peer_text,
              init_head(3, 6, seed=1, feature_dim=16),
              TrainingConfig(epochs=1, batch_size=8))


def test_loss_history_csv(tmp_path):
    features, labels, class_text, peer_text = _toy_training_setup()
    head = init_head(3, 6, seed=1, feature_dim=16)
    cfg = TrainingConfig(epochs=2, batch_size=8, lr=1e-4, seed=3,
                         loss=LossConfig(temperature=0.05))
    state = train(features, labels, class_text, peer_text, head, cfg)
    path = tmp_path / "loss_history.csv"
    write_loss_history(state.history, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,lr,total,pcc1,pcc2,pcc3,ce"
    assert len(lines) == 3
    first = lines[1].split(",")
    assert int(first[0]) == 0
    assert float(first[1]) == pytest.approx(1e-4)
    assert float(first[2]) == pytest.approx(state.history[0].total)


def test_training_config_validation():
    with pytest.raises(ConfigError):
        TrainingConfig(epochs=-1)
    with pytest.raises(ConfigError):
        TrainingConfig(batch_size=1)
    with pytest.raises(ConfigError):
        TrainingConfig(gamma=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(lr=0.0)
