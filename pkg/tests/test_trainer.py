import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from capslu.gradcheck import tiny_model_config
from capslu.model import Checkpoint, SlotGroup, SlotSpec
from capslu.trainer import (
    AdamState, Example, TrainConfig, accuracy, adam_step, batch_loss, evaluate, make_batches,
    new_params, pad_batch, train, write_history_csv,
)

SPEC = SlotSpec((SlotGroup("action", (0, 1)), SlotGroup("object", (2, 3, 4))))


def toy_dataset(n=6, seed=0, D=3):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        a, o = i % 2, 2 + i % 3
        t = np.zeros(5)
        t[[a, o]] = 1
        T = int(rng.integers(4, 9))
        x = rng.normal(scale=0.3, size=(T, D)) + np.array([a, o - 3, a * o], float)[:D]
        out.append(Example(x, t, f"u{i}"))
    return out


def oracle_adam(theta, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        trace.append(theta)
    return trace


# ---------------------------------------------------------------- adam

def test_adam_three_steps_on_quadratic():
    cfg = TrainConfig(learning_rate=0.05)
    theta = np.array([2.0])
    state = AdamState()
    got, grads = [], []
    for _ in range(3):
        g = 2 * theta.copy()          # d/dθ θ²
        grads.append(float(g[0]))
        adam_step({"w": theta}, {"w": g}, state, cfg)
        got.append(float(theta[0]))
    expected = oracle_adam(2.0, grads, lr=0.05)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("g", [1.0, 1e-3, 250.0, -4.0])
def test_adam_first_step_is_lr_times_sign(g):
    p = np.array([0.0])
    adam_step({"w": p}, {"w": np.array([g])}, AdamState(), TrainConfig())
    assert p[0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_zero_grad_and_shape_mismatch():
    p = np.array([1.0, 2.0])
    adam_step({"w": p}, {"w": np.zeros(2)}, AdamState(), TrainConfig())
    np.testing.assert_array_equal(p, [1.0, 2.0])
    with pytest.raises(ValueError):
        adam_step({"w": p}, {"w": np.zeros(3)}, AdamState(), TrainConfig())


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(adam_beta1=1.0)


# ---------------------------------------------------------------- batching

def test_batches_16_16_1_and_deterministic():
    data = toy_dataset(33)
    cfg = TrainConfig()
    batches = make_batches(data, cfg, epoch=0)
    assert [len(b.lengths) for b in batches] == [16, 16, 1]
    assert sorted(np.concatenate([b.indices for b in batches])) == list(range(33))
    again = make_batches(data, cfg, epoch=0)
    assert all((a.indices == b.indices).all() for a, b in zip(batches, again))
    other = make_batches(data, cfg, epoch=1)
    assert any((a.indices != b.indices).any() for a, b in zip(batches, other))


def test_pad_batch_layout():
    data = toy_dataset(3)
    b = pad_batch(data)
    T = max(len(e.features) for e in data)
    assert b.features.shape == (3, T, 3)
    for i, e in enumerate(data):
        np.testing.assert_allclose(b.features[i, :len(e.features)], e.features, rtol=1e-6)
        assert np.all(b.features[i, len(e.features):] == 0)
        assert b.mask[i].sum() == len(e.features)


@pytest.mark.parametrize("kind", ["capsule", "baseline"])
@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31), extra=st.integers(0, 12))
def test_batched_loss_matches_single_utterance(kind, seed, extra):
    config = tiny_model_config(n_labels=5)
    params = new_params(kind, config, seed % 97, np.float64)
    data = toy_dataset(4, seed % 1000)
    batch = pad_batch(data, dtype=np.float64, extra_pad=extra)
    per = batch_loss(kind, params, config, batch, reduce="none").data
    for i, e in enumerate(data):
        single = batch_loss(kind, params, config, pad_batch([e], dtype=np.float64), reduce="none").data
        assert abs(per[i] - single[0]) <= 1e-5


# ---------------------------------------------------------------- training

CFG = TrainConfig(batch_size=4, epochs=30, learning_rate=0.01)


@pytest.mark.parametrize("kind", ["capsule", "baseline"])
def test_loss_decreases(kind):
    config = tiny_model_config(n_labels=5)
    hist = train(kind, toy_dataset(5), config, CFG).history
    assert len(hist) == 30 and hist[-1] < hist[0]


def test_zero_learning_rate_keeps_initial_params():
    config = tiny_model_config(n_labels=5)
    result = train("capsule", toy_dataset(5), config, dataclasses.replace(CFG, epochs=2, learning_rate=0.0))
    init = new_params("capsule", config, CFG.seed)
    for k, p in init.items():
        assert result.checkpoint.params[k].tobytes() == p.data.tobytes()


def test_training_is_deterministic():
    config = tiny_model_config(n_labels=5)
    cfg = dataclasses.replace(CFG, epochs=3)
    a = train("capsule", toy_dataset(6), config, cfg)
    b = train("capsule", toy_dataset(6), config, cfg)
    assert a.history == b.history
    assert all(a.checkpoint.params[k].tobytes() == b.checkpoint.params[k].tobytes()
               for k in a.checkpoint.params)


def test_train_rejects_empty_and_unknown_kind():
    with pytest.raises(ValueError):
        train("capsule", [], tiny_model_config(), CFG)
    with pytest.raises(ValueError):
        new_params("transformer", tiny_model_config(), 0)


# ---------------------------------------------------------------- evaluation

def test_accuracy_with_perfect_predictions():
    data = toy_dataset(6)
    targets = np.stack([e.target for e in data])
    assert accuracy(targets * 0.95, targets, SPEC) == 1.0


def test_all_zero_model_matches_constant_decoder_oracle():
    config = tiny_model_config(n_labels=5)
    params = {k: np.zeros_like(p.data) for k, p in new_params("capsule", config, 0).items()}
    ckpt = Checkpoint("capsule", config, params, np.zeros(3, np.float32), np.ones(3, np.float32))
    data = toy_dataset(12)
    constant = {0, 2}                                  # lowest index in each mandatory group
    expected = np.mean([set(np.flatnonzero(e.target)) == constant for e in data])
    assert evaluate(ckpt, data, SPEC) == pytest.approx(expected)


def test_evaluate_empty_is_an_error():
    config = tiny_model_config(n_labels=5)
    params = {k: p.data for k, p in new_params("capsule", config, 0).items()}
    ckpt = Checkpoint("capsule", config, params, np.zeros(3, np.float32), np.ones(3, np.float32))
    with pytest.raises(ValueError):
        evaluate(ckpt, [], SPEC)


def test_history_csv(tmp_path):
    write_history_csv(tmp_path / "loss.csv", [0.5, 0.25])
    assert (tmp_path / "loss.csv").read_text() == "epoch,mean_loss\n1,0.5\n2,0.25\n"
