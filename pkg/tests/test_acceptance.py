"""End-to-end acceptance gate: one test per criterion, each recording a PASS/FAIL line.

Criteria 7 and 8 train full-size models on the synthetic corpus and take
several minutes each on one CPU core.
"""

import itertools
import time

import numpy as np
import pytest

from capslu import autodiff as ad
from capslu.autodiff import Tensor
from capslu.baseline import baseline_count_params
from capslu.cli import main
from capslu.experiment import (
    SyntheticSpec, block_objective, generate_synthetic, jsd, load_examples, lowess,
    model_config_for, split_blocks, split_blocks_assign,
)
from capslu.features import AudioClip, log_mel_energy
from capslu.gradcheck import RTOL, run_gradcheck
from capslu.model import ModelConfig, count_params, dynamic_routing, forward, init_params, margin_loss
from capslu.trainer import (
    AdamState, Example, TrainConfig, adam_step, batch_loss, evaluate, new_params, pad_batch, train,
)

from test_experiment import direct_jsd, exhaustive_optimum, naive_lowess
from test_features import oracle_log_mel
from test_model import oracle_routing, oracle_squash
from test_trainer import oracle_adam


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Default synthetic corpus: 3 actions x 4 x 4 slot values, 10 realisations each."""
    root = tmp_path_factory.mktemp("accept")
    manifest = generate_synthetic(SyntheticSpec(seed=0), root)
    blocks = split_blocks(manifest, 10, seed=0)
    return manifest, [b.ids for b in blocks]


# ---------------------------------------------------------------- 1

def test_criterion_1_parameter_counts(record):
    caps = count_params(ModelConfig(n_labels=30))
    base = baseline_count_params(ModelConfig(n_labels=30))
    ok = abs(caps - 2.2e6) <= 0.1 * 2.2e6 and abs(base - 2.3e6) <= 0.1 * 2.3e6
    assert record(1, ok, f"capsule {caps:,} (target 2.2M), baseline {base:,} (target 2.3M)")


# ---------------------------------------------------------------- 2

def test_criterion_2_gradient_suite(record):
    start = time.time()
    reports = run_gradcheck(seed=0, n_seeds=20)
    elapsed = time.time() - start
    worst = max(reports, key=lambda r: r.max_error)
    ok = all(r.ok and r.seeds >= 20 for r in reports) and elapsed < 300
    assert record(2, ok, f"{len(reports)} checks x 20 seeds, worst {worst.name} {worst.max_error:.2e} "
                         f"(< {RTOL:g}), {elapsed:.0f}s")


# ---------------------------------------------------------------- 3

def test_criterion_3_routing(record):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        R, L, N, od = (int(v) for v in rng.integers(1, 5, size=4))
        P = rng.normal(size=(R, L, od))
        B = rng.normal(size=(R, L))
        O, C = dynamic_routing(Tensor(P[None]), Tensor(B), N)
        oO, oC = oracle_routing(P, B, N)
        worst = max(worst, np.abs(O.data[0] - oO).max(), np.abs(C.data[0] - oC).max())
    closed = 0.0
    for _ in range(20):
        R, L, od = (int(v) for v in rng.integers(1, 6, size=3))
        P = rng.normal(size=(1, R, L, od))
        O, _ = dynamic_routing(Tensor(P), Tensor(np.zeros((R, L))), 1)
        expected = np.stack([oracle_squash(P[0, :, j].sum(axis=0) / L) for j in range(L)])
        closed = max(closed, np.abs(O.data[0] - expected).max())
    ok = worst <= 1e-10 and closed <= 1e-10
    assert record(3, ok, f"oracle max diff {worst:.1e} over 100 instances, N=1/B=0 closed form {closed:.1e}")


# ---------------------------------------------------------------- 4

def test_criterion_4_squash(record):
    rng = np.random.default_rng(4)
    worst = 0.0
    for scale in [0.0, 1e-12, 1e-8, 1e-4, 1e-2, 0.5, 1.0, 3.0, 100.0, 1e4]:
        x = rng.normal(size=(50, 8)) * scale
        y = ad.squash(Tensor(x)).data
        nx = np.linalg.norm(x, axis=-1)
        worst = max(worst, np.abs(np.linalg.norm(y, axis=-1) - nx ** 2 / (1 + nx ** 2)).max())
    config = ModelConfig(input_dim=12, encoder_units=16, n_labels=6)
    max_s = max_o = 0.0
    for seed in range(10):
        params = init_params(config, seed, np.float64)
        for p in params.values():
            p.data[...] *= 3.0               # push capsules towards saturation
        tr = forward(rng.normal(scale=4, size=(2, 20, 12)), params, config)
        max_s = max(max_s, np.linalg.norm(tr.S.data, axis=-1).max())
        max_o = max(max_o, np.linalg.norm(tr.O.data, axis=-1).max())
    ok = worst <= 1e-10 and max_s < 1 and max_o < 1
    assert record(4, ok, f"norm identity max err {worst:.1e}; max |s| {max_s:.6f}, max |o| {max_o:.6f}")


# ---------------------------------------------------------------- 5

def test_criterion_5_margin_loss(record):
    def one(l, t):
        return float(margin_loss(Tensor(np.array([[l]])), np.array([[t]])).data)

    spots = [one(0.9, 1) == 0.0, abs(one(0.5, 1) - 0.4) < 1e-15, one(0.1, 0) == 0.0]
    rng = np.random.default_rng(5)
    iff = True
    for _ in range(2000):
        L = int(rng.integers(2, 8))
        t = (rng.uniform(size=L) < 0.4).astype(float)
        met = rng.uniform(size=L) < 0.7
        l = np.where(t == 1, np.where(met, rng.uniform(0.9, 1.0, L), rng.uniform(0, 0.9, L)),
                     np.where(met, rng.uniform(0, 0.1, L), rng.uniform(0.1 + 1e-9, 1.0, L)))
        loss = float(margin_loss(Tensor(l[None]), t[None]).data)
        iff &= (loss == 0.0) == bool(met.all())
    ok = all(spots) and iff
    assert record(5, ok, f"spot values {spots}, zero-iff-margins over 2000 draws {iff}")


# ---------------------------------------------------------------- 6

def test_criterion_6_oracles(record):
    rng = np.random.default_rng(6)
    x = rng.normal(scale=0.1, size=4000)
    fb = np.abs(np.exp(log_mel_energy(AudioClip(x, 16000))) / np.exp(oracle_log_mel(x, 16000)) - 1).max()

    lo = 0.0
    for seed in range(3):
        r = np.random.default_rng(seed)
        xs, ys = r.uniform(0, 50, 25), r.normal(size=25)
        lo = max(lo, np.abs(lowess(xs, ys)[1] - naive_lowess(list(xs), list(ys), 0.5, 2)[1]).max())

    theta, state, got, grads = np.array([1.5]), AdamState(), [], []
    for _ in range(3):
        g = 2 * theta.copy()
        grads.append(float(g[0]))
        adam_step({"w": theta}, {"w": g}, state, TrainConfig())
        got.append(float(theta[0]))
    adam = np.abs(np.array(got) - oracle_adam(1.5, grads)).max()

    js = 0.0
    for _ in range(200):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        js = max(js, abs(jsd(p, q) - direct_jsd(p, q)))

    frames = [(0, 2), (0, 3), (1, 2), (1, 3)]
    split_ok = True
    for combo in itertools.product(frames, repeat=4):
        labels = np.zeros((4, 4))
        for i, f in enumerate(combo):
            labels[i, list(f)] = 1
        assign = split_blocks_assign(labels, 2, seed=0)
        counts = np.zeros((2, 4))
        np.add.at(counts, assign, labels)
        split_ok &= block_objective(counts) <= exhaustive_optimum(labels, 2) + 1e-12

    ok = fb <= 1e-6 and lo <= 1e-9 and adam <= 1e-12 and js <= 1e-12 and split_ok
    assert record(6, ok, f"filterbank rel {fb:.1e}, lowess {lo:.1e}, adam {adam:.1e}, jsd {js:.1e}, "
                         f"split exhaustive-optimal on 256 instances {split_ok}")


# ---------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_7_synthetic_learning(corpus, record):
    manifest, blocks = corpus
    start = time.time()
    train_ids = [i for b in blocks[:5] for i in b]
    test_ids = [i for b in blocks[5:] for i in b]
    config = model_config_for(manifest)
    result = train("capsule", load_examples(manifest, train_ids), config, TrainConfig(seed=0))
    acc = evaluate(result.checkpoint, load_examples(manifest, test_ids), manifest.slot_spec)
    elapsed = time.time() - start
    ok = acc >= 0.9 and elapsed < 900
    assert record(7, ok, f"held-out accuracy {acc:.4f} ({len(train_ids)} train / {len(test_ids)} test), "
                         f"{elapsed:.0f}s")


# ---------------------------------------------------------------- 8

@pytest.mark.slow
def test_criterion_8_low_resource_ordering(corpus, record):
    manifest, blocks = corpus
    config = model_config_for(manifest)
    wins, caps, bases = 0, [], []
    for group in range(5):
        train_ids = blocks[group]                      # one block: 48 utterances
        assert len(train_ids) <= 50
        test_ids = [i for k, b in enumerate(blocks) if k != group for i in b]
        train_set = load_examples(manifest, train_ids)
        test_set = load_examples(manifest, test_ids)
        accs = {}
        for kind in ("capsule", "baseline"):
            ckpt = train(kind, train_set, config, TrainConfig(seed=100 + group)).checkpoint
            accs[kind] = evaluate(ckpt, test_set, manifest.slot_spec)
        caps.append(accs["capsule"])
        bases.append(accs["baseline"])
        wins += accs["capsule"] >= accs["baseline"]
    ok = wins >= 3
    assert record(8, ok, f"capsule >= baseline in {wins}/5 groups; mean capsule {np.mean(caps):.3f} "
                         f"vs baseline {np.mean(bases):.3f}; capsule {np.round(caps, 3).tolist()}, "
                         f"baseline {np.round(bases, 3).tolist()}")


# ---------------------------------------------------------------- 9

def test_criterion_9_determinism(tmp_path, record):
    assert main(["synth", "--out", str(tmp_path / "d"), "--set", "synth.n_per_command=1"]) == 0
    manifest = str(tmp_path / "d" / "manifest.jsonl")
    assert main(["split", "--manifest", manifest, "--n-blocks", "4", "--out", str(tmp_path / "s")]) == 0
    blocks = str(tmp_path / "s" / "blocks.json")
    same = []
    train_args = ["train", "--manifest", manifest, "--blocks", blocks, "--seed", "5", "--set", "train.epochs=1"]
    for kind in ("capsule", "baseline"):
        for rep in "ab":
            assert main(train_args + ["--model", kind, "--out", str(tmp_path / f"{kind}{rep}")]) == 0
        same += [(tmp_path / f"{kind}a" / f).read_bytes() == (tmp_path / f"{kind}b" / f).read_bytes()
                 for f in ("model.ckpt", "loss.csv")]
    curve_args = ["curve", "--manifest", manifest, "--blocks", blocks, "--seed", "5",
                  "--set", "experiment.repeats=1", "--set", "experiment.max_train_blocks=2",
                  "--set", "train.epochs=1", "--set", "model.encoder_units=8"]
    assert main(curve_args + ["--out", str(tmp_path / "ca")]) == 0
    assert main(curve_args + ["--out", str(tmp_path / "cb"), "--jobs", "2"]) == 0
    same += [(tmp_path / "ca" / f).read_bytes() == (tmp_path / "cb" / f).read_bytes()
             for f in ("curve.csv", "curve_smoothed.csv", "curve.svg")]
    assert record(9, all(same), f"{sum(same)}/{len(same)} output files byte-identical across reruns")


# ---------------------------------------------------------------- 10

def test_criterion_10_masking(record):
    rng = np.random.default_rng(10)
    config = ModelConfig(n_labels=11)
    worst = 0.0
    for kind in ("capsule", "baseline"):
        params = new_params(kind, config, 3)
        for trial in range(3):
            lengths = rng.integers(5, 60, size=4)
            data = []
            for T in lengths:
                t = np.zeros(11)
                t[rng.choice(11, 3, replace=False)] = 1
                data.append(Example(rng.normal(size=(T, 123)).astype(np.float32), t))
            per = batch_loss(kind, params, config, pad_batch(data, extra_pad=int(rng.integers(0, 20))),
                             reduce="none").data
            for i, e in enumerate(data):
                single = batch_loss(kind, params, config, pad_batch([e]), reduce="none").data[0]
                worst = max(worst, abs(float(per[i]) - float(single)))
    assert record(10, worst <= 1e-5, f"max |batched - single| loss {worst:.2e} (float32, both models)")
