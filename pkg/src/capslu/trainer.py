"""Mini-batch Adam training, padding/masking, and exact-match evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .baseline import baseline_forward, baseline_loss, init_baseline
from .features import feature_stats, normalize
from .model import (Checkpoint, ModelConfig, SlotSpec, decode, forward, init_params,
                    lengths_to_mask, margin_loss)

log = logging.getLogger(__name__)

MODEL_KINDS = ("capsule", "baseline")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.learning_rate < 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate must be >= 0 and adam_eps > 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class Example:
    """One utterance: T x D features and its binary target vector."""

    features: np.ndarray
    target: np.ndarray
    id: str = ""


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """Bias-corrected Adam update, in place on ``params`` and ``state``."""
    state.t += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


@dataclass
class PaddedBatch:
    features: np.ndarray      # (B, T_max, D), zero beyond each length
    lengths: np.ndarray       # (B,)
    targets: np.ndarray       # (B, L)
    indices: np.ndarray       # positions in the source dataset

    @property
    def mask(self) -> np.ndarray:
        return lengths_to_mask(self.lengths, self.features.shape[1], self.features.dtype)


def pad_batch(examples: Sequence[Example], indices=None, dtype=np.float32, extra_pad: int = 0) -> PaddedBatch:
    lengths = np.array([len(e.features) for e in examples])
    T = int(lengths.max()) + extra_pad
    D = examples[0].features.shape[1]
    feats = np.zeros((len(examples), T, D), dtype=dtype)
    for i, e in enumerate(examples):
        feats[i, :lengths[i]] = e.features
    targets = np.stack([e.target for e in examples]).astype(dtype)
    idx = np.arange(len(examples)) if indices is None else np.asarray(indices)
    return PaddedBatch(feats, lengths, targets, idx)


def make_batches(dataset: Sequence[Example], cfg: TrainConfig, epoch: int = 0) -> list[PaddedBatch]:
    """Shuffle deterministically per (seed, epoch) and pad each batch; the last partial batch is kept."""
    order = np.arange(len(dataset))
    if cfg.shuffle:
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
    out = []
    for s in range(0, len(order), cfg.batch_size):
        idx = order[s:s + cfg.batch_size]
        out.append(pad_batch([dataset[i] for i in idx], idx))
    return out


def new_params(kind: str, config: ModelConfig, seed: int, dtype=np.float32):
    if kind == "capsule":
        return init_params(config, seed, dtype)
    if kind == "baseline":
        return init_baseline(config, seed, dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def batch_probs(kind: str, params, config: ModelConfig, feats: np.ndarray, mask: np.ndarray):
    x = ad.Tensor(feats)
    if kind == "capsule":
        return forward(x, params, config, mask).l
    return baseline_forward(x, params, config, mask)


def batch_loss(kind: str, params, config: ModelConfig, batch: PaddedBatch, reduce: str = "mean"):
    l = batch_probs(kind, params, config, batch.features, batch.mask)
    if kind == "capsule":
        return margin_loss(l, batch.targets, reduce)
    return baseline_loss(l, batch.targets, reduce)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[float]


def train(kind: str, dataset: Sequence[Example], config: ModelConfig, cfg: TrainConfig) -> TrainResult:
    """Train from scratch; fully determined by ``cfg.seed`` and the data."""
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    mean, std = feature_stats([e.features for e in dataset])
    normed = [Example(normalize(e.features, (mean, std)).astype(np.float32), e.target, e.id)
              for e in dataset]
    params = new_params(kind, config, cfg.seed)
    state = AdamState()
    history = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for batch in make_batches(normed, cfg, epoch):
            ad.zero_grads(params.values())
            loss = batch_loss(kind, params, config, batch)
            loss.backward()
            total += float(loss.data) * len(batch.lengths)
            adam_step({k: p.data for k, p in params.items()},
                      {k: p.grad for k, p in params.items()}, state, cfg)
        history.append(total / len(normed))
        log.info("%s epoch %d/%d loss %.5f", kind, epoch + 1, cfg.epochs, history[-1])
    ckpt = Checkpoint(kind, config, {k: p.data.copy() for k, p in params.items()},
                      mean.astype(np.float32), std.astype(np.float32))
    return TrainResult(ckpt, history)


def predict_probs(ckpt: Checkpoint, features: Sequence[np.ndarray], batch_size: int = 16) -> np.ndarray:
    """Label probabilities (N, L) for raw (unnormalised) feature matrices."""
    params = {k: ad.Tensor(v) for k, v in ckpt.params.items()}
    out = []
    for s in range(0, len(features), batch_size):
        chunk = [Example(normalize(f, (ckpt.mean, ckpt.std)).astype(np.float32), np.zeros(1))
                 for f in features[s:s + batch_size]]
        b = pad_batch(chunk)
        out.append(batch_probs(ckpt.kind, params, ckpt.config, b.features, b.mask).data)
    return np.concatenate(out, axis=0)


def accuracy(probs: np.ndarray, targets: np.ndarray, slot_spec: SlotSpec) -> float:
    hits = [decode(l, slot_spec) == frozenset(np.flatnonzero(t).tolist())
            for l, t in zip(probs, targets)]
    return float(np.mean(hits))


def evaluate(ckpt: Checkpoint, dataset: Sequence[Example], slot_spec: SlotSpec) -> float:
    """Fraction of utterances whose decoded label set equals the reference exactly."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    probs = predict_probs(ckpt, [e.features for e in dataset])
    return accuracy(probs, np.stack([e.target for e in dataset]), slot_spec)


def write_history_csv(path, history: Sequence[float]) -> None:
    lines = ["epoch,mean_loss"] + [f"{i + 1},{v:.8g}" for i, v in enumerate(history)]
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
