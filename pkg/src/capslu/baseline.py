"""Encoder-decoder baseline: the capsule model's encoder, max-pooled over
time, then a 1024-unit ReLU layer and independent sigmoid outputs."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .model import ModelConfig, _glorot, encode, encoder_param_count, init_encoder

HIDDEN_UNITS = 1024


def init_baseline(config: ModelConfig, seed: int, dtype=np.float32,
                  hidden: int = HIDDEN_UNITS) -> dict[str, Parameter]:
    rng = np.random.default_rng(seed)
    params = init_encoder(config, rng, dtype)
    width, L = config.feature_width, config.n_labels
    dec = {
        "dec.W_h": _glorot(rng, width, hidden, (hidden, width), dtype),
        "dec.b_h": np.zeros(hidden, dtype),
        "dec.W_o": _glorot(rng, hidden, L, (L, hidden), dtype),
        "dec.b_o": np.zeros(L, dtype),
    }
    params.update({k: Parameter(v, k) for k, v in dec.items()})
    return params


def baseline_forward(F, params: dict[str, Tensor], config: ModelConfig,
                     mask: np.ndarray | None = None) -> Tensor:
    """Label probabilities of shape (batch, L)."""
    H, hmask = encode(F, params, config, mask)
    valid = np.asarray(hmask, dtype=bool)[..., None]
    pooled = ad.max_(ad.where(valid, H, np.finfo(H.dtype).min), axis=1)
    hidden = ad.relu(ad.add(ad.matmul(pooled, params["dec.W_h"].T), params["dec.b_h"]))
    return ad.sigmoid(ad.add(ad.matmul(hidden, params["dec.W_o"].T), params["dec.b_o"]))


def baseline_loss(l: Tensor, t, reduce: str = "mean", eps: float = 1e-7) -> Tensor:
    """Binary cross-entropy averaged over labels, probabilities clamped to [eps, 1-eps]."""
    t = np.asarray(t, dtype=l.dtype)
    if t.shape != l.shape:
        raise ValueError(f"target shape {t.shape} does not match {l.shape}")
    lc = ad.clip(l, eps, 1.0 - eps)
    ll = ad.add(ad.mul(ad.log(lc), t), ad.mul(ad.log(ad.sub(1.0, lc)), 1.0 - t))
    per = ad.mul(ad.sum_(ll, axis=-1), -1.0 / l.shape[-1])
    if reduce == "none" or per.ndim == 0:
        return per
    if reduce == "sum":
        return ad.sum_(per)
    return ad.mean(per)


def baseline_count_params(config: ModelConfig, hidden: int = HIDDEN_UNITS) -> int:
    width, L = config.feature_width, config.n_labels
    return encoder_param_count(config) + hidden * width + hidden + L * hidden + L
