"""Capsule-network SLU model: biGRU encoder, attention and distributor,
squash layer, dynamic routing, and the margin loss.

All functions are batch-first: sequences are (batch, time, features) and a
``mask`` of shape (batch, time) marks valid frames. A single utterance can be
passed as a 2-d (time, features) array to :func:`forward`.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 123
    encoder_layers: int = 2
    encoder_units: int = 256
    n_hidden_caps: int = 32
    hidden_cap_dim: int = 64
    output_cap_dim: int = 8
    n_labels: int = 30
    routing_iters: int = 3

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be positive")
        if self.n_labels < 2:
            raise ValueError("n_labels must be at least 2")

    @property
    def feature_width(self) -> int:
        """Width of an encoded frame (both GRU directions concatenated)."""
        return 2 * self.encoder_units


@dataclass(frozen=True)
class SlotGroup:
    name: str
    labels: tuple[int, ...]
    optional: bool = False


@dataclass(frozen=True)
class SlotSpec:
    """Partition of the label vocabulary into slot groups."""

    groups: tuple[SlotGroup, ...]

    def __post_init__(self):
        seen: set[int] = set()
        for g in self.groups:
            if not g.labels:
                raise ValueError(f"slot group {g.name!r} is empty")
            if seen & set(g.labels):
                raise ValueError("slot groups must be disjoint")
            seen |= set(g.labels)

    @property
    def n_labels(self) -> int:
        return sum(len(g.labels) for g in self.groups)


@dataclass
class ForwardTrace:
    """Intermediate values of one forward pass, batch-first."""

    H: Tensor
    alpha: Tensor
    Delta: Tensor
    Q: Tensor
    S: Tensor
    P: Tensor
    C: Tensor
    O: Tensor
    l: Tensor
    mask: np.ndarray = field(repr=False)


# ---------------------------------------------------------------- parameters

def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def gru_shapes(d_in: int, units: int) -> dict[str, tuple]:
    return {"W": (d_in, 3 * units), "U": (units, 3 * units), "b": (3 * units,)}


def init_encoder(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, Parameter]:
    params: dict[str, Parameter] = {}
    n = config.encoder_units
    d_in = config.input_dim
    for layer in range(config.encoder_layers):
        for direction in ("fwd", "bwd"):
            prefix = f"enc.l{layer}.{direction}"
            # one Glorot block per gate so fans match the per-gate matrices
            W = np.concatenate([_glorot(rng, d_in, n, (d_in, n), dtype) for _ in range(3)], axis=1)
            U = np.concatenate([_glorot(rng, n, n, (n, n), dtype) for _ in range(3)], axis=1)
            params[f"{prefix}.W"] = Parameter(W, f"{prefix}.W")
            params[f"{prefix}.U"] = Parameter(U, f"{prefix}.U")
            params[f"{prefix}.b"] = Parameter(np.zeros(3 * n, dtype), f"{prefix}.b")
        d_in = 2 * n
    return params


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Parameter]:
    """Glorot-uniform weights, zero biases, zero initial coupling logits."""
    rng = np.random.default_rng(seed)
    params = init_encoder(config, rng, dtype)
    width = config.feature_width
    R, L = config.n_hidden_caps, config.n_labels
    hd, od = config.hidden_cap_dim, config.output_cap_dim
    head = {
        "head.w_a": _glorot(rng, width, 1, (width,), dtype),
        "head.b_a": np.zeros((), dtype),
        "head.W_d": _glorot(rng, width, R, (R, width), dtype),
        "head.b_d": np.zeros(R, dtype),
        "head.W_s": _glorot(rng, width, hd, (hd, width), dtype),
        "head.W_p": _glorot(rng, hd, od, (R, L, od, hd), dtype),
        "head.B": np.zeros((R, L), dtype),
    }
    params.update({k: Parameter(v, k) for k, v in head.items()})
    return params


def encoder_param_count(config: ModelConfig) -> int:
    n = config.encoder_units
    total, d_in = 0, config.input_dim
    for _ in range(config.encoder_layers):
        total += 2 * 3 * n * (d_in + n + 1)
        d_in = 2 * n
    return total


def head_param_count(config: ModelConfig) -> int:
    width = config.feature_width
    R, L = config.n_hidden_caps, config.n_labels
    return ((width + 1)                                             # attention
            + (R * width + R)                                       # distributor
            + config.hidden_cap_dim * width                         # squash layer
            + R * L * config.output_cap_dim * config.hidden_cap_dim # predictions
            + R * L)                                                # coupling logits


def count_params(config: ModelConfig) -> int:
    return encoder_param_count(config) + head_param_count(config)


# ---------------------------------------------------------------- forward pieces

def lengths_to_mask(lengths: Sequence[int], T: int, dtype=np.float32) -> np.ndarray:
    lengths = np.asarray(lengths)
    return (np.arange(T)[None, :] < lengths[:, None]).astype(dtype)


def encode(F: Tensor, params: dict[str, Tensor], config: ModelConfig,
           mask: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """Stacked bidirectional GRU with stride-2 subsampling between layers.

    Returns the encoded sequence and its (subsampled) validity mask.
    """
    x = ad.as_tensor(F)
    if x.ndim == 2:
        x = ad.expand_dims(x, 0)
    B, T, D = x.shape
    if T == 0:
        raise ValueError("cannot encode an empty sequence")
    if D != config.input_dim:
        raise ValueError(f"expected {config.input_dim} feature columns, got {D}")
    if mask is None:
        mask = np.ones((B, T), dtype=x.dtype)
    for layer in range(config.encoder_layers):
        if layer > 0:
            x = ad.subsample_time(x, 2)
            mask = mask[:, ::2]
        fwd, bwd = ((params[f"enc.l{layer}.{d}.{w}"] for w in "WUb") for d in ("fwd", "bwd"))
        x = ad.bigru_layer(x, tuple(fwd), tuple(bwd), mask=mask)
    return x, mask


def attention(H: Tensor, params: dict[str, Tensor], mask: np.ndarray | None = None) -> Tensor:
    """Per-frame importance in (0, 1); not normalised over time. Padding gets 0."""
    w = ad.reshape(params["head.w_a"], (-1, 1))
    logits = ad.reshape(ad.matmul(H, w), H.shape[:-1])
    alpha = ad.sigmoid(ad.add(logits, params["head.b_a"]))
    if mask is not None:
        alpha = ad.mul(alpha, np.asarray(mask, dtype=H.dtype))
    return alpha


def distribute(H: Tensor, params: dict[str, Tensor]) -> Tensor:
    """Softmax over hidden capsules for every frame."""
    return ad.softmax(ad.add(ad.matmul(H, params["head.W_d"].T), params["head.b_d"]), axis=-1)


def context(H: Tensor, alpha: Tensor, Delta: Tensor) -> Tensor:
    """``q_i = sum_t alpha_t * delta_ti * h_t`` for every hidden capsule."""
    weights = ad.mul(ad.expand_dims(alpha, -1), Delta)        # (B, T, R)
    return ad.matmul(ad.transpose(weights, (0, 2, 1)), H)     # (B, R, width)


def squash_layer(Q: Tensor, params: dict[str, Tensor]) -> Tensor:
    # no bias: small context vectors must stay small capsules
    return ad.squash(ad.matmul(Q, params["head.W_s"].T), axis=-1)


def predict(S: Tensor, params: dict[str, Tensor]) -> Tensor:
    """``p_ij = W_ij s_i``: (B, R, hd) -> (B, R, L, od)."""
    Wp = params["head.W_p"]
    R, L, od, hd = Wp.shape
    Wflat = ad.reshape(Wp, (1, R, L * od, hd))
    P = ad.matmul(Wflat, ad.expand_dims(S, -1))               # (B, R, L*od, 1)
    return ad.reshape(P, (S.shape[0], R, L, od))


def dynamic_routing(P: Tensor, B_init: Tensor, n_iters: int) -> tuple[Tensor, Tensor]:
    """Routing by agreement, unrolled for ``n_iters`` iterations.

    ``P`` is (batch, R, L, od) and ``B_init`` is (R, L). Coupling
    coefficients are a softmax over output capsules for each hidden capsule.
    Returns the output capsules (batch, L, od) and the coupling coefficients
    used to produce them (batch, R, L).
    """
    if n_iters < 1:
        raise ValueError("routing needs at least one iteration")
    logits = B_init
    O = C = None
    for it in range(n_iters):
        C = ad.softmax(logits, axis=-1)
        if C.ndim == 2:
            C = ad.mul(C, np.ones(P.shape[:-1], dtype=P.dtype))
        O = ad.squash(ad.sum_(ad.mul(ad.expand_dims(C, -1), P), axis=1), axis=-1)
        if it + 1 < n_iters:
            agreement = ad.scalar_product(P, ad.expand_dims(O, 1), axis=-1)
            logits = ad.add(logits, agreement)
    return O, C


def label_probs(O: Tensor) -> Tensor:
    return ad.l2_norm(O, axis=-1)


def margin_loss(l: Tensor, t, reduce: str = "mean") -> Tensor:
    """``sum_j t_j max(0, 0.9 - l_j) + (1 - t_j) max(0, l_j - 0.1)``.

    Summed over labels; ``reduce`` combines utterances ("mean", "sum" or
    "none").
    """
    t = np.asarray(t, dtype=l.dtype)
    if t.shape != l.shape:
        raise ValueError(f"target shape {t.shape} does not match {l.shape}")
    pos = ad.mul(ad.relu(ad.sub(0.9, l)), t)
    neg = ad.mul(ad.relu(ad.sub(l, 0.1)), 1.0 - t)
    per = ad.sum_(ad.add(pos, neg), axis=-1)
    return _reduce(per, reduce)


def _reduce(per: Tensor, how: str) -> Tensor:
    if how == "none" or per.ndim == 0:
        return per
    if how == "sum":
        return ad.sum_(per)
    if how == "mean":
        return ad.mean(per)
    raise ValueError(f"unknown reduction {how!r}")


def forward(F, params: dict[str, Tensor], config: ModelConfig,
            mask: np.ndarray | None = None) -> ForwardTrace:
    H, hmask = encode(F, params, config, mask)
    alpha = attention(H, params, hmask)
    Delta = distribute(H, params)
    Q = context(H, alpha, Delta)
    S = squash_layer(Q, params)
    P = predict(S, params)
    O, C = dynamic_routing(P, params["head.B"], config.routing_iters)
    l = label_probs(O)
    return ForwardTrace(H, alpha, Delta, Q, S, P, C, O, l, hmask)


def decode(l: np.ndarray, slot_spec: SlotSpec) -> frozenset[int]:
    """Per-group argmax; optional groups only fire above 0.5. Ties -> lowest index."""
    l = np.asarray(l)
    chosen = []
    for g in slot_spec.groups:
        if not g.labels:
            raise ValueError(f"slot group {g.name!r} is empty")
        idx = np.asarray(g.labels)
        top = l[idx].max()
        best = int(idx[l[idx] == top].min())
        if g.optional and not l[best] > 0.5:
            continue
        chosen.append(best)
    return frozenset(chosen)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str                       # "capsule" or "baseline"
    config: ModelConfig
    params: dict[str, np.ndarray]
    mean: np.ndarray
    std: np.ndarray

    @property
    def magic(self) -> bytes:
        return MAGIC[self.kind]


MAGIC = {"capsule": b"CSLM", "baseline": b"CSLB"}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write the checkpoint container (little-endian, parameters sorted by name)."""
    cfg = json.dumps(dataclasses.asdict(ckpt.config), sort_keys=True).encode()
    buf = bytearray()
    buf += struct.pack("<4sII", ckpt.magic, CHECKPOINT_VERSION, len(cfg))
    buf += cfg
    mean = np.asarray(ckpt.mean, dtype="<f4")
    std = np.asarray(ckpt.std, dtype="<f4")
    buf += struct.pack("<I", mean.size) + mean.tobytes() + std.tobytes()
    buf += struct.pack("<I", len(ckpt.params))
    for name in sorted(ckpt.params):
        arr = np.asarray(ckpt.params[name], dtype="<f4")
        raw = name.encode()
        buf += struct.pack("<I", len(raw)) + raw
        buf += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    magic, version, n = struct.unpack_from("<4sII", data, 0)
    kinds = {v: k for k, v in MAGIC.items()}
    if magic not in kinds:
        raise ValueError(f"{path}: not a model checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = ModelConfig(**json.loads(data[off:off + n]))
    off += n
    (d,) = struct.unpack_from("<I", data, off)
    off += 4
    mean = np.frombuffer(data, "<f4", d, off).copy()
    off += 4 * d
    std = np.frombuffer(data, "<f4", d, off).copy()
    off += 4 * d
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + ln].decode()
        off += ln
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(data, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    return Checkpoint(kinds[magic], config, params, mean, std)
