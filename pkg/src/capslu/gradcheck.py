"""Central finite-difference checks for every differentiable op and both models."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

RTOL = 1e-4
STEP = 1e-5
DENOM_FLOOR = 1e-6


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, 1e-6)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check(fn: Callable[[Sequence[Tensor]], Tensor], inputs: Sequence[np.ndarray],
          h: float = STEP) -> float:
    """Max relative error of d(fn)/d(inputs) against central differences.

    ``fn`` maps leaf tensors to a scalar tensor. Inputs are copied to float64.
    """
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    fn(leaves).backward()
    worst = 0.0
    for leaf, arr in zip(leaves, arrays):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)

        def f():
            return float(fn([Tensor(a) for a in arrays]).data)

        worst = max(worst, rel_error(analytic, numeric_grad(f, arr, h)))
    return worst


def _proj(out: Tensor, rng: np.random.Generator) -> Tensor:
    """Random linear functional of ``out`` so every output entry matters."""
    w = rng.normal(size=out.shape)
    return ad.sum_(ad.mul(out, w))


# each case builder: rng -> (fn, inputs)
def _case_add(rng):
    return (lambda t: _proj(ad.add(t[0], t[1]), np.random.default_rng(1)),
            [rng.normal(size=(3, 4)), rng.normal(size=(4,))])


def _case_mul(rng):
    return (lambda t: _proj(ad.mul(t[0], t[1]), np.random.default_rng(1)),
            [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))])


def _case_matmul(rng):
    return (lambda t: _proj(ad.matmul(t[0], t[1]), np.random.default_rng(1)),
            [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])


def _case_concat(rng):
    return (lambda t: _proj(ad.concat([t[0], t[1]], axis=1), np.random.default_rng(1)),
            [rng.normal(size=(3, 2)), rng.normal(size=(3, 4))])


def _case_slice(rng):
    return (lambda t: _proj(t[0][1:, ::2], np.random.default_rng(1)), [rng.normal(size=(4, 5))])


def _case_sum(rng):
    return (lambda t: _proj(ad.sum_(t[0], axis=1), np.random.default_rng(1)), [rng.normal(size=(3, 4))])


def _case_max(rng):
    # well-separated entries keep the argmax away from ties
    x = rng.permutation(12).reshape(3, 4) + rng.uniform(0, 0.1, size=(3, 4))
    return (lambda t: _proj(ad.max_(t[0], axis=1), np.random.default_rng(1)), [x])


def _case_sigmoid(rng):
    return (lambda t: _proj(ad.sigmoid(t[0]), np.random.default_rng(1)), [rng.normal(size=(3, 4)) * 2])


def _case_tanh(rng):
    return (lambda t: _proj(ad.tanh(t[0]), np.random.default_rng(1)), [rng.normal(size=(3, 4))])


def _case_relu(rng):
    x = rng.normal(size=(3, 4))
    x = np.where(np.abs(x) < 0.05, 0.5, x)
    return (lambda t: _proj(ad.relu(t[0]), np.random.default_rng(1)), [x])


def _case_log(rng):
    return (lambda t: _proj(ad.log(t[0]), np.random.default_rng(1)), [rng.uniform(0.5, 2.0, size=(3, 4))])


def _case_softmax(rng):
    return (lambda t: _proj(ad.softmax(t[0], axis=-1), np.random.default_rng(1)), [rng.normal(size=(3, 5))])


def _case_l2_norm(rng):
    return (lambda t: _proj(ad.l2_norm(t[0], axis=-1), np.random.default_rng(1)), [rng.normal(size=(3, 5))])


def _case_scalar_product(rng):
    return (lambda t: _proj(ad.scalar_product(t[0], t[1], axis=-1), np.random.default_rng(1)),
            [rng.normal(size=(3, 5)), rng.normal(size=(3, 5))])


def _case_squash(rng):
    x = rng.normal(size=(4, 5)) * rng.uniform(0.05, 3.0, size=(4, 1))
    return (lambda t: _proj(ad.squash(t[0], axis=-1), np.random.default_rng(1)), [x])


def _case_subsample(rng):
    return (lambda t: _proj(ad.subsample_time(t[0], 2), np.random.default_rng(1)), [rng.normal(size=(2, 5, 3))])


def _case_gru(rng):
    T, D, n = 5, 3, 4
    mask = np.ones((2, T))
    mask[1, 3:] = 0
    inputs = [rng.normal(size=(2, T, D)), rng.normal(size=(D, 3 * n)) * 0.5,
              rng.normal(size=(n, 3 * n)) * 0.5, rng.normal(size=3 * n) * 0.1]
    return (lambda t: ad.add(_proj(ad.gru_layer(*t, mask=mask), np.random.default_rng(1)),
                             _proj(ad.gru_layer(*t, mask=mask, reverse=True), np.random.default_rng(2))),
            inputs)


def _case_bigru(rng):
    T, D, n = 4, 3, 2
    mask = np.ones((2, T))
    mask[0, 2:] = 0
    shapes = [(D, 3 * n), (n, 3 * n), (3 * n,)] * 2
    inputs = [rng.normal(size=(2, T, D))] + [rng.normal(size=s) * 0.5 for s in shapes]
    return (lambda t: _proj(ad.bigru_layer(t[0], tuple(t[1:4]), tuple(t[4:7]), mask=mask),
                            np.random.default_rng(1)), inputs)


OP_CASES: dict[str, Callable] = {
    "add": _case_add, "mul": _case_mul, "matmul": _case_matmul, "concat": _case_concat,
    "slice": _case_slice, "sum": _case_sum, "max": _case_max, "sigmoid": _case_sigmoid,
    "tanh": _case_tanh, "relu": _case_relu, "log": _case_log, "softmax": _case_softmax,
    "l2_norm": _case_l2_norm, "scalar_product": _case_scalar_product, "squash": _case_squash,
    "subsample_time": _case_subsample, "gru_layer": _case_gru, "bigru_layer": _case_bigru,
}


def tiny_model_config(**overrides):
    from .model import ModelConfig

    base = dict(input_dim=3, encoder_layers=2, encoder_units=2, n_hidden_caps=3,
                hidden_cap_dim=3, output_cap_dim=2, n_labels=3, routing_iters=3)
    base.update(overrides)
    return ModelConfig(**base)


def model_case(kind: str, rng: np.random.Generator):
    """(fn, inputs) checking the full loss gradient w.r.t. every model parameter."""
    from .baseline import baseline_forward, baseline_loss, init_baseline
    from .model import forward, init_params, margin_loss

    config = tiny_model_config()
    seed = int(rng.integers(2**31))
    params = (init_params if kind == "capsule" else
              lambda c, s, d: init_baseline(c, s, d, hidden=5))(config, seed, np.float64)
    names = list(params)
    for k in names:
        # non-zero biases and logits so their gradients are exercised
        if k.endswith((".b", "b_a", "b_d", "head.B", "b_h", "b_o")):
            params[k].data[...] = rng.normal(scale=0.3, size=params[k].shape)
    F = rng.normal(size=(2, 6, config.input_dim))
    mask = np.ones((2, 6))
    mask[1, 4:] = 0
    targets = np.zeros((2, config.n_labels))
    targets[0, 0] = targets[1, 2] = 1

    def fn(t):
        p = dict(zip(names, t))
        if kind == "capsule":
            l = forward(Tensor(F), p, config, mask).l
            # loss on a smooth surrogate plus the hinge keeps kinks off the check
            return ad.add(margin_loss(l, targets), _proj(l, np.random.default_rng(3)))
        return baseline_loss(baseline_forward(Tensor(F), p, config, mask), targets)

    return fn, [params[k].data for k in names]


@dataclass
class GradReport:
    name: str
    max_error: float
    seeds: int

    @property
    def ok(self) -> bool:
        return self.max_error < RTOL


def run_gradcheck(seed: int = 0, n_seeds: int = 20, cases: dict[str, Callable] | None = None,
                  models: Sequence[str] = ("capsule", "baseline")) -> list[GradReport]:
    """Check every op case (and each full model) over ``n_seeds`` random draws."""
    cases = OP_CASES if cases is None else cases
    reports = []
    for name, build in cases.items():
        worst = 0.0
        for s in range(n_seeds):
            fn, inputs = build(np.random.default_rng([seed, s]))
            worst = max(worst, check(fn, inputs))
        reports.append(GradReport(name, worst, n_seeds))
    for kind in models:
        worst = 0.0
        for s in range(n_seeds):
            fn, inputs = model_case(kind, np.random.default_rng([seed, 1000 + s]))
            worst = max(worst, check(fn, inputs))
        reports.append(GradReport(f"model:{kind}", worst, n_seeds))
    return reports
