"""Cross-validation methodology: JSD-balanced block splitting, learning-curve
plans and sweeps, LOWESS smoothing, and a synthetic command corpus."""

from __future__ import annotations

import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .features import FeatureSequence, read_features, write_features
from .model import ModelConfig, SlotGroup, SlotSpec

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- manifest

@dataclass
class Utterance:
    id: str
    labels: list[str]
    speaker: str = ""
    audio: str | None = None
    features: str | None = None


@dataclass
class DatasetManifest:
    vocabulary: list[str]
    slot_spec: SlotSpec
    utterances: list[Utterance]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        index = self.label_index
        for u in self.utterances:
            unknown = [lab for lab in u.labels if lab not in index]
            if unknown:
                raise ValueError(f"utterance {u.id}: labels {unknown} not in vocabulary")
            for g in self.slot_spec.groups:
                if sum(index[lab] in g.labels for lab in u.labels) > 1:
                    raise ValueError(f"utterance {u.id}: more than one label in slot {g.name!r}")

    @property
    def label_index(self) -> dict[str, int]:
        return {lab: i for i, lab in enumerate(self.vocabulary)}

    @property
    def n_labels(self) -> int:
        return len(self.vocabulary)

    def target(self, utt: Utterance) -> np.ndarray:
        t = np.zeros(self.n_labels)
        index = self.label_index
        t[[index[lab] for lab in utt.labels]] = 1.0
        return t

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def by_id(self) -> dict[str, Utterance]:
        return {u.id: u for u in self.utterances}


def slot_spec_to_json(vocab: Sequence[str], spec: SlotSpec) -> list[dict]:
    return [{"name": g.name, "labels": [vocab[i] for i in g.labels], "optional": g.optional}
            for g in spec.groups]


def write_manifest(path, manifest: DatasetManifest) -> None:
    header = {"vocabulary": manifest.vocabulary,
              "slots": slot_spec_to_json(manifest.vocabulary, manifest.slot_spec)}
    lines = [json.dumps(header, sort_keys=True)]
    for u in manifest.utterances:
        rec = {"id": u.id, "speaker": u.speaker, "labels": u.labels}
        if u.audio is not None:
            rec["audio"] = u.audio
        if u.features is not None:
            rec["features"] = u.features
        lines.append(json.dumps(rec, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> DatasetManifest:
    """JSON-lines manifest: a header with vocabulary and slots, then one utterance per line."""
    path = Path(path)
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    vocab = list(header["vocabulary"])
    index = {lab: i for i, lab in enumerate(vocab)}
    groups = tuple(SlotGroup(s["name"], tuple(index[lab] for lab in s["labels"]),
                             bool(s.get("optional", False))) for s in header["slots"])
    utts = []
    for ln in lines[1:]:
        rec = json.loads(ln)
        if "audio" not in rec and "features" not in rec:
            raise ValueError(f"{path}: utterance {rec.get('id')} has neither audio nor features")
        utts.append(Utterance(str(rec["id"]), list(rec["labels"]), str(rec.get("speaker", "")),
                              rec.get("audio"), rec.get("features")))
    return DatasetManifest(vocab, SlotSpec(groups), utts, path.parent)


def load_examples(manifest: DatasetManifest, ids: Sequence[str] | None = None):
    """Training examples (cached features + targets) for the given utterance ids."""
    from .trainer import Example

    table = manifest.by_id()
    chosen = [table[i] for i in ids] if ids is not None else manifest.utterances
    out = []
    for u in chosen:
        if u.features is None:
            raise ValueError(f"utterance {u.id} has no cached features; run the features command first")
        out.append(Example(read_features(manifest.resolve(u.features)).frames, manifest.target(u), u.id))
    return out


# ---------------------------------------------------------------- divergence and blocks

def jsd(p, q, tol: float = 1e-6) -> float:
    """Jensen-Shannon divergence in bits; 0 for identical, 1 for disjoint support."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for v in (p, q):
        if np.any(v < 0) or abs(v.sum() - 1.0) > tol:
            raise ValueError("jsd inputs must be probability vectors")
    m = 0.5 * (p + q)
    return 0.5 * _kl2(p, m) + 0.5 * _kl2(q, m)


def _kl2(p: np.ndarray, m: np.ndarray) -> float:
    nz = p > 0
    return float(np.sum(p[nz] * np.log2(p[nz] / m[nz])))


def _jsd_rows(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    # vectorised JSD between matching rows of P and Q
    M = 0.5 * (P + Q)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(P > 0, P * np.log2(P / M), 0.0)
        b = np.where(Q > 0, Q * np.log2(Q / M), 0.0)
    return 0.5 * a.sum(axis=-1) + 0.5 * b.sum(axis=-1)


def _distributions(counts: np.ndarray) -> np.ndarray:
    tot = counts.sum(axis=-1, keepdims=True)
    L = counts.shape[-1]
    return np.where(tot > 0, counts / np.where(tot > 0, tot, 1), 1.0 / L)


def block_objective(counts: np.ndarray, how: str = "mean") -> float:
    """Mean (or max) pairwise JSD between the label distributions of blocks."""
    dist = _distributions(np.asarray(counts, dtype=np.float64))
    i, j = np.triu_indices(len(dist), 1)
    vals = _jsd_rows(dist[i], dist[j])
    if how == "max":
        return float(vals.max())
    return float(vals.mean())


@dataclass
class Block:
    ids: list[str]
    distribution: np.ndarray


def _label_matrix(manifest: DatasetManifest) -> np.ndarray:
    return np.stack([manifest.target(u) for u in manifest.utterances])


def split_blocks(manifest: DatasetManifest, n_blocks: int, seed: int = 0,
                 objective: str = "mean") -> list[Block]:
    """Balanced partition whose blocks have similar label distributions.

    Starts from a random balanced assignment and greedily applies pairwise
    utterance swaps between blocks, accepting a swap only if it strictly lowers
    the objective. Stops after a full pass without an accepted swap, or after
    ``10 * n_utterances`` accepted swaps.
    """
    n = len(manifest.utterances)
    if n == 0:
        raise ValueError("cannot split an empty dataset")
    if n_blocks < 2:
        raise ValueError("need at least two blocks")
    if n_blocks > n:
        raise ValueError(f"{n_blocks} blocks requested for {n} utterances")
    labels = _label_matrix(manifest)
    assign = split_blocks_assign(labels, n_blocks, seed, objective)
    blocks = []
    for b in range(n_blocks):
        members = np.flatnonzero(assign == b)
        counts = labels[members].sum(axis=0)
        blocks.append(Block([manifest.utterances[i].id for i in members],
                            _distributions(counts[None])[0]))
    return blocks


def split_blocks_assign(labels: np.ndarray, n_blocks: int, seed: int = 0,
                        objective: str = "mean", initial: np.ndarray | None = None,
                        trace: list | None = None) -> np.ndarray:
    """Swap search on a label-indicator matrix; returns the block index per row.

    ``initial`` overrides the random start; ``trace`` (if given) receives the
    objective after every accepted swap.
    """
    n = len(labels)
    if initial is None:
        rng = np.random.default_rng(seed)
        assign = rng.permutation(np.arange(n) % n_blocks)
    else:
        assign = np.asarray(initial).copy()
    counts = np.zeros((n_blocks, labels.shape[1]))
    np.add.at(counts, assign, labels)
    current = block_objective(counts, objective)
    if trace is not None:
        trace.append(current)
    accepted, cap = 0, 10 * n
    improved = True
    while improved and accepted < cap:
        improved = False
        for u in range(n):
            a = assign[u]
            # candidate partners in other blocks with a different label set
            cand = np.flatnonzero((assign != a) & np.any(labels != labels[u], axis=1))
            if len(cand) == 0:
                continue
            delta = labels[cand] - labels[u]          # change to block a when swapping u<->v
            new_counts = np.broadcast_to(counts, (len(cand),) + counts.shape).copy()
            new_counts[:, a] += delta
            new_counts[np.arange(len(cand)), assign[cand]] -= delta
            vals = _objective_batch(new_counts, objective)
            better = np.flatnonzero(vals < current - 1e-12)
            if len(better) == 0:
                continue
            k = better[0]
            v = cand[k]
            counts = new_counts[k]
            assign[u], assign[v] = assign[v], a
            current = float(vals[k])
            accepted += 1
            improved = True
            if trace is not None:
                trace.append(current)
            if accepted >= cap:
                break
    return assign


def _objective_batch(counts: np.ndarray, how: str) -> np.ndarray:
    dist = _distributions(counts)
    i, j = np.triu_indices(counts.shape[1], 1)
    vals = _jsd_rows(dist[:, i], dist[:, j])
    return vals.max(axis=1) if how == "max" else vals.mean(axis=1)


def read_blocks(path) -> list[list[str]]:
    return [list(b) for b in json.loads(Path(path).read_text())["blocks"]]


def write_blocks(path, blocks: Sequence[Block], seed: int, objective: float) -> None:
    doc = {"n_blocks": len(blocks), "seed": seed, "objective": objective,
           "blocks": [b.ids for b in blocks]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


# ---------------------------------------------------------------- learning curves

@dataclass(frozen=True)
class PlanEntry:
    n_train_blocks: int
    repeat: int
    train_blocks: tuple[int, ...]
    test_blocks: tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class LearningCurvePoint:
    n_train_examples: int
    accuracy: float
    model_kind: str
    repeat: int
    n_blocks: int = 0


def make_curve_plan(n_blocks: int, repeats: int = 5, seed: int = 0) -> list[PlanEntry]:
    """For k = 1 .. n_blocks-1, ``repeats`` random k-subsets of blocks for training.

    Subsets are distinct across repeats while enough distinct subsets exist.
    """
    rng = np.random.default_rng(seed)
    plan = []
    all_blocks = set(range(n_blocks))
    for k in range(1, n_blocks):
        total = math.comb(n_blocks, k)
        chosen: list[tuple[int, ...]] = []
        while len(chosen) < repeats:
            pick = tuple(sorted(rng.choice(n_blocks, size=k, replace=False).tolist()))
            if pick in chosen and len(set(chosen)) < total:
                continue
            chosen.append(pick)
        for r, train in enumerate(chosen, start=1):
            plan.append(PlanEntry(k, r, train, tuple(sorted(all_blocks - set(train))),
                                  int(rng.integers(2**31))))
    return plan


def run_curve(blocks: Sequence[Sequence[str]], plan: Sequence[PlanEntry],
              fit_and_score: Callable[[list[str], list[str], int], float], model_kind: str,
              jobs: int = 1, failures: list | None = None) -> list[LearningCurvePoint]:
    """Train and score every plan entry; output order follows the plan.

    ``fit_and_score(train_ids, test_ids, seed)`` returns the test accuracy.
    Failing entries are logged, appended to ``failures`` as
    ``(entry, message)`` and skipped.
    """
    def one(entry: PlanEntry):
        train_ids = [i for b in entry.train_blocks for i in blocks[b]]
        test_ids = [i for b in entry.test_blocks for i in blocks[b]]
        try:
            acc = fit_and_score(train_ids, test_ids, entry.seed)
        except Exception as exc:  # keep the sweep alive
            log.warning("plan entry %s failed: %s", entry, exc)
            return entry, None, f"{type(exc).__name__}: {exc}"
        return entry, LearningCurvePoint(len(train_ids), float(acc), model_kind, entry.repeat,
                                         entry.n_train_blocks), None

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(one, plan))
    else:
        results = [one(e) for e in plan]
    points = []
    for entry, point, err in results:
        if point is None:
            if failures is not None:
                failures.append((entry, err))
        else:
            points.append(point)
    return points


def curve_rows(points: Sequence[LearningCurvePoint]) -> list[str]:
    rows = ["model,n_blocks,repeat,n_examples,accuracy"]
    rows += [f"{p.model_kind},{p.n_blocks},{p.repeat},{p.n_train_examples},{p.accuracy:.6f}"
             for p in points]
    return rows


# ---------------------------------------------------------------- lowess

def _tricube(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 3) ** 3


def _bisquare(u: np.ndarray) -> np.ndarray:
    u = np.clip(np.abs(u), 0.0, 1.0)
    return (1.0 - u ** 2) ** 2


def lowess(x, y, frac: float = 0.5, iters: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Robust locally weighted linear regression (Cleveland 1979).

    Each point is fitted from its ``ceil(frac * n)`` nearest neighbours with
    tricube distance weights; ``iters`` rounds of bisquare reweighting on the
    residuals follow. Returns ``(x_sorted, fitted)``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(np.unique(x)) < 2:
        raise ValueError("lowess needs at least two distinct x values")
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    n = len(x)
    r = min(n, max(2, int(math.ceil(frac * n))))
    dist = np.abs(x[:, None] - x[None, :])
    h = np.sort(dist, axis=1)[:, r - 1]
    local = np.where(h[:, None] > 0, _tricube(dist / np.where(h > 0, h, 1.0)[:, None]),
                     (dist == 0).astype(float))
    robust = np.ones(n)
    fitted = np.zeros(n)
    for it in range(iters + 1):
        w = local * robust[None, :]
        sw = w.sum(axis=1)
        xm = (w @ x) / sw
        ym = (w @ y) / sw
        sxx = (w * (x[None, :] - xm[:, None]) ** 2).sum(axis=1)
        sxy = (w * (x[None, :] - xm[:, None]) * (y[None, :] - ym[:, None])).sum(axis=1)
        # all weight on one x value: fall back to the weighted mean
        flat = sxx <= 1e-12 * sw * np.ptp(x) ** 2
        slope = np.where(flat, 0.0, sxy / np.where(flat, 1.0, sxx))
        fitted = ym + slope * (x - xm)
        if it == iters:
            break
        resid = y - fitted
        s = np.median(np.abs(resid))
        if s <= 1e-12 * max(1.0, np.abs(y).max()):
            break
        robust = _bisquare(resid / (6.0 * s))
    return x, fitted


# ---------------------------------------------------------------- svg

def render_svg(series: dict[str, tuple[Sequence[float], Sequence[float]]],
               width: int = 640, height: int = 400) -> str:
    """Plain polyline plot of accuracy against training-set size."""
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    xs = [v for xs_, _ in series.values() for v in xs_] or [0, 1]
    x0, x1 = min(xs), max(xs)
    if x1 == x0:
        x1 = x0 + 1
    pad = 50

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - v * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">training examples</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">accuracy</text>']
    for k, (name, (sx, sy)) in enumerate(series.items()):
        colour = colours[k % len(colours)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(sx, sy))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad - 100}" y="{pad + 18 * k}" fill="{colour}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------- synthetic corpus

@dataclass(frozen=True)
class SyntheticSpec:
    vocab_size: int = 16
    n_slots: int = 2
    values_per_slot: int = 4
    n_actions: int = 3
    n_per_command: int = 10
    noise_level: float = 0.3
    dim: int = 123
    max_fillers: int = 1
    seed: int = 0

    def __post_init__(self):
        if min(self.n_slots, self.values_per_slot, self.n_actions, self.n_per_command, self.dim) < 1:
            raise ValueError("synthetic corpus sizes must be positive")
        if self.noise_level < 0 or self.max_fillers < 0:
            raise ValueError("noise_level and max_fillers must be non-negative")
        if self.vocab_size < self.n_label_words:
            raise ValueError(f"vocab_size {self.vocab_size} cannot hold {self.n_label_words} label words")

    @property
    def n_label_words(self) -> int:
        return self.n_actions + self.n_slots * self.values_per_slot

    @property
    def n_fillers(self) -> int:
        return self.vocab_size - self.n_label_words


def _word_templates(spec: SyntheticSpec, rng: np.random.Generator) -> list[np.ndarray]:
    words = []
    for _ in range(spec.vocab_size):
        length = int(rng.integers(20, 61))
        knots = int(rng.integers(4, 8))
        ctrl = rng.normal(size=(knots, spec.dim))
        spline = CubicSpline(np.linspace(0, 1, knots), ctrl, axis=0)
        words.append(spline(np.linspace(0, 1, length)))
    return words


def _warp(seq: np.ndarray, factor: float) -> np.ndarray:
    n = max(2, int(round(len(seq) * factor)))
    src = np.linspace(0, len(seq) - 1, n)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, len(seq) - 1)
    frac = (src - lo)[:, None]
    return seq[lo] * (1 - frac) + seq[hi] * frac


def generate_synthetic(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write a feature-space command corpus (features/*.cslf + manifest.jsonl).

    Every vocabulary word is a fixed smooth random trajectory. A command is an
    action word followed by one value word per slot, with up to
    ``max_fillers`` filler words at random positions; each realisation
    time-warps every token by a factor in [0.8, 1.25], pads with silence, and
    adds Gaussian noise of scale ``noise_level``.
    """
    rng = np.random.default_rng(spec.seed)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    words = _word_templates(spec, rng)
    actions = [f"action{a}" for a in range(spec.n_actions)]
    slot_labels = [[f"slot{s}_v{v}" for v in range(spec.values_per_slot)] for s in range(spec.n_slots)]
    vocab = actions + [lab for group in slot_labels for lab in group]
    word_of = {lab: i for i, lab in enumerate(vocab)}
    fillers = list(range(len(vocab), spec.vocab_size))
    groups = [SlotGroup("action", tuple(range(spec.n_actions)))]
    for s, group in enumerate(slot_labels):
        groups.append(SlotGroup(f"slot{s}", tuple(word_of[lab] for lab in group)))
    silence = np.zeros(spec.dim)
    utts = []
    for combo in itertools.product(actions, *slot_labels):
        for rep in range(spec.n_per_command):
            tokens = [word_of[lab] for lab in combo]
            if fillers and spec.max_fillers:
                for _ in range(int(rng.integers(0, spec.max_fillers + 1))):
                    tokens.insert(int(rng.integers(0, len(tokens) + 1)), int(rng.choice(fillers)))
            pieces = [np.tile(silence, (int(rng.integers(2, 11)), 1))]
            pieces += [_warp(words[tok], float(np.exp(rng.uniform(np.log(0.8), np.log(1.25)))))
                       for tok in tokens]
            pieces.append(np.tile(silence, (int(rng.integers(2, 11)), 1)))
            feats = np.concatenate(pieces)
            if spec.noise_level > 0:
                feats = feats + rng.normal(scale=spec.noise_level, size=feats.shape)
            uid = "_".join(combo) + f"_{rep:02d}"
            rel = f"features/{uid}.cslf"
            write_features(out_dir / rel, FeatureSequence(feats, 0.01))
            utts.append(Utterance(uid, list(combo), speaker="synth", features=rel))
    manifest = DatasetManifest(vocab, SlotSpec(tuple(groups)), utts, out_dir)
    write_manifest(out_dir / "manifest.jsonl", manifest)
    return manifest


def model_config_for(manifest: DatasetManifest, base: ModelConfig | None = None,
                     input_dim: int | None = None) -> ModelConfig:
    """Copy of ``base`` with ``n_labels`` (and optionally ``input_dim``) set for this dataset."""
    import dataclasses

    base = base or ModelConfig()
    changes = {"n_labels": manifest.n_labels}
    if input_dim is not None:
        changes["input_dim"] = input_dim
    return dataclasses.replace(base, **changes)
