"""Command-line entry point: ``capslu <command> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .config import RunConfig, dump_config, load_config
from .features import extract, load_wav, write_features
from .gradcheck import run_gradcheck
from .model import load_checkpoint, save_checkpoint
from .trainer import MODEL_KINDS, evaluate, train, write_history_csv

log = logging.getLogger("capslu")


def _prepare_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dump_config(cfg))
    return out


def _write_lines(path: Path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(rows) + "\n")


def _select_blocks(blocks: list[list[str]], spec: str | None, default: str) -> list[str]:
    which = spec if spec is not None else default
    n = len(blocks)
    if which == "all-but-last":
        idx = range(n - 1)
    elif which == "last":
        idx = [n - 1]
    else:
        idx = [int(v) for v in which.split(",") if v.strip()]
    for i in idx:
        if not 0 <= i < n:
            raise ValueError(f"block index {i} out of range (0..{n - 1})")
    return [u for i in idx for u in blocks[i]]


def _model_config(cfg: RunConfig, manifest: ex.DatasetManifest, examples) -> object:
    return dataclasses.replace(cfg.model, n_labels=manifest.n_labels,
                               input_dim=int(examples[0].features.shape[1]))


# ---------------------------------------------------------------- commands

def cmd_features(args, cfg: RunConfig) -> int:
    manifest = ex.read_manifest(args.manifest)
    out = _prepare_out(args, cfg)
    (out / "features").mkdir(exist_ok=True)
    for u in manifest.utterances:
        if u.audio is None:
            continue
        audio = manifest.resolve(u.audio)
        feats = extract(load_wav(audio), cfg.features)
        rel = f"features/{u.id}.cslf"
        write_features(out / rel, feats)
        u.audio, u.features = str(audio.resolve()), rel
    manifest.root = out
    ex.write_manifest(out / "manifest.jsonl", manifest)
    print(f"wrote features for {len(manifest.utterances)} utterances to {out}")
    return 0


def cmd_split(args, cfg: RunConfig) -> int:
    manifest = ex.read_manifest(args.manifest)
    n_blocks = args.n_blocks or cfg.experiment.n_blocks
    blocks = ex.split_blocks(manifest, n_blocks, args.seed, cfg.experiment.objective)
    counts = np.stack([manifest.target(u) for u in manifest.utterances])
    index = {u.id: i for i, u in enumerate(manifest.utterances)}
    block_counts = np.stack([counts[[index[i] for i in b.ids]].sum(axis=0) for b in blocks])
    objective = ex.block_objective(block_counts, cfg.experiment.objective)
    out = _prepare_out(args, cfg)
    ex.write_blocks(out / "blocks.json", blocks, args.seed, objective)
    print(f"{n_blocks} blocks, {cfg.experiment.objective} pairwise JSD {objective:.6f}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    manifest = ex.read_manifest(args.manifest)
    ids = _select_blocks(ex.read_blocks(args.blocks), args.train_blocks, "all-but-last") \
        if args.blocks else None
    examples = ex.load_examples(manifest, ids)
    train_cfg = dataclasses.replace(cfg.train, seed=args.seed)
    config = _model_config(cfg, manifest, examples)
    result = train(args.model, examples, config, train_cfg)
    out = _prepare_out(args, cfg)
    save_checkpoint(out / "model.ckpt", result.checkpoint)
    write_history_csv(out / "loss.csv", result.history)
    print(f"trained {args.model} on {len(examples)} utterances; final loss {result.history[-1]:.6f}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest = ex.read_manifest(args.manifest)
    ids = _select_blocks(ex.read_blocks(args.blocks), args.test_blocks, "last") \
        if args.blocks else None
    examples = ex.load_examples(manifest, ids)
    ckpt = load_checkpoint(args.checkpoint)
    acc = evaluate(ckpt, examples, manifest.slot_spec)
    print(f"accuracy {acc:.6f} on {len(examples)} utterances")
    if args.out:
        out = _prepare_out(args, cfg)
        _write_lines(out / "eval.csv", ["model,n_examples,accuracy",
                                        f"{ckpt.kind},{len(examples)},{acc:.6f}"])
    return 0


def cmd_curve(args, cfg: RunConfig) -> int:
    manifest = ex.read_manifest(args.manifest)
    blocks = ex.read_blocks(args.blocks)
    models = [m.strip() for m in args.models.split(",") if m.strip()]
    for m in models:
        if m not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {m!r}")
    plan = ex.make_curve_plan(len(blocks), cfg.experiment.repeats, args.seed)
    if cfg.experiment.max_train_blocks:
        plan = [e for e in plan if e.n_train_blocks <= cfg.experiment.max_train_blocks]
    cache = {e.id: e for e in ex.load_examples(manifest)}

    def fitter(kind):
        def fit_and_score(train_ids, test_ids, seed):
            train_set = [cache[i] for i in train_ids]
            config = _model_config(cfg, manifest, train_set)
            result = train(kind, train_set, config, dataclasses.replace(cfg.train, seed=seed))
            return evaluate(result.checkpoint, [cache[i] for i in test_ids], manifest.slot_spec)
        return fit_and_score

    points, failures, smoothed = [], [], ["model,n_examples,accuracy_smoothed"]
    series = {}
    for kind in models:
        pts = ex.run_curve(blocks, plan, fitter(kind), kind, jobs=args.jobs, failures=failures)
        points += pts
        xs = np.array([p.n_train_examples for p in pts], dtype=float)
        ys = np.array([p.accuracy for p in pts])
        if len(np.unique(xs)) >= 2:
            sx, sy = ex.lowess(xs, ys, cfg.experiment.lowess_frac, cfg.experiment.lowess_iters)
            ux, first = np.unique(sx, return_index=True)
            series[kind] = (ux.tolist(), sy[first].tolist())
            smoothed += [f"{kind},{int(x)},{y:.6f}" for x, y in zip(ux, sy[first])]
    out = _prepare_out(args, cfg)
    _write_lines(out / "curve.csv", ex.curve_rows(points))
    _write_lines(out / "curve_smoothed.csv", smoothed)
    (out / "curve.svg").write_text(ex.render_svg(series))
    if failures:
        _write_lines(out / "failures.csv", ["n_blocks,repeat,error"] +
                     [f"{e.n_train_blocks},{e.repeat},{msg!r}" for e, msg in failures])
    print(f"{len(points)} curve points, {len(failures)} failures -> {out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    reports = run_gradcheck(seed=args.seed, n_seeds=args.n_seeds)
    rows = ["name,max_rel_error,seeds,status"]
    for r in reports:
        status = "PASS" if r.ok else "FAIL"
        print(f"{r.name:<16} {r.max_error:.3e}  {status}")
        rows.append(f"{r.name},{r.max_error:.6e},{r.seeds},{status}")
    if args.out:
        _write_lines(_prepare_out(args, cfg) / "gradcheck.csv", rows)
    return 0 if all(r.ok for r in reports) else 1


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = ex.SyntheticSpec(seed=args.seed, **dataclasses.asdict(cfg.synth))
    out = _prepare_out(args, cfg)
    manifest = ex.generate_synthetic(spec, out)
    print(f"{len(manifest.utterances)} utterances, {manifest.n_labels} labels -> {out}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI-style config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="output directory")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="capslu", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("features", parents=[common], help="extract and cache filterbank features")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_features, needs_out=True)

    p = sub.add_parser("split", parents=[common], help="JSD-balanced block split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--n-blocks", type=int)
    p.set_defaults(func=cmd_split, needs_out=True)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--blocks")
    p.add_argument("--train-blocks", help="comma-separated block indices (default: all but last)")
    p.add_argument("--model", choices=MODEL_KINDS, default="capsule")
    p.set_defaults(func=cmd_train, needs_out=True)

    p = sub.add_parser("eval", parents=[common], help="exact-match accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--blocks")
    p.add_argument("--test-blocks", help="comma-separated block indices (default: last)")
    p.set_defaults(func=cmd_eval, needs_out=False)

    p = sub.add_parser("curve", parents=[common], help="learning-curve sweep")
    p.add_argument("--manifest", required=True)
    p.add_argument("--blocks", required=True)
    p.add_argument("--models", default="capsule,baseline")
    p.set_defaults(func=cmd_curve, needs_out=True)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference self-check")
    p.add_argument("--n-seeds", type=int, default=20)
    p.set_defaults(func=cmd_gradcheck, needs_out=False)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.set_defaults(func=cmd_synth, needs_out=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.needs_out and not args.out:
            raise ValueError(f"{args.command} needs --out")
        cfg = load_config(args.config, args.set)
        log.info("resolved config:\n%s", dump_config(cfg))
        return args.func(args, cfg)
    except Exception as exc:
        print(f"capslu {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
