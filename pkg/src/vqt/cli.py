"""Command-line entry point: ``vqt {gen,train,score,eval,bench}``.

Exit codes: 0 ok, 1 usage, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import bench
from .attention import write_selection_dump
from .data import FormatError, generate_synthetic_dataset, load_clip, read_manifest
from .metrics import UndefinedCorrelationError, evaluate
from .model import (
    ModelConfig,
    TrainingError,
    TrainSettings,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .mptn import plan_pathways
from .tensor import NonFiniteError
from .tokenizer import ConfigError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Everything a config file may set. Flags override file values, which override these."""

    preset: str = "tiny"
    seed: int = 0
    mptn_mode: str = "scatter"
    temporal: str = "mptn"
    reducer: str = "kl"
    strict_selection: bool = False
    epochs: int = 60
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.1
    decay_every: int = 30
    decay_factor: float = 0.1
    manifest: str = ""
    checkpoint: str = ""
    out: str = ""

    def model_config(self) -> ModelConfig:
        return ModelConfig.preset(self.preset, seed=self.seed, mptn_mode=self.mptn_mode,
                                  temporal=self.temporal, reducer=self.reducer,
                                  strict_selection=self.strict_selection)

    def train_settings(self) -> TrainSettings:
        return TrainSettings(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr,
                             weight_decay=self.weight_decay, decay_every=self.decay_every,
                             decay_factor=self.decay_factor)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def _coerce(kind, raw: str, key: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        if kind in (float, "float"):
            return float(raw)
        if kind in (bool, "bool"):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind}") from None
    return raw


def read_config_file(path: str | Path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    known = {f.name: f.type for f in fields(RunConfig)}
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise UsageError(f"{path}:{n}: unknown config key {key!r}")
        values[key] = _coerce(known[key], raw, key)
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = replace(cfg, **read_config_file(args.config))
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)
                 if getattr(args, f.name, None) is not None}
    return replace(cfg, **overrides)


def _workers() -> int:
    raw = os.environ.get("VQT_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise UsageError(f"VQT_THREADS must be an integer, got {raw!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gen(args, cfg: RunConfig) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = Path(args.out or cfg.out or "data")
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"{out} exists and is not empty; pass --force to overwrite")
    model = ModelConfig.preset(args.size or cfg.preset)
    manifest = generate_synthetic_dataset(out, args.count, model.frames, model.height,
                                          model.width, seed=cfg.seed)
    labels = np.array([e.label for e in read_manifest(manifest).entries])
    counts, edges = np.histogram(labels, bins=4, range=(1.0, 5.0))
    print(manifest)
    for c, lo, hi in zip(counts, edges, edges[1:]):
        print(f"[{lo:.1f}, {hi:.1f}{']' if hi == 5.0 else ')'}\t{c}")
    return EXIT_OK


def _manifest(path: str):
    if not path:
        raise UsageError("a manifest path is required")
    if not Path(path).is_file():
        raise FormatError(f"manifest not found: {path}")
    return read_manifest(path)


def cmd_train(args, cfg: RunConfig) -> int:
    man = _manifest(cfg.manifest)
    if not man.split("train"):
        raise FormatError("training split is empty")
    out = Path(cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model_config()
    with open(out / "train.log", "w") as log:
        def on_epoch(e):
            log.write(e.to_line() + "\n")
            log.flush()
            print(e.to_line())

        params, _ = train(man, model, cfg.train_settings(), on_epoch=on_epoch)
    save_checkpoint(out / "model.vqtw", params, model)
    print(f"checkpoint\t{out / 'model.vqtw'}", file=sys.stderr)
    return EXIT_OK


def _load_model(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    if not Path(cfg.checkpoint).is_file():
        raise FormatError(f"checkpoint not found: {cfg.checkpoint}")
    return load_checkpoint(cfg.checkpoint)


def cmd_score(args, cfg: RunConfig) -> int:
    model, params = _load_model(cfg)
    clips = []
    for path in args.clips:
        clip = load_clip(path)
        expect = (model.frames, model.height, model.width, 3)
        if clip.frames.shape != expect:
            raise FormatError(f"{path}: clip shape {clip.frames.shape} does not match "
                              f"checkpoint config {expect}")
        clips.append(clip.frames)
    traces = [] if args.dump_attention else None
    scores = predict(clips, params, model, workers=_workers(), traces=traces)
    for path, s in zip(args.clips, scores):
        print(f"{path}\t{s:.4f}")
    if traces is not None:
        out = Path(args.dump_attention)
        out.mkdir(parents=True, exist_ok=True)
        for i, (path, records) in enumerate(zip(args.clips, traces)):
            write_selection_dump(out / f"{i:05d}_{Path(path).stem}.jsonl", records)
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model, params = _load_model(cfg)
    man = _manifest(cfg.manifest)
    entries = man.split(args.split)
    if not entries:
        raise FormatError(f"split {args.split!r} is empty")
    clips = [load_clip(man.resolve(e)).frames for e in entries]
    labels = np.array([e.label for e in entries])
    if args.sabotage_constant is not None:
        preds = np.full(len(clips), args.sabotage_constant)
    else:
        preds = predict(clips, params, model, workers=_workers())
    report = evaluate(preds, labels)
    text = report.to_text()
    sys.stdout.write(text)
    if args.report:
        Path(args.report).write_text(text)
    return EXIT_OK


def _t_list(raw: str) -> list[int]:
    try:
        values = [int(x) for x in raw.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--T expects comma-separated integers, got {raw!r}") from None
    if not values or any(v < 2 for v in values):
        raise UsageError(f"--T values must be integers >= 2, got {raw!r}")
    return values


def cmd_bench(args, cfg: RunConfig) -> int:
    Ts = _t_list(args.T)
    model = ModelConfig.preset(cfg.preset)
    N, d = model.patches, model.dim
    if args.jl:
        for T in Ts:
            print(f"jl\tT={T}\td={d}\teps={bench.jl_error_bound(T, d):.4f}")
    if args.flops or not (args.scaling or args.jl):
        print(f"# {bench.CONVENTION}")
        for T in Ts:
            plan = plan_pathways(T)
            ratio = bench.flops_ratio(T, N, d, plan)
            print(f"T={T}\tbudgets={list(plan.budgets)}\tdense={bench.flops_temporal('dense', T, N, d)}"
                  f"\tmptn={bench.flops_temporal('mptn', T, N, d, plan)}"
                  f"\tratio={ratio} ({float(ratio):.4f})")
    if args.scaling:
        bad = [t for t in Ts if t < 8 or t > 256 or t & (t - 1)]
        if len(Ts) < 3 or bad:
            raise UsageError("--scaling needs at least 3 powers of two in [8, 256]")
        result = bench.scaling_study(Ts, repetitions=args.repetitions, N=N, d=d,
                                     heads=model.heads, seed=cfg.seed)
        sys.stdout.write(result.to_text())
        if args.csv:
            bench.write_csv(args.csv, result.reports)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    def globals_(default):
        p = argparse.ArgumentParser(add_help=False)
        p.add_argument("--seed", type=int, default=default)
        p.add_argument("--config", default=default, help="key = value file; flags take precedence")
        p.add_argument("--preset", choices=("tiny", "default"), default=default)
        return p

    # Global flags work before or after the command; the subcommand copy must
    # not reset values given before it.
    common = globals_(argparse.SUPPRESS)
    ap = argparse.ArgumentParser(prog="vqt", parents=[globals_(None)],
                                 description="Video quality transformer with sparse temporal attention")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="write a synthetic distortion dataset")
    g.add_argument("--count", type=int, default=64)
    g.add_argument("--size", choices=("tiny", "default"))
    g.add_argument("--out")
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", parents=[common], help="train and write a checkpoint")
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", dest="weight_decay", type=float)
    t.add_argument("--decay-every", dest="decay_every", type=int)
    t.add_argument("--mptn-mode", dest="mptn_mode", choices=("scatter", "literal"))
    t.add_argument("--temporal", choices=("mptn", "dense"))
    t.add_argument("--reducer", choices=("kl", "random", "linear", "conv", "clustering"))

    s = sub.add_parser("score", parents=[common], help="score clip files")
    s.add_argument("--checkpoint")
    s.add_argument("--dump-attention", metavar="DIR")
    s.add_argument("clips", nargs="+")

    e = sub.add_parser("eval", parents=[common], help="metrics over a manifest split")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest")
    e.add_argument("--split", default="test", choices=("train", "test"))
    e.add_argument("--report", help="also write the report to this file")
    e.add_argument("--sabotage-constant", type=float, help=argparse.SUPPRESS)

    b = sub.add_parser("bench", parents=[common], help="FLOP ratios and scaling study")
    b.add_argument("--flops", action="store_true")
    b.add_argument("--scaling", action="store_true")
    b.add_argument("--jl", action="store_true")
    b.add_argument("--T", default="96")
    b.add_argument("--repetitions", type=int, default=10)
    b.add_argument("--csv")
    return ap


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "score": cmd_score, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        print(f"# effective config\n{cfg.to_text()}", end="", file=sys.stderr)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"vqt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UndefinedCorrelationError, TrainingError, NonFiniteError) as exc:
        print(f"vqt: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"vqt: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"vqt: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
