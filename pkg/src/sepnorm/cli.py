"""``sepnorm`` command line: gen-data, pretrain, ablate, analyze, probe.

Run options can come from three places, later ones winning: built-in
defaults, a ``--config`` file of ``key = value`` lines, and command-line flags.
Keys in the file use the flag names with ``_`` or ``-`` interchangeably, e.g.::

    # desk run
    norm_scheme = sep:bn+ln
    lam = 0.1
    target = cls
    steps = 2000

When ``--out`` is omitted, outputs go under ``$SEPNORM_OUT`` (default ``runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import checkpoint as ckpt
from .ablation import DEFAULT_LAMBDAS, DEFAULT_SCHEMES, DEFAULT_TARGETS, GridSpec, run_grid
from .data import SyntheticDatasetSpec, generate, load_dataset, write_dataset
from .encoder import EncoderConfig
from .objectives import ObjectiveConfig
from .train import (OptimConfig, ProbeConfig, RunConfig, analyze, l_mae_tail, pretrain, probe_accuracy,
                    read_log_history, run_config_from_checkpoint)

OUT_ENV = "SEPNORM_OUT"

# flag name -> (config section, field, type)
RUN_FIELDS = {
    "image_side": ("encoder", "image_side", int),
    "patch_side": ("encoder", "patch_side", int),
    "dim": ("encoder", "dim", int),
    "depth": ("encoder", "depth", int),
    "heads": ("encoder", "heads", int),
    "mlp_ratio": ("encoder", "mlp_ratio", float),
    "norm_scheme": ("encoder", "norm_scheme", str),
    "bn_momentum": ("encoder", "bn_momentum", float),
    "mask_ratio": ("objective", "mask_ratio", float),
    "lam": ("objective", "lam", float),
    "target": ("objective", "uniformity_target", str),
    "decoder_depth": ("objective", "decoder_depth", int),
    "decoder_dim": ("objective", "decoder_dim", int),
    "decoder_heads": ("objective", "decoder_heads", int),
    "lr": ("optim", "lr", float),
    "momentum": ("optim", "momentum", float),
    "steps": ("optim", "steps", int),
    "batch_size": ("optim", "batch_size", int),
    "weight_decay": ("optim", "weight_decay", float),
    "probe_epochs": ("probe", "epochs", int),
    "probe_lr": ("probe", "lr", float),
    "seed": ("run", "seed", int),
}

DATA_FIELDS = {
    "kind": str, "classes": int, "train_size": int, "test_size": int,
    "image_side": int, "noise": float, "seed": int,
}


class UsageError(ValueError):
    pass


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value, got {line!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def run_config_from(values: dict) -> RunConfig:
    """Build a RunConfig from flat ``RUN_FIELDS`` keys (strings or typed values)."""
    unknown = set(values) - set(RUN_FIELDS)
    if unknown:
        raise UsageError(f"unknown run option(s): {', '.join(sorted(unknown))}")
    sections: dict[str, dict] = {"encoder": {}, "objective": {}, "optim": {}, "probe": {}, "run": {}}
    for key, raw in values.items():
        section, name, typ = RUN_FIELDS[key]
        sections[section][name] = typ(raw)
    seed = sections["run"].get("seed", 0)
    return RunConfig(EncoderConfig(**sections["encoder"], seed=seed), ObjectiveConfig(**sections["objective"]),
                     OptimConfig(**sections["optim"]), ProbeConfig(**sections["probe"]), seed)


def _merged(args, fields) -> dict:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in fields:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return values


def _out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get(OUT_ENV, "runs")) / name


def _add_run_flags(p: argparse.ArgumentParser, skip=()) -> None:
    p.add_argument("--config", help="key = value file with run options")
    g = p.add_argument_group("run options (override --config)")
    for key, (_, _, typ) in RUN_FIELDS.items():
        if key not in skip:
            g.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


def _print_row(row: dict) -> None:
    print(json.dumps(row, sort_keys=False))


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    values = {k: v for k, v in values.items() if k in DATA_FIELDS}
    for key in DATA_FIELDS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    spec = SyntheticDatasetSpec(**{k: DATA_FIELDS[k](v) for k, v in values.items()})
    out = _out_dir(args, "data")
    paths = write_dataset(out, generate(spec))
    for p in paths:
        print(p)
    return 0


def cmd_pretrain(args) -> int:
    cfg = run_config_from(_merged(args, RUN_FIELDS))
    splits = load_dataset(args.data)
    out = _out_dir(args, f"pretrain-{cfg.key()}")
    res = pretrain(cfg, splits["train"], out)
    tail = l_mae_tail(res.l_mae_history)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
    print(f"checkpoint: {res.checkpoint_path}")
    print(f"steps: {res.steps_run}  l_mae_final: {'' if tail is None else f'{tail:.6f}'}")
    return 0


def _run_config_for_checkpoint(args, path: Path) -> RunConfig:
    ck = ckpt.read(path)
    stored = path.parent / "run_config.json"
    if stored.exists():
        cfg = RunConfig.from_dict(json.loads(stored.read_text()))
    else:
        cfg = run_config_from_checkpoint(ck)
    probe = cfg.probe
    if getattr(args, "epochs", None) is not None:
        probe = replace(probe, epochs=args.epochs)
    if getattr(args, "probe_lr", None) is not None:
        probe = replace(probe, lr=args.probe_lr)
    seed = cfg.seed if getattr(args, "seed", None) is None else args.seed
    return replace(cfg, probe=probe, seed=seed)


def cmd_analyze(args) -> int:
    path = Path(args.checkpoint)
    cfg = _run_config_for_checkpoint(args, path)
    encoder, _ = ckpt.restore(ckpt.read(path))
    splits = load_dataset(args.data)
    log_path = path.parent / "train_log.csv"
    tail = l_mae_tail(read_log_history(log_path)) if log_path.exists() else None
    out = Path(args.out) if args.out else path.parent
    _, row = analyze(encoder, splits, cfg, out, with_probe=not args.no_probe, l_mae_final=tail)
    _print_row(row)
    return 0


def cmd_probe(args) -> int:
    path = Path(args.checkpoint)
    cfg = _run_config_for_checkpoint(args, path)
    encoder, _ = ckpt.restore(ckpt.read(path))
    acc = probe_accuracy(encoder, load_dataset(args.data), cfg.probe, cfg.seed)
    print(f"probe_acc: {acc!r}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "probe.json").write_text(json.dumps({"probe_acc": acc, "seed": cfg.seed}))
    return 0


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(","))


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _strs(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def cmd_ablate(args) -> int:
    base = run_config_from(_merged(args, RUN_FIELDS))
    grid = GridSpec(_strs(args.schemes), _floats(args.lambdas), _strs(args.targets), _ints(args.seeds))
    out = _out_dir(args, "ablate")

    def progress(i, total, cfg, trained):
        status = "trained" if trained else "cached"
        print(f"[{i + 1}/{total}] {cfg.encoder.norm_scheme} lam={cfg.objective.lam:g} "
              f"target={cfg.objective.uniformity_target} seed={cfg.seed}: {status}", flush=True)

    res = run_grid(grid, base, args.data, out, on_cell=progress)
    print(f"report: {res.report_path}  cells: {len(res.rows)}  trained: {res.trained}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepnorm", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic SNDS dataset (train.snds, test.snds)")
    p.add_argument("--out")
    p.add_argument("--config")
    p.add_argument("--kind", choices=("class-blobs", "textures"))
    p.add_argument("--classes", type=int)
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--image-side", dest="image_side", type=int)
    p.add_argument("--noise", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="train one configuration; writes checkpoint.bin and train_log.csv")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _add_run_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("ablate", help="run a resumable scheme x lambda x target x seed grid")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--schemes", default=",".join(DEFAULT_SCHEMES))
    p.add_argument("--lambdas", default=",".join(map(str, DEFAULT_LAMBDAS)))
    p.add_argument("--targets", default=",".join(DEFAULT_TARGETS))
    p.add_argument("--seeds", default="0")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("analyze", help="embed the test split, dump embeddings, write report.csv")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", help="defaults to the checkpoint's directory")
    p.add_argument("--no-probe", action="store_true")
    p.add_argument("--epochs", type=int)
    p.add_argument("--probe-lr", dest="probe_lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("probe", help="linear probe on frozen [CLS] embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--epochs", type=int)
    p.add_argument("--probe-lr", dest="probe_lr", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:
        print(f"sepnorm {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
