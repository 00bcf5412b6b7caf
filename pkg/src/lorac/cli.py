"""Command-line entry point: ``pretrain``, ``probe``, ``stats``, ``gradcheck``.

Every run gets a fresh numbered directory under the output root (flag
``--out``, else ``$LORAC_OUT``, else ``./runs``); rerunning never mutates a
previous run directory.  Exit codes: 0 success, 1 check failure, 2 usage or
config problem, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import Dataset, gen_synthetic, load_dataset, save_dataset
from .encoder import EncoderPair
from .errors import ConfigError, FormatError, NumericalError
from .evaluation import ProbeConfig, encode_dataset, linear_probe, qhat_stats
from .gradcheck import format_table, run_checks
from .trainer import (
    Checkpoint,
    TrainConfig,
    apply_overrides,
    config_from_mapping,
    emit_config_text,
    load_checkpoint,
    parse_document,
    resume,
    train,
)

_DATA_FIELDS = ("n_classes", "per_class", "d_in", "spread", "seed", "min_angle_deg")


@dataclass
class DataSpec:
    n_classes: int = 10
    per_class: int = 200
    d_in: int = 32
    spread: float = 0.05
    seed: int | None = None          # None: fall back to the training seed
    min_angle_deg: float = 45.0


def _data_spec_from(doc: dict) -> DataSpec:
    section = dict(doc.get("data", {}))
    unknown = set(section) - set(_DATA_FIELDS)
    if unknown:
        raise ConfigError(f"unknown data field(s): {sorted(unknown)}")
    spec = DataSpec()
    for name in _DATA_FIELDS:
        if name in section:
            setattr(spec, name, section[name])
    return spec


def _out_root(flag: str | None) -> Path:
    import os

    if flag:
        return Path(flag)
    env = os.environ.get("LORAC_OUT")
    return Path(env) if env else Path("runs")


def _new_run_dir(root: Path, name: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    taken = set()
    for p in root.iterdir():
        if p.is_dir() and p.name.startswith(name + "-"):
            suffix = p.name[len(name) + 1:]
            if suffix.isdigit():
                taken.add(int(suffix))
    counter = max(taken, default=0) + 1
    run = root / f"{name}-{counter:04d}"
    run.mkdir()
    return run


def _utcnow() -> str:
    return datetime.now(timezone.utc).isoformat()


def _write_manifest(run_dir: Path, payload: dict) -> None:
    (run_dir / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def _load_pair(ckpt: Checkpoint) -> EncoderPair:
    return EncoderPair(query=ckpt.query, key=ckpt.key,
                       momentum=ckpt.config.momentum_encoder)


def _resolve_dataset(args, doc: dict, config: TrainConfig) -> tuple[Dataset, dict]:
    if args.data:
        ds = load_dataset(args.data)
        return ds, dict(ds.meta)
    spec = _data_spec_from(doc)
    seed = config.seed if spec.seed is None else spec.seed
    ds = gen_synthetic(spec.n_classes, spec.per_class, spec.d_in, spec.spread,
                       seed=seed, min_angle_deg=spec.min_angle_deg)
    return ds, dict(ds.meta)


def cmd_pretrain(args) -> int:
    if args.resume:
        if args.set:
            raise ConfigError("--set cannot be combined with --resume "
                              "(the checkpoint fixes the config)")
        ckpt = load_checkpoint(args.resume)
        config = ckpt.config
        doc = parse_document(args.config_path.read_text()) if args.config_path else {}
    else:
        if not args.config_path:
            raise ConfigError("pretrain needs --config (or --resume)")
        doc = apply_overrides(parse_document(args.config_path.read_text()), args.set)
        config = config_from_mapping(doc)
        ckpt = None

    dataset, data_meta = _resolve_dataset(args, doc, config)
    run_dir = _new_run_dir(_out_root(args.out), args.name or "pretrain")
    save_dataset(run_dir / "dataset.ldset", dataset)
    # train on the serialized (float32) dataset so a later resume that reads
    # dataset.ldset continues from byte-identical inputs
    dataset = load_dataset(run_dir / "dataset.ldset")
    manifest = {
        "command": "pretrain",
        "version": __version__,
        "seed": config.seed,
        "config": emit_config_text(config),
        "data": data_meta,
        "resumed_from": str(args.resume) if args.resume else None,
        "artifacts": {
            "dataset": "dataset.ldset",
            "metrics": "metrics.jsonl",
            "summary": "summary.csv",
            "checkpoints": "checkpoints/",
        },
        "started": _utcnow(),
        "finished": None,
    }
    _write_manifest(run_dir, manifest)
    try:
        if ckpt is not None:
            result = resume(ckpt, dataset, out_dir=run_dir)
        else:
            result = train(config, dataset, out_dir=run_dir)
    except NumericalError as e:
        dump = run_dir / "abort_dump.json"
        dump.write_text(json.dumps({"error": str(e), "residual": e.residual},
                                   indent=2) + "\n")
        print(f"numeric abort: {e}\ndiagnostics: {dump}", file=sys.stderr)
        return 3
    manifest["finished"] = _utcnow()
    _write_manifest(run_dir, manifest)
    last = result.summary[-1] if result.summary else None
    tail = f", final mean loss {last['mean_loss']:.6f}" if last else ""
    print(f"run complete: {run_dir}{tail}")
    return 0


def cmd_probe(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    pair = _load_pair(ckpt)
    if pair.query.in_dim != dataset.d_in:
        raise ConfigError(
            f"dataset width {dataset.d_in} does not match encoder input "
            f"{pair.query.in_dim}")
    features = encode_dataset(pair, dataset.samples)
    result = linear_probe(features, dataset.labels,
                          ProbeConfig(train_frac=args.train_frac,
                                      iters=args.iters, seed=args.seed))
    run_dir = _new_run_dir(_out_root(args.out), args.name or "probe")
    record = {
        "command": "probe",
        "version": __version__,
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "seed": args.seed,
        "accuracy": result.accuracy,
        "n_train": result.n_train,
        "n_test": result.n_test,
        "n_classes": result.n_classes,
        "iters": result.iters,
    }
    (run_dir / "probe.json").write_text(json.dumps(record, indent=2) + "\n")
    print(f"probe accuracy {result.accuracy:.4f} "
          f"({result.n_test} held-out samples) -> {run_dir / 'probe.json'}")
    return 0


def cmd_stats(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    pair = _load_pair(ckpt)
    if pair.query.in_dim != dataset.d_in:
        raise ConfigError(
            f"dataset width {dataset.d_in} does not match encoder input "
            f"{pair.query.in_dim}")
    stats = qhat_stats(pair, dataset.samples, args.views,
                       ckpt.config.augment, seed=args.seed)
    run_dir = _new_run_dir(_out_root(args.out), args.name or "stats")
    csv_path = run_dir / "qhat.csv"
    with open(csv_path, "w") as f:
        f.write("instance_id,nuc_norm\n")
        for i, v in enumerate(stats.norms.tolist()):
            f.write(f"{i},{v!r}\n")
    summary = {
        "command": "stats",
        "version": __version__,
        "checkpoint": str(args.checkpoint),
        "data": str(args.data),
        "views": stats.views,
        "seed": args.seed,
        "n": int(stats.norms.size),
        "mean": stats.mean,
        "std": stats.std,
        "bin_edges": stats.bin_edges.tolist(),
        "histogram": stats.histogram.tolist(),
    }
    (run_dir / "qhat.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"qhat mean {stats.mean:.4f} over {stats.norms.size} instances "
          f"-> {csv_path}")
    return 0


def _parse_sizes(text: str) -> tuple[tuple[int, int], ...]:
    sizes = []
    for part in text.split(","):
        m, _, d = part.strip().partition("x")
        try:
            sizes.append((int(m), int(d)))
        except ValueError:
            raise ConfigError(f"bad --sizes entry {part!r}; expected MxD") from None
    if not sizes:
        raise ConfigError("--sizes is empty")
    return tuple(sizes)


def cmd_gradcheck(args) -> int:
    results = run_checks(seed=args.seed, sizes=_parse_sizes(args.sizes))
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lorac",
        description="Contrastive pre-training with a low-rank (nuclear-norm) prior.")
    parser.add_argument("--version", action="version", version=f"lorac {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run (or resume) a pre-training run")
    p.add_argument("--config", dest="config_path", type=Path,
                   help="config file (key = value, TOML-compatible subset)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config field, e.g. --set prior.kind=none")
    p.add_argument("--data", type=Path, help="LDSET dataset file "
                   "(default: synthetic per the [data] config section)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--out", help="output root (default $LORAC_OUT or ./runs)")
    p.add_argument("--name", help="run directory prefix")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output root (default $LORAC_OUT or ./runs)")
    p.add_argument("--name", help="run directory prefix")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("stats", help="held-out view-stack nuclear-norm statistics")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--views", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output root (default $LORAC_OUT or ./runs)")
    p.add_argument("--name", help="run directory prefix")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sizes", default="4x8,8x32",
                   help="nuclear-norm matrix sizes, e.g. 4x8,8x32")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as e:           # argparse usage errors
        return int(e.code or 0)
    except (ConfigError, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
