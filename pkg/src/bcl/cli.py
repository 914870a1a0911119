"""Command-line entry point: ``bcl <subcommand> ...``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import dataio
from .augment import OP_NAMES
from .config import ConfigError, ExperimentConfig, apply_overrides, load_config
from .memtrack import MemTable, tail_discovery

log = logging.getLogger("bcl")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _out_root() -> Path:
    return Path(os.environ.get("BCL_OUT_DIR", "runs"))


def _snapshot(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    apply_overrides(cfg, args.set or [])
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if not cfg.out_dir:
        cfg.out_dir = str(_out_root() / f"{cfg.method}-seed{cfg.seed}")
    if args.workers is not None:
        cfg.workers = args.workers
    elif cfg.workers == 0:
        cfg.workers = os.cpu_count() or 1
    if args.deterministic:
        cfg.deterministic = True
        cfg.workers = 0  # fixed serial order
    return cfg.validate()


# -- subcommands ------------------------------------------------------------------

def cmd_make_shapes(args) -> int:
    out = Path(args.out_dir or _out_root() / "shapes")
    pool, test = dataio.make_shape_pool(args.train_per_class, args.test_per_class, args.seed)
    out.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(out / "pool.bin", pool)
    dataio.save_dataset(out / "test.bin", test)
    _snapshot(out / "make-shapes.config.json", {"train_per_class": args.train_per_class,
                                                "test_per_class": args.test_per_class, "seed": args.seed,
                                                "height": 32, "width": 32, "num_classes": 10})
    print(f"wrote {len(pool)} pool and {len(test)} test records to {out}")
    return 0


def cmd_make_lt(args) -> int:
    geom = dataio.Geometry(args.height, args.width, args.classes)
    ds = dataio.load_dataset(args.input, geom)
    lt = dataio.make_long_tailed(ds, args.imbalance, args.seed, args.n_max)
    lt.partition_map = dataio.partition_classes(lt, args.scheme)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dataio.save_dataset(out, lt)
    dataio.write_counts_manifest(out.with_suffix(".counts.json"), lt, args.scheme, args.seed)
    _snapshot(out.with_suffix(".config.json"), {k: v for k, v in vars(args).items() if k != "func"})
    print(f"wrote {len(lt)} records ({lt.class_counts.tolist()}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import pretrain

    cfg = _resolve_config(args)
    state = pretrain(cfg, resume=args.resume)
    print(f"finished epoch {state.epoch} in {cfg.out_dir}")
    return 0


def _probe_spec(args, cfg: ExperimentConfig):
    from .evaluation import ProbeSpec

    p = cfg.probe
    shots = p.shots
    if args.shots is not None:
        shots = None if args.shots == "full" else int(args.shots)
    return ProbeSpec(shots, args.epochs or p.epochs, p.lr, p.lr_final, p.weight_decay, p.batch_size,
                     p.seed if args.seed is None else args.seed)


def cmd_probe(args) -> int:
    from .config import from_dict
    from .evaluation import probe_run

    run = Path(args.run)
    cfg = from_dict(json.loads((run / "config.json").read_text()))
    spec = _probe_spec(args, cfg)
    tag = "full" if spec.shots is None else spec.shots
    out = Path(args.out_dir) if args.out_dir else run / f"probe_{tag}_seed{spec.seed}"
    _snapshot(out / "probe.config.json", {"run": str(run), "shots": tag, "epochs": spec.epochs,
                                          "lr": spec.lr, "lr_final": spec.lr_final,
                                          "weight_decay": spec.weight_decay, "seed": spec.seed,
                                          "checkpoint": args.checkpoint})
    report = probe_run(run, spec, out, args.checkpoint)
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def diagnose_tail(run_dir, r: float) -> List[dict]:
    """Replay a run's per-epoch loss files and report phi per epoch, group and score kind."""
    from .config import from_dict

    run = Path(run_dir)
    cfg = from_dict(json.loads((run / "config.json").read_text()))
    manifest = json.loads((run / "dataset.json").read_text())
    pmap = {int(k): v for k, v in manifest["partition_map"].items()}
    ht = dataio.head_tail_groups(pmap)
    counts = manifest["class_counts"]
    labels = _run_labels(cfg, manifest)
    groups = np.array([ht[int(c)] for c in labels])
    files = sorted((run / "losses").glob("epoch_*.npy"))
    if not files:
        raise FileNotFoundError(f"{run}/losses holds no per-epoch loss files")
    table = MemTable(sum(counts), cfg.beta)
    rows = []
    for f in files:
        epoch = int(f.stem.split("_")[1])
        table.record_epoch_losses(np.load(f))
        for kind, vec in (("momentum", table.l_mom), ("instantaneous", table.l_inst)):
            rep = tail_discovery(vec, groups, r, kind)
            for g in sorted(rep.phi):
                rows.append({"epoch": epoch, "score_kind": kind, "group": g, "phi": rep.phi[g],
                             "hits": rep.hits[g], "group_size": rep.group_sizes[g]})
    return rows


def _run_labels(cfg: ExperimentConfig, manifest: dict) -> np.ndarray:
    # training sample i is pool record source_index[i]
    d = cfg.dataset
    pool = dataio.load_dataset(d.pool, dataio.Geometry(d.height, d.width, d.num_classes))
    return pool.labels[np.asarray(manifest["source_index"], dtype=np.int64)]


def cmd_diagnose_tail(args) -> int:
    rows = diagnose_tail(args.run, args.r)
    out = Path(args.out) if args.out else Path(args.run) / f"tail_discovery_r{args.r}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "score_kind", "group", "phi", "hits", "group_size"],
                           lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    _snapshot(out.with_suffix(".config.json"), {"run": str(args.run), "r": args.r})
    print(f"wrote {len(rows)} rows to {out}")
    return 0


AXES = {
    "beta": ("beta", [0.85, 0.90, 0.97, 0.99]),
    "k": ("k", [1, 2, 3, 4, 5]),
    "components": ("forced_op", list(OP_NAMES)),
}


def cmd_ablate(args) -> int:
    from .trainer import run_ablation

    cfg = _resolve_config(args)
    axis, values = AXES.get(args.axis, (args.axis, None))
    if args.values:
        from .config import parse_value
        values = [parse_value(v) for v in args.values]
    if values is None:
        raise ConfigError(f"axis {args.axis!r} needs --values")
    if args.axis == "components":
        cfg.k = 1
    root = Path(args.out_dir or _out_root() / f"ablate-{args.axis}")
    _snapshot(root / "ablate.config.json", {"base": cfg.to_dict(), "axis": axis, "values": values})
    rows = run_ablation(cfg, axis, values, root, probe=not args.no_probe)
    for row in rows:
        print(f"{axis}={row['value']}" + ("  <- best" if row["best"] else ""))
    return 0


def cmd_inspect_ckpt(args) -> int:
    from .tensor import load_checkpoint

    arrays, manifest = load_checkpoint(args.path)
    summary = {k: v for k, v in manifest.items() if k not in ("config", "arrays")}
    print(json.dumps(summary, indent=2, sort_keys=True))
    total = 0
    for name in sorted(arrays):
        a = arrays[name]
        total += a.size
        print(f"{name:40s} {str(a.dtype):8s} {list(a.shape)}")
    print(f"{len(arrays)} arrays, {total} values")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bcl", description="Loss-driven augmentation for long-tailed contrastive learning.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("make-shapes", help="render the balanced desk-scale shape pool and test split")
    s.add_argument("--out-dir")
    s.add_argument("--train-per-class", type=int, default=300)
    s.add_argument("--test-per-class", type=int, default=60)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_shapes)

    s = sub.add_parser("make-lt", help="subsample a balanced record file into a long-tailed one")
    s.add_argument("--input", required=True)
    s.add_argument("--imbalance", type=float, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n-max", type=int)
    s.add_argument("--classes", type=int, default=10)
    s.add_argument("--height", type=int, default=32)
    s.add_argument("--width", type=int, default=32)
    s.add_argument("--scheme", default="rank", choices=("rank", "cifar-lt", "threshold"))
    s.set_defaults(func=cmd_make_lt)

    def run_opts(s):
        s.add_argument("--config")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        s.add_argument("--out-dir")
        s.add_argument("--workers", type=int, default=None, help="view threads (default: logical cores)")
        s.add_argument("--deterministic", action="store_true",
                       help="single-threaded numerics and zeroed wallclock column")

    s = sub.add_parser("pretrain", help="contrastive pretraining")
    run_opts(s)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("probe", help="linear probe on frozen features of a run")
    s.add_argument("--run", required=True)
    s.add_argument("--shots", help="per-class probe samples, or 'full'")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--checkpoint", default="last")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("diagnose-tail", help="per-epoch tail-discovery ratios of a run")
    s.add_argument("--run", required=True)
    s.add_argument("--r", type=float, default=0.1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_diagnose_tail)

    s = sub.add_parser("ablate", help="grid of runs along one config axis")
    run_opts(s)
    s.add_argument("--axis", required=True, help="beta, k, components, or any dotted config key")
    s.add_argument("--values", nargs="+")
    s.add_argument("--no-probe", action="store_true")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("inspect-ckpt", help="print a checkpoint's manifest and array table")
    s.add_argument("path")
    s.set_defaults(func=cmd_inspect_ckpt)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"bcl: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"bcl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
