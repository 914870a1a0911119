"""Contrastive pretraining loop with loss-driven augmentation, checkpoints and ablation grids."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from . import dataio
from .augment import AugPolicy, ViewConfig, dataset_fill, load_magnitude_table, with_overrides
from .config import ConfigError, ExperimentConfig, apply_override, from_dict
from .memtrack import MemTable, tail_discovery
from .model import (ContrastiveModel, EncoderSpec, PruneMask, ViewPlan, build_views, contrastive_step,
                    refresh_prune_mask)
from .tensor import Adam, CosineSchedule, NonFiniteError, SGD, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_HEADER = ("epoch", "loss_mean", "lr", "phi_head_ml", "phi_tail_ml",
                  "phi_head_cl", "phi_tail_cl", "wallclock_s")
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class TrainerHooks:
    """Instrumentation points; the defaults change nothing."""

    def scores_for_epoch(self, epoch: int, scores: np.ndarray) -> np.ndarray:
        return scores

    def mask_for_epoch(self, epoch: int, mask: Optional[PruneMask]) -> Optional[PruneMask]:
        return mask

    def on_epoch_end(self, epoch: int, state: "TrainState") -> None:
        pass


@dataclass
class RunData:
    pool: dataio.LtDataset
    train: dataio.LtDataset
    test: Optional[dataio.LtDataset]
    partition_map: Dict[int, str]
    sample_groups: np.ndarray  # "head" / "tail" per training sample


@dataclass
class TrainState:
    cfg: ExperimentConfig
    model: ContrastiveModel
    optimizer: Any
    memtable: MemTable
    mask: Optional[PruneMask]
    epoch: int = -1
    metrics: List[List[str]] = field(default_factory=list)
    run_dir: Optional[Path] = None

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        out.update({f"opt.{k}": v for k, v in self.optimizer.state_arrays().items()})
        out.update(self.memtable.to_arrays())
        if self.mask is not None:
            out.update(self.mask.to_arrays())
        return out

    def manifest(self) -> Dict[str, Any]:
        return {
            "version": CHECKPOINT_VERSION,
            "epoch": self.epoch,
            "complete": self.epoch == self.cfg.epochs - 1,
            "optimizer": {"kind": self.optimizer.kind, "step": self.optimizer.t},
            "memtable": {"beta": self.memtable.beta, "epoch": self.memtable.epoch},
            "mask_ratio": None if self.mask is None else self.mask.ratio,
            "seeds": {"seed": self.cfg.seed, "lt_seed": self.cfg.dataset.lt_seed},
            # every random draw is keyed by (seed, epoch, ...), so no generator state is stored
            "rng": {"kind": "keyed", "seed": self.cfg.seed},
            "encoder": encoder_spec(self.cfg).to_dict(),
            "config": self.cfg.to_dict(),
        }


# -- setup ------------------------------------------------------------------------

def encoder_spec(cfg: ExperimentConfig) -> EncoderSpec:
    m = cfg.model
    return EncoderSpec(tuple(m.channels), m.hidden_dim, m.embed_dim, m.norm, m.groups, m.tau)


def load_run_data(cfg: ExperimentConfig) -> RunData:
    d = cfg.dataset
    geom = dataio.Geometry(d.height, d.width, d.num_classes)
    pool = dataio.load_dataset(d.pool, geom)
    train = dataio.make_long_tailed(pool, cfg.imbalance_factor, d.lt_seed, d.n_max)
    pmap = dataio.partition_classes(train, d.partition_scheme)
    train.partition_map = pmap
    ht = dataio.head_tail_groups(pmap)
    groups = np.array([ht[int(c)] for c in train.labels])
    test = dataio.load_dataset(d.test, geom) if d.test else None
    if len(train) < 2:
        raise ConfigError("long-tailed training set needs at least 2 samples")
    return RunData(pool, train, test, pmap, groups)


def aug_policy(cfg: ExperimentConfig, fill) -> Optional[AugPolicy]:
    if not cfg.augments:
        return None
    table = load_magnitude_table(cfg.magnitude_table)
    table = with_overrides(table, cfg.magnitude_overrides)
    return AugPolicy(k=cfg.resolved_k, magnitudes=table, fill=fill, forced_op=cfg.forced_op)


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    """Seeded permutation cut into batches; a trailing single sample joins the previous batch."""
    order = dataio.epoch_order(n, seed, epoch)
    chunks = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) == 1:
        chunks[-2:] = [np.concatenate(chunks[-2:])]
    return chunks


def new_state(cfg: ExperimentConfig, n: int) -> TrainState:
    model = ContrastiveModel(encoder_spec(cfg), seed=cfg.seed, dtype=np.float32)
    steps = cfg.epochs * len(epoch_batches(n, cfg.batch_size, cfg.seed, 0))
    o = cfg.optim
    sched = CosineSchedule(o.lr, o.lr_final, steps)
    if o.name == "adam":
        opt = Adam(model.parameters(), sched, weight_decay=o.weight_decay)
    else:
        opt = SGD(model.parameters(), sched, momentum=o.momentum, weight_decay=o.weight_decay)
    return TrainState(cfg, model, opt, MemTable(n, cfg.beta), None)


def restore_state(state: TrainState, arrays: Dict[str, np.ndarray], manifest: Dict[str, Any]) -> None:
    state.model.load_state_dict({k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    state.optimizer.load_state_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("opt.")},
                                      manifest["optimizer"]["step"])
    mem = manifest["memtable"]
    state.memtable = MemTable.from_arrays(arrays, mem["beta"], mem["epoch"])
    if manifest.get("mask_ratio") is not None:
        state.mask = PruneMask.from_arrays(arrays, manifest["mask_ratio"])
    state.epoch = int(manifest["epoch"])


# -- run directory ---------------------------------------------------------------------

def _fmt(v: float) -> str:
    return repr(float(v))


def read_metrics(path) -> List[List[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != METRICS_HEADER:
        raise TrainingError(f"{path}: unexpected metrics header")
    return rows[1:]


def write_metrics(path, rows: Sequence[Sequence[str]]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    w.writerows(rows)
    tmp = Path(str(path) + ".tmp")
    tmp.write_text(buf.getvalue())
    os.replace(tmp, path)


def checkpoint_path(run_dir: Path, name: str = "last") -> Path:
    return Path(run_dir) / "checkpoints" / f"{name}.bcl"


def load_run(run_dir, name: str = "last"):
    """(config, TrainState) restored from a run directory's snapshot and checkpoint."""
    run_dir = Path(run_dir)
    cfg = from_dict(json.loads((run_dir / "config.json").read_text()))
    arrays, manifest = load_checkpoint(checkpoint_path(run_dir, name))
    state = new_state(cfg, len(arrays["mem.l_inst"]))
    restore_state(state, arrays, manifest)
    state.run_dir = run_dir
    return cfg, state


# -- the loop ---------------------------------------------------------------------

def _limit_threads(stack: ExitStack, deterministic: bool) -> None:
    if deterministic:
        from threadpoolctl import threadpool_limits
        stack.enter_context(threadpool_limits(limits=1))


def run_epoch(state: TrainState, data: RunData, epoch: int, plan: ViewPlan, scores: Optional[np.ndarray],
              mask: Optional[PruneMask], executor=None) -> np.ndarray:
    """One pass over the training set; returns the per-sample loss vector (all N filled)."""
    cfg = state.cfg
    n = len(data.train)
    losses = np.full(n, np.nan)
    state.model.train()
    for ids in epoch_batches(n, cfg.batch_size, cfg.seed, epoch):
        batch_scores = None if scores is None else scores[ids]
        va, vb = build_views(data.train.images[ids], ids, epoch, cfg.seed, plan, batch_scores, executor)
        loss, per_sample = contrastive_step(state.model, va, vb, cfg.model.tau, mask)
        loss.backward()
        state.optimizer.step()
        losses[ids] = per_sample
    if np.isnan(losses).any():
        raise TrainingError(f"epoch {epoch}: {int(np.isnan(losses).sum())} samples without a loss")
    return losses


def pretrain(cfg: ExperimentConfig, hooks: Optional[TrainerHooks] = None, resume: bool = False,
             stop_after: Optional[int] = None, data: Optional[RunData] = None) -> TrainState:
    """Run (or resume) pretraining into ``cfg.out_dir``.

    Epochs below ``warmup_epochs`` use base views only. Later epochs build
    views from the previous epoch's scores according to ``cfg.method``.
    After each epoch the losses are folded into the memory table, scores are
    renormalised, the prune mask is refreshed (bcl-d), and a checkpoint plus a
    metrics row are written. ``stop_after`` ends the run after that epoch, as
    an interruption would.
    """
    cfg.validate()
    hooks = hooks or TrainerHooks()
    if not cfg.out_dir:
        raise ConfigError("out_dir is required")
    run_dir = Path(cfg.out_dir)
    (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
    (run_dir / "losses").mkdir(exist_ok=True)
    cfg.snapshot(run_dir / "config.json")

    data = data or load_run_data(cfg)
    dataio.write_counts_manifest(run_dir / "dataset.json", data.train, cfg.dataset.partition_scheme,
                                 cfg.dataset.lt_seed)
    n = len(data.train)
    state = new_state(cfg, n)
    state.run_dir = run_dir
    metrics_file = run_dir / "metrics.csv"

    if resume and checkpoint_path(run_dir).exists():
        arrays, manifest = load_checkpoint(checkpoint_path(run_dir))
        if manifest["config"] != cfg.to_dict():
            raise ConfigError("resume: checkpoint config differs from the requested config")
        restore_state(state, arrays, manifest)
        state.metrics = [r for r in read_metrics(metrics_file) if int(r[0]) <= state.epoch]
        log.info("resuming %s after epoch %d", run_dir, state.epoch)
    else:
        state.metrics = []

    policy = aug_policy(cfg, dataset_fill(data.train.images))
    view_cfg = ViewConfig()
    base_plan = ViewPlan("base", None, view_cfg)
    if cfg.method in ("bcl-i", "bcl-d"):
        method_plan = ViewPlan("boosted", policy, view_cfg)
    elif cfg.method == "non-bcl-fixed":
        method_plan = ViewPlan("fixed", policy, view_cfg, cfg.resolved_fixed_strength)
    else:
        method_plan = base_plan

    with ExitStack() as stack:
        _limit_threads(stack, cfg.deterministic)
        executor = None
        if cfg.workers > 1:
            executor = stack.enter_context(ThreadPoolExecutor(cfg.workers))
        for epoch in range(state.epoch + 1, cfg.epochs):
            t0 = time.perf_counter()
            warm = epoch < cfg.warmup_epochs
            plan = base_plan if warm else method_plan
            scores = None
            if plan.mode == "boosted":
                scores = hooks.scores_for_epoch(epoch, state.memtable.score.copy())
            mask = None
            if cfg.method == "bcl-d" and not warm:
                mask = hooks.mask_for_epoch(epoch, state.mask)
            try:
                losses = run_epoch(state, data, epoch, plan, scores, mask, executor)
            except NonFiniteError as exc:
                crash = run_dir / "crash_state.bcl"
                state.epoch = epoch
                save_checkpoint(crash, state.arrays(), state.manifest())
                raise TrainingError(f"epoch {epoch}: non-finite values ({exc}); state dumped to {crash}") from exc

            state.memtable.record_epoch_losses(losses)
            if cfg.method == "bcl-d":
                state.mask = refresh_prune_mask(
                    {k: v.data for k, v in state.model.prunable().items()}, cfg.resolved_prune_ratio)
            state.epoch = epoch

            np.save(run_dir / "losses" / f"epoch_{epoch:04d}.npy", losses)
            ml = tail_discovery(state.memtable.l_mom, data.sample_groups, cfg.tail_ratio, "momentum")
            cl = tail_discovery(state.memtable.l_inst, data.sample_groups, cfg.tail_ratio, "instantaneous")
            wall = 0.0 if cfg.deterministic else time.perf_counter() - t0
            state.metrics.append([str(epoch), _fmt(losses.mean()), _fmt(state.optimizer.lr),
                                  _fmt(ml.phi.get("head", 0.0)), _fmt(ml.phi.get("tail", 0.0)),
                                  _fmt(cl.phi.get("head", 0.0)), _fmt(cl.phi.get("tail", 0.0)), _fmt(wall)])
            save_checkpoint(checkpoint_path(run_dir), state.arrays(), state.manifest())
            if cfg.keep_checkpoints and (epoch + 1) % cfg.keep_checkpoints == 0:
                save_checkpoint(checkpoint_path(run_dir, f"epoch_{epoch:04d}"), state.arrays(), state.manifest())
            write_metrics(metrics_file, state.metrics)
            log.info("epoch %d loss %.4f phi_tail ml %.3f cl %.3f", epoch, losses.mean(),
                     ml.phi.get("tail", 0.0), cl.phi.get("tail", 0.0))
            hooks.on_epoch_end(epoch, state)
            if stop_after is not None and epoch >= stop_after:
                break
    return state


# -- ablation grids -----------------------------------------------------------------

BETA_GRID = (0.85, 0.90, 0.97, 0.99)
K_GRID = (1, 2, 3, 4, 5)

SUMMARY_HEADER = ("axis", "value", "out_dir", "final_loss", "phi_tail_ml", "phi_tail_cl",
                  "overall", "many", "medium", "few", "std", "best")


def _check_dirs(dirs: Sequence[Path]) -> None:
    resolved = [d.resolve() for d in dirs]
    if len(set(resolved)) != len(resolved):
        raise ConfigError("ablation cells share an output directory")
    for a in resolved:
        for b in resolved:
            if a != b and b.is_relative_to(a):
                raise ConfigError(f"ablation output {b} lies inside {a}")
        if (a / "metrics.csv").exists():
            raise ConfigError(f"ablation output {a} already holds a run")


def run_ablation(base: ExperimentConfig, axis: str, values: Iterable[Any], out_root,
                 probe: bool = True, runner: Optional[Callable[[ExperimentConfig], Any]] = None
                 ) -> List[Dict[str, Any]]:
    """One pretraining run per value of ``axis`` (a dotted config key), plus a joined summary.

    Writes ``summary.csv`` under ``out_root``; the row with the highest probe
    accuracy (or, without probing, the lowest final tail-discovery gap) is
    flagged ``best``.
    """
    values = list(values)
    out_root = Path(out_root)
    cells = []
    for v in values:
        cfg = from_dict(base.to_dict())
        apply_override(cfg, axis, v)
        cfg.out_dir = str(out_root / f"{axis}={v}")
        cfg.validate()
        cells.append(cfg)
    _check_dirs([Path(c.out_dir) for c in cells])

    rows = []
    for v, cfg in zip(values, cells):
        (runner or pretrain)(cfg)
        metrics = read_metrics(Path(cfg.out_dir) / "metrics.csv")
        last = metrics[-1]
        row = {"axis": axis, "value": v, "out_dir": cfg.out_dir, "final_loss": float(last[1]),
               "phi_tail_ml": float(last[4]), "phi_tail_cl": float(last[6])}
        if probe:
            from .evaluation import probe_run
            report = probe_run(cfg.out_dir)
            row.update(overall=report.overall, many=report.many, medium=report.medium,
                       few=report.few, std=report.std)
        rows.append(row)

    key = "overall" if probe else "phi_tail_ml"
    best = max(range(len(rows)), key=lambda i: (rows[i][key], -i))
    for i, row in enumerate(rows):
        row["best"] = i == best
    out_root.mkdir(parents=True, exist_ok=True)
    with open(out_root / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_HEADER, restval="", lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows
