"""Per-sample loss history: momentum (EMA) losses, normalised scores, tail discovery."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Union

import numpy as np

FORMAT_VERSION = 1
_MAGIC = b"BCLM"


class MemTableError(ValueError):
    pass


class MemTable:
    """Loss state for N samples indexed by sample id.

    ``epoch`` counts recorded epochs minus one: -1 before any loss is
    recorded, 0 after the warm-up epoch, and so on.
    """

    def __init__(self, n: int, beta: float):
        if not 0.0 <= beta < 1.0:
            raise MemTableError(f"beta must lie in [0, 1), got {beta}")
        self.n = int(n)
        self.beta = float(beta)
        self.epoch = -1
        self.l_inst = np.zeros(n, dtype=np.float64)
        self.l_mom = np.zeros(n, dtype=np.float64)
        self.score = np.full(n, 0.5, dtype=np.float64)

    def __len__(self) -> int:
        return self.n

    def __eq__(self, other) -> bool:
        return (isinstance(other, MemTable) and self.n == other.n and self.beta == other.beta
                and self.epoch == other.epoch
                and np.array_equal(self.l_inst, other.l_inst)
                and np.array_equal(self.l_mom, other.l_mom)
                and np.array_equal(self.score, other.score))

    def record_epoch_losses(self, losses: Union[np.ndarray, Mapping[int, float]]) -> "MemTable":
        """Fold one epoch of per-sample losses into the momentum losses.

        The first call initialises the momentum loss to the loss itself; later
        calls apply ``L_mom <- beta * L_mom + (1 - beta) * L``.
        """
        vec = _as_vector(losses, self.n)
        if self.epoch < 0:
            self.l_mom = vec.copy()
        else:
            self.l_mom = self.beta * self.l_mom + (1.0 - self.beta) * vec
        self.l_inst = vec
        self.epoch += 1
        self.score = normalize_scores(self.l_mom)
        return self

    def normalize_scores(self) -> np.ndarray:
        self.score = normalize_scores(self.l_mom)
        return self.score

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        manifest = {"version": FORMAT_VERSION, "beta": self.beta, "epoch": self.epoch, "N": self.n}
        header = json.dumps(manifest, sort_keys=True).encode()
        triples = np.stack([self.l_inst, self.l_mom, self.score], axis=1).astype("<f8")
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(triples.tobytes())

    @classmethod
    def load(cls, path, expected_n: Optional[int] = None) -> "MemTable":
        raw = Path(path).read_bytes()
        if raw[:4] != _MAGIC:
            raise MemTableError(f"{path}: not a memtable file")
        (hl,) = struct.unpack("<Q", raw[4:12])
        manifest = json.loads(raw[12:12 + hl])
        if manifest.get("version") != FORMAT_VERSION:
            raise MemTableError(f"{path}: version {manifest.get('version')} != {FORMAT_VERSION}")
        n = int(manifest["N"])
        if expected_n is not None and n != expected_n:
            raise MemTableError(f"{path}: table holds {n} samples, dataset has {expected_n}")
        body = raw[12 + hl:]
        if len(body) != n * 24:
            raise MemTableError(f"{path}: expected {n * 24} payload bytes, found {len(body)}")
        triples = np.frombuffer(body, dtype="<f8").reshape(n, 3).astype(np.float64)
        table = cls(n, manifest["beta"])
        table.epoch = int(manifest["epoch"])
        table.l_inst, table.l_mom, table.score = (triples[:, i].copy() for i in range(3))
        return table

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {"mem.l_inst": self.l_inst, "mem.l_mom": self.l_mom, "mem.score": self.score}

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], beta: float, epoch: int) -> "MemTable":
        table = cls(len(arrays["mem.l_inst"]), beta)
        table.epoch = epoch
        table.l_inst = np.array(arrays["mem.l_inst"], dtype=np.float64)
        table.l_mom = np.array(arrays["mem.l_mom"], dtype=np.float64)
        table.score = np.array(arrays["mem.score"], dtype=np.float64)
        return table


def _as_vector(losses, n: int) -> np.ndarray:
    if isinstance(losses, Mapping):
        missing = set(range(n)) - set(int(k) for k in losses)
        if missing:
            raise MemTableError(f"losses missing for {len(missing)} sample ids, e.g. {sorted(missing)[:5]}")
        vec = np.array([losses[i] for i in range(n)], dtype=np.float64)
    else:
        vec = np.asarray(losses, dtype=np.float64)
        if vec.shape != (n,):
            raise MemTableError(f"expected {n} losses, got shape {vec.shape}")
    if not np.isfinite(vec).all():
        raise MemTableError("non-finite loss recorded")
    return vec


def normalize_scores(l_mom: np.ndarray) -> np.ndarray:
    """M_i = ((L_i - mean) / max_j |L_j - mean| + 1) / 2; all 0.5 if every L is equal."""
    l_mom = np.asarray(l_mom, dtype=np.float64)
    centre = l_mom.mean()
    dev = l_mom - centre
    span = np.abs(dev).max()
    # a spread at rounding level means all losses are equal
    if span <= 1e-9 * max(1.0, abs(centre)):
        return np.full_like(l_mom, 0.5)
    return np.clip(0.5 * (dev / span + 1.0), 0.0, 1.0)


# -- tail discovery -------------------------------------------------------------

@dataclass
class TailDiscoveryReport:
    r: float
    score_kind: str
    large_loss_ids: np.ndarray
    phi: Dict[str, float]
    group_sizes: Dict[str, int]
    hits: Dict[str, int]


def top_fraction(scores: np.ndarray, r: float) -> np.ndarray:
    """Ids of the ceil(r*N) largest scores; ties go to the smaller id."""
    if not 0.0 < r <= 1.0:
        raise MemTableError(f"r must lie in (0, 1], got {r}")
    n = len(scores)
    if n == 0:
        raise MemTableError("empty table")
    m = math.ceil(r * n - 1e-9)
    order = np.lexsort((np.arange(n), -np.asarray(scores)))
    return np.sort(order[:m])


def phi_ratio(large_ids: np.ndarray, group_ids: np.ndarray) -> float:
    """|group & large| / |group|."""
    if len(group_ids) == 0:
        return 0.0
    return len(np.intersect1d(large_ids, group_ids)) / len(group_ids)


def tail_discovery(scores: np.ndarray, sample_groups: np.ndarray, r: float = 0.1,
                   score_kind: str = "momentum") -> TailDiscoveryReport:
    """phi per group for the top-r fraction of ``scores``.

    ``sample_groups`` holds each sample's group name (e.g. "head"/"tail").
    """
    scores = np.asarray(scores, dtype=np.float64)
    sample_groups = np.asarray(sample_groups)
    if len(scores) != len(sample_groups):
        raise MemTableError("scores and group labels differ in length")
    large = top_fraction(scores, r)
    phi, sizes, hits = {}, {}, {}
    for g in sorted(set(sample_groups.tolist())):
        members = np.flatnonzero(sample_groups == g)
        sizes[g] = len(members)
        hits[g] = len(np.intersect1d(large, members))
        phi[g] = phi_ratio(large, members)
    return TailDiscoveryReport(r, score_kind, large, phi, sizes, hits)


def table_tail_discovery(table: MemTable, sample_groups: np.ndarray, r: float = 0.1,
                         score: str = "momentum") -> TailDiscoveryReport:
    if table.epoch < 0:
        raise MemTableError("empty table")
    if score == "momentum":
        vec = table.l_mom
    elif score == "instantaneous":
        vec = table.l_inst
    else:
        raise MemTableError(f"unknown score kind {score!r}")
    return tail_discovery(vec, sample_groups, r, score)


def ema_history(history: np.ndarray, beta: float) -> np.ndarray:
    """Replay the momentum recurrence over a (T, N) loss history; returns (T, N)."""
    out = np.empty_like(history, dtype=np.float64)
    out[0] = history[0]
    for t in range(1, len(history)):
        out[t] = beta * out[t - 1] + (1.0 - beta) * history[t]
    return out
