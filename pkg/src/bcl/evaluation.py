"""Linear probing on frozen backbone features and Many/Medium/Few group accuracies."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from .dataio import FEW, GROUPS, MANY, MEDIUM, balanced_subset
from .model import ContrastiveModel, to_input
from .tensor import Adam, CosineSchedule, Tensor, no_grad, ops
from .tensor.nn import Linear

log = logging.getLogger(__name__)


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class ProbeSpec:
    shots: Optional[int] = 100  # None = every available training sample
    epochs: int = 100
    lr: float = 1e-2
    lr_final: float = 1e-6
    weight_decay: float = 5e-6
    batch_size: int = 256
    seed: int = 0


@dataclass
class GroupReport:
    overall: float
    many: float
    medium: float
    few: float
    std: float

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def group_std(values: Sequence[float]) -> float:
    """Spread of the group accuracies, with the n-1 (sample) denominator; 0 for fewer than two groups."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        return 0.0
    return float(np.sqrt(np.sum((v - v.mean()) ** 2) / (v.size - 1)))


def group_metrics(per_class_acc: Mapping[int, float], partition_map: Mapping[int, str],
                  overall: Optional[float] = None) -> GroupReport:
    """Class-mean accuracy within each partition and the sample std of the three.

    ``overall`` is the sample-weighted test accuracy when known; otherwise the
    plain mean over classes is used.
    """
    groups: Dict[str, list] = {g: [] for g in GROUPS}
    for c, acc in per_class_acc.items():
        if c not in partition_map:
            raise ProbeError(f"class {c} missing from partition map")
        groups[partition_map[c]].append(acc)
    means = {g: (float(np.mean(v)) if v else float("nan")) for g, v in groups.items()}
    present = [means[g] for g in GROUPS if groups[g]]
    if overall is None:
        overall = float(np.mean(list(per_class_acc.values())))
    return GroupReport(overall, means[MANY], means[MEDIUM], means[FEW], group_std(present))


def extract_features(model: ContrastiveModel, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Backbone (pre-projector) features of un-augmented images, in eval mode."""
    geom = images.shape[1:]
    if images.ndim != 4 or geom[-1] != model.spec.in_channels:
        raise ProbeError(f"images of shape {images.shape} do not fit an encoder with "
                         f"{model.spec.in_channels} input channels")
    was_training = model.training
    model.eval()
    dtype = model.proj1.weight.dtype.type
    out = []
    try:
        with no_grad():
            for s in range(0, len(images), batch_size):
                out.append(model.features(to_input(images[s:s + batch_size], dtype)).data)
    finally:
        model.train(was_training)
    if not out:
        return np.zeros((0, model.feature_dim), dtype=np.float64)
    return np.concatenate(out).astype(np.float64)


def train_linear_classifier(features: np.ndarray, labels: np.ndarray, num_classes: int,
                            spec: ProbeSpec) -> Linear:
    present = np.unique(labels)
    if len(present) != num_classes:
        missing = sorted(set(range(num_classes)) - set(present.tolist()))
        raise ProbeError(f"classes absent from probe set: {missing}")
    rng = np.random.default_rng([spec.seed, 0x9B0])
    clf = Linear(features.shape[1], num_classes, rng, dtype=np.float64)
    clf.weight.data[...] = 0.0
    n = len(features)
    steps_per_epoch = -(-n // spec.batch_size)
    opt = Adam(clf.parameters(), CosineSchedule(spec.lr, spec.lr_final, spec.epochs * steps_per_epoch),
               weight_decay=spec.weight_decay)
    for epoch in range(spec.epochs):
        order = np.random.default_rng([spec.seed, epoch, 0x9B1]).permutation(n)
        for s in range(0, n, spec.batch_size):
            idx = order[s:s + spec.batch_size]
            loss = ops.cross_entropy(clf(Tensor(features[idx])), labels[idx])
            loss.backward()
            opt.step()
    return clf


def predict(clf: Linear, features: np.ndarray) -> np.ndarray:
    with no_grad():
        return clf(Tensor(features)).data.argmax(axis=1)


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> Dict[int, float]:
    out = {}
    for c in range(num_classes):
        sel = labels == c
        if not sel.any():
            raise ProbeError(f"class {c} absent from the evaluation split")
        out[c] = float((pred[sel] == c).mean())
    return out


def linear_probe(train_features: np.ndarray, train_labels: np.ndarray, test_features: np.ndarray,
                 test_labels: np.ndarray, partition_map: Mapping[int, str], spec: ProbeSpec = ProbeSpec(),
                 num_classes: Optional[int] = None) -> Tuple[GroupReport, Dict[int, float]]:
    """Fit a softmax classifier on the probe set; report on the test split."""
    c = num_classes or len(partition_map)
    clf = train_linear_classifier(train_features, np.asarray(train_labels), c, spec)
    pred = predict(clf, test_features)
    per_class = per_class_accuracy(pred, np.asarray(test_labels), c)
    overall = float((pred == test_labels).mean())
    return group_metrics(per_class, partition_map, overall), per_class


def write_report(out_dir, report: GroupReport, per_class: Mapping[int, float],
                 partition_map: Mapping[int, str], shots: Optional[int], seed: int) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "per_class.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("class", "group", "accuracy"))
        for c in sorted(per_class):
            w.writerow((c, partition_map[c], repr(per_class[c])))
    summary = dict(report.to_dict(), shots="full" if shots is None else shots, seed=seed)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))


def read_per_class(path) -> Tuple[Dict[int, float], Dict[int, str]]:
    acc, pmap = {}, {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            acc[int(row["class"])] = float(row["accuracy"])
            pmap[int(row["class"])] = row["group"]
    return acc, pmap


def probe_run(run_dir, spec: Optional[ProbeSpec] = None, out_dir=None, checkpoint: str = "last") -> GroupReport:
    """Probe a finished pretraining run.

    The probe set is drawn class-balanced from the balanced source pool,
    preferring samples the long-tailed training set left out.
    """
    from .trainer import load_run, load_run_data

    cfg, state = load_run(run_dir, checkpoint)
    if spec is None:
        p = cfg.probe
        spec = ProbeSpec(p.shots, p.epochs, p.lr, p.lr_final, p.weight_decay, p.batch_size, p.seed)
    data = load_run_data(cfg)
    if data.test is None:
        raise ProbeError("config has no dataset.test split to evaluate on")
    held_out = np.ones(len(data.pool), bool)
    held_out[data.train.source_index] = False
    idx = balanced_subset(data.pool.labels, cfg.dataset.num_classes, spec.shots, spec.seed, prefer=held_out)
    tr = extract_features(state.model, data.pool.images[idx])
    te = extract_features(state.model, data.test.images)
    report, per_class = linear_probe(tr, data.pool.labels[idx], te, data.test.labels, data.partition_map,
                                     spec, cfg.dataset.num_classes)
    shots_tag = "full" if spec.shots is None else spec.shots
    write_report(out_dir or Path(run_dir) / f"probe_{shots_tag}_seed{spec.seed}", report, per_class,
                 data.partition_map, spec.shots, spec.seed)
    return report
