"""Encoder + projection head, the NT-Xent loss family and magnitude-pruned branches."""

from __future__ import annotations

import math
from concurrent.futures import Executor
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .augment import NO_OP_VIEW, AugPolicy, ViewConfig, base_view, boosted_augment, fixed_augment, view_rng
from .tensor import Tensor, nn, ops
from .tensor.core import get_default_dtype


@dataclass(frozen=True)
class EncoderSpec:
    channels: Tuple[int, ...] = (32, 64, 128, 256)
    hidden_dim: int = 256
    embed_dim: int = 128
    norm: str = "batch"
    groups: int = 8
    tau: float = 0.2
    in_channels: int = 3

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.norm not in ("batch", "group"):
            raise ValueError(f"norm must be 'batch' or 'group', got {self.norm!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, spec: EncoderSpec, rng, dtype):
        self.conv = nn.Conv2d(cin, cout, 3, rng, stride=2, padding=1, dtype=dtype)
        if spec.norm == "batch":
            self.norm = nn.BatchNorm(cout, dtype=dtype)
        else:
            self.norm = nn.GroupNorm(cout, groups=min(spec.groups, cout), dtype=dtype)

    def forward(self, x: Tensor, weight: Optional[Tensor] = None) -> Tensor:
        return ops.relu(self.norm(self.conv(x, weight)))


class ContrastiveModel(nn.Module):
    """Conv backbone f with global average pooling and a 2-layer projector.

    Passing a prune mask to :meth:`features`/:meth:`embed` yields the pruned
    branch g: the same parameters multiplied by the mask at forward time.
    """

    def __init__(self, spec: EncoderSpec = EncoderSpec(), seed: int = 0, dtype=None):
        dtype = dtype or get_default_dtype()
        self.spec = spec
        rng = np.random.default_rng([seed, 0xE1C])
        cin = spec.in_channels
        self.blocks = []
        for i, cout in enumerate(spec.channels):
            block = ConvBlock(cin, cout, spec, rng, dtype)
            setattr(self, f"block{i}", block)
            self.blocks.append(block)
            cin = cout
        self.proj1 = nn.Linear(cin, spec.hidden_dim, rng, dtype=dtype)
        self.proj2 = nn.Linear(spec.hidden_dim, spec.embed_dim, rng, dtype=dtype)

    @property
    def feature_dim(self) -> int:
        return self.spec.channels[-1]

    def prunable(self) -> Dict[str, Tensor]:
        return {f"block{i}.conv.weight": b.conv.weight for i, b in enumerate(self.blocks)}

    def features(self, x: Tensor, mask: Optional["PruneMask"] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W) input, got {x.shape}")
        for i, block in enumerate(self.blocks):
            w = None
            if mask is not None:
                name = f"block{i}.conv.weight"
                w = ops.mul(block.conv.weight, Tensor(mask.masks[name], dtype=x.dtype))
            x = block(x, w)
        return ops.global_avg_pool(x)

    def project(self, h: Tensor) -> Tensor:
        return ops.l2_normalize(self.proj2(ops.relu(self.proj1(h))), axis=-1)

    def embed(self, x: Tensor, mask: Optional["PruneMask"] = None) -> Tensor:
        return self.project(self.features(x, mask))

    forward = embed


# -- pruning ----------------------------------------------------------------

@dataclass
class PruneMask:
    ratio: float
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def zeros(self) -> Dict[str, int]:
        return {k: int((m == 0).sum()) for k, m in self.masks.items()}

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {f"mask.{k}": m for k, m in self.masks.items()}

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray], ratio: float) -> "PruneMask":
        masks = {k[len("mask."):]: np.array(v) for k, v in arrays.items() if k.startswith("mask.")}
        return cls(ratio, masks)


def prune_count(n: int, ratio: float) -> int:
    # round first so 0.5 * 4 = 2.0000000000000004 does not become 3
    return int(math.ceil(round(ratio * n, 9)))


def refresh_prune_mask(params: Dict[str, np.ndarray], ratio: float) -> PruneMask:
    """Per layer, zero the ceil(ratio*n) smallest-magnitude weights (ties: lower index first)."""
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"prune ratio must lie in [0, 1), got {ratio}")
    masks = {}
    for name, w in params.items():
        w = w.data if isinstance(w, Tensor) else np.asarray(w)
        flat = np.abs(w).ravel()
        n = flat.size
        z = prune_count(n, ratio)
        order = np.lexsort((np.arange(n), flat))
        m = np.ones(n, dtype=w.dtype if w.dtype.kind == "f" else np.float32)
        m[order[:z]] = 0
        masks[name] = m.reshape(w.shape)
    return PruneMask(ratio, masks)


def all_ones_mask(model: ContrastiveModel) -> PruneMask:
    return PruneMask(0.0, {k: np.ones_like(v.data) for k, v in model.prunable().items()})


# -- losses -----------------------------------------------------------------

def ntxent_loss(z_a: Tensor, z_b: Tensor, tau: float) -> Tuple[Tensor, np.ndarray]:
    """Symmetric NT-Xent over 2B unit-norm embeddings.

    Row i of ``z_a`` pairs with row i of ``z_b``; every other embedding in the
    batch is a negative. Returns the mean over all 2B anchors and the
    per-sample loss (mean of the sample's two anchor terms).
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError(f"view embeddings must share a 2-D shape, got {z_a.shape} and {z_b.shape}")
    b = z_a.shape[0]
    if b < 2:
        raise ValueError("ntxent needs a batch of at least 2 samples")
    z = ops.concat([z_a, z_b], axis=0)
    sim = ops.mul(ops.matmul(z, ops.transpose(z)), 1.0 / tau)
    logp = ops.log_softmax(sim, axis=1, exclude=np.eye(2 * b, dtype=bool))
    pos = np.concatenate([np.arange(b, 2 * b), np.arange(b)])
    per_anchor = ops.mul(ops.pick(logp, pos), -1.0)
    loss = ops.mean(per_anchor)
    pa = per_anchor.data.astype(np.float64)
    return loss, 0.5 * (pa[:b] + pa[b:])


def to_input(images: np.ndarray, dtype=None) -> Tensor:
    """(N, H, W, 3) uint8 -> (N, 3, H, W) float, roughly zero-centred."""
    dtype = dtype or get_default_dtype()
    x = images.astype(dtype).transpose(0, 3, 1, 2) * dtype(1.0 / 255.0)
    return Tensor(np.ascontiguousarray((x - dtype(0.5)) * dtype(4.0)))


@dataclass
class ViewPlan:
    """How the two views of each sample are produced for one epoch."""

    mode: str = "base"  # base | boosted | fixed
    policy: Optional[AugPolicy] = None
    view_cfg: ViewConfig = ViewConfig()
    fixed_strength: float = 0.5

    def __post_init__(self):
        if self.mode not in ("base", "boosted", "fixed"):
            raise ValueError(f"unknown view mode {self.mode!r}")
        if self.mode != "base" and self.policy is None:
            raise ValueError(f"view mode {self.mode!r} needs an AugPolicy")


def make_view(image: np.ndarray, sample_id: int, view: int, epoch: int, seed: int,
              plan: ViewPlan, score: float) -> np.ndarray:
    rng = view_rng(seed, sample_id, epoch, view)
    out = base_view(image, rng, plan.view_cfg)
    if plan.mode == "boosted":
        out = boosted_augment(out, score, plan.policy, rng)
    elif plan.mode == "fixed":
        out = fixed_augment(out, plan.fixed_strength, plan.policy, rng)
    return out


def build_views(images: np.ndarray, ids: Sequence[int], epoch: int, seed: int, plan: ViewPlan,
                scores: Optional[np.ndarray] = None,
                executor: Optional[Executor] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Two independently augmented views per sample, each with its own keyed RNG stream."""
    ids = np.asarray(ids)
    sc = np.zeros(len(ids)) if scores is None else np.asarray(scores, dtype=np.float64)
    jobs = [(images[j], int(ids[j]), v, epoch, seed, plan, float(sc[j]))
            for v in (0, 1) for j in range(len(ids))]
    if executor is None:
        outs = [make_view(*job) for job in jobs]
    else:
        outs = list(executor.map(lambda job: make_view(*job), jobs))
    n = len(ids)
    return np.stack(outs[:n]), np.stack(outs[n:])


def bcl_loss(variant: str, images: np.ndarray, ids: Sequence[int], scores: np.ndarray, policy: AugPolicy,
             model: ContrastiveModel, tau: float, seed: int, epoch: int, mask: Optional[PruneMask] = None,
             view_cfg: ViewConfig = ViewConfig(), executor: Optional[Executor] = None
             ) -> Tuple[Tensor, np.ndarray]:
    """Boosted contrastive loss on one batch.

    Both views get base augmentation and then the boosted augmentation driven by
    each sample's score. Variant "I" encodes both views with f; variant "D"
    encodes the second view with the pruned branch g (``mask``).
    """
    if variant not in ("I", "D"):
        raise ValueError(f"variant must be 'I' or 'D', got {variant!r}")
    if variant == "D" and mask is None:
        raise ValueError("variant D needs a prune mask")
    plan = ViewPlan("boosted", policy, view_cfg)
    va, vb = build_views(images, ids, epoch, seed, plan, scores, executor)
    return contrastive_step(model, va, vb, tau, mask if variant == "D" else None)


def contrastive_step(model: ContrastiveModel, view_a: np.ndarray, view_b: np.ndarray, tau: float,
                     mask: Optional[PruneMask] = None) -> Tuple[Tensor, np.ndarray]:
    dtype = model.proj1.weight.dtype.type
    z_a = model.embed(to_input(view_a, dtype))
    z_b = model.embed(to_input(view_b, dtype), mask)
    return ntxent_loss(z_a, z_b, tau)


__all__ = [
    "ContrastiveModel",
    "EncoderSpec",
    "NO_OP_VIEW",
    "PruneMask",
    "ViewPlan",
    "all_ones_mask",
    "bcl_loss",
    "build_views",
    "contrastive_step",
    "make_view",
    "ntxent_loss",
    "prune_count",
    "refresh_prune_mask",
    "to_input",
]
