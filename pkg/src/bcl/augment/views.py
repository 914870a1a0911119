"""Contrastive view pipeline and the memorisation-boosted augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Mapping, Optional, Tuple

import numpy as np
from PIL import Image

from .ops import DEFAULT_MAGNITUDES, OP_NAMES, UnknownOpError, apply_op


def view_rng(seed: int, sample_id: int, epoch: int, view: int) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch, view); order-free across workers."""
    return np.random.default_rng([int(seed), int(sample_id), int(epoch), int(view)])


@dataclass(frozen=True)
class ViewConfig:
    crop_scale: Tuple[float, float] = (0.2, 1.0)
    crop_ratio: Tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_p: float = 0.2


NO_OP_VIEW = ViewConfig(crop_scale=(1.0, 1.0), crop_ratio=(1.0, 1.0), flip_p=0.0, jitter_p=0.0, gray_p=0.0)


@dataclass
class AugPolicy:
    """k operations drawn per application from ``ops`` (16 by default)."""

    k: int = 1
    ops: Tuple[str, ...] = OP_NAMES
    magnitudes: Mapping[str, Tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_MAGNITUDES))
    fill: Tuple[int, int, int] = (128, 128, 128)
    forced_op: Optional[str] = None

    def __post_init__(self):
        for name in self.ops:
            if name not in OP_NAMES:
                raise UnknownOpError(name)
        if self.forced_op is not None and self.forced_op not in OP_NAMES:
            raise UnknownOpError(self.forced_op)
        pool = len(self.candidates())
        if not 1 <= self.k <= pool:
            raise ValueError(f"k must be in [1, {pool}], got {self.k}")

    def candidates(self) -> Tuple[str, ...]:
        return tuple(o for o in self.ops if o != self.forced_op)

    def select(self, rng: np.random.Generator) -> List[str]:
        cands = self.candidates()
        picked = [cands[i] for i in rng.choice(len(cands), size=self.k, replace=False)]
        if self.forced_op is not None:
            picked.append(self.forced_op)
        return picked


# -- base views --------------------------------------------------------------

def _crop_box(h: int, w: int, cfg: ViewConfig, rng: np.random.Generator) -> Tuple[int, int, int, int]:
    area = h * w
    log_r = (math.log(cfg.crop_ratio[0]), math.log(cfg.crop_ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(*cfg.crop_scale)
        ratio = math.exp(rng.uniform(*log_r))
        cw = int(round(math.sqrt(target * ratio)))
        ch = int(round(math.sqrt(target / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return left, top, left + cw, top + ch
    # fallback: central crop
    return 0, 0, w, h


def _to_gray(x: np.ndarray) -> np.ndarray:
    # ITU-R 601-2 luma, as PIL's "L" conversion
    return x[..., 0] * 0.299 + x[..., 1] * 0.587 + x[..., 2] * 0.114


def _color_jitter(x: np.ndarray, cfg: ViewConfig, rng: np.random.Generator) -> np.ndarray:
    f = x.astype(np.float32)
    for step in rng.permutation(4):
        if step == 0 and cfg.brightness:
            f = f * rng.uniform(1 - cfg.brightness, 1 + cfg.brightness)
        elif step == 1 and cfg.contrast:
            c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast)
            f = c * f + (1 - c) * _to_gray(f).mean()
        elif step == 2 and cfg.saturation:
            s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation)
            f = s * f + (1 - s) * _to_gray(f)[..., None]
        elif step == 3 and cfg.hue:
            shift = rng.uniform(-cfg.hue, cfg.hue)
            hsv = np.asarray(Image.fromarray(np.clip(np.rint(f), 0, 255).astype(np.uint8)).convert("HSV")).copy()
            hsv[..., 0] = (hsv[..., 0].astype(np.int16) + int(round(shift * 255))) % 256
            f = np.asarray(Image.fromarray(hsv, "HSV").convert("RGB"), dtype=np.float32)
        f = np.clip(f, 0, 255)
    return np.rint(f).astype(np.uint8)


def base_view(x: np.ndarray, rng: np.random.Generator, cfg: ViewConfig = ViewConfig(),
              trace: Optional[dict] = None) -> np.ndarray:
    """Random resized crop, horizontal flip, colour jitter and grayscale."""
    h, w = x.shape[:2]
    box = _crop_box(h, w, cfg, rng)
    if box == (0, 0, w, h):
        out = x
    else:
        out = np.asarray(Image.fromarray(x).resize((w, h), Image.BILINEAR, box=box))
    flip = rng.random() < cfg.flip_p
    if flip:
        out = out[:, ::-1]
    jitter = rng.random() < cfg.jitter_p
    if jitter:
        out = _color_jitter(out, cfg, rng)
    gray = rng.random() < cfg.gray_p
    if gray:
        g = np.clip(np.rint(_to_gray(out.astype(np.float32))), 0, 255).astype(np.uint8)
        out = np.repeat(g[..., None], 3, axis=2)
    if trace is not None:
        trace.update(box=box, flip=flip, jitter=jitter, gray=gray)
    return np.ascontiguousarray(out)


def base_views(x: np.ndarray, rng: np.random.Generator, cfg: ViewConfig = ViewConfig()) -> Tuple[np.ndarray, np.ndarray]:
    return base_view(x, rng, cfg), base_view(x, rng, cfg)


# -- boosted augmentation ------------------------------------------------------

def boosted_augment(x: np.ndarray, score: float, policy: AugPolicy, rng: np.random.Generator,
                    trace: Optional[list] = None) -> np.ndarray:
    """Compose the selected ops in selection order; each fires with probability
    ``score`` and, when it does, runs at strength ``score * zeta`` with
    ``zeta ~ U(0, 1)`` drawn per op."""
    if not 0.0 <= score <= 1.0:
        raise ValueError(f"memorisation score must lie in [0, 1], got {score}")
    out = x
    for op in policy.select(rng):
        u = rng.random()
        zeta = rng.random()
        fired = u < score
        if fired:
            out = apply_op(op, out, score * zeta, rng, policy.fill, policy.magnitudes)
        if trace is not None:
            trace.append((op, fired, score * zeta if fired else 0.0))
    return out


def fixed_augment(x: np.ndarray, strength: float, policy: AugPolicy, rng: np.random.Generator,
                  trace: Optional[list] = None) -> np.ndarray:
    """Uniform RandAugment control: every selected op fires at ``strength``."""
    out = x
    for op in policy.select(rng):
        out = apply_op(op, out, strength, rng, policy.fill, policy.magnitudes)
        if trace is not None:
            trace.append((op, True, strength))
    return out


def dataset_fill(images: np.ndarray) -> Tuple[int, int, int]:
    """Per-channel mean colour of a (N, H, W, 3) stack, used to fill exposed pixels."""
    m = images.reshape(-1, 3).mean(axis=0)
    return tuple(int(round(v)) for v in m)

