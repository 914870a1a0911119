"""The sixteen RandAugment operations at a continuous strength in [0, 1]."""

from __future__ import annotations

import json
from importlib import resources
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageEnhance, ImageOps

OP_NAMES: Tuple[str, ...] = (
    "Identity", "ShearX", "ShearY", "TranslateX", "TranslateY", "Rotate", "Cutout", "Invert",
    "Equalize", "Solarize", "Posterize", "Contrast", "Color", "Brightness", "Sharpness", "AutoContrast",
)
PARAMETER_FREE = frozenset({"Identity", "Invert", "Equalize", "AutoContrast"})
SIGNED = frozenset({"ShearX", "ShearY", "TranslateX", "TranslateY", "Rotate",
                    "Contrast", "Color", "Brightness", "Sharpness"})


class UnknownOpError(KeyError):
    pass


def load_magnitude_table(path=None) -> Dict[str, Tuple[float, float]]:
    """Read the versioned ``{op: [min, max]}`` table; defaults to the packaged copy."""
    if path is None:
        text = resources.files("bcl.augment").joinpath("magnitudes.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    doc = json.loads(text)
    if doc.get("version") != 1:
        raise ValueError(f"unsupported magnitude table version {doc.get('version')!r}")
    table = {k: (float(v[0]), float(v[1])) for k, v in doc["ranges"].items()}
    missing = set(OP_NAMES) - set(table)
    if missing:
        raise ValueError(f"magnitude table lacks {sorted(missing)}")
    return table


DEFAULT_MAGNITUDES = load_magnitude_table()


def with_overrides(table: Mapping[str, Tuple[float, float]],
                   overrides: Optional[Mapping[str, Sequence[float]]]) -> Dict[str, Tuple[float, float]]:
    out = dict(table)
    for name, rng in (overrides or {}).items():
        if name not in OP_NAMES:
            raise UnknownOpError(name)
        out[name] = (float(rng[0]), float(rng[1]))
    return out


def magnitude(op: str, strength: float, table: Mapping[str, Tuple[float, float]] = DEFAULT_MAGNITUDES) -> float:
    lo, hi = table[op]
    return lo + (hi - lo) * strength


def _affine(img: Image.Image, coeffs, fill) -> Image.Image:
    return img.transform(img.size, Image.AFFINE, coeffs, resample=Image.NEAREST, fillcolor=fill)


def apply_op(op: str, x: np.ndarray, strength: float, rng: np.random.Generator,
             fill: Tuple[int, int, int] = (128, 128, 128),
             table: Mapping[str, Tuple[float, float]] = DEFAULT_MAGNITUDES) -> np.ndarray:
    """Apply ``op`` to an (H, W, 3) uint8 image.

    Magnitude ops are the identity at strength 0. Signed ops draw their sign
    from ``rng``; Cutout draws its centre. Parameter-free ops ignore strength.
    """
    if op not in OP_NAMES:
        raise UnknownOpError(op)
    if not 0.0 <= strength <= 1.0:
        raise ValueError(f"strength must lie in [0, 1], got {strength}")
    sign = 1.0
    if op in SIGNED:
        sign = 1.0 if rng.random() < 0.5 else -1.0
    if op == "Identity":
        return x
    if op not in PARAMETER_FREE and strength == 0.0:
        return x
    h, w = x.shape[:2]
    v = magnitude(op, strength, table)
    img = Image.fromarray(x)

    if op == "ShearX":
        m = sign * v
        out = _affine(img, (1, m, -m * h / 2, 0, 1, 0), fill)
    elif op == "ShearY":
        m = sign * v
        out = _affine(img, (1, 0, 0, m, 1, -m * w / 2), fill)
    elif op == "TranslateX":
        out = _affine(img, (1, 0, sign * v * w, 0, 1, 0), fill)
    elif op == "TranslateY":
        out = _affine(img, (1, 0, 0, 0, 1, sign * v * h), fill)
    elif op == "Rotate":
        out = img.rotate(sign * v, resample=Image.NEAREST, fillcolor=fill)
    elif op == "Cutout":
        side = int(round(v * min(h, w)))
        if side == 0:
            return x
        cy, cx = int(rng.integers(0, h)), int(rng.integers(0, w))
        y0, y1 = max(cy - side // 2, 0), min(cy - side // 2 + side, h)
        x0, x1 = max(cx - side // 2, 0), min(cx - side // 2 + side, w)
        arr = x.copy()
        arr[y0:y1, x0:x1] = fill
        return arr
    elif op == "Invert":
        return 255 - x
    elif op == "Equalize":
        out = ImageOps.equalize(img)
    elif op == "AutoContrast":
        out = ImageOps.autocontrast(img)
    elif op == "Solarize":
        thr = v
        return np.where(x >= thr, 255 - x, x).astype(np.uint8)
    elif op == "Posterize":
        bits = int(round(v))
        mask = (0xFF << (8 - bits)) & 0xFF
        return (x & np.uint8(mask)).astype(np.uint8)
    else:
        enhancer = {"Contrast": ImageEnhance.Contrast, "Color": ImageEnhance.Color,
                    "Brightness": ImageEnhance.Brightness, "Sharpness": ImageEnhance.Sharpness}[op]
        out = enhancer(img).enhance(1.0 + sign * v)
    return np.asarray(out, dtype=np.uint8)
