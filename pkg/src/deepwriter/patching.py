"""Patch scanning, uniform sampling, random crops and adjacent pairing.

Gray images are ``uint8`` arrays of shape ``(height, width)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import DomainError

ENGLISH_RATIO = 0.1
CHINESE_RATIO = 0.2


@dataclass(frozen=True)
class PatchPlan:
    patch_side: int = 113
    scan_stride: int = 113
    sample_ratio: float = ENGLISH_RATIO
    pairing: str = "adjacent"

    def __post_init__(self):
        if self.patch_side < 1 or self.scan_stride < 1:
            raise DomainError("patch_side and scan_stride must be >= 1")
        if not 0 < self.sample_ratio <= 1:
            raise DomainError(f"sample_ratio must lie in (0, 1], got {self.sample_ratio}")
        if self.pairing != "adjacent":
            raise DomainError(f"unsupported pairing {self.pairing!r}")

    @classmethod
    def for_side(cls, side: int, sample_ratio: float = ENGLISH_RATIO) -> "PatchPlan":
        """Non-overlapping scan plan for patches of ``side`` pixels."""
        return cls(side, side, sample_ratio)


def resize_min_side(img: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize so the shorter side equals ``target``, keeping aspect ratio."""
    if target < 1:
        raise DomainError("target side must be >= 1")
    h, w = img.shape
    short = min(h, w)
    if h == short:
        nh, nw = target, max(1, int(math.floor(w * target / short + 0.5)))
    else:
        nh, nw = max(1, int(math.floor(h * target / short + 0.5))), target
    if (nh, nw) == (h, w):
        return img.copy()
    out = Image.fromarray(np.ascontiguousarray(img, dtype=np.uint8)).resize(
        (nw, nh), Image.Resampling.BILINEAR)
    return np.asarray(out, dtype=np.uint8)


def scan_offsets(length: int, side: int, stride: int) -> List[int]:
    """Start offsets along one axis: a stride grid plus a final flush window."""
    if length < side:
        raise DomainError(f"axis of {length} px is shorter than the {side} px patch")
    offsets = list(range(0, length - side + 1, stride))
    if offsets[-1] + side < length:
        offsets.append(length - side)
    return offsets


def scan_patches(img: np.ndarray, plan: PatchPlan) -> List[np.ndarray]:
    """Crop ``patch_side`` squares along the long axis in scan order."""
    h, w = img.shape
    side = plan.patch_side
    if h < side or w < side:
        raise DomainError(f"image {h}x{w} is smaller than the {side} px patch")
    if w >= h:
        return [img[:side, x:x + side] for x in scan_offsets(w, side, plan.scan_stride)]
    return [img[y:y + side, :side] for y in scan_offsets(h, side, plan.scan_stride)]


def sample_indices(n: int, ratio: float) -> List[int]:
    """Evenly spaced indices ``round(j*n/k)`` for ``k = ceil(n*ratio)``."""
    if n < 1:
        raise DomainError("cannot sample from an empty patch list")
    if not 0 < ratio <= 1:
        raise DomainError(f"ratio must lie in (0, 1], got {ratio}")
    # Guard against 0.1*30 style products landing a hair above an integer.
    k = max(1, math.ceil(n * ratio - 1e-9))
    picked = []
    for j in range(k):
        i = (2 * j * n + k) // (2 * k)
        if not picked or picked[-1] != i:
            picked.append(i)
    return picked


def sample_uniform(patches: Sequence, ratio: float) -> list:
    return [patches[i] for i in sample_indices(len(patches), ratio)]


def random_crop(img: np.ndarray, side: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly positioned ``side`` x ``side`` crop."""
    h, w = img.shape
    if h < side or w < side:
        raise DomainError(f"image {h}x{w} is smaller than the {side} px crop")
    y = int(rng.integers(0, h - side + 1))
    x = int(rng.integers(0, w - side + 1))
    return img[y:y + side, x:x + side]


def random_adjacent_pair(img: np.ndarray, side: int, rng: np.random.Generator
                         ) -> Tuple[np.ndarray, np.ndarray]:
    """Two abutting crops along the long axis at a uniform random position.

    Images too short to hold two patches yield a duplicated single crop.
    """
    h, w = img.shape
    if h < side or w < side:
        raise DomainError(f"image {h}x{w} is smaller than the {side} px crop")
    if w >= h:
        if w < 2 * side:
            p = random_crop(img, side, rng)
            return p, p
        y = int(rng.integers(0, h - side + 1))
        x = int(rng.integers(0, w - 2 * side + 1))
        return img[y:y + side, x:x + side], img[y:y + side, x + side:x + 2 * side]
    if h < 2 * side:
        p = random_crop(img, side, rng)
        return p, p
    x = int(rng.integers(0, w - side + 1))
    y = int(rng.integers(0, h - 2 * side + 1))
    return img[y:y + side, x:x + side], img[y + side:y + 2 * side, x:x + side]


def make_pairs(patches: Sequence) -> list:
    """Consecutive pairs in scan order; a lone patch is paired with itself."""
    if len(patches) == 0:
        raise DomainError("cannot pair an empty patch list")
    if len(patches) == 1:
        return [(patches[0], patches[0])]
    return [(patches[i], patches[i + 1]) for i in range(len(patches) - 1)]
