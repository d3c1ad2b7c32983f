"""Supervision targets built from cell annotations.

All targets live on the strided grid: image pixel ``(x, y)`` maps to target
pixel ``(floor(x / S), floor(y / S))``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .annotations import CellAnnotation

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RadiusPolicy:
    max_radius: int = 3
    sigma_ratio: float = 3.0
    half_edge: bool = False

    def __post_init__(self):
        if self.max_radius < 1:
            raise ValueError(f"max_radius must be >= 1, got {self.max_radius}")
        if not self.sigma_ratio > 0:
            raise ValueError(f"sigma_ratio must be positive, got {self.sigma_ratio}")


@dataclass
class TargetMaps:
    gaussian: np.ndarray          # (h, w) in [0, 1]
    point: np.ndarray             # (h, w) in {0, 1}
    hw: np.ndarray                # (2, h, w): channel 0 = floor(bbox h / S), 1 = floor(bbox w / S)
    valid: np.ndarray             # (h, w) bool, annotated center pixels
    stride: int
    point_collisions: int = 0
    hw_collisions: int = 0
    skipped: list[int] = field(default_factory=list)


def effective_radius(ann: CellAnnotation, policy: RadiusPolicy) -> int:
    """Gaussian radius in image pixels, clamped so it never exceeds the box's short edge."""
    _, _, w, h = ann.bbox
    if w < 1 or h < 1:
        warnings.warn(f"degenerate bbox {ann.bbox}; using radius 1", RuntimeWarning, stacklevel=2)
        return 1
    edge = min(w, h) / 2.0 if policy.half_edge else min(w, h)
    return max(1, min(int(policy.max_radius), math.floor(edge)))


def _target_shape(height: int, width: int, stride: int) -> tuple[int, int]:
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if height % stride or width % stride:
        raise ValueError(f"image {height}x{width} is not a multiple of stride {stride}; pad it first")
    return height // stride, width // stride


def _center_pixel(ann: CellAnnotation, stride: int) -> tuple[int, int]:
    cx, cy = ann.center
    return int(math.floor(cy / stride)), int(math.floor(cx / stride))


def _inside(ann: CellAnnotation, height: int, width: int) -> bool:
    cx, cy = ann.center
    return 0 <= cx < width and 0 <= cy < height


def _usable(anns: Sequence[CellAnnotation], height: int, width: int,
            warn: bool = True) -> tuple[list[CellAnnotation], list[int]]:
    kept, skipped = [], []
    for idx, ann in enumerate(anns):
        if _inside(ann, height, width):
            kept.append(ann)
        else:
            skipped.append(idx)
            if warn:
                warnings.warn(f"annotation {idx}: center {ann.center} outside image {height}x{width}; "
                              "skipped", RuntimeWarning, stacklevel=3)
    return kept, skipped


def gaussian_kernel_value(d2: int, sigma: float) -> float:
    return math.exp(-d2 / (2.0 * sigma * sigma))


def gaussian_target(anns: Sequence[CellAnnotation], height: int, width: int,
                    policy: RadiusPolicy = RadiusPolicy(), stride: int = 4,
                    _warn: bool = True) -> np.ndarray:
    """Center heatmap: a truncated Gaussian per cell, merged by element-wise max.

    The radius is measured in image pixels and divided by the stride on the
    target grid; sigma is that radius over ``policy.sigma_ratio``.
    """
    th, tw = _target_shape(height, width, stride)
    heat = np.zeros((th, tw))
    kept, _ = _usable(anns, height, width, _warn)
    for ann in kept:
        r = effective_radius(ann, policy) / stride
        sigma = r / policy.sigma_ratio
        ci, cj = _center_pixel(ann, stride)
        reach = int(math.ceil(r))
        i0, i1 = max(0, ci - reach), min(th, ci + reach + 1)
        j0, j1 = max(0, cj - reach), min(tw, cj + reach + 1)
        di = np.arange(i0, i1)[:, None] - ci
        dj = np.arange(j0, j1)[None, :] - cj
        d2 = di * di + dj * dj
        inside = d2 <= r * r
        table = {int(v): gaussian_kernel_value(int(v), sigma) for v in np.unique(d2[inside])}
        patch = np.zeros(d2.shape)
        for v, value in table.items():
            patch[(d2 == v) & inside] = value
        np.maximum(heat[i0:i1, j0:j1], patch, out=heat[i0:i1, j0:j1])
    return heat


def point_target(anns: Sequence[CellAnnotation], height: int, width: int,
                 stride: int = 4, _warn: bool = True) -> tuple[np.ndarray, int]:
    """Binary center mask and the number of centers that landed on an already-set pixel."""
    th, tw = _target_shape(height, width, stride)
    point = np.zeros((th, tw))
    collisions = 0
    kept, _ = _usable(anns, height, width, _warn)
    for ann in kept:
        i, j = _center_pixel(ann, stride)
        if point[i, j] == 1.0:
            collisions += 1
        point[i, j] = 1.0
    if collisions:
        log.info("point target: %d center collision(s) at stride %d", collisions, stride)
    return point, collisions


def hw_target(anns: Sequence[CellAnnotation], height: int, width: int,
              stride: int = 4, _warn: bool = True) -> tuple[np.ndarray, np.ndarray, int]:
    """Floored box height/width at each center pixel; later annotations overwrite earlier ones."""
    th, tw = _target_shape(height, width, stride)
    hw = np.zeros((2, th, tw))
    valid = np.zeros((th, tw), dtype=bool)
    collisions = 0
    kept, _ = _usable(anns, height, width, _warn)
    for ann in kept:
        i, j = _center_pixel(ann, stride)
        _, _, w, h = ann.bbox
        if valid[i, j]:
            collisions += 1
            log.warning("hw target: center pixel (%d, %d) already set; overwriting", i, j)
        hw[0, i, j] = math.floor(h / stride)
        hw[1, i, j] = math.floor(w / stride)
        valid[i, j] = True
    return hw, valid, collisions


def foreground_target(anns: Sequence[CellAnnotation], height: int, width: int, stride: int = 4) -> np.ndarray:
    """Fraction of each stride x stride block covered by the union of cell masks."""
    th, tw = _target_shape(height, width, stride)
    union = np.zeros((height, width))
    for ann in anns:
        union[np.asarray(ann.mask, dtype=bool)] = 1.0
    return union.reshape(th, stride, tw, stride).mean(axis=(1, 3))


def build_targets(anns: Sequence[CellAnnotation], height: int, width: int,
                  policy: RadiusPolicy = RadiusPolicy(), stride: int = 4) -> TargetMaps:
    _, skipped = _usable(anns, height, width, warn=True)
    gauss = gaussian_target(anns, height, width, policy, stride, _warn=False)
    point, pc = point_target(anns, height, width, stride, _warn=False)
    hw, valid, hc = hw_target(anns, height, width, stride, _warn=False)
    return TargetMaps(gaussian=gauss, point=point, hw=hw, valid=valid, stride=stride,
                      point_collisions=pc, hw_collisions=hc, skipped=skipped)


class GuidanceTargetEncoder(TransformerMixin, BaseEstimator):
    """Transformer turning per-image annotation lists into stacked target arrays.

    ``transform`` returns a dict of arrays with a leading image axis:
    ``gaussian`` and ``point`` ``(n, h, w)``, ``hw`` ``(n, 2, h, w)``, ``valid``
    ``(n, h, w)`` and ``foreground`` ``(n, h, w)``.
    """

    def __init__(self, image_shape=(64, 64), max_radius=3, sigma_ratio=3.0, stride=4, half_edge=False):
        self.image_shape = image_shape
        self.max_radius = max_radius
        self.sigma_ratio = sigma_ratio
        self.stride = stride
        self.half_edge = half_edge

    def fit(self, X, y=None):
        self.policy_ = RadiusPolicy(self.max_radius, self.sigma_ratio, self.half_edge)
        _target_shape(*self.image_shape, self.stride)
        self.n_features_in_ = 1
        return self

    def transform(self, X):
        from sklearn.utils.validation import check_is_fitted
        check_is_fitted(self, "policy_")
        h, w = self.image_shape
        maps = [build_targets(anns, h, w, self.policy_, self.stride) for anns in X]
        return {
            "gaussian": np.stack([m.gaussian for m in maps]) if maps else np.zeros((0,)),
            "point": np.stack([m.point for m in maps]) if maps else np.zeros((0,)),
            "hw": np.stack([m.hw for m in maps]) if maps else np.zeros((0,)),
            "valid": np.stack([m.valid for m in maps]) if maps else np.zeros((0,), bool),
            "foreground": (np.stack([foreground_target(a, h, w, self.stride) for a in X])
                           if maps else np.zeros((0,))),
        }
