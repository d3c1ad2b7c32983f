"""Cell annotations and their JSON / run-length encoded form."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np


def rle_encode(mask: np.ndarray) -> list[int]:
    """Row-major run lengths, alternating background/foreground, starting with
    background (a leading zero-length run when the first pixel is foreground)."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return []
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def rle_decode(counts: Iterable[int], height: int, width: int) -> np.ndarray:
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise ValueError("run lengths must be non-negative")
    total = sum(counts)
    if total != height * width:
        raise ValueError(f"run lengths sum to {total}, expected {height * width}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(height, width)


def tight_bbox(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise ValueError("empty mask has no bounding box")
    y0, y1 = rows[0], rows[-1] + 1
    x0, x1 = cols[0], cols[-1] + 1
    return float(x0), float(y0), float(x1 - x0), float(y1 - y0)


@dataclass(frozen=True, eq=False)
class CellAnnotation:
    """One cell: center ``(cx, cy)``, box ``(x, y, w, h)`` in pixels and a binary mask."""

    center: tuple[float, float]
    bbox: tuple[float, float, float, float]
    mask: np.ndarray

    @classmethod
    def from_mask(cls, mask: np.ndarray, center_mode: str = "bbox") -> "CellAnnotation":
        mask = np.asarray(mask, dtype=bool)
        x, y, w, h = tight_bbox(mask)
        if center_mode == "bbox":
            center = (x + w / 2.0, y + h / 2.0)
        elif center_mode == "centroid":
            rr, cc = np.nonzero(mask)
            center = (float(cc.mean() + 0.5), float(rr.mean() + 0.5))
        else:
            raise ValueError(f"unknown center mode {center_mode!r}")
        return cls(center=center, bbox=(x, y, w, h), mask=mask)

    def validate(self, height: int | None = None, width: int | None = None) -> None:
        cx, cy = self.center
        x, y, w, h = self.bbox
        if not (x <= cx <= x + w and y <= cy <= y + h):
            raise ValueError(f"center {self.center} lies outside bbox {self.bbox}")
        if height is not None and width is not None:
            if x < 0 or y < 0 or x + w > width or y + h > height:
                raise ValueError(f"bbox {self.bbox} exceeds image {height}x{width}")
        if self.mask is not None:
            if not self.mask.any():
                raise ValueError("mask has no foreground pixels")
            if tight_bbox(self.mask) != tuple(float(v) for v in self.bbox):
                raise ValueError(f"bbox {self.bbox} is not the tight bounds of the mask")

    def to_json(self) -> dict:
        return {
            "center": [float(self.center[0]), float(self.center[1])],
            "bbox": [float(v) for v in self.bbox],
            "mask_rle": rle_encode(self.mask),
        }

    @classmethod
    def from_json(cls, doc: dict, height: int, width: int) -> "CellAnnotation":
        mask = rle_decode(doc["mask_rle"], height, width)
        return cls(center=tuple(float(v) for v in doc["center"]),
                   bbox=tuple(float(v) for v in doc["bbox"]), mask=mask)


def annotations_to_json(image: str, height: int, width: int, cells: list[CellAnnotation]) -> dict:
    return {"image": image, "height": int(height), "width": int(width),
            "cells": [c.to_json() for c in cells]}


def load_annotation_file(path) -> tuple[dict, list[CellAnnotation]]:
    """Returns the raw document (for its image path and size) and the parsed cells."""
    doc = json.loads(Path(path).read_text())
    h, w = int(doc["height"]), int(doc["width"])
    return doc, [CellAnnotation.from_json(c, h, w) for c in doc["cells"]]
