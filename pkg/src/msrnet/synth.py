"""Seeded synthetic cell scenes: anti-aliased ellipses with blur and noise.

Three presets:

``mixed``
    isolated round cells plus some touching pairs and elongated cells
``dense-pairs``
    every cell has a partner at most ``gap`` pixels away
``elongated``
    every cell has an axis ratio of at least ``aspect_range[0]``
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .annotations import CellAnnotation, annotations_to_json, load_annotation_file
from .tensor.checkpoint import atomic_write_bytes

SCENARIOS = ("mixed", "dense-pairs", "elongated")


@dataclass(frozen=True)
class SceneConfig:
    height: int = 64
    width: int = 64
    cell_count: tuple[int, int] = (3, 6)          # inclusive
    axis_range: tuple[float, float] = (4.0, 7.5)   # semi-axes of round cells
    roundness: float = 0.75                        # minor/major lower bound for round cells
    scenario: str = "mixed"
    gap: float = 1.0
    aspect_range: tuple[float, float] = (3.0, 4.0)
    minor_range: tuple[float, float] = (2.5, 3.5)
    mix_weights: tuple[float, float, float] = (0.5, 0.25, 0.25)  # round, pair, elongated
    separation: float = 3.0                        # min pixel distance between unrelated cells
    fg_level: float = 190.0
    bg_level: float = 40.0
    intensity_jitter: float = 0.0
    noise_sigma: float = 6.0
    blur_sigma: float = 1.0
    supersample: int = 4
    max_retries: int = 200

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        lo, hi = self.cell_count
        if not 0 <= lo <= hi:
            raise ValueError(f"bad cell_count range {self.cell_count}")
        if min(self.axis_range[0], self.minor_range[0]) < 2.0:
            raise ValueError("ellipse axes must be at least 2 pixels")
        if self.axis_range[0] > self.axis_range[1] or self.minor_range[0] > self.minor_range[1]:
            raise ValueError("axis ranges must be ordered (low, high)")
        if not 1.0 <= self.aspect_range[0] <= self.aspect_range[1]:
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if self.height < 8 or self.width < 8:
            raise ValueError("image must be at least 8x8")
        if self.gap < 0 or self.separation < 1:
            raise ValueError("gap must be >= 0 and separation >= 1")
        if self.supersample < 1 or self.noise_sigma < 0 or self.blur_sigma < 0:
            raise ValueError("supersample >= 1, noise_sigma >= 0 and blur_sigma >= 0 required")
        w = np.asarray(self.mix_weights, dtype=float)
        if w.shape != (3,) or (w < 0).any() or w.sum() <= 0:
            raise ValueError(f"bad mix_weights {self.mix_weights}")

    @classmethod
    def from_dict(cls, doc: dict) -> "SceneConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown scene config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float          # semi-major
    b: float          # semi-minor
    theta: float
    group: int = -1   # pair id, -1 for unpaired cells

    def extents(self) -> tuple[float, float]:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return math.hypot(self.a * c, self.b * s), math.hypot(self.a * s, self.b * c)

    def inside(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = xs - self.cx, ys - self.cy
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0

    def mask(self, height: int, width: int) -> np.ndarray:
        yy, xx = np.mgrid[0:height, 0:width]
        return self.inside(xx + 0.5, yy + 0.5)

    def coverage(self, height: int, width: int, ss: int) -> np.ndarray:
        offs = (np.arange(ss) + 0.5) / ss
        yy, xx = np.mgrid[0:height, 0:width]
        cov = np.zeros((height, width))
        for oy in offs:
            for ox in offs:
                cov += self.inside(xx + ox, yy + oy)
        return cov / (ss * ss)


@dataclass
class Layout:
    ellipses: list[Ellipse] = field(default_factory=list)
    masks: list[np.ndarray] = field(default_factory=list)
    pairs: list[tuple[int, int]] = field(default_factory=list)


class PlacementError(ValueError):
    pass


def min_pixel_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Smallest Euclidean distance between a pixel center of ``a`` and one of ``b``."""
    if not a.any() or not b.any():
        return math.inf
    return float(ndimage.distance_transform_edt(~a)[b].min())


class _Placer:
    def __init__(self, cfg: SceneConfig, rng: np.random.Generator):
        self.cfg, self.rng = cfg, rng
        self.h, self.w = cfg.height, cfg.width
        self.layout = Layout()
        self.occupied = np.zeros((self.h, self.w), dtype=bool)
        self.dist = np.full((self.h, self.w), np.inf)

    def _round_shape(self):
        lo, hi = self.cfg.axis_range
        a = self.rng.uniform(lo, hi)
        b = max(lo, a * self.rng.uniform(self.cfg.roundness, 1.0))
        return a, b

    def _elongated_shape(self):
        ratio = self.rng.uniform(*self.cfg.aspect_range)
        b = self.rng.uniform(*self.cfg.minor_range)
        return b * ratio, b

    def _fits(self, e: Ellipse) -> bool:
        ex, ey = e.extents()
        return ex + 1 <= e.cx <= self.w - 1 - ex and ey + 1 <= e.cy <= self.h - 1 - ey

    def _clear(self, m: np.ndarray) -> bool:
        return m.any() and not (self.dist[m] < self.cfg.separation).any()

    def _commit(self, items: Sequence[tuple[Ellipse, np.ndarray]]):
        for e, m in items:
            self.layout.ellipses.append(e)
            self.layout.masks.append(m)
            self.occupied |= m
        self.dist = ndimage.distance_transform_edt(~self.occupied)

    def _random_ellipse(self, a, b, group=-1):
        theta = self.rng.uniform(0, math.pi)
        ex, ey = Ellipse(0, 0, a, b, theta).extents()
        if 2 * ex + 2 > self.w or 2 * ey + 2 > self.h:
            return None
        cx = self.rng.uniform(ex + 1, self.w - 1 - ex)
        cy = self.rng.uniform(ey + 1, self.h - 1 - ey)
        return Ellipse(cx, cy, a, b, theta, group)

    def place_single(self, shape) -> bool:
        for _ in range(50):
            e = self._random_ellipse(*shape())
            if e is None:
                continue
            m = e.mask(self.h, self.w)
            if self._clear(m):
                self._commit([(e, m)])
                return True
        return False

    def place_pair(self) -> bool:
        limit = max(self.cfg.gap, 1.0)
        group = len(self.layout.pairs)
        for _ in range(50):
            first = self._random_ellipse(*self._round_shape(), group)
            if first is None:
                continue
            m1 = first.mask(self.h, self.w)
            if not self._clear(m1):
                continue
            a2, b2 = self._round_shape()
            phi = self.rng.uniform(0, 2 * math.pi)
            theta2 = self.rng.uniform(0, math.pi)
            d1 = ndimage.distance_transform_edt(~m1)
            t = first.a + a2 + limit + 2.0
            while t > 0:
                second = Ellipse(first.cx + t * math.cos(phi), first.cy + t * math.sin(phi), a2, b2, theta2, group)
                m2 = second.mask(self.h, self.w)
                if (m2 & m1).any():
                    break
                if m2.any():
                    gap = float(d1[m2].min())
                    if gap <= limit:
                        if self._fits(second) and self._clear(m2):
                            n = len(self.layout.ellipses)
                            self._commit([(first, m1), (second, m2)])
                            self.layout.pairs.append((n, n + 1))
                            return True
                        break
                t -= 0.25
        return False


def generate_layout(seed: int, cfg: SceneConfig) -> Layout:
    rng = np.random.default_rng(seed)
    for _ in range(cfg.max_retries):
        n = int(rng.integers(cfg.cell_count[0], cfg.cell_count[1] + 1))
        if cfg.scenario == "dense-pairs":
            n -= n % 2
        placer = _Placer(cfg, rng)
        ok = True
        remaining = n
        while remaining > 0 and ok:
            if cfg.scenario == "dense-pairs":
                kind = 1
            elif cfg.scenario == "elongated":
                kind = 2
            else:
                w = np.asarray(cfg.mix_weights, dtype=float)
                if remaining < 2:
                    w[1] = 0.0
                kind = int(rng.choice(3, p=w / w.sum())) if w.sum() > 0 else 0
            if kind == 1:
                ok = placer.place_pair()
                remaining -= 2
            else:
                ok = placer.place_single(placer._elongated_shape if kind == 2 else placer._round_shape)
                remaining -= 1
        if ok:
            return placer.layout
    raise PlacementError(
        f"could not place {cfg.cell_count} cells ({cfg.scenario}) in a {cfg.height}x{cfg.width} image "
        f"after {cfg.max_retries} attempts; lower the cell count or the axis sizes")


def render(layout: Layout, cfg: SceneConfig, rng: np.random.Generator) -> np.ndarray:
    img = np.full((cfg.height, cfg.width), float(cfg.bg_level))
    for e in layout.ellipses:
        level = cfg.fg_level * (1.0 + cfg.intensity_jitter * rng.uniform(-1, 1))
        cov = e.coverage(cfg.height, cfg.width, cfg.supersample)
        img += cov * (level - cfg.bg_level)
    if cfg.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, cfg.blur_sigma, mode="nearest")
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def generate_scene(seed: int, cfg: SceneConfig) -> tuple[np.ndarray, list[CellAnnotation]]:
    """Image (uint8) and annotations; masks are the noise-free geometry."""
    layout = generate_layout(seed, cfg)
    image = render(layout, cfg, np.random.default_rng([seed, 1]))
    return image, [CellAnnotation.from_mask(m) for m in layout.masks]


# ------------------------------------------------------------------ datasets

def split_indices(seed: int, n: int, ratios: Sequence[float]) -> dict[str, list[int]]:
    ratios = [float(r) for r in ratios]
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    perm = np.random.default_rng([seed, 2**31 - 1]).permutation(n).tolist()
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    return {"train": sorted(perm[:n_train]), "val": sorted(perm[n_train:n_train + n_val]),
            "test": sorted(perm[n_train + n_val:])}


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def png_bytes(image: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


def generate_dataset(seed: int, cfg: SceneConfig, n_images: int, ratios: Sequence[float],
                     out_dir, prefix: str = "img") -> Path:
    """Write PNGs, per-image annotation JSON and ``manifest.json``; returns the manifest path.

    The manifest is written last, so a failed run never leaves one behind.
    """
    if n_images < 0:
        raise ValueError("n_images must be >= 0")
    splits = split_indices(seed, n_images, ratios)
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    entries = {}
    for i in range(n_images):
        image, cells = generate_scene(scene_seed(seed, i), cfg)
        name = f"{prefix}_{i:04d}"
        img_rel, ann_rel = f"images/{name}.png", f"annotations/{name}.json"
        atomic_write_bytes(out / img_rel, png_bytes(image))
        doc = annotations_to_json(img_rel, cfg.height, cfg.width, cells)
        atomic_write_bytes(out / ann_rel, (json.dumps(doc, sort_keys=True) + "\n").encode())
        entries[i] = {"image": img_rel, "annotation": ann_rel}
    manifest = {k: [entries[i] for i in idx] for k, idx in splits.items()}
    path = out / "manifest.json"
    atomic_write_bytes(path, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return path


def load_split(manifest_path, split: str) -> list[tuple[np.ndarray, list[CellAnnotation]]]:
    """(uint8 image, annotations) for every entry of one manifest split."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise OSError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if split not in manifest:
        raise KeyError(f"manifest {manifest_path} has no split {split!r}")
    root = manifest_path.parent
    items = []
    for entry in manifest[split]:
        doc, cells = load_annotation_file(root / entry["annotation"])
        with Image.open(root / entry["image"]) as im:
            image = np.asarray(im.convert("L"))
        if image.shape != (doc["height"], doc["width"]):
            raise ValueError(f"{entry['image']}: size {image.shape} disagrees with annotation")
        items.append((image, cells))
    return items
