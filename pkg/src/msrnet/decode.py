"""Peak decoding of branch outputs into scored instance masks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass(eq=False)
class InstancePrediction:
    score: float
    box: tuple[float, float, float, float]   # x, y, w, h in image pixels
    mask: np.ndarray                          # (H, W) bool
    peak: tuple[int, int] | None = None       # (row, col) on the strided grid


def find_peaks(center_map: np.ndarray, thresh: float, topk: int) -> list[tuple[float, int, int]]:
    """Pixels equal to their 3x3 neighbourhood max and >= ``thresh``, as
    ``(score, row, col)`` sorted by score descending then row-major."""
    center_map = np.asarray(center_map, dtype=np.float64)
    local_max = ndimage.maximum_filter(center_map, size=3, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((center_map == local_max) & (center_map >= thresh))
    peaks = sorted(zip((-center_map[rows, cols]).tolist(), rows.tolist(), cols.tolist()))
    return [(-s, r, c) for s, r, c in peaks[:max(int(topk), 0)]]


def upsample_bilinear(grid: np.ndarray, stride: int) -> np.ndarray:
    """Pixel-area aligned bilinear resize of a strided map to image resolution."""
    return ndimage.zoom(np.asarray(grid, dtype=np.float64), stride, order=1, mode="nearest", grid_mode=True)


def _clip_box(x0, y0, x1, y1, height, width):
    x0, x1 = float(np.clip(x0, 0, width)), float(np.clip(x1, 0, width))
    y0, y1 = float(np.clip(y0, 0, height)), float(np.clip(y1, 0, height))
    return x0, y0, x1, y1


def _tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return float(cols[0]), float(rows[0]), float(cols[-1] + 1 - cols[0]), float(rows[-1] + 1 - rows[0])


def decode_instances(m_g: np.ndarray, m_p: np.ndarray, hw: np.ndarray | None, stride: int,
                     peak_thresh: float = 0.3, topk: int = 100, image_shape: tuple[int, int] | None = None,
                     foreground: np.ndarray | None = None, fg_thresh: float = 0.5,
                     mask_margin: float | None = None) -> list[InstancePrediction]:
    """Turn strided branch maps for one image into instances.

    Peaks of ``m_p`` become instances scored by their peak value. Without a
    ``foreground`` map the mask is the part of the peak's size box (from
    ``hw``) where the upsampled ``m_g`` reaches half its peak value. With a
    ``foreground`` map, foreground pixels inside each (margin-padded) box are
    shared among peaks by nearest-peak assignment, and peaks sitting on
    foreground only claim pixels from their own connected component; the
    reported box is then the tight box of the mask. ``hw=None`` means the box
    is the whole image.
    """
    m_g = np.asarray(m_g, dtype=np.float64)
    m_p = np.asarray(m_p, dtype=np.float64)
    gh, gw = m_p.shape
    height, width = image_shape if image_shape is not None else (gh * stride, gw * stride)
    margin = stride / 2.0 if mask_margin is None else float(mask_margin)
    peaks = find_peaks(m_p, peak_thresh, topk)
    if not peaks:
        return []

    boxes = []
    for _, r, c in peaks:
        cy, cx = (r + 0.5) * stride, (c + 0.5) * stride
        if hw is None:
            boxes.append((0.0, 0.0, float(width), float(height)))
        else:
            bh, bw = float(hw[0, r, c]) * stride, float(hw[1, r, c]) * stride
            boxes.append(_clip_box(cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2, height, width))

    yy, xx = np.mgrid[0:height, 0:width]
    results: list[InstancePrediction] = []
    if foreground is None:
        g_up = np.repeat(np.repeat(m_g, stride, axis=0), stride, axis=1)[:height, :width]
        for (score, r, c), (x0, y0, x1, y1) in zip(peaks, boxes):
            inside = (xx >= x0) & (xx < x1) & (yy >= y0) & (yy < y1)
            mask = inside & (g_up >= 0.5 * m_g[r, c])
            if mask.any():
                results.append(InstancePrediction(float(score), (x0, y0, x1 - x0, y1 - y0), mask, (r, c)))
        return results

    fg_up = upsample_bilinear(foreground, stride)[:height, :width]
    fg_bin = fg_up >= fg_thresh
    labels, _ = ndimage.label(fg_bin)
    best_d2 = np.full((height, width), np.inf)
    owner = np.full((height, width), -1)
    for k, ((_, r, c), (x0, y0, x1, y1)) in enumerate(zip(peaks, boxes)):
        cy, cx = (r + 0.5) * stride, (c + 0.5) * stride
        window = ((xx + 0.5 >= x0 - margin) & (xx + 0.5 <= x1 + margin)
                  & (yy + 0.5 >= y0 - margin) & (yy + 0.5 <= y1 + margin) & fg_bin)
        comp = labels[min(int(cy), height - 1), min(int(cx), width - 1)]
        if comp:
            window &= labels == comp
        d2 = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2
        better = window & (d2 < best_d2)
        best_d2[better] = d2[better]
        owner[better] = k
    for k, (score, r, c) in enumerate(peaks):
        mask = owner == k
        if mask.any():
            results.append(InstancePrediction(float(score), _tight_box(mask), mask, (r, c)))
    return results


def decode_unguided(foreground: np.ndarray, stride: int, peak_thresh: float = 0.3, topk: int = 100,
                    image_shape: tuple[int, int] | None = None, fg_thresh: float = 0.5) -> list[InstancePrediction]:
    """The same decoder when both guidance branches are disabled: the
    foreground map stands in for the missing center and heatmap maps, and
    there is no size box."""
    return decode_instances(foreground, foreground, None, stride, peak_thresh, topk, image_shape,
                            foreground=foreground, fg_thresh=fg_thresh)
