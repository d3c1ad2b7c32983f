"""Brute-force reference computations shared by the unit and acceptance tests.

These deliberately avoid the vectorised code paths they check: plain Python
loops over every pixel / cell, recomputed from the definitions.
"""
import math

import numpy as np

from msrnet.annotations import CellAnnotation


def random_annotations(rng, height=64, width=64, max_cells=8, max_side=20):
    """Rectangle-and-ellipse cells with tight boxes; centers may collide."""
    anns = []
    for _ in range(int(rng.integers(0, max_cells + 1))):
        w = int(rng.integers(1, max_side + 1))
        h = int(rng.integers(1, max_side + 1))
        x = int(rng.integers(0, width - w + 1))
        y = int(rng.integers(0, height - h + 1))
        mask = np.zeros((height, width), dtype=bool)
        if rng.random() < 0.5 or w < 3 or h < 3:
            mask[y:y + h, x:x + w] = True
        else:
            yy, xx = np.mgrid[0:h, 0:w]
            ell = ((yy + 0.5 - h / 2) / (h / 2)) ** 2 + ((xx + 0.5 - w / 2) / (w / 2)) ** 2 <= 1.0
            mask[y:y + h, x:x + w] = ell
        anns.append(CellAnnotation.from_mask(mask, "centroid" if rng.random() < 0.2 else "bbox"))
    return anns


def oracle_radius(ann, max_radius, half_edge=False):
    _, _, w, h = ann.bbox
    if w < 1 or h < 1:
        return 1
    edge = min(w, h) / 2.0 if half_edge else min(w, h)
    return max(1, min(max_radius, math.floor(edge)))


def oracle_gaussian(anns, height, width, max_radius, sigma_ratio, stride):
    th, tw = height // stride, width // stride
    out = [[0.0] * tw for _ in range(th)]
    for ann in anns:
        cx, cy = ann.center
        if not (0 <= cx < width and 0 <= cy < height):
            continue
        r = oracle_radius(ann, max_radius) / stride
        sigma = r / sigma_ratio
        ci, cj = math.floor(cy / stride), math.floor(cx / stride)
        for i in range(th):
            for j in range(tw):
                d2 = (i - ci) ** 2 + (j - cj) ** 2
                if d2 <= r * r:
                    v = math.exp(-d2 / (2.0 * sigma * sigma))
                    if v > out[i][j]:
                        out[i][j] = v
    return np.array(out)


def oracle_point(anns, height, width, stride):
    th, tw = height // stride, width // stride
    out = np.zeros((th, tw))
    seen = set()
    collisions = 0
    for ann in anns:
        cx, cy = ann.center
        if not (0 <= cx < width and 0 <= cy < height):
            continue
        key = (math.floor(cy / stride), math.floor(cx / stride))
        if key in seen:
            collisions += 1
        seen.add(key)
    for i in range(th):
        for j in range(tw):
            if (i, j) in seen:
                out[i, j] = 1.0
    return out, collisions


def oracle_hw(anns, height, width, stride):
    th, tw = height // stride, width // stride
    hw = np.zeros((2, th, tw))
    valid = np.zeros((th, tw), dtype=bool)
    for i in range(th):
        for j in range(tw):
            last = None
            for ann in anns:
                cx, cy = ann.center
                if not (0 <= cx < width and 0 <= cy < height):
                    continue
                if math.floor(cy / stride) == i and math.floor(cx / stride) == j:
                    last = ann
            if last is not None:
                valid[i, j] = True
                hw[0, i, j] = math.floor(last.bbox[3] / stride)
                hw[1, i, j] = math.floor(last.bbox[2] / stride)
    return hw, valid


def loop_mse(pred, target):
    n, _, h, w = pred.shape
    total = 0.0
    for a in range(n):
        for i in range(h):
            for j in range(w):
                d = pred[a, 0, i, j] - target[a, 0, i, j]
                total += d * d
    return total / (n * h * w)


def loop_focal(pred, target, d1, d2, mode="two_branch", eps=1e-7):
    n = pred.shape[0]
    total = 0.0
    for idx in np.ndindex(pred.shape):
        p = min(max(pred[idx], eps), 1.0 - eps)
        g = target[idx]
        if mode == "two_branch" and g == 1.0:
            total += -((1.0 - p) ** d2) * math.log(p)
        else:
            total += -((1.0 - g) ** d1) * (p ** d2) * math.log(1.0 - p)
    return total / n


def loop_hw_l1(pred_hw, anns_per_image, stride):
    total = 0.0
    count = 0
    for b, anns in enumerate(anns_per_image):
        for ann in anns:
            cx, cy = ann.center
            i, j = math.floor(cy / stride), math.floor(cx / stride)
            total += abs(pred_hw[b, 1, i, j] - math.floor(ann.bbox[2] / stride))
            total += abs(pred_hw[b, 0, i, j] - math.floor(ann.bbox[3] / stride))
            count += 1
    return total / count if count else 0.0


def loop_bce(pred, target, eps=1e-7):
    total = 0.0
    for idx in np.ndindex(pred.shape):
        p = min(max(pred[idx], eps), 1.0 - eps)
        g = target[idx]
        total += -(g * math.log(p) + (1.0 - g) * math.log(1.0 - p))
    return total / pred.size


def loop_iou(a, b):
    inter = union = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x, y = bool(a[i, j]), bool(b[i, j])
            inter += x and y
            union += x or y
    return inter / union
