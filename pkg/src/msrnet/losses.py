"""Multi-task objective: Gaussian-heatmap MSE, center focal loss, box-size L1,
their point-branch combination and the weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np

from .annotations import CellAnnotation
from .tensor import DiffTensor, ops

PROB_EPS = 1e-7


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"loss component {component} is not finite ({value})")
        self.component = component
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0   # foreground proxy
    lambda2: float = 1.0   # Gaussian heatmap
    lambda3: float = 1.0   # point branch
    beta1: float = 1.0     # center focal term
    beta2: float = 0.1     # box-size term
    delta1: float = 4.0
    delta2: float = 2.0
    focal_mode: str = "two_branch"

    def __post_init__(self):
        vals = (self.lambda1, self.lambda2, self.lambda3, self.beta1, self.beta2, self.delta1, self.delta2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if self.delta1 < 0 or self.delta2 < 0:
            raise ValueError("delta1 and delta2 must be non-negative")
        if self.focal_mode not in ("two_branch", "literal"):
            raise ValueError(f"focal_mode must be 'two_branch' or 'literal', got {self.focal_mode!r}")


@dataclass
class LossReport:
    total: float
    L_G_Pred: float
    L_P_Loc: float
    L_HW_Reg: float
    L_P_Reg: float
    L_I_proxy: float
    graph: DiffTensor | None = None

    def as_dict(self) -> dict[str, float]:
        d = asdict(self)
        d.pop("graph")
        return d


def _check(op: str, pred: DiffTensor, target: np.ndarray) -> np.ndarray:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"{op}: prediction shape {pred.shape} != target shape {target.shape}")
    return target


def gaussian_mse_loss(pred: DiffTensor, target: np.ndarray) -> DiffTensor:
    """Mean over batch and pixels of the squared heatmap error."""
    target = _check("gaussian_mse_loss", pred, target)
    n, _, h, w = pred.shape
    sq = ops.square(ops.add_const(pred, -target))
    return ops.scale(1.0 / (n * h * w), ops.sum_all(sq))


def point_focal_loss(pred: DiffTensor, target: np.ndarray, delta1: float = 4.0, delta2: float = 2.0,
                     mode: str = "two_branch") -> DiffTensor:
    """Center-point focal loss, summed over pixels and divided by the batch size.

    ``two_branch``: pixels with target 1 contribute ``-(1-p)^δ2 log p``, the
    rest ``-(1-g)^δ1 p^δ2 log(1-p)``. ``literal`` applies the second term to
    every pixel.
    """
    target = _check("point_focal_loss", pred, target)
    n = pred.shape[0]
    p = ops.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    one_minus_p = ops.add_const(ops.scale(-1.0, p), 1.0)
    if mode == "two_branch":
        pos = (target == 1.0).astype(np.float64)
    elif mode == "literal":
        pos = np.zeros_like(target)
    else:
        raise ValueError(f"unknown focal mode {mode!r}")
    neg_weight = (1.0 - pos) * (1.0 - target) ** delta1
    neg = ops.mul_const(ops.mul(ops.power(p, delta2), ops.log(one_minus_p)), neg_weight)
    total = ops.sum_all(neg)
    if pos.any():
        pos_term = ops.mul_const(ops.mul(ops.power(one_minus_p, delta2), ops.log(p)), pos)
        total = ops.add(total, ops.sum_all(pos_term))
    return ops.scale(-1.0 / n, total)


def hw_regression_loss(pred_hw: DiffTensor, anns: Sequence[Sequence[CellAnnotation]], stride: int) -> DiffTensor:
    """L1 between predicted and floored box sizes, read at every ground-truth
    center pixel and averaged over cells (0 when there are none)."""
    n_idx, y_idx, x_idx, tgt_h, tgt_w = [], [], [], [], []
    _, _, th, tw = pred_hw.shape
    for b, cells in enumerate(anns):
        for ann in cells:
            cx, cy = ann.center
            i, j = math.floor(cy / stride), math.floor(cx / stride)
            if not (0 <= i < th and 0 <= j < tw):
                continue
            n_idx.append(b)
            y_idx.append(i)
            x_idx.append(j)
            tgt_h.append(math.floor(ann.bbox[3] / stride))
            tgt_w.append(math.floor(ann.bbox[2] / stride))
    count = len(n_idx)
    if count == 0:
        return ops.scale(0.0, ops.sum_all(pred_hw))
    zeros, ones = [0] * count, [1] * count
    pred_w = ops.gather_pixels(pred_hw, n_idx, ones, y_idx, x_idx)
    pred_h = ops.gather_pixels(pred_hw, n_idx, zeros, y_idx, x_idx)
    err_w = ops.absolute(ops.add_const(pred_w, -np.array(tgt_w, dtype=float).reshape(1, 1, 1, -1)))
    err_h = ops.absolute(ops.add_const(pred_h, -np.array(tgt_h, dtype=float).reshape(1, 1, 1, -1)))
    return ops.scale(1.0 / count, ops.sum_all(ops.add(err_w, err_h)))


def prb_loss(l_loc: DiffTensor, l_hw: DiffTensor, weights: LossWeights) -> DiffTensor:
    return ops.add(ops.scale(weights.beta1, l_loc), ops.scale(weights.beta2, l_hw))


def foreground_bce_loss(pred: DiffTensor, target: np.ndarray) -> DiffTensor:
    """Pixel-wise binary cross-entropy against (soft) foreground coverage."""
    target = _check("foreground_bce_loss", pred, target)
    p = ops.clamp(pred, PROB_EPS, 1.0 - PROB_EPS)
    one_minus_p = ops.add_const(ops.scale(-1.0, p), 1.0)
    ll = ops.add(ops.mul_const(ops.log(p), target), ops.mul_const(ops.log(one_minus_p), 1.0 - target))
    return ops.scale(-1.0 / pred.values.size, ops.sum_all(ll))


def total_loss(l_i: DiffTensor, l_g: DiffTensor | None, l_p_reg: DiffTensor | None,
               weights: LossWeights) -> DiffTensor:
    total = ops.scale(weights.lambda1, l_i)
    if l_g is not None:
        total = ops.add(total, ops.scale(weights.lambda2, l_g))
    if l_p_reg is not None:
        total = ops.add(total, ops.scale(weights.lambda3, l_p_reg))
    return total


def compute_losses(outputs, targets: dict, anns: Sequence[Sequence[CellAnnotation]],
                   weights: LossWeights, stride: int) -> LossReport:
    """Evaluate every component on one forward graph.

    ``targets`` holds batched arrays ``gaussian``, ``point`` and ``foreground``
    shaped ``(N, 1, h, w)``. Components of disabled branches report 0.
    """
    l_i = foreground_bce_loss(outputs.foreground, targets["foreground"])
    parts = {"L_I_proxy": l_i}
    l_g = l_reg = None
    if outputs.m_g is not None:
        l_g = gaussian_mse_loss(outputs.m_g, targets["gaussian"])
        l_loc = point_focal_loss(outputs.m_p, targets["point"], weights.delta1, weights.delta2,
                                 weights.focal_mode)
        l_hw = hw_regression_loss(outputs.hw, anns, stride)
        l_reg = prb_loss(l_loc, l_hw, weights)
        parts.update(L_G_Pred=l_g, L_P_Loc=l_loc, L_HW_Reg=l_hw, L_P_Reg=l_reg)
    for name, value in parts.items():
        v = value.item()
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
    total = total_loss(l_i, l_g, l_reg, weights)
    if not math.isfinite(total.item()):
        raise NonFiniteLossError("total", total.item())
    values = {k: v.item() for k, v in parts.items()}
    return LossReport(total=total.item(), L_G_Pred=values.get("L_G_Pred", 0.0),
                      L_P_Loc=values.get("L_P_Loc", 0.0), L_HW_Reg=values.get("L_HW_Reg", 0.0),
                      L_P_Reg=values.get("L_P_Reg", 0.0), L_I_proxy=values["L_I_proxy"], graph=total)
