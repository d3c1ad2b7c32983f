"""Seeded minibatch training of the full objective."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import network as net
from .annotations import CellAnnotation
from .config import RunConfig
from .labels import build_targets, foreground_target
from .losses import LossReport, NonFiniteLossError, compute_losses
from .tensor import DiffTensor, backward


def normalize(images: np.ndarray, mean: float, std: float) -> np.ndarray:
    """(n, H, W) raw intensities -> (n, 1, H, W) standardized float64."""
    x = np.asarray(images, dtype=np.float64)
    return ((x - mean) / std)[:, None]


def recenter(anns: Sequence[CellAnnotation], center_mode: str) -> list[CellAnnotation]:
    if center_mode == "bbox":
        return list(anns)
    return [CellAnnotation.from_mask(a.mask, center_mode) for a in anns]


def build_batch_targets(anns_per_image, height: int, width: int, cfg: RunConfig) -> dict[str, np.ndarray]:
    lab = cfg.labels
    maps = [build_targets(a, height, width, lab.policy(), lab.stride) for a in anns_per_image]
    return {
        "gaussian": np.stack([m.gaussian for m in maps])[:, None],
        "point": np.stack([m.point for m in maps])[:, None],
        "foreground": np.stack([foreground_target(a, height, width, lab.stride) for a in anns_per_image])[:, None],
    }


def _take(targets: dict, idx) -> dict:
    return {k: v[idx] for k, v in targets.items()}


class GradientDescent:
    def __init__(self, step_size: float):
        self.step_size = step_size

    def step(self, params: dict, grads: dict) -> None:
        for name, g in grads.items():
            params[name] = params[name] - self.step_size * g


class Adam:
    """Standard bias-corrected Adam; deterministic given the gradient sequence."""

    def __init__(self, step_size: float, beta1: float, beta2: float, eps: float):
        self.step_size, self.beta1, self.beta2, self.eps = step_size, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.step_size * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(cfg: RunConfig):
    o = cfg.optimizer
    if o.name == "adam":
        return Adam(o.step_size, o.beta1, o.beta2, o.eps)
    return GradientDescent(o.step_size)


def batch_loss(params: dict, net_cfg: net.NetConfig, x: np.ndarray, targets: dict, anns, cfg: RunConfig,
               requires_grad: bool) -> tuple[LossReport, dict[str, DiffTensor]]:
    leaves = net.as_leaves(params, requires_grad)
    out = net.forward(leaves, DiffTensor(x), net_cfg)
    report = compute_losses(out, targets, anns, cfg.loss.weights(), cfg.labels.stride)
    return report, leaves


def dataset_loss(params: dict, net_cfg: net.NetConfig, x: np.ndarray, targets: dict, anns, cfg: RunConfig) -> LossReport:
    report, _ = batch_loss(params, net_cfg, x, targets, anns, cfg, requires_grad=False)
    report.graph = None
    return report


def minibatches(n: int, batch_size: int, steps: int, seed: int):
    """Indices for each step: consecutive slices of seeded per-epoch permutations."""
    rng = np.random.default_rng(seed)
    queue: list[int] = []
    for _ in range(steps):
        while len(queue) < min(batch_size, n):
            queue.extend(rng.permutation(n).tolist())
        idx, queue = queue[:min(batch_size, n)], queue[min(batch_size, n):]
        yield np.array(sorted(idx))


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    initial: LossReport
    final: LossReport
    history: list[dict] = field(default_factory=list)


def train(params: dict[str, np.ndarray], net_cfg: net.NetConfig, x: np.ndarray, anns_per_image,
          cfg: RunConfig, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Optimize ``params`` on standardized images ``x`` (n, 1, H, W).

    ``on_step`` receives one record per logged step. Raises
    :class:`NonFiniteLossError` as soon as a loss or an update goes non-finite.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    n, _, height, width = x.shape
    targets = build_batch_targets(anns_per_image, height, width, cfg)
    initial = dataset_loss(params, net_cfg, x, targets, anns_per_image, cfg)
    opt = make_optimizer(cfg)
    o = cfg.optimizer
    history = []
    for step, idx in enumerate(minibatches(n, o.batch_size, o.steps, o.seed), start=1):
        report, leaves = batch_loss(params, net_cfg, x[idx], _take(targets, idx),
                                    [anns_per_image[i] for i in idx], cfg, requires_grad=True)
        backward(report.graph)
        # levels above 0 of the guided pyramid feed no loss term, so their
        # parameters legitimately receive no gradient
        grads = {k: leaves[k].grad for k in params if leaves[k].grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(f"gradient of {k}", math.nan)
        opt.step(params, grads)
        if step % o.log_every == 0 or step == o.steps:
            record = {"step": step, **report.as_dict()}
            history.append(record)
            if on_step is not None:
                on_step(record)
    final = dataset_loss(params, net_cfg, x, targets, anns_per_image, cfg)
    return TrainResult(params, initial, final, history)
