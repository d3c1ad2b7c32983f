"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .core import DiffTensor, LearnableScalar, backward

GraphBuilder = Callable[[dict[str, DiffTensor]], DiffTensor]


def _leaves(params: Mapping[str, np.ndarray], requires_grad: bool) -> dict[str, DiffTensor]:
    out = {}
    for name, arr in params.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape == (1, 1, 1, 1):
            out[name] = LearnableScalar(arr[0, 0, 0, 0], requires_grad=requires_grad, name=name)
        else:
            out[name] = DiffTensor(arr.copy(), requires_grad=requires_grad, name=name)
    return out


def _loss_value(build: GraphBuilder, params: Mapping[str, np.ndarray]) -> float:
    loss = build(_leaves(params, requires_grad=False))
    value = loss.item()
    if not np.isfinite(value):
        raise FloatingPointError(f"grad_check: loss is not finite ({value})")
    return value


def analytic_gradients(build: GraphBuilder, params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    leaves = _leaves(params, requires_grad=True)
    loss = build(leaves)
    if not np.isfinite(loss.item()):
        raise FloatingPointError(f"grad_check: loss is not finite ({loss.item()})")
    backward(loss)
    return {name: (t.grad if t.grad is not None else np.zeros(t.shape)) for name, t in leaves.items()}


def grad_check_errors(build: GraphBuilder, params: Mapping[str, np.ndarray], eps: float = 1e-5,
                      max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Max relative error per parameter between analytic and central-difference
    gradients. ``max_entries`` limits how many entries of each parameter are
    probed (chosen with a seeded RNG); ``None`` probes all of them.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must lie in [1e-7, 1e-3], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    analytic = analytic_gradients(build, base)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, arr in base.items():
        flat = arr.reshape(-1)
        if max_entries is None or flat.size <= max_entries:
            probe = np.arange(flat.size)
        else:
            probe = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        a_flat = analytic[name].reshape(-1)
        worst = 0.0
        for k in probe:
            orig = flat[k]
            flat[k] = orig + eps
            f_plus = _loss_value(build, base)
            flat[k] = orig - eps
            f_minus = _loss_value(build, base)
            flat[k] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = a_flat[k]
            rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return errors


def grad_check(build: GraphBuilder, params: Mapping[str, np.ndarray], eps: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Largest relative gradient error over all probed parameter entries."""
    errors = grad_check_errors(build, params, eps=eps, max_entries=max_entries, seed=seed)
    return max(errors.values(), default=0.0)
