"""scikit-learn style estimator around the network, trainer and decoder."""
from __future__ import annotations

from dataclasses import asdict
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import network as net
from .annotations import CellAnnotation
from .config import RunConfig
from .decode import InstancePrediction, decode_instances, decode_unguided
from .evaluation import EvalResult, average_precision, evaluate
from .tensor import DiffTensor, load_checkpoint, save_checkpoint
from .training import normalize, recenter, train

CHECKPOINT_KIND = "msrnet-segmenter"


def check_images(X, multiple: int) -> np.ndarray:
    """Validate a stack of single-channel images ``(n, H, W)``."""
    X = check_array(np.asarray(X), ensure_2d=False, allow_nd=True, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected images shaped (n, H, W), got {X.shape}")
    h, w = X.shape[1:]
    if h % multiple or w % multiple:
        raise ValueError(f"image size {h}x{w} must be a multiple of {multiple}")
    return X


def check_annotations(y, n: int) -> list[list[CellAnnotation]]:
    if y is None or len(y) != n:
        raise ValueError(f"need one annotation list per image ({n}), got {None if y is None else len(y)}")
    out = []
    for k, anns in enumerate(y):
        anns = list(anns)
        if not all(isinstance(a, CellAnnotation) for a in anns):
            raise TypeError(f"annotations for image {k} must be CellAnnotation objects")
        out.append(anns)
    return out


class MSRNetSegmenter(BaseEstimator):
    """Center-guided cell instance segmenter.

    ``config`` is a :class:`RunConfig` (defaults when ``None``); ``guidance``
    overrides its network block, which is how the unguided baseline is built.

    Fitted attributes: ``params_``, ``net_config_``, ``mean_``, ``std_``,
    ``initial_loss_``/``final_loss_`` (full training-set reports) and
    ``history_`` (per-step loss records).
    """

    def __init__(self, config: RunConfig | None = None, guidance: bool | None = None):
        self.config = config
        self.guidance = guidance

    def _cfg(self) -> RunConfig:
        return self.config if self.config is not None else RunConfig()

    def _net_cfg(self) -> net.NetConfig:
        return self._cfg().net_config(self.guidance)

    def init(self, X) -> "MSRNetSegmenter":
        """Initialize parameters and intensity statistics without training."""
        cfg, net_cfg = self._cfg(), self._net_cfg()
        X = check_images(X, net_cfg.multiple)
        self.net_config_ = net_cfg
        self.mean_ = float(X.mean())
        self.std_ = float(X.std()) or 1.0
        self.params_ = net.init_params(net_cfg, cfg.optimizer.seed)
        self.history_ = []
        return self

    def fit(self, X, y, on_step=None) -> "MSRNetSegmenter":
        cfg = self._cfg()
        self.init(X)
        X = check_images(X, self.net_config_.multiple)
        anns = [recenter(a, cfg.labels.center_mode) for a in check_annotations(y, len(X))]
        result = train(self.params_, self.net_config_, normalize(X, self.mean_, self.std_), anns, cfg, on_step)
        self.params_ = result.params
        self.initial_loss_ = result.initial
        self.final_loss_ = result.final
        self.history_ = result.history
        return self

    # -------------------------------------------------------------- inference

    def predict_maps(self, X, batch_size: int = 16) -> dict[str, np.ndarray]:
        """Strided output maps ``foreground``, ``m_g``, ``m_p`` (n, h, w) and ``hw`` (n, 2, h, w);
        the guidance maps are absent for an unguided model."""
        check_is_fitted(self, "params_")
        X = check_images(X, self.net_config_.multiple)
        x = normalize(X, self.mean_, self.std_)
        leaves = net.as_leaves(self.params_, requires_grad=False)
        chunks: dict[str, list[np.ndarray]] = {}
        for start in range(0, len(x), batch_size):
            out = net.forward(leaves, DiffTensor(x[start:start + batch_size]), self.net_config_)
            for key in ("foreground", "m_g", "m_p", "hw"):
                t = getattr(out, key)
                if t is not None:
                    v = t.values
                    chunks.setdefault(key, []).append(v if key == "hw" else v[:, 0])
        return {k: np.concatenate(v) for k, v in chunks.items()}

    def decode(self, maps: dict[str, np.ndarray], k: int, image_shape) -> list[InstancePrediction]:
        e = self._cfg().eval
        S = self.net_config_.stride
        if "m_p" not in maps:
            return decode_unguided(maps["foreground"][k], S, e.peak_thresh, e.topk, image_shape, e.fg_thresh)
        fg = maps["foreground"][k] if e.use_foreground else None
        return decode_instances(maps["m_g"][k], maps["m_p"][k], maps["hw"][k], S, e.peak_thresh, e.topk,
                                image_shape, foreground=fg, fg_thresh=e.fg_thresh)

    def predict(self, X) -> list[list[InstancePrediction]]:
        X = check_images(X, self._net_cfg().multiple)
        maps = self.predict_maps(X)
        return [self.decode(maps, k, X.shape[1:]) for k in range(len(X))]

    def evaluate(self, X, y) -> EvalResult:
        y = check_annotations(y, len(X))
        return evaluate(self.predict(X), y, self._cfg().eval.failure_iou)

    def score(self, X, y) -> float:
        """Mask AP at IoU 0.5."""
        y = check_annotations(y, len(X))
        return average_precision(self.predict(X), y, 0.5)

    # -------------------------------------------------------------- persistence

    def checkpoint_meta(self) -> dict:
        check_is_fitted(self, "params_")
        meta = {"kind": CHECKPOINT_KIND, "config": self._cfg().to_dict(),
                "net": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.net_config_).items()},
                "mean": self.mean_, "std": self.std_}
        if hasattr(self, "final_loss_"):
            meta["initial_loss"] = self.initial_loss_.as_dict()
            meta["final_loss"] = self.final_loss_.as_dict()
        return meta

    def save(self, path) -> None:
        save_checkpoint(path, self.params_, self.checkpoint_meta())

    @classmethod
    def load(cls, path) -> "MSRNetSegmenter":
        params, meta = load_checkpoint(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise ValueError(f"{path} is not a segmenter checkpoint")
        net_doc = dict(meta["net"])
        net_doc["dilations"] = tuple(net_doc["dilations"])
        net_cfg = net.NetConfig(**net_doc)
        model = cls(RunConfig.from_dict(meta["config"]), guidance=net_cfg.guidance)
        expected = set(net.init_params(net_cfg, 0))
        if set(params) != expected:
            raise ValueError(f"{path}: parameter names do not match the stored network configuration")
        model.params_ = params
        model.net_config_ = net_cfg
        model.mean_, model.std_ = float(meta["mean"]), float(meta["std"])
        model.history_ = []
        return model
