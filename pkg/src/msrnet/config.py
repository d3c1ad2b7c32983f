"""Run configuration: one JSON document split into blocks, every field defaulted.

``RunConfig.from_json(cfg.to_json()) == cfg`` and the emitted text is
canonical (sorted keys, fixed indentation), so parse/emit is a fixpoint.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .labels import RadiusPolicy
from .losses import LossWeights
from .network import NetConfig
from .synth import SceneConfig


class ConfigError(ValueError):
    pass


def _tuplify(value):
    return tuple(_tuplify(v) for v in value) if isinstance(value, list) else value


def _listify(value):
    if isinstance(value, (tuple, list)):
        return [_listify(v) for v in value]
    if isinstance(value, dict):
        return {k: _listify(v) for k, v in value.items()}
    return value


class _Block:
    @classmethod
    def from_dict(cls, doc: dict | None, where: str):
        doc = doc or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{where}: expected an object, got {type(doc).__name__}")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise ConfigError(f"{where}: unknown keys {unknown}")
        try:
            return cls(**{k: _tuplify(v) for k, v in doc.items()})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from exc

    def to_dict(self) -> dict:
        return _listify(asdict(self))


@dataclass(frozen=True)
class NetworkBlock(_Block):
    channels: int = 16
    levels: int = 3
    dilations: tuple[int, ...] = (1, 2, 4)
    grad_mode: str = "detach"
    guidance: bool = True
    share_hourglass: bool = False
    prb_depth: int = 1
    seg_depth: int = 1

    def __post_init__(self):
        if not self.dilations or any(int(d) < 1 for d in self.dilations):
            raise ValueError(f"dilations must be positive integers, got {self.dilations}")


@dataclass(frozen=True)
class LabelBlock(_Block):
    max_radius: int = 3
    sigma_ratio: float = 3.0
    stride: int = 4
    center_mode: str = "bbox"
    half_edge: bool = False

    def __post_init__(self):
        if self.center_mode not in ("bbox", "centroid"):
            raise ValueError(f"center_mode must be 'bbox' or 'centroid', got {self.center_mode!r}")
        RadiusPolicy(self.max_radius, self.sigma_ratio, self.half_edge)

    def policy(self) -> RadiusPolicy:
        return RadiusPolicy(self.max_radius, self.sigma_ratio, self.half_edge)


@dataclass(frozen=True)
class LossBlock(_Block):
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    beta1: float = 1.0
    beta2: float = 0.1
    delta1: float = 4.0
    delta2: float = 2.0
    focal_mode: str = "two_branch"

    def __post_init__(self):
        self.weights()

    def weights(self) -> LossWeights:
        return LossWeights(**asdict(self))


@dataclass(frozen=True)
class OptimizerBlock(_Block):
    name: str = "gd"
    step_size: float = 0.05
    steps: int = 200
    batch_size: int = 4
    seed: int = 0
    beta1: float = 0.9     # adam moment decays
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 1

    def __post_init__(self):
        if self.name not in ("gd", "adam"):
            raise ValueError(f"optimizer must be 'gd' or 'adam', got {self.name!r}")
        if not self.step_size > 0 or self.steps < 0 or self.batch_size < 1 or self.log_every < 1:
            raise ValueError("need step_size > 0, steps >= 0, batch_size >= 1 and log_every >= 1")


@dataclass(frozen=True)
class DataBlock(_Block):
    manifest: str = ""
    seed: int = 0
    n_images: int = 200
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)
    synth: dict = field(default_factory=dict)

    def __post_init__(self):
        SceneConfig.from_dict(self.synth)
        r = [float(v) for v in self.ratios]
        if len(r) != 3 or min(r) < 0 or abs(sum(r) - 1.0) > 1e-9:
            raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {list(self.ratios)}")
        if self.n_images < 0:
            raise ValueError("n_images must be >= 0")

    def scene_config(self) -> SceneConfig:
        return SceneConfig.from_dict(self.synth)


@dataclass(frozen=True)
class EvalBlock(_Block):
    peak_thresh: float = 0.3
    topk: int = 100
    fg_thresh: float = 0.5
    use_foreground: bool = True
    failure_iou: float = 0.5
    split: str = "test"


@dataclass(frozen=True)
class RunConfig:
    network: NetworkBlock = field(default_factory=NetworkBlock)
    labels: LabelBlock = field(default_factory=LabelBlock)
    loss: LossBlock = field(default_factory=LossBlock)
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    data: DataBlock = field(default_factory=DataBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)

    _BLOCKS = {"network": NetworkBlock, "labels": LabelBlock, "loss": LossBlock,
               "optimizer": OptimizerBlock, "data": DataBlock, "eval": EvalBlock}

    @classmethod
    def from_dict(cls, doc: dict[str, Any]) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(doc) - set(cls._BLOCKS))
        if unknown:
            raise ConfigError(f"unknown config blocks {unknown}")
        return cls(**{k: b.from_dict(doc.get(k), k) for k, b in cls._BLOCKS.items()})

    def to_dict(self) -> dict:
        return {k: getattr(self, k).to_dict() for k in self._BLOCKS}

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(text)

    def with_seed(self, seed: int | None) -> "RunConfig":
        """Override the optimizer and data seeds (the CLI ``--seed`` flag)."""
        if seed is None:
            return self
        return replace(self, optimizer=replace(self.optimizer, seed=int(seed)),
                       data=replace(self.data, seed=int(seed)))

    def net_config(self, guidance: bool | None = None) -> NetConfig:
        n = self.network
        return NetConfig(channels=n.channels, levels=n.levels, stride=self.labels.stride,
                         dilations=tuple(int(d) for d in n.dilations), prb_depth=n.prb_depth,
                         seg_depth=n.seg_depth, guidance=n.guidance if guidance is None else guidance,
                         grad_mode=n.grad_mode, share_hourglass=n.share_hourglass)


def bundled_config(name: str = "smoke") -> RunConfig:
    from importlib import resources
    text = resources.files("msrnet").joinpath("configs", f"{name}.json").read_text()
    return RunConfig.from_json(text)
