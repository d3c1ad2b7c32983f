"""Network graph: backbone stub, bi-directional hourglass, guidance branches,
dual-scheme guidance and a small foreground head.

Parameters live in a flat ``{name: array}`` dict (see :func:`init_params`);
the forward functions take the same names mapped to :class:`DiffTensor`
leaves so one graph can be built per pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .tensor import DiffTensor, ops

Params = Mapping[str, DiffTensor]


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 1
    channels: int = 16
    levels: int = 4
    stride: int = 4
    dilations: tuple[int, ...] = (1, 2, 4)
    hourglass_kernel: int = 3
    prb_depth: int = 1
    seg_depth: int = 1
    guidance: bool = True
    grad_mode: str = "detach"
    share_hourglass: bool = False

    def __post_init__(self):
        if self.stride < 1 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two, got {self.stride}")
        if self.levels < 0 or self.channels < 1:
            raise ValueError("levels must be >= 0 and channels >= 1")
        if self.grad_mode not in ("detach", "joint"):
            raise ValueError(f"grad_mode must be 'detach' or 'joint', got {self.grad_mode!r}")
        if self.hourglass_kernel % 2 == 0:
            raise ValueError("hourglass_kernel must be odd")

    @property
    def multiple(self) -> int:
        """Image sides must be multiples of this."""
        return self.stride * 2 ** self.levels

    def hourglass_prefixes(self) -> tuple[str, str]:
        if self.share_hourglass:
            return "hg", "hg"
        return "ggab.hg", "prb.hg"


@dataclass
class FeaturePyramid:
    levels: list[DiffTensor]
    strides: list[int]

    def __post_init__(self):
        for i in range(1, len(self.levels)):
            prev, cur = self.levels[i - 1].shape, self.levels[i].shape
            if cur[0] != prev[0] or cur[1] != prev[1]:
                raise ValueError(f"pyramid level {i} has batch/channels {cur[:2]}, expected {prev[:2]}")
            if cur[2] * 2 != prev[2] or cur[3] * 2 != prev[3]:
                raise ValueError(f"pyramid level {i} is {cur[2:]}, expected half of {prev[2:]}")

    def shapes(self) -> list[tuple[int, int, int, int]]:
        return [t.shape for t in self.levels]


@dataclass
class NetOutputs:
    foreground: DiffTensor
    m_g: DiffTensor | None = None
    m_p: DiffTensor | None = None
    hw: DiffTensor | None = None
    pyramid: FeaturePyramid | None = None
    guided: FeaturePyramid | None = None


# --------------------------------------------------------------------------
# parameters

def _conv_shapes(cfg: NetConfig) -> dict[str, tuple[int, int, int]]:
    """name -> (out_channels, in_channels, kernel) for every convolution."""
    C, L, k = cfg.channels, cfg.levels, cfg.hourglass_kernel
    convs: dict[str, tuple[int, int, int]] = {}
    n_stem = max(1, int(math.log2(cfg.stride)))
    for s in range(n_stem):
        convs[f"backbone.stem{s}"] = (C, cfg.in_channels if s == 0 else C, 3)
    for i in range(1, L + 1):
        convs[f"backbone.down{i}"] = (C, C, 3)
    if cfg.guidance:
        for prefix in dict.fromkeys(cfg.hourglass_prefixes()):
            convs[f"{prefix}.mid0"] = (C, C, k)
            for i in range(1, L + 1):
                convs[f"{prefix}.mid{i}"] = (C, 2 * C, k)
            for i in range(L + 1):
                convs[f"{prefix}.out{i}"] = (C, C, k)
        for d in range(len(cfg.dilations)):
            convs[f"ggab.dil{d}"] = (C, C, 3)
        convs["ggab.proj"] = (1, C, 1)
        for d in range(cfg.prb_depth):
            convs[f"prb.trunk{d}"] = (C, C, 3)
        convs["prb.point"] = (1, C, 1)
        convs["prb.hw"] = (2, C, 1)
    for i in range(L + 1):
        convs[f"guide.f{i}.conv"] = (C, C + 2 if i == 0 else 2 * C + 2, 3)
        convs[f"guide.f{i}.proj"] = (C, C, 1)
    for d in range(cfg.seg_depth):
        convs[f"seg.trunk{d}"] = (C, C, 3)
    convs["seg.proj"] = (1, C, 1)
    return convs


_BIAS_INIT = {"prb.point": -2.19, "prb.hw": 1.0}


def init_params(cfg: NetConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """He-normal kernels, zero biases (except the center prior and size heads), β = γ = 1."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, (o, i, k) in _conv_shapes(cfg).items():
        std = math.sqrt(2.0 / (i * k * k))
        if name.startswith("guide.") and name.endswith(".proj"):
            std *= 0.1
        params[f"{name}.w"] = rng.normal(0.0, std, size=(o, i, k, k))
        params[f"{name}.b"] = np.full((1, o, 1, 1), _BIAS_INIT.get(name, 0.0))
    if cfg.guidance:
        for prefix in dict.fromkeys(cfg.hourglass_prefixes()):
            for i in range(1, cfg.levels + 1):
                params[f"{prefix}.beta{i}"] = np.ones((1, 1, 1, 1))
            for i in range(cfg.levels):
                params[f"{prefix}.gamma{i}"] = np.ones((1, 1, 1, 1))
    return params


def parameter_groups(params: Mapping[str, np.ndarray]) -> dict[str, list[str]]:
    """Parameter names grouped by the top-level component they belong to."""
    groups: dict[str, list[str]] = {}
    for name in params:
        groups.setdefault(name.split(".")[0], []).append(name)
    return groups


def _conv(P: Params, name: str, x: DiffTensor, stride: int = 1, dilation: int = 1,
          relu: bool = True) -> DiffTensor:
    w, b = P[f"{name}.w"], P[f"{name}.b"]
    k = w.shape[2]
    y = ops.conv2d(x, w, b, stride=stride, pad=dilation * (k - 1) // 2, dilation=dilation)
    return ops.relu(y) if relu else y


# --------------------------------------------------------------------------
# graph pieces

def backbone_stub(image: DiffTensor, P: Params, cfg: NetConfig) -> FeaturePyramid:
    """Stride-2 conv blocks down to the target stride, then one more per pyramid level."""
    h, w = image.shape[2:]
    m = cfg.multiple
    if h < m or w < m or h % m or w % m:
        raise ValueError(f"image {h}x{w} must be a positive multiple of stride * 2**levels = {m}")
    if image.shape[1] != cfg.in_channels:
        raise ValueError(f"image has {image.shape[1]} channels, network expects {cfg.in_channels}")
    x = image
    if cfg.stride == 1:
        x = _conv(P, "backbone.stem0", x)
    else:
        for s in range(int(math.log2(cfg.stride))):
            x = _conv(P, f"backbone.stem{s}", x, stride=2)
    levels = [x]
    for i in range(1, cfg.levels + 1):
        levels.append(_conv(P, f"backbone.down{i}", levels[-1], stride=2))
    return FeaturePyramid(levels, [cfg.stride * 2 ** i for i in range(cfg.levels + 1)])


def bidirectional_hourglass(pyr: FeaturePyramid, P: Params, prefix: str = "ggab.hg",
                            trace: dict | None = None) -> FeaturePyramid:
    """Bottom-up pooled fusion followed by a β/γ-weighted top-down pass.

    mid_0 = f(F_0); mid_{i+1} = f(Concat(F_{i+1}, Pool(mid_i)));
    out_i = f(mid_i + β_i Pool(mid_{i-1}) + γ_i Up(out_{i+1})), dropping the
    Pool term at level 0 and the Up term at the top level.
    """
    F = pyr.levels
    L = len(F) - 1
    expected = P[f"{prefix}.mid0.w"].shape[1]
    if F[0].shape[1] != expected:
        raise ValueError(f"hourglass {prefix!r} expects {expected} channels, pyramid has {F[0].shape[1]}")
    mid = [_conv(P, f"{prefix}.mid0", F[0])]
    for i in range(1, L + 1):
        mid.append(_conv(P, f"{prefix}.mid{i}", ops.concat_channels([F[i], ops.maxpool2(mid[i - 1])])))
    out: list[DiffTensor | None] = [None] * (L + 1)
    for i in range(L, -1, -1):
        acc = mid[i]
        if i > 0:
            acc = ops.add(acc, ops.scale(P[f"{prefix}.beta{i}"], ops.maxpool2(mid[i - 1])))
        if i < L:
            acc = ops.add(acc, ops.scale(P[f"{prefix}.gamma{i}"], ops.upsample_nearest2(out[i + 1])))
        out[i] = _conv(P, f"{prefix}.out{i}", acc)
    if trace is not None:
        trace["mid"] = mid
    return FeaturePyramid(out, list(pyr.strides))


def ggab_head(fused: FeaturePyramid, P: Params, cfg: NetConfig) -> DiffTensor:
    """Dilated conv blocks on the finest fused level, then a 1-channel sigmoid map."""
    x = fused.levels[0]
    for d, dil in enumerate(cfg.dilations):
        x = _conv(P, f"ggab.dil{d}", x, dilation=dil)
    return ops.sigmoid(_conv(P, "ggab.proj", x, relu=False))


def prb_head(fused: FeaturePyramid, P: Params, cfg: NetConfig) -> tuple[DiffTensor, DiffTensor]:
    x = fused.levels[0]
    for d in range(cfg.prb_depth):
        x = _conv(P, f"prb.trunk{d}", x)
    m_p = ops.sigmoid(_conv(P, "prb.point", x, relu=False))
    hw = _conv(P, "prb.hw", x, relu=True)
    return m_p, hw


def dual_scheme_guidance(pyr: FeaturePyramid, m_g: DiffTensor, m_p: DiffTensor, P: Params,
                         detach: bool = True, trace: dict | None = None) -> FeaturePyramid:
    """Inject the two guidance masks into every pyramid level with a residual.

    Level i sees the masks max-pooled i times and the previous guided level
    max-pooled once; ``out_i = f_i(cat) + F_i``.
    """
    F = pyr.levels
    if m_g.shape[2:] != F[0].shape[2:] or m_p.shape[2:] != F[0].shape[2:]:
        raise ValueError(f"guidance masks {m_g.shape[2:]}/{m_p.shape[2:]} must match the finest "
                         f"pyramid level {F[0].shape[2:]}")
    if detach:
        m_g, m_p = ops.detach(m_g), ops.detach(m_p)
    out: list[DiffTensor] = []
    for i, f_in in enumerate(F):
        if i > 0:
            m_g, m_p = ops.maxpool2(m_g), ops.maxpool2(m_p)
            cat = ops.concat_channels([f_in, m_g, m_p, ops.maxpool2(out[i - 1])])
        else:
            cat = ops.concat_channels([f_in, m_g, m_p])
        if trace is not None:
            trace.setdefault("cat", []).append(cat)
        h = _conv(P, f"guide.f{i}.proj", _conv(P, f"guide.f{i}.conv", cat), relu=False)
        out.append(ops.add(h, f_in))
    return FeaturePyramid(out, list(pyr.strides))


def toy_segmentation_head(guided: FeaturePyramid, P: Params, cfg: NetConfig) -> DiffTensor:
    """Foreground probability at the finest stride; a stand-in for a full instance head."""
    x = guided.levels[0]
    for d in range(cfg.seg_depth):
        x = _conv(P, f"seg.trunk{d}", x)
    return ops.sigmoid(_conv(P, "seg.proj", x, relu=False))


def forward(P: Params, image: DiffTensor, cfg: NetConfig) -> NetOutputs:
    pyr = backbone_stub(image, P, cfg)
    if cfg.guidance:
        g_prefix, p_prefix = cfg.hourglass_prefixes()
        fused_g = bidirectional_hourglass(pyr, P, g_prefix)
        fused_p = fused_g if cfg.share_hourglass else bidirectional_hourglass(pyr, P, p_prefix)
        m_g = ggab_head(fused_g, P, cfg)
        m_p, hw = prb_head(fused_p, P, cfg)
        guided = dual_scheme_guidance(pyr, m_g, m_p, P, detach=cfg.grad_mode == "detach")
    else:
        m_g = m_p = hw = None
        zeros = DiffTensor(np.zeros((pyr.levels[0].shape[0], 1) + pyr.levels[0].shape[2:]))
        guided = dual_scheme_guidance(pyr, zeros, zeros, P)
    fg = toy_segmentation_head(guided, P, cfg)
    return NetOutputs(foreground=fg, m_g=m_g, m_p=m_p, hw=hw, pyramid=pyr, guided=guided)


def as_leaves(params: Mapping[str, np.ndarray], requires_grad: bool = True) -> dict[str, DiffTensor]:
    from .tensor import LearnableScalar
    out = {}
    for name, arr in params.items():
        if name.rsplit(".", 1)[-1].startswith(("beta", "gamma")):
            out[name] = LearnableScalar(float(arr.reshape(-1)[0]), requires_grad=requires_grad, name=name)
        else:
            out[name] = DiffTensor(arr, requires_grad=requires_grad, name=name)
    return out
