"""Hierarchical Temporal Mamba encoder, lightweight decoder head and segmentation loss.

Clips are batched as (B, T, C, H, W). Inside a stage, features travel
channels-last as (B, T, H, W, C) so pointwise projections are plain matmuls.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from . import tensor as T
from .scan_orders import SequenceLayout, from_spatial_first, to_spatial_first
from .ssm import EXPANSION, STATE_SIZE, SsmBranch
from .tensor import ShapeError, Tensor

DIRECTIONS = ("t_forward", "t_backward", "spatial")


@dataclass
class VivimConfig:
    channels: tuple[int, ...] = (32, 64, 160, 256)
    depths: tuple[int, ...] = (2, 2, 2, 2)
    reductions: tuple[int, ...] = (8, 4, 2, 1)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    decoder_dim: int = 128
    mlp_ratio: int = 4
    dsf_ratio: int = 4
    in_channels: int = 3
    state: int = STATE_SIZE
    expand: int = EXPANSION
    t_forward: bool = True
    t_backward: bool = True
    spatial: bool = True
    gated: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "depths", "reductions", "heads"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
            if len(getattr(self, name)) != 4:
                raise ValueError(f"{name} needs one entry per stage (4)")
        if any(b <= a for a, b in zip(self.channels, self.channels[1:])):
            raise ValueError("stage channels must be strictly increasing")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ValueError(f"{c} channels cannot be split into {h} heads")

    @property
    def toggles(self) -> dict[str, bool]:
        return {d: bool(getattr(self, d)) for d in DIRECTIONS}

    @property
    def any_scan(self) -> bool:
        return any(self.toggles.values())

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, values: dict) -> "VivimConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in values.items() if k in known})


@dataclass
class FeaturePyramid:
    """Four stage outputs, each (B, T, C_i, H/2^(i+1), W/2^(i+1))."""

    features: list[Tensor] = field(default_factory=list)

    def __getitem__(self, i: int) -> Tensor:
        return self.features[i]

    def __len__(self) -> int:
        return len(self.features)

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [f.shape for f in self.features]


def _frames(x: Tensor) -> tuple[Tensor, int, int]:
    """(B, T, C, H, W) -> (B*T, C, H, W)."""
    b, t = x.shape[:2]
    return T.reshape(x, (b * t,) + x.shape[2:]), b, t


class OverlapPatchEmbed(nn.Module):
    """Strided convolution applied frame by frame, then layer norm over channels."""

    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, rng):
        self.proj = nn.Conv2d(c_in, c_out, kernel, rng, stride=stride, padding=kernel // 2)
        self.norm = nn.LayerNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        """(B, T, C, H, W) -> channels-last (B, T, H', W', C')."""
        frames, b, t = _frames(x)
        y = self.proj(frames)
        y = T.transpose(y, (0, 2, 3, 1))
        y = self.norm(y)
        return T.reshape(y, (b, t) + y.shape[1:])


class EfficientSpatialAttention(nn.Module):
    """Per-frame multi-head attention with keys/values from an R x R strided reduction."""

    def __init__(self, dim: int, heads: int, reduction: int, rng):
        self.heads = heads
        self.reduction = reduction
        self.q = nn.Linear(dim, dim, rng)
        self.k = nn.Linear(dim, dim, rng)
        self.v = nn.Linear(dim, dim, rng)
        self.proj = nn.Linear(dim, dim, rng)
        if reduction > 1:
            self.sr = nn.Conv2d(dim, dim, reduction, rng, stride=reduction, std=0.02)
            self.sr_norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        """``x`` is channels-last frames (F, H, W, C); returns the same shape."""
        f, h, w, c = x.shape
        r = self.reduction
        if h % r or w % r:
            raise ShapeError(f"{h}x{w} grid is not divisible by reduction ratio {r}")
        tokens = T.reshape(x, (f, h * w, c))
        if r > 1:
            grid = T.transpose(x, (0, 3, 1, 2))
            kv = T.transpose(self.sr(grid), (0, 2, 3, 1))
            kv = self.sr_norm(T.reshape(kv, (f, -1, c)))
        else:
            kv = tokens
        nh, dh = self.heads, c // self.heads

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (f, t.shape[1], nh, dh)), (0, 2, 1, 3))

        q = split(self.q(tokens))
        k = split(self.k(kv))
        v = split(self.v(kv))
        attn = T.softmax(T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)))
        out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3))
        out = self.proj(T.reshape(out, (f, h * w, c)))
        return T.reshape(out, (f, h, w, c))


class MixFeedForward(nn.Module):
    """Pointwise expand, depthwise 3x3 convolution, SiLU, pointwise contract."""

    def __init__(self, dim: int, ratio: int, rng):
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.dw = nn.parameter(nn.trunc_normal(rng, (hidden, 1, 3, 3), math.sqrt(2.0 / 9)))
        self.dw_bias = nn.parameter(np.zeros(hidden))
        self.fc2 = nn.Linear(hidden, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        f, h, w, _ = x.shape
        y = self.fc1(x)
        y = T.reshape(T.transpose(y, (0, 3, 1, 2)), (f, -1, 1, h, w))
        y = T.depthwise_conv3d(y, self.dw, self.dw_bias)
        y = T.transpose(T.reshape(y, (f, -1, h, w)), (0, 2, 3, 1))
        return self.fc2(T.silu(y))


class SpatialBlock(nn.Module):
    def __init__(self, dim: int, heads: int, reduction: int, mlp_ratio: int, rng):
        self.norm1 = nn.LayerNorm(dim)
        self.attn = EfficientSpatialAttention(dim, heads, reduction, rng)
        self.norm2 = nn.LayerNorm(dim)
        self.ffn = MixFeedForward(dim, mlp_ratio, rng)

    def forward(self, x: Tensor) -> Tensor:
        """Channels-last (B, T, H, W, C); frames never interact."""
        b, t = x.shape[:2]
        f = T.reshape(x, (b * t,) + x.shape[2:])
        f = f + self.attn(self.norm1(f))
        f = f + self.ffn(self.norm2(f))
        return T.reshape(f, x.shape)


class STMamba(nn.Module):
    """Shared input/gate/output projections around up to three directional scans."""

    def __init__(self, dim: int, rng, expand: int = EXPANSION, state: int = STATE_SIZE,
                 gated: bool = True):
        inner = expand * dim
        self.in_proj = nn.Linear(dim, inner, rng)
        self.gate_proj = nn.Linear(dim, inner, rng)
        self.branches = {d: SsmBranch(inner, rng, state) for d in DIRECTIONS}
        self.out_proj = nn.Linear(inner, dim, rng)
        self.gated = gated

    def forward(self, x: Tensor, layout: SequenceLayout, toggles: dict[str, bool]) -> Tensor:
        """``x`` is (B, L, C) in temporal-first order."""
        if not any(toggles.values()):
            raise ValueError("ST-Mamba needs at least one enabled scan direction")
        u = self.in_proj(x)
        outputs = []
        if toggles.get("t_forward"):
            outputs.append(self.branches["t_forward"](u))
        if toggles.get("t_backward"):
            outputs.append(T.flip(self.branches["t_backward"](T.flip(u, 1)), 1))
        if toggles.get("spatial"):
            y = self.branches["spatial"](to_spatial_first(u, layout))
            outputs.append(from_spatial_first(y, layout))
        y = outputs[0]
        for extra in outputs[1:]:
            y = y + extra
        if self.gated:
            y = y * T.silu(self.gate_proj(x))
        return self.out_proj(y)


class DetailSpecificFeedForward(nn.Module):
    """Pointwise expand, depthwise 3x3x3 over (T, H, W), SiLU, pointwise contract."""

    def __init__(self, dim: int, ratio: int, rng):
        hidden = dim * ratio
        self.fc1 = nn.Linear(dim, hidden, rng)
        self.dw = nn.parameter(nn.trunc_normal(rng, (hidden, 3, 3, 3), math.sqrt(2.0 / 27)))
        self.dw_bias = nn.parameter(np.zeros(hidden))
        self.fc2 = nn.Linear(hidden, dim, rng)

    def forward(self, x: Tensor, layout: SequenceLayout) -> Tensor:
        b, L, _ = x.shape
        if L != layout.L:
            raise ShapeError(f"sequence length {L} does not match layout length {layout.L}")
        y = self.fc1(x)
        hidden = y.shape[-1]
        y = T.reshape(y, (b, layout.T, layout.H, layout.W, hidden))
        y = T.transpose(y, (0, 4, 1, 2, 3))
        y = T.depthwise_conv3d(y, self.dw, self.dw_bias)
        y = T.reshape(T.transpose(y, (0, 2, 3, 4, 1)), (b, L, hidden))
        return self.fc2(T.silu(y))


class MambaLayer(nn.Module):
    """h = h + ST-Mamba(LN(h)); h = h + DSF(LN(h))."""

    def __init__(self, dim: int, cfg: VivimConfig, rng):
        self.norm1 = nn.LayerNorm(dim)
        self.mamba = STMamba(dim, rng, cfg.expand, cfg.state, cfg.gated)
        self.norm2 = nn.LayerNorm(dim)
        self.dsf = DetailSpecificFeedForward(dim, cfg.dsf_ratio, rng)

    def forward(self, h: Tensor, layout: SequenceLayout, toggles: dict[str, bool]) -> Tensor:
        if h.shape[1] != layout.L:
            raise ShapeError(f"sequence length {h.shape[1]} does not match layout length {layout.L}")
        h = h + self.mamba(self.norm1(h), layout, toggles)
        return h + self.dsf(self.norm2(h), layout)


class Stage(nn.Module):
    def __init__(self, index: int, c_in: int, cfg: VivimConfig, rng):
        dim = cfg.channels[index]
        if index == 0:
            self.embed = OverlapPatchEmbed(c_in, dim, 7, 4, rng)
        else:
            self.embed = OverlapPatchEmbed(c_in, dim, 3, 2, rng)
        self.spatial = SpatialBlock(dim, cfg.heads[index], cfg.reductions[index], cfg.mlp_ratio, rng)
        self.layers = [MambaLayer(dim, cfg, rng) for _ in range(cfg.depths[index])]

    def forward(self, x: Tensor, toggles: dict[str, bool]) -> Tensor:
        """(B, T, C_prev, H, W) -> (B, T, C, H', W')."""
        y = self.embed(x)
        y = self.spatial(y)
        b, t, h, w, c = y.shape
        if any(toggles.values()) and self.layers:
            layout = SequenceLayout(t, h, w, c)
            seq = T.reshape(y, (b, layout.L, c))
            for layer in self.layers:
                seq = layer(seq, layout, toggles)
            y = T.reshape(seq, (b, t, h, w, c))
        return T.transpose(y, (0, 1, 4, 2, 3))


class Decoder(nn.Module):
    def __init__(self, channels: tuple[int, ...], dim: int, rng):
        self.proj = [nn.Linear(c, dim, rng) for c in channels]
        self.fuse = nn.Linear(dim * len(channels), dim, rng)
        self.head = nn.Linear(dim, 1, rng)

    def forward(self, pyramid: FeaturePyramid, out_size: tuple[int, int]) -> Tensor:
        if len(pyramid) != len(self.proj):
            raise ShapeError(f"decoder expects {len(self.proj)} levels, got {len(pyramid)}")
        b, t = pyramid[0].shape[:2]
        h1, w1 = pyramid[0].shape[-2:]
        levels = []
        for i, (feat, proj) in enumerate(zip(pyramid.features, self.proj)):
            fb, ft, c, h, w = feat.shape
            if (fb, ft) != (b, t) or (h1 // h, w1 // w) != (2 ** i, 2 ** i) or h * 2 ** i != h1:
                raise ShapeError(f"inconsistent pyramid shapes {pyramid.shapes}")
            y = proj(T.transpose(T.reshape(feat, (b * t, c, h, w)), (0, 2, 3, 1)))
            y = T.transpose(y, (0, 3, 1, 2))
            if i:
                y = T.upsample_bilinear(y, (h1, w1))
            levels.append(y)
        y = T.transpose(T.concat(levels, axis=1), (0, 2, 3, 1))
        y = T.silu(self.fuse(y))
        y = T.transpose(self.head(y), (0, 3, 1, 2))
        y = T.upsample_bilinear(y, out_size)
        return T.reshape(y, (b, t, 1) + tuple(out_size))


class VivimNet(nn.Module):
    def __init__(self, cfg: VivimConfig | None = None):
        from .boundary import BoundaryHead

        self.cfg = cfg or VivimConfig()
        rng = np.random.default_rng(self.cfg.seed)
        c_prev = self.cfg.in_channels
        self.stages = []
        for i in range(4):
            self.stages.append(Stage(i, c_prev, self.cfg, rng))
            c_prev = self.cfg.channels[i]
        self.decoder = Decoder(self.cfg.channels, self.cfg.decoder_dim, rng)
        self.boundary = BoundaryHead(self.cfg.channels[0], rng)

    def encode(self, clip: Tensor) -> FeaturePyramid:
        clip = _batched(clip)
        h, w = clip.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"frame size {h}x{w} must be divisible by 32")
        feats = []
        x = standardize_clip(clip)
        toggles = self.cfg.toggles
        for stage in self.stages:
            x = stage(x, toggles)
            feats.append(x)
        return FeaturePyramid(feats)

    def forward(self, clip: Tensor) -> tuple[Tensor, FeaturePyramid]:
        clip = _batched(clip)
        pyramid = self.encode(clip)
        logits = self.decoder(pyramid, clip.shape[-2:])
        return logits, pyramid


def standardize_clip(clip: Tensor, eps: float = 1e-6) -> Tensor:
    """Zero mean, unit variance per clip; removes global gain and offset."""
    axes = (1, 2, 3, 4)
    centred = clip - T.mean(clip, axis=axes, keepdims=True)
    var = T.mean(centred * centred, axis=axes, keepdims=True)
    return centred / T.sqrt(var + eps)


def _batched(clip) -> Tensor:
    clip = T.as_tensor(clip)
    if clip.ndim == 4:
        clip = T.reshape(clip, (1,) + clip.shape)
    if clip.ndim != 5:
        raise ShapeError(f"expected a clip (T, C, H, W) or batch (B, T, C, H, W), got {clip.shape}")
    return clip


def encoder_forward(clip, model: VivimNet) -> FeaturePyramid:
    return model.encode(clip)


def decoder_forward(pyramid: FeaturePyramid, model: VivimNet, out_size=None) -> Tensor:
    if out_size is None:
        h, w = pyramid[0].shape[-2:]
        out_size = (4 * h, 4 * w)
    return model.decoder(pyramid, tuple(out_size))


# -- losses ---------------------------------------------------------------

def _check_binary(gt: np.ndarray, what: str) -> None:
    if not np.all((gt == 0) | (gt == 1)):
        raise ValueError(f"{what} must be binary")


def bce_with_logits(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy, written as softplus(z) - y*z for stability."""
    target = T.as_tensor(target)
    return T.mean(T.softplus(logits) - logits * target)


def segmentation_loss(logits: Tensor, gt, eps: float = 1.0) -> Tensor:
    """Mean pixel-wise BCE plus soft IoU loss 1 - (I + eps) / (U + eps)."""
    logits = T.as_tensor(logits)
    gtd = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=logits.data.dtype)
    if gtd.shape != logits.shape:
        raise ShapeError(f"logits {logits.shape} and ground truth {gtd.shape} differ")
    _check_binary(gtd, "ground truth")
    g = T.Tensor(gtd)
    bce = bce_with_logits(logits, g)
    p = T.sigmoid(logits)
    inter = T.sum_(p * g)
    union = T.sum_(p) + float(gtd.sum()) - inter
    iou = 1.0 - (inter + eps) / (union + eps)
    return bce + iou
