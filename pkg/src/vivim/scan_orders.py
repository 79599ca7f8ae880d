"""Orderings of a (T, H, W) token grid as 1-D scan sequences.

Temporal-first: p = t*(H*W) + h*W + w  (frames one after another).
Spatial-first:  p = (h*W + w)*T + t    (all frames of a pixel are adjacent).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class SequenceLayout:
    T: int
    H: int
    W: int
    C: int

    def __post_init__(self):
        for name in ("T", "H", "W", "C"):
            if getattr(self, name) < 1:
                raise ShapeError(f"layout extent {name} must be positive")

    @property
    def M(self) -> int:
        return self.H * self.W

    @property
    def L(self) -> int:
        return self.T * self.M

    def temporal_position(self, t: int, h: int, w: int) -> int:
        return t * self.M + h * self.W + w

    def spatial_position(self, t: int, h: int, w: int) -> int:
        return (h * self.W + w) * self.T + t

    def temporal_to_spatial(self) -> np.ndarray:
        """perm[p] = spatial position of the token at temporal-first position p."""
        p = np.arange(self.L)
        return (p % self.M) * self.T + p // self.M

    @classmethod
    def of(cls, x: Tensor) -> "SequenceLayout":
        t, c, h, w = x.shape[-4:]
        return cls(t, h, w, c)


def _check_grid(x: Tensor) -> None:
    if x.ndim < 4:
        raise ShapeError(f"expected (..., T, C, H, W), got {x.shape}")


def temporal_first_flatten(x) -> Tensor:
    """(..., T, C, H, W) -> (..., C, T*H*W) in frame-major, row-major order."""
    x = T.as_tensor(x)
    _check_grid(x)
    lead = x.shape[:-4]
    t, c, h, w = x.shape[-4:]
    n = len(lead)
    y = T.transpose(x, tuple(range(n)) + (n + 1, n, n + 2, n + 3))
    return T.reshape(y, lead + (c, t * h * w))


def temporal_first_unflatten(seq, layout: SequenceLayout) -> Tensor:
    seq = T.as_tensor(seq)
    lead = seq.shape[:-2]
    if seq.shape[-2:] != (layout.C, layout.L):
        raise ShapeError(f"sequence {seq.shape} does not match layout {layout}")
    n = len(lead)
    y = T.reshape(seq, lead + (layout.C, layout.T, layout.H, layout.W))
    return T.transpose(y, tuple(range(n)) + (n + 1, n, n + 2, n + 3))


def spatial_first_flatten(x) -> Tensor:
    """(..., T, C, H, W) -> (..., C, H*W*T) in pixel-major order."""
    x = T.as_tensor(x)
    _check_grid(x)
    lead = x.shape[:-4]
    t, c, h, w = x.shape[-4:]
    n = len(lead)
    y = T.transpose(x, tuple(range(n)) + (n + 1, n + 2, n + 3, n))
    return T.reshape(y, lead + (c, h * w * t))


def spatial_first_unflatten(seq, layout: SequenceLayout) -> Tensor:
    seq = T.as_tensor(seq)
    lead = seq.shape[:-2]
    if seq.shape[-2:] != (layout.C, layout.L):
        raise ShapeError(f"sequence {seq.shape} does not match layout {layout}")
    n = len(lead)
    y = T.reshape(seq, lead + (layout.C, layout.H, layout.W, layout.T))
    return T.transpose(y, tuple(range(n)) + (n + 3, n, n + 1, n + 2))


def reverse_sequence(x, axis: int = -1) -> Tensor:
    return T.flip(T.as_tensor(x), axis)


# Token-major helpers used inside the network, where a sequence is (batch, L, C)
# in temporal-first order.

def to_spatial_first(tokens: Tensor, layout: SequenceLayout) -> Tensor:
    b = tokens.shape[0]
    y = T.reshape(tokens, (b, layout.T, layout.M, tokens.shape[-1]))
    y = T.transpose(y, (0, 2, 1, 3))
    return T.reshape(y, (b, layout.L, tokens.shape[-1]))


def from_spatial_first(tokens: Tensor, layout: SequenceLayout) -> Tensor:
    b = tokens.shape[0]
    y = T.reshape(tokens, (b, layout.M, layout.T, tokens.shape[-1]))
    y = T.transpose(y, (0, 2, 1, 3))
    return T.reshape(y, (b, layout.L, tokens.shape[-1]))
