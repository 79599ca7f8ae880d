"""Diagonal state space models: ZOH discretization, recurrent and convolutional
evaluation, and the input-dependent (selective) scan."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import nn
from . import tensor as T
from .tensor import NonFiniteError, ShapeError, Tensor

STATE_SIZE = 16
EXPANSION = 2


@dataclass
class SsmParams:
    """Continuous diagonal SSM, one row per channel.

    ``A``, ``B`` and ``C`` are (channels, N); ``delta`` is (channels,).
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.B = np.atleast_2d(np.asarray(self.B, dtype=np.float64))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        self.delta = np.atleast_1d(np.asarray(self.delta, dtype=np.float64))

    @property
    def N(self) -> int:
        return self.A.shape[-1]


@dataclass
class DiscretizedSsm:
    a_bar: np.ndarray
    b_bar: np.ndarray

    @property
    def selective(self) -> bool:
        # a leading time axis means per-timestep parameters
        return self.a_bar.ndim == 3


def discretize_zoh(p: SsmParams) -> DiscretizedSsm:
    A, B, delta = p.A, p.B, p.delta
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B)) and np.all(np.isfinite(delta))):
        raise NonFiniteError("SSM parameters must be finite")
    if np.any(A >= 0):
        raise ValueError("diagonal of A must be strictly negative")
    if np.any(delta < 0):
        raise ValueError("timescale must be non-negative")
    dA = delta[..., None] * A
    a_bar = np.exp(dA)
    # (exp(dA) - 1) / A == delta * expm1(dA) / dA, which tends to delta as dA -> 0
    small = np.abs(dA) < 1e-8
    ratio = np.where(small, 1.0 + dA / 2.0, np.expm1(dA) / np.where(small, 1.0, dA))
    b_bar = delta[..., None] * ratio * B
    return DiscretizedSsm(a_bar=a_bar, b_bar=b_bar)


def _channels_last(x) -> tuple[Tensor, bool]:
    x = T.as_tensor(x)
    if x.ndim == 1:
        return T.reshape(x, (x.shape[0], 1)), True
    return x, False


def ssm_recurrent(d: DiscretizedSsm, C, x) -> Tensor:
    """Run ``h_t = a_bar*h_{t-1} + b_bar*x_t, y_t = C.h_t`` from a zero state.

    ``x`` is (M,) for a single channel or (M, channels). Differentiable in
    ``x`` and ``C`` (and in ``a_bar``/``b_bar`` when they are tensors).
    """
    x, squeeze = _channels_last(x)
    M, ch = x.shape
    if M == 0:
        raise ShapeError("ssm_recurrent: empty sequence")
    a_bar = T.as_tensor(d.a_bar)
    b_bar = T.as_tensor(d.b_bar)
    C = T.as_tensor(C)
    if C.ndim == 1:
        C = T.reshape(C, (1, -1))
    if a_bar.ndim == 1:
        a_bar, b_bar = T.reshape(a_bar, (1, -1)), T.reshape(b_bar, (1, -1))
    N = a_bar.shape[-1]
    ones = T.Tensor(np.ones((M, ch, N)))
    a_seq = ones * a_bar
    b_seq = T.reshape(x, (M, ch, 1)) * b_bar
    h = T.linear_scan(a_seq, b_seq, axis=0)
    y = T.sum_(h * C, axis=-1)
    return T.reshape(y, (M,)) if squeeze else y


def ssm_kernel(d: DiscretizedSsm, C, length: int) -> np.ndarray:
    """Convolution kernel ``K_k = C a_bar^k b_bar`` for k < length, shape (channels, length)."""
    if d.selective:
        raise ValueError("the convolutional form needs time-invariant parameters")
    a_bar = np.atleast_2d(d.a_bar)
    b_bar = np.atleast_2d(d.b_bar)
    C = np.atleast_2d(C.data if isinstance(C, Tensor) else C)
    powers = a_bar[:, None, :] ** np.arange(length)[None, :, None]
    return np.sum(C[:, None, :] * powers * b_bar[:, None, :], axis=-1)


def ssm_conv(d: DiscretizedSsm, C, x) -> np.ndarray:
    """Causal convolution of ``x`` with the SSM kernel; same layout rules as ``ssm_recurrent``."""
    if d.selective:
        raise ValueError("the convolutional form needs time-invariant parameters")
    xd = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    squeeze = xd.ndim == 1
    if squeeze:
        xd = xd[:, None]
    M, ch = xd.shape
    if M == 0:
        raise ShapeError("ssm_conv: empty sequence")
    K = ssm_kernel(d, C, M)
    K = np.broadcast_to(K, (ch, M))
    y = np.zeros((M, ch))
    for c in range(ch):
        y[:, c] = np.convolve(xd[:, c], K[c])[:M]
    return y[:, 0] if squeeze else y


# -- fused selective scan -------------------------------------------------

@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _selective_forward(u, delta, A, B, C, hs, store):
    nb, L, E = u.shape
    N = A.shape[1]
    y = np.zeros((nb, L, E), dtype=u.dtype)
    h = np.zeros((E, N), dtype=u.dtype)
    for b in range(nb):
        h[:, :] = 0.0
        for t in range(L):
            for e in range(E):
                d = delta[b, t, e]
                ue = u[b, t, e]
                acc = 0.0
                for n in range(N):
                    an = A[e, n]
                    a = math.exp(d * an)
                    h[e, n] = a * h[e, n] + (a - 1.0) / an * B[b, t, n] * ue
                    acc += C[b, t, n] * h[e, n]
                    if store:
                        hs[b, t, e, n] = h[e, n]
                y[b, t, e] = acc
    return y


@numba.njit(cache=True, fastmath=True, error_model="numpy")
def _selective_backward(u, delta, A, B, C, hs, gy):
    nb, L, E = u.shape
    N = A.shape[1]
    gu = np.zeros_like(u)
    gd = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gh = np.zeros((E, N), dtype=u.dtype)
    for b in range(nb):
        gh[:, :] = 0.0
        for t in range(L - 1, -1, -1):
            for e in range(E):
                d = delta[b, t, e]
                ue = u[b, t, e]
                g = gy[b, t, e]
                acc_u = 0.0
                acc_d = 0.0
                for n in range(N):
                    an = A[e, n]
                    a = math.exp(d * an)
                    bb0 = (a - 1.0) / an
                    h = hs[b, t, e, n]
                    hprev = hs[b, t - 1, e, n] if t > 0 else 0.0
                    gC[b, t, n] += g * h
                    ght = gh[e, n] + g * C[b, t, n]
                    ga = ght * hprev
                    gbb0 = ght * B[b, t, n] * ue
                    gB[b, t, n] += ght * bb0 * ue
                    acc_u += ght * bb0 * B[b, t, n]
                    acc_d += ga * an * a + gbb0 * a
                    gA[e, n] += ga * d * a + gbb0 * (d * a * an - (a - 1.0)) / (an * an)
                    gh[e, n] = ght * a
                gu[b, t, e] = acc_u
                gd[b, t, e] = acc_d
    return gu, gd, gA, gB, gC


def selective_scan_core(u, delta, A, B, C) -> Tensor:
    """Selective SSM recurrence with per-timestep ZOH discretization.

    Shapes: ``u``/``delta`` (batch, L, E), ``A`` (E, N), ``B``/``C`` (batch, L, N).
    Returns ``y`` (batch, L, E) with ``y_t = C_t . h_t``.
    """
    u, delta, A, B, C = (T.as_tensor(v) for v in (u, delta, A, B, C))
    nb, L, E = u.shape
    if L < 1:
        raise ShapeError("selective scan needs at least one timestep")
    if delta.shape != u.shape or A.shape[0] != E or B.shape != (nb, L, A.shape[1]) \
            or C.shape != B.shape:
        raise ShapeError(f"selective scan shapes disagree: u {u.shape}, delta {delta.shape}, "
                         f"A {A.shape}, B {B.shape}, C {C.shape}")
    need_grad = T.is_grad_enabled() and any(v.requires_grad for v in (u, delta, A, B, C))
    if need_grad:
        T._reserve_like((nb, L, E, A.shape[1]))
        hs = T.memory.track(np.empty((nb, L, E, A.shape[1]), dtype=u.data.dtype))
    else:
        hs = np.empty((1, 1, 1, 1), dtype=u.data.dtype)
    T._reserve_like((nb, L, E))
    y = _selective_forward(u.data, delta.data, A.data, B.data, C.data, hs, need_grad)
    if not np.all(np.isfinite(y)):
        raise NonFiniteError("selective scan produced non-finite values")

    def backward_fn(g):
        return _selective_backward(u.data, delta.data, A.data, B.data, C.data, hs,
                                   np.ascontiguousarray(g))

    return T._make(y, (u, delta, A, B, C), backward_fn, "selective_scan")


def selective_scan_reference(u, delta, A, B, C) -> Tensor:
    """Same recurrence as ``selective_scan_core`` composed from engine primitives."""
    u, delta, A, B, C = (T.as_tensor(v) for v in (u, delta, A, B, C))
    nb, L, E = u.shape
    N = A.shape[1]
    dA = T.reshape(delta, (nb, L, E, 1)) * A
    a_bar = T.exp(dA)
    b0 = (a_bar - 1.0) / A
    drive = b0 * T.reshape(B, (nb, L, 1, N)) * T.reshape(u, (nb, L, E, 1))
    h = T.linear_scan(a_bar, drive, axis=1)
    return T.sum_(h * T.reshape(C, (nb, L, 1, N)), axis=-1)


# -- selective scan block -------------------------------------------------

def _dt_bias(rng: np.random.Generator, size: int, dt_min=1e-3, dt_max=1e-1) -> np.ndarray:
    dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), size=size))
    # inverse of softplus so that softplus(bias) == dt
    return dt + np.log(-np.expm1(-dt))


class SsmBranch(nn.Module):
    """Per-direction selective parameters: Δ(x), B(x), C(x), A and the skip D."""

    def __init__(self, d_inner: int, rng: np.random.Generator, state: int = STATE_SIZE,
                 dt_rank: int | None = None):
        dt_rank = dt_rank or max(1, math.ceil(d_inner / (EXPANSION * 16)))
        self.x_dt = nn.parameter(nn.trunc_normal(rng, (d_inner, dt_rank), 0.02))
        self.dt_proj = nn.parameter(rng.uniform(-dt_rank ** -0.5, dt_rank ** -0.5,
                                                size=(dt_rank, d_inner)))
        self.dt_bias = nn.parameter(_dt_bias(rng, d_inner))
        self.x_B = nn.parameter(nn.trunc_normal(rng, (d_inner, state), 0.02))
        self.x_C = nn.parameter(nn.trunc_normal(rng, (d_inner, state), 0.02))
        self.B_bias = nn.parameter(np.zeros(state))
        self.C_bias = nn.parameter(np.zeros(state))
        self.A_log = nn.parameter(np.log(np.tile(np.arange(1, state + 1, dtype=float), (d_inner, 1))))
        self.D = nn.parameter(np.ones(d_inner))
        self.use_skip = True

    @property
    def A(self) -> Tensor:
        return T.neg(T.exp(self.A_log))

    def forward(self, u: Tensor) -> Tensor:
        """``u`` is (batch, L, E); returns the SSM output of the same shape."""
        delta = T.softplus(T.linear(T.linear(u, self.x_dt), self.dt_proj, self.dt_bias))
        Bt = T.linear(u, self.x_B, self.B_bias)
        Ct = T.linear(u, self.x_C, self.C_bias)
        y = selective_scan_core(u, delta, self.A, Bt, Ct)
        if self.use_skip:
            y = y + u * self.D
        return y


class SelectiveScan(nn.Module):
    """Single-direction selective SSM block.

    ``x`` (L, D) or (batch, L, D) is expanded to E*D channels, scanned, gated
    by SiLU of a second projection and projected back to D channels.
    """

    def __init__(self, d_model: int, rng: np.random.Generator, expand: int = EXPANSION,
                 state: int = STATE_SIZE, gated: bool = True):
        d_inner = expand * d_model
        self.in_proj = nn.Linear(d_model, d_inner, rng)
        self.gate_proj = nn.Linear(d_model, d_inner, rng)
        self.branch = SsmBranch(d_inner, rng, state)
        self.out_proj = nn.Linear(d_inner, d_model, rng)
        self.gated = gated

    def forward(self, x: Tensor, reverse: bool = False) -> Tensor:
        x = T.as_tensor(x)
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        if x.shape[1] < 1:
            raise ShapeError("selective scan needs at least one timestep")
        u = self.in_proj(x)
        if reverse:
            y = T.flip(self.branch(T.flip(u, 1)), 1)
        else:
            y = self.branch(u)
        if self.gated:
            y = y * T.silu(self.gate_proj(x))
        out = self.out_proj(y)
        return T.reshape(out, out.shape[1:]) if squeeze else out
