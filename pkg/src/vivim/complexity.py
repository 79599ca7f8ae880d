"""Analytic FLOP counts for global self-attention and the SSM, and an empirical
scaling benchmark of the two core operators."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import nn
from . import tensor as T
from .scan_orders import SequenceLayout
from .ssm import EXPANSION, STATE_SIZE
from .tensor import MemoryExhausted

log = logging.getLogger(__name__)

KINDS = ("st_mamba", "full_attention")
CSV_COLUMNS = ("kind", "T", "H", "W", "D", "wall_ms", "peak_bytes", "flops", "status")
DEFAULT_CAP = 2 * 1024 ** 3


def flops_attention(tm: int, d: int) -> int:
    """4 (TM) D^2 + 2 (TM)^2 D."""
    if tm < 0 or d < 0:
        raise ValueError("token count and width must be non-negative")
    return 4 * tm * d * d + 2 * tm * tm * d


def flops_ssm(tm: int, d: int, n: int = STATE_SIZE, expand: int = EXPANSION) -> int:
    """4 (TM)(2D) N + (TM)(2D) N^2 with the expansion ratio 2."""
    if tm < 0 or d < 0 or n < 0:
        raise ValueError("token count, width and state size must be non-negative")
    return 4 * tm * (expand * d) * n + tm * (expand * d) * n * n


@dataclass
class ComplexityQuote:
    tokens: int
    channels: int
    state: int
    flops_attention: int
    flops_ssm: int

    @classmethod
    def of(cls, tokens: int, channels: int, state: int = STATE_SIZE) -> "ComplexityQuote":
        return cls(tokens, channels, state, flops_attention(tokens, channels),
                   flops_ssm(tokens, channels, state))


def crossover_tokens(d: int, n: int = STATE_SIZE, limit: int = 1 << 40) -> int:
    """Smallest token count for which the SSM is strictly cheaper (binary search)."""
    lo, hi = 1, limit
    if flops_ssm(hi, d, n) >= flops_attention(hi, d):
        raise ValueError("no crossover below the search limit")
    while lo < hi:
        mid = (lo + hi) // 2
        if flops_ssm(mid, d, n) < flops_attention(mid, d):
            hi = mid
        else:
            lo = mid + 1
    return lo


def loglog_slope(x, y) -> float:
    """Least-squares slope of log(y) against log(x)."""
    x = np.log(np.asarray(x, dtype=np.float64))
    y = np.log(np.asarray(y, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


# -- core operators -------------------------------------------------------

class FullAttention(nn.Module):
    """Single-head global self-attention over all T*H*W tokens."""

    def __init__(self, dim: int, rng):
        self.q = nn.Linear(dim, dim, rng)
        self.k = nn.Linear(dim, dim, rng)
        self.v = nn.Linear(dim, dim, rng)
        self.proj = nn.Linear(dim, dim, rng)
        self.scale = 1.0 / math.sqrt(dim)

    def forward(self, x):
        q, k, v = self.q(x), self.k(x), self.v(x)
        attn = T.softmax(T.matmul(q, T.transpose(k, (0, 2, 1))) * self.scale)
        return self.proj(T.matmul(attn, v))


@dataclass
class BenchRow:
    kind: str
    T: int
    H: int
    W: int
    D: int
    wall_ms: float
    peak_bytes: int
    flops: int
    status: str


def _build(kind: str, dim: int, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "full_attention":
        return FullAttention(dim, rng)
    if kind == "st_mamba":
        from .model import STMamba
        return STMamba(dim, rng)
    raise ValueError(f"unknown operator kind {kind!r}; expected one of {KINDS}")


def scaling_benchmark(kind: str, t_values, h: int = 16, w: int = 16, d: int = 32,
                      cap_bytes: int | None = DEFAULT_CAP, repeats: int = 5,
                      dtype=np.float32, seed: int = 0) -> tuple[list[BenchRow], float]:
    """Time and measure forward passes for each clip length; returns rows and the
    log-log slope of peak bytes against T*H*W over the non-exhausted points."""
    t_values = list(t_values)
    if len(t_values) < 4:
        raise ValueError("the scaling benchmark needs at least four clip lengths")
    rows: list[BenchRow] = []
    with T.precision(dtype), T.no_grad():
        module = _build(kind, d, seed)
        toggles = {"t_forward": True, "t_backward": True, "spatial": True}
        for t in t_values:
            tokens = t * h * w
            flops = flops_attention(tokens, d) if kind == "full_attention" else flops_ssm(tokens, d)
            x_data = np.random.default_rng(seed + t).normal(size=(1, tokens, d)).astype(dtype)
            layout = SequenceLayout(t, h, w, d)

            def run():
                x = T.Tensor(x_data)
                if kind == "full_attention":
                    return module(x)
                return module(x, layout, toggles)

            try:
                with T.memory.tracking(cap_bytes) as counter:
                    run()
                    peak = counter.peak
                times = []
                for _ in range(repeats):
                    start = time.perf_counter()
                    run()
                    times.append((time.perf_counter() - start) * 1e3)
                rows.append(BenchRow(kind, t, h, w, d, float(np.median(times)), int(peak), flops, "ok"))
            except MemoryExhausted as exc:
                log.info("%s exhausted at T=%d: %s", kind, t, exc)
                rows.append(BenchRow(kind, t, h, w, d, float("nan"), int(T.memory.peak), flops,
                                     "exhausted"))
    ok = [r for r in rows if r.status == "ok"]
    slope = loglog_slope([r.T * h * w for r in ok], [r.peak_bytes for r in ok]) \
        if len(ok) >= 2 else float("nan")
    return rows, slope


def doubling_range(t_min: int, t_max: int) -> list[int]:
    out, t = [], t_min
    while t <= t_max:
        out.append(t)
        t *= 2
    return out


def write_csv(rows: list[BenchRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in rows:
            rec = asdict(row)
            rec["wall_ms"] = "" if math.isnan(rec["wall_ms"]) else f"{rec['wall_ms']:.3f}"
            writer.writerow(rec)


def read_csv(path) -> list[BenchRow]:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(BenchRow(rec["kind"], int(rec["T"]), int(rec["H"]), int(rec["W"]),
                                 int(rec["D"]), float(rec["wall_ms"]) if rec["wall_ms"] else float("nan"),
                                 int(rec["peak_bytes"]), int(rec["flops"]), rec["status"]))
        return rows
