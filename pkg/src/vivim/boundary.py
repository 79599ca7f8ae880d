"""Boundary-aware affine constraint: Sobel edges, boundary head, frozen affine
estimator and the patch-level affine loss."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .model import bce_with_logits
from .tensor import NonFiniteError, ShapeError, Tensor

log = logging.getLogger(__name__)

IDENTITY = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T
PATCH = 16
# translation errors are weighted up in pretraining; a pixel is only 2/P in normalised units
COEFF_WEIGHTS = np.array([[1.0, 1.0, 3.0], [1.0, 1.0, 3.0]])


@dataclass
class LossWeights:
    delta1: float = 1.00
    delta2: float = 0.01
    lambda1: float = 0.3
    lambda2: float = 0.3

    def __post_init__(self):
        for name in ("delta1", "delta2", "lambda1", "lambda2"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


@dataclass
class BoundaryPatchPair:
    pred_patch: Tensor
    gt_patch_t: np.ndarray
    gt_patch_1: np.ndarray
    index: int = 0


def sobel_edges(mask) -> np.ndarray:
    """Binary edge map of a binary mask (last two axes are H, W).

    Borders are replicated, so a mask and its complement give the same edges.
    """
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("sobel_edges expects a binary mask")
    lead = m.ndim - 2
    mp = np.pad(m, [(0, 0)] * lead + [(1, 1), (1, 1)], mode="edge")
    h, w = m.shape[-2:]
    gx = np.zeros_like(m)
    gy = np.zeros_like(m)
    for i in range(3):
        for j in range(3):
            window = mp[..., i:i + h, j:j + w]
            gx += SOBEL_X[i, j] * window
            gy += SOBEL_Y[i, j] * window
    return (np.sqrt(gx * gx + gy * gy) > 0).astype(np.float64)


class BoundaryHead(nn.Module):
    """Three 3x3 convolutions (C -> C/2 -> C/4 -> 1) and a x4 bilinear upsample."""

    def __init__(self, channels: int, rng):
        c2, c4 = max(1, channels // 2), max(1, channels // 4)
        self.channels = channels
        self.conv1 = nn.Conv2d(channels, c2, 3, rng, padding=1)
        self.conv2 = nn.Conv2d(c2, c4, 3, rng, padding=1)
        self.conv3 = nn.Conv2d(c4, 1, 3, rng, padding=1, std=0.02)

    def forward(self, features: Tensor) -> Tensor:
        """(..., C1, h, w) stage-1 features -> (..., 1, 4h, 4w) edge logits."""
        features = T.as_tensor(features)
        if features.ndim < 3 or features.shape[-3] != self.channels:
            raise ShapeError(f"boundary head expects stage-1 features with {self.channels} "
                             f"channels, got {features.shape}")
        lead = features.shape[:-3]
        c, h, w = features.shape[-3:]
        x = T.reshape(features, (-1, c, h, w))
        x = T.silu(self.conv1(x))
        x = T.silu(self.conv2(x))
        x = self.conv3(x)
        x = T.upsample_bilinear(x, (4 * h, 4 * w))
        return T.reshape(x, lead + (1, 4 * h, 4 * w))


def boundary_head(features: Tensor, head: BoundaryHead) -> Tensor:
    return head(features)


# -- affine estimator -----------------------------------------------------

class AffineEstimator(nn.Module):
    """Fully connected regressor from a concatenated patch pair to a 2x3 affine matrix.

    The estimate ``theta`` satisfies ``second(p) ~ first(theta @ [p, 1])`` with
    ``p`` in normalised patch coordinates ([-1, 1] across the patch).
    """

    def __init__(self, patch: int = PATCH, hidden: int = 512, seed: int = 0):
        rng = np.random.default_rng(seed)
        d_in = 2 * patch * patch
        self.patch = patch
        self.fc1 = nn.Linear(d_in, hidden, rng, std=math.sqrt(2.0 / d_in))
        self.fc2 = nn.Linear(hidden, hidden, rng, std=math.sqrt(2.0 / hidden))
        self.fc3 = nn.Linear(hidden, 6, rng, std=1e-3)
        self.frozen = False

    def freeze(self) -> "AffineEstimator":
        for p in self.parameters():
            p.requires_grad = False
        self.frozen = True
        return self

    def forward(self, first, second) -> Tensor:
        """Patches (n, P, P) each -> theta (n, 2, 3)."""
        first, second = T.as_tensor(first), T.as_tensor(second)
        n = first.shape[0]
        a, b = T.reshape(first, (n, -1)), T.reshape(second, (n, -1))
        x = T.concat([a, b - a], axis=1)
        x = T.silu(self.fc1(x))
        x = T.silu(self.fc2(x))
        out = self.fc3(x) + IDENTITY.reshape(-1)
        return T.reshape(out, (n, 2, 3))


def _pixel_centres(patch: int) -> np.ndarray:
    return (np.arange(patch) + 0.5) / patch * 2.0 - 1.0


def _curve_points(rng: np.random.Generator, spacing: float) -> np.ndarray:
    """Points along a random line segment or circular arc, normalised coordinates."""
    if rng.random() < 0.5:
        p0 = rng.uniform(-0.9, 0.9, size=2)
        angle = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(0.8, 2.0)
        direction = np.array([np.cos(angle), np.sin(angle)])
        s = np.arange(-length / 2, length / 2, spacing)
        return p0 + s[:, None] * direction
    centre = rng.uniform(-1.0, 1.0, size=2)
    radius = rng.uniform(0.3, 1.2)
    start = rng.uniform(0, 2 * np.pi)
    sweep = rng.uniform(np.pi / 2, 2 * np.pi)
    s = np.arange(0.0, sweep, spacing / radius)
    ang = start + s
    return centre + radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def rasterize(points: np.ndarray, patch: int, width_px: float = 1.0) -> np.ndarray:
    """Mark pixels whose centre lies within ``width_px`` pixels of any curve point."""
    img = np.zeros((patch, patch))
    if len(points) == 0:
        return img
    px = (points + 1.0) / 2.0 * patch - 0.5  # pixel-index coordinates (x, y)
    base = np.floor(px).astype(int)
    offs = np.arange(-1, 3)
    cx = base[:, 0, None, None] + offs[None, :, None]
    cy = base[:, 1, None, None] + offs[None, None, :]
    cx, cy = np.broadcast_arrays(cx, cy)
    dist = np.hypot(cx - px[:, 0, None, None], cy - px[:, 1, None, None])
    keep = (dist < width_px) & (cx >= 0) & (cx < patch) & (cy >= 0) & (cy < patch)
    img[cy[keep], cx[keep]] = 1.0
    return img


def random_affine(rng: np.random.Generator, patch: int = PATCH, max_shift_frac: float = 0.25,
                  max_rot_deg: float = 20.0, scale_range=(0.8, 1.25)) -> np.ndarray:
    shift_px = rng.uniform(-max_shift_frac * patch, max_shift_frac * patch, size=2)
    angle = np.deg2rad(rng.uniform(-max_rot_deg, max_rot_deg))
    scale = np.exp(rng.uniform(np.log(scale_range[0]), np.log(scale_range[1])))
    rot = scale * np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    return np.concatenate([rot, (shift_px * 2.0 / patch)[:, None]], axis=1)


def render_pair(points: np.ndarray, theta: np.ndarray, patch: int = PATCH) -> tuple[np.ndarray, np.ndarray]:
    """First patch shows the curve; second shows it as seen through ``theta``."""
    first = rasterize(points, patch)
    lin, shift = theta[:, :2], theta[:, 2]
    moved = (points - shift) @ np.linalg.inv(lin).T
    return first, rasterize(moved, patch)


def make_affine_dataset(rng: np.random.Generator, count: int, patch: int = PATCH,
                        identity_frac: float = 0.3, shift_frac: float = 0.2,
                        empty_frac: float = 0.05):
    """Edge-patch pairs: a mix of empty, identical, purely shifted and fully warped pairs.

    Patches are binary and returned as uint8.
    """
    firsts = np.zeros((count, patch, patch), dtype=np.uint8)
    seconds = np.zeros((count, patch, patch), dtype=np.uint8)
    thetas = np.tile(IDENTITY, (count, 1, 1))
    spacing = 0.25 * 2.0 / patch
    for i in range(count):
        r = rng.random()
        if r < empty_frac:
            continue
        points = np.concatenate([_curve_points(rng, spacing) for _ in range(rng.integers(1, 3))])
        if r < empty_frac + identity_frac:
            theta = IDENTITY
        elif r < empty_frac + identity_frac + shift_frac:
            theta = random_affine(rng, patch, max_rot_deg=0.0, scale_range=(1.0, 1.0))
        else:
            theta = random_affine(rng, patch)
        firsts[i], seconds[i] = render_pair(points, theta, patch)
        thetas[i] = theta
    return firsts, seconds, thetas


def pretrain_affine_estimator(seed: int = 0, steps: int = 12000, patch: int = PATCH,
                              hidden: int = 512, batch: int = 128, corpus: int = 160000,
                              lr: float = 1e-3) -> AffineEstimator:
    """Fit the estimator on synthetic warped edge pairs, then freeze it."""
    rng = np.random.default_rng(seed)
    est = AffineEstimator(patch, hidden, seed)
    firsts, seconds, thetas = make_affine_dataset(rng, corpus, patch)
    opt = nn.Adam(est.parameters(), lr=lr)
    for step in range(steps):
        idx = rng.integers(0, corpus, size=batch)
        pred = est(firsts[idx].astype(np.float64), seconds[idx].astype(np.float64))
        diff = (pred - thetas[idx]) * COEFF_WEIGHTS
        loss = T.mean(diff * diff)
        if not np.isfinite(loss.item()):
            raise NonFiniteError(f"affine pretraining diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.lr = lr * 0.5 * (1 + math.cos(math.pi * step / steps))
        opt.step()
        if step % 500 == 0:
            log.info("affine pretrain step %d loss %.5f", step, loss.item())
    return est.freeze()


def heldout_pair(rng: np.random.Generator, theta: np.ndarray, patch: int = PATCH):
    """A curve pair related by ``theta`` with edges visible in both patches."""
    spacing = 0.25 * 2.0 / patch
    while True:
        points = np.concatenate([_curve_points(rng, spacing) for _ in range(rng.integers(1, 3))])
        first, second = render_pair(points, theta, patch)
        if first.sum() >= 4 and second.sum() >= 4:
            return first, second


def estimator_accuracy(est: AffineEstimator, seed: int = 10_000, count: int = 200,
                       shift_px=(2.0, 0.0)) -> tuple[float, float]:
    """Held-out checks: fraction of identical pairs with ||theta - I||_F < 0.1 and
    fraction of pure ``shift_px`` translations recovered within one pixel."""
    rng = np.random.default_rng(seed)
    patch = est.patch
    shift = IDENTITY.copy()
    shift[:, 2] = np.asarray(shift_px) * 2.0 / patch
    ident = [heldout_pair(rng, IDENTITY, patch) for _ in range(count)]
    moved = [heldout_pair(rng, shift, patch) for _ in range(count)]
    with T.no_grad():
        th_i = est(np.stack([a for a, _ in ident]), np.stack([b for _, b in ident])).data
        th_s = est(np.stack([a for a, _ in moved]), np.stack([b for _, b in moved])).data
    ok_i = np.linalg.norm((th_i - IDENTITY).reshape(count, -1), axis=1) < 0.1
    rec_px = th_s[:, :, 2] * patch / 2.0
    ok_s = np.all(np.abs(rec_px - np.asarray(shift_px)) <= 1.0, axis=1)
    return float(ok_i.mean()), float(ok_s.mean())


# -- losses ---------------------------------------------------------------

def frobenius_to_identity(theta: Tensor) -> Tensor:
    """||theta_i - I||_F for a batch (n, 2, 3)."""
    d = T.as_tensor(theta) - IDENTITY
    return T.sqrt(T.sum_(d * d, axis=(1, 2)) + 1e-30)


def affine_terms(pred, gt_t, gt_1, estimator, w: LossWeights) -> Tensor:
    """Batched affine loss over n patch triples, each (n, P, P)."""
    if not getattr(estimator, "frozen", False):
        raise RuntimeError("the affine estimator must be frozen before use in the loss")
    pred = T.as_tensor(pred)
    if pred.shape[0] == 0:
        raise ValueError("affine constraint needs at least one patch")
    term_t = frobenius_to_identity(estimator(pred, gt_t))
    term_1 = frobenius_to_identity(estimator(pred, gt_1))
    return T.mean(term_t * w.delta1 - term_1 * w.delta2)


def affine_constraint_loss(pairs: list[BoundaryPatchPair], estimator, w: LossWeights | None = None) -> Tensor:
    if not pairs:
        raise ValueError("affine constraint needs at least one patch")
    w = w or LossWeights()
    pred = T.stack([T.as_tensor(p.pred_patch) for p in pairs])
    gt_t = np.stack([np.asarray(p.gt_patch_t, dtype=np.float64) for p in pairs])
    gt_1 = np.stack([np.asarray(p.gt_patch_1, dtype=np.float64) for p in pairs])
    return affine_terms(pred, gt_t, gt_1, estimator, w)


def to_patches(x, patch: int = PATCH):
    """(n, H, W) -> (n * H/P * W/P, P, P), non-overlapping tiles in row-major order."""
    x = T.as_tensor(x)
    n, h, w = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"{h}x{w} frame is not tiled by {patch}x{patch} patches")
    y = T.reshape(x, (n, h // patch, patch, w // patch, patch))
    y = T.transpose(y, (0, 1, 3, 2, 4))
    return T.reshape(y, (-1, patch, patch))


def patch_pairs(edge_prob: Tensor, edges_t: np.ndarray, edges_1: np.ndarray,
                patch: int = PATCH) -> list[BoundaryPatchPair]:
    """Tile a single target frame's edge probability and the two ground-truth edge maps."""
    pred = to_patches(T.reshape(edge_prob, (1,) + edge_prob.shape[-2:]), patch)
    gt_t = to_patches(edges_t.reshape((1,) + edges_t.shape[-2:]), patch).data
    gt_1 = to_patches(edges_1.reshape((1,) + edges_1.shape[-2:]), patch).data
    return [BoundaryPatchPair(pred[i], gt_t[i], gt_1[i], i + 1) for i in range(pred.shape[0])]


def combine_losses(seg, affine, bce, w: LossWeights) -> Tensor:
    """Weighted sum; a zero weight drops its term so the result equals ``seg`` exactly."""
    seg = T.as_tensor(seg)
    terms = [(T.as_tensor(affine), w.lambda1), (T.as_tensor(bce), w.lambda2)]
    for term in [seg] + [t for t, _ in terms]:
        if not np.all(np.isfinite(term.data)):
            raise NonFiniteError("loss component is not finite")
    total = seg
    for term, weight in terms:
        if weight:
            total = total + term * weight
    return total


def total_loss(seg, affine, boundary_logits, gt_edges, w: LossWeights | None = None) -> Tensor:
    """L_seg + lambda1 * L_affine + lambda2 * mean BCE(boundary logits, ground-truth edges)."""
    w = w or LossWeights()
    bce = bce_with_logits(T.as_tensor(boundary_logits), gt_edges)
    return combine_losses(seg, affine, bce, w)
