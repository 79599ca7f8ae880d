"""Synthetic ultrasound-like clips: low-contrast soft ellipses under speckle,
drifting smoothly from frame to frame. Stored on disk as binary PGM (P5)."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AREA_RANGE = (0.02, 0.30)


@dataclass
class VideoClip:
    frames: np.ndarray  # (T, 3, H, W) in [0, 1]
    masks: np.ndarray   # (T, H, W) in {0, 1}
    clip_id: int
    seed: int
    geometry: np.ndarray | None = None  # (ellipses, T, 5): cx, cy, a, b, angle in pixels

    def __post_init__(self):
        if self.frames.shape[0] != self.masks.shape[0]:
            raise ValueError("frame and mask counts differ")
        if not np.all((self.masks == 0) | (self.masks == 1)):
            raise ValueError("masks must be binary")

    @property
    def T(self) -> int:
        return self.frames.shape[0]


def _ellipse_field(xx, yy, cx, cy, a, b, angle):
    """Normalised radius r (r <= 1 inside) and an approximate signed distance in pixels."""
    c, s = np.cos(angle), np.sin(angle)
    dx, dy = xx - cx, yy - cy
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    r = np.sqrt(u * u + v * v)
    return r, (r - 1.0) * min(a, b)


def _half_extent(a, b, angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.sqrt((a * c) ** 2 + (b * s) ** 2), np.sqrt((a * s) ** 2 + (b * c) ** 2)


def _smooth(field: np.ndarray, passes: int = 1) -> np.ndarray:
    for _ in range(passes):
        p = np.pad(field, 1, mode="reflect")
        field = sum(p[i:i + field.shape[0], j:j + field.shape[1]] for i in range(3) for j in range(3)) / 9.0
    return field


def _sample_tracks(rng, T, H, W):
    n = int(rng.integers(1, 3))
    target = rng.uniform(0.04, 0.22) * H * W
    tracks = []
    for k in range(n):
        share = target / n
        ratio = rng.uniform(0.6, 1.0)
        a = np.sqrt(share / (np.pi * ratio))
        b = a * ratio
        state = np.array([rng.uniform(0.25, 0.75) * W, rng.uniform(0.25, 0.75) * H, a, b,
                          rng.uniform(0, np.pi)])
        vel = rng.normal(0.0, 0.6, size=2)
        frames = []
        for _ in range(T):
            frames.append(state.copy())
            vel = 0.7 * vel + rng.normal(0.0, 0.5, size=2)
            state[:2] += vel
            state[2:4] *= np.exp(rng.normal(0.0, 0.02, size=2))
            state[4] += rng.normal(0.0, 0.03)
        tracks.append(frames)
    return tracks


def _valid(tracks, masks, H, W) -> bool:
    for frames in tracks:
        for cx, cy, a, b, ang in frames:
            hx, hy = _half_extent(a, b, ang)
            if cx - hx < 1 or cx + hx > W - 2 or cy - hy < 1 or cy + hy > H - 2:
                return False
    area = masks.reshape(masks.shape[0], -1).mean(axis=1)
    return bool(np.all(area >= AREA_RANGE[0]) and np.all(area <= AREA_RANGE[1]))


def generate_clip(seed: int, T: int = 5, H: int = 64, W: int = 64, difficulty: float = 0.5,
                  clip_id: int | None = None) -> VideoClip:
    """Render one clip; fully determined by ``seed`` (invalid geometry is re-drawn)."""
    if T < 1:
        raise ValueError("a clip needs at least one frame")
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    for attempt in range(1000):
        rng = np.random.default_rng([seed, attempt])
        tracks = _sample_tracks(rng, T, H, W)
        masks = np.zeros((T, H, W))
        soft = np.zeros((T, H, W))
        for frames in tracks:
            for t, (cx, cy, a, b, ang) in enumerate(frames):
                r, dist = _ellipse_field(xx, yy, cx, cy, a, b, ang)
                masks[t] = np.maximum(masks[t], (r <= 1.0).astype(np.float64))
                soft[t] = np.maximum(soft[t], 1.0 / (1.0 + np.exp(dist / 1.2)))
        if _valid(tracks, masks, H, W):
            break
    else:
        raise RuntimeError(f"could not sample valid geometry for seed {seed}")
    contrast = 0.4 * (1.0 - difficulty) + 0.08
    background = 0.45 + 0.08 * _smooth(rng.normal(size=(H, W)), 3) * 3.0
    sign = -1.0 if rng.random() < 0.7 else 1.0  # lesions are mostly hypoechoic
    shape_k = 12.0 - 8.0 * difficulty
    frames = np.empty((T, 3, H, W))
    for t in range(T):
        clean = background + sign * contrast * soft[t]
        speckle = _smooth(rng.gamma(shape_k, 1.0 / shape_k, size=(H, W)))
        img = np.clip(clean * speckle + rng.normal(0.0, 0.02, size=(H, W)), 0.0, 1.0)
        frames[t] = img
    return VideoClip(frames, masks, seed if clip_id is None else clip_id, seed, np.array(tracks))


# -- seed pools -----------------------------------------------------------

def train_seeds(count: int, offset: int = 0) -> list[int]:
    """Training clips use even seeds."""
    return [2 * (offset + i) for i in range(count)]


def eval_seeds(count: int, offset: int = 0) -> list[int]:
    """Evaluation clips use odd seeds."""
    return [2 * (offset + i) + 1 for i in range(count)]


def is_train_seed(seed: int) -> bool:
    return seed % 2 == 0


def parse_seed_range(text: str) -> list[int]:
    """'A..B' or 'A..B:step', inclusive."""
    m = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*(?::\s*(\d+))?\s*", text)
    if not m:
        raise ValueError(f"seed range must look like A..B or A..B:step, got {text!r}")
    a, b = int(m.group(1)), int(m.group(2))
    step = int(m.group(3) or 1)
    if b < a or step < 1:
        raise ValueError(f"empty seed range {text!r}")
    return list(range(a, b + 1, step))


# -- PGM storage ----------------------------------------------------------

def write_pgm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Returns uint8 (H, W)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    pos += 1
    data = np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def save_clip(clip: VideoClip, root) -> Path:
    d = Path(root) / f"clip_{clip.clip_id}"
    d.mkdir(parents=True, exist_ok=True)
    for t in range(clip.T):
        write_pgm(d / f"frame_{t}.pgm", clip.frames[t, 0])
        write_pgm(d / f"mask_{t}.pgm", (clip.masks[t] * 255).astype(np.uint8))
    return d


def load_clip(directory) -> VideoClip:
    d = Path(directory)
    m = re.fullmatch(r"clip_(\d+)", d.name)
    if not m:
        raise ValueError(f"{d} is not a clip directory")
    n = len([f for f in os.listdir(d) if f.startswith("frame_")])
    frames = np.stack([read_pgm(d / f"frame_{t}.pgm") / 255.0 for t in range(n)])
    masks = np.stack([(read_pgm(d / f"mask_{t}.pgm") > 127).astype(np.float64) for t in range(n)])
    frames = np.repeat(frames[:, None], 3, axis=1)
    cid = int(m.group(1))
    return VideoClip(frames, masks, cid, cid)


def generate_dataset(seed: int, count: int, T: int, size: int, out_dir,
                     difficulty: float = 0.5) -> list[Path]:
    """Write ``count`` clips with consecutive seeds starting at ``seed``."""
    return [save_clip(generate_clip(s, T, size, size, difficulty), out_dir)
            for s in range(seed, seed + count)]
