"""Training and evaluation loops over synthetic clips."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boundary as bd
from . import nn
from . import tensor as T
from .checkpoint import read_checkpoint, save_checkpoint
from .config import TrainConfig, format_config, parse_config
from .data import eval_seeds, generate_clip, is_train_seed, train_seeds
from .metrics import MetricReport, mean_report, metric_report
from .model import VivimNet, segmentation_loss
from .tensor import NonFiniteError

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "epoch", "lr", "l_seg", "l_affine", "l_bce", "l_total", "grad_norm")
VAL_SEED_OFFSET = 5000  # validation clips: odd seeds well above the default eval range
CHECKPOINT_NAME = "checkpoint.vck"
HEAD_PREFIXES = ("decoder.", "boundary.")


def lr_at(cfg: TrainConfig, step: int, total: int) -> float:
    """Cosine decay from ``lr`` to ``lr_min``; monotone non-increasing."""
    frac = step / max(1, total - 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


def clip_batch(clips) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([c.frames for c in clips])
    y = np.stack([c.masks for c in clips])[:, :, None]
    return x, y


def make_clips(seeds, cfg: TrainConfig):
    return [generate_clip(s, cfg.frames, cfg.size, cfg.size, cfg.difficulty) for s in seeds]


def validation_seeds(cfg: TrainConfig) -> list[int]:
    return eval_seeds(cfg.val_clips, offset=VAL_SEED_OFFSET)


@dataclass
class StepLosses:
    seg: T.Tensor
    affine: T.Tensor | None
    bce: T.Tensor
    total: T.Tensor

    def row(self) -> dict[str, float]:
        return {"l_seg": self.seg.item(),
                "l_affine": self.affine.item() if self.affine is not None else float("nan"),
                "l_bce": self.bce.item(), "l_total": self.total.item()}


def step_losses(net: VivimNet, x, y, cfg: TrainConfig, estimator=None) -> StepLosses:
    """Segmentation loss over every frame; boundary terms on the last (target) frame."""
    w = cfg.loss_weights()
    logits, pyramid = net(x)
    seg = segmentation_loss(logits, y)
    masks = y[:, :, 0]
    edges_t = bd.sobel_edges(masks[:, -1])
    edges_1 = bd.sobel_edges(masks[:, 0])
    b_logits = net.boundary(pyramid[0][:, -1])[:, 0]  # (B, H, W)
    affine = None
    if estimator is not None:
        pred = bd.to_patches(T.sigmoid(b_logits), cfg.patch)
        gt_t = bd.to_patches(edges_t, cfg.patch).data
        gt_1 = bd.to_patches(edges_1, cfg.patch).data
        affine = bd.affine_terms(pred, gt_t, gt_1, estimator, w)
    elif w.lambda1:
        raise ValueError("the affine term is weighted but no estimator was given")
    bce_term = bd.bce_with_logits(b_logits, edges_t)
    total = bd.combine_losses(seg, affine if affine is not None else 0.0, bce_term, w)
    return StepLosses(seg, affine, bce_term, total)


def predict(net: VivimNet, frames: np.ndarray, batch: int = 4) -> np.ndarray:
    """Foreground probabilities (n, T, H, W) for clips (n, T, 3, H, W)."""
    out = []
    with T.no_grad():
        for i in range(0, len(frames), batch):
            logits, _ = net(frames[i:i + batch])
            out.append(1.0 / (1.0 + np.exp(-logits.data[:, :, 0])))
    return np.concatenate(out)


def clip_reports(net: VivimNet, clips, batch: int = 4) -> list[MetricReport]:
    x, _ = clip_batch(clips)
    probs = predict(net, x, batch)
    return [metric_report(p, c.masks) for p, c in zip(probs, clips)]


def get_estimator(cfg: TrainConfig):
    if cfg.affine_checkpoint:
        ck = read_checkpoint(cfg.affine_checkpoint)
        if not ck.affine:
            raise ValueError(f"{cfg.affine_checkpoint} holds no affine estimator")
        est = bd.AffineEstimator(cfg.patch, cfg.affine_hidden)
        est.load_state_dict(ck.affine)
        return est.freeze()
    if not cfg.bac:
        return None
    log.info("pretraining the affine estimator (%d steps)", cfg.affine_steps)
    return bd.pretrain_affine_estimator(seed=cfg.seed, steps=cfg.affine_steps, patch=cfg.patch,
                                        hidden=cfg.affine_hidden, corpus=cfg.affine_corpus)


@dataclass
class TrainResult:
    log_rows: list[dict] = field(default_factory=list)
    val_dice: list[float] = field(default_factory=list)
    best_epoch: int = -1
    checkpoint: Path | None = None
    failed_step: int | None = None
    seconds: float = 0.0

    def epoch_mean(self, epoch: int, key: str = "l_total") -> float:
        vals = [r[key] for r in self.log_rows if r["epoch"] == epoch]
        return float(np.mean(vals)) if vals else float("nan")


def _write_log(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def train(cfg: TrainConfig, out_dir, estimator=None, plots: bool = True) -> TrainResult:
    """Train with Adam + cosine decay; checkpoint the best validation Dice.

    A non-finite loss aborts the run: the step is recorded in ``failure.txt``
    and ``NonFiniteError`` propagates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    start = time.perf_counter()
    if estimator is None:
        estimator = get_estimator(cfg)
    net = VivimNet(cfg.model_config())
    named = [(n, p) for n, p in net.named_parameters() if p.requires_grad]
    params = [p for _, p in named]
    # decoder and boundary head learn faster than the encoder
    scales = [cfg.head_lr_mult if n.startswith(HEAD_PREFIXES) else 1.0 for n, _ in named]
    opt = nn.Adam(params, lr=cfg.lr, lr_scales=scales)
    train_clips = make_clips(train_seeds(cfg.train_clips), cfg)
    val_clips = make_clips(validation_seeds(cfg), cfg)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(train_clips) / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    result = TrainResult()
    best = -1.0
    step = 0
    config_text = format_config(cfg)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_clips))
        for i in range(steps_per_epoch):
            batch = [train_clips[j] for j in order[i * cfg.batch:(i + 1) * cfg.batch]]
            x, y = clip_batch(batch)
            try:
                losses = step_losses(net, x, y, cfg, estimator)
            except NonFiniteError as exc:
                result.failed_step = step
                (out / "failure.txt").write_text(f"step {step} (epoch {epoch}): {exc}\n")
                _write_log(result.log_rows, out / "train_log.csv")
                raise NonFiniteError(f"non-finite loss at step {step}: {exc}") from exc
            opt.zero_grad()
            losses.total.backward()
            gnorm = nn.clip_grad_norm(params, cfg.clip_norm)
            opt.lr = lr_at(cfg, step, total_steps)
            opt.step()
            row = {"step": step, "epoch": epoch, "lr": opt.lr, **losses.row(), "grad_norm": gnorm}
            result.log_rows.append(row)
            if step % cfg.log_every == 0:
                log.info("step %d epoch %d loss %.4f (seg %.4f)", step, epoch,
                         row["l_total"], row["l_seg"])
            step += 1
        dice = mean_report(clip_reports(net, val_clips, cfg.batch)).dice
        result.val_dice.append(dice)
        log.info("epoch %d validation dice %.4f", epoch, dice)
        if dice > best:
            best = dice
            result.best_epoch = epoch
            result.checkpoint = save_checkpoint(out / CHECKPOINT_NAME, net, estimator, config_text)
    _write_log(result.log_rows, out / "train_log.csv")
    with open(out / "val_log.csv", "w") as fh:
        fh.write("epoch,val_dice\n")
        fh.writelines(f"{e},{d:.10g}\n" for e, d in enumerate(result.val_dice))
    result.seconds = time.perf_counter() - start
    if plots:
        from .plotting import plot_training
        plot_training(result.log_rows, result.val_dice, out / "training.png")
    return result


# -- evaluation -----------------------------------------------------------

def load_model(path) -> tuple[VivimNet, bd.AffineEstimator | None, TrainConfig]:
    """Rebuild the network (and estimator, if stored) described by a checkpoint."""
    ck = read_checkpoint(path)
    cfg = parse_config(ck.config_text)
    net = VivimNet(cfg.model_config())
    try:
        net.load_state_dict(ck.model)
    except (KeyError, ValueError) as exc:
        raise ValueError(f"checkpoint does not match its configured architecture: {exc}") from exc
    est = None
    if ck.affine:
        est = bd.AffineEstimator(cfg.patch, cfg.affine_hidden)
        est.load_state_dict(ck.affine)
        est.freeze()
    return net, est, cfg


@dataclass
class EvalResult:
    seeds: list[int]
    reports: list[MetricReport]
    mean: MetricReport
    train_seed_count: int = 0


def evaluate(checkpoint, seeds, allow_train_seeds: bool = False) -> EvalResult:
    """Per-clip metrics on the given seeds.

    Even seeds belong to the training pool; they are refused unless
    ``allow_train_seeds`` is set, in which case they are flagged in the output.
    """
    seeds = list(seeds)
    if not seeds:
        raise ValueError("no evaluation seeds")
    overlap = [s for s in seeds if is_train_seed(s)]
    if overlap and not allow_train_seeds:
        raise ValueError(f"{len(overlap)} evaluation seeds lie in the training pool "
                         f"(even seeds, e.g. {overlap[:3]}); use odd seeds such as 1..99:2")
    net, _, cfg = load_model(checkpoint)
    clips = make_clips(seeds, cfg)
    reports = clip_reports(net, clips, cfg.batch)
    return EvalResult(seeds, reports, mean_report(reports), len(overlap))


REPORT_COLUMNS = ("clip", "seed", "split", "dice", "jaccard", "precision", "recall", "mae",
                  "max_dice", "max_spe", "max_iou")


def write_report(result: EvalResult, path, plots: bool = True) -> tuple[Path, Path]:
    """CSV with one row per clip plus a ``mean`` row, and a text summary beside it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for seed, rep in zip(result.seeds, result.reports):
            split = "train" if is_train_seed(seed) else "heldout"
            writer.writerow([seed, seed, split] + [f"{v:.10g}" for v in rep.as_dict().values()])
        writer.writerow(["mean", "", ""] + [f"{v:.10g}" for v in result.mean.as_dict().values()])
    summary = path.with_suffix(".txt")
    lines = [f"clips: {len(result.seeds)} (training-pool seeds: {result.train_seed_count})"]
    lines += [f"{k}: {v:.4f}" for k, v in result.mean.as_dict().items()]
    summary.write_text("\n".join(lines) + "\n")
    if plots:
        from .plotting import plot_eval
        plot_eval(result, path.with_suffix(".png"))
    return path, summary
