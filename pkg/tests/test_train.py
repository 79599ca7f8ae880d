import numpy as np
import pytest

from conftest import tiny_config
from vivim import boundary as bd
from vivim.data import generate_clip
from vivim.model import VivimNet
from vivim.tensor import NonFiniteError
from vivim.train import (clip_batch, evaluate, step_losses, train, validation_seeds,
                         write_report)
from vivim.data import train_seeds


@pytest.fixture(scope="module")
def estimator():
    return bd.pretrain_affine_estimator(seed=0, steps=20, patch=16, hidden=16, corpus=256)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, estimator):
    out = tmp_path_factory.mktemp("run")
    return out, train(tiny_config(), out, estimator=estimator, plots=False)


def test_artifacts_are_written(trained):
    out, result = trained
    assert {"config.txt", "train_log.csv", "val_log.csv", "checkpoint.vck"} <= {
        p.name for p in out.iterdir()}
    assert len(result.log_rows) == 2 * 2 and len(result.val_dice) == 2
    header = (out / "train_log.csv").read_text().splitlines()[0]
    assert header == "step,epoch,lr,l_seg,l_affine,l_bce,l_total,grad_norm"


def test_fixed_seed_runs_are_bit_identical(tmp_path, trained, estimator):
    out, first = trained
    again = train(tiny_config(), tmp_path, estimator=estimator, plots=False)
    assert again.log_rows == first.log_rows
    assert (tmp_path / "checkpoint.vck").read_bytes() == (out / "checkpoint.vck").read_bytes()


def test_eval_is_reproducible_through_checkpoint(trained):
    out, _ = trained
    a = evaluate(out / "checkpoint.vck", [1, 3, 5])
    b = evaluate(out / "checkpoint.vck", [1, 3, 5])
    assert [r.as_dict() for r in a.reports] == [r.as_dict() for r in b.reports]


def test_eval_refuses_training_seeds(trained):
    out, _ = trained
    with pytest.raises(ValueError, match="training pool"):
        evaluate(out / "checkpoint.vck", [1, 2, 3])
    res = evaluate(out / "checkpoint.vck", [1, 2], allow_train_seeds=True)
    assert res.train_seed_count == 1


def test_report_files(trained, tmp_path):
    out, _ = trained
    res = evaluate(out / "checkpoint.vck", [1, 3])
    csv_path, summary = write_report(res, tmp_path / "r.csv", plots=False)
    lines = csv_path.read_text().splitlines()
    assert lines[0].startswith("clip,seed,split,dice,jaccard")
    assert len(lines) == 4 and lines[-1].startswith("mean")
    assert "clips: 2" in summary.read_text()


def test_validation_and_train_pools_are_disjoint():
    cfg = tiny_config(train_clips=200, val_clips=50)
    assert not set(validation_seeds(cfg)) & set(train_seeds(cfg.train_clips))


def _batch(cfg):
    return clip_batch([generate_clip(s, cfg.frames, cfg.size, cfg.size) for s in (0, 2)])


def test_zero_weights_reduce_to_segmentation_loss(estimator):
    cfg = tiny_config(lambda1=0.0, lambda2=0.0)
    net = VivimNet(cfg.model_config())
    x, y = _batch(cfg)
    losses = step_losses(net, x, y, cfg, estimator)
    assert losses.total.item() == losses.seg.item()
    off = tiny_config(bac=False)
    losses = step_losses(VivimNet(off.model_config()), x, y, off, None)
    assert losses.total.item() == losses.seg.item() and losses.affine is None


def test_weighted_affine_needs_an_estimator():
    cfg = tiny_config()
    x, y = _batch(cfg)
    with pytest.raises(ValueError, match="estimator"):
        step_losses(VivimNet(cfg.model_config()), x, y, cfg, None)


def test_total_combines_terms(estimator):
    cfg = tiny_config()
    w = cfg.loss_weights()
    x, y = _batch(cfg)
    l = step_losses(VivimNet(cfg.model_config()), x, y, cfg, estimator)
    expect = l.seg.item() + w.lambda1 * l.affine.item() + w.lambda2 * l.bce.item()
    assert l.total.item() == pytest.approx(expect, rel=1e-12)


def test_non_finite_loss_aborts_and_records_step(tmp_path, estimator):
    cfg = tiny_config(lr=1e100, lr_min=1e99, clip_norm=1e300, epochs=3)
    with pytest.raises(NonFiniteError, match="step"), np.errstate(all="ignore"):
        train(cfg, tmp_path, estimator=estimator, plots=False)
    text = (tmp_path / "failure.txt").read_text()
    assert text.startswith("step ")
    step = int(text.split()[1])
    logged = (tmp_path / "train_log.csv").read_text().splitlines()
    assert len(logged) - 1 == step


def test_loss_decreases_over_five_epochs(tmp_path, estimator):
    cfg = tiny_config(epochs=5, train_clips=8, frames=2)
    res = train(cfg, tmp_path, estimator=estimator, plots=False)
    assert res.epoch_mean(4) < res.epoch_mean(0)
