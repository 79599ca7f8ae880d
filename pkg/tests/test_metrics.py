import numpy as np
import pytest

from vivim.metrics import (MetricReport, mae, mean_report, metric_report, region_metrics,
                           specificity, sweep_thresholds, threshold_sweep)
from vivim.tensor import ShapeError


def test_perfect_overlap():
    g = np.zeros((4, 4))
    g[1:3, 1:3] = 1
    assert region_metrics(g, g) == (1.0, 1.0, 1.0, 1.0)


def test_hand_counts():
    # tp=2, fp=1, fn=1, tn=4
    p = np.array([1, 1, 1, 0, 0, 0, 0, 0], float)
    g = np.array([1, 1, 0, 1, 0, 0, 0, 0], float)
    dice, jac, prec, rec = region_metrics(p, g)
    assert dice == pytest.approx(4 / 6)
    assert jac == pytest.approx(2 / 4)
    assert prec == pytest.approx(2 / 3)
    assert rec == pytest.approx(2 / 3)
    assert specificity(p, g) == pytest.approx(4 / 5)


def test_empty_conventions():
    z = np.zeros((3, 3))
    assert region_metrics(z, z) == (1.0, 1.0, 1.0, 1.0)
    g = z.copy()
    g[0, 0] = 1
    assert region_metrics(z, g)[0] == 0.0
    assert region_metrics(g, z)[0] == 0.0


def test_threshold_is_inclusive():
    assert region_metrics(np.array([0.5]), np.array([1.0]))[0] == 1.0


def test_sweep_grid():
    thr = sweep_thresholds()
    assert len(thr) == 256 and thr[0] == 0 and thr[-1] == 255 / 256


def test_sweep_maxima_dominate_fixed_threshold(rng):
    g = (rng.uniform(size=(16, 16)) > 0.7).astype(float)
    p = np.clip(g * 0.4 + rng.uniform(0, 0.6, size=g.shape), 0, 1)
    max_dice, max_spe, max_iou = threshold_sweep(p, g)
    dice, jac, _, _ = region_metrics(p, g)
    assert max_dice >= dice and max_iou >= jac and max_spe >= specificity(p, g)


def test_mae():
    assert mae(np.array([0.2, 0.9]), np.array([0.0, 1.0])) == pytest.approx(0.15)


def test_jaccard_never_exceeds_dice(rng):
    for _ in range(50):
        g = (rng.uniform(size=(8, 8)) > rng.uniform()).astype(float)
        p = rng.uniform(size=(8, 8))
        rep = metric_report(p, g)
        assert rep.jaccard <= rep.dice + 1e-15


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        region_metrics(np.zeros(3), np.zeros(4))


def test_mean_report():
    a = MetricReport(1, 1, 1, 1, 0, 1, 1, 1)
    b = MetricReport(0, 0, 0, 0, 1, 0, 0, 0)
    assert mean_report([a, b]).dice == 0.5
    with pytest.raises(ValueError):
        mean_report([])
