import numpy as np
import pytest

from vivim.boundary import AffineEstimator
from vivim.checkpoint import (MAGIC, Checkpoint, CheckpointFormatError, decode, encode,
                              read_checkpoint, save_checkpoint)
from vivim.config import TrainConfig, format_config, load_config, parse_config, save_config
from vivim.model import VivimNet
from vivim.train import lr_at


def test_config_round_trip(tmp_path):
    cfg = TrainConfig(seed=7, scan_sp=False, lr=3e-4, channels=(8, 16, 24, 32))
    assert parse_config(format_config(cfg)) == cfg
    save_config(cfg, tmp_path / "c.txt")
    assert load_config(tmp_path / "c.txt") == cfg


def test_config_text_syntax():
    cfg = parse_config("# comment\nscan-tb = false\n\nepochs = 3  \nlr=0.01\n")
    assert cfg.scan_tb is False and cfg.epochs == 3 and cfg.lr == 0.01


@pytest.mark.parametrize("text", ["bogus = 1", "epochs 3", "bac = maybe", "epochs = x"])
def test_config_rejects_bad_lines(text):
    with pytest.raises(ValueError):
        parse_config(text)


@pytest.mark.parametrize("changes", [dict(epochs=0), dict(lr=1e-6, lr_min=1e-4),
                                     dict(difficulty=1.5), dict(size=48), dict(size=40, patch=20)])
def test_config_validation(changes):
    with pytest.raises(ValueError):
        TrainConfig(**changes)


def test_ablation_weights_vanish_without_bac():
    w = TrainConfig(bac=False).loss_weights()
    assert w.lambda1 == 0 and w.lambda2 == 0


def test_schedule_is_monotone_and_bounded():
    cfg = TrainConfig()
    lrs = np.array([lr_at(cfg, s, 1000) for s in range(1000)])
    assert lrs[0] == pytest.approx(cfg.lr) and lrs[-1] == pytest.approx(cfg.lr_min)
    assert np.all(np.diff(lrs) <= 0)


def _small_net():
    return VivimNet(TrainConfig(channels=(4, 8, 12, 16), depths=(1, 1, 1, 1), heads=(1, 1, 1, 1),
                                decoder_dim=8).model_config())


def test_save_load_save_is_byte_identical(tmp_path):
    net, est = _small_net(), AffineEstimator(16, 16, seed=3)
    a = save_checkpoint(tmp_path / "a.vck", net, est, "seed = 1\n")
    ck = read_checkpoint(a)
    net2, est2 = _small_net(), AffineEstimator(16, 16, seed=9)
    net2.load_state_dict(ck.model)
    est2.load_state_dict(ck.affine)
    b = save_checkpoint(tmp_path / "b.vck", net2, est2, ck.config_text)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes()[:8] == MAGIC


def test_round_trip_preserves_outputs(tmp_path, rng):
    net = _small_net()
    path = save_checkpoint(tmp_path / "n.vck", net)
    other = VivimNet(TrainConfig(channels=(4, 8, 12, 16), depths=(1, 1, 1, 1),
                                 heads=(1, 1, 1, 1), decoder_dim=8, seed=99).model_config())
    other.load_state_dict(read_checkpoint(path).model)
    x = rng.random((1, 2, 3, 32, 32))
    assert np.array_equal(net(x)[0].data, other(x)[0].data)


def test_bad_magic():
    with pytest.raises(CheckpointFormatError, match="magic"):
        decode(b"NOTACKPT" + bytes(8))


def test_truncated_file():
    raw = encode(Checkpoint("x", {"w": np.arange(4.0)}))
    for cut in (10, len(raw) - 3):
        with pytest.raises(CheckpointFormatError, match="truncated"):
            decode(raw[:cut])


def test_unknown_section():
    raw = encode(Checkpoint("", {"w": np.ones(2)}))
    raw = raw.replace(b"model/w", b"other/w")
    with pytest.raises(CheckpointFormatError, match="unknown section"):
        decode(raw)


def test_unknown_and_missing_parameter_names():
    net = _small_net()
    state = net.state_dict()
    with pytest.raises(KeyError, match="unknown"):
        net.load_state_dict({**state, "nope": np.zeros(1)})
    state.pop(next(iter(state)))
    with pytest.raises(KeyError, match="missing"):
        net.load_state_dict(state)


def test_wrong_parameter_size():
    net = _small_net()
    state = dict(net.state_dict())
    name = next(iter(state))
    state[name] = np.zeros(state[name].size + 1)
    with pytest.raises(ValueError):
        net.load_state_dict(state)
