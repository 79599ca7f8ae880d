import math

import numpy as np
import pytest

from vivim import tensor as T
from vivim.model import (DIRECTIONS, Decoder, DetailSpecificFeedForward, EfficientSpatialAttention,
                         FeaturePyramid, MambaLayer, OverlapPatchEmbed, SpatialBlock, STMamba,
                         VivimConfig, VivimNet, decoder_forward, encoder_forward, segmentation_loss)
from vivim.scan_orders import SequenceLayout
from vivim.ssm import SelectiveScan
from vivim.tensor import ShapeError

SMALL = VivimConfig(channels=(4, 8, 12, 16), depths=(1, 1, 1, 1), heads=(1, 1, 1, 1),
                    decoder_dim=8, seed=3)
ALL_ON = {d: True for d in DIRECTIONS}


def long_memory(layer: STMamba) -> STMamba:
    """Push the branches away from the near-memoryless initial regime."""
    for br in layer.branches.values():
        br.dt_bias.data[...] = 1.0
        br.A_log.data[...] = np.log(0.2)
        br.x_B.data *= 50.0
        br.x_C.data *= 50.0
        br.use_skip = False
    return layer


def zero_linear(lin):
    lin.weight.data[...] = 0.0
    lin.bias.data[...] = 0.0


class TestPatchEmbed:
    def test_shape(self, rng):
        emb = OverlapPatchEmbed(3, 8, 7, 4, rng)
        assert emb(rng.normal(size=(1, 2, 3, 64, 64))).shape == (1, 2, 16, 16, 8)

    def test_identical_frames(self, rng):
        emb = OverlapPatchEmbed(3, 8, 7, 4, rng)
        frame = rng.normal(size=(3, 32, 32))
        out = emb(np.stack([frame, frame])[None]).data
        assert np.array_equal(out[0, 0], out[0, 1])

    def test_zero_input(self, rng):
        emb = OverlapPatchEmbed(3, 8, 7, 4, rng)
        assert np.all(emb(np.zeros((1, 1, 3, 32, 32))).data == 0)


class TestSpatialAttention:
    def test_uniform_attention_hand_case(self, rng):
        c = 4
        att = EfficientSpatialAttention(c, 1, 1, rng)
        zero_linear(att.q)
        for lin in (att.v, att.proj):
            lin.weight.data[...] = np.eye(c)
            lin.bias.data[...] = 0.0
        x = rng.normal(size=(2, 3, 3, c))
        out = att(x).data
        expected = np.broadcast_to(x.mean(axis=(1, 2), keepdims=True), x.shape)
        assert np.allclose(out, expected, atol=1e-14)
        # with the residual, as used inside the spatial block
        assert np.allclose(x + out, x + expected, atol=1e-14)

    def test_single_token_is_value_projection(self, rng):
        att = EfficientSpatialAttention(6, 2, 1, rng)
        x = rng.normal(size=(3, 1, 1, 6))
        assert np.allclose(att(x).data, att.proj(att.v(x)).data, atol=1e-14)

    def test_reduction_must_divide(self, rng):
        att = EfficientSpatialAttention(4, 1, 4, rng)
        with pytest.raises(ShapeError):
            att(rng.normal(size=(1, 6, 6, 4)))

    def test_frame_permutation_equivariance(self, rng):
        block = SpatialBlock(8, 2, 2, 4, rng)
        emb = OverlapPatchEmbed(3, 8, 7, 4, rng)
        clip = rng.normal(size=(1, 4, 3, 32, 32))
        perm = [2, 0, 3, 1]
        out = block(emb(clip)).data
        out_p = block(emb(clip[:, perm])).data
        assert np.array_equal(out[:, perm], out_p)


class TestSTMamba:
    def test_single_forward_branch_reduces_to_selective_scan(self, rng):
        dim, L = 3, 6
        layer = STMamba(dim, rng)
        ref = SelectiveScan(dim, rng)
        ref.in_proj, ref.gate_proj, ref.out_proj = layer.in_proj, layer.gate_proj, layer.out_proj
        ref.branch = layer.branches["t_forward"]
        x = rng.normal(size=(1, L, dim))
        lay = SequenceLayout(L, 1, 1, dim)
        out = layer(x, lay, {"t_forward": True, "t_backward": False, "spatial": False}).data
        assert np.max(np.abs(out - ref(x).data)) < 1e-10

    def test_zero_output_projection_gives_identity_layer(self, rng):
        cfg = VivimConfig()
        layer = MambaLayer(4, cfg, rng)
        zero_linear(layer.mamba.out_proj)
        zero_linear(layer.dsf.fc2)
        lay = SequenceLayout(2, 2, 2, 4)
        x = rng.normal(size=(1, lay.L, 4))
        assert np.array_equal(layer(x, lay, ALL_ON).data, x)

    def test_backward_branch_symmetry_oracle(self, rng):
        dim, L = 2, 7
        layer = long_memory(STMamba(dim, rng))
        layer.branches["t_backward"] = layer.branches["t_forward"]  # symmetric parameters
        lay = SequenceLayout(L, 1, 1, dim)
        fwd = {"t_forward": True, "t_backward": False, "spatial": False}
        both = {"t_forward": True, "t_backward": True, "spatial": False}
        half = rng.normal(size=(1, 4, dim))
        palindrome = np.concatenate([half, half[:, 2::-1]], axis=1)
        sym = layer(palindrome, lay, both).data
        assert np.max(np.abs(sym - sym[:, ::-1])) <= 1e-12 * np.max(np.abs(sym))
        one_way = layer(palindrome, lay, fwd).data
        assert np.max(np.abs(one_way - one_way[:, ::-1])) > 1e-3 * np.max(np.abs(one_way))
        asym = rng.normal(size=(1, L, dim))
        a, b = layer(asym, lay, both).data, layer(asym, lay, fwd).data
        assert np.max(np.abs(a - b)) > 1e-2 * np.max(np.abs(b))

    @pytest.mark.parametrize("direction", DIRECTIONS)
    def test_every_toggle_changes_output(self, rng, direction):
        layer = STMamba(4, rng)  # default initialisation: flags must matter here too
        lay = SequenceLayout(3, 2, 2, 4)
        x = rng.normal(size=(1, lay.L, 4))
        off = {**ALL_ON, direction: False}
        a, b = layer(x, lay, ALL_ON).data, layer(x, lay, off).data
        assert np.max(np.abs(a - b)) > 1e-2 * np.max(np.abs(a))

    def test_all_toggles_off_is_an_error(self, rng):
        layer = STMamba(4, rng)
        with pytest.raises(ValueError):
            layer(rng.normal(size=(1, 4, 4)), SequenceLayout(4, 1, 1, 4),
                  {d: False for d in DIRECTIONS})

    def test_temporal_scan_is_not_frame_equivariant(self, rng):
        layer = long_memory(STMamba(4, rng))
        lay = SequenceLayout(3, 2, 2, 4)
        x = rng.normal(size=(1, 3, 4, 4))
        perm = [1, 2, 0]
        tf = {"t_forward": True, "t_backward": False, "spatial": False}
        out = layer(x.reshape(1, lay.L, 4), lay, tf).data.reshape(1, 3, 4, 4)
        out_p = layer(x[:, perm].reshape(1, lay.L, 4), lay, tf).data.reshape(1, 3, 4, 4)
        assert np.max(np.abs(out[:, perm] - out_p)) > 1e-3 * np.max(np.abs(out_p))


class TestDSF:
    def test_zero_kernel_zero_update(self, rng):
        dsf = DetailSpecificFeedForward(4, 2, rng)
        dsf.dw.data[...] = 0.0
        dsf.fc2.bias.data[...] = 0.0
        lay = SequenceLayout(2, 3, 3, 4)
        assert np.all(dsf(rng.normal(size=(1, lay.L, 4)), lay).data == 0)

    @pytest.mark.parametrize("t,h,w", [(1, 1, 1), (2, 3, 4), (5, 2, 2)])
    def test_shape(self, rng, t, h, w):
        dsf = DetailSpecificFeedForward(4, 2, rng)
        lay = SequenceLayout(t, h, w, 4)
        assert dsf(rng.normal(size=(2, lay.L, 4)), lay).shape == (2, lay.L, 4)

    def test_centre_kernel_is_pointwise_mlp(self, rng):
        dsf = DetailSpecificFeedForward(4, 2, rng)
        dsf.dw.data[...] = 0.0
        dsf.dw.data[:, 1, 1, 1] = 1.0
        dsf.dw_bias.data[...] = rng.normal(size=8)
        lay = SequenceLayout(2, 3, 3, 4)
        x = rng.normal(size=(1, lay.L, 4))
        mlp = dsf.fc2(T.silu(dsf.fc1(x) + dsf.dw_bias)).data
        assert np.max(np.abs(dsf(x, lay).data - mlp)) < 1e-10


class TestEncoderDecoder:
    def test_default_pyramid_shapes(self, rng):
        net = VivimNet(VivimConfig())
        pyr = encoder_forward(rng.normal(size=(2, 3, 64, 64)), net)
        assert pyr.shapes == [(1, 2, 32, 16, 16), (1, 2, 64, 8, 8), (1, 2, 160, 4, 4),
                              (1, 2, 256, 2, 2)]

    def test_deterministic(self, rng):
        clip = rng.normal(size=(2, 3, 32, 32))
        a = VivimNet(SMALL)(clip)[0].data
        b = VivimNet(SMALL)(clip)[0].data
        assert np.array_equal(a, b)

    def test_doubling_frames(self, rng):
        net = VivimNet(SMALL)
        s2 = encoder_forward(rng.normal(size=(2, 3, 32, 32)), net).shapes
        s4 = encoder_forward(rng.normal(size=(4, 3, 32, 32)), net).shapes
        assert [(a[0], 2 * a[1]) + a[2:] for a in s2] == s4

    def test_frame_size_must_divide(self, rng):
        with pytest.raises(ShapeError):
            VivimNet(SMALL)(rng.normal(size=(1, 3, 48, 40)))

    def test_zero_fusion_gives_constant_logits(self, rng):
        net = VivimNet(SMALL)
        zero_linear(net.decoder.fuse)
        net.decoder.head.bias.data[...] = 0.37
        logits, _ = net(rng.normal(size=(2, 3, 32, 32)))
        assert logits.shape == (1, 2, 1, 32, 32)
        assert np.allclose(logits.data, 0.37, atol=1e-15)

    def test_every_level_receives_gradient(self, rng):
        net = VivimNet(SMALL)
        pyr = encoder_forward(rng.normal(size=(2, 3, 32, 32)), net)
        leaves = FeaturePyramid([T.Tensor(f.data, requires_grad=True) for f in pyr.features])
        out = decoder_forward(leaves, net)
        T.sum_(out * rng.normal(size=out.shape)).backward()
        assert all(np.any(f.grad != 0) for f in leaves.features)

    def test_inconsistent_pyramid(self, rng):
        dec = Decoder((4, 8, 12, 16), 8, rng)
        feats = [rng.normal(size=(1, 1, c, 8, 8)) for c in (4, 8, 12, 16)]
        with pytest.raises(ShapeError):
            dec(FeaturePyramid([T.Tensor(f) for f in feats]), (32, 32))

    def test_residual_identity_per_stage(self, rng):
        net = VivimNet(SMALL)
        for stage in net.stages:
            zero_linear(stage.spatial.attn.proj)
            zero_linear(stage.spatial.ffn.fc2)
            for layer in stage.layers:
                zero_linear(layer.mamba.out_proj)
                zero_linear(layer.dsf.fc2)
        x = T.Tensor(rng.normal(size=(1, 2, 3, 32, 32)))
        for stage in net.stages:
            embedded = T.transpose(stage.embed(x), (0, 1, 4, 2, 3)).data
            out = stage(x, ALL_ON)
            assert np.array_equal(out.data, embedded)
            x = out

    def test_basic_configuration_skips_mamba_layers(self, rng):
        cfg = VivimConfig(**{**SMALL.to_dict(), "t_forward": False, "t_backward": False,
                             "spatial": False})
        net = VivimNet(cfg)
        for stage in net.stages:
            for layer in stage.layers:
                for p in layer.parameters():
                    p.data[...] = np.nan  # would poison the output if used
        assert np.all(np.isfinite(net(rng.normal(size=(2, 3, 32, 32)))[0].data))


class TestSegmentationLoss:
    def test_perfect_prediction_limit(self):
        gt = np.zeros((1, 1, 4, 4))
        gt[..., :2, :] = 1.0
        logits = np.where(gt > 0, 40.0, -40.0)
        assert segmentation_loss(logits, gt).item() < 1e-12

    def test_hand_case(self):
        gt = np.zeros((2, 1, 4, 4))
        gt[..., :2] = 1.0
        val = segmentation_loss(np.zeros_like(gt), gt, eps=1e-12).item()
        assert abs(val - (math.log(2) + 2.0 / 3.0)) < 1e-9
        assert abs(val - 1.3598) < 1e-3

    def test_empty_ground_truth(self):
        gt = np.zeros((1, 1, 4, 4))
        assert segmentation_loss(np.full_like(gt, -40.0), gt).item() < 1e-12

    def test_non_binary(self):
        with pytest.raises(ValueError):
            segmentation_loss(np.zeros((2, 2)), np.full((2, 2), 0.5))

    def test_nonnegative_and_descends(self, rng):
        for _ in range(5):
            gt = (rng.uniform(size=(2, 1, 6, 6)) > 0.6).astype(float)
            z = T.Tensor(rng.normal(size=gt.shape), requires_grad=True)
            loss = segmentation_loss(z, gt)
            assert loss.item() >= 0
            loss.backward()
            stepped = segmentation_loss(z.data - 1e-3 * z.grad, gt).item()
            assert stepped < loss.item()
