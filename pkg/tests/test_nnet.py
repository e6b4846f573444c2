"""Layers, losses, optimizers, the two models and the checkpoint format."""

import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import gradcases
from paraforge.errors import FormatError, IntegrityError, NumericFaultError, ShapeError
from paraforge.nnet import (SGD, Adam, BiLSTM, BiLstmConfig, BiLstmRegressor, Linear, OptimizerConfig,
                            PlateauScheduler, ReLU, ResNetEmbed, ResNetEmbedConfig, Tensor, build_model,
                            cosine_distance_loss, cross_entropy_loss, gap, gsp, load_checkpoint,
                            make_checkpoint, plateau_scheduler, save_checkpoint)
from paraforge.nnet.checkpoint import decode_checkpoint, encode_checkpoint

TINY = ResNetEmbedConfig(stage_channels=(2, 4), blocks_per_stage=(1, 1), embed_dim=8)


@pytest.mark.parametrize("name", sorted(gradcases.layer_cases()))
def test_layer_gradient(name):
    assert gradcases.layer_cases()[name]() < 1e-5


@pytest.mark.parametrize("name", sorted(gradcases.model_cases()))
def test_model_gradient(name):
    assert gradcases.model_cases()[name]() < 1e-4


class TestLayers:
    def test_relu_values(self):
        np.testing.assert_array_equal(ReLU()(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_identity_linear(self, rng):
        layer = Linear(3, 3, dtype=np.float64)
        layer.weight.data = np.eye(3)
        x = rng.normal(size=(4, 3))
        np.testing.assert_array_equal(layer(x), x)


class TestPooling:
    def test_frozen_values(self):
        fm = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        assert gap(fm)[0] == 2.5
        assert gsp(fm)[0] == pytest.approx(math.sqrt(1.25), abs=1e-15)

    def test_constant_map_has_zero_spread(self):
        assert np.all(gsp(np.full((3, 4, 5), 7.25)) == 0.0)

    def test_trivial_maps(self):
        np.testing.assert_array_equal(gap(np.full((2, 3, 3), 3.0)), [3.0, 3.0])
        np.testing.assert_array_equal(gap(np.zeros((4, 2, 2))), np.zeros(4))
        np.testing.assert_array_equal(gsp(np.ones((3, 1, 1)) * 5), np.zeros(3))

    def test_rejects_wrong_rank(self):
        with pytest.raises(ShapeError):
            gap(np.zeros((2, 3)))


class TestLosses:
    def test_cross_entropy_of_uniform_logits(self):
        loss, grad = cross_entropy_loss(np.zeros(2), 1)
        assert loss == pytest.approx(math.log(2), abs=1e-15)
        np.testing.assert_allclose(grad, [0.5, -0.5])

    def test_cross_entropy_is_stable_for_large_logits(self):
        loss, _ = cross_entropy_loss(np.array([[1000.0, 0.0]]), [0])
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_cosine_of_aligned_and_opposite(self):
        x = np.array([0.3, -1.0, 2.0])
        assert cosine_distance_loss(x, x)[0] == pytest.approx(0.0, abs=1e-8)
        assert cosine_distance_loss(-x, x)[0] == pytest.approx(2.0, abs=1e-8)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0.1, 10.0))
    def test_cosine_is_scale_invariant(self, seed, scale):
        r = np.random.default_rng(seed)
        p, t = r.normal(size=(2, 9)), r.normal(size=(2, 9))
        assert cosine_distance_loss(p * scale, t)[0] == pytest.approx(cosine_distance_loss(p, t)[0], abs=1e-7)

    def test_cosine_rejects_zero_target(self):
        with pytest.raises(ValueError):
            cosine_distance_loss(np.ones(3), np.zeros(3))


def _param(value, grad):
    t = Tensor(np.array([value], dtype=np.float64), name="w")
    t.accumulate(np.array([grad]))
    return t


class TestOptimizers:
    def test_plain_sgd_step(self):
        p = _param(0.0, 1.0)
        SGD([("w", p)], lr=0.1, momentum=0.0).step()
        assert p.data[0] == pytest.approx(-0.1, abs=1e-15)

    def test_nesterov_two_steps(self):
        p = _param(1.0, 1.0)
        opt = SGD([("w", p)], lr=0.1, momentum=0.9)
        opt.step()
        assert p.data[0] == pytest.approx(0.81, abs=1e-15)
        opt.step()                       # same gradient; velocity is now 1.9
        assert p.data[0] == pytest.approx(0.539, abs=1e-15)

    def test_plain_momentum(self):
        p = _param(1.0, 1.0)
        opt = SGD([("w", p)], lr=0.1, momentum=0.9, nesterov=False)
        opt.step()
        opt.step()
        assert p.data[0] == pytest.approx(1.0 - 0.1 - 0.19, abs=1e-15)

    def test_adam_first_step_is_lr_times_sign(self):
        p = _param(1.0, 2.0)
        opt = Adam([("w", p)], lr=0.1)
        opt.step()
        assert p.data[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
        assert set(opt.state_dict()) == {"w.m", "w.v"}

    def test_adam_second_step(self):
        p = _param(1.0, 2.0)
        opt = Adam([("w", p)], lr=0.1)
        opt.step()
        p.zero_grad()
        p.accumulate(np.array([-1.0]))
        opt.step()
        m = (0.9 * 0.1 * 2.0 + 0.1 * -1.0) / (1 - 0.9 ** 2)
        v = (0.999 * 0.001 * 4.0 + 0.001 * 1.0) / (1 - 0.999 ** 2)
        expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8) - 0.1 * m / (math.sqrt(v) + 1e-8)
        assert p.data[0] == pytest.approx(expected, abs=1e-12)

    def test_plateau_divides_by_ten_twice(self):
        cfg = OptimizerConfig(lr=0.01, plateau_patience=2, plateau_factor=0.1)
        assert plateau_scheduler([1.0, 1.0, 1.0], cfg) == pytest.approx(0.001)
        assert plateau_scheduler([1.0] * 5, cfg) == pytest.approx(1e-4)

    def test_plateau_keeps_lr_while_improving(self):
        cfg = OptimizerConfig(lr=0.01, plateau_patience=2)
        assert plateau_scheduler([1.0, 0.9, 0.8, 0.7, 0.6], cfg) == 0.01

    def test_plateau_improvement_resets_patience(self):
        sched = PlateauScheduler(0.01, patience=2)
        for loss in (1.0, 1.0, 0.5, 0.5):
            lr = sched.step(loss)
        assert lr == 0.01

    def test_plateau_respects_floor(self):
        sched = PlateauScheduler(2e-6, patience=1)
        for _ in range(5):
            lr = sched.step(1.0)
        assert lr == 1e-6

    def test_foreign_optimizer_state_is_rejected(self):
        opt = SGD([("w", _param(0.0, 0.0))], lr=0.1)
        with pytest.raises(IntegrityError):
            opt.load_state_dict({"other.velocity": np.zeros(1)})


class TestResNetEmbed:
    def test_shapes(self):
        model = ResNetEmbed(TINY, 16, seed=0).eval()
        logits, emb = model(np.zeros((3, 20, 16)))
        assert logits.shape == (3, 2) and emb.shape == (3, 8)

    def test_eval_forward_is_deterministic(self, rng):
        model = ResNetEmbed(TINY, 16, seed=0).eval()
        x = rng.normal(size=(2, 20, 16))
        np.testing.assert_array_equal(model(x)[0], model(x)[0])

    def test_feat_level_with_zero_aux_matches_plain_model(self, rng):
        plain = ResNetEmbed(TINY, 16, seed=0).eval()
        cfg = ResNetEmbedConfig(stage_channels=(2, 4), blocks_per_stage=(1, 1), embed_dim=8,
                                aux_fusion="feat_level", aux_dim=5)
        fused = ResNetEmbed(cfg, 16, seed=7).eval()
        state = plain.state_dict()
        state.update({k: v for k, v in fused.state_dict().items() if k.startswith("freq_proj.")})
        fused.load_state_dict(state)
        x = rng.normal(size=(3, 20, 16))
        np.testing.assert_array_equal(fused(x, np.zeros((3, 5)))[0], plain(x)[0])

    def test_feat_level_projection_ignores_aux_at_init(self, rng):
        cfg = ResNetEmbedConfig(stage_channels=(2, 4), blocks_per_stage=(1, 1), embed_dim=8,
                                aux_fusion="feat_level", aux_dim=5)
        model = ResNetEmbed(cfg, 16, seed=0).eval()
        x = rng.normal(size=(2, 20, 16))
        a, _ = model(x, np.zeros((2, 5)))
        b, _ = model(x, rng.normal(size=(2, 5)))
        np.testing.assert_array_equal(a, b)

    def test_aux_presence_must_match_config(self):
        model = ResNetEmbed(TINY, 16, seed=0)
        with pytest.raises(ShapeError):
            model(np.zeros((1, 20, 16)), np.zeros((1, 3)))
        with pytest.raises(ShapeError):
            model(np.zeros((1, 20, 15)))

    def test_same_seed_same_weights(self):
        a = ResNetEmbed(TINY, 16, seed=4).state_dict()
        b = ResNetEmbed(TINY, 16, seed=4).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)


class TestBiLstm:
    def test_batch_invariance(self, rng):
        model = BiLstmRegressor(BiLstmConfig(hidden_per_direction=6), 5, seed=0).eval()
        x = rng.normal(size=(3, 12, 5)).astype(np.float32)
        joint = model(x)
        for i in range(3):
            np.testing.assert_allclose(model(x[i:i + 1])[0], joint[i], atol=1e-6)

    def test_zero_dropout_train_equals_eval(self, rng):
        model = BiLstmRegressor(BiLstmConfig(hidden_per_direction=6, dropout=0.0), 5, seed=0)
        x = rng.normal(size=(2, 8, 5)).astype(np.float32)
        np.testing.assert_array_equal(model.train()(x), model.eval()(x))

    def test_zero_weights_give_zero_output(self, rng):
        model = BiLstmRegressor(BiLstmConfig(hidden_per_direction=4), 3, seed=0).eval()
        for _, p in model.named_parameters():
            p.data = np.zeros_like(p.data)
        np.testing.assert_array_equal(model(rng.normal(size=(2, 7, 3))), 0.0)

    def test_output_is_bounded(self, rng):
        model = BiLstmRegressor(BiLstmConfig(hidden_per_direction=4), 3, seed=0).eval()
        out = model(rng.normal(size=(1, 30, 3)) * 100)
        assert out.shape == (1, 30, 1) and np.all(np.abs(out) <= 1)

    def test_backward_direction_sees_the_future(self):
        layer = BiLSTM(1, 2, np.random.default_rng(0), np.float64)
        x = np.zeros((1, 6, 1))
        base = layer(x)
        x[0, -1, 0] = 1.0
        moved = layer(x)
        np.testing.assert_array_equal(moved[0, :-1, :2], base[0, :-1, :2])
        assert not np.allclose(moved[0, 0, 2:], base[0, 0, 2:])

    def test_non_finite_state_is_reported(self):
        layer = BiLSTM(1, 2, np.random.default_rng(0), np.float64)
        with pytest.raises(NumericFaultError, match="frame 0"):
            layer(np.array([[[np.nan], [0.0]]]))


class TestCheckpoint:
    def _model(self):
        model = ResNetEmbed(TINY, 16, seed=2)
        model(np.random.default_rng(0).normal(size=(4, 20, 16)))     # move BN running stats
        return model.eval()

    def test_roundtrip_is_bit_exact(self, tmp_path, rng):
        model = self._model()
        x = rng.normal(size=(3, 20, 16))
        save_checkpoint(tmp_path / "m.pckp", model, epoch=3, seed=9, extra={"note": "x"})
        ckpt = load_checkpoint(tmp_path / "m.pckp")
        assert ckpt.epoch == 3 and ckpt.seed == 9 and ckpt.descriptor["extra"] == {"note": "x"}
        again = build_model(ckpt)
        for a, b in zip(model(x), again(x)):
            np.testing.assert_array_equal(a, b)

    def test_optimizer_state_survives(self, rng):
        model = BiLstmRegressor(BiLstmConfig(hidden_per_direction=3), 2, seed=0)
        opt = Adam(model.named_parameters())
        out = model(rng.normal(size=(1, 4, 2)))
        model.backward(np.ones_like(out))
        opt.step()
        back = decode_checkpoint(encode_checkpoint(make_checkpoint(model, opt)))
        assert back.descriptor["optimizer"]["t"] == 1
        assert set(back.optimizer_state) == set(opt.state_dict())

    @pytest.mark.parametrize("where", [10, 100, -10, -1])
    def test_flipped_byte_is_rejected(self, tmp_path, where):
        blob = bytearray(encode_checkpoint(make_checkpoint(self._model())))
        blob[where] ^= 0x40
        (tmp_path / "bad.pckp").write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "bad.pckp")

    def test_truncation_is_rejected(self):
        blob = encode_checkpoint(make_checkpoint(self._model()))
        for cut in (5, 12, len(blob) // 2, len(blob) - 1):
            with pytest.raises(IntegrityError):
                decode_checkpoint(blob[:cut])

    def test_bad_magic(self):
        with pytest.raises(FormatError):
            decode_checkpoint(b"NOPE" + bytes(20))

    def test_damaged_version_is_corruption_but_intact_new_version_is_unsupported(self):
        blob = bytearray(encode_checkpoint(make_checkpoint(self._model())))
        blob[5] ^= 0x20
        with pytest.raises(IntegrityError):
            decode_checkpoint(bytes(blob))
        body = bytearray(encode_checkpoint(make_checkpoint(self._model()))[:-4])
        body[4:6] = struct.pack("<H", 2)
        with pytest.raises(FormatError, match="version 2"):
            decode_checkpoint(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
