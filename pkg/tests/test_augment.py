"""SpecAugment, random erasing, speed perturbation and crop/pad."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tone
from paraforge.augment import (RandomErasingConfig, SpecAugmentConfig, SpeedPerturbConfig, crop_or_pad,
                               erase_rectangle, random_erase, spec_augment, speed_perturb_set)
from paraforge.dsp import FeatureMatrix
from paraforge.errors import ConfigError
from paraforge.rng import Rng


def ones(u=98, v=64):
    return FeatureMatrix(np.ones((u, v)) + np.arange(u * v).reshape(u, v))


class TestSpecAugment:
    def test_masked_count_matches_band_widths(self):
        feat = ones()
        for i in range(200):
            out, masks = spec_augment(feat, SpecAugmentConfig(), Rng(5).split(i), return_masks=True)
            (_, _, f), (_, _, t) = masks
            zeroed = int(np.sum(out.data != feat.data))
            assert zeroed == f * feat.n_frames + t * feat.n_bins - f * t

    def test_widths_are_inclusive(self):
        widths = {spec_augment(ones(), SpecAugmentConfig(F=2, T=2), Rng(1).split(i), True)[1][0][2]
                  for i in range(300)}
        assert widths == {0, 1, 2}

    def test_at_most_f_columns_and_t_rows_change(self):
        feat = ones(100, 64)
        for i in range(200):
            diff = spec_augment(feat, SpecAugmentConfig(F=12, T=20), Rng(8).split(i)).data != feat.data
            full_rows = np.all(diff, axis=1).sum()
            full_cols = np.all(diff, axis=0).sum()
            assert full_rows <= 20 and full_cols <= 12
            assert np.array_equal(diff, np.all(diff, axis=1)[:, None] | np.all(diff, axis=0)[None, :])

    def test_zero_widths_are_identity(self):
        feat = ones()
        out = spec_augment(feat, SpecAugmentConfig(F=0, T=0), Rng(0))
        np.testing.assert_array_equal(out.data, feat.data)

    def test_input_is_untouched(self):
        feat = ones()
        before = feat.data.copy()
        spec_augment(feat, SpecAugmentConfig(), Rng(3))
        np.testing.assert_array_equal(feat.data, before)

    def test_same_stream_same_masks(self):
        a = spec_augment(ones(), SpecAugmentConfig(), Rng(9).split(4))
        b = spec_augment(ones(), SpecAugmentConfig(), Rng(9).split(4))
        np.testing.assert_array_equal(a.data, b.data)

    def test_width_must_fit(self):
        with pytest.raises(ConfigError):
            spec_augment(ones(98, 12), SpecAugmentConfig(F=12), Rng(0))
        with pytest.raises(ConfigError):
            SpecAugmentConfig(F=-1)


class TestRandomErasing:
    def test_never_applied_at_zero_probability(self):
        feat = ones()
        for i in range(100):
            out, rect = random_erase(feat, RandomErasingConfig(apply_prob=0.0), Rng(2).split(i), True)
            assert rect is None
            np.testing.assert_array_equal(out.data, feat.data)

    def test_always_applied_at_unit_probability(self):
        feat = ones()
        for i in range(100):
            out, rect = random_erase(feat, RandomErasingConfig(apply_prob=1.0), Rng(2).split(i), True)
            top, left, h, w = rect
            assert np.all(out.data[top:top + h, left:left + w] == 0)
            assert int(np.sum(out.data == 0)) == h * w

    @settings(max_examples=200, deadline=None)
    @given(st.integers(2, 200), st.integers(2, 100), st.integers(0, 2 ** 31))
    def test_rectangle_always_fits(self, u, v, seed):
        rect = erase_rectangle(u, v, RandomErasingConfig(), Rng(seed))
        if rect is not None:
            top, left, h, w = rect
            assert 0 <= top and top + h <= u and 0 <= left and left + w <= v and h >= 1 and w >= 1

    def test_gives_up_after_max_attempts(self):
        cfg = RandomErasingConfig(area_ratio_min=0.5, area_ratio_max=0.9, aspect_ratio_min=3.0,
                                  aspect_ratio_max=3.33, max_attempts=3)
        assert erase_rectangle(2, 100, cfg, Rng(0)) is None

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            RandomErasingConfig(apply_prob=1.5)
        with pytest.raises(ConfigError):
            RandomErasingConfig(area_ratio_min=0.3, area_ratio_max=0.2)


class TestSpeedPerturb:
    def test_frozen_total_length(self):
        assert sum(len(c) for c in speed_perturb_set(tone(440.0), SpeedPerturbConfig())) == 48323

    def test_unit_factor_alone(self):
        clip = tone(440.0)
        out = speed_perturb_set(clip, SpeedPerturbConfig(factors=(1.0,)))
        assert len(out) == 1
        np.testing.assert_array_equal(out[0].samples, clip.samples)

    def test_lengths_per_factor(self):
        assert [len(c) for c in speed_perturb_set(tone(440.0, 0.5), SpeedPerturbConfig())] == [8889, 8000, 7273]

    def test_config_needs_positive_factors(self):
        with pytest.raises(ConfigError):
            SpeedPerturbConfig(factors=(0.0, 1.0))


class TestCropOrPad:
    def test_short_input_is_tiled(self):
        feat = FeatureMatrix(np.arange(90.0)[:, None])
        out = crop_or_pad(feat, 100, Rng(0))
        np.testing.assert_array_equal(out.data[:90, 0], np.arange(90.0))
        np.testing.assert_array_equal(out.data[90:, 0], np.arange(10.0))

    def test_eval_mode_takes_the_centre(self):
        feat = FeatureMatrix(np.arange(250.0)[:, None])
        out = crop_or_pad(feat, 100, mode="eval")
        np.testing.assert_array_equal(out.data[:, 0], np.arange(75.0, 175.0))

    @given(st.integers(101, 400), st.integers(0, 2 ** 31))
    def test_train_crop_is_a_contiguous_window(self, n, seed):
        feat = FeatureMatrix(np.arange(float(n))[:, None])
        out = crop_or_pad(feat, 100, Rng(seed)).data[:, 0]
        np.testing.assert_array_equal(np.diff(out), 1.0)
        assert 0 <= out[0] <= n - 100

    def test_exact_length_is_identity(self):
        feat = FeatureMatrix(np.arange(100.0)[:, None])
        np.testing.assert_array_equal(crop_or_pad(feat, 100, Rng(0)).data, feat.data)

    def test_train_mode_needs_rng(self):
        with pytest.raises(ConfigError):
            crop_or_pad(FeatureMatrix(np.zeros((200, 1))), 100)
