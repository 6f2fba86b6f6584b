import numpy as np
import pytest

from imix.augment import (AugPolicy, ViewBatch, cutmix_op, inputmix,
                          inputmix_batch, make_views, mask_noise, mix_batch,
                          mixup_op)
from imix.errors import ConfigError, ShapeError
from imix.mathcore import Rng


class TestMaskNoise:
    def test_p_zero_is_identity(self):
        rng = Rng(0)
        x = rng.normal((5, 4))
        assert np.array_equal(mask_noise(rng, x, 0.0), x)

    def test_p_one_zeroes_everything(self):
        rng = Rng(1)
        x = rng.normal((5, 4)) + 10.0
        assert np.all(mask_noise(rng, x, 1.0) == 0.0)

    def test_masked_fraction(self):
        rng = Rng(2)
        x = np.ones((500, 200))
        masked = mask_noise(rng, x, 0.2)
        frac = float((masked == 0.0).mean())
        assert abs(frac - 0.2) < 0.01

    def test_bad_probability(self):
        with pytest.raises(ConfigError):
            mask_noise(Rng(0), np.ones((2, 2)), 1.5)


class TestMixup:
    def test_lam_one(self):
        x, y = np.array([2.0, 0.0]), np.array([0.0, 2.0])
        assert np.array_equal(mixup_op(x, y, 1.0), x)

    def test_midpoint(self):
        out = mixup_op(np.array([2.0, 0.0]), np.array([0.0, 2.0]), 0.5)
        assert np.array_equal(out, [1.0, 1.0])

    def test_idempotent_on_identical_inputs(self):
        x = Rng(3).normal(6)
        for lam in (0.0, 0.3, 0.8, 1.0):
            assert np.allclose(mixup_op(x, x, lam), x)

    def test_envelope_property(self):
        rng = Rng(4)
        for _ in range(20):
            a, b = rng.normal(8), rng.normal(8)
            lam = float(rng.random())
            out = mixup_op(a, b, lam)
            lo, hi = np.minimum(a, b), np.maximum(a, b)
            assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mixup_op(np.ones(3), np.ones(4), 0.5)


class TestCutmix:
    def test_lam_one_keeps_first(self):
        rng = Rng(5)
        a, b = rng.normal(16), rng.normal(16)
        out, rl = cutmix_op(rng, a, b, 1.0, (4, 4))
        assert np.array_equal(out, a)
        assert rl == 1.0

    def test_lam_zero_takes_second(self):
        rng = Rng(6)
        a, b = rng.normal(16), rng.normal(16)
        out, rl = cutmix_op(rng, a, b, 0.0, (4, 4))
        assert np.array_equal(out, b)
        assert rl == 0.0

    def test_grid_region_exact_cells(self):
        # 4x4 grid, lam=0.75: region of exactly 4 cells, realized 0.75
        rng = Rng(7)
        a = np.zeros(16)
        b = np.ones(16)
        out, rl = cutmix_op(rng, a, b, 0.75, (4, 4))
        assert out.sum() == 4.0
        assert rl == 0.75

    def test_region_is_contiguous_1d(self):
        rng = Rng(8)
        a = np.zeros(10)
        b = np.ones(10)
        out, rl = cutmix_op(rng, a, b, 0.6, (10,))
        taken = np.flatnonzero(out == 1.0)
        assert taken.size == 4  # round(0.4 * 10)
        assert np.array_equal(taken, np.arange(taken[0], taken[0] + 4))
        assert rl == 0.6

    def test_entries_come_from_exactly_one_parent(self):
        rng = Rng(9)
        a = rng.normal(36)
        b = rng.normal(36)
        out, _ = cutmix_op(rng, a, b, 0.5, (6, 6))
        assert np.all((out == a) | (out == b))

    def test_realized_lam_close_to_request(self):
        rng = Rng(10)
        a, b = rng.normal(64), rng.normal(64)
        for lam in (0.1, 0.33, 0.5, 0.77, 0.9):
            _, rl = cutmix_op(rng, a, b, lam, (8, 8))
            assert abs(rl - lam) <= 0.5 / 8 + 1e-12  # side rounding bound

    def test_non_spatial_rejected(self):
        with pytest.raises(ConfigError):
            cutmix_op(Rng(0), np.ones(5), np.ones(5), 0.5, ())

    def test_shape_must_tile_features(self):
        with pytest.raises(ShapeError):
            cutmix_op(Rng(0), np.ones(10), np.ones(10), 0.5, (3, 3))


class TestMixBatch:
    def test_mixup_vectorized_matches_rowwise(self):
        rng = Rng(11)
        x = rng.normal((5, 4))
        perm = rng.permutation(5)
        mixed, rl = mix_batch(x, perm, 0.3, "mixup")
        for i in range(5):
            assert np.allclose(mixed[i], mixup_op(x[i], x[perm[i]], 0.3))
        assert rl == 0.3

    def test_per_sample_lams(self):
        rng = Rng(12)
        x = rng.normal((4, 3))
        perm = rng.permutation(4)
        lams = rng.random(4)
        mixed, rl = mix_batch(x, perm, lams, "mixup")
        assert np.array_equal(rl, lams)
        for i in range(4):
            assert np.allclose(mixed[i], mixup_op(x[i], x[perm[i]], lams[i]))

    def test_cutmix_realized_lam_returned(self):
        rng = Rng(13)
        x = rng.normal((4, 16))
        perm = rng.permutation(4)
        mixed, rl = mix_batch(x, perm, 0.7, "cutmix", (4, 4), rng)
        # region size is a whole number of cells, shared across rows
        assert rl == 0.75
        for i in range(4):
            assert np.all((mixed[i] == x[i]) | (mixed[i] == x[perm[i]]))


class TestInputMix:
    def test_boundary_draw_recovers_principal(self):
        # with aux = principal, any draw returns the principal
        rng = Rng(14)
        p = rng.normal(5)
        out = inputmix(rng, p, [p, p])
        assert np.allclose(out, p)

    def test_principal_coefficient_at_least_half(self):
        rng = Rng(15)
        ones = np.ones(4)
        zeros = np.zeros(4)
        for _ in range(500):
            out = inputmix(rng, ones, [zeros, zeros])
            # output entries equal the principal coefficient here
            assert np.all(out >= 0.5 - 1e-12)
            assert np.all(out <= 1.0 + 1e-12)

    def test_coefficients_sum_to_one(self):
        rng = Rng(16)
        p = np.full(3, 1.0)
        a1 = np.full(3, 1.0)
        a2 = np.full(3, 1.0)
        for _ in range(100):
            out = inputmix(rng, p, [a1, a2])
            assert np.all(np.abs(out - 1.0) < 1e-12)

    def test_batch_version_shapes(self):
        rng = Rng(17)
        x = rng.normal((6, 4))
        out = inputmix_batch(rng, x)
        assert out.shape == x.shape


class TestMakeViews:
    def test_empty_policy_gives_exact_copies(self):
        rng = Rng(18)
        x = rng.normal((5, 4))
        views = make_views(rng, x)
        assert np.array_equal(views.anchors, x)
        assert np.array_equal(views.keys, x)

    def test_views_use_independent_masks(self):
        rng = Rng(19)
        x = np.ones((20, 50))
        views = make_views(rng, x, AugPolicy(mask_p=0.5))
        assert not np.array_equal(views.anchors, views.keys)

    def test_fixed_seed_reproduces_views(self):
        x = Rng(20).normal((6, 5))
        v1 = make_views(Rng(99), x, AugPolicy(mask_p=0.3, gauss_sigma=0.1))
        v2 = make_views(Rng(99), x, AugPolicy(mask_p=0.3, gauss_sigma=0.1))
        assert np.array_equal(v1.anchors, v2.anchors)
        assert np.array_equal(v1.keys, v2.keys)

    def test_virtual_labels_are_identity(self):
        from imix.losses import identity_labels
        views = make_views(Rng(21), Rng(22).normal((7, 3)))
        assert np.array_equal(identity_labels(views.n), np.eye(7))

    def test_inputmix_policy_applies_to_both_views(self):
        rng = Rng(23)
        x = rng.normal((8, 4)) + 5.0
        views = make_views(rng, x, AugPolicy(inputmix=True))
        assert not np.array_equal(views.anchors, x)
        assert not np.array_equal(views.keys, x)

    def test_view_batch_shape_contract(self):
        with pytest.raises(ShapeError):
            ViewBatch(np.ones((3, 2)), np.ones((4, 2)))
