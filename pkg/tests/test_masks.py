import numpy as np
import pytest

from kspace_bed.masks import (
    DesignParameter,
    MaskField,
    MaskSettings,
    accumulate_masks,
    cartesian_mask,
    empty_mask,
    kspace_grid,
    make_mask,
    radial_mask,
    random_design,
    sampled_fraction,
    spiral_mask,
    wrap_design,
)


def radial(*angles):
    return DesignParameter("radial", list(angles), len(angles))


def fd_check(xi, shape, settings, h=1e-6, rtol=1e-4, probes=40, seed=0):
    m, g = make_mask(xi, shape, settings, "soft", with_grad=True)
    g_rng = np.random.default_rng(seed)
    rows = g_rng.integers(shape[0], size=probes)
    cols = g_rng.integers(shape[1], size=probes)
    for d in range(xi.dim):
        e = np.zeros(xi.dim)
        e[d] = h
        up = make_mask(xi.with_values(xi.values + e), shape, settings, "soft").weights
        dn = make_mask(xi.with_values(xi.values - e), shape, settings, "soft").weights
        fd = (up - dn) / (2 * h)
        np.testing.assert_allclose(g[d][rows, cols], fd[rows, cols], rtol=rtol, atol=1e-7)


class TestRadial:
    def test_distance_equal_width_gives_half(self):
        # horizontal line (angle 0) through the centre; pixel at ky = 1 is 1 away
        m = radial_mask(radial(0.0), 8, 8, width=1.0, temperature=0.3)
        ky, _ = kspace_grid(8, 8)
        np.testing.assert_allclose(m.weights[ky == 1], 0.5)

    def test_low_temperature_matches_hard(self):
        xi = radial(0.4, 1.9)
        hard = radial_mask(xi, 32, 32, mode="hard")
        soft = radial_mask(xi, 32, 32, temperature=1e-4)
        ky, kx = kspace_grid(32, 32)
        d = np.min([np.abs(kx * np.sin(a) - ky * np.cos(a)) for a in xi.values], axis=0)
        far = np.abs(d - 0.5) > 3e-4
        np.testing.assert_allclose(soft.weights[far], hard.weights[far], atol=1e-12)

    def test_duplicate_angles_idempotent_hard(self):
        np.testing.assert_array_equal(
            radial_mask(radial(0.7, 0.7), 16, 16, mode="hard").weights,
            radial_mask(radial(0.7), 16, 16, mode="hard").weights,
        )

    def test_rotation_by_pi(self):
        a = radial_mask(radial(0.3, 2.0), 16, 16).weights
        b = radial_mask(radial(0.3 + np.pi, 2.0 - np.pi), 16, 16).weights
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_gradient_matches_fd(self):
        fd_check(radial(0.37, 1.21, 2.9), (32, 32), MaskSettings())

    def test_segment_gradient_matches_fd(self):
        fd_check(radial(0.37, 2.2), (32, 32), MaskSettings(line_radius=9.0))

    def test_segment_limits_extent(self):
        m = radial_mask(radial(0.0), 64, 64, mode="hard", line_radius=10)
        _, kx = kspace_grid(64, 64)
        assert not np.any(m.weights[np.abs(kx) > 10.5])
        assert sampled_fraction(m) == pytest.approx(21 / 4096)

    @pytest.mark.parametrize("kw", [{"width": 0.0}, {"temperature": 0.0}, {"temperature": -1.0}])
    def test_invalid_geometry(self, kw):
        with pytest.raises(ValueError):
            radial_mask(radial(0.1), 8, 8, **kw)


class TestCartesian:
    def test_hard_row(self):
        m = cartesian_mask(DesignParameter("cartesian", [3.0], 1), 8, 8, mode="hard")
        expect = np.zeros((8, 8))
        expect[3] = 1
        np.testing.assert_array_equal(m.weights, expect)
        assert sampled_fraction(m) == 0.125

    def test_soft_symmetric(self):
        m = cartesian_mask(DesignParameter("cartesian", [0.0], 1), 16, 16).weights
        ky, _ = kspace_grid(16, 16)
        for k in range(1, 7):
            np.testing.assert_allclose(m[ky == k], m[ky == -k])

    def test_gradient_matches_fd(self):
        fd_check(DesignParameter("cartesian", [0.3, -2.6], 2), (32, 32), MaskSettings())


class TestSpiral:
    def test_degenerate_is_centre_point(self):
        m = spiral_mask(DesignParameter("spiral", [0, 0, 0], 1), 16, 16, mode="hard")
        assert m.weights[0, 0] == 1 and m.weights.sum() == 1

    def test_phase_periodicity(self):
        a = spiral_mask(DesignParameter("spiral", [1.0, 1.5, 0.4], 1), 16, 16).weights
        b = spiral_mask(DesignParameter("spiral", [1.0, 1.5, 0.4 + 2 * np.pi], 1), 16, 16).weights
        np.testing.assert_allclose(a, b, atol=1e-9)

    def test_interleaved_cover_more(self):
        one = spiral_mask(DesignParameter("spiral", [0.5, 1.0, 0.0], 1), 32, 32, mode="hard")
        vals = [v for k in range(3) for v in (0.5, 1.0, 2 * np.pi * k / 3)]
        three = spiral_mask(DesignParameter("spiral", vals, 3), 32, 32, mode="hard")
        assert sampled_fraction(three) >= sampled_fraction(one)

    def test_negative_growth(self):
        with pytest.raises(ValueError):
            spiral_mask(DesignParameter("spiral", [0, -1, 0], 1), 8, 8)

    def test_gradient_matches_fd(self):
        # the nearest-sample distance is piecewise smooth; probe a smooth region
        xi = DesignParameter("spiral", [0.7, 0.9, 0.3], 1)
        fd_check(xi, (24, 24), MaskSettings(spiral_turns=3.0), h=1e-7, rtol=1e-3)


class TestUnion:
    def test_with_empty_is_identity(self):
        m = radial_mask(radial(0.5), 8, 8, mode="hard")
        np.testing.assert_array_equal(accumulate_masks([m, empty_mask(8, 8)]).weights, m.weights)

    def test_self_union_hard(self):
        m = radial_mask(radial(0.5), 8, 8, mode="hard")
        np.testing.assert_array_equal(accumulate_masks([m, m]).weights, m.weights)

    def test_disjoint_rows(self):
        a = cartesian_mask(DesignParameter("cartesian", [1.0], 1), 8, 8, mode="hard")
        b = cartesian_mask(DesignParameter("cartesian", [3.0], 1), 8, 8, mode="hard")
        u = accumulate_masks([a, b])
        assert u.mode == "hard"
        assert sampled_fraction(u) == 0.25

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            accumulate_masks([empty_mask(4, 4), empty_mask(4, 5)])

    def test_fraction_extremes(self):
        assert sampled_fraction(MaskField(4, 4, np.ones((4, 4)), "hard")) == 1.0
        assert sampled_fraction(empty_mask(4, 4)) == 0.0

    def test_hard_weights_binary(self):
        with pytest.raises(ValueError):
            MaskField(2, 2, np.full((2, 2), 0.5), "hard")


class TestDesign:
    def test_wrap(self):
        np.testing.assert_allclose(wrap_design(radial(np.pi + 0.1)).values, [0.1])

    def test_dimension_checks(self):
        with pytest.raises(ValueError):
            DesignParameter("radial", [0.1, 0.2], 3)
        with pytest.raises(ValueError):
            DesignParameter("spiral", [0.1, 0.2], 1)
        with pytest.raises(ValueError):
            DesignParameter("zigzag", [0.1], 1)

    def test_random_design_range(self, rng):
        xi = random_design("radial", 500, (16, 16), rng)
        assert xi.dim == 500
        assert np.all((xi.values >= 0) & (xi.values < np.pi))
