import numpy as np
import pytest

from kspace_bed.core import ComplexField, ExperimentDataset, MeasurementRecord, TargetState, concat_target
from kspace_bed.forward import (
    ForwardOperator,
    KspaceEvidence,
    NoiseModel,
    apply_adjoint,
    apply_forward,
    dft2,
    grad_design_log_likelihood,
    idft2,
    log_likelihood,
    pairwise_design_scores,
    pairwise_log_likelihood,
    sample_measurement,
)
from kspace_bed.masks import DesignParameter, MaskField, MaskSettings, make_mask


def rand_field(g, rows, cols):
    return ComplexField.from_complex(g.standard_normal((rows, cols)) + 1j * g.standard_normal((rows, cols)))


def rand_target(g, rows, cols):
    return concat_target(rand_field(g, rows, cols), g.uniform(size=(rows, cols)))


def full(rows, cols):
    return MaskField(rows, cols, np.ones((rows, cols)), "hard")


def dft_matrix(n):
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n) / np.sqrt(n)


class TestDft:
    def test_all_ones(self):
        k = dft2(ComplexField.from_complex(np.ones((2, 2), dtype=complex))).to_complex()
        np.testing.assert_allclose(k, [[2, 0], [0, 0]], atol=1e-14)

    def test_delta(self):
        x = np.zeros((4, 6), dtype=complex)
        x[0, 0] = 1
        np.testing.assert_allclose(dft2(ComplexField.from_complex(x)).to_complex(), 1 / np.sqrt(24))

    def test_matches_direct_sum(self, rng):
        x = rand_field(rng, 5, 3).to_complex()
        direct = dft_matrix(5) @ x @ dft_matrix(3).T
        np.testing.assert_allclose(dft2(ComplexField.from_complex(x)).to_complex(), direct, atol=1e-12)

    def test_inverse_and_parseval(self, rng):
        f = rand_field(rng, 32, 32)
        np.testing.assert_allclose(idft2(dft2(f)).to_complex(), f.to_complex(), atol=1e-10)
        assert np.linalg.norm(dft2(f).to_complex()) == pytest.approx(np.linalg.norm(f.to_complex()), abs=1e-10)


class TestForward:
    def test_kronecker_form(self, rng):
        r, c = 4, 4
        w = (rng.uniform(size=(r, c)) > 0.5).astype(float)
        theta = rand_target(rng, r, c)
        # column-major vec: vec(F_r X F_c^T) = (F_c kron F_r) vec(X)
        A = np.diag(w.ravel(order="F")) @ np.kron(dft_matrix(c), dft_matrix(r))
        y = A @ theta.image.to_complex().ravel(order="F")
        out = apply_forward(ForwardOperator(MaskField(r, c, w, "hard")), theta).to_complex()
        np.testing.assert_allclose(out.ravel(order="F"), y, atol=1e-10)

    def test_adjoint(self, rng):
        r, c = 4, 4
        op = ForwardOperator(MaskField(r, c, rng.uniform(size=(r, c)), "soft"))
        u = rand_target(rng, r, c)
        v = rand_field(rng, r, c)
        lhs = np.vdot(v.to_complex(), apply_forward(op, u).to_complex())
        adj = apply_adjoint(op, v)
        n = r * c
        rhs = np.vdot(adj[:n] + 1j * adj[n : 2 * n], u.image.to_complex().ravel())
        assert abs(lhs - rhs) < 1e-10
        assert not np.any(adj[2 * n :])

    def test_zero_image(self, rng):
        t = concat_target(ComplexField.zeros(4, 4), rng.uniform(size=(4, 4)))
        assert not np.any(apply_forward(ForwardOperator(full(4, 4)), t).to_complex())

    def test_full_mask_is_dft(self, rng):
        t = rand_target(rng, 6, 5)
        np.testing.assert_allclose(
            apply_forward(ForwardOperator(full(6, 5)), t).to_complex(), dft2(t.image).to_complex()
        )

    def test_segmentation_has_no_effect(self, rng):
        t = rand_target(rng, 4, 4)
        t2 = concat_target(t.image, rng.uniform(size=(4, 4)))
        op = ForwardOperator(full(4, 4))
        assert apply_forward(op, t) == apply_forward(op, t2)


class TestMeasurement:
    def test_zero_noise_limit(self, rng):
        t = rand_target(rng, 4, 4)
        op = ForwardOperator(full(4, 4))
        y = sample_measurement(op, t, NoiseModel(1e-300), 0)
        np.testing.assert_allclose(y.to_complex(), apply_forward(op, t).to_complex())

    def test_noise_std(self):
        t = concat_target(ComplexField.zeros(100, 1000), np.zeros((100, 1000)))
        y = sample_measurement(ForwardOperator(full(100, 1000)), t, NoiseModel(0.3), 7).to_complex()
        assert np.std(y.real) == pytest.approx(0.3, rel=0.02)
        assert np.std(y.imag) == pytest.approx(0.3, rel=0.02)

    def test_deterministic_and_on_support(self, rng):
        t = rand_target(rng, 8, 8)
        w = np.zeros((8, 8))
        w[2] = 1
        op = ForwardOperator(MaskField(8, 8, w, "hard"))
        a = sample_measurement(op, t, NoiseModel(0.5), 3)
        assert a == sample_measurement(op, t, NoiseModel(0.5), 3)
        assert not np.any(a.to_complex()[w == 0])

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            NoiseModel(0.0)


class TestLogLikelihood:
    def test_maximum_is_constant(self, rng):
        t = rand_target(rng, 4, 4)
        w = np.zeros((4, 4))
        w[:2] = 1
        op = ForwardOperator(MaskField(4, 4, w, "hard"))
        y = apply_forward(op, t)
        s = 0.7
        # 8 sampled pixels, 16 real components, each -log(2 pi s^2) / 2
        assert log_likelihood(op, t, y, NoiseModel(s)) == pytest.approx(-16 / 2 * np.log(2 * np.pi * s**2))

    def test_quadratic_scaling(self):
        op = ForwardOperator(full(1, 1))
        t = concat_target(ComplexField.zeros(1, 1), np.zeros((1, 1)))
        y = ComplexField(1, 1, [1.0], [0.0])
        def quad(s):
            return log_likelihood(op, t, y, NoiseModel(s)) + np.log(2 * np.pi * s**2)
        assert quad(1.0) == pytest.approx(-0.5)
        assert quad(2.0) == pytest.approx(-0.125)

    def test_rejects_off_support(self, rng):
        w = np.zeros((2, 2))
        w[0, 0] = 1
        op = ForwardOperator(MaskField(2, 2, w, "hard"))
        with pytest.raises(ValueError):
            log_likelihood(op, rand_target(rng, 2, 2), ComplexField(2, 2, np.ones(4), np.zeros(4)), NoiseModel(1))

    def test_concave_in_image(self, rng):
        op = ForwardOperator(full(4, 4))
        y = dft2(rand_field(rng, 4, 4))
        n = NoiseModel(0.4)
        for _ in range(20):
            a, b = rand_target(rng, 4, 4), rand_target(rng, 4, 4)
            mid = TargetState.from_vector(0.5 * (a.to_vector() + b.to_vector()), 4, 4)
            assert log_likelihood(op, mid, y, n) >= 0.5 * (log_likelihood(op, a, y, n) + log_likelihood(op, b, y, n))


class TestDesignGradient:
    def setup_method(self):
        self.g = np.random.default_rng(5)
        self.shape = (16, 16)
        self.settings = MaskSettings()

    def _value(self, xi, theta, eps, theta_p, sigma):
        m = make_mask(xi, self.shape, self.settings, "soft").weights
        a = dft2(theta.image).to_complex()
        b = dft2(theta_p.image).to_complex()
        y = m * a + sigma * eps
        return -np.sum(np.abs(y - m * b) ** 2) / (2 * sigma**2)

    def test_self_pair_without_noise_is_zero(self):
        xi = DesignParameter("radial", [0.3, 1.4], 2)
        t = rand_target(self.g, *self.shape)
        g = grad_design_log_likelihood(xi, t, np.zeros(self.shape), t, NoiseModel(0.3), self.shape)
        np.testing.assert_allclose(g, 0.0, atol=1e-10)

    def test_matches_finite_differences(self):
        xi = DesignParameter("radial", [0.3, 1.4, 2.5], 3)
        sigma = 0.3
        for _ in range(3):
            t, tp = rand_target(self.g, *self.shape), rand_target(self.g, *self.shape)
            eps = self.g.standard_normal(self.shape) + 1j * self.g.standard_normal(self.shape)
            g = grad_design_log_likelihood(xi, t, eps, tp, NoiseModel(sigma), self.shape)
            h = 1e-4
            fd = []
            for d in range(3):
                e = np.zeros(3)
                e[d] = h
                fd.append(
                    (self._value(xi.with_values(xi.values + e), t, eps, tp, sigma)
                     - self._value(xi.with_values(xi.values - e), t, eps, tp, sigma)) / (2 * h)
                )
            np.testing.assert_allclose(g, fd, rtol=1e-3)

    def test_locality(self):
        # discrepancy confined to one pixel far from the second line
        shape = (32, 32)
        xi = DesignParameter("cartesian", [0.0, 12.0], 2)
        img = np.zeros(shape, dtype=complex)
        t = concat_target(ComplexField.from_complex(img), np.zeros(shape))
        k = np.zeros(shape, dtype=complex)
        k[1, 3] = 1.0
        tp = concat_target(idft2(ComplexField.from_complex(k)), np.zeros(shape))
        g = grad_design_log_likelihood(xi, t, np.zeros(shape), tp, NoiseModel(1.0), shape)
        assert g[0] != 0
        assert abs(g[1]) < 1e-6 * abs(g[0])

    def test_hard_mode_rejected(self):
        xi = DesignParameter("radial", [0.3], 1)
        t = rand_target(self.g, *self.shape)
        with pytest.raises(ValueError):
            grad_design_log_likelihood(xi, t, np.zeros(self.shape), t, NoiseModel(1), self.shape, mode="hard")


class TestBatched:
    def test_pairwise_scores_match_single(self, rng):
        shape = (8, 8)
        xi = DesignParameter("radial", [0.3, 1.7], 2)
        m, dm = make_mask(xi, shape, MaskSettings(), "soft", with_grad=True)
        ts = [rand_target(rng, *shape) for _ in range(3)]
        tps = [rand_target(rng, *shape) for _ in range(2)]
        eps = rng.standard_normal((3,) + shape) + 1j * rng.standard_normal((3,) + shape)
        a = np.stack([dft2(t.image).to_complex() for t in ts])
        b = np.stack([dft2(t.image).to_complex() for t in tps])
        G = pairwise_design_scores(a, b, eps, m.weights, dm, 0.4)
        for i in range(3):
            for j in range(2):
                g = grad_design_log_likelihood(xi, ts[i], eps[i], tps[j], NoiseModel(0.4), shape)
                np.testing.assert_allclose(G[i, j], g, rtol=1e-10, atol=1e-12)

    def test_pairwise_loglik(self, rng):
        y = rng.standard_normal((3, 4, 4)) + 1j * rng.standard_normal((3, 4, 4))
        b = rng.standard_normal((5, 4, 4)) + 1j * rng.standard_normal((5, 4, 4))
        m = rng.uniform(size=(4, 4))
        L = pairwise_log_likelihood(y, b, m, 0.5)
        direct = -np.sum(np.abs(y[:, None] - m * b[None]) ** 2, axis=(2, 3)) / (2 * 0.25)
        np.testing.assert_allclose(L, direct, rtol=1e-10)

    def test_evidence_accumulates(self, rng):
        shape = (4, 4)
        recs = []
        for _ in range(2):
            w = (rng.uniform(size=shape) > 0.5).astype(float)
            y = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) * w
            recs.append(MeasurementRecord(None, ComplexField.from_complex(y), 0.5, w))
        ev = KspaceEvidence.from_records(ExperimentDataset(recs), shape)
        np.testing.assert_allclose(ev.precision, sum(r.mask**2 for r in recs) / 0.25)
        np.testing.assert_allclose(ev.info, sum(r.mask * r.measurement.to_complex() for r in recs) / 0.25)
