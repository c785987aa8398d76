"""Gradient geometry: deflection, update vector, closed-form optimal rate."""

import numpy as np
import pytest

from unlearn_lab.smoothing import (
    GradientBundle,
    RateDiagnostics,
    SignProfile,
    deflection_vector,
    optimal_smoothing_rate,
    sign_profile,
    update_vector,
)


def bundle_of(g_f, normals, k=None):
    return GradientBundle.from_grads(np.asarray(g_f, float),
                                     [np.asarray(g, float) for g in normals], k)


def grid_argmin_update_norm(bundle, lo=-10.0, hi=10.0, step=1e-4):
    """Brute-force reference: scan ||d(r)||^2 over a dense rate grid."""
    rates = np.arange(lo, hi + step / 2, step)
    g_f = bundle.forget_grad
    u = deflection_vector(bundle)
    # ||d(r)||^2 expanded, evaluated on the whole grid at once
    gg = g_f @ g_f
    gu = g_f @ u
    uu = u @ u
    norms = gg - 2.0 * rates * gu + rates**2 * uu
    return float(rates[np.argmin(norms)])


class TestDeflectionVector:
    def test_collinear_cancellation(self):
        g_f = np.array([2.0, -1.0, 0.5])
        k = 4
        b = bundle_of(g_f, [(1 - 1 / k) * g_f] * 3, k)
        np.testing.assert_allclose(deflection_vector(b), 0.0, atol=1e-15)

    def test_zero_forget_gradient(self):
        normals = [np.array([1.0, 2.0]), np.array([3.0, 0.0])]
        b = bundle_of(np.zeros(2), normals, 3)
        np.testing.assert_allclose(deflection_vector(b), np.mean(normals, axis=0))

    def test_worked_example(self):
        b = bundle_of([1.0, 0.0], [[0.0, 1.0]], 2)
        np.testing.assert_allclose(deflection_vector(b), [-0.5, 1.0], atol=1e-15)


class TestUpdateVector:
    def test_rate_zero_is_plain_ascent(self):
        b = bundle_of([1.0, -2.0], [[0.5, 0.5]], 2)
        np.testing.assert_array_equal(update_vector(b, 0.0), [-1.0, 2.0])

    def test_zero_deflection_constant_in_rate(self):
        g_f = np.array([3.0, 1.0])
        b = bundle_of(g_f, [(1 - 0.5) * g_f], 2)
        for r in (-2.0, 0.0, 5.0):
            np.testing.assert_allclose(update_vector(b, r), -g_f, atol=1e-14)

    def test_worked_example(self):
        b = bundle_of([1.0, 0.0], [[0.0, 1.0]], 2)
        np.testing.assert_allclose(update_vector(b, 1.0), [-1.5, 1.0], atol=1e-15)


class TestOptimalRate:
    def test_orthogonal_deflection_gives_zero(self):
        b = bundle_of([1.0, 0.0], [[0.5, 1.0]], 2)
        np.testing.assert_allclose(deflection_vector(b), [0.0, 1.0], atol=1e-15)
        assert optimal_smoothing_rate(b).rate == pytest.approx(0.0, abs=1e-15)

    def test_worked_example_matches_grid_search(self):
        b = bundle_of([1.0, 0.0], [[0.0, 1.0]], 2)
        diag = optimal_smoothing_rate(b)
        assert diag.rate == pytest.approx(-0.4, abs=1e-12)
        assert diag.inner_product == pytest.approx(-0.5, abs=1e-15)
        assert diag.deflection_norm_sq == pytest.approx(1.25, abs=1e-15)
        assert abs(diag.rate - grid_argmin_update_norm(b)) <= 2e-4

    def test_degenerate_deflection_raises(self):
        g_f = np.array([1.0, 1.0])
        b = bundle_of(g_f, [(1 - 0.5) * g_f], 2)
        with pytest.raises(ValueError, match="degenerate deflection"):
            optimal_smoothing_rate(b)

    def test_random_bundles_against_grid(self):
        rng = np.random.default_rng(123)
        for _ in range(25):
            dim = rng.integers(2, 8)
            k = int(rng.integers(2, 6))
            b = bundle_of(
                rng.normal(size=dim),
                [rng.normal(size=dim) for _ in range(k - 1)],
                k,
            )
            u = deflection_vector(b)
            if u @ u <= 1e-6:
                continue
            diag = optimal_smoothing_rate(b)
            assert abs(diag.rate - grid_argmin_update_norm(b)) <= 2e-4

    def test_quadratic_identity(self):
        rng = np.random.default_rng(7)
        for _ in range(30):
            b = bundle_of(rng.normal(size=5),
                          [rng.normal(size=5) for _ in range(3)], 4)
            g_f, u = b.forget_grad, deflection_vector(b)
            for r in rng.uniform(-5, 5, size=4):
                d = update_vector(b, r)
                expanded = g_f @ g_f - 2 * r * (g_f @ u) + r**2 * (u @ u)
                assert d @ d == pytest.approx(expanded, rel=1e-10)

    def test_optimality_over_probes(self):
        rng = np.random.default_rng(99)
        for _ in range(30):
            b = bundle_of(rng.normal(size=6),
                          [rng.normal(size=6) for _ in range(2)], 3)
            if deflection_vector(b) @ deflection_vector(b) <= 1e-12:
                continue
            diag = optimal_smoothing_rate(b)
            d_star = update_vector(b, diag.rate)
            best = d_star @ d_star
            assert best <= b.forget_grad @ b.forget_grad + 1e-12
            for r in rng.uniform(-10, 10, size=10):
                d = update_vector(b, r)
                assert best <= d @ d + 1e-12

    def test_sign_agreement(self):
        rng = np.random.default_rng(31)
        for _ in range(40):
            b = bundle_of(rng.normal(size=4),
                          [rng.normal(size=4) for _ in range(3)], 4)
            u = deflection_vector(b)
            if u @ u <= 1e-12:
                continue
            diag = optimal_smoothing_rate(b)
            assert np.sign(diag.rate) == np.sign(diag.inner_product)

    def test_scale_covariance(self):
        rng = np.random.default_rng(4)
        b = bundle_of(rng.normal(size=5), [rng.normal(size=5) for _ in range(3)], 4)
        r1 = optimal_smoothing_rate(b).rate
        c = 37.5
        scaled = bundle_of(c * b.forget_grad, [c * g for g in b.normal_grads], 4)
        r2 = optimal_smoothing_rate(scaled).rate
        assert r1 == pytest.approx(r2, rel=1e-12)


class TestBundle:
    def test_mean_validated(self):
        b = bundle_of([1.0, 0.0], [[0.0, 1.0], [1.0, 1.0]], 3)
        b.validate()
        b.normal_grad_mean = b.normal_grad_mean + 1e-6
        with pytest.raises(ValueError, match="mean"):
            b.validate()

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            GradientBundle.from_grads(np.zeros(3), [np.zeros(4)])

    def test_default_slot_count(self):
        b = bundle_of([1.0, 0.0], [[0.0, 1.0], [1.0, 1.0]], None)
        assert b.slot_count == 3


class TestSignProfile:
    def test_orthogonal_bundles_all_zero(self):
        bundles = [bundle_of([1.0, 0.0], [[0.5, s]], 2) for s in (1.0, -2.0)]
        profile = sign_profile(bundles)
        assert profile.signs == [0, 0]
        assert profile.zero == 2

    def test_sign_matches_rate_sign(self):
        b = bundle_of([1.0, 0.0], [[0.0, 1.0]], 2)  # rate -0.4
        profile = sign_profile([b])
        assert profile.signs == [-1]
        assert profile.negative == 1

    def test_duplicated_bundles_double_counts(self):
        rng = np.random.default_rng(0)
        bundles = [
            bundle_of(rng.normal(size=3), [rng.normal(size=3)], 2) for _ in range(5)
        ]
        single = sign_profile(bundles)
        double = sign_profile(bundles + bundles)
        assert double.positive == 2 * single.positive
        assert double.negative == 2 * single.negative
        assert double.zero == 2 * single.zero

    def test_counts_sum_to_instances(self):
        rng = np.random.default_rng(8)
        bundles = [
            bundle_of(rng.normal(size=3), [rng.normal(size=3)], 2) for _ in range(9)
        ]
        p = sign_profile(bundles)
        assert p.positive + p.negative + p.zero == 9

    def test_jsonl_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        bundles = [
            bundle_of(rng.normal(size=3), [rng.normal(size=3)], 2) for _ in range(4)
        ]
        profile = sign_profile(bundles, ["a", "b", "c", "d"])
        path = tmp_path / "signs.jsonl"
        profile.save_jsonl(path)
        loaded = SignProfile.load_jsonl(path)
        assert loaded.instance_ids == profile.instance_ids
        assert loaded.signs == profile.signs
        np.testing.assert_allclose(loaded.inner_products, profile.inner_products)
        assert loaded.summary() == profile.summary()

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            sign_profile([])
