"""Compiled kernel core agrees with the numpy reference backend."""

import numpy as np
import pytest

from unlearn_lab import _kernels
from unlearn_lab._kernels import np_ref

try:
    from unlearn_lab._kernels import _core
except ImportError:
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled core unavailable")


def test_selected_backend_exposed():
    assert _kernels.BACKEND in ("compiled", "numpy")


@needs_core
class TestParity:
    def test_lcs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            a = rng.integers(0, 6, size=rng.integers(0, 25))
            b = rng.integers(0, 6, size=rng.integers(0, 25))
            assert _core.lcs_len(a, b) == np_ref.lcs_len(a, b)

    def test_softmax_xent(self):
        rng = np.random.default_rng(1)
        logits = rng.normal(scale=4.0, size=(64, 50))
        targets = rng.integers(0, 50, size=64)
        mask = (rng.random(64) < 0.7).astype(float)
        s1, p1 = _core.softmax_xent_fwd(logits, targets, mask)
        s2, p2 = np_ref.softmax_xent_fwd(logits, targets, mask)
        assert s1 == pytest.approx(s2, rel=1e-14)
        np.testing.assert_allclose(p1, p2, atol=1e-14)
        g1 = _core.softmax_xent_bwd(p1, targets, mask, 0.125)
        g2 = np_ref.softmax_xent_bwd(p2, targets, mask, 0.125)
        np.testing.assert_allclose(g1, g2, atol=1e-15)

    def test_scatter_add(self):
        rng = np.random.default_rng(2)
        ids = rng.integers(0, 10, size=40)
        vals = rng.normal(size=(40, 8))
        out1 = np.zeros((10, 8))
        out2 = np.zeros((10, 8))
        _core.scatter_add_rows(out1, ids, vals)
        np_ref.scatter_add_rows(out2, ids, vals)
        np.testing.assert_allclose(out1, out2, atol=1e-14)

    def test_adamw(self):
        rng = np.random.default_rng(3)
        theta = rng.normal(size=200)
        grad = rng.normal(size=200)
        m = rng.normal(size=200) * 0.01
        v = np.abs(rng.normal(size=200)) * 0.01
        args = (5, 1e-3, 0.9, 0.999, 1e-8, 0.01)
        t1, m1, v1 = theta.copy(), m.copy(), v.copy()
        t2, m2, v2 = theta.copy(), m.copy(), v.copy()
        _core.adamw_step(t1, grad, m1, v1, *args)
        np_ref.adamw_step(t2, grad, m2, v2, *args)
        np.testing.assert_allclose(t1, t2, atol=1e-15)
        np.testing.assert_allclose(m1, m2, atol=1e-16)
        np.testing.assert_allclose(v1, v2, atol=1e-16)


class TestReferenceKernels:
    def test_lcs_known(self):
        assert np_ref.lcs_len(np.array([1, 2, 3, 4]), np.array([2, 4])) == 2
        assert np_ref.lcs_len(np.array([], dtype=int), np.array([1])) == 0

    def test_xent_uniform(self):
        logits = np.zeros((3, 8))
        s, p = np_ref.softmax_xent_fwd(logits, np.array([0, 1, 2]), np.ones(3))
        assert s == pytest.approx(3 * np.log(8))
        np.testing.assert_allclose(p, 1 / 8, atol=1e-15)

    def test_masked_rows_skipped(self):
        rng = np.random.default_rng(4)
        logits = rng.normal(size=(4, 6))
        targets = np.array([1, 2, 3, 4])
        s_all, _ = np_ref.softmax_xent_fwd(logits, targets, np.ones(4))
        s_half, _ = np_ref.softmax_xent_fwd(logits, targets,
                                            np.array([1.0, 0.0, 1.0, 0.0]))
        assert s_half < s_all
