import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coopsync.errors import SingularBelief
from coopsync.gaussian import GaussianNat, equilibrate, inv_sym, is_singular, product, solve_sym


def _spd(a, b, c):
    m = np.array([[a, 0.0], [b, c]])
    return m @ m.T + 1e-3 * np.eye(2)


spd = st.builds(_spd, st.floats(0.1, 10.0), st.floats(-10.0, 10.0), st.floats(0.1, 10.0))
vec = st.lists(st.floats(-100.0, 100.0), min_size=2, max_size=2).map(np.array)


class TestGaussianNat:
    @settings(max_examples=100, deadline=None)
    @given(spd, vec)
    def test_moments_round_trip(self, cov, mean):
        g = GaussianNat.from_moments(mean, cov)
        np.testing.assert_allclose(g.cov, cov, rtol=1e-9, atol=1e-12)
        np.testing.assert_allclose(g.mean, mean, rtol=1e-8, atol=1e-8)

    @settings(max_examples=100, deadline=None)
    @given(spd, spd, vec, vec)
    def test_product_adds_natural_parameters(self, p1, p2, h1, h2):
        g = product(GaussianNat(p1, h1), GaussianNat(p2, h2))
        np.testing.assert_allclose(g.precision, p1 + p2)
        np.testing.assert_allclose(g.info, h1 + h2)
        # mean of a product by a dense solve
        np.testing.assert_allclose(g.mean, np.linalg.solve(p1 + p2, h1 + h2), rtol=1e-8, atol=1e-10)

    def test_badly_scaled_precision(self):
        # skew precision ~1e16 next to phase precision ~1e-2, against a 50-digit solve
        p = np.array([[1e16, 3e6], [3e6, 1e-2 + 9e-4]])
        h = p @ np.array([1.0, -2.0])
        mpmath.mp.dps = 50
        pm = mpmath.matrix(p.tolist())
        ref = np.array(mpmath.lu_solve(pm, mpmath.matrix(h.tolist())).tolist(), dtype=float)[:, 0]
        ref_inv = np.array(mpmath.inverse(pm).tolist(), dtype=float)
        g = GaussianNat(p, h)
        # accurate in the equilibrated coordinates; the small phase entry sits on a
        # cancellation that no double-precision solve resolves componentwise
        _, d = equilibrate(p)
        for x in (g.mean, solve_sym(p, h)):
            assert np.max(np.abs(d * (x - ref))) <= 1e-13 * np.max(np.abs(d * ref))
        np.testing.assert_allclose(np.outer(d, d) * inv_sym(p), np.outer(d, d) * ref_inv, atol=1e-13)

    def test_singular_raises(self):
        g = GaussianNat(np.array([[1.0, 1.0], [1.0, 1.0]]), np.zeros(2))
        assert is_singular(g.precision)
        with pytest.raises(SingularBelief):
            _ = g.mean
        with pytest.raises(SingularBelief):
            _ = g.cov

    def test_uninformative(self):
        g = GaussianNat.uninformative()
        assert g.is_uninformative
        assert (g * GaussianNat(np.eye(2), np.ones(2))).info.tolist() == [1.0, 1.0]

    def test_blend(self):
        a = GaussianNat(np.eye(2) * 4.0, np.array([4.0, 0.0]))
        b = GaussianNat(np.eye(2) * 2.0, np.array([0.0, 2.0]))
        c = a.blend(b, 0.25)
        np.testing.assert_allclose(c.precision, np.eye(2) * 2.5)
        np.testing.assert_allclose(c.info, [1.0, 1.5])
        assert a.blend(b, 1.0) is a

    def test_precision_is_symmetrized(self):
        g = GaussianNat(np.array([[2.0, 1.0], [0.0, 2.0]]), np.zeros(2))
        np.testing.assert_allclose(g.precision, [[2.0, 0.5], [0.5, 2.0]])
        assert g.is_psd()
