"""Closed-kernel tests for the absorbed radial family.

scipy.special appears here strictly as an oracle -- the library's own I_nu
is the series/asymptotic hybrid in qsdlab.kernels.
"""
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import gammainc, iv

from qsdlab.kernels import (
    bessel_kernel,
    bessel_kernel_plus,
    bessel_transition_lebesgue,
    log_iv,
)


def test_log_iv_against_scipy_half_integer():
    # half-integer indices terminate the asymptotic correction series, so
    # both branches should track scipy to near machine precision
    zs = np.concatenate([np.geomspace(1e-3, 29.0, 40),
                         np.linspace(31.0, 400.0, 40)])
    for nu in (1.5, 2.5, 3.5):
        got = np.exp(log_iv(nu, zs))
        want = iv(nu, zs)
        ok = want < 1e300
        assert np.allclose(got[ok], want[ok], rtol=5e-11), nu


def test_log_iv_against_scipy_generic_index():
    # non-terminating indices keep a ~2e-8 truncation remainder right at the
    # branch switchover, decaying like z^-5 beyond it
    zs = np.concatenate([np.geomspace(1e-3, 29.0, 40),
                         np.linspace(31.0, 400.0, 40)])
    for nu in (1.0, 2.0):
        got = np.exp(log_iv(nu, zs))
        want = iv(nu, zs)
        ok = want < 1e300
        assert np.allclose(got[ok], want[ok], rtol=5e-8), nu
        far = zs > 100.0
        assert np.allclose(np.exp(log_iv(nu, zs[far])), iv(nu, zs[far]),
                           rtol=2e-10), nu


def test_log_iv_frozen_value():
    assert math.exp(log_iv(1.5, 2.0)) == pytest.approx(1.0994731886331102,
                                                       rel=1e-12)


def test_log_iv_branch_junction_is_smooth():
    # the seam between branches must stay below the asymptotic remainder
    for nu, seam in ((1.5, 1e-8), (2.0, 5e-8)):
        below = log_iv(nu, 30.0 - 1e-9)
        above = log_iv(nu, 30.0 + 1e-9)
        assert abs(below - above) < seam


def test_log_iv_handles_huge_arguments():
    # iv itself overflows near z ~ 713; the log form must not
    got = log_iv(1.5, 5000.0)
    want = 5000.0 - 0.5 * math.log(2 * math.pi * 5000.0)
    assert got == pytest.approx(want, abs=1e-3)


def test_log_iv_rejects_bad_input():
    with pytest.raises(ValueError):
        log_iv(-1.5, 2.0)
    with pytest.raises(ValueError):
        log_iv(1.5, -1.0)


# ------------------------------------------------------------- kernels

def test_absorbed_kernel_frozen_value():
    assert bessel_kernel(1.5, 0.5, 1.0, 1.0) == pytest.approx(
        0.14879751539472366, rel=1e-12)


def test_plus_kernel_is_symmetric():
    for (x, y) in ((0.5, 2.0), (1.0, 3.3), (0.1, 0.7)):
        assert bessel_kernel_plus(1.5, 0.8, x, y) == pytest.approx(
            bessel_kernel_plus(1.5, 0.8, y, x), rel=1e-13)


def test_h_transform_identity_pointwise():
    # p_minus = (x/y)^(2 nu) p_plus, both densities against the same m(dy)
    rng_x = np.array([0.3, 1.0, 2.5])
    rng_y = np.geomspace(0.05, 6.0, 31)
    for nu in (1.0, 1.5, 2.0):
        for x in rng_x:
            pm = bessel_kernel(nu, 0.5, x, rng_y)
            pp = bessel_kernel_plus(nu, 0.5, x, rng_y)
            rel = np.abs(pm - (x / rng_y) ** (2 * nu) * pp) / np.maximum(pm, 1e-300)
            assert np.max(rel) < 1e-10


def test_lebesgue_form_is_measure_change():
    y = np.geomspace(0.1, 4.0, 17)
    q = bessel_transition_lebesgue(1.5, 0.5, 1.0, y)
    p = bessel_kernel(1.5, 0.5, 1.0, y)
    assert np.allclose(q, 2.0 * y ** 4 * p, rtol=1e-12)


def test_survival_mass_is_incomplete_gamma():
    # integrating the absorbed kernel over its measure gives the survival
    # probability P_x(T_0 > t) = gammainc(nu, x^2 / 2t)
    nu, t, x = 1.5, 0.5, 1.0
    val, err = quad(lambda y: bessel_transition_lebesgue(nu, t, x, y),
                    0.0, 40.0, limit=200)
    want = gammainc(nu, x * x / (2 * t))
    assert want == pytest.approx(0.42759329552912023, rel=1e-12)
    assert val == pytest.approx(want, rel=1e-9, abs=2 * err)


def test_chapman_kolmogorov_composition():
    # int p(t1,x,z) p(t2,z,y) m(dz) = p(t1+t2,x,y)
    nu, x, y = 1.5, 1.0, 1.0
    t1 = t2 = 0.5

    def integrand(z):
        return (bessel_kernel(nu, t1, x, z) * bessel_kernel(nu, t2, z, y)
                * 2.0 * z ** (2 * nu + 1))

    val, err = quad(integrand, 0.0, 40.0, limit=200)
    direct = bessel_kernel(nu, t1 + t2, x, y)
    assert direct == pytest.approx(0.053990966513188, rel=1e-10)
    assert val == pytest.approx(direct, rel=1e-8, abs=2 * err)


def test_kernel_guards():
    with pytest.raises(ValueError):
        bessel_kernel(0.5, 0.5, 1.0, 1.0)      # below the absorbed range
    with pytest.raises(ValueError):
        bessel_kernel(1.5, -0.5, 1.0, 1.0)
    with pytest.raises(ValueError):
        bessel_transition_lebesgue(1.5, 0.5, 1.0, 0.0)
