import numpy as np
import pytest

from roughfem import femcore, homogenization as hg
from roughfem.homogenization import (B0, B1, B2, B0_TILDE, CompatibilityError,
                                     HomogenizedCase, StripProblem,
                                     effective_flux, solve_homogenized,
                                     solve_strip, first_order_field)


GAMMA = lambda t: (np.cos(2 * np.pi * t) - 1.0) / 10.0
DGAMMA = lambda t: -2 * np.pi * np.sin(2 * np.pi * t) / 10.0
G2 = lambda t: (1.0 - np.cos(2.0 * np.pi * t)) / 2.0

# independent quadrature oracle (scipy.integrate.quad, frozen)
R_EXACT = 1.0923835473311776


def test_effective_flux_flat():
    r, gbar, flux = effective_flux(lambda t: np.zeros_like(t),
                                   lambda t: t ** 2)
    assert r == pytest.approx(1.0, abs=1e-14)
    assert gbar == pytest.approx(1.0 / 3.0, abs=1e-12)
    assert flux == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_effective_flux_constant_g_mean_one():
    r, gbar, _ = effective_flux(DGAMMA, lambda t: np.ones_like(t))
    assert gbar == pytest.approx(1.0, abs=1e-13)


def test_effective_flux_cosine_oracle():
    r, gbar, flux = effective_flux(DGAMMA, G2)
    assert r == pytest.approx(R_EXACT, abs=1e-10)
    # by symmetry of cos * sqrt(1 + c sin^2), the weighted mean is exactly 1/2
    assert gbar == pytest.approx(0.5, abs=1e-12)
    assert flux == pytest.approx(r / 2.0, abs=1e-12)


def test_homogenized_patch_test():
    case = HomogenizedCase(f=None, flux=0.0,
                           dirichlet=lambda x, y: (1.0 - y) / 2.0, N=8,
                           dirichlet_bottom=True)
    u = solve_homogenized(case)
    v = u.mesh.vertices
    assert np.abs(u.values - (1.0 - v[:, 1]) / 2.0).max() < 1e-10


def test_homogenized_symmetry():
    case = HomogenizedCase(f=lambda x, y: np.ones_like(x), flux=0.0,
                           dirichlet=0.0, N=16)
    u = solve_homogenized(case)
    v = u.mesh.vertices
    # mirror x -> 1 - x maps grid nodes to grid nodes
    order = np.lexsort((v[:, 0], v[:, 1]))
    mirr = np.lexsort((np.round((1.0 - v[:, 0]) * 16), np.round(v[:, 1] * 16)))
    assert np.abs(u.values[order] - u.values[mirr]).max() < 1e-9
    k = int(np.argmax(u.values))
    assert 0.0 < v[k, 0] < 1.0 and v[k, 1] < 1.0  # interior or bottom, not on walls


def test_homogenized_refinement_oracle():
    r, _, flux = effective_flux(DGAMMA, G2)
    dirich = lambda x, y: (1.0 - y) / 2.0
    coarse = solve_homogenized(HomogenizedCase(None, flux, dirich, 16))
    fine = solve_homogenized(HomogenizedCase(None, flux, dirich, 32))
    ev = fine.as_evaluator()
    vals, _ = ev(coarse.mesh.vertices)
    diff = np.sqrt(np.mean((vals - coarse.values) ** 2))
    finer = solve_homogenized(HomogenizedCase(None, flux, dirich, 64))
    vals2, _ = finer.as_evaluator()(fine.mesh.vertices)
    diff2 = np.sqrt(np.mean((vals2 - fine.values) ** 2))
    # rms nodal difference decreases at O(h^2); the max norm is limited by
    # the mixed boundary-condition corners and only halves per level
    assert diff2 < diff / 3.0


def test_strip_flat_profile_is_zero():
    zero = lambda t: np.zeros_like(t)
    for did in (B1, B2):
        beta = solve_strip(StripProblem(zero, zero, did))
        assert np.abs(beta.values).max() < 1e-13


def test_strip_data_zero_mean():
    for did, g in ((B0, G2), (B1, None), (B2, None), (B0_TILDE, G2)):
        p = StripProblem(GAMMA, DGAMMA, did, g=g)
        data = p.neumann_data()
        t = np.linspace(0, 1, 20001)
        w = np.sqrt(1 + DGAMMA(t) ** 2)
        mean = np.trapezoid(data(t) * w, t)
        assert abs(mean) < 1e-8


def test_strip_validation():
    with pytest.raises(ValueError):
        StripProblem(GAMMA, DGAMMA, "B7")
    with pytest.raises(ValueError):
        StripProblem(GAMMA, DGAMMA, B0)          # needs g
    with pytest.raises(ValueError):
        StripProblem(GAMMA, DGAMMA, B1, L=2.0)   # too little headroom
    with pytest.raises(CompatibilityError):
        # constant flux: g/<g> - 1 fine, but zero-mean g breaks B0_TILDE
        solve_strip(StripProblem(GAMMA, DGAMMA, B0_TILDE,
                                 g=lambda t: np.sin(2 * np.pi * t)))


@pytest.fixture(scope="module")
def beta1():
    return solve_strip(StripProblem(GAMMA, DGAMMA, B1))


def test_strip_decay_geometric(beta1):
    m = beta1.mesh
    amps = []
    for height in (1.0, 2.0, 3.0):
        sel = np.abs(m.vertices[:, 1] - height) < 1e-9
        amps.append(np.abs(beta1.values[sel]).max())
    # fitted exponential decay rate is positive (Fourier argument: 2 pi)
    delta = np.polyfit([1.0, 2.0, 3.0], np.log(amps), 1)[0]
    assert -delta > 0.0
    assert amps[1] < amps[0] / 10 and amps[2] < amps[1] / 10


def test_strip_truncation_doubling(beta1):
    tall = solve_strip(StripProblem(GAMMA, DGAMMA, B1, L=10.0))
    pts = np.random.default_rng(5).random((400, 2))
    pts[:, 1] *= 2.0
    a, _ = beta1.as_evaluator()(pts)
    b, _ = tall.as_evaluator()(pts)
    assert np.abs(a - b).max() <= 1e-6


def test_strip_periodic_translation(beta1):
    # shifting gamma by a full period leaves the solution unchanged
    shifted = solve_strip(StripProblem(lambda t: GAMMA(t + 1.0),
                                       lambda t: DGAMMA(t + 1.0), B1))
    assert np.abs(shifted.values - beta1.values).max() < 1e-9


def test_strip_lateral_periodicity(beta1):
    m = beta1.mesh
    left = np.flatnonzero(np.abs(m.vertices[:, 0]) < 1e-13)
    right = np.flatnonzero(np.abs(m.vertices[:, 0] - 1.0) < 1e-13)
    left = left[np.argsort(m.vertices[left, 1])]
    right = right[np.argsort(m.vertices[right, 1])]
    assert np.array_equal(beta1.values[left], beta1.values[right])


def test_first_order_field_zero_betas():
    u0 = solve_homogenized(HomogenizedCase(lambda x, y: np.ones_like(x),
                                           0.0, 0.0, 16))
    ev = first_order_field(u0, {}, 1 / 8)
    pts = np.random.default_rng(2).random((30, 2))
    vals, grads = ev(pts)
    v0, g0 = u0.as_evaluator()(pts)
    assert np.allclose(vals, v0) and np.allclose(grads, g0)


def test_first_order_field_combines_layers(beta1):
    u0 = solve_homogenized(HomogenizedCase(lambda x, y: np.ones_like(x),
                                           0.0, 0.0, 16))
    eps = 1 / 8
    ev = first_order_field(u0, {B1: beta1}, eps)
    pts = np.array([[0.40, 0.01], [0.40, 0.90]])
    vals, _ = ev(pts)
    v0, g0 = u0.as_evaluator()(pts)
    bval, _ = beta1.as_evaluator()(
        np.array([[np.mod(0.40 / eps, 1.0), 0.01 / eps]]))
    # near the boundary the correction is active...
    assert vals[0] == pytest.approx(v0[0] + eps * bval[0] * g0[0, 0], abs=1e-12)
    # ... far above the (rescaled) truncation height it vanishes
    assert vals[1] == pytest.approx(v0[1], abs=1e-15)
    assert ev.truncation_flagged[0]


def test_strip_cache_roundtrip(tmp_path, beta1):
    p = StripProblem(GAMMA, DGAMMA, B1)
    a = hg.solve_strip_cached(p, str(tmp_path))
    b = hg.solve_strip_cached(p, str(tmp_path))
    assert np.array_equal(a.values, b.values)
    assert np.abs(a.values - beta1.values).max() < 1e-12
