import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcfsmooth.energy import build_stack, integrate
from pcfsmooth.errors import NoSchedule
from pcfsmooth.fractal import interval, sierpinski_gasket
from pcfsmooth.heat import (
    CutoffRegions,
    build_schedule,
    c_k,
    eigendecompose,
    estimate_D,
    fit_subgaussian,
    heat_apply,
    heat_cutoff,
    l2_norm,
    resistance_distance,
    resistance_matrix,
    schedule_feasibility,
    subgaussian_bound,
)


@pytest.fixture(scope="module")
def specI(I9):
    return eigendecompose(I9, "neumann")


@pytest.fixture(scope="module")
def dist9(I9):
    return resistance_matrix(I9)


def _K(st):
    x = st.table.points[:, 0]
    return (x >= 3 / 8 - 1e-12) & (x <= 5 / 8 + 1e-12)


def test_dirichlet_lambda1(I10):
    lam = eigendecompose(I10, "dirichlet").eigenvalues[0]
    assert abs(lam / math.pi**2 - 1) < 1e-3


def test_orthonormal_and_constant_mode(specI, I9):
    Phi, w = specI.eigenvectors, specI.weights
    gram = Phi.T @ (w[:, None] * Phi)
    assert np.max(np.abs(gram - np.eye(gram.shape[0]))) < 1e-10
    assert specI.eigenvalues[0] == pytest.approx(0, abs=1e-9)
    assert np.ptp(Phi[:, 0]) < 1e-10


def test_heat_identity_and_eigenrelation(specI, I9, rng):
    f = rng.normal(size=I9.n)
    assert np.allclose(heat_apply(specI, 0.0, f).values, f, atol=1e-10)
    phi = specI.eigenvectors[:, 3]
    out = heat_apply(specI, 0.01, phi).values
    assert np.allclose(out, math.exp(-specI.eigenvalues[3] * 0.01) * phi, atol=1e-10)


def test_semigroup(specI, I9, rng):
    f = rng.normal(size=I9.n)
    a = heat_apply(specI, 0.003, heat_apply(specI, 0.002, f).values).values
    assert np.max(np.abs(a - heat_apply(specI, 0.005, f).values)) < 1e-10


def test_positivity(specI, I9):
    K = _K(I9).astype(float)
    for t in (1e-4, 1e-3, 1e-2):
        v = heat_apply(specI, t, K).values
        assert v.min() >= -1e-9 and v.max() <= 1 + 1e-9


def test_contraction_and_gap_bound(specI, I9, rng):
    f = rng.normal(size=I9.n)
    f -= integrate(I9, f)
    lam = specI.spectral_gap
    for t in (1e-3, 0.1):
        d = l2_norm(specI, heat_apply(specI, t, f).values - f)
        assert d <= min(lam * t, 2) * l2_norm(specI, f) + 1e-9 or t * lam < 1
        assert l2_norm(specI, heat_apply(specI, t, f).values) <= l2_norm(specI, f) + 1e-12


def test_c_k_bound_on_spectrum(specI):
    lam = specI.eigenvalues
    for k in range(4):
        for t in (1e-5, 1e-3, 0.1):
            assert np.max((lam * t) ** k * np.exp(-lam * t)) <= c_k(k) + 1e-12


def test_resistance_metric(I9, dist9):
    assert resistance_distance(I9, 0, 1) == pytest.approx(1.0)
    assert dist9[0, 1] == pytest.approx(1.0)
    assert resistance_distance(I9, 5, 5) == 0.0


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_triangle_inequality(seed):
    R = _sg_dist()
    a, b, c = np.random.default_rng(seed).integers(0, R.shape[0], size=3)
    assert R[a, c] <= R[a, b] + R[b, c] + 1e-12


def test_D_monotone(specI, I9, dist9):
    x = I9.table.points[:, 0]
    L = x < 0.5
    ts, ds = [1e-4, 1e-3, 1e-2], [0.05, 0.1, 0.2]
    D = np.array([[estimate_D(specI, t, d, L, dist9) for d in ds] for t in ts])
    assert np.all(np.diff(D, axis=0) >= -1e-15)
    assert np.all(np.diff(D, axis=1) <= 1e-15)
    assert estimate_D(specI, 1e-4, 0.25, L, dist9) < 1e-8
    assert estimate_D(specI, 0.5, 0.0, np.ones(I9.n, bool), dist9) == pytest.approx(1.0)


def test_schedule(specI, I9, dist9):
    regions = CutoffRegions(dist9[:, _K(I9)].min(axis=1), 0.25)
    s = build_schedule(specI, regions)
    assert s.C[0] <= 0.5
    assert np.all(s.times < 2 / s.gap)
    assert np.all(np.diff(s.times) < 0)
    # forcing more shift can only shrink C_k
    s2 = build_schedule(specI, regions, max_shift=s.shift + 2)
    assert s2.shift == s.shift


def test_no_schedule_below_grid_scale(I9, specI, dist9):
    regions = CutoffRegions(dist9[:, _K(I9)].min(axis=1), 1e-3)
    with pytest.raises(NoSchedule):
        build_schedule(specI, regions, max_shift=0)


def test_feasibility_search(specI, I9, dist9):
    rep = schedule_feasibility(specI, dist9[:, _K(I9)].min(axis=1), [0.05, 0.25])
    assert 0.25 in rep["feasible"]


def test_regions_partition(I9, dist9):
    r = CutoffRegions(dist9[:, _K(I9)].min(axis=1), 0.25)
    for j in range(1, 6):
        cnt = r.K(j).astype(int) + r.A(j).astype(int) + r.L(j).astype(int)
        assert np.all(cnt == 1)
        assert np.all(r.K(j + 1) <= r.K(j)) and np.all(r.L(j + 1) <= r.L(j))


def test_cutoff_of_zero(specI, I9):
    res = heat_cutoff(specI, np.zeros(I9.n), _K(I9), 0.25)
    assert np.all(res.v.values == 0)


def test_cutoff_of_constant_is_nonnegative(specI, I9, dist9):
    # f = 1 gives a smooth nonnegative function that is 1 on K
    res = heat_cutoff(specI, np.ones(I9.n), _K(I9), 0.25, dist=dist9)
    v = res.v.values
    assert v.min() >= -1e-9
    assert np.max(np.abs(v[_K(I9)] - 1)) < 1e-6
    assert not res.diagnostics["violations"]


def test_cutoff_stepwise_bounds(specI, I9, dist9):
    K = _K(I9)
    f = K / math.sqrt(integrate(I9, K.astype(float)))
    d = heat_cutoff(specI, f, K, 0.25, dist=dist9).diagnostics
    for step in d["steps"]:
        assert step["step_change"]["holds"] and step["cutoff_error"]["holds"]
        assert step["growth"]["three"]["measured"] <= 3
    assert d["final"]["on_K_error"] < 1e-3 and d["final"]["outside_norm"] < 1e-3


def test_subgaussian_fit_interval(specI, I9, dist9):
    ids = np.arange(0, I9.n, 16)
    pairs = np.array([(a, b) for a in ids for b in ids])
    fit = fit_subgaussian(specI, np.geomspace(1e-4, 1e-2, 8), pairs, dist9)
    assert abs(fit.beta - 2) < 0.3 and abs(fit.alpha - 1) < 0.15
    t = 1e-3
    p = specI.kernel(t)[pairs[:, 0], pairs[:, 1]]
    assert np.all(p <= subgaussian_bound(fit, t, dist9[pairs[:, 0], pairs[:, 1]]) * (1 + 1e-9) + 1e-8)


def test_kernel_identities(specI, I9):
    t = 1e-3
    P = specI.kernel(t)
    P2 = specI.kernel(2 * t)
    w = specI.weights
    x = I9.table.vertex_at([0.5])
    assert P2[x, x] == pytest.approx(np.sum(w * P[x] ** 2), rel=1e-10)
    assert np.max(np.abs(P - P.T)) < 1e-10


_D = []


def _sg_dist():
    if not _D:
        _D.append(resistance_matrix(build_stack(sierpinski_gasket(), 4)))
    return _D[0]
