import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcfsmooth.energy import build_stack, pointwise_laplacian
from pcfsmooth.fractal import interval, sierpinski_gasket
from pcfsmooth.green import (
    GreenSolver,
    green_apply,
    green_iterate,
    green_kernel_series,
    kernel_scale_constant,
    series_convergence,
)

from oracles import interval_green_kernel


@pytest.fixture(scope="module")
def gI(I10):
    return GreenSolver(I10)


def test_green_of_one(I10, gI):
    x = I10.table.points[:, 0]
    u = green_apply(gI, np.ones(I10.n)).values
    assert np.max(np.abs(u - x * (x - 1) / 2)) < 1e-12
    assert u[I10.table.vertex_at([0.5])] == pytest.approx(-1 / 8, abs=1e-12)


def test_green_of_zero(gI, I10):
    assert np.all(green_apply(gI, np.zeros(I10.n)).values == 0)


def test_green_inverts_laplacian(I10, gI):
    x = I10.table.points[:, 0]
    phi = np.sin(np.pi * x)
    lap = pointwise_laplacian(I10, phi).values
    assert np.max(np.abs(green_apply(gI, lap).values - phi)) < 1e-10


def test_kernel_matches_closed_form(I10, gI):
    x = I10.table.points[:, 0]
    idx = np.arange(0, I10.n, 37)
    ref = np.array([[interval_green_kernel(x[a], x[b]) for b in idx] for a in idx])
    assert np.max(np.abs(gI.kernel[np.ix_(idx, idx)] - ref)) < 1e-12


def test_kernel_symmetric_nonnegative(SG7):
    g = GreenSolver(SG7).kernel
    assert np.max(np.abs(g - g.T)) < 1e-12
    assert g.min() >= -1e-12


def test_series_first_term_at_midpoint(I10, gI):
    mid = I10.table.vertex_at([0.5])
    # one term of the series (words of length 0) is Psi at the midpoint
    assert green_kernel_series(gI, mid, mid, 0) == pytest.approx(0.25, abs=1e-14)
    assert green_kernel_series(gI, 0, mid, 3) == 0.0


def test_series_sg_midpoint(SG7):
    s = GreenSolver(SG7)
    mid = SG7.table.vertex_at([0.5, 0.0])
    assert abs(green_kernel_series(s, mid, mid, 6) - s.kernel[mid, mid]) < 1e-6


def test_series_converges_monotonically():
    s = GreenSolver(build_stack(interval(), 8))
    err = series_convergence(s)
    assert all(b < a for a, b in zip(err, err[1:]))
    assert err[-1] < 1e-12


def test_green_iterate(I10, gI):
    x = I10.table.points[:, 0]
    one = np.ones(I10.n)
    assert np.array_equal(green_iterate(gI, one, 1).values, green_apply(gI, one).values)
    u2 = green_iterate(gI, one, 2).values
    assert np.max(np.abs(u2 - (x**4 - 2 * x**3 + x) / 24)) < 1e-6
    lap2 = pointwise_laplacian(I10, pointwise_laplacian(I10, u2).values).values
    # two second differences amplify roundoff by h^-4
    assert np.allclose(lap2[2:][np.abs(x[2:] - 0.5) < 0.49], 1.0, atol=1e-4)
    assert np.all(green_iterate(gI, np.zeros(I10.n), 3).values == 0)
    with pytest.raises(ValueError):
        green_iterate(gI, one, 0)


def test_kernel_scale_bound(SG7):
    s = GreenSolver(SG7)
    C = kernel_scale_constant(s, 2)
    g = s.kernel
    for j in range(3):
        ids = SG7.table.cell_vertex_ids((j, j))
        assert np.abs(g[ids]).max() <= C * SG7.fractal.resistance[j] ** 2 + 1e-15


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20, deadline=None)
def test_round_trip_property(seed):
    s = _sg6()
    f = np.random.default_rng(seed).normal(size=s.n)
    u = green_apply(GreenSolver(s), f).values
    assert np.all(u[:3] == 0)
    lap = pointwise_laplacian(s, u).values
    assert np.max(np.abs(lap[3:] - f[3:])) < 1e-8 * np.max(np.abs(f))


_SG6 = []


def _sg6():
    if not _SG6:
        _SG6.append(build_stack(sierpinski_gasket(), 6))
    return _SG6[0]
