import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pcfsmooth.borel import (
    Jet,
    assemble_borel,
    delta_property,
    jet_at,
    scale_basis,
    scaling_identity,
    transfer_to_junction,
    verify_jet,
)
from pcfsmooth.errors import ResolutionExceeded
from pcfsmooth.fractal import word_index
from pcfsmooth.smooth import Zero


@pytest.mark.parametrize("which", ["interval_basis", "sg_basis"])
def test_delta_property(which, request):
    d = delta_property(request.getfixturevalue(which))
    assert d["f_values"] == 0 and d["g_values"] < 1e-9
    assert d["f_normals"] < 1e-9 and d["g_normals"] < 1e-9


def test_interval_order_zero_at_left_end(interval_basis):
    r = assemble_borel(interval_basis, Jet([1.0], [0.0], 0, (0,)))
    v = verify_jet(r)
    assert v["jet_ok"] and v["support_contained"]
    assert r.f.values()[0] == pytest.approx(1)
    x = r.f.ctx.table.points[:, 0]
    assert np.all(r.f.values()[x > 0.5] == 0)


@pytest.mark.parametrize("which", ["interval_basis", "sg_basis"])
@pytest.mark.parametrize("kind,l,p,m", [("g", 2, 0, 1), ("f", 1, 1, 2), ("g", 3, 1, 2)])
def test_scaling_identity(which, kind, l, p, m, request):
    b = request.getfixturevalue(which)
    for k in range(l + 1):
        got, pred = scaling_identity(b, kind, l, p, m, k)
        assert got == pytest.approx(pred, rel=1e-12)


def test_scale_beyond_level(interval_basis):
    with pytest.raises(ResolutionExceeded):
        scale_basis(interval_basis, "g", 1, 0, 11)


def test_zero_jet(sg_basis):
    r = assemble_borel(sg_basis, Jet([0, 0, 0], [0, 0, 0], 0, (0,)))
    assert isinstance(r.f, Zero)


@settings(max_examples=10, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6), st.floats(-3, 3))
def test_linearity_with_fixed_scales(sg_basis, coeffs, c):
    a = Jet(coeffs[:3], coeffs[3:], 1, (1, 1))
    b = Jet(coeffs[3:], coeffs[:3], 1, (1, 1))
    fa = assemble_borel(sg_basis, a, fixed_m0=True).f
    fb = assemble_borel(sg_basis, b, fixed_m0=True).f
    fab = assemble_borel(sg_basis, Jet(np.add(a.rho, c * b.rho), np.add(a.sigma, c * b.sigma), 1, (1, 1)), fixed_m0=True).f
    for k in range(2):
        lhs, rhs = fab.values(k), fa.values(k) + c * fb.values(k)
        assert np.max(np.abs(lhs - rhs)) <= 1e-9 * max(1.0, np.max(np.abs(rhs)))


@pytest.mark.parametrize("which", ["interval_basis", "sg_basis"])
def test_boundary_jet_and_tail(which, request):
    r = assemble_borel(request.getfixturevalue(which), Jet([1, 0.5, -2], [0.3, 1, 0], 0, (0, 0)))
    v = verify_jet(r)
    assert v["jet_ok"] and v["support_contained"]
    assert r.report["tail_holds"]


def test_transfer_interval_midpoint(interval_basis):
    ctx = interval_basis.ctx
    x = ctx.table.vertex_at([0.5])
    r = transfer_to_junction(interval_basis, x, (1,), [1.0, -1.0], [2.0, 0.5])
    v = verify_jet(r)
    assert v["jet_ok"] and v["support_contained"]
    # the left side sees nothing
    rho, sig = jet_at(r.f, x, (0,), 1)
    assert np.all(rho == 0) and np.all(sig == 0)


def test_transfer_sg_junctions(sg_basis):
    ctx = sg_basis.ctx
    for w in [(0,), (1, 2), (2, 0, 1)]:
        for x in ctx.table.cells[len(w)][word_index(w, 3)]:
            if x < 3:
                continue
            r = transfer_to_junction(sg_basis, int(x), w, [0.5, 1.0, -0.25], [1.0, 0.0, 0.3])
            v = verify_jet(r)
            assert v["jet_ok"] and v["support_contained"], (w, x, v)
