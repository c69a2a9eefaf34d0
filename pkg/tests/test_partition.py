import numpy as np
import pytest

from oracles import dyadic_cover
from pcfsmooth.errors import CertificateTooWeak, NotACover
from pcfsmooth.partition import (
    OpenCover,
    build_lambda,
    cells_mask,
    closure_vertices,
    correction_cells,
    reduce_cover,
    smooth_partition,
)
from pcfsmooth.smooth import Context, Harmonic, Leaf

SG3 = [[(0,), (1, 0), (2, 0)], [(1,), (0, 1), (2, 1)], [(2,), (0, 2), (1, 2)]]


@pytest.fixture(scope="module")
def ictx(I10):
    return Context(I10)


@pytest.fixture(scope="module")
def sctx(SG8):
    return Context(SG8)


def test_reduce_cover(ictx):
    halves = [[(0,), (1, 0)], [(1,), (0, 1)]]
    assert reduce_cover(OpenCover(ictx, halves)).members == halves
    dup = reduce_cover(OpenCover(ictx, halves + [[(1,), (0, 1)]]))
    assert len(dup.members) == 2 and dup.labels == [0, 2]
    three = reduce_cover(OpenCover(ictx, [[(0,), (1, 0)], [(0, 1), (1, 0)], [(1,), (0, 1)]]))
    assert three.labels == [0, 2]


def test_halves_without_overlap_do_not_cover(ictx):
    # 1/2 lies in neither open half
    with pytest.raises(NotACover):
        reduce_cover(OpenCover(ictx, [[(0,)], [(1,)]]))


def test_cells_too_fine(ictx):
    with pytest.raises(ValueError):
        OpenCover(ictx, [[(0,) * 9]])


def test_build_lambda_empty(ictx):
    cov = OpenCover(ictx, [[(0,), (1, 0)], [(1,)]])
    lam = build_lambda(ictx, np.zeros(ictx.cells.shape[0], bool), cov.mask(0), cov.points([1]))
    assert not lam["cells"].any() and lam["x"].size == 0


def test_build_lambda_matches_dyadic_oracle(I9):
    from pcfsmooth.energy import build_stack
    from pcfsmooth.fractal import interval

    ctx = Context(build_stack(interval(), 6))
    cov = OpenCover(ctx, [[(0,), (1, 0)], [(1,)]])
    lam = build_lambda(ctx, cells_mask(ctx, [(0,)]), cov.mask(0), cov.points([1]))
    cells = np.nonzero(lam["cells"])[0]
    n = ctx.cells.shape[0]
    assert (cells.min() / n, (cells.max() + 1) / n) == dyadic_cover((0, 0.5), (0, 0.75), 6) == (0.0, 0.625)
    assert ctx.table.points[lam["x"], 0].tolist() == [0.625]


def test_correction_cells_interval(ictx):
    cov = OpenCover(ictx, [[(0,), (1, 0)], [(1,)]])
    lam = build_lambda(ictx, cells_mask(ictx, [(0,)]), cov.mask(0), cov.points([1]))
    x = int(lam["x"][0])
    region = cov.mask(0) & cov.points([1])[0]
    C = correction_cells(ictx, x, lam["cells"], region, np.zeros_like(region))
    assert len(C) == 1
    assert not cells_mask(ictx, C)[lam["cells"]].any()


def test_correction_cells_sg(sctx):
    cov = OpenCover(sctx, [[(0,), (1, 0), (2, 0)], [(1,), (2,), (0, 1), (0, 2)]])
    lam = build_lambda(sctx, cells_mask(sctx, [(0,)]), cov.mask(0), cov.points([1]))
    region = cov.mask(0) & cov.points([1])[0]
    lam_v = closure_vertices(sctx, lam["cells"])
    for x in lam["x"]:
        C = correction_cells(sctx, int(x), lam["cells"], region, np.zeros_like(region))
        assert 1 <= len(C) <= 2
        m = cells_mask(sctx, C)
        assert not (m & lam["cells"]).any()
        touch = closure_vertices(sctx, m) & lam_v
        assert np.nonzero(touch)[0].tolist() == [int(x)]


def test_single_member(ictx):
    f = Harmonic(ictx, [1.0, 2.0])
    res = smooth_partition(f, OpenCover(ictx, [[(0,), (1,)]]), None if False else _basis_stub(), 3)
    assert len(res.pieces) == 1 and res.pieces[0] is f


def _basis_stub():
    class B:
        L = 3
    return B()


def test_leaf_is_too_weak(ictx, interval_basis):
    f = Leaf(ictx, np.ones(ictx.table.n))
    with pytest.raises(CertificateTooWeak):
        smooth_partition(f, OpenCover(ictx, [[(0,), (1, 0)], [(1,), (0, 1)]]), interval_basis, 3)


def test_basis_order_too_low(ictx, interval_basis):
    class Low:
        L = 1
    with pytest.raises(CertificateTooWeak):
        smooth_partition(Harmonic(ictx, [1.0, 1.0]), OpenCover(ictx, [[(0,), (1,)]]), Low(), 3)


@pytest.mark.parametrize("members", [[[(0,), (1, 0)], [(1,), (0, 1)]], [[(0, 0), (0, 1, 0)], [(0, 1), (1, 0, 0)], [(1,), (0, 1, 1)]]])
def test_interval_partition(ictx, interval_basis, interval_bump, members):
    U = interval_bump[1].expr()
    for f in (Harmonic(ictx, [1.0, 1.0]), U):
        res = smooth_partition(f, OpenCover(ictx, members), interval_basis, 3)
        rep = res.report
        assert rep["passes"], rep
        assert rep["sum_error"] <= 1e-10
        assert max(rep["telescoping"]) <= 1e-10


def test_sg_partition(sctx, sg_basis, sg_bump):
    f = sg_bump[1].expr()
    res = smooth_partition(f, OpenCover(sctx, SG3), sg_basis, 3)
    assert res.report["passes"]
    assert len(res.pieces) == 3
