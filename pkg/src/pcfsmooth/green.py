"""Dirichlet Green's operator: direct interior solve and the self-similar kernel series."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .energy import GridFunction, LaplacianStack, _vals
from .errors import ResolutionExceeded


@dataclass
class GreenSolver:
    stack: LaplacianStack
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def level(self) -> int:
        return self.stack.level

    @cached_property
    def discrete_psi(self) -> np.ndarray:
        """Level-1 Dirichlet kernel on V_1 minus V_0 (inverse of the interior block of H_1)."""
        hs = self.stack.hs
        I = np.arange(hs.fractal.n0, hs.table1.n)
        return np.linalg.inv(hs.H1[np.ix_(I, I)])

    @cached_property
    def kernel(self) -> np.ndarray:
        """g(x, y) on V_M x V_M; zero whenever x or y is on V_0."""
        st = self.stack
        I = st.interior
        g = np.zeros((st.n, st.n))
        g[np.ix_(I, I)] = st.interior_lu.solve(np.eye(I.size))
        return 0.5 * (g + g.T)

    def solve_interior(self, rhs: np.ndarray) -> np.ndarray:
        """u with u = 0 on V_0 and (H u) = rhs at interior vertices."""
        st = self.stack
        u = np.zeros(st.n)
        u[st.interior] = st.interior_lu.solve(rhs[st.interior])
        return u


def green_apply(solver: GreenSolver, f) -> GridFunction:
    """G f = -int g(., y) f(y) dmu(y); Delta G f = f, G f = 0 on V_0."""
    st = solver.stack
    f = _vals(st, f)
    return GridFunction(st.table, -solver.solve_interior(st.quad_weights * f))


def green_iterate(solver: GreenSolver, f, k: int) -> GridFunction:
    if k < 1:
        raise ValueError("power must be at least 1")
    u = _vals(solver.stack, f)
    for _ in range(k):
        u = green_apply(solver, u).values
    return GridFunction(solver.stack.table, u)


def prolongation(stack: LaplacianStack, m: int) -> sp.csr_matrix:
    """Piecewise harmonic interpolation from V_m to V_M (sparse, n_M x n_m)."""
    key = ("P", m)
    cache = stack._cache
    if key in cache:
        return cache[key]
    table = stack.table
    if m == table.level:
        P = sp.identity(table.n, format="csr")
    else:
        step = _refine_step(stack, m)
        P = (prolongation(stack, m + 1) @ step).tocsr()
    cache[key] = P
    return P


def _refine_step(stack: LaplacianStack, m: int) -> sp.csr_matrix:
    table, fr = stack.table, stack.fractal
    n_from, n_to = table.n_at(m), table.n_at(m + 1)
    parent = table.cells[m]
    rows, cols, vals = [np.arange(n_from)], [np.arange(n_from)], [np.ones(n_from)]
    seen = np.zeros(n_to, dtype=bool)
    seen[:n_from] = True
    for j, A in enumerate(stack.hs.extension_matrices):
        child = table.cells[m + 1][j :: fr.N]
        for i in range(fr.n0):
            tgt = child[:, i]
            new = ~seen[tgt]
            # first cell reaching a new vertex defines it; harmonic extension is consistent
            tgt_new, idx = np.unique(tgt[new], return_index=True)
            pc = parent[new][idx]
            seen[tgt_new] = True
            for l in range(fr.n0):
                if A[i, l] != 0:
                    rows.append(tgt_new)
                    cols.append(pc[:, l])
                    vals.append(np.full(tgt_new.size, A[i, l]))
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n_to, n_from)
    ).tocsr()


def green_series_matrix(solver: GreenSolver, mstar: int, points: np.ndarray | None = None) -> np.ndarray:
    """Partial sums of the kernel series on ``points`` x ``points``.

    Term k collects r_w Psi(F_w^{-1} x, F_w^{-1} y) over the words of length k,
    with Psi interpolated harmonically; it lives on V_{k+1} and is carried to
    V_M by harmonic prolongation.  Terms 0..mstar are included, so
    mstar = M - 1 is the full level-M kernel.
    """
    st = solver.stack
    M = st.level
    if mstar > M - 1:
        raise ResolutionExceeded(f"truncation {mstar} needs level {mstar + 1} > {M}")
    points = np.arange(st.n) if points is None else np.asarray(points)
    Psi = solver.discrete_psi
    total = np.zeros((points.size, points.size))
    for k in range(mstar + 1):
        # ids of F_w(V_1 minus V_0) for every k-word w: corners of the level-(k+1) cells
        # indexed so that J[w, a] = id of F_w(p_a), p_a the a-th interior point of V_1
        J = _interior_images(st, k)
        rw = st.cell_resistance(k)
        P = prolongation(st, k + 1)[points]
        PJ = P[:, J.ravel()].toarray().reshape(points.size, J.shape[0], J.shape[1])
        total += np.einsum("pwa,w,ab,qwb->pq", PJ, rw, Psi, PJ, optimize=True)
    return total


def _interior_images(stack: LaplacianStack, k: int) -> np.ndarray:
    table, fr = stack.table, stack.fractal
    t1 = stack.hs.table1
    n_int = t1.n - fr.n0
    out = np.empty((fr.N**k, n_int), dtype=np.int64)
    # vertex p_a of V_1 is corner i of the 1-cell j for some (j, i)
    slot = {}
    for j in range(fr.N):
        for i, v in enumerate(t1.cells[1][j]):
            if v >= fr.n0 and v not in slot:
                slot[int(v)] = (j, i)
    cells = table.cells[k + 1]
    for a in range(n_int):
        j, i = slot[fr.n0 + a]
        out[:, a] = cells[np.arange(fr.N**k) * fr.N + j, i]
    return out


def green_kernel_series(solver: GreenSolver, x: int, y: int, mstar: int) -> float:
    return float(green_series_matrix(solver, mstar, np.array([x, y]))[0, 1])


def series_convergence(solver: GreenSolver, points: np.ndarray | None = None) -> list[float]:
    """Relative max error of the partial sums against the direct kernel, mstar = 0..M-1."""
    st = solver.stack
    M = st.level
    if points is None:
        points = np.arange(st.table.n_at(M - 1), st.n)
    ref = solver.kernel[np.ix_(points, points)]
    scale = np.max(np.abs(ref))
    out = []
    for m in range(M):
        approx = green_series_matrix(solver, m, points)
        out.append(float(np.max(np.abs(approx - ref)) / scale))
    return out


def kernel_scale_constant(solver: GreenSolver, l1: int) -> float:
    """Measured C with max_{x in Y_j, y} g(x, y) <= C r_j^{l1}."""
    st = solver.stack
    fr = st.fractal
    g = solver.kernel
    best = 0.0
    for j in fr.boundary:
        ids = st.table.cell_vertex_ids((j,) * l1)
        best = max(best, float(np.max(np.abs(g[ids]))) / fr.resistance[j] ** l1)
    return best
