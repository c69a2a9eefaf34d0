"""Self-similar energies, harmonic extension, Laplacians and normal derivatives.

Sign conventions used throughout the package:

* ``H`` is the positive semidefinite conductance Laplacian, ``E(u, v) = u.H.v``.
* ``Delta u(x) = -(H u)(x) / w_x`` at non-boundary vertices.
* the normal derivative at a corner ``q`` of a cell is ``(H^cell u)(q)``,
  which is the outward one-sided derivative on the interval.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import LevelMismatch, NotOnCellBoundary, NotRenormalizable, SingularSystem
from .fractal import PcfFractal, VertexTable, build_vertex_table, level_weights

RENORM_TOL = 1e-10


def level0_laplacian(fractal: PcfFractal) -> np.ndarray:
    c = fractal.conductance
    return np.diag(c.sum(axis=1)) - c


def _assemble(table: VertexTable, m: int, resistance: np.ndarray) -> sp.csr_matrix:
    """Conductance Laplacian of the level-m network, on the ids of V_m."""
    fr = table.fractal
    n = table.n_at(m)
    cells = table.cells[m]
    rinv = 1.0 / level_weights(fr, m, resistance)
    c0 = fr.conductance
    a, b = np.nonzero(np.triu(c0, 1))
    rows = cells[:, a].ravel()
    cols = cells[:, b].ravel()
    vals = (rinv[:, None] * c0[a, b][None, :]).ravel()
    off = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    off = off + off.T
    deg = np.asarray(off.sum(axis=1)).ravel()
    return (sp.diags(deg) - off).tocsr()


def _schur(H: np.ndarray, keep: np.ndarray) -> np.ndarray:
    drop = np.setdiff1d(np.arange(H.shape[0]), keep)
    if drop.size == 0:
        return H[np.ix_(keep, keep)]
    Hkk = H[np.ix_(keep, keep)]
    Hkd = H[np.ix_(keep, drop)]
    Hdd = H[np.ix_(drop, drop)]
    return Hkk - Hkd @ np.linalg.solve(Hdd, Hkd.T)


def symmetric_renormalization_factor(fractal: PcfFractal) -> float:
    """Common factor r with trace(level-1 network) = level-0 network, all r_j equal.

    With unit resistances the trace is kappa * H_0; scaling by 1/r gives
    H_0 exactly when r = kappa.
    """
    table = build_vertex_table(fractal, 1)
    H1 = _assemble(table, 1, np.ones(fractal.N)).toarray()
    T = _schur(H1, np.arange(fractal.n0))
    H0 = level0_laplacian(fractal)
    kappa = float(np.sum(T * H0) / np.sum(H0 * H0))
    if not np.allclose(T, kappa * H0, atol=RENORM_TOL):
        raise NotRenormalizable("level-1 trace is not proportional to the level-0 network")
    return kappa


@dataclass
class HarmonicStructure:
    fractal: PcfFractal
    level1_conductances: np.ndarray
    extension_matrices: list[np.ndarray]
    table1: VertexTable

    @property
    def H1(self) -> np.ndarray:
        return self.level1_conductances

    @cached_property
    def harmonic_constant(self) -> float:
        """C(r): max |d_n h(q)| over harmonic h with boundary data in [0, 1].

        For harmonic h the normal derivative at q_i is (H_0 h)(q_i), so the
        maximum is the largest off-diagonal row sum of H_0.
        """
        return float(np.max(self.fractal.conductance.sum(axis=1)))


def renormalize_harmonic_structure(
    fractal: PcfFractal, level1_conductances: np.ndarray | None = None
) -> HarmonicStructure:
    table = build_vertex_table(fractal, 1)
    if level1_conductances is None:
        H1 = _assemble(table, 1, fractal.resistance).toarray()
    else:
        H1 = np.asarray(level1_conductances, dtype=float)
    n0 = fractal.n0
    trace = _schur(H1, np.arange(n0))
    H0 = level0_laplacian(fractal)
    err = np.max(np.abs(trace - H0))
    if err > RENORM_TOL * max(1.0, np.max(np.abs(H0))):
        raise NotRenormalizable(f"level-1 trace differs from level-0 energy by {err:.3e}")
    interior = np.arange(n0, table.n)
    E = np.zeros((table.n, n0))
    E[:n0] = np.eye(n0)
    if interior.size:
        E[interior] = -np.linalg.solve(H1[np.ix_(interior, interior)], H1[np.ix_(interior, np.arange(n0))])
    A = [E[table.cells[1][j]] for j in range(fractal.N)]
    return HarmonicStructure(fractal, H1, A, table)


def quadrature_weights(hs: HarmonicStructure, table: VertexTable, m: int | None = None) -> np.ndarray:
    """w_x = integral of the level-m piecewise harmonic tent at x.

    beta_i = integral of the harmonic function with data e_i; self-similarity
    gives beta = sum_j mu_j beta A_j, normalized by sum(beta) = 1.
    """
    fr = hs.fractal
    m = table.level if m is None else m
    n0 = fr.n0
    T = sum(fr.measure[j] * hs.extension_matrices[j].T for j in range(fr.N))
    sys = np.vstack([T - np.eye(n0), np.ones((1, n0))])
    rhs = np.zeros(n0 + 1)
    rhs[-1] = 1.0
    beta = np.linalg.lstsq(sys, rhs, rcond=None)[0]
    mu = level_weights(fr, m, fr.measure)
    w = np.zeros(table.n_at(m))
    np.add.at(w, table.cells[m], mu[:, None] * beta[None, :])
    return w


@dataclass
class LaplacianStack:
    hs: HarmonicStructure
    table: VertexTable
    H: sp.csr_matrix
    quad_weights: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def fractal(self) -> PcfFractal:
        return self.table.fractal

    @property
    def level(self) -> int:
        return self.table.level

    @property
    def n(self) -> int:
        return self.table.n

    @cached_property
    def interior(self) -> np.ndarray:
        return self.table.junction_ids

    @cached_property
    def renorm_laplacian(self) -> sp.csr_matrix:
        return (sp.diags(1.0 / self.quad_weights) @ self.H).tocsr()

    @cached_property
    def interior_lu(self):
        I = self.interior
        try:
            return splu(self.H[I][:, I].tocsc())
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None

    def at_level(self, m: int) -> "LaplacianStack":
        if m == self.level:
            return self
        if m not in self._cache:
            self._cache[m] = build_stack(self.fractal, m, hs=self.hs, table=self.table.subtable(m))
        return self._cache[m]

    def cell_resistance(self, m: int) -> np.ndarray:
        key = ("r", m)
        if key not in self._cache:
            self._cache[key] = level_weights(self.fractal, m, self.fractal.resistance)
        return self._cache[key]

    def cell_measure(self, m: int) -> np.ndarray:
        key = ("mu", m)
        if key not in self._cache:
            self._cache[key] = level_weights(self.fractal, m, self.fractal.measure)
        return self._cache[key]


def build_stack(
    fractal: PcfFractal,
    M: int,
    hs: HarmonicStructure | None = None,
    table: VertexTable | None = None,
) -> LaplacianStack:
    hs = hs or renormalize_harmonic_structure(fractal)
    table = table or build_vertex_table(fractal, M)
    H = _assemble(table, M, fractal.resistance)
    return LaplacianStack(hs, table, H, quadrature_weights(hs, table))


@dataclass
class GridFunction:
    """Values on V_M, indexed by vertex id."""

    table: VertexTable
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.table.n,):
            raise LevelMismatch(f"{self.values.size} values for {self.table.n} vertices")

    @property
    def level(self) -> int:
        return self.table.level

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return self.values.size


def _vals(stack: LaplacianStack, u) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    if u.shape != (stack.n,):
        raise LevelMismatch(f"function has {u.size} values, level-{stack.level} grid has {stack.n}")
    return u


def graph_energy(stack: LaplacianStack, u, v) -> float:
    return float(_vals(stack, u) @ (stack.H @ _vals(stack, v)))


def harmonic_extend(hs: HarmonicStructure, boundary_values: Sequence[float], M: int, table: VertexTable | None = None) -> GridFunction:
    fr = hs.fractal
    table = table or build_vertex_table(fr, M)
    vals = np.zeros(table.n_at(M))
    vals[: fr.n0] = np.asarray(boundary_values, dtype=float)
    for k in range(1, M + 1):
        corner = vals[table.cells[k - 1]]
        for j, A in enumerate(hs.extension_matrices):
            vals[table.cells[k][j :: fr.N]] = corner @ A.T
    if table.level != M:
        raise LevelMismatch("table level differs from requested level")
    return GridFunction(table, vals)


def pointwise_laplacian(stack: LaplacianStack, u) -> GridFunction:
    """Delta^{(M)} u at non-boundary vertices; boundary entries are set to 0."""
    out = -(stack.H @ _vals(stack, u)) / stack.quad_weights
    out[: stack.fractal.n0] = 0.0
    return GridFunction(stack.table, out)


def laplacian_power(stack: LaplacianStack, u, k: int) -> np.ndarray:
    v = _vals(stack, u)
    for _ in range(k):
        v = pointwise_laplacian(stack, v).values
    return v


def integrate(stack: LaplacianStack, u) -> float:
    return float(stack.quad_weights @ _vals(stack, u))


class NormalDerivative(NamedTuple):
    value: float  # exact level-M quantity
    richardson: float  # extrapolated limit
    error_estimate: float


def cell_normal_derivatives(stack: LaplacianStack, u, m: int | None = None) -> np.ndarray:
    """(H^cell u)(corner) for every level-m cell, shape (N^m, n0)."""
    m = stack.level if m is None else m
    u = np.asarray(u, dtype=float)
    fr = stack.fractal
    corner = u[stack.table.cells[m]]
    c0 = fr.conductance
    local = corner * c0.sum(axis=1)[None, :] - corner @ c0.T
    return local / stack.cell_resistance(m)[:, None]


def _corner_index(stack: LaplacianStack, q: int, w: tuple) -> int:
    m = len(w)
    from .fractal import word_index

    row = stack.table.cells[m][word_index(w, stack.fractal.N)]
    hits = np.nonzero(row == q)[0]
    if hits.size == 0:
        raise NotOnCellBoundary(f"vertex {q} is not a corner of cell {w}")
    return int(hits[0])


def normal_derivative(stack: LaplacianStack, u, q: int, cell: Sequence[int] = ()) -> NormalDerivative:
    """Normal derivative of u at the corner q of F_w(X).

    Richardson uses the nested sub-cells F_w F_j^k(X) at q.  The first-order
    error term shrinks by mu_j per level and the next one by mu_j r_j.
    """
    u = _vals(stack, u)
    w = tuple(int(a) for a in cell)
    M = stack.level
    if len(w) > M:
        raise NotOnCellBoundary("cell is finer than the grid")
    i = _corner_index(stack, q, w)
    fr = stack.fractal
    j = fr.boundary[i]
    mu, r = fr.measure[j], fr.resistance[j]
    c0 = fr.conductance

    def at(m: int) -> float:
        # sub-cell F_w F_j^{m-|w|}, evaluated with its level-m corner values
        sub = w + (j,) * (m - len(w))
        from .fractal import word_index

        corners = stack.table.cells[m][word_index(sub, fr.N)]
        rw = float(np.prod(fr.resistance[list(sub)])) if sub else 1.0
        return float(c0[i] @ (u[corners[i]] - u[corners])) / rw

    d = [at(m) for m in range(max(len(w), M - 2), M + 1)]
    if len(d) < 3:
        return NormalDerivative(d[-1], d[-1], float("nan"))
    r1 = [(d[1] - mu * d[0]) / (1 - mu), (d[2] - mu * d[1]) / (1 - mu)]
    rho = mu * r
    r2 = (r1[1] - rho * r1[0]) / (1 - rho)
    return NormalDerivative(d[-1], r2, abs(r2 - r1[1]))


class MatchingResidual(NamedTuple):
    jump: float
    normal_sum: float


def matching_residual(stack: LaplacianStack, u, x: int, k: int = 0) -> MatchingResidual:
    """Grid-level defect of the matching conditions for Delta^k u at a junction x.

    One-sided values are read at the level-M neighbours inside each cell at x,
    and the normal-derivative sum is the full row (H v)(x).  Both tend to 0
    under refinement exactly when Delta^k u is continuous with matched normal
    derivatives at x.
    """
    v = laplacian_power(stack, u, k)
    table = stack.table
    if x < stack.fractal.n0:
        raise NotOnCellBoundary("matching conditions are posed at junction points")
    cells = table.cells_containing(x, table.level)
    sides = []
    for c in cells:
        row = table.cells[table.level][c]
        sides.append(v[row[row != x]].mean())
    jump = float(np.max(sides) - np.min(sides)) if sides else 0.0
    return MatchingResidual(jump, float(abs((stack.H @ v)[x])))
