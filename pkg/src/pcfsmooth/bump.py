"""Smooth bump functions as fixed points of a Green's-operator map.

Indices follow the construction: ``j`` runs over the boundary points
(position in V_0), ``i = 0`` is the boundary cell Z_{0,j} at q_j and
``i >= 1`` are the cells Z_{i,j} at the points x_{i,j} where Y_j meets the
rest of X.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .energy import LaplacianStack, harmonic_extend
from .errors import CellsIntersect, LeftCandidateSpace, NearSingularM, NoConvergence, NormalizationZero, ZeroMass
from .fractal import PcfFractal, VertexTable, word_index
from .green import GreenSolver
from .smooth import Context, Copy, Expr, Green, Leaf, Sum, boundary_jet, certificate, residuals


@dataclass
class BumpConfig:
    l1: int = 3
    l2: int = 3
    eps_target: float = 0.5
    tol: float = 1e-9
    max_iter: int = 200
    K_max: int = 3

    def __post_init__(self):
        if self.l1 < 1 or self.l2 < 1:
            raise ValueError("l1 and l2 must be at least 1")


@dataclass
class BoundaryCellIndex:
    l1: int
    l2: int
    Y: list[tuple]  # Y_j words
    x: list[list[int]]  # x[j][i] vertex ids, x[j][0] = q_j
    corner: list[list[int]]  # corner position of x[j][i] in Y_j
    Z: list[list[tuple]]  # Z_{i,j} words
    S: list[int]

    @property
    def N(self) -> int:
        return len(self.Y)

    @property
    def I(self) -> list[int]:
        return [len(xs) - 1 for xs in self.x]


def build_boundary_cells(fractal: PcfFractal, table: VertexTable, l1: int, l2: int) -> BoundaryCellIndex:
    if table.level < l1 + l2:
        raise ValueError(f"table level {table.level} < l1 + l2 = {l1 + l2}")
    N = fractal.N
    Y, xs, corners, Z = [], [], [], []
    S = set()
    corner_sets = []
    for p, j in enumerate(fractal.boundary):
        w = (j,) * l1
        row = table.cells[l1][word_index(w, N)]
        corner_sets.append(set(row.tolist()))
        x_j, c_j, z_j = [p], [p], [(j,) * (l1 + l2)]
        for a, v in enumerate(row):
            if a == p:
                continue
            if table.cells_containing(int(v), l1).size >= 2:
                x_j.append(int(v))
                c_j.append(a)
                z_j.append(w + (fractal.boundary[a],) * l2)
                S.add(int(v))
        Y.append(w)
        xs.append(x_j)
        corners.append(c_j)
        Z.append(z_j)
    for a in range(len(Y)):
        for b in range(a + 1, len(Y)):
            if corner_sets[a] & corner_sets[b]:
                raise CellsIntersect(f"Y cells {a} and {b} meet at level l1={l1}")
    return BoundaryCellIndex(l1, l2, Y, xs, corners, Z, sorted(S))


def y_mask(table: VertexTable, index: BoundaryCellIndex) -> np.ndarray:
    m = np.zeros(table.n, dtype=bool)
    for w in index.Y:
        m |= table.cell_mask(w)
    return m


def piecewise_harmonic_f(stack: LaplacianStack, index: BoundaryCellIndex) -> np.ndarray:
    """1 off Y, harmonic on each Y_j, 0 at q_j and 1 at the x_{i,j}."""
    table, fr = stack.table, stack.fractal
    f = np.ones(table.n)
    sub = table.subtable(table.level - index.l1)
    for p, w in enumerate(index.Y):
        data = np.ones(fr.n0)
        data[p] = 0.0
        h = harmonic_extend(stack.hs, data, sub.level, sub).values
        f[table.pullback_map(w)] = h
    return f


def f_coefficients(stack: LaplacianStack, index: BoundaryCellIndex) -> list[list[float]]:
    """a_{i,j} = -d_n f_j(x_{i,j}), the normal derivative taken from inside Y_j."""
    fr = stack.fractal
    H0 = fr.conductance.sum(axis=1)[:, None] * np.eye(fr.n0) - fr.conductance
    out = []
    for p, w in enumerate(index.Y):
        data = np.ones(fr.n0)
        data[p] = 0.0
        nd = (H0 @ data) / fr.resistance[fr.boundary[p]] ** index.l1
        out.append([float("nan")] + [float(-nd[a]) for a in index.corner[p][1:]])
    return out


def harmonic_basis(stack: LaplacianStack) -> np.ndarray:
    """h_j on V_M, one row per boundary point."""
    fr = stack.fractal
    return np.array([harmonic_extend(stack.hs, np.eye(fr.n0)[j], stack.level, stack.table).values for j in range(fr.n0)])


def coarse_integral(stack: LaplacianStack, u: np.ndarray, depth: int) -> float:
    """Integral of u using only its values on V_{M-depth} (quadrature of that level)."""
    sub = stack.at_level(stack.level - depth)
    return float(sub.quad_weights @ u[: sub.n])


def rescale_into_cell(stack: LaplacianStack, u: np.ndarray, word: tuple, check_mass: bool = True) -> np.ndarray:
    """mu(Z)^{-1} (int u)^{-1} u o F_w^{-1} on Z = F_w(X), zero elsewhere."""
    m = len(word)
    mass = coarse_integral(stack, u, m)
    if check_mass and mass <= 0.5:
        raise ZeroMass(f"integral of u is {mass:.3g}, at most 1/2")
    mu = float(np.prod(stack.fractal.measure[list(word)]))
    out = np.zeros(stack.n)
    out[stack.table.pullback_map(word)] = u[: stack.table.n_at(stack.level - m)] / (mu * mass)
    return out


@dataclass
class PsiStep:
    u_next: np.ndarray
    coef: list[list[float]]  # weight of each Copy(u, Z_{i,j}) in v, includes 1/(mu_Z int u)
    b: list[list[float]]
    M: np.ndarray
    A: np.ndarray
    cond_M: float
    gauss_green_residual: float
    boundary_nd: np.ndarray
    mass: float


class BumpProblem:
    """Everything that does not change between iterations."""

    def __init__(self, stack: LaplacianStack, config: BumpConfig):
        self.stack = stack
        self.config = config
        self.index = build_boundary_cells(stack.fractal, stack.table, config.l1, config.l2)
        self.solver = GreenSolver(stack)
        self.a = f_coefficients(stack, self.index)
        self.h = harmonic_basis(stack)
        self.f = piecewise_harmonic_f(stack, self.index)
        self.ymask = y_mask(stack.table, self.index)

    def l1_norm(self, u) -> float:
        return float(self.stack.quad_weights @ np.abs(u))

    def in_C(self, u) -> bool:
        return bool(np.all(np.abs(u[: self.stack.fractal.n0]) < 1e-12) and self.l1_norm(u - 1) <= 0.5)

    def apply(self, u: np.ndarray) -> PsiStep:
        st, idx, fr = self.stack, self.index, self.stack.fractal
        depth = idx.l1 + idx.l2
        mass = coarse_integral(st, u, depth)
        if mass <= 0.5:
            raise ZeroMass(f"integral of u is {mass:.3g}, at most 1/2")
        w = st.quad_weights
        copies = [[rescale_into_cell(st, u, z) for z in idx.Z[j]] for j in range(idx.N)]
        hint = [[self.h @ (w * c) for c in copies[j]] for j in range(idx.N)]  # int h_* u_{i,j}
        rl1 = np.array([fr.resistance[fr.boundary[j]] ** idx.l1 for j in range(idx.N)])
        Mmat = np.array([hint[jp][0] for jp in range(idx.N)])  # M[j', j] = int h_j u_{0,j'}
        A = -sum(self.a[jp][i] * hint[jp][i] for jp in range(idx.N) for i in range(1, idx.I[jp] + 1))
        A = np.asarray(A, dtype=float) if np.ndim(A) else np.zeros(idx.N)
        cond = float(np.linalg.cond(Mmat))
        if cond > 1e8:
            raise NearSingularM(f"cond(M) = {cond:.3g}; increase l1 + l2")
        y = np.linalg.solve(Mmat.T, A)  # y_{j'} = r_{j'}^{-l1} b_{0,j'}
        b = [[float(y[j] * rl1[j])] + [self.a[j][i] * rl1[j] for i in range(1, idx.I[j] + 1)] for j in range(idx.N)]
        v = np.zeros(st.n)
        for j in range(idx.N):
            for i in range(idx.I[j] + 1):
                v += b[j][i] / rl1[j] * copies[j][i]
        u_next = -self.solver.solve_interior(w * v)
        nd = np.asarray(st.H @ u_next)[: fr.n0]
        gg = float(np.max(np.abs(nd - self.h @ (w * v))))
        mu_z = [[float(np.prod(fr.measure[list(z)])) for z in idx.Z[j]] for j in range(idx.N)]
        coef = [[b[j][i] / rl1[j] / (mu_z[j][i] * mass) for i in range(idx.I[j] + 1)] for j in range(idx.N)]
        return PsiStep(u_next, coef, b, Mmat, A, cond, gg, nd, mass)

    def tower(self, history: list[np.ndarray], coefs: list[list[list[float]]], depth: int) -> Expr:
        """Expression for the last iterate, built from the last ``depth`` steps.

        history[n] is u_n, coefs[n] the copy weights used to form u_{n+1}.
        """
        ctx = Context(self.stack)
        n = len(history) - 1
        start = max(0, n - depth)
        node: Expr = Leaf(ctx, history[start])
        for m in range(start, n):
            terms = []
            for j in range(self.index.N):
                for i, z in enumerate(self.index.Z[j]):
                    terms.append((coefs[m][j][i], Copy(ctx, node, z)))
            node = Green(ctx, Sum(ctx, terms))
        return node


def apply_Psi(problem: BumpProblem, u: np.ndarray, strict: bool = True) -> PsiStep:
    step = problem.apply(u)
    if strict and not problem.in_C(step.u_next):
        raise LeftCandidateSpace(
            f"||Psi u - 1||_1 = {problem.l1_norm(step.u_next - 1):.3g} > 1/2; increase l1 or l2"
        )
    return step


def solve_b0(problem: BumpProblem, u: np.ndarray) -> dict:
    step = problem.apply(u)
    return {
        "b": step.b,
        "b0": [row[0] for row in step.b],
        "M": step.M.tolist(),
        "A": step.A.tolist(),
        "cond_M": step.cond_M,
        "boundary_nd": step.boundary_nd.tolist(),
        "gauss_green_residual": step.gauss_green_residual,
    }


@dataclass
class FixedPointResult:
    u: np.ndarray
    history: list[np.ndarray]
    coefs: list
    certificate: dict = field(default_factory=dict)
    problem: BumpProblem | None = None

    def expr(self, depth: int | None = None) -> Expr:
        d = self.problem.config.K_max + 1 if depth is None else depth
        return self.problem.tower(self.history, self.coefs, d)


def default_start(problem: BumpProblem) -> np.ndarray:
    return problem.f.copy()


def distinct_starts(problem: BumpProblem) -> list[np.ndarray]:
    """Three members of the candidate space: f, 1 off V_0, and G(1) scaled to sup 1."""
    st = problem.stack
    one = np.ones(st.n)
    one[: st.fractal.n0] = 0.0
    g = -problem.solver.solve_interior(st.quad_weights)
    starts = [default_start(problem), one, np.abs(g) / np.max(np.abs(g))]
    return [u for u in starts if problem.in_C(u)]


def uniqueness(problem: BumpProblem, starts: list[np.ndarray] | None = None) -> dict:
    starts = distinct_starts(problem) if starts is None else starts
    fixed = [iterate_to_fixed_point(problem, u).u for u in starts]
    spread = max(float(np.max(np.abs(a - fixed[0]))) for a in fixed)
    return {
        "starts": len(starts),
        "spread": spread,
        "within_2tol": bool(spread <= 2 * problem.config.tol),
        "pairwise_ratio": pairwise_contraction(problem, starts),
    }


def iterate_to_fixed_point(problem: BumpProblem, u0: np.ndarray | None = None, strict: bool = True) -> FixedPointResult:
    cfg, st = problem.config, problem.stack
    u = default_start(problem) if u0 is None else np.asarray(u0, dtype=float)
    if strict and not problem.in_C(u):
        raise LeftCandidateSpace("starting function is not in the candidate space")
    history, coefs, steps = [u], [], []
    for _ in range(cfg.max_iter):
        step = apply_Psi(problem, u, strict=strict)
        history.append(step.u_next)
        coefs.append(step.coef)
        steps.append(step)
        diff = float(np.max(np.abs(step.u_next - u)))
        u = step.u_next
        # keep going until the certificate tower is built from iterates only
        if diff < cfg.tol and len(steps) >= cfg.K_max + 1:
            break
    else:
        raise NoConvergence(f"no convergence in {cfg.max_iter} iterations (last change {diff:.3e})")
    res = FixedPointResult(u, history, coefs, problem=problem)
    res.certificate = fixed_point_certificate(problem, res, steps)
    return res


def pairwise_contraction(problem: BumpProblem, starts: list[np.ndarray]) -> float:
    """max ||Psi u - Psi v||_1 / ||u - v||_1 over pairs of distinct candidates."""
    images = [problem.apply(u).u_next for u in starts]
    best = 0.0
    for a in range(len(starts)):
        for b in range(a + 1, len(starts)):
            d = problem.l1_norm(starts[a] - starts[b])
            if d > 0:
                best = max(best, problem.l1_norm(images[a] - images[b]) / d)
    return best


def contraction_ratios(problem: BumpProblem, history: list[np.ndarray], floor: float = 1e-11) -> list[float]:
    """||u_{k+2} - u_{k+1}||_1 / ||u_{k+1} - u_k||_1 while the differences are above roundoff."""
    d = [problem.l1_norm(history[k + 1] - history[k]) for k in range(len(history) - 1)]
    return [d[k + 1] / d[k] for k in range(len(d) - 1) if d[k + 1] > floor]


def fixed_point_certificate(problem: BumpProblem, res: FixedPointResult, steps: list[PsiStep]) -> dict:
    cfg, st, idx = problem.config, problem.stack, problem.index
    fr = st.fractal
    u = res.u
    ratios = contraction_ratios(problem, res.history)
    offY = ~problem.ymask
    dev = float(np.max(np.abs(u[offY] - 1))) if offY.any() else 0.0
    K = cfg.K_max
    e = res.expr(K + 1)
    cert = certificate(e, K)
    bj = [boundary_jet(e, k) for k in range(K + 1)]
    last = steps[-1]
    rl1 = np.array([fr.resistance[fr.boundary[j]] ** idx.l1 for j in range(idx.N)])
    b0_dev = [abs(last.b[j][0] - sum(last.b[j][1:])) / rl1[j] for j in range(idx.N)]
    M_dev = float(np.max(np.abs(last.M - np.eye(idx.N))))
    r_sum = sum(fr.resistance[fr.boundary[j]] ** (idx.l1 + idx.l2) for j in range(idx.N))
    return {
        "config": {"l1": cfg.l1, "l2": cfg.l2, "eps_target": cfg.eps_target, "tol": cfg.tol, "K_max": cfg.K_max},
        "level": st.level,
        "iterations": len(steps),
        "contraction_ratios": ratios,
        "max_contraction_ratio": max(ratios) if ratios else 0.0,
        "contracts": bool(all(r < 1 for r in ratios)),
        "off_Y_deviation": dev,
        "within_eps": bool(dev <= cfg.eps_target),
        "boundary_values": u[: fr.n0].tolist(),
        "boundary_normal_derivatives": last.boundary_nd.tolist(),
        "gauss_green_residual": last.gauss_green_residual,
        "b": last.b,
        "cond_M": last.cond_M,
        "M_minus_I_max": M_dev,
        "M_bound_constant": M_dev / r_sum,
        "b0_deviation_constant": max(b0_dev),
        "sup_norm": float(np.max(np.abs(u))),
        "C2_measured": dev / sum(fr.resistance[fr.boundary[j]] ** idx.l2 for j in range(idx.N)),
        "boundary_jets": [{"k": k, "values": v.tolist(), "normal": n.tolist()} for k, (v, n) in enumerate(bj)],
        "matching": cert,
    }


def smoothing_ladder(problem: BumpProblem, u0: np.ndarray, steps: int) -> list[dict]:
    """Residual orders of Psi^n u0 for n = 1..steps, built from u0 as a leaf.

    Psi^n u0 has continuous Delta^i for i <= n and matched normal
    derivatives for i <= n-1.
    """
    history, coefs = [np.asarray(u0, dtype=float)], []
    for _ in range(steps):
        s = problem.apply(history[-1])
        history.append(s.u_next)
        coefs.append(s.coef)
    out = []
    for n in range(1, steps + 1):
        e = problem.tower(history[: n + 1], coefs[:n], n)
        cert = certificate(e, n)
        rows = []
        for o in cert["orders"]:
            scale = o["sup"] if o["sup"] > 0 else 1.0
            rows.append({"i": o["k"], "jump": o["max_jump"] / scale, "normal_sum": o["max_normal_sum"] / scale})
        out.append({
            "n": n,
            "orders": rows,
            "continuous": all(r["jump"] <= 1e-6 for r in rows),
            "matched_below_n": all(r["normal_sum"] <= 1e-6 for r in rows[:n]),
        })
    return out


def st_junctions(problem: BumpProblem) -> np.ndarray:
    return problem.stack.table.junction_ids


# --- symmetric special cases -------------------------------------------------


def _normalized_green(stack: LaplacianStack, solver: GreenSolver, ctx: Context, node: Expr, at: int):
    g = Green(ctx, node)
    val = g.vertex_values[at]
    if abs(val) < 1e-14:
        raise NormalizationZero("G Phi u vanishes at the normalization point")
    return g, val


def symmetric_interval_Phi(ctx: Context, u: Expr, l: int) -> Expr:
    """+u on F_0^{l+1}, -u on F_0^l F_1 and the mirror image at 1 (L = 2^-l)."""
    return Sum(
        ctx,
        [
            (1.0, Copy(ctx, u, (0,) * (l + 1))),
            (-1.0, Copy(ctx, u, (0,) * l + (1,))),
            (-1.0, Copy(ctx, u, (1,) * l + (0,))),
            (1.0, Copy(ctx, u, (1,) * (l + 1))),
        ],
    )


def symmetric_sg_Phi(ctx: Context, u: Expr, l: int) -> Expr:
    """2u on F_i^{l+1}, -u on F_i^l F_j (j != i)."""
    terms = []
    for i in range(3):
        terms.append((2.0, Copy(ctx, u, (i,) * (l + 1))))
        for j in range(3):
            if j != i:
                terms.append((-1.0, Copy(ctx, u, (i,) * l + (j,))))
    return Sum(ctx, terms)


@dataclass
class SymmetricResult:
    u: np.ndarray
    history: list[np.ndarray]
    norms: list[float]
    expr: Expr | None = None
    iterations: int = 0


def symmetric_fixed_point(
    stack: LaplacianStack,
    kind: str,
    l: int,
    p: int | None = None,
    u0: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iter: int = 200,
    K: int = 3,
) -> SymmetricResult:
    """Fixed point of Psi u = G Phi u / G Phi u(p) for the interval or SG operator."""
    ctx = Context(stack)
    solver = GreenSolver(stack)
    table = stack.table
    if kind == "interval":
        Phi = symmetric_interval_Phi
        p = table.vertex_at([0.5]) if p is None else p
    elif kind == "sg":
        if l < 2:
            raise ValueError("the SG operator needs l >= 2")
        Phi = symmetric_sg_Phi
        p = 3 if p is None else p  # a point of V_1 minus V_0
    else:
        raise ValueError(f"unknown symmetric operator {kind!r}")
    if u0 is None:
        u0 = np.ones(stack.n)
        u0[: stack.fractal.n0] = 0.0
    history, norms = [np.asarray(u0, dtype=float)], []
    for it in range(max_iter):
        node = Leaf(ctx, history[-1])
        g, val = _normalized_green(stack, solver, ctx, Phi(ctx, node, l), p)
        nxt = g.vertex_values / val
        history.append(nxt)
        norms.append(val)
        if np.max(np.abs(nxt - history[-2])) < tol:
            break
    else:
        raise NoConvergence(f"symmetric iteration did not converge in {max_iter} steps")
    # tower over the last K+1 steps for certificates
    depth = min(K + 1, len(history) - 1)
    node: Expr = Leaf(ctx, history[-1 - depth])
    for m in range(len(history) - 1 - depth, len(history) - 1):
        node = Sum(ctx, [(1.0 / norms[m], Green(ctx, Phi(ctx, node, l)))])
    return SymmetricResult(history[-1], history, norms, node, len(history) - 1)


def symmetric_interval_Psi(stack: LaplacianStack, u: np.ndarray, l: int) -> np.ndarray:
    ctx = Context(stack)
    g, val = _normalized_green(stack, GreenSolver(stack), ctx, symmetric_interval_Phi(ctx, Leaf(ctx, u), l), stack.table.vertex_at([0.5]))
    return g.vertex_values / val


def symmetric_sg_Psi(stack: LaplacianStack, u: np.ndarray, l: int, p: int = 3) -> np.ndarray:
    if l < 2:
        raise ValueError("the SG operator needs l >= 2")
    ctx = Context(stack)
    g, val = _normalized_green(stack, GreenSolver(stack), ctx, symmetric_sg_Phi(ctx, Leaf(ctx, u), l), p)
    return g.vertex_values / val
