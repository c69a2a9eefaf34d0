"""Compactly supported smooth functions with a prescribed jet at a point.

``U`` is a certified bump; ``U_p`` is its copy on the cell F_p^m(X) at the
boundary point q_p.  The candidates G^{n+1}(U_p) have vanishing Laplacian
powers on V_0, and their normal derivatives form a block upper triangular
jet matrix whose diagonal blocks are A_{ij} = int h_i U_j.  Inverting that
matrix gives the f-basis; the g-basis starts from G^l h_q and removes its
normal derivatives with the f-basis.

Signs follow the Gauss-Green convention of this package,
d_n G(v)(q_i) = int h_i v, so d_n Delta^k G^{n+1}(U_j)(q_i) = int h_i G^{n-k}(U_j).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .energy import LaplacianStack
from .errors import IllConditionedA, ResolutionExceeded, TailNotSummable
from .fractal import word_index
from .smooth import Context, Copy, Expr, Green, Harmonic, Sum, Zero, boundary_jet, certificate, vertex_jet

JET_MAX = 4
COND_LIMIT = 1e6


@dataclass
class Jet:
    rho: np.ndarray
    sigma: np.ndarray
    anchor: int
    support_cell: tuple

    def __post_init__(self):
        self.rho = np.atleast_1d(np.asarray(self.rho, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        n = max(self.rho.size, self.sigma.size)
        self.rho = np.pad(self.rho, (0, n - self.rho.size))
        self.sigma = np.pad(self.sigma, (0, n - self.sigma.size))
        self.support_cell = tuple(int(a) for a in self.support_cell)
        if self.L > JET_MAX:
            raise ValueError(f"jet order {self.L} exceeds {JET_MAX}")

    @property
    def L(self) -> int:
        return self.rho.size - 1

    def __add__(self, other: "Jet") -> "Jet":
        n = max(self.rho.size, other.rho.size)
        pad = lambda a: np.pad(a, (0, n - a.size))
        return Jet(pad(self.rho) + pad(other.rho), pad(self.sigma) + pad(other.sigma), self.anchor, self.support_cell)


@dataclass
class JetBasis:
    ctx: Context
    L: int
    m: int
    A: np.ndarray
    f: dict  # (l, p) -> Expr with d_n Delta^k f(q_p') = delta_lk delta_pp'
    g: dict  # (l, p) -> Expr with Delta^k g(q_p') = delta_lk delta_pp'
    U: Expr
    U_order: int
    report: dict = field(default_factory=dict)

    @property
    def n0(self) -> int:
        return self.ctx.fractal.n0


def _corner_map(fr, p: int) -> int:
    return int(fr.boundary[p])


def localize_bump(ctx: Context, U: Expr, p: int, m: int) -> Copy:
    """U o F_p^{-m} on F_p^m(X), zero elsewhere (F_p the map fixing q_p)."""
    if m > ctx.M:
        raise ResolutionExceeded(f"localization depth {m} exceeds level {ctx.M}")
    return Copy(ctx, U, (_corner_map(ctx.fractal, p),) * m)


def _A_matrix(ctx: Context, Us: list[Expr]) -> np.ndarray:
    n0 = ctx.fractal.n0
    A = np.empty((n0, n0))
    for j, Uj in enumerate(Us):
        # int h_i U_j is d_n G(U_j)(q_i)
        A[:, j] = boundary_jet(Green(ctx, Uj), 0)[1]
    return A


def _select_m(ctx: Context, U: Expr, m_min: int, m_max: int) -> tuple[int, list[Expr], np.ndarray, list[dict]]:
    fr = ctx.fractal
    intU = U.integral()
    tried = []
    for m in range(m_min, m_max + 1):
        Us = [localize_bump(ctx, U, p, m) for p in range(fr.n0)]
        A = _A_matrix(ctx, Us)
        D = np.array([fr.measure[_corner_map(fr, p)] ** m * intU for p in range(fr.n0)])
        cond = float(np.linalg.cond(A / D[None, :]))
        tried.append({"m": m, "cond_AD": cond})
        if cond < COND_LIMIT:
            return m, Us, A, tried
    raise IllConditionedA(f"A D^-1 has condition >= {COND_LIMIT:g} for m in [{m_min}, {m_max}]")


def build_bases(stack: LaplacianStack, U: Expr, L: int, U_order: int, m: int | None = None, ctx: Context | None = None) -> JetBasis:
    """f- and g-bases at every boundary point, orders 0..L."""
    if L > JET_MAX:
        raise ValueError(f"L = {L} exceeds {JET_MAX}")
    ctx = ctx or U.ctx
    fr = ctx.fractal
    n0 = fr.n0
    if m is None:
        m, Us, A, tried = _select_m(ctx, U, 2, ctx.M - 1)
    else:
        Us = [localize_bump(ctx, U, p, m) for p in range(n0)]
        A = _A_matrix(ctx, Us)
        tried = [{"m": m, "cond_AD": float(np.linalg.cond(A))}]

    # candidates E[n, j] = G^{n+1}(U_j)
    E = {}
    for j in range(n0):
        node: Expr = Us[j]
        for n in range(L + 1):
            node = Green(ctx, node)
            E[n, j] = node
    cols = [(n, j) for n in range(L + 1) for j in range(n0)]
    J = np.zeros((n0 * (L + 1), n0 * (L + 1)))
    for c, key in enumerate(cols):
        for k in range(L + 1):
            J[k * n0 : (k + 1) * n0, c] = boundary_jet(E[key], k)[1]
    coef = np.linalg.solve(J, np.eye(J.shape[0]))
    # J is block upper triangular only up to the (relatively tiny) boundary jet of U,
    # which is large in absolute terms for high powers, so the full solve is kept
    f = {}
    for l in range(L + 1):
        for p in range(n0):
            row = coef[:, l * n0 + p]
            f[l, p] = Sum(ctx, [(float(row[c]), E[key]) for c, key in enumerate(cols) if row[c] != 0.0])

    g = {}
    for q in range(n0):
        e = np.zeros(n0)
        e[q] = 1.0
        node: Expr = Harmonic(ctx, e)
        for l in range(L + 1):
            if l > 0:
                node = Green(ctx, node)
            terms = [(1.0, node)]
            for k in range(l + 1):
                nd = boundary_jet(node, k)[1]
                terms += [(-float(nd[p]), f[k, p]) for p in range(n0) if nd[p] != 0.0]
            g[l, q] = Sum(ctx, terms)

    intU, absU = U.integral(), float(np.sum(ctx.slot_weight * np.abs(U.slots(0)[0])))
    diag = []
    for i in range(n0):
        j = _corner_map(fr, i)
        mu, r = fr.measure[j] ** m, fr.resistance[j] ** m
        diag.append({"deviation": abs(A[i, i] - mu * intU), "bound": r * mu * absU})
    report = {
        "m": m,
        "search": tried,
        "A": A.tolist(),
        "cond_jet_matrix": float(np.linalg.cond(J)),
        "near_diagonal": diag,
        "near_diagonal_holds": all(d["deviation"] <= d["bound"] for d in diag),
    }
    return JetBasis(ctx, L, m, A, f, g, U, U_order, report)


def build_f_basis(stack: LaplacianStack, U: Expr, q: int, L: int, U_order: int, m: int | None = None) -> list[Expr]:
    b = build_bases(stack, U, L, U_order, m)
    return [b.f[l, q] for l in range(L + 1)]


def build_g_basis(stack: LaplacianStack, U: Expr, q: int, L: int, U_order: int, m: int | None = None) -> list[Expr]:
    b = build_bases(stack, U, L, U_order, m)
    return [b.g[l, q] for l in range(L + 1)]


def delta_property(basis: JetBasis, K: int | None = None) -> dict:
    """Max deviations of the boundary jets of both bases from the delta pattern."""
    L, n0 = basis.L, basis.n0
    K = L if K is None else K
    f_val = f_nd = g_val = g_nd = 0.0
    for l in range(L + 1):
        for p in range(n0):
            for k in range(K + 1):
                want = np.zeros(n0)
                if k == l:
                    want[p] = 1.0
                v, n = boundary_jet(basis.f[l, p], k)
                f_val, f_nd = max(f_val, np.max(np.abs(v))), max(f_nd, np.max(np.abs(n - want)))
                v, n = boundary_jet(basis.g[l, p], k)
                g_val, g_nd = max(g_val, np.max(np.abs(v - want))), max(g_nd, np.max(np.abs(n)))
    return {"f_values": float(f_val), "f_normals": float(f_nd), "g_values": float(g_val), "g_normals": float(g_nd)}


def scale_basis(basis: JetBasis, kind: str, l: int, p: int, m_scale: int) -> Expr:
    """f_{l,m} = mu^{ml} r^{m(l+1)} f_l o F_p^{-m}, g_{l,m} = (mu r)^{ml} g_l o F_p^{-m}."""
    ctx, fr = basis.ctx, basis.ctx.fractal
    if m_scale > ctx.M:
        raise ResolutionExceeded(f"scale {m_scale} exceeds level {ctx.M}")
    j = _corner_map(fr, p)
    mu, r = fr.measure[j], fr.resistance[j]
    if kind == "f":
        s, child = mu ** (m_scale * l) * r ** (m_scale * (l + 1)), basis.f[l, p]
    elif kind == "g":
        s, child = (mu * r) ** (m_scale * l), basis.g[l, p]
    else:
        raise ValueError("kind must be 'f' or 'g'")
    if m_scale == 0:
        return child
    return Copy(ctx, child, (j,) * m_scale, s)


def scaling_identity(basis: JetBasis, kind: str, l: int, p: int, m_scale: int, k: int) -> tuple[float, float]:
    """(sup |Delta^k| of the scaled function, the value predicted by the scaling law)."""
    fr = basis.ctx.fractal
    j = _corner_map(fr, p)
    mu, r = fr.measure[j], fr.resistance[j]
    e = scale_basis(basis, kind, l, p, m_scale)
    child = basis.f[l, p] if kind == "f" else basis.g[l, p]
    if kind == "f":
        pred = mu ** (m_scale * (l - k)) * r ** (m_scale * (l + 1 - k)) * child.sup_lower(k)
    else:
        pred = (mu * r) ** (m_scale * (l - k)) * child.sup_lower(k)
    return e.sup_lower(k), pred


def _boundary_position(ctx: Context, anchor: int) -> int:
    # V_0 carries ids 0..n0-1 in boundary order
    if not 0 <= anchor < ctx.fractal.n0:
        raise ValueError(f"vertex {anchor} is not in V_0")
    return int(anchor)


def _scale_search(basis: JetBasis, kind: str, l: int, p: int, coeff: float, m0: int, eps: float) -> int:
    """Least m >= m0 with |coeff| sup|Delta^k| <= eps 2^{k-l-1} for k < l."""
    if coeff == 0.0 or l == 0:
        return m0
    for m in range(m0, basis.ctx.M + 1):
        e = scale_basis(basis, kind, l, p, m)
        if all(abs(coeff) * e.sup_lower(k) <= eps * 2.0 ** (k - l - 1) for k in range(l)):
            return m
    raise TailNotSummable(f"{kind}_{l} at q_{p} needs a scale beyond level {basis.ctx.M}")


@dataclass
class BorelResult:
    f: Expr
    jet: Jet
    scales: dict
    report: dict


def assemble_borel(basis: JetBasis, jet: Jet, eps_tail: float = 1.0, fixed_m0: bool = False) -> BorelResult:
    """f = sum_l rho_l g_{l,m_l} + sigma_l f_{l,n_l} at a boundary anchor, inside F_p^{m0}(X)."""
    ctx, fr = basis.ctx, basis.ctx.fractal
    if jet.L > basis.L:
        raise ValueError(f"jet order {jet.L} exceeds basis order {basis.L}")
    p = _boundary_position(ctx, jet.anchor)
    j = _corner_map(fr, p)
    w = jet.support_cell
    if any(a != j for a in w):
        raise ValueError(f"support cell {w} is not F_{j}^m(X) at q_{p}")
    m0 = len(w)
    terms, scales = [], {"m": [], "n": []}
    for l in range(jet.L + 1):
        if fixed_m0:
            ml = nl = m0
        else:
            ml = _scale_search(basis, "g", l, p, jet.rho[l], m0, eps_tail)
            nl = _scale_search(basis, "f", l, p, jet.sigma[l], m0, eps_tail)
        scales["m"].append(ml)
        scales["n"].append(nl)
        if jet.rho[l] != 0.0:
            terms.append((float(jet.rho[l]), scale_basis(basis, "g", l, p, ml), l))
        if jet.sigma[l] != 0.0:
            terms.append((float(jet.sigma[l]), scale_basis(basis, "f", l, p, nl), l))
    f = Sum(ctx, [(c, e) for c, e, _ in terms]) if terms else Zero(ctx)

    report: dict = {"anchor": int(jet.anchor), "support_cell": list(w), "scales": scales, "eps_tail": eps_tail}
    tail = []
    for k in range(jet.L + 1):
        t = sum(abs(c) * e.sup_lower(k) for c, e, l in terms if l > k)
        tail.append(float(t))
    report["tail"] = tail
    report["tail_holds"] = all(t <= eps_tail for t in tail)
    size = np.cumsum(np.abs(jet.rho) + np.abs(jet.sigma))
    report["observed_C"] = [
        float(f.sup_lower(k) / size[k]) if size[k] > 0 else 0.0 for k in range(jet.L + 1)
    ]
    mu, r = fr.measure[j], fr.resistance[j]
    bracket = sum((r * mu) ** (m0 * l) * abs(jet.rho[l]) for l in range(jet.L + 1)) + sum(
        r ** (m0 * (l + 1)) * mu ** (m0 * l) * abs(jet.sigma[l]) for l in range(jet.L)
    )
    report["m0_bracket"] = float(bracket)
    report["m0_observed_C"] = [
        float(f.sup_lower(k) * (r * mu) ** (m0 * k) / bracket) if bracket > 0 else 0.0 for k in range(jet.L + 1)
    ]
    return BorelResult(f, jet, scales, report)


def junction_cell_corner(ctx: Context, x: int, w: Sequence[int]) -> int:
    """Corner index i with F_w(q_i) = x."""
    table = ctx.table
    w = tuple(int(a) for a in w)
    row = table.cells[len(w)][word_index(w, ctx.fractal.N)]
    hit = np.nonzero(row == x)[0]
    if hit.size == 0:
        raise ValueError(f"vertex {x} is not a corner of cell {w}")
    return int(hit[0])


def pulled_back_jet(fr, w: Sequence[int], rho, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Jet on X whose transfer to F_w(X) is (rho, sigma)."""
    mu = float(np.prod(fr.measure[list(w)])) if len(w) else 1.0
    r = float(np.prod(fr.resistance[list(w)])) if len(w) else 1.0
    k = np.arange(len(rho))
    return np.asarray(rho) * (mu * r) ** k, np.asarray(sigma) * mu**k * r ** (k + 1)


def transfer_to_junction(
    basis: JetBasis, x: int, w: Sequence[int], rho, sigma, depth: int = 1, eps_tail: float = 1.0
) -> BorelResult:
    """Smooth function on F_w(X), zero elsewhere, with jet (rho, sigma) at x = F_w(q_i)
    seen from F_w(X), vanishing to the checked order at the other corners."""
    ctx, fr = basis.ctx, basis.ctx.fractal
    w = tuple(int(a) for a in w)
    i = junction_cell_corner(ctx, x, w)
    rho_x, sig_x = pulled_back_jet(fr, w, rho, sigma)
    if len(w) + depth > ctx.M:
        raise ResolutionExceeded(f"cell {w} plus depth {depth} exceeds level {ctx.M}")
    inner = Jet(rho_x, sig_x, i, (_corner_map(fr, i),) * depth)
    res = assemble_borel(basis, inner, eps_tail)
    f = Copy(ctx, res.f, w) if w else res.f
    jet = Jet(rho, sigma, x, w)
    return BorelResult(f, jet, res.scales, {**res.report, "anchor": int(x), "cell": list(w), "pulled_back": [rho_x.tolist(), sig_x.tolist()]})


def cell_slot_mask(ctx: Context, w: Sequence[int]) -> np.ndarray:
    mask = np.zeros(ctx.cells.shape[0], dtype=bool)
    mask[ctx.table.cell_block(tuple(w))] = True
    return mask


def jet_at(e: Expr, x: int, w: Sequence[int], K: int) -> tuple[np.ndarray, np.ndarray]:
    """(Delta^k e(x), d_n Delta^k e(x)) from the cell F_w(X), k = 0..K."""
    mask = cell_slot_mask(e.ctx, w)
    rho, sig = np.zeros(K + 1), np.zeros(K + 1)
    for k in range(K + 1):
        rho[k], sig[k] = vertex_jet(e, k, x, mask)
    return rho, sig


def verify_jet(result: BorelResult, rel: float = 1e-6, abs_zero: float = 1e-9) -> dict:
    jet = result.jet
    ctx = result.f.ctx
    w = jet.support_cell
    rho, sig = jet_at(result.f, jet.anchor, w, jet.L)
    ok = True
    errs = []
    for want, got in ((jet.rho, rho), (jet.sigma, sig)):
        for a, b in zip(want, got):
            tol = abs_zero if a == 0.0 else rel * abs(a)
            errs.append(abs(a - b) if a == 0.0 else abs(a - b) / abs(a))
            ok &= abs(a - b) <= tol
    outside = np.ones(ctx.cells.shape[0], dtype=bool)
    outside[ctx.table.cell_block(w)] = False
    contained = bool(np.all(result.f.slots(0)[0][outside] == 0.0))
    return {"rho": rho.tolist(), "sigma": sig.tolist(), "max_error": max(errs), "jet_ok": bool(ok), "support_contained": contained}
