"""Structure-aware representation of functions and their Laplacian towers.

A function on V_M is stored per (level-M cell, corner) slot: the value seen
from inside that cell and the one-sided normal derivative there.  Functions
that are continuous have equal slot values at a vertex; discontinuities
(such as a restriction to a union of cells) are representable.

Each node computes ``Delta^k`` of itself from its structure:

* ``Green(c)``: Delta^0 is the level-M Dirichlet solve, Delta^k is Delta^{k-1} c.
* ``Copy(c, w, s)``: s * c o F_w^{-1} on F_w(X), zero elsewhere; Delta^k
  picks up (mu_w r_w)^{-k} and normal derivatives an extra r_w^{-1}.
* ``Sum``, ``Restrict``, ``Harmonic`` and ``Leaf`` (order 0 only).

Matching residuals read straight off the slots: the spread of slot values at
a vertex is the jump, and the sum of slot normal derivatives is the defect
of the matching condition.  Nested copies can be deeper than the grid, so
every node also bounds the defects at junctions strictly inside level-M
cells (``deep``) and gives a lower bound for sup |Delta^k| (``sup_lower``);
a copy maps both onto its child's full-resolution data.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .energy import LaplacianStack, harmonic_extend
from .errors import CertificateTooWeak, ResolutionExceeded
from .fractal import word_index


class Context:
    """Level-M data shared by all nodes of one stack."""

    def __init__(self, stack: LaplacianStack):
        self.stack = stack
        self.table = stack.table
        self.fractal = stack.fractal
        self.M = stack.level
        self.cells = stack.table.cells[self.M]
        fr = self.fractal
        T = sum(fr.measure[j] * stack.hs.extension_matrices[j].T for j in range(fr.N))
        beta = np.linalg.lstsq(np.vstack([T - np.eye(fr.n0), np.ones((1, fr.n0))]),
                               np.r_[np.zeros(fr.n0), 1.0], rcond=None)[0]
        self.beta = beta
        self.slot_weight = stack.cell_measure(self.M)[:, None] * beta[None, :]
        self.rinv = 1.0 / stack.cell_resistance(self.M)
        self.c0 = fr.conductance

    def local_nd(self, vals: np.ndarray) -> np.ndarray:
        """(H^cell u)(corner) from slot values, shape (N^M, n0)."""
        c0 = self.c0
        return (vals * c0.sum(axis=1) - vals @ c0.T) * self.rinv[:, None]

    def to_vertices(self, vals: np.ndarray) -> np.ndarray:
        """Slot values averaged per vertex."""
        n = self.table.n
        acc = np.zeros(n)
        cnt = np.zeros(n)
        np.add.at(acc, self.cells, vals)
        np.add.at(cnt, self.cells, 1.0)
        return acc / cnt

    def assemble_rhs(self, vals: np.ndarray) -> np.ndarray:
        """Vertex vector of int psi_x f dmu for piecewise harmonic slot data f."""
        b = np.zeros(self.table.n)
        np.add.at(b, self.cells, self.slot_weight * vals)
        return b

    def integrate(self, vals: np.ndarray) -> float:
        return float(np.sum(self.slot_weight * vals))

    @cached_property
    def slots_at(self) -> list[np.ndarray]:
        """For each vertex, flat slot indices (cell * n0 + corner) at it."""
        flat = self.cells.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(self.table.n + 1))
        return [order[bounds[v]: bounds[v + 1]] for v in range(self.table.n)]

    @cached_property
    def _slot_owner(self) -> tuple[np.ndarray, np.ndarray]:
        flat = self.cells.ravel()
        order = np.argsort(flat, kind="stable")
        return flat[order], order

    def sub_slot(self, m: int) -> np.ndarray:
        """For copies of depth m: index of the level-M sub-cell u j^m at corner i of
        each level-(M-m) cell u, shape (N^{M-m}, n0)."""
        fr = self.fractal
        N = fr.N
        base = np.arange(N ** (self.M - m)) * N**m
        tail = np.array([word_index((fr.boundary[i],) * m, N) for i in range(fr.n0)])
        return base[:, None] + tail[None, :]


class Expr:
    """Base node.  ``slots(k)`` returns (values, normal derivatives) of Delta^k."""

    order: float = np.inf

    def __init__(self, ctx: Context):
        self.ctx = ctx
        self._slots: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self._deep: dict[int, tuple[float, float]] = {}
        self._sup: dict[int, float] = {}
        self._sup_hi: dict[int, float] = {}

    def slots(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        if k > self.order:
            raise CertificateTooWeak(f"{type(self).__name__} carries no Delta^{k}")
        if k not in self._slots:
            self._slots[k] = self._compute(k)
        return self._slots[k]

    def _compute(self, k: int):  # pragma: no cover - abstract
        raise NotImplementedError

    def values(self, k: int = 0) -> np.ndarray:
        return self.ctx.to_vertices(self.slots(k)[0])

    def sup(self, k: int = 0) -> float:
        """Grid sup of |Delta^k|."""
        return float(np.max(np.abs(self.slots(k)[0])))

    def deep(self, k: int) -> tuple[float, float]:
        """Bounds on (jump, normal sum) of Delta^k at junctions inside level-M cells."""
        if k not in self._deep:
            self._deep[k] = self._compute_deep(k)
        return self._deep[k]

    def _compute_deep(self, k: int) -> tuple[float, float]:
        return 0.0, 0.0

    def sup_lower(self, k: int) -> float:
        if k not in self._sup:
            self._sup[k] = max(self.sup(k), self._structural_sup(k))
        return self._sup[k]

    def _structural_sup(self, k: int) -> float:
        return 0.0

    def sup_upper(self, k: int) -> float:
        """Upper bound for sup |Delta^k|, taking level-M solves as exact on the grid."""
        if k not in self._sup_hi:
            self._sup_hi[k] = max(self.sup(k), self._structural_sup_upper(k))
        return self._sup_hi[k]

    def _structural_sup_upper(self, k: int) -> float:
        return 0.0

    def block(self, k: int = 0) -> slice | None:
        """Level-M cell range outside which Delta^k of this node vanishes, if known."""
        return None

    def support(self) -> np.ndarray:
        """Level-M cells on which the node may be nonzero (boolean mask)."""
        if not hasattr(self, "_support"):
            self._support = self._compute_support()
        return self._support

    def _compute_support(self) -> np.ndarray:
        v, n = self.slots(0)
        return np.any(v != 0.0, axis=1) | np.any(n != 0.0, axis=1)

    def integral(self, k: int = 0) -> float:
        return self.ctx.integrate(self.slots(k)[0])

    def __add__(self, other: "Expr") -> "Sum":
        return Sum(self.ctx, [(1.0, self), (1.0, other)])

    def __mul__(self, c: float) -> "Sum":
        return Sum(self.ctx, [(float(c), self)])

    __rmul__ = __mul__

    def __neg__(self) -> "Sum":
        return Sum(self.ctx, [(-1.0, self)])

    def __sub__(self, other: "Expr") -> "Sum":
        return Sum(self.ctx, [(1.0, self), (-1.0, other)])


EMPTY = slice(0, 0)


class Zero(Expr):
    def _compute(self, k):
        z = np.zeros(self.ctx.cells.shape)
        return z, z.copy()

    def _compute_support(self):
        return np.zeros(self.ctx.cells.shape[0], dtype=bool)

    def block(self, k=0):
        return EMPTY


class Leaf(Expr):
    """Vertex data, taken as piecewise harmonic on level-M cells; order 0."""

    order = 0

    def __init__(self, ctx: Context, values: np.ndarray):
        super().__init__(ctx)
        self._v = np.asarray(values, dtype=float)

    def _compute(self, k):
        vals = self._v[self.ctx.cells]
        return vals, self.ctx.local_nd(vals)


class Harmonic(Expr):
    def __init__(self, ctx: Context, boundary_values: Sequence[float]):
        super().__init__(ctx)
        self.boundary_values = np.asarray(boundary_values, dtype=float)

    def _compute(self, k):
        ctx = self.ctx
        if k > 0:
            z = np.zeros(ctx.cells.shape)
            return z, z.copy()
        h = harmonic_extend(ctx.stack.hs, self.boundary_values, ctx.M, ctx.table).values
        vals = h[ctx.cells]
        return vals, ctx.local_nd(vals)

    def block(self, k=0):
        return EMPTY if k > 0 else None


class Green(Expr):
    """Dirichlet Green's operator applied to ``child`` (so Delta Green(c) = c)."""

    def __init__(self, ctx: Context, child: Expr):
        super().__init__(ctx)
        self.child = child
        self.order = child.order + 1

    @cached_property
    def vertex_values(self) -> np.ndarray:
        ctx = self.ctx
        st = ctx.stack
        b = ctx.assemble_rhs(self.child.slots(0)[0])
        u = np.zeros(st.n)
        u[st.interior] = -st.interior_lu.solve(b[st.interior])
        return u

    def _compute(self, k):
        ctx = self.ctx
        if k > 0:
            return self.child.slots(k - 1)
        u = self.vertex_values
        vals = u[ctx.cells]
        # one-sided derivative: local Gauss-Green on the cell with the tent at the corner
        nd = ctx.local_nd(vals) + ctx.slot_weight * self.child.slots(0)[0]
        return vals, nd

    def _compute_deep(self, k):
        # the level-M solve is taken as smooth inside each level-M cell
        return self.child.deep(k - 1) if k > 0 else (0.0, 0.0)

    def _structural_sup(self, k):
        return self.child.sup_lower(k - 1) if k > 0 else 0.0

    def _structural_sup_upper(self, k):
        return self.child.sup_upper(k - 1) if k > 0 else 0.0

    def block(self, k=0):
        return self.child.block(k - 1) if k > 0 else None


class Copy(Expr):
    """s * child o F_w^{-1} on F_w(X), extended by zero."""

    def __init__(self, ctx: Context, child: Expr, word: Sequence[int], scale: float = 1.0):
        super().__init__(ctx)
        self.child = child
        self.word = tuple(int(a) for a in word)
        self.scale = float(scale)
        self.order = child.order
        if len(self.word) > ctx.M:
            raise ResolutionExceeded(f"copy depth {len(self.word)} exceeds level {ctx.M}")
        fr = ctx.fractal
        self.mu_w = float(np.prod(fr.measure[list(self.word)])) if self.word else 1.0
        self.r_w = float(np.prod(fr.resistance[list(self.word)])) if self.word else 1.0

    def _compute(self, k):
        ctx = self.ctx
        m = len(self.word)
        cv, cn = self.child.slots(k)
        src = ctx.sub_slot(m)
        s = self.scale * (self.mu_w * self.r_w) ** (-k)
        vals = np.zeros(ctx.cells.shape)
        nd = np.zeros(ctx.cells.shape)
        blk = ctx.table.cell_block(self.word)
        cols = np.arange(ctx.fractal.n0)[None, :]
        vals[blk] = s * cv[src, cols]
        nd[blk] = (s / self.r_w) * cn[src, cols]
        return vals, nd

    def _scale(self, k):
        return abs(self.scale) * (self.mu_w * self.r_w) ** (-k)

    def _compute_deep(self, k):
        if not self.word:
            return self.child.deep(k)
        # junctions inside level-M cells of the copy are images of child
        # junctions off V_{M-m}: its grid vertices and its own deep junctions
        r = residuals(self.child, k)
        ids = self.ctx.table.junction_ids
        dj, dn = self.child.deep(k)
        s = self._scale(k)
        return s * max(r.max_jump(ids), dj), s / self.r_w * max(r.max_normal_sum(ids), dn)

    def _structural_sup(self, k):
        return self._scale(k) * self.child.sup_lower(k)

    def _structural_sup_upper(self, k):
        return self._scale(k) * self.child.sup_upper(k)

    def block(self, k=0):
        if self.child.block(k) == EMPTY:
            return EMPTY
        return self.ctx.table.cell_block(self.word)

    def _compute_support(self):
        ctx = self.ctx
        out = np.zeros(ctx.cells.shape[0], dtype=bool)
        m = len(self.word)
        inner = self.child.support().reshape(ctx.fractal.N ** (ctx.M - m), -1).any(axis=1)
        out[ctx.table.cell_block(self.word)] = inner
        return out


class Sum(Expr):
    def __init__(self, ctx: Context, terms: list[tuple[float, Expr]]):
        super().__init__(ctx)
        self.terms = [(float(c), e) for c, e in terms]
        self.order = min((e.order for _, e in self.terms), default=np.inf)

    def _compute(self, k):
        vals = np.zeros(self.ctx.cells.shape)
        nd = np.zeros(self.ctx.cells.shape)
        for c, e in self.terms:
            if c == 0.0:
                continue
            v, n = e.slots(k)
            vals += c * v
            nd += c * n
        return vals, nd

    def atoms(self, k: int) -> list[tuple[float, Expr, slice | None]]:
        """Non-Sum terms with merged coefficients and their Delta^k blocks."""
        acc: dict[int, list] = {}
        stack = [(1.0, self)]
        while stack:
            c, e = stack.pop()
            if isinstance(e, Sum):
                stack.extend((c * ci, ei) for ci, ei in e.terms if ci != 0.0)
                continue
            slot = acc.setdefault(id(e), [0.0, e])
            slot[0] += c
        out = []
        for c, e in acc.values():
            b = e.block(k)
            if c != 0.0 and b != EMPTY:
                out.append((c, e, b))
        return out

    @staticmethod
    def _overlap(a: slice | None, b: slice | None) -> bool:
        if a is None or b is None:
            return True
        return a.start < b.stop and b.start < a.stop

    def _neighbours(self, k: int):
        at = self.atoms(k)
        return at, [[j for j in range(len(at)) if self._overlap(at[i][2], at[j][2])] for i in range(len(at))]

    def _compute_deep(self, k, keep: np.ndarray | None = None):
        # a junction inside a level-M cell only meets atoms whose blocks hold that cell
        at, nb = self._neighbours(k)
        if keep is not None:
            live = [b is None or bool(keep[b].any()) for _, _, b in at]
            nb = [[j for j in n if live[j]] for i, n in enumerate(nb) if live[i]]
        if not at or not nb:
            return 0.0, 0.0
        jj = max(sum(abs(at[j][0]) * at[j][1].deep(k)[0] for j in n) for n in nb)
        nn = max(sum(abs(at[j][0]) * at[j][1].deep(k)[1] for j in n) for n in nb)
        return float(jj), float(nn)

    def _structural_sup(self, k):
        at = expand(self, k)
        if not at:
            return 0.0
        L = max(len(a.word) for a in at) + self.ctx.M
        iv = np.array([a.interval(L) for a in at], dtype=object)
        lo, hi = iv[:, 0], iv[:, 1]
        # closed cells may share corner points; sups are not taken there
        ov = (lo[:, None] < hi[None, :]) & (lo[None, :] < hi[:, None])
        upper = np.array([a.upper for a in at])
        lower = np.array([a.lower for a in at])
        rest = ov.astype(float) @ upper - upper
        return float(max(0.0, np.max(lower - rest)))

    def _structural_sup_upper(self, k):
        return float(sum(a.upper for a in expand(self, k)))

    def _compute_support(self):
        out = np.zeros(self.ctx.cells.shape[0], dtype=bool)
        for c, e in self.terms:
            if c != 0.0:
                out |= e.support()
        return out

    def block(self, k=0):
        blocks = [b for _, _, b in self.atoms(k)]
        if not blocks:
            return EMPTY
        if any(b is None for b in blocks):
            return None
        return slice(min(b.start for b in blocks), max(b.stop for b in blocks))


@dataclass
class Atom:
    """factor * (Delta^order inner) o F_word^{-1}, zero off F_word(X)."""

    factor: float
    word: tuple
    inner: Expr
    order: int
    partial: bool = False  # cut by a restriction: no lower bound

    @property
    def lower(self) -> float:
        if self.partial:
            return 0.0
        return abs(self.factor) * self.inner.sup_lower(self.order)

    @property
    def upper(self) -> float:
        return abs(self.factor) * self.inner.sup_upper(self.order)

    def cell_range(self) -> tuple[int, int]:
        """Level-M cells of this frame met by the atom."""
        N, M = self.inner.ctx.fractal.N, self.inner.ctx.M
        L = len(self.word) + M
        a, b = self.interval(L)
        f = N ** (L - M)
        return a // f, -(-b // f)

    def interval(self, level: int) -> tuple[int, int]:
        """Cells of F_word(X) meeting the support of the inner block, at ``level``."""
        N, M = self.inner.ctx.fractal.N, self.inner.ctx.M
        b = self.inner.block(self.order)
        b = slice(0, N**M) if b is None else b
        base = word_index(self.word, N) * N**M if self.word else 0
        f = N ** (level - len(self.word) - M)
        return (base + b.start) * f, (base + b.stop) * f



def expand(e: Expr, k: int, factor: float = 1.0, word: tuple = ()) -> list[Atom]:
    """Delta^k e as merged atoms, unfolding sums, copies and (for k >= 1) Green nodes."""
    acc: dict = {}

    def walk(e, k, factor, word):
        if factor == 0.0:
            return
        if isinstance(e, Sum):
            for c, t in e.terms:
                walk(t, k, factor * c, word)
        elif isinstance(e, Copy):
            walk(e.child, k, factor * e.scale * (e.mu_w * e.r_w) ** (-k), word + e.word)
        elif isinstance(e, Green) and k > 0:
            walk(e.child, k - 1, factor, word)
        elif isinstance(e, Restrict):
            for a in expand(e.child, k):
                lo, hi = a.cell_range()
                inside = e.mask[lo:hi]
                if not inside.any():
                    continue
                add(factor * a.factor, word + a.word, a.inner, a.order, a.partial or not inside.all())
        elif e.block(k) == EMPTY:
            return
        else:
            add(factor, word, e, k, False)

    def add(factor, word, inner, k, partial):
        key = (word, id(inner), k, partial)
        if key in acc:
            acc[key].factor += factor
        else:
            acc[key] = Atom(factor, word, inner, k, partial)

    walk(e, k, factor, word)
    return [a for a in acc.values() if a.factor != 0.0]


class Restrict(Expr):
    """child on a union of level-M cells (boolean mask over cells), zero elsewhere."""

    def __init__(self, ctx: Context, child: Expr, cell_mask: np.ndarray):
        super().__init__(ctx)
        self.child = child
        self.mask = np.asarray(cell_mask, dtype=bool)
        self.order = child.order

    def _compute(self, k):
        v, n = self.child.slots(k)
        keep = self.mask[:, None]
        return np.where(keep, v, 0.0), np.where(keep, n, 0.0)

    def _compute_deep(self, k):
        # deep junctions sit inside level-M cells, so dropped cells take theirs along
        c = self.child
        if isinstance(c, Sum):
            return c._compute_deep(k, self.mask)
        b = c.block(k)
        if b is not None and not self.mask[b].any():
            return 0.0, 0.0
        return c.deep(k)

    def _compute_support(self):
        return self.child.support() & self.mask

    def _structural_sup_upper(self, k):
        return self.child.sup_upper(k)

    def _structural_sup(self, k):
        return Sum(self.ctx, [(1.0, self)])._structural_sup(k)


class Frozen(Expr):
    """Precomputed slot tower (used for iterate histories and deserialized data)."""

    def __init__(self, ctx: Context, tower: dict[int, tuple[np.ndarray, np.ndarray]], order: int,
                 deep: dict | None = None, sup: dict | None = None, sup_hi: dict | None = None):
        super().__init__(ctx)
        self._slots = dict(tower)
        self._deep = dict(deep or {})
        self._sup = dict(sup or {})
        self._sup_hi = dict(sup_hi or {})
        self.order = order

    def _compute(self, k):
        raise CertificateTooWeak(f"frozen tower has no Delta^{k}")


def freeze(e: Expr, K: int) -> Frozen:
    K = int(min(K, e.order))
    ks = range(K + 1)
    return Frozen(e.ctx, {k: e.slots(k) for k in ks}, K, {k: e.deep(k) for k in ks},
                  {k: e.sup_lower(k) for k in ks}, {k: e.sup_upper(k) for k in ks})


@dataclass
class Residuals:
    jump: np.ndarray  # per vertex
    normal_sum: np.ndarray  # per vertex
    scale: float  # sup |Delta^k u|

    def max_jump(self, ids: np.ndarray | None = None) -> float:
        j = self.jump if ids is None else self.jump[ids]
        return float(j.max()) if j.size else 0.0

    def max_normal_sum(self, ids: np.ndarray | None = None) -> float:
        j = self.normal_sum if ids is None else self.normal_sum[ids]
        return float(j.max()) if j.size else 0.0


def residuals(e: Expr, k: int) -> Residuals:
    """Matching-condition defects of Delta^k e at every vertex of V_M.

    At boundary vertices of X there is one slot, so ``jump`` is 0 and
    ``normal_sum`` is |d_n Delta^k e(q)|.
    """
    ctx = e.ctx
    vals, nd = e.slots(k)
    flat_v, flat_n = vals.ravel(), nd.ravel()
    owner, order = ctx._slot_owner
    v, n = flat_v[order], flat_n[order]
    bounds = np.searchsorted(owner, np.arange(ctx.table.n + 1))
    starts = bounds[:-1]
    vmax = np.maximum.reduceat(v, starts)
    vmin = np.minimum.reduceat(v, starts)
    nsum = np.add.reduceat(n, starts)
    return Residuals(vmax - vmin, np.abs(nsum), float(np.max(np.abs(vals))))


def boundary_jet(e: Expr, k: int) -> tuple[np.ndarray, np.ndarray]:
    """(Delta^k e(q_i), d_n Delta^k e(q_i)) for the points of V_0."""
    vals, nd = e.slots(k)
    fr = e.ctx.fractal
    out_v, out_n = np.zeros(fr.n0), np.zeros(fr.n0)
    for i in range(fr.n0):
        c = word_index((fr.boundary[i],) * e.ctx.M, fr.N)
        out_v[i], out_n[i] = vals[c, i], nd[c, i]
    return out_v, out_n


def vertex_jet(e: Expr, k: int, x: int, cell_mask: np.ndarray | None = None) -> tuple[float, float]:
    """One-sided jet at vertex x from the level-M cells in ``cell_mask``:
    (common value, summed normal derivative)."""
    ctx = e.ctx
    vals, nd = e.slots(k)
    idx = ctx.slots_at[x]
    cells, corners = idx // ctx.fractal.n0, idx % ctx.fractal.n0
    if cell_mask is not None:
        sel = cell_mask[cells]
        cells, corners = cells[sel], corners[sel]
    if cells.size == 0:
        return 0.0, 0.0
    return float(vals[cells, corners].mean()), float(nd[cells, corners].sum())


def certificate(e: Expr, K: int, ids: np.ndarray | None = None, rel_tol: float = 1e-6) -> dict:
    """Per-order matching residuals at junction vertices, relative to sup |Delta^k e|."""
    ctx = e.ctx
    if ids is None:
        ids = ctx.table.junction_ids
    out = []
    for k in range(K + 1):
        r = residuals(e, k)
        sup = e.sup_lower(k)
        scale = sup if sup > 0 else 1.0
        dj, dn = e.deep(k)
        jump, nsum = max(r.max_jump(ids), dj), max(r.max_normal_sum(ids), dn)
        out.append(
            {
                "k": k,
                "sup": sup,
                "grid_sup": r.scale,
                "max_jump": jump,
                "max_normal_sum": nsum,
                "relative": max(jump, nsum) / scale,
                "passes": bool(max(jump, nsum) <= rel_tol * scale),
            }
        )
    return {"orders": out, "rel_tol": rel_tol, "passes": all(o["passes"] for o in out)}
