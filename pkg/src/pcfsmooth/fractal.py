"""Self-similar fractals given by affine IFS data, plus word and vertex bookkeeping.

Words are tuples of 0-based letters.  ``F_w = F_{w[0]} o F_{w[1]} o ...``, so
the first letter picks the coarsest cell.  Vertex ids are stable across
levels: the ids of V_{m-1} are reused in V_m and new vertices are appended
in order of their least (word, boundary index) address.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import AddressCollision, InvalidFractal

GLUE_TOL = 1e-9

Word = tuple


@dataclass(frozen=True)
class ContractionMap:
    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        b = np.atleast_1d(np.asarray(self.offset, dtype=float))
        if A.shape != (b.size, b.size):
            raise InvalidFractal(f"matrix shape {A.shape} does not match offset length {b.size}")
        if np.linalg.norm(A, 2) >= 1.0:
            raise InvalidFractal("map is not a contraction (operator norm >= 1)")
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "offset", b)

    @property
    def dim(self) -> int:
        return self.offset.size

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.matrix.T + self.offset

    def compose(self, inner: "ContractionMap") -> "ContractionMap":
        # (self o inner)(x) = A (B x + c) + b
        return ContractionMap(self.matrix @ inner.matrix, self.matrix @ inner.offset + self.offset)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.matrix, (np.asarray(y, dtype=float) - self.offset).T).T

    def fixed_point(self) -> np.ndarray:
        return np.linalg.solve(np.eye(self.dim) - self.matrix, self.offset)


def _identity_map(d: int) -> tuple[np.ndarray, np.ndarray]:
    return np.eye(d), np.zeros(d)


@dataclass
class PcfFractal:
    """IFS with harmonic structure (r_j), self-similar measure (mu_j) and boundary V_0.

    ``boundary[i]`` is the index of the map whose fixed point is q_i.
    ``conductance`` is the level-0 network on V_0; the default is the complete
    graph with unit conductances.
    """

    maps: list[ContractionMap]
    resistance: np.ndarray
    measure: np.ndarray
    boundary: list[int]
    conductance: np.ndarray | None = None
    name: str = "custom"

    def __post_init__(self):
        self.maps = [m if isinstance(m, ContractionMap) else ContractionMap(*m) for m in self.maps]
        self.resistance = np.asarray(self.resistance, dtype=float)
        self.measure = np.asarray(self.measure, dtype=float)
        self.boundary = [int(b) for b in self.boundary]
        n0 = len(self.boundary)
        if self.conductance is None:
            self.conductance = np.ones((n0, n0)) - np.eye(n0)
        self.conductance = np.asarray(self.conductance, dtype=float)
        self.validate()

    def validate(self) -> None:
        N = len(self.maps)
        if N < 2:
            raise InvalidFractal("need at least two maps")
        dims = {m.dim for m in self.maps}
        if len(dims) != 1:
            raise InvalidFractal("maps act on different dimensions")
        if self.resistance.shape != (N,) or self.measure.shape != (N,):
            raise InvalidFractal("resistance and measure need one entry per map")
        if np.any(self.resistance <= 0) or np.any(self.resistance >= 1):
            raise InvalidFractal("resistance factors must lie in (0, 1)")
        if np.any(self.measure <= 0) or np.any(self.measure >= 1):
            raise InvalidFractal("measure weights must lie in (0, 1)")
        if abs(self.measure.sum() - 1.0) > 1e-12:
            raise InvalidFractal(f"measure weights sum to {float(self.measure.sum())!r}, not 1")
        if len(self.boundary) < 2 or len(set(self.boundary)) != len(self.boundary):
            raise InvalidFractal("boundary needs at least two distinct map indices")
        if any(b < 0 or b >= N for b in self.boundary):
            raise InvalidFractal("boundary index out of range")
        c = self.conductance
        n0 = len(self.boundary)
        if c.shape != (n0, n0) or not np.allclose(c, c.T) or np.any(c < 0):
            raise InvalidFractal("level-0 conductance must be symmetric and nonnegative")
        if connected_components(c > 0, directed=False)[0] != 1:
            raise InvalidFractal("level-0 network is disconnected")

    @property
    def N(self) -> int:
        return len(self.maps)

    @property
    def n0(self) -> int:
        return len(self.boundary)

    @property
    def dim(self) -> int:
        return self.maps[0].dim

    @cached_property
    def boundary_points(self) -> np.ndarray:
        return np.array([self.maps[b].fixed_point() for b in self.boundary])

    @cached_property
    def boundary_position(self) -> dict[int, int]:
        """map index j -> position i of q_j in V_0 (only for boundary maps)."""
        return {b: i for i, b in enumerate(self.boundary)}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "maps": [{"matrix": m.matrix.tolist(), "offset": m.offset.tolist()} for m in self.maps],
            "resistance": self.resistance.tolist(),
            "measure": self.measure.tolist(),
            "boundary": list(self.boundary),
            "conductance": self.conductance.tolist(),
        }


def fractal_from_dict(d: dict) -> PcfFractal:
    try:
        maps = [ContractionMap(m["matrix"], m["offset"]) for m in d["maps"]]
        return PcfFractal(
            maps=maps,
            resistance=d["resistance"],
            measure=d["measure"],
            boundary=d["boundary"],
            conductance=d.get("conductance"),
            name=d.get("name", "custom"),
        )
    except KeyError as exc:
        raise InvalidFractal(f"fractal spec is missing key {exc}") from None


def load_fractal(spec: str | Path) -> PcfFractal:
    """Builtin name or path to a JSON spec file."""
    if str(spec) in BUILTINS:
        return BUILTINS[str(spec)]()
    path = Path(spec)
    if not path.exists():
        raise InvalidFractal(f"unknown fractal {spec!r}: not a builtin and no such file")
    return fractal_from_dict(json.loads(path.read_text()))


def interval() -> PcfFractal:
    return PcfFractal(
        maps=[ContractionMap([[0.5]], [0.0]), ContractionMap([[0.5]], [0.5])],
        resistance=[0.5, 0.5],
        measure=[0.5, 0.5],
        boundary=[0, 1],
        name="interval",
    )


SG_CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])


def sierpinski_gasket(resistance: float | None = None) -> PcfFractal:
    """SG with the symmetric measure.  Without ``resistance`` the factor is
    taken from the Schur-complement renormalization (it comes out as 3/5)."""
    maps = [ContractionMap(0.5 * np.eye(2), 0.5 * p) for p in SG_CORNERS]
    if resistance is None:
        from .energy import symmetric_renormalization_factor

        probe = PcfFractal(maps, [0.5] * 3, [1 / 3] * 3, [0, 1, 2], name="sierpinski-gasket")
        resistance = symmetric_renormalization_factor(probe)
    return PcfFractal(maps, [resistance] * 3, [1 / 3, 1 / 3, 1 / 3], [0, 1, 2], name="sierpinski-gasket")


BUILTINS = {"interval": interval, "sierpinski-gasket": sierpinski_gasket, "sg": sierpinski_gasket}


def word_index(w: Sequence[int], N: int) -> int:
    idx = 0
    for letter in w:
        idx = idx * N + int(letter)
    return idx


def index_word(idx: int, m: int, N: int) -> Word:
    letters = []
    for _ in range(m):
        idx, r = divmod(idx, N)
        letters.append(r)
    return tuple(reversed(letters))


@dataclass(frozen=True)
class Cell:
    word: Word
    map: ContractionMap
    measure: float
    resistance: float


def cell_of_word(fractal: PcfFractal, w: Sequence[int]) -> Cell:
    """Composed map F_w with the exact products mu_w and r_w."""
    w = tuple(int(a) for a in w)
    A, b = _identity_map(fractal.dim)
    mu = r = 1.0
    for letter in w:
        m = fractal.maps[letter]
        b = A @ m.offset + b
        A = A @ m.matrix
        mu *= fractal.measure[letter]
        r *= fractal.resistance[letter]
    return Cell(w, ContractionMap(A, b) if w else _Identity(fractal.dim), mu, r)


class _Identity(ContractionMap):
    # the empty word; bypasses the contraction check
    def __init__(self, d: int):
        object.__setattr__(self, "matrix", np.eye(d))
        object.__setattr__(self, "offset", np.zeros(d))


@dataclass
class VertexTable:
    fractal: PcfFractal
    level: int
    points: np.ndarray
    cells: list[np.ndarray]
    vertex_level: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def boundary_ids(self) -> np.ndarray:
        return np.arange(self.fractal.n0)

    @property
    def junction_ids(self) -> np.ndarray:
        return np.arange(self.fractal.n0, self.n)

    def n_at(self, m: int) -> int:
        """|V_m| for m <= level (ids of V_m are 0..n_at(m)-1)."""
        return int(np.count_nonzero(self.vertex_level <= m))

    def address_map(self) -> dict[tuple[Word, int], int]:
        if "addr" not in self._cache:
            N, M = self.fractal.N, self.level
            amap = {}
            for c in range(N**M):
                w = index_word(c, M, N)
                for i, v in enumerate(self.cells[M][c]):
                    amap[(w, i)] = int(v)
            self._cache["addr"] = amap
        return self._cache["addr"]

    def addresses(self, vid: int) -> list[tuple[Word, int]]:
        M, N = self.level, self.fractal.N
        rows, cols = np.nonzero(self.cells[M] == vid)
        return [(index_word(int(c), M, N), int(i)) for c, i in zip(rows, cols)]

    def cells_containing(self, vid: int, m: int) -> np.ndarray:
        """Indices of the m-cells containing vertex ``vid``."""
        if self.vertex_level[vid] <= m:
            return np.nonzero((self.cells[m] == vid).any(axis=1))[0]
        rows = np.nonzero((self.cells[self.level] == vid).any(axis=1))[0]
        return np.unique(rows // self.fractal.N ** (self.level - m))

    def cell_block(self, w: Sequence[int]) -> slice:
        """Level-M cell indices lying inside the cell F_w(X)."""
        m = len(w)
        if m > self.level:
            raise ValueError(f"word of length {m} is finer than table level {self.level}")
        span = self.fractal.N ** (self.level - m)
        start = word_index(w, self.fractal.N) * span
        return slice(start, start + span)

    def cell_vertex_ids(self, w: Sequence[int]) -> np.ndarray:
        return np.unique(self.cells[self.level][self.cell_block(w)])

    def cell_mask(self, w: Sequence[int]) -> np.ndarray:
        mask = np.zeros(self.n, dtype=bool)
        mask[self.cell_vertex_ids(w)] = True
        return mask

    def pullback_map(self, w: Sequence[int]) -> np.ndarray:
        """arr[y] = id of F_w(y) for every y in V_{M-|w|}."""
        w = tuple(int(a) for a in w)
        key = ("pull", w)
        if key not in self._cache:
            k = self.level - len(w)
            arr = np.empty(self.n_at(k), dtype=np.int64)
            arr[self.cells[k].ravel()] = self.cells[self.level][self.cell_block(w)].ravel()
            self._cache[key] = arr
        return self._cache[key]

    def vertex_at(self, x: Sequence[float]) -> int:
        d, idx = self._tree.query(np.atleast_1d(np.asarray(x, dtype=float)))
        if d > GLUE_TOL:
            raise KeyError(f"no level-{self.level} vertex at {x}")
        return int(idx)

    @cached_property
    def _tree(self) -> cKDTree:
        return cKDTree(self.points)

    def subtable(self, m: int) -> "VertexTable":
        """The level-m table, read off this one (ids agree by construction)."""
        if m > self.level:
            raise ValueError("subtable level exceeds table level")
        n = self.n_at(m)
        return VertexTable(self.fractal, m, self.points[:n], self.cells[: m + 1], self.vertex_level[:n])


def _cluster(points: np.ndarray) -> np.ndarray:
    n = points.shape[0]
    pairs = cKDTree(points).query_pairs(GLUE_TOL, output_type="ndarray")
    if pairs.size == 0:
        return np.arange(n)
    g = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    return connected_components(g, directed=False)[1]


def build_vertex_table(fractal: PcfFractal, m: int) -> VertexTable:
    """All vertices of V_m, glued by geometric coincidence."""
    if m < 0:
        raise ValueError("level must be nonnegative")
    N, n0 = fractal.N, fractal.n0
    points = fractal.boundary_points.copy()
    cells = [np.arange(n0)[None, :]]
    vlevel = np.zeros(n0, dtype=np.int64)
    for k in range(1, m + 1):
        prev_n = points.shape[0]
        cand = np.concatenate([fm(points) for fm in fractal.maps])
        cand_cells = np.concatenate([j * prev_n + cells[k - 1] for j in range(N)])
        labels = _cluster(cand)
        n_cl = labels.max() + 1
        rep = np.zeros((n_cl, fractal.dim))
        rep[labels] = cand
        spread = np.linalg.norm(cand - rep[labels], axis=1).max()
        if spread > GLUE_TOL:
            raise AddressCollision(f"gluing chains points {spread:.3g} apart at level {k}")
        # canonical rank of a cluster = smallest lexicographic (word, corner) position
        rank = np.full(n_cl, np.iinfo(np.int64).max)
        np.minimum.at(rank, labels[cand_cells.ravel()], np.arange(cand_cells.size))
        d, old_cl = cKDTree(rep).query(points)
        if np.any(d > GLUE_TOL) or len(set(old_cl.tolist())) != prev_n:
            raise AddressCollision(f"level-{k - 1} vertices do not embed into level {k}")
        new_id = np.full(n_cl, -1, dtype=np.int64)
        new_id[old_cl] = np.arange(prev_n)
        fresh = np.setdiff1d(np.arange(n_cl), old_cl)
        fresh = fresh[np.argsort(rank[fresh], kind="stable")]
        new_id[fresh] = prev_n + np.arange(fresh.size)
        cell_ids = new_id[labels[cand_cells]]
        for row in cell_ids:
            if len(set(row.tolist())) != n0:
                raise AddressCollision(f"a level-{k} cell has two corners glued together")
        points = np.concatenate([points, rep[fresh]])
        cells.append(cell_ids)
        vlevel = np.concatenate([vlevel, np.full(fresh.size, k)])
    return VertexTable(fractal, m, points, cells, vlevel)


def m_scale_neighborhood(table: VertexTable, x: int, m: int) -> list[Word]:
    """The m-cells whose union (less outer boundary) is the m-scale open neighbourhood of x."""
    idx = table.cells_containing(x, m)
    N = table.fractal.N
    return [index_word(int(c), m, N) for c in idx]


def measure_of_word(fractal: PcfFractal, w: Sequence[int]) -> float:
    return float(np.prod(fractal.measure[list(w)])) if len(w) else 1.0


def resistance_of_word(fractal: PcfFractal, w: Sequence[int]) -> float:
    return float(np.prod(fractal.resistance[list(w)])) if len(w) else 1.0


def level_weights(fractal: PcfFractal, m: int, values: np.ndarray) -> np.ndarray:
    """Products over all length-m words of per-letter ``values``, lexicographic order."""
    out = np.ones(1)
    for _ in range(m):
        out = np.outer(out, values).ravel()
    return out
