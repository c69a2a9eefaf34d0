"""Cross-module invariant suite behind ``pcfsmooth verify``."""
from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh

from .energy import LaplacianStack, graph_energy, pointwise_laplacian
from .green import GreenSolver, green_apply

TOL = 1e-10


def gauss_green(stack: LaplacianStack, pairs: int = 50, seed: int = 0) -> dict:
    """E(u, v) = -int (Delta u) v dmu + sum_{q in V_0} v(q) d_n u(q) for random pairs."""
    rng = np.random.default_rng(seed)
    n0 = stack.fractal.n0
    worst = 0.0
    for _ in range(pairs):
        u, v = rng.normal(size=stack.n), rng.normal(size=stack.n)
        lhs = graph_energy(stack, u, v)
        lap = pointwise_laplacian(stack, u).values
        nd = (stack.H @ u)[:n0]
        rhs = -float(np.sum(stack.quad_weights[n0:] * lap[n0:] * v[n0:])) + float(v[:n0] @ nd)
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300))
    return {"pairs": pairs, "max_relative": worst, "passes": bool(worst <= TOL)}


def energy_self_similarity(stack: LaplacianStack, samples: int = 5, seed: int = 1) -> dict:
    """E_M(u) = sum_j r_j^{-1} E_{M-1}(u o F_j)."""
    rng = np.random.default_rng(seed)
    fr = stack.fractal
    coarse = stack.at_level(stack.level - 1)
    worst = 0.0
    for _ in range(samples):
        u = rng.normal(size=stack.n)
        lhs = graph_energy(stack, u, u)
        rhs = sum(
            graph_energy(coarse, u[stack.table.pullback_map((j,))], u[stack.table.pullback_map((j,))]) / fr.resistance[j]
            for j in range(fr.N)
        )
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    return {"samples": samples, "max_relative": worst, "passes": bool(worst <= TOL)}


def green_round_trip(stack: LaplacianStack, samples: int = 5, seed: int = 2) -> dict:
    """Delta G f = f off V_0 and G f = 0 on V_0."""
    rng = np.random.default_rng(seed)
    solver = GreenSolver(stack)
    n0 = stack.fractal.n0
    worst, bdry = 0.0, 0.0
    for _ in range(samples):
        f = rng.normal(size=stack.n)
        u = green_apply(solver, f).values
        lap = pointwise_laplacian(stack, u).values
        worst = max(worst, float(np.max(np.abs(lap[n0:] - f[n0:])) / np.max(np.abs(f))))
        bdry = max(bdry, float(np.max(np.abs(u[:n0]))))
    return {"samples": samples, "max_relative": worst, "boundary_max": bdry, "passes": bool(worst <= 1e-8 and bdry == 0.0)}


def lowest_eigenvalues(stack: LaplacianStack, bc: str, count: int) -> np.ndarray:
    free = np.arange(stack.n) if bc == "neumann" else stack.interior
    s = sp.diags(1.0 / np.sqrt(stack.quad_weights[free]))
    A = (s @ stack.H[free][:, free] @ s).tocsc()
    # shift below 0 keeps the Neumann operator invertible
    lam = eigsh(A, k=count, sigma=-1.0, which="LM", return_eigenvectors=False)
    return np.sort(lam)


def spectral_sanity(stack: LaplacianStack, count: int = 10) -> dict:
    """Neumann spectrum starts at a simple 0, Dirichlet spectrum is positive, and
    Dirichlet eigenvalues dominate Neumann ones index by index (lowest ``count``)."""
    neu = lowest_eigenvalues(stack, "neumann", count)
    dir_ = lowest_eigenvalues(stack, "dirichlet", count)
    scale = max(1.0, float(neu[-1]))
    out = {
        "neumann_lowest": [float(x) for x in neu[:3]],
        "dirichlet_lowest": [float(x) for x in dir_[:3]],
        "neumann_zero_simple": bool(abs(neu[0]) <= 1e-9 * scale and neu[1] > 1e-9 * scale),
        "dirichlet_positive": bool(dir_[0] > 0),
        "interlacing": bool(np.all(dir_ >= neu - 1e-9 * scale)),
    }
    checks = ["neumann_zero_simple", "dirichlet_positive", "interlacing"]
    if stack.fractal.name == "interval":
        out["lambda1_over_pi2"] = float(dir_[0] / math.pi**2)
        out["lambda1_close"] = bool(abs(out["lambda1_over_pi2"] - 1) < 1e-2)
        checks.append("lambda1_close")
    out["passes"] = all(out[c] for c in checks)
    return out


def run_all(stack: LaplacianStack) -> dict:
    checks = {
        "gauss_green": gauss_green(stack),
        "energy_self_similarity": energy_self_similarity(stack),
        "green_round_trip": green_round_trip(stack),
        "spectral_sanity": spectral_sanity(stack),
    }
    failing = [k for k, v in checks.items() if not v["passes"]]
    return {"checks": checks, "failing": failing, "passes": not failing}
