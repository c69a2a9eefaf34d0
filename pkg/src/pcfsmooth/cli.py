"""Command-line interface.

Every command writes CSV for function data and JSON for reports, and every
report carries the exact configuration that produced it.  Relative output
paths are resolved against ``$PCFSMOOTH_OUTPUT_DIR`` when it is set.
"""
from __future__ import annotations

import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import click
import numpy as np

from . import io
from .errors import PcfError
from .fractal import load_fractal

M_CAP = 11
OUTPUT_ENV = "PCFSMOOTH_OUTPUT_DIR"


@dataclass
class RunConfig:
    fractal: str
    level: int
    tol: float = 1e-9
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.level <= M_CAP:
            raise click.BadParameter(f"level must be in 1..{M_CAP}, got {self.level}")
        if not self.tol > 0:
            raise click.BadParameter("tolerances must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _out(path: str | Path) -> Path:
    path = Path(path)
    base = os.environ.get(OUTPUT_ENV)
    return path if path.is_absolute() or not base else Path(base) / path


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _word(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _words(text: str) -> list[tuple[int, ...]]:
    return [_word(t) for t in text.split(";")]


def _stack(cfg: RunConfig):
    from .energy import build_stack

    return build_stack(load_fractal(cfg.fractal), cfg.level)


def _fail(exc: Exception):
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(2)


fractal_opt = click.option("--fractal", default="interval", show_default=True, help="builtin name or JSON spec path")
level_opt = click.option("--level", "-M", type=int, default=8, show_default=True, help=f"grid level M (at most {M_CAP})")


@click.group()
def main():
    """Smooth bumps, Borel jets and smooth partitions on p.c.f. fractals."""


@main.command()
@fractal_opt
@level_opt
@click.option("--report", default="verify.json", show_default=True)
def verify(fractal, level, report):
    """Run the invariant suite; exit 0 iff every check passes."""
    from .verify import run_all

    cfg = RunConfig(fractal, level)
    try:
        res = run_all(_stack(cfg))
    except PcfError as exc:
        _fail(exc)
    res["config"] = cfg.to_dict()
    io.write_json(_out(report), res)
    for name, chk in res["checks"].items():
        click.echo(f"{name}: {'pass' if chk['passes'] else 'FAIL'}")
    if not res["passes"]:
        click.echo("failing: " + ", ".join(res["failing"]), err=True)
        sys.exit(1)


def run_bump_fixedpoint(cfg: RunConfig, emit: Path, cert: Path) -> dict:
    from .bump import BumpConfig, BumpProblem, iterate_to_fixed_point, uniqueness

    st = _stack(cfg)
    p = cfg.params
    prob = BumpProblem(st, BumpConfig(l1=p["l1"], l2=p["l2"], eps_target=p["eps"], tol=cfg.tol))
    res = iterate_to_fixed_point(prob)
    report = dict(res.certificate)
    report["uniqueness"] = uniqueness(prob)
    report["config"] = cfg.to_dict()
    io.write_grid_csv(emit, st.table, res.u, "u")
    io.write_json(cert, report)
    return report


@main.command("bump-fixedpoint")
@fractal_opt
@level_opt
@click.option("--l1", type=int, default=3, show_default=True)
@click.option("--l2", type=int, default=3, show_default=True)
@click.option("--eps", type=float, default=0.5, show_default=True, help="target for |u - 1| off Y")
@click.option("--tol", type=float, default=1e-9, show_default=True)
@click.option("--emit", default="u.csv", show_default=True)
@click.option("--cert", default="cert.json", show_default=True)
def bump_fixedpoint(fractal, level, l1, l2, eps, tol, emit, cert):
    """Fixed-point smooth bump; writes u.csv and cert.json together."""
    cfg = RunConfig(fractal, level, tol, {"l1": l1, "l2": l2, "eps": eps})
    try:
        rep = run_bump_fixedpoint(cfg, _out(emit), _out(cert))
    except PcfError as exc:
        _fail(exc)
    click.echo(f"iterations {rep['iterations']}, off-Y deviation {rep['off_Y_deviation']:.3e}, "
               f"matching {'pass' if rep['matching']['passes'] else 'FAIL'}")


def _k_mask(st, k_interval: str | None, k_cells: str | None) -> np.ndarray:
    if k_cells:
        mask = np.zeros(st.n, dtype=bool)
        for w in _words(k_cells):
            mask |= st.table.cell_mask(w)
        return mask
    a, b = _floats(k_interval or "0.375,0.625")
    x = st.table.points[:, 0]
    return (x >= a - 1e-12) & (x <= b + 1e-12)


def run_bump_heat(cfg: RunConfig, out_dir: Path) -> dict:
    from .energy import integrate
    from .heat import eigendecompose, heat_cutoff

    st = _stack(cfg)
    p = cfg.params
    K = _k_mask(st, p.get("k_interval"), p.get("k_cells"))
    f = K.astype(float)
    if p.get("normalize", True):
        f = f / math.sqrt(integrate(st, f * f))
    spec = eigendecompose(st, "neumann")
    res = heat_cutoff(spec, f, K, p["eps"], J=p["J"], k_max=p["kmax"], strict=False)
    diag = dict(res.diagnostics)
    diag["config"] = cfg.to_dict()
    sched = diag["schedule"]
    io.write_rows_csv(out_dir / "schedule.csv", list(sched[0].keys()), [list(r.values()) for r in sched])
    io.write_grid_csv(out_dir / "v.csv", st.table, res.v.values, "v")
    io.write_json(out_dir / "diagnostics.json", diag)
    return diag


@main.command("bump-heat")
@fractal_opt
@level_opt
@click.option("--k-interval", default=None, help="K = [a,b] on the first coordinate, as 'a,b'")
@click.option("--k-cells", default=None, help="K = union of closed cells, as '0,1;1,0'")
@click.option("--eps", type=float, default=0.25, show_default=True)
@click.option("--J", "J", type=int, default=6, show_default=True)
@click.option("--kmax", type=int, default=3, show_default=True)
@click.option("--emit-dir", default="bump-heat", show_default=True)
def bump_heat(fractal, level, k_interval, k_cells, eps, J, kmax, emit_dir):
    """Heat-kernel cutoff of the L^2-normalized indicator of K."""
    cfg = RunConfig(fractal, level, params={"k_interval": k_interval, "k_cells": k_cells, "eps": eps, "J": J, "kmax": kmax})
    try:
        d = run_bump_heat(cfg, _out(emit_dir))
    except PcfError as exc:
        _fail(exc)
    click.echo(f"on-K error {d['final']['on_K_error']:.3e}, outside {d['final']['outside_norm']:.3e}, "
               f"violations {len(d['violations'])}")


def _jet_basis(st, order: int):
    from .borel import build_bases
    from .bump import BumpConfig, BumpProblem, iterate_to_fixed_point

    l = 3 if st.fractal.N == 2 else 2
    prob = BumpProblem(st, BumpConfig(l1=l, l2=l, K_max=order))
    U = iterate_to_fixed_point(prob).expr()
    return build_bases(st, U, order, order), U


def run_borel(cfg: RunConfig, emit: Path, report: Path) -> dict:
    from .borel import transfer_to_junction, verify_jet
    from .smooth import certificate

    st = _stack(cfg)
    p = cfg.params
    rho, sigma = p["rho"], p["sigma"]
    if len(rho) != len(sigma):
        raise click.BadParameter("rho and sigma need the same length")
    basis, _ = _jet_basis(st, len(rho) - 1)
    res = transfer_to_junction(basis, p["anchor"], tuple(p["cell"]), rho, sigma)
    ids = np.setdiff1d(st.table.junction_ids, [p["anchor"]])
    rep = {
        "jet": verify_jet(res),
        "certificate": certificate(res.f, len(rho) - 1, ids=ids),
        "scales": res.scales,
        "assembly": res.report,
        "basis": basis.report,
        "config": cfg.to_dict(),
    }
    io.write_grid_csv(emit, st.table, res.f.values(), "f")
    io.write_json(report, rep)
    return rep


@main.command()
@fractal_opt
@level_opt
@click.option("--anchor", type=int, required=True, help="vertex id of the anchor point")
@click.option("--rho", required=True, help="Delta^k f(x), comma separated")
@click.option("--sigma", required=True, help="d_n Delta^k f(x) from the cell, comma separated")
@click.option("--cell", default="", help="word of the support cell, e.g. '1,1'")
@click.option("--emit", default="f.csv", show_default=True)
@click.option("--report", default="report.json", show_default=True)
def borel(fractal, level, anchor, rho, sigma, cell, emit, report):
    """Smooth function on one cell with a prescribed jet at one of its corners."""
    cfg = RunConfig(fractal, level, params={"anchor": anchor, "rho": _floats(rho), "sigma": _floats(sigma), "cell": list(_word(cell))})
    try:
        rep = run_borel(cfg, _out(emit), _out(report))
    except (PcfError, ValueError) as exc:
        _fail(exc)
    click.echo(f"jet max error {rep['jet']['max_error']:.3e}, support contained {rep['jet']['support_contained']}")


def run_partition(cfg: RunConfig, out_dir: Path) -> dict:
    from .partition import OpenCover, smooth_partition
    from .smooth import Harmonic, Leaf, Context

    st = _stack(cfg)
    p = cfg.params
    basis, U = _jet_basis(st, p["kjet"])
    ctx = basis.ctx
    if p["f"] == "constant":
        f = Harmonic(ctx, [1.0] * st.fractal.n0)
    elif p["f"] == "bump":
        f = U
    else:
        f = Leaf(ctx, io.read_grid_csv(p["f"], st.table))
    members = io.read_json(p["cover"])["members"]
    res = smooth_partition(f, OpenCover(ctx, members), basis, p["kjet"])
    for i, piece in enumerate(res.pieces):
        io.write_grid_csv(out_dir / f"piece_{i}.csv", st.table, piece.values(), "f")
    rep = dict(res.report)
    rep["labels"] = res.labels
    rep["config"] = cfg.to_dict()
    io.write_json(out_dir / "certificates.json", rep)
    return rep


@main.command()
@fractal_opt
@level_opt
@click.option("--f", "f", default="constant", show_default=True,
              help="'constant', 'bump' or a vertex CSV (raw CSV data is certified at order 0 only)")
@click.option("--cover", required=True, help="JSON file {\"members\": [[word, ...], ...]}")
@click.option("--kjet", type=int, default=3, show_default=True)
@click.option("--emit-dir", default="partition", show_default=True)
def partition(fractal, level, f, cover, kjet, emit_dir):
    """Split f into smooth pieces subordinate to a cell-representable open cover."""
    cfg = RunConfig(fractal, level, params={"f": f, "cover": cover, "kjet": kjet})
    try:
        rep = run_partition(cfg, _out(emit_dir))
    except (PcfError, ValueError) as exc:
        _fail(exc)
    click.echo(f"{len(rep['pieces'])} pieces, sum error {rep['sum_error']:.3e}, {'pass' if rep['passes'] else 'FAIL'}")


def run_kernel(cfg: RunConfig, out_dir: Path) -> dict:
    from .green import GreenSolver, series_convergence

    st = _stack(cfg)
    solver = GreenSolver(st)
    g = solver.kernel
    # the table is quadratic in |V_m|; rows are restricted to a coarse level
    m = min(st.level, cfg.params.get("kernel_level", 5))
    I = np.arange(st.fractal.n0, st.table.n_at(m))
    rows = [(int(x), int(y), float(g[x, y])) for x in I for y in I if y >= x]
    io.write_rows_csv(out_dir / "kernel.csv", ["x", "y", "g"], rows)
    conv = series_convergence(solver)
    rep = {"series_relative_error": conv, "config": cfg.to_dict()}
    io.write_json(out_dir / "kernel.json", rep)
    return rep


def run_spectrum(cfg: RunConfig, out_dir: Path) -> dict:
    from .heat import eigendecompose

    st = _stack(cfg)
    bc = cfg.params.get("bc", "dirichlet")
    lam = eigendecompose(st, bc).eigenvalues
    io.write_rows_csv(out_dir / "spectrum.csv", ["k", "lambda"], [(k + 1, float(v)) for k, v in enumerate(lam)])
    rep = {"count": int(lam.size), "lowest": lam[:5].tolist(), "config": cfg.to_dict()}
    io.write_json(out_dir / "spectrum.json", rep)
    return rep


EMITTERS = ("bump-fixedpoint", "bump-heat", "borel", "partition", "kernel", "spectrum")


@main.command()
@click.argument("which", type=click.Choice(EMITTERS))
@fractal_opt
@level_opt
@click.option("--out-dir", default="emit", show_default=True)
@click.option("--bc", type=click.Choice(["dirichlet", "neumann"]), default="dirichlet", show_default=True)
@click.option("--cover", default=None, help="cover JSON for 'partition'")
def emit(which, fractal, level, out_dir, bc, cover):
    """Emit plot-ready data for one construction with default parameters."""
    out = _out(out_dir)
    try:
        if which == "spectrum":
            run_spectrum(RunConfig(fractal, level, params={"bc": bc}), out)
        elif which == "kernel":
            run_kernel(RunConfig(fractal, level), out)
        elif which == "bump-fixedpoint":
            l = 3 if load_fractal(fractal).N == 2 else 2
            run_bump_fixedpoint(RunConfig(fractal, level, params={"l1": l, "l2": l, "eps": 0.5}), out / "u.csv", out / "cert.json")
        elif which == "bump-heat":
            run_bump_heat(RunConfig(fractal, level, params={"k_interval": None, "k_cells": None, "eps": 0.25, "J": 6, "kmax": 3}), out)
        elif which == "borel":
            fr = load_fractal(fractal)
            b = fr.boundary[0]
            run_borel(RunConfig(fractal, level, params={"anchor": 0, "rho": [0.0, 0.0, 0.0], "sigma": [1.0, 0.0, 0.0], "cell": [b, b]}),
                      out / "f.csv", out / "report.json")
        elif which == "partition":
            if cover is None:
                raise click.BadParameter("emit partition needs --cover")
            run_partition(RunConfig(fractal, level, params={"f": "constant", "cover": cover, "kjet": 3}), out)
    except PcfError as exc:
        _fail(exc)
    click.echo(f"wrote {which} to {out}")


if __name__ == "__main__":
    main()
