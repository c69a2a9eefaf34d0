"""Smooth bumps, Borel-type jet realization and smooth partitions on p.c.f. fractals."""
from .borel import Jet, build_bases, transfer_to_junction, verify_jet
from .bump import BumpConfig, BumpProblem, iterate_to_fixed_point, symmetric_fixed_point
from .energy import build_stack, graph_energy, normal_derivative, pointwise_laplacian
from .fractal import interval, load_fractal, sierpinski_gasket
from .green import GreenSolver, green_apply
from .heat import eigendecompose, heat_apply, heat_cutoff
from .partition import OpenCover, smooth_partition
from .smooth import certificate

__version__ = "0.1.0"
