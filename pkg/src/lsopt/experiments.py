"""Benchmark experiments with manufactured solutions and data-file output.

Five experiments are built in:

* ``poisson-unconstrained`` -- distributed control of the Poisson
  equation on the unit square, smooth manufactured solution.
* ``poisson-constrained``  -- same setting with the control clamped to
  the box [-1, 0].
* ``lshape``               -- constrained control on the L-shaped domain
  (no closed-form solution; the indicator drives adaptivity).
* ``stokes``               -- unconstrained control of the Stokes system
  in pseudostress form, divergence-free manufactured velocity.
* ``heat``                 -- constrained control of the heat equation on
  the space-time square, including an initial-value control.

Each run writes one whitespace-separated data file with a fixed header
and prints an experimental-order-of-convergence table.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .adaptivity import AdaptConfig, adaptive_loop, compute_eoc
from .mesh import build_lshape, build_rectangle_spacetime, build_unit_square
from .problems import (
    ControlConstraints,
    diffusion_problem,
    heat_problem,
    stokes_problem,
    unconstrained,
)
from .vi_solver import SolverConfig

DATA_HEADER = "dofLSQ estLSQ errState errAdjoint errU errU0 iterAS hMax level"


class NoManufacturedSolution(LookupError):
    """Raised for experiments without a closed-form solution."""


@dataclass
class ManufacturedCase:
    """Closed-form optimal triple and the data manufactured from it.

    All domain callbacks take point arrays of shape (n, 2); for the heat
    problem the columns are (t, x) and the trace callbacks u0, y0, z_dT
    take the 1D spatial coordinate.
    """

    name: str
    fields: dict = field(default_factory=dict)

    def __getattr__(self, item):
        try:
            return self.fields[item]
        except KeyError:
            raise AttributeError(item) from None


def _poisson_case(lam, bounds):
    pi = np.pi

    def y(p):
        return np.sin(pi * p[:, 0]) * np.sin(pi * p[:, 1])

    def grad_y(p):
        return np.stack(
            [
                pi * np.cos(pi * p[:, 0]) * np.sin(pi * p[:, 1]),
                pi * np.sin(pi * p[:, 0]) * np.cos(pi * p[:, 1]),
            ],
            axis=1,
        )

    def lap_y(p):
        return -2.0 * pi**2 * y(p)

    def adj(p):
        return p[:, 0] * (1 - p[:, 0]) * p[:, 1] * (1 - p[:, 1])

    def grad_p(p):
        g1 = p[:, 0] * (1 - p[:, 0])
        g2 = p[:, 1] * (1 - p[:, 1])
        return np.stack([(1 - 2 * p[:, 0]) * g2, g1 * (1 - 2 * p[:, 1])], axis=1)

    def lap_p(p):
        return -2.0 * (p[:, 1] * (1 - p[:, 1]) + p[:, 0] * (1 - p[:, 0]))

    lo, hi = bounds

    def u(p):
        return np.clip(-adj(p) / lam, lo, hi)

    def f(p):
        return -lap_y(p) - u(p)

    def z_d(p):
        return lap_p(p) + y(p)

    return ManufacturedCase(
        name="poisson",
        fields={
            "y": y,
            "grad_y": grad_y,
            "sigma": lambda p: -grad_y(p),
            "div_sigma": lambda p: -lap_y(p),
            "p": adj,
            "grad_p": grad_p,
            "xi": grad_p,
            "div_xi": lap_p,
            "u": u,
            "f": f,
            "z_d": z_d,
        },
    )


def _stokes_case(lam):
    def parts(p):
        x, yy = p[:, 0], p[:, 1]
        return x - x**2, 1 - 2 * x, yy - yy**2, 1 - 2 * yy

    def vel(p):
        G, Gp, H, Hp = parts(p)
        return np.stack([2 * G**2 * H * Hp, -2 * G * Gp * H**2], axis=1)

    def grad_vel(p):
        G, Gp, H, Hp = parts(p)
        out = np.empty((p.shape[0], 2, 2))
        out[:, 0, 0] = 4 * G * Gp * H * Hp
        out[:, 0, 1] = 2 * G**2 * (Hp**2 - 2 * H)
        out[:, 1, 0] = -2 * H**2 * (Gp**2 - 2 * G)
        out[:, 1, 1] = -4 * G * Gp * H * Hp
        return out

    def lap_vel(p):
        G, Gp, H, Hp = parts(p)
        return np.stack(
            [
                4 * H * Hp * (Gp**2 - 2 * G) - 12 * G**2 * Hp,
                12 * H**2 * Gp - 4 * G * Gp * (Hp**2 - 2 * H),
            ],
            axis=1,
        )

    def u(p):
        return -vel(p) / lam

    def f(p):
        return -lap_vel(p) - u(p)

    def z_d(p):
        return lap_vel(p) + vel(p)

    return ManufacturedCase(
        name="stokes",
        fields={
            "y": vel,
            "grad_y": grad_vel,
            "M": grad_vel,
            "div_M": lap_vel,
            "p": vel,
            "grad_p": grad_vel,
            "N": grad_vel,
            "div_N": lap_vel,
            "u": u,
            "f": f,
            "z_d": z_d,
        },
    )


def _heat_case(lam, lam0, bounds, bounds0):
    pi = np.pi

    def y(p):
        return p[:, 0] * np.sin(pi * p[:, 1])

    def dy_dt(p):
        return np.sin(pi * p[:, 1])

    def dy_dx(p):
        return p[:, 0] * pi * np.cos(pi * p[:, 1])

    def d2y_dxx(p):
        return -p[:, 0] * pi**2 * np.sin(pi * p[:, 1])

    def adj(p):
        return (1 - p[:, 0]) * p[:, 1] * (1 - p[:, 1])

    def dp_dt(p):
        return -p[:, 1] * (1 - p[:, 1])

    def dp_dx(p):
        return (1 - p[:, 0]) * (1 - 2 * p[:, 1])

    def d2p_dxx(p):
        return -2.0 * (1 - p[:, 0])

    lo, hi = bounds
    lo0, hi0 = bounds0

    def u(p):
        return np.clip(-adj(p) / lam, lo, hi)

    def u0(x):
        return np.clip(-x * (1 - x) / lam0, lo0, hi0)

    def f(p):
        return dy_dt(p) - d2y_dxx(p) - u(p)

    def z_d(p):
        return dp_dt(p) + d2p_dxx(p) + y(p)

    def y0(x):
        return -u0(x)  # y(0, x) = 0, so the initial datum absorbs the control

    def z_dT(x):
        return np.sin(pi * x)  # -p(T) + y(T) with p(T) = 0

    return ManufacturedCase(
        name="heat",
        fields={
            "y": y,
            "dy_dt": dy_dt,
            "dy_dx": dy_dx,
            "sigma": dy_dx,
            "div_sigma": d2y_dxx,
            "p": adj,
            "dp_dt": dp_dt,
            "dp_dx": dp_dx,
            "xi": dp_dx,
            "div_xi": d2p_dxx,
            "u": u,
            "u0": u0,
            "f": f,
            "z_d": z_d,
            "y0": y0,
            "z_dT": z_dT,
        },
    )


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    lam: float
    mode: str  # default refinement mode
    n0: int = 2
    levels: int = 6
    theta: float = 0.25
    gamma: float = 5.0
    lam0: float = 0.0
    bounds: tuple = (-math.inf, math.inf)
    bounds0: tuple = (-math.inf, math.inf)
    domain: str = "unit-square"


EXPERIMENTS = {
    "poisson-unconstrained": ExperimentSpec(
        name="poisson-unconstrained", lam=1e-2, mode="uniform", levels=7
    ),
    "poisson-constrained": ExperimentSpec(
        name="poisson-constrained", lam=1e-2, mode="uniform", levels=7, bounds=(-1.0, 0.0)
    ),
    "lshape": ExperimentSpec(
        name="lshape", lam=1.0, mode="adaptive", levels=6, bounds=(0.1, 0.12),
        domain="l-shape",
    ),
    "stokes": ExperimentSpec(name="stokes", lam=1e-1, mode="uniform", levels=6),
    "heat": ExperimentSpec(
        name="heat", lam=1e-1, lam0=1e-1, mode="uniform", levels=7,
        bounds=(-1.0, 0.0), bounds0=(-1.0, 0.0), domain="space-time",
    ),
}

# level budgets keep the final coupled systems near 1e5 unknowns
_MAX_DOFS = {
    "poisson-unconstrained": 200000,
    "poisson-constrained": 200000,
    "lshape": 40000,
    "stokes": 120000,
    "heat": 150000,
}


def experiment_names():
    return sorted(EXPERIMENTS)


def exact_fields(name):
    """Manufactured solution bundle of an experiment."""
    spec = EXPERIMENTS[name]
    if name == "poisson-unconstrained":
        return _poisson_case(spec.lam, spec.bounds)
    if name == "poisson-constrained":
        return _poisson_case(spec.lam, spec.bounds)
    if name == "stokes":
        return _stokes_case(spec.lam)
    if name == "heat":
        return _heat_case(spec.lam, spec.lam0, spec.bounds, spec.bounds0)
    raise NoManufacturedSolution(f"experiment {name!r} has no manufactured solution")


def build_problem(name):
    """Problem data of an experiment (callbacks, bounds, control costs)."""
    spec = EXPERIMENTS[name]
    if name in ("poisson-unconstrained", "poisson-constrained"):
        case = exact_fields(name)
        cc = (
            unconstrained()
            if name == "poisson-unconstrained"
            else ControlConstraints(lower=spec.bounds[0], upper=spec.bounds[1])
        )
        return diffusion_problem(f=case.f, z_d=case.z_d, lam=spec.lam, constraints=cc)
    if name == "lshape":
        cc = ControlConstraints(lower=spec.bounds[0], upper=spec.bounds[1])
        return diffusion_problem(
            f=lambda p: np.zeros(p.shape[0]),
            z_d=lambda p: np.ones(p.shape[0]),
            lam=spec.lam,
            constraints=cc,
        )
    if name == "stokes":
        case = exact_fields(name)
        return stokes_problem(f=case.f, z_d=case.z_d, lam=spec.lam)
    if name == "heat":
        case = exact_fields(name)
        cc = ControlConstraints(
            lower=spec.bounds[0], upper=spec.bounds[1],
            lower0=spec.bounds0[0], upper0=spec.bounds0[1],
        )
        return heat_problem(
            f=case.f, z_d=case.z_d, y0=case.y0, z_dT=case.z_dT,
            lam=spec.lam, lam0=spec.lam0, constraints=cc,
        )
    raise KeyError(name)


def build_initial_mesh(name, n0):
    spec = EXPERIMENTS[name]
    if spec.domain == "unit-square":
        return build_unit_square(n0)
    if spec.domain == "l-shape":
        return build_lshape(n0)
    if spec.domain == "space-time":
        return build_rectangle_spacetime(1.0, n0)
    raise KeyError(spec.domain)


def resolve_config(name, n0=None, levels=None, max_dofs=None, theta=None, gamma=None, mode=None):
    """Experiment defaults merged with command-line overrides."""
    spec = EXPERIMENTS[name]
    mode = mode or spec.mode
    if mode not in ("uniform", "adaptive"):
        raise ValueError(f"unknown refinement mode {mode!r}")
    cfg = {
        "experiment": name,
        "domain": spec.domain,
        "n0": int(n0 if n0 is not None else spec.n0),
        "mode": mode,
        "theta": float(theta if theta is not None else spec.theta),
        "gamma": float(gamma if gamma is not None else spec.gamma),
        "lam": spec.lam,
        "lam0": spec.lam0,
        "bounds": spec.bounds,
        "bounds0": spec.bounds0,
        "constrained": not (
            math.isinf(spec.bounds[0]) and math.isinf(spec.bounds[1])
            and math.isinf(spec.bounds0[0]) and math.isinf(spec.bounds0[1])
        ),
    }
    if levels is not None:
        cfg["levels"] = int(levels)
        cfg["max_dofs"] = None
    elif max_dofs is not None:
        cfg["levels"] = None
        cfg["max_dofs"] = int(max_dofs)
    elif mode == "adaptive":
        cfg["levels"] = None
        cfg["max_dofs"] = _MAX_DOFS[name]
    else:
        cfg["levels"] = spec.levels
        cfg["max_dofs"] = None
    return cfg


def format_config(cfg):
    lines = [f"{key} = {cfg[key]!r}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


def run(name, n0=None, levels=None, max_dofs=None, theta=None, gamma=None, mode=None,
        out=None, quiet=False):
    """Execute one experiment and return its adaptive-loop result."""
    if name not in EXPERIMENTS:
        raise KeyError(f"unknown experiment {name!r}")
    cfg = resolve_config(name, n0, levels, max_dofs, theta, gamma, mode)
    problem = build_problem(name)
    mesh = build_initial_mesh(name, cfg["n0"])
    try:
        exact = exact_fields(name)
    except NoManufacturedSolution:
        exact = None

    solver_config = SolverConfig(gamma=cfg["gamma"])
    adapt_config = AdaptConfig(
        theta=cfg["theta"],
        max_dofs=cfg["max_dofs"] if cfg["max_dofs"] is not None else 10**9,
        max_levels=cfg["levels"],
        uniform=cfg["mode"] == "uniform",
    )
    result = adaptive_loop(problem, mesh, solver_config, adapt_config, exact=exact)
    if out is not None:
        emit_datafile(result.records, out)
    if not quiet:
        print(format_eoc_table(name, result.records))
    return result


def record_row(record):
    vals = [
        record.n_dofs,
        record.estimate,
        record.err_state,
        record.err_adjoint,
        record.err_u,
        record.err_u0,
        record.iterations,
        record.h_max,
        record.level,
    ]
    return " ".join("nan" if isinstance(v, float) and math.isnan(v) else f"{v:.16g}" for v in vals)


def emit_datafile(records, path):
    """Write one whitespace-separated line per level under a fixed header."""
    if not records:
        raise ValueError("no records to write")
    lines = [DATA_HEADER] + [record_row(r) for r in records]
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


def parse_datafile(path):
    """Read back an emitted data file into a dict of column arrays."""
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().split()
        if header != DATA_HEADER.split():
            raise ValueError(f"unexpected data-file header in {path}")
        body = np.loadtxt(handle, ndmin=2)
    return {name: body[:, k] for k, name in enumerate(header)}


_EOC_COLUMNS = ("estimate", "err_state", "err_adjoint", "err_u", "err_u0")


def format_eoc_table(name, records):
    """Rates of all recorded quantities with respect to the dof count."""
    lines = [f"experiment {name}: {len(records)} levels"]
    header = f"{'level':>5} {'dofs':>9} " + " ".join(f"{c:>12}" for c in _EOC_COLUMNS)
    lines.append(header)
    for r in records:
        vals = " ".join(f"{getattr(r, c):12.4e}" for c in _EOC_COLUMNS)
        lines.append(f"{r.level:>5} {r.n_dofs:>9} {vals}")
    for column in _EOC_COLUMNS:
        rates = compute_eoc(records, column)
        if rates and not all(math.isnan(r) for r in rates):
            shown = " ".join(f"{r:12.3f}" for r in rates)
            lines.append(f"eoc[{column}] vs N: {shown}")
    return "\n".join(lines)
