"""Path simulation on a shared noise basis.

All simulators consume one Brownian-increment array per ensemble so that
coupled runs (perturbed state, first variation, affine dual) differ only by
systematic effects, never by sampling noise.  Increments are generated from
counter-based Philox streams keyed by (seed, path index), which makes every
ensemble bit-reproducible regardless of how paths are chunked across workers.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import (
    ControlLaw,
    ModelSpec,
    _mat_vec,
    diffusion_at,
    drift_at,
    drift_jac_u,
    drift_jac_x,
    cost_at,
)

__all__ = [
    "SimulationError",
    "TimeGrid",
    "PathEnsemble",
    "FirstVariationEnsemble",
    "DualEnsemble",
    "ExpansionReport",
    "brownian_increments",
    "simulate_state",
    "simulate_perturbed",
    "simulate_first_variation",
    "simulate_affine_dual",
    "direction_from_laws",
    "estimate_moment",
    "verify_expansion_residual",
    "ensemble_to_csv",
    "ensemble_to_binary",
    "ensemble_from_binary",
]

_BINARY_MAGIC = b"ERGP"
_BINARY_VERSION = 1


class SimulationError(RuntimeError):
    """Simulation aborted (non-finite state, mismatched inputs)."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid with `steps` intervals of width `dt` on [0, dt*steps]."""

    dt: float
    steps: int

    def __post_init__(self):
        if not (self.dt > 0.0 and np.isfinite(self.dt)):
            raise SimulationError("TimeGrid: dt must be positive and finite")
        if self.steps < 1:
            raise SimulationError("TimeGrid: steps must be >= 1")

    @property
    def horizon(self) -> float:
        return self.dt * self.steps

    def times(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time t; rejects off-grid times."""
        j = int(round(t / self.dt))
        if j < 0 or j > self.steps or abs(j * self.dt - t) > 1e-9 * max(1.0, abs(t)):
            raise SimulationError(f"time {t} is not on the grid (dt={self.dt}, steps={self.steps})")
        return j

    @staticmethod
    def from_horizon(horizon: float, dt: float) -> "TimeGrid":
        steps = int(round(horizon / dt))
        if abs(steps * dt - horizon) > 1e-9 * max(1.0, horizon):
            raise SimulationError(f"horizon {horizon} is not a multiple of dt={dt}")
        return TimeGrid(dt=dt, steps=steps)


def _chunk_ranges(m: int, workers: int):
    workers = max(1, min(int(workers), m))
    bounds = np.linspace(0, m, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_chunked(fn, m: int, workers: int):
    ranges = _chunk_ranges(m, workers)
    if len(ranges) == 1:
        fn(*ranges[0])
        return
    with ThreadPoolExecutor(max_workers=len(ranges)) as pool:
        list(pool.map(lambda r: fn(*r), ranges))


def _time_major(arr: np.ndarray) -> np.ndarray:
    """View with the path axis first; the underlying buffer is time-major so
    per-step slices arr[:, j] stay contiguous."""
    return arr.transpose(1, 0, *range(2, arr.ndim))


def brownian_increments(seed: int, M: int, grid: TimeGrid, d: int, workers: int = 1) -> np.ndarray:
    """Increments of shape (M, steps, d) with per-cell variance dt.

    Path i draws from Philox keyed by (seed, i); the result is independent of
    the worker count by construction.
    """
    if not (0 <= int(seed) < 2**63):
        raise SimulationError("seed must be a nonnegative 63-bit integer")
    buf = np.empty((grid.steps, M, d))
    root = np.sqrt(grid.dt)

    def fill(lo, hi):
        for i in range(lo, hi):
            gen = np.random.Generator(np.random.Philox(key=np.array([seed, i], dtype=np.uint64)))
            buf[:, i, :] = gen.standard_normal((grid.steps, d))
        buf[:, lo:hi, :] *= root

    _run_chunked(fill, M, workers)
    return _time_major(buf)


@dataclass(frozen=True)
class PathEnsemble:
    """M trajectories of the state equation plus the noise that drove them."""

    grid: TimeGrid
    states: np.ndarray       # (M, steps+1, n)
    increments: np.ndarray   # (M, steps, d)
    seed: int
    control_id: str
    x0: np.ndarray

    def __post_init__(self):
        self.states.setflags(write=False)
        self.increments.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    @property
    def n(self) -> int:
        return self.states.shape[2]

    @property
    def d(self) -> int:
        return self.increments.shape[2]

    def restricted(self, horizon: float) -> "PathEnsemble":
        """View of the ensemble truncated to [0, horizon]."""
        j = self.grid.index_of(horizon)
        return PathEnsemble(
            grid=TimeGrid(dt=self.grid.dt, steps=j),
            states=self.states[:, : j + 1],
            increments=self.increments[:, :j],
            seed=self.seed,
            control_id=self.control_id,
            x0=self.x0,
        )


@dataclass(frozen=True)
class FirstVariationEnsemble:
    grid: TimeGrid
    states: np.ndarray  # (M, steps+1, n), Y_0 = 0 on every path
    base_seed: int

    def __post_init__(self):
        self.states.setflags(write=False)


@dataclass(frozen=True)
class DualEnsemble:
    """Solution of the linearized forward equation started at grid index
    `start_index` from the per-path initial condition eta."""

    grid: TimeGrid
    values: np.ndarray  # (M, steps+1, n); entries before start_index are zero
    start_index: int
    base_seed: int

    def __post_init__(self):
        self.values.setflags(write=False)


def _check_finite(X, step, what):
    if not np.isfinite(X).all():
        bad = np.argwhere(~np.isfinite(X))
        path = int(bad[0, 0])
        raise SimulationError(f"{what}: non-finite value at step {step}, path {path}")


def simulate_state(
    model: ModelSpec,
    control: ControlLaw,
    x0,
    grid: TimeGrid,
    M: int,
    seed: int,
    workers: int = 1,
) -> PathEnsemble:
    """Tamed Euler simulation of the controlled state equation.

    The drift increment is dt*b / (1 + dt*|b|), which keeps the scheme stable
    for the odd-polynomial drifts of the cubic family; the diffusion term is
    standard Euler.  Deterministic for fixed (seed, M, grid) at any worker
    count.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (model.n,):
        raise SimulationError(f"x0 must have shape ({model.n},)")
    if not np.isfinite(x0).all():
        raise SimulationError("x0 must be finite")
    dW = brownian_increments(seed, M, grid, model.d, workers=workers)
    Xbuf = np.empty((grid.steps + 1, M, model.n))
    Xbuf[0] = x0
    dt = grid.dt

    def run(lo, hi):
        sel = slice(lo, hi)
        for j in range(grid.steps):
            xj = Xbuf[j, sel]
            uj = control.evaluate(j * dt, xj)
            b = drift_at(model, xj, uj)
            bnorm = np.sqrt((b * b).sum(axis=-1, keepdims=True))
            sig = diffusion_at(model, xj, uj)
            noise = (sig * dW[sel, j][:, None, :]).sum(axis=-1)
            Xbuf[j + 1, sel] = xj + dt * b / (1.0 + dt * bnorm) + noise
            _check_finite(Xbuf[j + 1, sel], j + 1, "simulate_state")

    _run_chunked(run, M, workers)
    return PathEnsemble(
        grid=grid, states=_time_major(Xbuf), increments=dW, seed=int(seed),
        control_id=control.describe(), x0=x0,
    )


def _require_base_under(base: PathEnsemble, u_bar: ControlLaw, what: str):
    if base.control_id != u_bar.describe():
        raise SimulationError(
            f"{what}: base ensemble was generated under {base.control_id!r}, "
            f"not under the supplied control {u_bar.describe()!r}"
        )


def simulate_perturbed(
    model: ModelSpec,
    u_bar: ControlLaw,
    u_alt: ControlLaw,
    theta: float,
    base: PathEnsemble,
) -> PathEnsemble:
    """State under the convex perturbation u_bar + theta*(u_alt - u_bar).

    The direction is evaluated along the base path (open-loop perturbation of
    the control process) and the simulation reuses the base increments, so
    theta = 0 reproduces the base ensemble bitwise.
    """
    if not (0.0 <= theta <= 1.0):
        raise SimulationError("theta must lie in [0, 1]")
    _require_base_under(base, u_bar, "simulate_perturbed")
    grid, dW = base.grid, base.increments
    M = base.n_paths
    dt = grid.dt
    Xbuf = np.empty((grid.steps + 1, M, base.n))
    Xbuf[0] = base.states[:, 0]
    for j in range(grid.steps):
        xb = base.states[:, j]
        ub = u_bar.evaluate(j * dt, xb)
        ua = u_alt.evaluate(j * dt, xb)
        uj = ub + theta * (ua - ub)
        xj = Xbuf[j]
        b = drift_at(model, xj, uj)
        bnorm = np.sqrt((b * b).sum(axis=-1, keepdims=True))
        sig = diffusion_at(model, xj, uj)
        noise = (sig * dW[:, j][:, None, :]).sum(axis=-1)
        Xbuf[j + 1] = xj + dt * b / (1.0 + dt * bnorm) + noise
        _check_finite(Xbuf[j + 1], j + 1, "simulate_perturbed")
    return PathEnsemble(
        grid=grid, states=_time_major(Xbuf), increments=dW, seed=base.seed,
        control_id=f"perturbed(theta={theta!r}, base={base.control_id}, alt={u_alt.describe()})",
        x0=base.x0,
    )


def direction_from_laws(u_bar: ControlLaw, u_alt: ControlLaw, base: PathEnsemble) -> np.ndarray:
    """Direction process v = u_alt - u_bar evaluated along the base path,
    shape (M, steps, l)."""
    grid = base.grid
    M = base.n_paths
    l = u_bar.control_set.dim
    v = np.empty((M, grid.steps, l))
    for j in range(grid.steps):
        xb = base.states[:, j]
        v[:, j] = u_alt.evaluate(j * grid.dt, xb) - u_bar.evaluate(j * grid.dt, xb)
    return v


def _affine_forward(
    grid: TimeGrid,
    dW: np.ndarray,
    z0: np.ndarray,
    start_index: int,
    lam,
    drift_force,
    gam=None,
    noise_force=None,
    what: str = "affine system",
) -> np.ndarray:
    """Euler recursion for dZ = (Lam Z + gamma)dt + sum_i (Gam^i Z + rho^i)dW^i.

    `lam(j)` returns (M, n, n); `drift_force(j)` returns (M, n) or None;
    `gam(j)` returns (M, d, n, n) or None; `noise_force(j)` returns (M, d, n)
    or None.  Starts from z0 at `start_index`; earlier entries are zero.
    """
    M, n = z0.shape
    dt = grid.dt
    Zbuf = np.zeros((grid.steps + 1, M, n))
    Zbuf[start_index] = z0
    for j in range(start_index, grid.steps):
        zj = Zbuf[j]
        incr = dt * _mat_vec(lam(j), zj)
        fd = drift_force(j) if drift_force is not None else None
        if fd is not None:
            incr = incr + dt * fd
        dwj = dW[:, j]  # (M, d)
        gj = gam(j) if gam is not None else None
        if gj is not None:
            gz = (gj * zj[:, None, None, :]).sum(axis=-1)  # (M, d, n)
            incr = incr + (gz * dwj[:, :, None]).sum(axis=1)
        fn = noise_force(j) if noise_force is not None else None
        if fn is not None:
            incr = incr + (fn * dwj[:, :, None]).sum(axis=1)
        Zbuf[j + 1] = zj + incr
        _check_finite(Zbuf[j + 1], j + 1, what)
    return _time_major(Zbuf)


def simulate_first_variation(
    model: ModelSpec,
    base: PathEnsemble,
    u_bar: ControlLaw,
    v: np.ndarray,
) -> FirstVariationEnsemble:
    """Linearized response of the state to the control direction v.

    Euler recursion Y_{j+1} = Y_j + dt(D_xb Y_j + D_ub v_j) + sum_i
    (D_xsigma^i Y_j + D_usigma^i v_j) dW^i_j on the base increments, Y_0 = 0.
    """
    _require_base_under(base, u_bar, "simulate_first_variation")
    grid = base.grid
    M = base.n_paths
    v = np.asarray(v, dtype=float)
    if v.shape != (M, grid.steps, model.l):
        raise SimulationError(
            f"direction process must have shape ({M}, {grid.steps}, {model.l}), got {v.shape}"
        )
    controls = [u_bar.evaluate(j * grid.dt, base.states[:, j]) for j in range(grid.steps)]
    constant_sigma = model.diffusion.family == "constant"

    def lam(j):
        return drift_jac_x(model, base.states[:, j], controls[j])

    def drift_force(j):
        return _mat_vec(drift_jac_u(model, base.states[:, j], controls[j]), v[:, j])

    # Constant-diffusion families contribute no noise terms to the recursion.
    gam = None if constant_sigma else _model_gam(model, base, controls)
    noise_force = None if constant_sigma else _model_noise_force(model, base, controls, v)

    Y = _affine_forward(
        grid, base.increments, np.zeros((M, model.n)), 0,
        lam, drift_force, gam, noise_force, what="simulate_first_variation",
    )
    return FirstVariationEnsemble(grid=grid, states=Y, base_seed=base.seed)


def _model_gam(model, base, controls):
    from .model import diffusion_jac_x

    def gam(j):
        return diffusion_jac_x(model, base.states[:, j], controls[j])

    return gam


def _model_noise_force(model, base, controls, v):
    from .model import diffusion_jac_u

    def noise_force(j):
        ju = diffusion_jac_u(model, base.states[:, j], controls[j])  # (M, d, n, l)
        return (ju * v[:, j][:, None, None, :]).sum(axis=-1)

    return noise_force


def simulate_affine_dual(
    model: ModelSpec,
    base: PathEnsemble,
    u_bar: ControlLaw,
    t0: float,
    eta: np.ndarray,
    gamma: Optional[np.ndarray] = None,
    rho: Optional[np.ndarray] = None,
) -> DualEnsemble:
    """Affine dual forward equation on [t0, T] driven by the base noise.

    dYcal = (Lam Ycal + gamma)dt + sum_i (Gam^i Ycal + rho^i)dW^i with
    Ycal_{t0} = eta.  `gamma` has shape (M, steps, n) and `rho` has shape
    (M, steps, d, n), both indexed on the full grid (entries before t0 are
    ignored).
    """
    _require_base_under(base, u_bar, "simulate_affine_dual")
    grid = base.grid
    M = base.n_paths
    j0 = grid.index_of(t0)
    eta = np.asarray(eta, dtype=float)
    if eta.shape == (model.n,):
        eta = np.broadcast_to(eta, (M, model.n)).copy()
    if eta.shape != (M, model.n):
        raise SimulationError(f"eta must have shape ({M}, {model.n})")
    if gamma is not None and np.asarray(gamma).shape != (M, grid.steps, model.n):
        raise SimulationError(f"gamma must have shape ({M}, {grid.steps}, {model.n})")
    if rho is not None and np.asarray(rho).shape != (M, grid.steps, model.d, model.n):
        raise SimulationError(f"rho must have shape ({M}, {grid.steps}, {model.d}, {model.n})")
    controls = [u_bar.evaluate(j * grid.dt, base.states[:, j]) for j in range(grid.steps)]
    constant_sigma = model.diffusion.family == "constant"

    def lam(j):
        return drift_jac_x(model, base.states[:, j], controls[j])

    drift_force = None if gamma is None else (lambda j: gamma[:, j])
    noise_force = None if rho is None else (lambda j: rho[:, j])
    gam = None if constant_sigma else _model_gam(model, base, controls)

    values = _affine_forward(
        grid, base.increments, eta, j0, lam, drift_force, gam, noise_force,
        what="simulate_affine_dual",
    )
    return DualEnsemble(grid=grid, values=values, start_index=j0, base_seed=base.seed)


def estimate_moment(ensemble: PathEnsemble, q: int, t: float):
    """Monte Carlo estimate of E|X_t|^q with a 95% normal CI half-width."""
    if q < 2 or q % 2 != 0:
        raise SimulationError("moment order q must be a positive even integer")
    j = ensemble.grid.index_of(t)
    r = np.linalg.norm(ensemble.states[:, j], axis=-1)
    vals = r**q
    est = float(vals.mean())
    if len(vals) > 1:
        half = float(1.96 * vals.std(ddof=1) / np.sqrt(len(vals)))
    else:
        half = 0.0
    return est, half


@dataclass(frozen=True)
class ExpansionReport:
    """Perturbation scaling and first-order expansion residual over a theta ladder."""

    thetas: tuple
    sup_delta_sq: tuple      # sup_t mean |X^theta_t - X_t|^2 per theta
    sup_residual_sq: tuple   # sup_t mean |(X^theta_t - X_t)/theta - Y_t|^2 per theta
    scaling_slope: float     # log-log slope of sup_delta_sq against theta
    residual_decreasing: bool
    residual_halved: bool    # residual at the smallest theta < half the largest

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "thetas": list(self.thetas),
            "sup_delta_sq": list(self.sup_delta_sq),
            "sup_residual_sq": list(self.sup_residual_sq),
            "scaling_slope": self.scaling_slope,
            "residual_decreasing": self.residual_decreasing,
            "residual_halved": self.residual_halved,
        }


def verify_expansion_residual(
    model: ModelSpec,
    u_bar: ControlLaw,
    u_alt: ControlLaw,
    thetas,
    base: PathEnsemble,
) -> ExpansionReport:
    """Couple the perturbed state, the base state and the first variation on
    shared noise and report the quadratic perturbation scaling together with
    the first-order expansion residual for each theta."""
    thetas = [float(t) for t in thetas]
    if len(thetas) < 1 or any(not (0.0 < t <= 1.0) for t in thetas):
        raise SimulationError("thetas must lie in (0, 1]")
    if any(b >= a for a, b in zip(thetas, thetas[1:])):
        raise SimulationError("thetas must be strictly decreasing")
    v = direction_from_laws(u_bar, u_alt, base)
    Y = simulate_first_variation(model, base, u_bar, v)
    sup_delta, sup_resid = [], []
    for theta in thetas:
        pert = simulate_perturbed(model, u_bar, u_alt, theta, base)
        delta = pert.states - base.states
        sup_delta.append(float((delta**2).sum(axis=-1).mean(axis=0).max()))
        resid = delta / theta - Y.states
        sup_resid.append(float((resid**2).sum(axis=-1).mean(axis=0).max()))
    slope = float(np.polyfit(np.log(thetas), np.log(sup_delta), 1)[0]) if len(thetas) > 1 else float("nan")
    decreasing = all(b < a for a, b in zip(sup_resid, sup_resid[1:]))
    halved = sup_resid[-1] < 0.5 * sup_resid[0] if len(thetas) > 1 else True
    return ExpansionReport(
        thetas=tuple(thetas),
        sup_delta_sq=tuple(sup_delta),
        sup_residual_sq=tuple(sup_resid),
        scaling_slope=slope,
        residual_decreasing=decreasing,
        residual_halved=halved,
    )


# ---------------------------------------------------------------------------
# Ensemble export


def ensemble_to_csv(ensemble: PathEnsemble, path: str) -> None:
    """Write states as CSV with columns path, step, t, x_1..x_n."""
    n = ensemble.n
    header = "path,step,t," + ",".join(f"x_{i + 1}" for i in range(n))
    dt = ensemble.grid.dt
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for i in range(ensemble.n_paths):
            for j in range(ensemble.grid.steps + 1):
                coords = ",".join(repr(float(v)) for v in ensemble.states[i, j])
                fh.write(f"{i},{j},{repr(j * dt)},{coords}\n")


def ensemble_to_binary(ensemble: PathEnsemble, path: str) -> None:
    """Compact dump; see README for the exact little-endian layout."""
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<I", _BINARY_VERSION))
        fh.write(
            struct.pack(
                "<QQQQQd",
                ensemble.n_paths,
                ensemble.grid.steps,
                ensemble.n,
                ensemble.d,
                ensemble.seed,
                ensemble.grid.dt,
            )
        )
        fh.write(np.ascontiguousarray(ensemble.x0, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.states, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ensemble.increments, dtype="<f8").tobytes())


def ensemble_from_binary(path: str) -> PathEnsemble:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _BINARY_MAGIC:
            raise SimulationError("not an ensemble dump (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _BINARY_VERSION:
            raise SimulationError(f"unsupported dump version {version}")
        m, steps, n, d, seed, dt = struct.unpack("<QQQQQd", fh.read(48))
        x0 = np.frombuffer(fh.read(8 * n), dtype="<f8").astype(float)
        states = np.frombuffer(fh.read(8 * m * (steps + 1) * n), dtype="<f8")
        states = states.reshape(m, steps + 1, n).astype(float)
        incr = np.frombuffer(fh.read(8 * m * steps * d), dtype="<f8")
        incr = incr.reshape(m, steps, d).astype(float)
    # Re-buffer time-major so per-step slices stay contiguous downstream.
    states = _time_major(np.ascontiguousarray(states.transpose(1, 0, 2)))
    incr = _time_major(np.ascontiguousarray(incr.transpose(1, 0, 2)))
    return PathEnsemble(
        grid=TimeGrid(dt=dt, steps=steps),
        states=states, increments=incr, seed=seed,
        control_id="imported", x0=x0,
    )


def running_cost(model: ModelSpec, ensemble: PathEnsemble, control: ControlLaw) -> np.ndarray:
    """Pathwise running cost f(X_j, u_j) at the left endpoints, shape (M, steps)."""
    grid = ensemble.grid
    out = np.empty((ensemble.n_paths, grid.steps))
    for j in range(grid.steps):
        xj = ensemble.states[:, j]
        out[:, j] = cost_at(model, xj, control.evaluate(j * grid.dt, xj))
    return out
