"""Hamiltonian machinery: optimality checks and control optimization.

The Hamiltonian is H(x, u, p, q) = <b, p> + sum_i <sigma^i, q^i> + f.  An
optimal control makes the long-run average of <D_u H, u - u_bar> nonnegative
for every admissible direction; a strictly negative tail certifies
non-optimality and its direction doubles as a descent direction for the
projected adjoint-gradient optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .adjoint import AdjointSolution, RegressionBasis, extend_to_infinite, solve_adjoint_finite
from .ergodic_cost import checkpoint_times, ergodic_report_from_ensemble
from .forward import SimulationError, TimeGrid, simulate_state
from .model import (
    ControlLaw,
    ModelSpec,
    cost_at,
    cost_grad_u,
    diffusion_at,
    diffusion_jac_u,
    drift_at,
    drift_jacU_T_apply,
)

__all__ = [
    "SmpReport",
    "SufficiencyReport",
    "OptimizeResult",
    "hamiltonian",
    "grad_u_hamiltonian",
    "candidate_battery",
    "evaluate_variational_inequality",
    "check_sufficiency",
    "optimize_control",
]


def hamiltonian(model: ModelSpec, x, u, p, q) -> float:
    """H(x, u, p, q) = <b, p> + sum_i <sigma^i, q^i> + f with q of shape (d, n).

    Defined for any real (x, u); no admissibility check is applied.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    u = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
    p = np.atleast_1d(np.asarray(p, dtype=float))
    q = np.asarray(q, dtype=float).reshape(model.d, model.n)
    b = drift_at(model, x, u)[0]
    sig = diffusion_at(model, x, u)[0]          # (n, d)
    f = float(cost_at(model, x, u)[0])
    return float(b @ p + (sig.T * q).sum() + f)


def grad_u_hamiltonian(model: ModelSpec, x, u, p, q) -> np.ndarray:
    """D_u H = (D_u b)^T p + sum_i (D_u sigma^i)^T q^i + D_u f, shape (l,)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))[None, :]
    u = np.atleast_1d(np.asarray(u, dtype=float))[None, :]
    p = np.atleast_1d(np.asarray(p, dtype=float))[None, :]
    q = np.asarray(q, dtype=float).reshape(1, model.d, model.n)
    return _grad_u_batch(model, x, u, p, q)[0]


def _grad_u_batch(model, X, U, P, Q) -> np.ndarray:
    """Batched D_u H over (M, ...) arrays; Q has shape (M, d, n)."""
    out = drift_jacU_T_apply(model, P)                       # (D_u b)^T p
    if model.diffusion.family != "constant":
        ju = diffusion_jac_u(model, X, U)                    # (M, d, n, l)
        out = out + (ju * Q[:, :, :, None]).sum(axis=(1, 2))
    return out + cost_grad_u(model, X, U)


@dataclass(frozen=True)
class SmpReport:
    """Checkpointed value of (1/T) E int <D_u H, u - u_bar> dt for one direction."""

    direction_id: str
    checkpoints: tuple          # ((T, value), ...)
    tail_min: float
    ci: float
    tolerance: float
    verdict: str                # "consistent" | "violated"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "direction_id": self.direction_id,
            "checkpoints": [[t, v] for (t, v) in self.checkpoints],
            "tail_min": self.tail_min,
            "ci": self.ci,
            "tolerance": self.tolerance,
            "verdict": self.verdict,
        }


def candidate_battery(
    model: ModelSpec,
    u_bar: ControlLaw,
    seed: int = 0,
    n_random: int = 4,
) -> List[Tuple[str, ControlLaw]]:
    """Fixed battery of admissible directions: constant shifts, deterministic
    and random linear feedbacks, and the sign-flip of the current law."""
    cs = model.control_set
    rng = np.random.default_rng(seed)
    battery: List[Tuple[str, ControlLaw]] = []
    ones = np.ones(model.l)
    battery.append(("const(+1)", ControlLaw.constant(cs.project(ones), cs)))
    battery.append(("const(-1)", ControlLaw.constant(cs.project(-ones), cs)))
    eye = np.eye(model.l, model.n)
    battery.append(("gain(+0.5)", ControlLaw.affine(0.5 * eye, np.zeros(model.l), cs)))
    battery.append(("gain(-0.5)", ControlLaw.affine(-0.5 * eye, np.zeros(model.l), cs)))
    for i in range(n_random):
        gain = rng.uniform(-1.0, 1.0, size=(model.l, model.n))
        battery.append((f"rand-gain-{i}", ControlLaw.affine(gain, np.zeros(model.l), cs)))
    battery.append(("sign-flip", u_bar.negated()))
    return battery


def _pairing_series(model, sol: AdjointSolution, u_bar, candidate: ControlLaw):
    """Per-step ensemble mean of <D_u H, u_cand - u_bar> along the base path,
    plus the per-path time average for the CI."""
    ens = sol.ensemble
    grid = ens.grid
    dt = grid.dt
    m = ens.n_paths
    series = np.empty(grid.steps)
    per_path = np.zeros(m)
    for j in range(grid.steps):
        xj = ens.states[:, j]
        ub = u_bar.evaluate(j * dt, xj)
        grad = _grad_u_batch(model, xj, ub, sol.p[:, j], sol.q[:, j])
        delta = candidate.evaluate(j * dt, xj) - ub
        vals = (grad * delta).sum(axis=-1)
        series[j] = vals.mean()
        per_path += vals
    per_path *= dt / grid.horizon
    return series, per_path


def evaluate_variational_inequality(
    model: ModelSpec,
    u_bar: ControlLaw,
    u_candidates: Sequence[Tuple[str, ControlLaw]],
    T_max: float,
    M: int,
    seed: int,
    window: float = 0.25,
    dt: float = 0.01,
    buffer: float = 3.0,
    basis: Optional[RegressionBasis] = None,
    x0=None,
    adjoint: Optional[AdjointSolution] = None,
    workers: int = 1,
) -> List[SmpReport]:
    """Necessary-condition check against a battery of candidate directions.

    A tail value below -max(0.01, 2 CI) certifies non-optimality of u_bar
    (contrapositive use of the variational inequality); nonnegative tails are
    merely consistent with optimality.
    """
    if x0 is None:
        x0 = np.zeros(model.n)
    if adjoint is None:
        adjoint = extend_to_infinite(
            model, u_bar, x0, T_max, buffer, dt, M, seed, basis=basis, workers=workers
        )
    grid = adjoint.grid
    ts = checkpoint_times(grid.horizon, grid.dt, window)
    indices = np.round(ts / grid.dt).astype(int)
    tail_mask = ts >= (1.0 - window) * grid.horizon - 1e-9
    reports = []
    for name, cand in u_candidates:
        series, per_path = _pairing_series(model, adjoint, u_bar, cand)
        cum = np.concatenate([[0.0], np.cumsum(series)]) * grid.dt
        values = cum[indices] / ts
        m = len(per_path)
        ci = float(1.96 * per_path.std(ddof=1) / np.sqrt(m)) if m > 1 else 0.0
        tail_min = float(values[tail_mask].min())
        tolerance = max(0.01, 2.0 * ci)
        verdict = "violated" if tail_min < -tolerance else "consistent"
        reports.append(
            SmpReport(
                direction_id=name,
                checkpoints=tuple((float(t), float(v)) for t, v in zip(ts, values)),
                tail_min=tail_min,
                ci=ci,
                tolerance=tolerance,
                verdict=verdict,
            )
        )
    return reports


@dataclass(frozen=True)
class SufficiencyReport:
    convexity_min_eigen: float
    minimality_tail: float
    tolerance: float
    eigen_tolerance: float
    verdict: str                # "certified" | "not-certified"
    probe_count: int

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "convexity_min_eigen": self.convexity_min_eigen,
            "minimality_tail": self.minimality_tail,
            "tolerance": self.tolerance,
            "eigen_tolerance": self.eigen_tolerance,
            "verdict": self.verdict,
            "probe_count": self.probe_count,
        }


def _hessian_min_eigen(model, x, u, p, q, h=1e-4) -> float:
    """Min eigenvalue of the (x, u)-Hessian of H at fixed (p, q), by central
    finite differences."""
    n, l = model.n, model.l
    z0 = np.concatenate([x, u])

    def val(z):
        return hamiltonian(model, z[:n], z[n:], p, q)

    dim = n + l
    hess = np.empty((dim, dim))
    f0 = val(z0)
    for i in range(dim):
        ei = np.zeros(dim)
        ei[i] = h
        hess[i, i] = (val(z0 + ei) - 2.0 * f0 + val(z0 - ei)) / h**2
        for j in range(i + 1, dim):
            ej = np.zeros(dim)
            ej[j] = h
            mixed = (
                val(z0 + ei + ej) - val(z0 + ei - ej) - val(z0 - ei + ej) + val(z0 - ei - ej)
            ) / (4.0 * h**2)
            hess[i, j] = hess[j, i] = mixed
    return float(np.linalg.eigvalsh(hess).min())


def check_sufficiency(
    model: ModelSpec,
    u_bar: ControlLaw,
    T_max: float,
    M: int,
    seed: int,
    probes: int = 200,
    window: float = 0.25,
    dt: float = 0.01,
    buffer: float = 3.0,
    basis: Optional[RegressionBasis] = None,
    x0=None,
    candidates: Optional[Sequence[Tuple[str, ControlLaw]]] = None,
    tolerance: float = 0.02,
    eigen_tolerance: float = 1e-3,
    workers: int = 1,
) -> SufficiencyReport:
    """Sufficient-condition check: sampled convexity of the Hamiltonian along
    the solved costate plus the minimality tail over a direction battery."""
    if x0 is None:
        x0 = np.zeros(model.n)
    adjoint = extend_to_infinite(
        model, u_bar, x0, T_max, buffer, dt, M, seed, basis=basis, workers=workers
    )
    if candidates is None:
        candidates = candidate_battery(model, u_bar, seed=seed)
    reports = evaluate_variational_inequality(
        model, u_bar, candidates, T_max, M, seed,
        window=window, dt=dt, buffer=buffer, basis=basis, x0=x0, adjoint=adjoint,
    )
    minimality_tail = min(r.tail_min for r in reports)

    grid = adjoint.grid
    ens = adjoint.ensemble
    rng = np.random.default_rng(seed + 101)
    j_lo = grid.index_of(min(1.0, grid.horizon / 4.0)) if grid.horizon > dt else 0
    paths = rng.integers(0, ens.n_paths, size=probes)
    steps = rng.integers(j_lo, grid.steps, size=probes)
    min_eig = np.inf
    for path, j in zip(paths, steps):
        x = ens.states[path, j]
        u = u_bar.evaluate(j * dt, x[None, :])[0]
        eig = _hessian_min_eigen(model, x, u, adjoint.p[path, j], adjoint.q[path, j])
        min_eig = min(min_eig, eig)
    certified = (min_eig >= -eigen_tolerance) and (minimality_tail >= -tolerance)
    return SufficiencyReport(
        convexity_min_eigen=float(min_eig),
        minimality_tail=float(minimality_tail),
        tolerance=tolerance,
        eigen_tolerance=eigen_tolerance,
        verdict="certified" if certified else "not-certified",
        probe_count=probes,
    )


# ---------------------------------------------------------------------------
# Projected adjoint-gradient optimizer


@dataclass(frozen=True)
class OptimizeResult:
    best: ControlLaw
    trace: tuple                # one dict per iteration
    status: str                 # "completed" | "stalled"

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "status": self.status,
            "best": self.best.describe(),
            "trace": list(self.trace),
        }


def _fit_affine_gradient(X: np.ndarray, G: np.ndarray):
    """Least-squares fit G ~ W x + w over pooled samples; returns (W, w)."""
    m, n = X.shape
    design = np.concatenate([np.ones((m, 1)), X], axis=1)
    gram = design.T @ design
    rhs = design.T @ G
    coef = np.linalg.solve(gram, rhs)     # (n+1, l)
    return coef[1:].T, coef[0]


def optimize_control(
    model: ModelSpec,
    u_init: ControlLaw,
    step_gamma: float,
    iterations: int,
    T: float,
    M: int,
    seed: int,
    dt: float = 0.01,
    buffer: float = 2.0,
    burn_in: float = 1.0,
    window: float = 0.25,
    basis: Optional[RegressionBasis] = None,
    x0=None,
    patience: int = 8,
    workers: int = 1,
) -> OptimizeResult:
    """Projected adjoint-gradient descent over feedback laws.

    Each iteration simulates under the current law, solves the costate by
    backward regression, estimates the conditional gradient E[D_u H | x]
    (least-squares fit for affine laws, per-bin averages for tabulated laws)
    and takes a projected step.  The step is halved and the iterate reverted
    whenever the ergodic-cost tail estimate worsens beyond its CI; the run
    stops early after `patience` iterations without improvement.  All
    iterations share one noise realization (common random numbers), so cost
    comparisons across iterates are systematic rather than noisy.
    """
    if u_init.kind not in ("affine_feedback", "tabulated_feedback"):
        raise SimulationError("optimizer supports affine or tabulated feedback laws")
    if step_gamma <= 0:
        raise SimulationError("step_gamma must be positive")
    if x0 is None:
        x0 = np.zeros(model.n)
    basis = basis or RegressionBasis()
    grid_full = TimeGrid.from_horizon(T + buffer, dt)
    j_burn = grid_full.index_of(round(min(burn_in, T / 2.0) / dt) * dt)
    j_top = grid_full.index_of(T)

    law = u_init
    gamma_k = step_gamma
    best_law, best_tail, best_ci = u_init, np.inf, 0.0
    since_best = 0
    trace = []
    status = "completed"

    for it in range(iterations):
        ensemble = simulate_state(model, law, x0, grid_full, M, seed, workers=workers)
        sol = solve_adjoint_finite(model, ensemble, law, basis=basis)
        report = ergodic_report_from_ensemble(model, ensemble.restricted(T), law, window)

        xs, gs = [], []
        for j in range(j_burn, j_top):
            xj = ensemble.states[:, j]
            uj = law.evaluate(j * dt, xj)
            xs.append(xj)
            gs.append(_grad_u_batch(model, xj, uj, sol.p[:, j], sol.q[:, j]))
        X_pool = np.concatenate(xs, axis=0)
        G_pool = np.concatenate(gs, axis=0)

        if law.kind == "affine_feedback":
            W, w = _fit_affine_gradient(X_pool, G_pool)
            new_law = ControlLaw.affine(law.gain - gamma_k * W, law.offset - gamma_k * w, law.control_set)
            grad_norm = float(np.sqrt((W**2).sum() + (w**2).sum()))
            params = {"gain": law.gain.tolist(), "offset": law.offset.tolist()}
        else:
            values = law.bin_values.copy()
            idx = np.clip(
                np.searchsorted(law.bin_edges, X_pool[:, 0], side="right") - 1,
                0, len(values) - 1,
            )
            grad_norm = 0.0
            for b in range(len(values)):
                sel = idx == b
                if sel.any():
                    gb = G_pool[sel].mean(axis=0)
                    values[b] = law.control_set.project(values[b] - gamma_k * gb)
                    grad_norm = max(grad_norm, float(np.abs(gb).max()))
            new_law = ControlLaw.tabulated(law.bin_edges, values, law.control_set)
            params = {"values": law.bin_values.tolist()}

        tail = report.tail_max
        trace.append(
            {
                "iteration": it,
                "cost_tail": tail,
                "ci": report.ci,
                "grad_norm": grad_norm,
                "gamma": gamma_k,
                **params,
            }
        )
        if tail < best_tail:
            best_law, best_tail, best_ci = law, tail, report.ci
            since_best = 0
        else:
            since_best += 1
            if tail > best_tail + max(best_ci, report.ci):
                # Cost got worse beyond noise: halve the step, restart from best.
                gamma_k *= 0.5
                new_law = best_law
        if since_best >= patience:
            status = "stalled"
            break
        law = new_law

    return OptimizeResult(best=best_law, trace=tuple(trace), status=status)
