"""Problem instances: coefficient families, convex control sets, feedback laws.

A model bundles drift b(x,u), diffusion sigma(x,u), running cost f(x,u), the
admissible control set U, and the structural constants (m, p, k) that the
rest of the library relies on.  Two built-in families are provided:

* ``lq``    -- b = A x + B u, constant sigma, quadratic cost.
* ``cubic`` -- componentwise odd-polynomial drift b_i = -alpha_i x_i^3 +
  (A x)_i + (B u)_i, constant sigma, quadratic cost.

Both families expose exact analytic first derivatives of every coefficient.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

__all__ = [
    "ModelError",
    "ConvexSet",
    "ControlLaw",
    "Drift",
    "Diffusion",
    "Cost",
    "ModelSpec",
    "EvalResult",
    "DissipativityReport",
    "eval_model",
    "check_dissipativity",
    "project_control",
]


class ModelError(ValueError):
    """Invalid model data (shapes, structural constants, domain violations)."""


def _as_array(x, shape, name):
    a = np.asarray(x, dtype=float)
    if a.shape != shape:
        raise ModelError(f"{name}: expected shape {shape}, got {a.shape}")
    return a


def _mat_vec(mat, vec):
    # Row-wise contraction with a fixed reduction order over the last axis so
    # results do not depend on how the batch is chunked across workers.
    return (mat * vec[..., None, :]).sum(axis=-1)


# ---------------------------------------------------------------------------
# Convex control sets


@dataclass(frozen=True)
class ConvexSet:
    """Closed convex subset of control space: an axis-aligned box or a ball."""

    kind: str
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    center: Optional[np.ndarray] = None
    radius: float = 0.0

    @staticmethod
    def box(lower, upper) -> "ConvexSet":
        lo = np.atleast_1d(np.asarray(lower, dtype=float))
        hi = np.atleast_1d(np.asarray(upper, dtype=float))
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ModelError("box bounds must be 1-d arrays of equal length")
        if not (np.isfinite(lo).all() and np.isfinite(hi).all()):
            raise ModelError("box bounds must be finite")
        if np.any(lo > hi):
            raise ModelError("box bounds reversed: lower > upper")
        return ConvexSet(kind="box", lower=lo, upper=hi)

    @staticmethod
    def ball(center, radius) -> "ConvexSet":
        c = np.atleast_1d(np.asarray(center, dtype=float))
        r = float(radius)
        if not np.isfinite(c).all() or not np.isfinite(r) or r <= 0.0:
            raise ModelError("ball requires finite center and radius > 0")
        return ConvexSet(kind="ball", center=c, radius=r)

    @property
    def dim(self) -> int:
        return len(self.lower) if self.kind == "box" else len(self.center)

    def project(self, u):
        """Euclidean projection onto the set; accepts (..., l) arrays."""
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        delta = u - self.center
        norm = np.sqrt((delta * delta).sum(axis=-1, keepdims=True))
        scale = np.where(norm > self.radius, self.radius / np.where(norm > 0, norm, 1.0), 1.0)
        return self.center + delta * scale

    def contains(self, u, tol=1e-12) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(np.all(np.abs(self.project(u) - u) <= tol))

    def sample(self, rng, size) -> np.ndarray:
        """Uniform draws from the set, shape (size, l)."""
        if self.kind == "box":
            return rng.uniform(self.lower, self.upper, size=(size, self.dim))
        g = rng.standard_normal((size, self.dim))
        g /= np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-300)
        radii = self.radius * rng.uniform(0.0, 1.0, size=(size, 1)) ** (1.0 / self.dim)
        return self.center + g * radii

    def describe(self) -> str:
        if self.kind == "box":
            return f"box(lower={self.lower.tolist()!r}, upper={self.upper.tolist()!r})"
        return f"ball(center={self.center.tolist()!r}, radius={self.radius!r})"


def project_control(control_set: ConvexSet, u_raw) -> np.ndarray:
    """Project a raw control vector onto the admissible set.

    Idempotent and non-expansive; the identity on points already inside.
    """
    u = np.asarray(u_raw, dtype=float)
    if not np.isfinite(u).all():
        raise ModelError("project_control: non-finite input")
    return control_set.project(u)


# ---------------------------------------------------------------------------
# Control laws


@dataclass(frozen=True)
class ControlLaw:
    """Admissible feedback law; every evaluation is projected into U.

    Kinds: ``constant`` (u == const), ``affine_feedback`` (u = K x + c) and
    ``tabulated_feedback`` (per-bin values on a 1-d state grid).
    """

    kind: str
    control_set: ConvexSet
    const: Optional[np.ndarray] = None
    gain: Optional[np.ndarray] = None
    offset: Optional[np.ndarray] = None
    bin_edges: Optional[np.ndarray] = None
    bin_values: Optional[np.ndarray] = None

    @staticmethod
    def constant(u, control_set: ConvexSet) -> "ControlLaw":
        c = np.atleast_1d(np.asarray(u, dtype=float))
        if c.ndim != 1 or len(c) != control_set.dim:
            raise ModelError("constant law: control dimension mismatch")
        return ControlLaw(kind="constant", control_set=control_set, const=c)

    @staticmethod
    def affine(gain, offset, control_set: ConvexSet) -> "ControlLaw":
        k = np.atleast_2d(np.asarray(gain, dtype=float))
        c = np.atleast_1d(np.asarray(offset, dtype=float))
        if k.shape[0] != control_set.dim or c.shape != (control_set.dim,):
            raise ModelError("affine law: gain/offset shape mismatch")
        return ControlLaw(kind="affine_feedback", control_set=control_set, gain=k, offset=c)

    @staticmethod
    def tabulated(bin_edges, bin_values, control_set: ConvexSet) -> "ControlLaw":
        edges = np.asarray(bin_edges, dtype=float)
        values = np.atleast_2d(np.asarray(bin_values, dtype=float))
        if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
            raise ModelError("tabulated law: bin edges must be strictly increasing")
        if values.shape != (len(edges) - 1, control_set.dim):
            raise ModelError("tabulated law: values must have shape (bins, l)")
        return ControlLaw(
            kind="tabulated_feedback",
            control_set=control_set,
            bin_edges=edges,
            bin_values=values,
        )

    def evaluate(self, t: float, x) -> np.ndarray:
        """Evaluate at states x of shape (M, n); returns controls (M, l) in U."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        m = x.shape[0]
        if self.kind == "constant":
            u = np.broadcast_to(self.const, (m, len(self.const))).copy()
        elif self.kind == "affine_feedback":
            u = _mat_vec(self.gain[None, :, :], x) + self.offset
        elif self.kind == "tabulated_feedback":
            if x.shape[1] != 1:
                raise ModelError("tabulated law supports state dimension 1 only")
            idx = np.searchsorted(self.bin_edges, x[:, 0], side="right") - 1
            idx = np.clip(idx, 0, len(self.bin_values) - 1)
            u = self.bin_values[idx]
        else:  # pragma: no cover - constructor guards the kind
            raise ModelError(f"unknown control law kind {self.kind!r}")
        return self.control_set.project(u)

    def describe(self) -> str:
        if self.kind == "constant":
            return f"constant({self.const.tolist()!r})"
        if self.kind == "affine_feedback":
            return f"affine(gain={self.gain.tolist()!r}, offset={self.offset.tolist()!r})"
        return (
            f"tabulated(edges={self.bin_edges.tolist()!r}, "
            f"values={self.bin_values.tolist()!r})"
        )

    def negated(self) -> "ControlLaw":
        """Sign-flipped law (parameters negated, same admissible set)."""
        if self.kind == "constant":
            return ControlLaw.constant(-self.const, self.control_set)
        if self.kind == "affine_feedback":
            return ControlLaw.affine(-self.gain, -self.offset, self.control_set)
        return ControlLaw.tabulated(self.bin_edges, -self.bin_values, self.control_set)


# ---------------------------------------------------------------------------
# Coefficient families


@dataclass(frozen=True)
class Drift:
    family: str  # "linear" | "cubic"
    A: np.ndarray
    B: np.ndarray
    cubic: Optional[np.ndarray] = None  # (n,) nonnegative, cubic family only


@dataclass(frozen=True)
class Diffusion:
    family: str  # "constant"
    S: np.ndarray  # (n, d)


@dataclass(frozen=True)
class Cost:
    family: str  # "quadratic"
    Q: np.ndarray  # (n, n) symmetric PSD
    R: np.ndarray  # (l, l) symmetric PSD


def _check_psd(mat, name):
    if not np.allclose(mat, mat.T, atol=1e-12):
        raise ModelError(f"{name} must be symmetric")
    eig = np.linalg.eigvalsh(mat)
    if eig.min() < -1e-10:
        raise ModelError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class ModelSpec:
    """A controlled-SDE problem instance.

    Structural constants are validated strictly: p > max(4m+2, 4) and
    k > (p-1)/2.
    """

    n: int
    d: int
    l: int
    drift: Drift
    diffusion: Diffusion
    cost: Cost
    control_set: ConvexSet
    m: int
    p: float
    k: float

    def __post_init__(self):
        if min(self.n, self.d, self.l) < 1:
            raise ModelError("state, noise and control dimensions must be >= 1")
        if self.m < 0 or int(self.m) != self.m:
            raise ModelError("growth exponent m must be a nonnegative integer")
        if not self.p > max(4 * self.m + 2, 4):
            raise ModelError(f"moment order p={self.p} must exceed max(4m+2, 4)={max(4 * self.m + 2, 4)}")
        if not self.k > (self.p - 1) / 2:
            raise ModelError(f"dissipativity weight k={self.k} must exceed (p-1)/2={(self.p - 1) / 2}")
        _as_array(self.drift.A, (self.n, self.n), "A")
        _as_array(self.drift.B, (self.n, self.l), "B")
        if self.drift.family == "cubic":
            alpha = _as_array(self.drift.cubic, (self.n,), "cubic coefficients")
            if np.any(alpha < 0):
                raise ModelError("cubic coefficients must be nonnegative")
        elif self.drift.family != "linear":
            raise ModelError(f"unknown drift family {self.drift.family!r}")
        if self.diffusion.family != "constant":
            raise ModelError(f"unknown diffusion family {self.diffusion.family!r}")
        _as_array(self.diffusion.S, (self.n, self.d), "Sigma")
        if self.cost.family != "quadratic":
            raise ModelError(f"unknown cost family {self.cost.family!r}")
        _check_psd(_as_array(self.cost.Q, (self.n, self.n), "Q"), "Q")
        _check_psd(_as_array(self.cost.R, (self.l, self.l), "R"), "R")
        if self.control_set.dim != self.l:
            raise ModelError("control set dimension must match l")

    # -- canonical builders -------------------------------------------------

    @staticmethod
    def lq(A, B, S, Q, R, control_set, m=0, p=6.0, k=3.0) -> "ModelSpec":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        S = np.atleast_2d(np.asarray(S, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        n, l = B.shape
        d = S.shape[1]
        return ModelSpec(
            n=n, d=d, l=l,
            drift=Drift(family="linear", A=A, B=B),
            diffusion=Diffusion(family="constant", S=S),
            cost=Cost(family="quadratic", Q=Q, R=R),
            control_set=control_set, m=m, p=p, k=k,
        )

    @staticmethod
    def cubic(alpha, A, B, S, Q, R, control_set, m=1, p=8.0, k=4.0) -> "ModelSpec":
        alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        S = np.atleast_2d(np.asarray(S, dtype=float))
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        n, l = B.shape
        d = S.shape[1]
        return ModelSpec(
            n=n, d=d, l=l,
            drift=Drift(family="cubic", A=A, B=B, cubic=alpha),
            diffusion=Diffusion(family="constant", S=S),
            cost=Cost(family="quadratic", Q=Q, R=R),
            control_set=control_set, m=m, p=p, k=k,
        )

    @staticmethod
    def lq1(sigma=1.0, u_bound=5.0) -> "ModelSpec":
        """Scalar benchmark: b = -x + u, constant sigma, f = x^2 + u^2."""
        return ModelSpec.lq(
            A=[[-1.0]], B=[[1.0]], S=[[float(sigma)]], Q=[[1.0]], R=[[1.0]],
            control_set=ConvexSet.box([-u_bound], [u_bound]),
        )

    @staticmethod
    def cubic1(sigma=1.0, u_bound=5.0) -> "ModelSpec":
        """Scalar benchmark: b = -x^3 - x + u, constant sigma, f = x^2 + u^2."""
        return ModelSpec.cubic(
            alpha=[1.0], A=[[-1.0]], B=[[1.0]], S=[[float(sigma)]], Q=[[1.0]], R=[[1.0]],
            control_set=ConvexSet.box([-u_bound], [u_bound]),
        )

    def zero_control(self) -> ControlLaw:
        return ControlLaw.constant(np.zeros(self.l), self.control_set)

    def with_diffusion(self, S) -> "ModelSpec":
        """Copy of the model with the constant diffusion matrix replaced."""
        S = np.atleast_2d(np.asarray(S, dtype=float))
        return ModelSpec(
            n=self.n, d=S.shape[1], l=self.l,
            drift=self.drift,
            diffusion=Diffusion(family="constant", S=S),
            cost=self.cost, control_set=self.control_set,
            m=self.m, p=self.p, k=self.k,
        )

    def certified_dissipativity_bound(self) -> float:
        """Largest eigenvalue of sym(A): a valid c_p for both built-in families
        (constant sigma and nonnegative cubic damping only tighten it)."""
        sym = 0.5 * (self.drift.A + self.drift.A.T)
        return float(np.linalg.eigvalsh(sym).max())

    def cost_lower_bound(self) -> float:
        """Quadratic PSD cost is bounded below by zero."""
        return 0.0


# ---------------------------------------------------------------------------
# Batched coefficient evaluation (used by the simulators)


def drift_at(model: ModelSpec, X, U) -> np.ndarray:
    """b(x, u) for X of shape (M, n), U of shape (M, l): returns (M, n)."""
    out = _mat_vec(model.drift.A[None, :, :], X) + _mat_vec(model.drift.B[None, :, :], U)
    if model.drift.family == "cubic":
        out = out - model.drift.cubic * X**3
    return out


def drift_jac_x(model: ModelSpec, X, U) -> np.ndarray:
    """D_x b, shape (M, n, n)."""
    m = X.shape[0]
    jac = np.broadcast_to(model.drift.A, (m, model.n, model.n)).copy()
    if model.drift.family == "cubic":
        diag = -3.0 * model.drift.cubic * X**2
        idx = np.arange(model.n)
        jac[:, idx, idx] += diag
    return jac


def drift_jac_u(model: ModelSpec, X, U) -> np.ndarray:
    """D_u b, shape (M, n, l) (constant in both families)."""
    return np.broadcast_to(model.drift.B, (X.shape[0], model.n, model.l)).copy()


def drift_jacT_apply(model: ModelSpec, X, P) -> np.ndarray:
    """(D_x b)^T P for P of shape (M, n), without materializing the Jacobians."""
    out = P @ model.drift.A
    if model.drift.family == "cubic":
        out = out - 3.0 * model.drift.cubic * X**2 * P
    return out


def drift_jacU_T_apply(model: ModelSpec, P) -> np.ndarray:
    """(D_u b)^T P, shape (M, l); D_u b is the constant matrix B."""
    return P @ model.drift.B


def diffusion_at(model: ModelSpec, X, U) -> np.ndarray:
    """sigma(x, u), shape (M, n, d) (constant for the built-in family)."""
    return np.broadcast_to(model.diffusion.S, (X.shape[0], model.n, model.d)).copy()


def diffusion_jac_x(model: ModelSpec, X, U) -> np.ndarray:
    """D_x sigma^i stacked over channels, shape (M, d, n, n)."""
    return np.zeros((X.shape[0], model.d, model.n, model.n))


def diffusion_jac_u(model: ModelSpec, X, U) -> np.ndarray:
    """D_u sigma^i stacked over channels, shape (M, d, n, l)."""
    return np.zeros((X.shape[0], model.d, model.n, model.l))


def cost_at(model: ModelSpec, X, U) -> np.ndarray:
    """f(x, u) = <Qx, x> + <Ru, u>, shape (M,)."""
    qx = _mat_vec(model.cost.Q[None, :, :], X)
    ru = _mat_vec(model.cost.R[None, :, :], U)
    return (X * qx).sum(axis=-1) + (U * ru).sum(axis=-1)


def cost_grad_x(model: ModelSpec, X, U) -> np.ndarray:
    return 2.0 * _mat_vec(model.cost.Q[None, :, :], X)


def cost_grad_u(model: ModelSpec, X, U) -> np.ndarray:
    return 2.0 * _mat_vec(model.cost.R[None, :, :], U)


# ---------------------------------------------------------------------------
# Pointwise evaluation bundle


@dataclass(frozen=True)
class EvalResult:
    b: np.ndarray        # (n,)
    sigma: np.ndarray    # (n, d)
    f: float
    D_xb: np.ndarray     # (n, n)
    D_ub: np.ndarray     # (n, l)
    D_xsigma: np.ndarray  # (d, n, n)
    D_usigma: np.ndarray  # (d, n, l)
    D_xf: np.ndarray     # (n,)
    D_uf: np.ndarray     # (l,)


def eval_model(model: ModelSpec, x, u) -> EvalResult:
    """Evaluate all coefficients and their exact first derivatives at (x, u).

    Rejects non-finite inputs and controls outside the admissible set.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (model.n,) or u.shape != (model.l,):
        raise ModelError(f"eval_model: expected shapes ({model.n},) and ({model.l},)")
    if not (np.isfinite(x).all() and np.isfinite(u).all()):
        raise ModelError("eval_model: non-finite input")
    if not model.control_set.contains(u, tol=1e-9):
        raise ModelError("eval_model: control outside the admissible set")
    X, U = x[None, :], u[None, :]
    res = EvalResult(
        b=drift_at(model, X, U)[0],
        sigma=diffusion_at(model, X, U)[0],
        f=float(cost_at(model, X, U)[0]),
        D_xb=drift_jac_x(model, X, U)[0],
        D_ub=drift_jac_u(model, X, U)[0],
        D_xsigma=diffusion_jac_x(model, X, U)[0],
        D_usigma=diffusion_jac_u(model, X, U)[0],
        D_xf=cost_grad_x(model, X, U)[0],
        D_uf=cost_grad_u(model, X, U)[0],
    )
    for name in ("b", "sigma", "f", "D_xb", "D_ub", "D_xf", "D_uf"):
        if not np.all(np.isfinite(getattr(res, name))):
            raise ModelError(f"eval_model: non-finite {name}")
    return res


# ---------------------------------------------------------------------------
# Dissipativity probing


@dataclass(frozen=True)
class DissipativityReport:
    sampled_max: float
    estimated_c_p: float
    passed: bool
    probe_count: int

    def to_dict(self) -> dict:
        return {
            "sampled_max": self.sampled_max,
            "estimated_c_p": self.estimated_c_p,
            "pass": self.passed,
            "probe_count": self.probe_count,
        }


def check_dissipativity(model: ModelSpec, probes: int = 512, seed: int = 0) -> DissipativityReport:
    """Randomized falsifier for the joint dissipativity condition.

    Samples states x ~ N(0, 3^2 I), controls uniform on U and directions y
    uniform on the unit sphere, and evaluates

        <D_x b(x,u) y, y> + k * ||D_x sigma(x,u) y||_2^2.

    The probe maximum is the sampled estimate of the best dissipativity
    constant; a nonnegative maximum fails the check.  Sampling can miss
    violations but never invents one.
    """
    if probes < 1:
        raise ModelError("check_dissipativity: probes must be >= 1")
    rng = np.random.default_rng(seed)
    X = 3.0 * rng.standard_normal((probes, model.n))
    U = model.control_set.sample(rng, probes)
    Y = rng.standard_normal((probes, model.n))
    Y /= np.maximum(np.linalg.norm(Y, axis=-1, keepdims=True), 1e-300)

    jac = drift_jac_x(model, X, U)
    quad = (Y * _mat_vec(jac, Y)).sum(axis=-1)
    gam = diffusion_jac_x(model, X, U)  # (M, d, n, n)
    gy = (gam * Y[:, None, None, :]).sum(axis=-1)  # (M, d, n)
    quad = quad + model.k * (gy * gy).sum(axis=(-1, -2))

    sampled_max = float(quad.max())
    return DissipativityReport(
        sampled_max=sampled_max,
        estimated_c_p=sampled_max,
        passed=sampled_max < 0.0,
        probe_count=probes,
    )
