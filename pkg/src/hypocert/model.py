"""Drift families for the kinetic Langevin process and their global bounds.

The process is

    dX = V dt,    dV = b(X, V) dt + sqrt(2) sigma dW,

with generator ``L = v.grad_x + b.grad_v + sigma^2 Lap_v``.  All drift
evaluations are vectorised over leading axes: ``x`` and ``v`` have shape
``(..., d)`` and Jacobian blocks have shape ``(..., d, d)`` with
``dxb[..., i, j] = d b_i / d x_j``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ContractViolation, UnsupportedOperation

__all__ = [
    "PhasePoint", "DriftJacobian", "DriftBounds", "FBounds",
    "ZeroPerturbation", "TrigPerturbation", "BumpPerturbation",
    "QuadraticPotential", "QuadraticCosPotential",
    "PerturbedHarmonic", "Equilibrium", "Custom", "ModelSpec",
    "eval_drift", "eval_jacobian", "drift_bounds", "full_jacobian",
]

# Absolute part of the safety margin added to the sampled one-sided constant.
K_MARGIN_ABS = 1e-6
# Relative part (fraction of |K_sampled|).
K_MARGIN_REL = 1e-3


@dataclass(frozen=True)
class PhasePoint:
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if x.ndim != 1 or x.shape != v.shape or x.size == 0:
            raise ContractViolation(
                f"x and v must be 1-d of equal length >= 1, got {x.shape} and {v.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise ContractViolation("phase point has non-finite entries")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def d(self) -> int:
        return self.x.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x, self.v])

    @classmethod
    def from_array(cls, z) -> "PhasePoint":
        z = np.asarray(z, dtype=float).ravel()
        if z.size % 2:
            raise ContractViolation("phase vector must have even length 2d")
        d = z.size // 2
        return cls(z[:d], z[d:])


@dataclass(frozen=True)
class DriftJacobian:
    dxb: np.ndarray
    dvb: np.ndarray


@dataclass(frozen=True)
class DriftBounds:
    grad_b_sup: float
    grad_x_sup: float
    grad_v_sup: float
    one_sided_K: float
    K_sampled: float
    K_margin: float


@dataclass(frozen=True)
class FBounds:
    """Ingredients of a perturbation bound ``|F(z)-F(z')| <= |z-z'|(2 M g / R + k')``.

    ``grad_F_sup`` is g, ``kappa_prime`` is k', ``M_rad`` is M.  ``route``
    says which inequality produced the triple.
    """
    grad_F_sup: float
    kappa_prime: float
    M_rad: float
    route: str = "lipschitz"


def _unit(u, d):
    if u is None:
        u = np.ones(d)
    u = np.asarray(u, dtype=float).ravel()
    if u.size != d:
        raise ContractViolation(f"direction must have length {d}")
    n = np.linalg.norm(u)
    if n == 0:
        raise ContractViolation("direction must be nonzero")
    return u / n


# ---------------------------------------------------------------- perturbations


@dataclass(frozen=True)
class ZeroPerturbation:
    family = "none"

    def value(self, x, v):
        return np.zeros(np.broadcast_shapes(np.shape(x), np.shape(v)))

    def jacobian(self, x, v):
        shape = np.broadcast_shapes(np.shape(x), np.shape(v))
        d = shape[-1]
        z = np.zeros(shape[:-1] + (d, d))
        return z, z.copy()

    def sup(self, d):
        return 0.0

    def grad_sups(self, d):
        return 0.0, 0.0, 0.0

    def bound_candidates(self, d):
        return [FBounds(0.0, 0.0, 0.0, "zero")]

    def jacobian_samples(self, d):
        z = np.zeros((1, d, d))
        return z, z.copy()

    def params(self):
        return {"family": "none"}


@dataclass(frozen=True)
class TrigPerturbation:
    """``F(x, v) = delta * sin(w . (x, v)) * u`` with ``w`` in R^{2d}, unit ``u``."""
    delta: float
    freq: tuple
    direction: Optional[tuple] = None
    family = "trig"

    def _parts(self, d):
        w = np.asarray(self.freq, dtype=float).ravel()
        if w.size != 2 * d:
            raise ContractViolation(f"trig frequency vector must have length 2d = {2 * d}")
        return w[:d], w[d:], _unit(self.direction, d)

    def value(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        wx, wv, u = self._parts(x.shape[-1])
        theta = x @ wx + v @ wv
        return self.delta * np.sin(theta)[..., None] * u

    def jacobian(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        wx, wv, u = self._parts(x.shape[-1])
        c = self.delta * np.cos(x @ wx + v @ wv)[..., None, None]
        return c * np.outer(u, wx), c * np.outer(u, wv)

    def sup(self, d):
        return abs(self.delta)

    def grad_sups(self, d):
        wx, wv, _ = self._parts(d)
        a = abs(self.delta)
        return a * math.hypot(*np.r_[wx, wv]), a * np.linalg.norm(wx), a * np.linalg.norm(wv)

    def bound_candidates(self, d):
        g = self.grad_sups(d)[0]
        if g == 0:
            return [FBounds(0.0, 0.0, 0.0, "zero")]
        # The gradient never decays, so either use it globally, or use
        # boundedness: |F(z)-F(z')| <= 2 sup|F| <= |z-z'| * 2 sup|F| / R,
        # which is the same form with k' = 0 and M * g = sup|F|.
        return [FBounds(g, g, 0.0, "lipschitz"),
                FBounds(g, 0.0, self.sup(d) / g, "bounded")]

    def jacobian_samples(self, d):
        # The Jacobian depends on z only through cos(w.z) in [-1, 1].
        wx, wv, u = self._parts(d)
        c = np.linspace(-1.0, 1.0, 201)[:, None, None] * self.delta
        return c * np.outer(u, wx), c * np.outer(u, wv)

    def params(self):
        return {"family": "trig", "delta": self.delta, "freq": list(self.freq)}


# 4 * max_{s in [0,1]} (1-s) sqrt(s) = 8 / (3 sqrt 3)
_BUMP_GRAD_CONST = 8.0 / (3.0 * math.sqrt(3.0))


@dataclass(frozen=True)
class BumpPerturbation:
    """Compactly supported ``F(z) = delta (1 - |z|^2/r^2)_+^2 u``.

    The gradient vanishes outside the ball of radius ``radius``, so the
    perturbation is admissible with ``kappa_prime = 0`` and ``M_rad = radius``.
    """
    delta: float
    radius: float
    direction: Optional[tuple] = None
    family = "bump"

    def __post_init__(self):
        if not self.radius > 0:
            raise ContractViolation("bump radius must be positive")

    def value(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        u = _unit(self.direction, x.shape[-1])
        s = (np.sum(x * x, -1) + np.sum(v * v, -1)) / self.radius ** 2
        psi = np.where(s < 1.0, (1.0 - s) ** 2, 0.0)
        return self.delta * psi[..., None] * u

    def jacobian(self, x, v):
        x = np.asarray(x, float)
        v = np.asarray(v, float)
        u = _unit(self.direction, x.shape[-1])
        r2 = self.radius ** 2
        s = (np.sum(x * x, -1) + np.sum(v * v, -1)) / r2
        dpsi = np.where(s < 1.0, -2.0 * (1.0 - s), 0.0)
        coef = (self.delta * dpsi * 2.0 / r2)[..., None, None]
        return coef * u[:, None] * x[..., None, :], coef * u[:, None] * v[..., None, :]

    def sup(self, d):
        return abs(self.delta)

    def grad_sups(self, d):
        g = abs(self.delta) * _BUMP_GRAD_CONST / self.radius
        return g, g, g

    def bound_candidates(self, d):
        g = self.grad_sups(d)[0]
        if g == 0:
            return [FBounds(0.0, 0.0, 0.0, "zero")]
        return [FBounds(g, 0.0, self.radius, "compact")]

    def jacobian_samples(self, d):
        n = {1: 81, 2: 15}.get(d, 7)
        axis = np.linspace(-self.radius, self.radius, n)
        pts = np.stack(np.meshgrid(*([axis] * (2 * d)), indexing="ij"), -1).reshape(-1, 2 * d)
        return self.jacobian(pts[:, :d], pts[:, d:])

    def params(self):
        return {"family": "bump", "delta": self.delta, "radius": self.radius}


# ---------------------------------------------------------------- potentials


@dataclass(frozen=True)
class QuadraticPotential:
    """``U(x) = k |x|^2 / 2``."""
    k: float = 1.0
    family = "quadratic"

    def grad(self, x):
        return self.k * np.asarray(x, float)

    def hessian(self, x):
        x = np.asarray(x, float)
        d = x.shape[-1]
        return np.broadcast_to(self.k * np.eye(d), x.shape[:-1] + (d, d)).copy()

    def value(self, x):
        x = np.asarray(x, float)
        return 0.5 * self.k * np.sum(x * x, -1)

    def hessian_range(self):
        return self.k, self.k


@dataclass(frozen=True)
class QuadraticCosPotential:
    """``U(x) = k |x|^2 / 2 + beta * sum_i cos(x_i)``."""
    k: float = 1.0
    beta: float = 0.0
    family = "quadratic_cos"

    def grad(self, x):
        x = np.asarray(x, float)
        return self.k * x - self.beta * np.sin(x)

    def hessian(self, x):
        x = np.asarray(x, float)
        diag = self.k - self.beta * np.cos(x)
        return diag[..., :, None] * np.eye(x.shape[-1])

    def value(self, x):
        x = np.asarray(x, float)
        return 0.5 * self.k * np.sum(x * x, -1) + self.beta * np.sum(np.cos(x), -1)

    def hessian_range(self):
        return self.k - abs(self.beta), self.k + abs(self.beta)


# ---------------------------------------------------------------- drift families


@dataclass(frozen=True)
class PerturbedHarmonic:
    """``b(x, v) = -x - gamma v + F(x, v)``."""
    gamma: float
    perturbation: object = field(default_factory=ZeroPerturbation)
    family = "perturbed_harmonic"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractViolation("gamma must be positive")

    def drift(self, x, v):
        return -x - self.gamma * v + self.perturbation.value(x, v)

    def jacobian(self, x, v):
        d = x.shape[-1]
        dxF, dvF = self.perturbation.jacobian(x, v)
        return dxF - np.eye(d), dvF - self.gamma * np.eye(d)

    def linear_part(self):
        return 1.0, self.gamma

    def bound_candidates(self, d):
        return self.perturbation.bound_candidates(d)

    def grad_sups(self, d):
        g, gx, gv = self.perturbation.grad_sups(d)
        return math.hypot(1.0, self.gamma) + g, 1.0 + gx, self.gamma + gv

    def jacobian_samples(self, d):
        dxF, dvF = self.perturbation.jacobian_samples(d)
        return dxF - np.eye(d), dvF - self.gamma * np.eye(d)

    def is_equilibrium(self):
        return isinstance(self.perturbation, ZeroPerturbation)

    def params(self):
        return {"family": self.family, "gamma": self.gamma, "F": self.perturbation.params()}


@dataclass(frozen=True)
class Equilibrium:
    """``b(x, v) = -grad U(x) - gamma v``; the invariant law is Gibbs."""
    potential: object
    gamma: float
    family = "equilibrium"

    def __post_init__(self):
        if not self.gamma > 0:
            raise ContractViolation("gamma must be positive")

    def drift(self, x, v):
        return -self.potential.grad(x) - self.gamma * v

    def jacobian(self, x, v):
        d = x.shape[-1]
        dvb = np.broadcast_to(-self.gamma * np.eye(d), x.shape[:-1] + (d, d)).copy()
        return -self.potential.hessian(x), dvb

    def linear_part(self):
        return self.potential.k, self.gamma

    def bound_candidates(self, d):
        beta = getattr(self.potential, "beta", 0.0)
        if beta == 0:
            return [FBounds(0.0, 0.0, 0.0, "zero")]
        # F(x) = beta sin(x) componentwise: Lipschitz |beta|, bounded by |beta| sqrt(d).
        g = abs(beta)
        return [FBounds(g, g, 0.0, "lipschitz"),
                FBounds(g, 0.0, math.sqrt(d), "bounded")]

    def grad_sups(self, d):
        lo, hi = self.potential.hessian_range()
        hx = max(abs(lo), abs(hi))
        return math.hypot(hx, self.gamma), hx, self.gamma

    def jacobian_samples(self, d):
        lo, hi = self.potential.hessian_range()
        h = np.linspace(lo, hi, 41 if lo != hi else 1)
        diag = np.stack(np.meshgrid(*([h] * d), indexing="ij"), -1).reshape(-1, d)
        dxb = -diag[:, :, None] * np.eye(d)
        dvb = np.broadcast_to(-self.gamma * np.eye(d), dxb.shape).copy()
        return dxb, dvb

    def is_equilibrium(self):
        return True

    def params(self):
        out = {"family": self.family, "gamma": self.gamma,
               "potential": self.potential.family, "k": self.potential.k}
        if hasattr(self.potential, "beta"):
            out["beta"] = self.potential.beta
        return out


@dataclass(frozen=True)
class Custom:
    """User-supplied drift.  ``jacobian(x, v)`` must return ``(dxb, dvb)``."""
    drift_fn: Callable
    jacobian_fn: Optional[Callable] = None
    grad_b_sup: Optional[float] = None
    sample_halfwidth: float = 6.0
    family = "custom"

    def drift(self, x, v):
        return np.asarray(self.drift_fn(x, v), dtype=float)

    def jacobian(self, x, v):
        if self.jacobian_fn is None:
            raise UnsupportedOperation("custom drift was built without a Jacobian")
        dxb, dvb = self.jacobian_fn(x, v)
        return np.asarray(dxb, float), np.asarray(dvb, float)

    def linear_part(self):
        return None

    def bound_candidates(self, d):
        raise UnsupportedOperation("no closed-form perturbation bounds for a custom drift")

    def grad_sups(self, d):
        raise UnsupportedOperation("no closed-form gradient bounds for a custom drift")

    def jacobian_samples(self, d):
        n = {1: 41, 2: 9}.get(d, 5)
        axis = np.linspace(-self.sample_halfwidth, self.sample_halfwidth, n)
        pts = np.stack(np.meshgrid(*([axis] * (2 * d)), indexing="ij"), -1).reshape(-1, 2 * d)
        return self.jacobian(pts[:, :d], pts[:, d:])

    def is_equilibrium(self):
        return False

    def params(self):
        return {"family": self.family}


@dataclass(frozen=True)
class ModelSpec:
    d: int
    sigma: float
    drift: object

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ContractViolation("dimension must be a positive integer")
        if not self.sigma > 0:
            raise ContractViolation("sigma must be positive")

    def b(self, x, v):
        """Vectorised drift; ``x`` and ``v`` have shape ``(..., d)``."""
        return self.drift.drift(np.asarray(x, float), np.asarray(v, float))

    def jac(self, x, v):
        return self.drift.jacobian(np.asarray(x, float), np.asarray(v, float))

    @property
    def is_equilibrium(self) -> bool:
        return self.drift.is_equilibrium()

    def params(self) -> dict:
        return {"dimension": self.d, "sigma": self.sigma, "drift": self.drift.params()}


def _check_dim(model, z):
    if not isinstance(z, PhasePoint):
        z = PhasePoint.from_array(z)
    if z.d != model.d:
        raise ContractViolation(f"phase point has dimension {z.d}, model has {model.d}")
    return z


def eval_drift(model: ModelSpec, z) -> np.ndarray:
    z = _check_dim(model, z)
    return model.b(z.x, z.v)


def eval_jacobian(model: ModelSpec, z) -> DriftJacobian:
    z = _check_dim(model, z)
    dxb, dvb = model.jac(z.x, z.v)
    return DriftJacobian(np.asarray(dxb), np.asarray(dvb))


def full_jacobian(dxb, dvb):
    """Jacobian of the phase-space drift ``(v, b(x, v))``: ``[[0, I], [dxb, dvb]]``."""
    dxb = np.asarray(dxb, float)
    dvb = np.asarray(dvb, float)
    d = dxb.shape[-1]
    top = np.concatenate([np.zeros_like(dxb), np.broadcast_to(np.eye(d), dxb.shape)], -1)
    bottom = np.concatenate([dxb, dvb], -1)
    return np.concatenate([top, bottom], -2)


def lambda_max_sym(dxb, dvb):
    """Largest eigenvalue of the symmetric part of the full drift Jacobian."""
    J = full_jacobian(dxb, dvb)
    S = 0.5 * (J + np.swapaxes(J, -1, -2))
    return np.linalg.eigvalsh(S)[..., -1]


def drift_bounds(model: ModelSpec) -> DriftBounds:
    """Closed-form ``sup |grad b|`` and the one-sided Lipschitz constant ``K``.

    ``K`` bounds ``(z - z').(B(z) - B(z')) <= K |z - z'|^2`` for the full
    drift ``B = (v, b)``; with constant diffusion the Hilbert-Schmidt term
    vanishes.  It is the sup of ``lambda_max(sym J)`` over a deterministic
    sample of the Jacobian's range, plus ``K_MARGIN_ABS + K_MARGIN_REL |K|``.
    """
    d = model.d
    if isinstance(model.drift, Custom):
        raise UnsupportedOperation("drift_bounds needs a built-in drift family")
    g, gx, gv = model.drift.grad_sups(d)
    dxb, dvb = model.drift.jacobian_samples(d)
    k_sampled = float(np.max(lambda_max_sym(dxb, dvb)))
    margin = K_MARGIN_ABS + K_MARGIN_REL * abs(k_sampled)
    return DriftBounds(grad_b_sup=float(g), grad_x_sup=float(gx), grad_v_sup=float(gv),
                       one_sided_K=k_sampled + margin, K_sampled=k_sampled, K_margin=margin)
