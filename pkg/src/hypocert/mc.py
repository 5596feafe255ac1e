"""Monte Carlo simulation of the kinetic Langevin SDE.

Every trajectory owns a Philox stream keyed by ``(seed, index)``, so a
trajectory's path does not depend on how many others run beside it or on
the order in which work is done.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import ContractViolation, DivergenceError, UnsupportedOperation
from .model import Custom, ModelSpec, PhasePoint, full_jacobian

__all__ = [
    "SdeRunConfig", "Trajectories", "CouplingStats", "CouplingResult",
    "trajectory_rng", "integrate", "couple_synchronous", "ergodic_moments",
    "drift_lipschitz", "INTEGRATORS",
]

INTEGRATORS = ("euler_maruyama", "splitting_oab")
BLOWUP = 1e8
NOISE_BLOCK = 256
Z95 = 1.959963984540054


@dataclass(frozen=True)
class SdeRunConfig:
    dt: float
    T: float
    n_traj: int
    seed: int = 0
    integrator: str = "euler_maruyama"
    n_snapshots: int = 11

    def __post_init__(self):
        if not self.dt > 0:
            raise ContractViolation("dt must be positive")
        if not self.T >= 0:
            raise ContractViolation("T must be nonnegative")
        if int(self.n_traj) != self.n_traj or self.n_traj < 1:
            raise ContractViolation("n_traj must be a positive integer")
        if self.integrator not in INTEGRATORS:
            raise ContractViolation(f"integrator must be one of {INTEGRATORS}")
        if not 0 <= self.seed < 2 ** 64:
            raise ContractViolation("seed must be a 64-bit unsigned integer")

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    def snapshot_steps(self) -> np.ndarray:
        return np.unique(np.round(np.linspace(0, self.n_steps, max(self.n_snapshots, 2))).astype(int))


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(index,))))


class _Noise:
    """Standard normals of shape ``(n_traj, width)`` per step, drawn in per-trajectory blocks."""

    def __init__(self, seed, n_traj, width):
        self.rngs = [trajectory_rng(seed, i) for i in range(n_traj)]
        self.width = width
        self.buf = None
        self.pos = NOISE_BLOCK

    def next(self):
        if self.pos == NOISE_BLOCK:
            self.buf = np.stack([r.standard_normal((NOISE_BLOCK, self.width)) for r in self.rngs], axis=1)
            self.pos = 0
        out = self.buf[self.pos]
        self.pos += 1
        return out


class _Stepper:
    def __init__(self, model: ModelSpec, dt: float, integrator: str):
        self.model, self.dt, self.d = model, dt, model.d
        self.integrator = integrator
        s = model.sigma
        if integrator == "euler_maruyama":
            self.width = self.d
            self.scale = math.sqrt(2.0 * s * s * dt)
        else:
            lin = model.drift.linear_part() if not isinstance(model.drift, Custom) else None
            if lin is None:
                raise UnsupportedOperation("splitting needs a drift with a known linear part")
            k, gamma = lin
            self.k, self.gamma = k, gamma
            d = self.d
            I, Z = np.eye(d), np.zeros((d, d))
            M = np.block([[Z, I], [-k * I, -gamma * I]])
            Q = np.block([[Z, Z], [Z, 2.0 * s * s * I]])
            big = sla.expm(np.block([[-M, Q], [np.zeros_like(M), M.T]]) * dt)
            n = 2 * d
            self.Phi = big[n:, n:].T
            cov = self.Phi @ big[:n, n:]
            w, U = np.linalg.eigh(0.5 * (cov + cov.T))
            self.chol = U * np.sqrt(np.clip(w, 0.0, None))
            self.width = n

    def remainder(self, x, v):
        return self.model.b(x, v) + self.k * x + self.gamma * v

    def step(self, z, xi):
        d, dt = self.d, self.dt
        x, v = z[..., :d], z[..., d:]
        if self.integrator == "euler_maruyama":
            b = self.model.b(x, v)
            return np.concatenate([x + v * dt, v + b * dt + self.scale * xi], axis=-1)
        # half kick with the nonlinear remainder, exact linear OU flow, half kick
        v = v + 0.5 * dt * self.remainder(x, v)
        z = np.concatenate([x, v], axis=-1) @ self.Phi.T + xi @ self.chol.T
        x, v = z[..., :d], z[..., d:]
        v = v + 0.5 * dt * self.remainder(x, v)
        return np.concatenate([x, v], axis=-1)


def _check_blowup(z, dt, step):
    if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > BLOWUP:
        raise DivergenceError(f"trajectory left |z| <= {BLOWUP:g} at step {step}; reduce dt (now {dt:g})")


def _start(model, z0, n_traj):
    z0 = z0 if isinstance(z0, PhasePoint) else PhasePoint.from_array(z0)
    if z0.d != model.d:
        raise ContractViolation("initial point has the wrong dimension")
    return np.tile(z0.as_array(), (n_traj, 1))


@dataclass
class Trajectories:
    times: np.ndarray
    states: np.ndarray  # (n_snapshots, n_traj, 2d)
    config: SdeRunConfig

    def final(self) -> np.ndarray:
        return self.states[-1]


def integrate(model: ModelSpec, z0, cfg: SdeRunConfig) -> Trajectories:
    """Simulate ``cfg.n_traj`` trajectories from ``z0``; snapshots at ``cfg.snapshot_steps()``."""
    z = _start(model, z0, cfg.n_traj)
    snaps = cfg.snapshot_steps()
    out = [z.copy()] if snaps[0] == 0 else []
    if cfg.n_steps:
        stepper = _Stepper(model, cfg.dt, cfg.integrator)
        noise = _Noise(cfg.seed, cfg.n_traj, stepper.width)
        want = set(snaps.tolist())
        for n in range(1, cfg.n_steps + 1):
            z = stepper.step(z, noise.next())
            _check_blowup(z, cfg.dt, n)
            if n in want:
                out.append(z.copy())
    return Trajectories(snaps * cfg.dt, np.array(out), cfg)


def drift_lipschitz(model: ModelSpec) -> float:
    """Sup of ``|J|_2`` for the full drift ``(v, b)`` over the family's Jacobian samples."""
    dxb, dvb = model.drift.jacobian_samples(model.d)
    J = full_jacobian(dxb, dvb)
    return float(np.max(np.linalg.norm(J, ord=2, axis=(-2, -1)))) * (1 + 1e-9)


@dataclass
class CouplingStats:
    times: np.ndarray
    mean_sq_dist: np.ndarray
    mean_A_dist: np.ndarray
    ci_sq: np.ndarray
    ci_A: np.ndarray
    n_traj: int

    COLUMNS = ("t", "mean_sq_dist", "mean_A_dist", "ci_sq", "ci_A")

    def rows(self):
        return zip(self.times, self.mean_sq_dist, self.mean_A_dist, self.ci_sq, self.ci_A)


@dataclass
class CouplingResult:
    stats: CouplingStats
    verdict_growth: bool
    growth_bound: np.ndarray
    em_bias_factor: np.ndarray
    verdict_decay: Optional[bool]
    decay_checks: int
    decay_violations: int
    decay_worst_margin: float
    meta: dict = field(default_factory=dict)


def couple_synchronous(model: ModelSpec, z0, z0p, cfg: SdeRunConfig, A, K: float,
                       eps_contract: Optional[float] = None, R: Optional[float] = None) -> CouplingResult:
    """Run pairs driven by the same noise and test two contraction claims.

    Growth: ``E|Z_t - Z'_t|^2 <= exp(2Kt) |z0 - z0'|^2`` times the
    Euler-Maruyama factor ``((1 + 2K dt + L^2 dt^2) exp(-2K dt))^n`` is not
    rejected at 95% (``mean - ci <= bound``).

    Decay (Euler-Maruyama only): with ``q = D.A D`` and ``D = Z - Z'``,
    every step with ``|D| >= R`` must satisfy
    ``(q_{n+1} - q_n)/dt <= -2 eps |D|^2 + dt |A| L^2 |D|^2`` up to rounding.
    """
    A = np.asarray(A, dtype=float)
    z = _start(model, z0, cfg.n_traj)
    zp = _start(model, z0p, cfg.n_traj)
    L = drift_lipschitz(model)
    A_norm = float(np.linalg.eigvalsh(A)[-1])
    check_decay = eps_contract is not None and R is not None and cfg.integrator == "euler_maruyama"
    snaps = cfg.snapshot_steps()
    want = set(snaps.tolist())
    sq_rows, A_rows = [], []

    def record(zz, zzp):
        D = zz - zzp
        sq_rows.append(np.sum(D * D, axis=1))
        A_rows.append(np.einsum("ni,ij,nj->n", D, A, D))

    if 0 in want:
        record(z, zp)
    checks = violations = 0
    worst = -math.inf
    if cfg.n_steps:
        stepper = _Stepper(model, cfg.dt, cfg.integrator)
        noise = _Noise(cfg.seed, cfg.n_traj, stepper.width)
        for n in range(1, cfg.n_steps + 1):
            xi = noise.next()
            D = z - zp
            z, zp = stepper.step(z, xi), stepper.step(zp, xi)
            _check_blowup(z, cfg.dt, n)
            _check_blowup(zp, cfg.dt, n)
            if check_decay:
                Dn = z - zp
                sq = np.sum(D * D, axis=1)
                active = (sq >= R * R) & (sq > 0)
                if np.any(active):
                    q0 = np.einsum("ni,ij,nj->n", D, A, D)
                    q1 = np.einsum("ni,ij,nj->n", Dn, A, Dn)
                    rate = (q1 - q0) / cfg.dt
                    bound = (-2.0 * eps_contract + cfg.dt * A_norm * L * L) * sq
                    slack = 64 * np.finfo(float).eps * (np.abs(q0) + np.abs(q1)) / cfg.dt
                    margin = (rate - bound - slack)[active] / sq[active]
                    checks += int(active.sum())
                    violations += int(np.sum(margin > 0))
                    worst = max(worst, float(margin.max()))
            if n in want:
                record(z, zp)
    t = snaps * cfg.dt
    sq_arr, A_arr = np.array(sq_rows), np.array(A_rows)
    m = cfg.n_traj
    ci = lambda a: Z95 * a.std(axis=1, ddof=1) / math.sqrt(m) if m > 1 else np.zeros(a.shape[0])
    stats = CouplingStats(t, sq_arr.mean(axis=1), A_arr.mean(axis=1), ci(sq_arr), ci(A_arr), m)
    d0 = np.asarray(_start(model, z0, 1)[0] - _start(model, z0p, 1)[0])
    if cfg.integrator == "euler_maruyama":
        per_step = (1 + 2 * K * cfg.dt + L * L * cfg.dt ** 2) * math.exp(-2 * K * cfg.dt)
        factor = np.maximum(per_step, 1.0) ** snaps
    else:
        factor = np.ones_like(t)
    bound = np.exp(2 * K * t) * float(d0 @ d0) * factor
    growth_ok = bool(np.all(stats.mean_sq_dist - stats.ci_sq <= bound * (1 + 1e-12)))
    return CouplingResult(stats, growth_ok, bound, factor,
                          (violations == 0) if check_decay else None, checks, violations, worst,
                          {"L": L, "A_opnorm": A_norm, "K": K})


def ergodic_moments(model: ModelSpec, cfg: SdeRunConfig, burn_in: float, z0=None,
                    n_batches: int = 1) -> dict:
    """Time averages after ``burn_in`` over all trajectories.

    Each trajectory is cut into ``n_batches`` equal time blocks.  The
    covariance is the pooled one; 95% half-widths come from the spread of
    the per-block contributions centred on the pooled mean (a delta-method
    interval), which are independent across trajectories.
    """
    if not 0 <= burn_in < cfg.T:
        raise ContractViolation("need 0 <= burn_in < T")
    d = model.d
    z = _start(model, np.zeros(2 * d) if z0 is None else z0, cfg.n_traj)
    start = int(math.ceil(burn_in / cfg.dt))
    n_avg = cfg.n_steps - start
    if n_avg < n_batches:
        raise ContractViolation("not enough post-burn-in steps for the requested batches")
    edges = start + np.round(np.linspace(0, n_avg, n_batches + 1)).astype(int)
    s1 = np.zeros((n_batches, cfg.n_traj, 2 * d))
    s2 = np.zeros((n_batches, cfg.n_traj, 2 * d, 2 * d))
    stepper = _Stepper(model, cfg.dt, cfg.integrator)
    noise = _Noise(cfg.seed, cfg.n_traj, stepper.width)
    batch = 0
    for n in range(1, cfg.n_steps + 1):
        z = stepper.step(z, noise.next())
        if n % 1024 == 0 or n == cfg.n_steps:
            _check_blowup(z, cfg.dt, n)
        if n > edges[0]:
            while n > edges[batch + 1]:
                batch += 1
            s1[batch] += z
            s2[batch] += z[:, :, None] * z[:, None, :]
    counts = np.diff(edges)[:, None, None]
    mean_b = (s1 / counts).reshape(-1, 2 * d)
    second_b = (s2 / counts[..., None]).reshape(-1, 2 * d, 2 * d)
    nb = mean_b.shape[0]
    mean = mean_b.mean(axis=0)
    # centre every block on the pooled mean; their average is the pooled covariance
    cov_b = (second_b - mean_b[:, :, None] * mean[None, None, :] - mean[None, :, None] * mean_b[:, None, :]
             + np.outer(mean, mean))
    cov = cov_b.mean(axis=0)
    half = lambda a: Z95 * a.std(axis=0, ddof=1) / math.sqrt(nb) if nb > 1 else np.full(a.shape[1:], np.inf)
    return {"mean": mean, "cov": cov, "mean_ci": half(mean_b), "cov_ci": half(cov_b),
            "n_batches": nb, "cov_xv": float(cov[0, d]), "cov_xv_ci": float(half(cov_b)[0, d]),
            "cov_xv_se": float(half(cov_b)[0, d] / Z95)}
