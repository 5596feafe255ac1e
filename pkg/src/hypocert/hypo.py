"""Modified-norm decay machinery and Poincare-constant estimates.

For an observable ``g_t = P_t g`` with ``mu(g) = 0`` the functional

    N_t = |g_t|^2 + |D_t grad g_t|^2,
    D_t^2 = eps [[a^3, -a^2], [-a^2, a]] (blocks of size d),  a(t) = 1 - exp(-t/3),

satisfies ``dN/dt <= -eps a^2 / (2C + 4 eps) N`` once ``eps`` is small
enough, ``C`` being the full-gradient Poincare constant of ``mu``.
All norms are in ``L2(mu)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ContractViolation, DataQualityError, InapplicableError, SolverError
from .model import DriftJacobian, ModelSpec, drift_bounds
from . import pde

__all__ = [
    "alpha", "alpha_prime", "D_sq", "alpha_sq_integral", "check_alpha_integral_bound",
    "modified_norm", "select_eps", "rt_matrix", "rt_matrix_expanded",
    "ModifiedNormTrace", "trace_observable", "verify_decay", "DecayReport",
    "envelope_check", "EnvelopeReport", "dissipation_identity_check",
    "poincare_rayleigh", "rayleigh_quotient", "operator_norm_Pt", "poincare_prop2",
    "PoincareEstimate", "poincare_estimate", "ENVELOPE_CONSTANT",
]

ENVELOPE_CONSTANT = 40.0
POINCARE_K_ZERO = 1e-10


def _check_t(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or not np.all(np.isfinite(t)):
        raise ContractViolation("time must be finite and nonnegative")
    return t


def alpha(t):
    t = _check_t(t)
    return -np.expm1(-t / 3.0)


def alpha_prime(t):
    return np.exp(-_check_t(t) / 3.0) / 3.0


def D_sq(t: float, eps_norm: float, d: int = 1) -> np.ndarray:
    if not eps_norm > 0:
        raise ContractViolation("eps_norm must be positive")
    a = float(alpha(t))
    I = np.eye(d)
    return eps_norm * np.block([[a ** 3 * I, -a ** 2 * I], [-a ** 2 * I, a * I]])


def _dD_sq(t: float, eps_norm: float, d: int) -> np.ndarray:
    a, ap = float(alpha(t)), float(alpha_prime(t))
    I = np.eye(d)
    return eps_norm * ap * np.block([[3 * a ** 2 * I, -2 * a * I], [-2 * a * I, I]])


_SERIES = np.array([(-1) ** n * (6.0 - 1.5 * 2.0 ** n) / (3.0 ** n * math.factorial(n))
                    for n in range(3, 30)])


def alpha_sq_integral(t):
    """``int_0^t a(s)^2 ds`` in closed form; a power series near 0 avoids cancellation."""
    t = _check_t(t)
    closed = t + 6.0 * np.expm1(-t / 3.0) - 1.5 * np.expm1(-2.0 * t / 3.0)
    powers = np.power.outer(np.minimum(t, 1.0), np.arange(3, 30))
    series = powers @ _SERIES
    return np.where(t < 1.0, series, closed)


def check_alpha_integral_bound(n: int = 10_000, t_max: float = 100.0,
                               constant: float = ENVELOPE_CONSTANT) -> float:
    """Verify ``int_0^t a^2 >= min(t, t^3)/constant`` on ``n`` points of ``[0, t_max]``.

    Returns the smallest ratio ``int a^2 / min(t, t^3)`` over the positive
    points; raises ``DataQualityError`` if the bound fails anywhere.
    """
    t = np.linspace(0.0, t_max, n)
    lhs = alpha_sq_integral(t)
    m = np.minimum(t, t ** 3)
    if np.any(lhs < m / constant):
        bad = t[np.argmax(lhs < m / constant)]
        raise DataQualityError(f"envelope bound 1/{constant:g} fails at t = {bad:.6g}")
    pos = t > 0
    return float(np.min(lhs[pos] / m[pos]))


def _mean_zero(g, mu, grid):
    vals = g.values if isinstance(g, pde.GridField) else np.asarray(g, float).reshape(grid.shape)
    return vals - pde.mu_mean(vals, mu, grid)


def modified_norm(g, grid, mu, t: float, eps_norm: float, route: str = "collapsed") -> float:
    """``N_t`` of ``g - mu(g)``.

    ``route="collapsed"`` uses ``|g|^2 + eps a |(d_v - a d_x) g|^2``;
    ``route="quadratic"`` contracts the gradient with ``D_sq``.
    """
    w = pde._weights(mu) * grid.cell_area
    g0 = _mean_zero(g, mu, grid)
    gx, gv = (f.values for f in pde.gradient(g0, grid))
    base = float(np.sum(g0 ** 2 * w))
    if route == "collapsed":
        a = float(alpha(t))
        return base + eps_norm * a * float(np.sum((gv - a * gx) ** 2 * w))
    if route == "quadratic":
        D2 = D_sq(t, eps_norm)
        grad = np.stack([gx, gv])
        return base + float(np.einsum("iab,ij,jab,ab->", grad, D2, grad, w))
    raise ContractViolation(f"unknown route {route!r}")


def select_eps(model: ModelSpec, sigma: Optional[float] = None) -> dict:
    """Proof parameter ``eps`` making ``w.R_t w <= -(eps a^2/2)|w|^2``.

    With ``B = |d_x b| + |d_v b| + 1`` (sup of operator norms):
    the (1,1) block of ``R_t`` is ``-(1 + a) a^2 eps <= -a^2 eps``; the
    symmetrised off-diagonal block is ``eps a (1/3 + 2a/3 + a^2 b_x - a b_v)``,
    bounded by ``eps a B``; the (2,2) block is at most
    ``eps (2B - 5/3) - 2 sigma^2``.  Completing the square against half of
    the (1,1) margin leaves ``eps (2B^2 + 2B - 5/3 + 1/2) - 2 sigma^2`` on
    ``|w_v|^2``.  ``M_coeff`` is the larger of that coefficient and
    ``B + 2B^2``, and ``eps = 2 sigma^2 / (M_coeff + 1/2)``.
    """
    sigma = model.sigma if sigma is None else sigma
    bounds = drift_bounds(model)
    B = bounds.grad_x_sup + bounds.grad_v_sup + 1.0
    M = max(B + 2.0 * B ** 2, 2.0 * B ** 2 + 2.0 * B - 5.0 / 3.0)
    return {"eps_norm": 2.0 * sigma ** 2 / (M + 0.5), "M_coeff": M, "B": B}


def _blocks(J_blocks, d):
    if isinstance(J_blocks, DriftJacobian):
        dxb, dvb = J_blocks.dxb, J_blocks.dvb
    else:
        dxb, dvb = J_blocks
    return np.atleast_2d(np.asarray(dxb, float)), np.atleast_2d(np.asarray(dvb, float))


def rt_matrix(t: float, eps_norm: float, J_blocks, sigma: float) -> np.ndarray:
    """``R_t = -2 sigma^2 P_v + d/dt(D_t^2) + 2 D_t^2 J`` with ``J = [[0, d_x b^T], [I, d_v b^T]]``.

    ``J`` is the matrix with ``d/dt grad g = L grad g + J grad g``; only
    the symmetric part of ``R_t`` enters quadratic forms.
    """
    dxb, dvb = _blocks(J_blocks, None)
    d = dxb.shape[0]
    J = np.block([[np.zeros((d, d)), dxb.T], [np.eye(d), dvb.T]])
    Pv = np.block([[np.zeros((d, d)), np.zeros((d, d))], [np.zeros((d, d)), np.eye(d)]])
    return -2.0 * sigma ** 2 * Pv + _dD_sq(t, eps_norm, d) + 2.0 * D_sq(t, eps_norm, d) @ J


def rt_matrix_expanded(t: float, eps_norm: float, bx: float, bv: float, sigma: float) -> np.ndarray:
    """Entrywise ``R_t`` for ``d = 1``, written out by hand."""
    a, ap, e = float(alpha(t)), float(alpha_prime(t)), eps_norm
    return np.array([
        [(3 * ap - 2) * a ** 2 * e, 2 * e * (a ** 3 * bx - a ** 2 * bv - a * ap)],
        [2 * e * (a - a * ap), e * (ap - 2 * a ** 2 * bx + 2 * a * bv) - 2 * sigma ** 2],
    ])


@dataclass
class ModifiedNormTrace:
    times: np.ndarray
    N: np.ndarray
    norm_sq: np.ndarray
    gradx_sq: np.ndarray
    gradv_sq: np.ndarray
    eps_norm: float
    C: float
    h: float = 0.0
    dt: float = 0.0
    c_emp: Optional[float] = None

    def __post_init__(self):
        for name in ("times", "N", "norm_sq", "gradx_sq", "gradv_sq"):
            arr = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(arr)):
                raise ContractViolation(f"trace column {name} has non-finite entries")
            setattr(self, name, arr)

    @property
    def rate_certified(self) -> np.ndarray:
        return self.eps_norm * alpha(self.times) ** 2 / (2 * self.C + 4 * self.eps_norm)

    def rows(self):
        r = self.rate_certified
        for k in range(len(self.times)):
            yield (self.times[k], self.N[k], self.norm_sq[k], self.gradx_sq[k], self.gradv_sq[k], r[k])

    COLUMNS = ("t", "N", "norm_sq", "gradx_sq", "gradv_sq", "rate_certified")


def trace_observable(gen, mu, g0, T: float, eps_norm: float, C: float,
                     dt: Optional[float] = None, stride: int = 1) -> ModifiedNormTrace:
    """Evolve ``g0 - mu(g0)`` under ``L_h`` and record ``N_t`` every ``stride`` steps."""
    grid = gen.grid
    w = pde._weights(mu) * grid.cell_area
    g_init = _mean_zero(g0, mu, grid)
    rec = {k: [] for k in ("t", "N", "n", "gx", "gv")}

    def observe(step, t, x):
        if step % stride:
            return
        g = x.reshape(grid.shape)
        gx, gv = np.gradient(g, grid.hx, grid.hv, edge_order=1)
        a = float(alpha(t))
        n2 = float(np.sum(g * g * w))
        rec["t"].append(t)
        rec["n"].append(n2)
        rec["gx"].append(float(np.sum(gx * gx * w)))
        rec["gv"].append(float(np.sum(gv * gv * w)))
        rec["N"].append(n2 + eps_norm * a * float(np.sum((gv - a * gx) ** 2 * w)))

    ev = pde.evolve_observable(gen, g_init, T, dt=dt, observer=observe)
    return ModifiedNormTrace(np.array(rec["t"]), rec["N"], rec["n"], rec["gx"], rec["gv"],
                             eps_norm, C, h=max(grid.hx, grid.hv), dt=ev.dt * stride)


@dataclass
class DecayReport:
    n_steps: int
    n_violations: int
    first_violation: Optional[int]
    first_violation_time: Optional[float]
    worst_excess: float
    envelope_violations: int
    slack: float

    @property
    def ok(self) -> bool:
        return self.n_violations == 0 and self.envelope_violations == 0


def verify_decay(trace: ModifiedNormTrace, C: Optional[float] = None, eps_norm: Optional[float] = None,
                 slack: float = 0.05) -> DecayReport:
    """Check the differential and integrated decay of ``N_t`` step by step.

    Step ``k`` passes when
    ``(N_{k+1} - N_k)/dt <= -r(t_k) N_k + slack N_0 (dt + h)``; the
    integrated check is ``N_t <= exp(-int_0^t r) N_0 (1 + slack)``.
    """
    C = trace.C if C is None else C
    eps = trace.eps_norm if eps_norm is None else eps_norm
    t, N = trace.times, trace.N
    scale = eps / (2 * C + 4 * eps)
    r = scale * alpha(t) ** 2
    N0 = N[0]
    if len(t) < 2 or N0 == 0:
        return DecayReport(max(len(t) - 1, 0), 0, None, None, 0.0, 0, slack)
    dt = np.diff(t)
    lhs = np.diff(N) / dt
    rhs = -r[:-1] * N[:-1] + slack * N0 * (dt + trace.h)
    excess = lhs - rhs
    bad = np.flatnonzero(excess > 0)
    envelope = np.exp(-scale * alpha_sq_integral(t)) * N0 * (1 + slack)
    env_bad = int(np.sum(N > envelope))
    first = int(bad[0]) if bad.size else None
    return DecayReport(len(dt), int(bad.size), first, float(t[first]) if first is not None else None,
                       float(np.max(excess)), env_bad, slack)


def dissipation_identity_check(trace: ModifiedNormTrace, sigma: float, tol: float = 0.05) -> dict:
    """``|d|g|^2/dt + 2 sigma^2 |d_v g|^2| <= tol |g_0|^2`` at every step (trapezoidal gradient term)."""
    dn = np.diff(trace.norm_sq) / np.diff(trace.times)
    gv = 0.5 * (trace.gradv_sq[1:] + trace.gradv_sq[:-1])
    err = np.abs(dn + 2 * sigma ** 2 * gv)
    bound = tol * trace.norm_sq[0]
    return {"max_error": float(err.max()) if err.size else 0.0, "bound": bound,
            "n_violations": int(np.sum(err > bound)), "ok": bool(np.all(err <= bound))}


@dataclass
class EnvelopeReport:
    c: float
    c_emp: float
    passes: bool
    n_violations: int
    alpha_ratio_min: float
    monotone: bool


def envelope_check(trace: ModifiedNormTrace, norms_sq=None, times=None,
                   monotone_tol: float = 1e-10) -> EnvelopeReport:
    """Certified envelope ``|g_t|^2 <= exp(-c min(t, t^3)) |g_0|^2``.

    ``c = eps/(40 (2C + 4 eps))`` is the squared-norm rate.  ``norms_sq``
    (with ``times``) may supply ``|h_t - 1|^2`` from the density side; by
    default the trace's ``|g_t|^2`` is used.  ``c_emp`` is the negated
    least-squares slope of ``log |g_t|^2`` over the last third of the run.
    """
    ratio = check_alpha_integral_bound()
    t = trace.times if times is None else np.asarray(times, float)
    y = trace.norm_sq if norms_sq is None else np.asarray(norms_sq, float)
    steps = np.diff(y)
    if np.any(steps > monotone_tol * max(y[0], 1e-300)):
        k = int(np.argmax(steps > monotone_tol * y[0]))
        raise DataQualityError(
            f"norm increases at t = {t[k + 1]:.6g} by {steps[k]:.3e}; the dissipation identity forbids this")
    eps, C = trace.eps_norm, trace.C
    c = eps / (ENVELOPE_CONSTANT * (2 * C + 4 * eps))
    env = np.exp(-c * np.minimum(t, t ** 3)) * y[0]
    n_bad = int(np.sum(y > env * (1 + 1e-12)))
    tail = t >= t[-1] * 2.0 / 3.0
    ok = tail & (y > 0)
    if np.sum(ok) >= 2:
        slope = np.polyfit(t[ok], np.log(y[ok]), 1)[0]
        c_emp = float(-slope)
    else:
        c_emp = float("nan")
    trace.c_emp = c_emp
    return EnvelopeReport(c, c_emp, n_bad == 0, n_bad, ratio, True)


def _dirichlet_matrices(mu, grid, directions="full"):
    """Face-weighted Dirichlet form and lumped mass, both scaled by the cell area."""
    w = pde._weights(mu)
    nx, nv = grid.shape
    idx = np.arange(grid.size).reshape(grid.shape)
    rows, cols, vals = [], [], []
    faces = [("v", idx[:, :-1], idx[:, 1:], 0.5 * (w[:, :-1] + w[:, 1:]) / grid.hv ** 2)]
    if directions == "full":
        faces.append(("x", idx[:-1, :], idx[1:, :], 0.5 * (w[:-1, :] + w[1:, :]) / grid.hx ** 2))
    elif directions != "v":
        raise ContractViolation(f"unknown directions {directions!r}")
    for _, a, b, c in faces:
        a, b, c = a.ravel(), b.ravel(), c.ravel() * grid.cell_area
        rows += [a, b, a, b]
        cols += [a, b, b, a]
        vals += [c, c, -c, -c]
    K = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(grid.size, grid.size))
    Mdiag = w.ravel() * grid.cell_area
    return K, Mdiag


def rayleigh_quotient(g, mu, grid, directions: str = "full") -> float:
    """``sum |grad g|^2 mu / sum (g - mu(g))^2 mu`` with face differences.

    ``directions="v"`` keeps only velocity differences, so a function of
    ``x`` alone gives exactly zero.
    """
    if directions not in ("full", "v"):
        raise ContractViolation(f"unknown directions {directions!r}")
    w = pde._weights(mu)
    x = _mean_zero(g, mu, grid)
    den = float(np.sum(x * x * w))
    if den == 0:
        raise ContractViolation("Rayleigh quotient of a constant")
    num = np.sum(np.diff(x, axis=1) ** 2 * 0.5 * (w[:, :-1] + w[:, 1:])) / grid.hv ** 2
    if directions == "full":
        num += np.sum(np.diff(x, axis=0) ** 2 * 0.5 * (w[:-1, :] + w[1:, :])) / grid.hx ** 2
    return float(num) / den


def poincare_rayleigh(mu, grid, tol: float = 1e-10, max_iter: int = 200, block: int = 4,
                      seed: int = 0, shift: float = 1e-2) -> dict:
    """Smallest nonzero eigenvalue of ``K g = lam M g`` by block inverse iteration.

    Constants are projected out in the ``mu`` inner product after every
    solve; a Rayleigh-Ritz step on the block handles degenerate pairs.
    """
    K, m = _dirichlet_matrices(mu, grid)
    n = grid.size
    lu = spla.splu((K + shift * sp.diags(m)).tocsc())
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, block))
    total = m.sum()
    history = []
    lam = np.inf
    for it in range(max_iter):
        X = X - np.outer(np.ones(n), (m @ X) / total)
        Y = lu.solve(m[:, None] * X)
        Y = Y - np.outer(np.ones(n), (m @ Y) / total)
        Kr = Y.T @ (K @ Y)
        Mr = Y.T @ (m[:, None] * Y)
        vals, vecs = sla.eigh(0.5 * (Kr + Kr.T), 0.5 * (Mr + Mr.T))
        X = Y @ vecs
        X /= np.sqrt(np.sum(m[:, None] * X * X, axis=0))
        new = float(vals[0])
        history.append(new)
        if abs(new - lam) <= tol * abs(new):
            lam = new
            break
        lam = new
    else:
        raise SolverError("Poincare inverse iteration stagnated", history)
    if not lam > 0:
        raise SolverError(f"nonpositive first eigenvalue {lam:.3e}", history)
    return {"lambda1": lam, "C_rayleigh": 1.0 / lam, "iterations": len(history),
            "history": history, "eigenvector": X[:, 0].reshape(grid.shape)}


def operator_norm_Pt(gen, mu, t0: float, dt: Optional[float] = None, tol: float = 1e-6,
                     max_iter: int = 60, seed: int = 0) -> dict:
    """``|P_t0 - mu|`` on ``L2(mu_h)`` by power iteration on ``Pi P* Pi P Pi``.

    ``P`` is the observable-side stepping; its ``mu``-adjoint is the density
    stepping applied to ``mu g`` and divided by ``mu``.
    """
    if not t0 > 0:
        raise ContractViolation("t0 must be positive")
    grid = gen.grid
    w = pde._weights(mu).ravel()
    wa = w * grid.cell_area
    n_steps, step = pde._time_grid(t0, dt, gen)
    ident = sp.identity(gen.n, format="csc")
    lu_L = spla.splu((ident - 0.5 * step * gen.L).tocsc())
    rhs_L = (ident + 0.5 * step * gen.L).tocsr()
    lu_Q = spla.splu((ident - 0.5 * step * gen.Q).tocsc())
    rhs_Q = (ident + 0.5 * step * gen.Q).tocsr()

    def proj(x):
        return x - float(x @ wa)

    def forward(x):
        for _ in range(n_steps):
            x = lu_L.solve(rhs_L @ x)
        return x

    def adjoint(x):
        y = w * x
        for _ in range(n_steps):
            y = lu_Q.solve(rhs_Q @ y)
        return y / w

    rng = np.random.default_rng(seed)
    x = proj(rng.standard_normal(gen.n))
    x /= math.sqrt(float(x @ (x * wa)))
    history = []
    lam = 0.0
    for _ in range(max_iter):
        y = proj(adjoint(proj(forward(x))))
        new = float(x @ (y * wa))
        history.append(math.sqrt(max(new, 0.0)))
        nrm = math.sqrt(float(y @ (y * wa)))
        if nrm == 0:
            lam = 0.0
            break
        x = y / nrm
        if abs(new - lam) <= tol * max(new, 1e-300):
            lam = new
            break
        lam = new
    opnorm = math.sqrt(max(lam, 0.0))
    return {"opnorm": opnorm, "t0": t0, "iterations": len(history), "history": history,
            "contraction": opnorm < 1.0}


def poincare_prop2(K: float, sigma_sup: float, t0: float, opnorm: float) -> float:
    """``sigma_sup^2 (exp(2 K t0) - 1) / (2K (1 - opnorm^2))``, with limit ``t0`` as ``K -> 0``.

    ``sigma_sup`` is the sup of the diffusion coefficient; for the kinetic
    process that is ``sqrt(2) sigma``.
    """
    if not opnorm < 1:
        raise InapplicableError(f"no contraction certified at t0 = {t0:g} (|P_t0 - mu| = {opnorm:.4g} >= 1)")
    if not t0 > 0:
        raise ContractViolation("t0 must be positive")
    growth = t0 if abs(K) < POINCARE_K_ZERO else math.expm1(2 * K * t0) / (2 * K)
    return sigma_sup ** 2 * growth / (1.0 - opnorm ** 2)


@dataclass
class PoincareEstimate:
    lambda1: float
    C_rayleigh: float
    K: float
    t0: float
    opnorm_Pt0: float
    C_prop2: float
    sigma_sup: float
    meta: dict = field(default_factory=dict)

    @property
    def prop2_applicable(self) -> bool:
        return self.opnorm_Pt0 < 1

    @property
    def ordered(self) -> bool:
        return (not self.prop2_applicable) or self.C_rayleigh <= self.C_prop2


def poincare_estimate(gen, mu, t0: float = 5.0, dt: Optional[float] = None) -> PoincareEstimate:
    """Both routes on one grid model; ``C_prop2`` is ``inf`` when inapplicable."""
    ray = poincare_rayleigh(mu, gen.grid)
    K = drift_bounds(gen.model).one_sided_K
    op = operator_norm_Pt(gen, mu, t0, dt)
    sigma_sup = math.sqrt(2.0) * gen.model.sigma
    try:
        c2 = poincare_prop2(K, sigma_sup, t0, op["opnorm"])
    except InapplicableError:
        c2 = math.inf
    return PoincareEstimate(ray["lambda1"], ray["C_rayleigh"], K, t0, op["opnorm"], c2, sigma_sup,
                            {"rayleigh_iterations": ray["iterations"], "power_iterations": op["iterations"]})
