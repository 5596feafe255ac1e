"""Contraction certificates ``(A, kappa, R, eps)`` for kinetic drifts.

A certificate witnesses, for all ``z, z'`` with ``|z - z'| >= R``,

    (v - v', b(z) - b(z')) . A (z - z') <= -eps |z - z'|^2.

Certificates are built from the linear damped oscillator (a Lyapunov
solve) and then degraded to account for a perturbation ``F`` of the drift.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import CertificationInfeasible, ContractViolation, UnsupportedOperation
from .model import FBounds, ModelSpec

__all__ = [
    "ContractionCertificate", "ViolationReport", "kinetic_drift_matrix",
    "solve_lyapunov", "certify_linear", "certify_perturbed", "certify_model",
    "falsify_condition", "write_certificate", "read_certificate",
]

R_FLOOR = 1e-3
R_RATIO = 2.0 ** 0.125
FALSIFY_CHUNK = 8192
FALSIFY_RTOL = 1e-10


@dataclass(frozen=True)
class ContractionCertificate:
    A: np.ndarray
    kappa: float
    R: float
    eps_contract: float
    A_opnorm: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] % 2:
            raise ContractViolation("A must be a square 2d x 2d matrix")
        if not np.array_equal(A, A.T):
            raise ContractViolation("A must be exactly symmetric")
        ev = np.linalg.eigvalsh(A)
        if ev[0] <= 0:
            raise ContractViolation(f"A is not positive definite (lambda_min = {ev[0]:.3e})")
        if not self.kappa > 0:
            raise ContractViolation("kappa must be positive")
        if not self.eps_contract > 0 or self.eps_contract > self.kappa:
            raise ContractViolation("need 0 < eps_contract <= kappa")
        if self.R < 0:
            raise ContractViolation("R must be nonnegative")
        if abs(self.A_opnorm - ev[-1]) > 1e-12 * max(1.0, ev[-1]):
            raise ContractViolation("A_opnorm must equal lambda_max(A)")
        A.setflags(write=False)
        object.__setattr__(self, "A", A)

    @property
    def d(self) -> int:
        return self.A.shape[0] // 2

    def scaled(self, c: float) -> "ContractionCertificate":
        """Same certificate for ``c A``; both sides of the inequality scale by ``c``."""
        if not c > 0:
            raise ContractViolation("scale must be positive")
        A = c * self.A
        return ContractionCertificate(A, c * self.kappa, self.R, c * self.eps_contract,
                                      float(np.linalg.eigvalsh(A)[-1]), dict(self.meta))


@dataclass
class ViolationReport:
    n_pairs: int
    n_violations: int
    worst_margin: float
    worst_pair: tuple | None
    violations: list
    seed: int

    @property
    def ok(self) -> bool:
        return self.n_violations == 0


def kinetic_drift_matrix(gamma: float, d: int, k: float = 1.0) -> np.ndarray:
    """``[[0, I], [-k I, -gamma I]]``, the linear phase-space drift."""
    I = np.eye(d)
    return np.block([[np.zeros((d, d)), I], [-k * I, -gamma * I]])


def solve_lyapunov(M) -> np.ndarray:
    """Solve ``A M + M^T A = -I`` by the Kronecker-vectorised linear system."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if M.shape != (n, n):
        raise ContractViolation("M must be square")
    ev = np.linalg.eigvals(M)
    worst = ev[np.argmax(ev.real)]
    if worst.real >= 0:
        raise CertificationInfeasible(
            f"drift matrix is not Hurwitz: eigenvalue {worst:.6g} has nonnegative real part")
    I = np.eye(n)
    # column-major vec: vec(A M) = (M^T kron I) vec A, vec(M^T A) = (I kron M^T) vec A
    op = np.kron(M.T, I) + np.kron(I, M.T)
    vecA = np.linalg.solve(op, -I.reshape(-1, order="F"))
    A = vecA.reshape(n, n, order="F")
    A = 0.5 * (A + A.T)
    if np.linalg.eigvalsh(A)[0] <= 0:
        raise CertificationInfeasible("Lyapunov solution is not positive definite")
    return A


def certify_linear(gamma: float, d: int, k: float = 1.0, n_check: int = 10_000, seed: int = 0):
    """Certificate ``(A, kappa)`` for the drift ``-k x - gamma v``.

    ``kappa = -lambda_max(sym(A M))``, which is 1/2 up to rounding because
    ``A M + M^T A = -I``.  The inequality is re-checked on ``n_check``
    random unit vectors.
    """
    if not gamma > 0:
        raise ContractViolation("gamma must be positive")
    M = kinetic_drift_matrix(gamma, d, k)
    A = solve_lyapunov(M)
    AM = A @ M
    kappa = float(-np.linalg.eigvalsh(0.5 * (AM + AM.T))[-1])
    if n_check:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n_check, 2 * d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        worst = np.max(np.einsum("ni,ij,nj->n", z @ M.T, A, z) + kappa)
        if worst > 1e-10:
            raise CertificationInfeasible(f"linear certificate fails its own check (excess {worst:.3e})")
    return A, kappa


def _smallest_grid_radius(r_star: float) -> float:
    if r_star <= R_FLOOR:
        return R_FLOOR
    k = math.ceil(math.log(r_star / R_FLOOR) / math.log(R_RATIO))
    r = R_FLOOR * R_RATIO ** k
    while r < r_star:
        k += 1
        r = R_FLOOR * R_RATIO ** k
    while k > 0 and R_FLOOR * R_RATIO ** (k - 1) >= r_star:
        k -= 1
        r = R_FLOOR * R_RATIO ** k
    return r


def certify_perturbed(linear_cert, F_bounds, target_fraction: float = 0.5) -> ContractionCertificate:
    """Degrade a linear certificate to cover ``b = linear + F``.

    With ``base = kappa - |A| kappa'``, returns the smallest ``R`` on the
    geometric grid ``R_FLOOR * R_RATIO**k`` such that

        eps = kappa - |A| (2 M g / R + kappa') >= target_fraction * base.
    """
    A, kappa = linear_cert
    A = np.asarray(A, dtype=float)
    if isinstance(F_bounds, dict):
        F_bounds = FBounds(**F_bounds)
    g, kp, m = F_bounds.grad_F_sup, F_bounds.kappa_prime, F_bounds.M_rad
    if not 0 < target_fraction < 1:
        raise ContractViolation("target_fraction must lie in (0, 1)")
    if kp < 0 or m < 0 or g < kp:
        raise ContractViolation("need grad_F_sup >= kappa_prime >= 0 and M_rad >= 0")
    A_opnorm = float(np.linalg.eigvalsh(A)[-1])
    if kp >= kappa / A_opnorm:
        raise CertificationInfeasible(
            f"admissibility requires kappa' < kappa/|A|, got kappa' = {kp:.6g} >= "
            f"{kappa:.6g}/{A_opnorm:.6g} = {kappa / A_opnorm:.6g}")
    base = kappa - A_opnorm * kp
    if m * g == 0:
        R, eps = 0.0, base
    else:
        r_star = 2.0 * m * g * A_opnorm / ((1.0 - target_fraction) * base)
        R = _smallest_grid_radius(r_star)
        eps = kappa - A_opnorm * (2.0 * m * g / R + kp)
    meta = {"route": F_bounds.route, "target_fraction": target_fraction,
            "grad_F_sup": g, "kappa_prime": kp, "M_rad": m}
    return ContractionCertificate(A, float(kappa), float(R), float(eps), A_opnorm, meta)


def certify_model(model: ModelSpec, target_fraction: float = 0.5) -> ContractionCertificate:
    """Linear Lyapunov certificate, then the best admissible perturbation bound.

    Among admissible bound candidates the smallest ``R`` wins, ties going
    to the larger ``eps_contract``.
    """
    lin = model.drift.linear_part()
    if lin is None:
        raise UnsupportedOperation("certification needs a drift with a known linear part")
    k, gamma = lin
    linear = certify_linear(gamma, model.d, k)
    best, first_error = None, None
    for fb in model.drift.bound_candidates(model.d):
        try:
            cert = certify_perturbed(linear, fb, target_fraction)
        except CertificationInfeasible as exc:
            first_error = first_error or exc
            continue
        if best is None or (cert.R, -cert.eps_contract) < (best.R, -best.eps_contract):
            best = cert
    if best is None:
        raise first_error
    return best


def _falsify_chunk(cert, model, n, seed, chunk_index, scale):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(chunk_index,))))
    d = model.d
    z = scale * rng.standard_normal((n, 2 * d))
    u = rng.standard_normal((n, 2 * d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    lo = max(cert.R, R_FLOOR)
    hi = 100.0 * cert.R + 10.0
    r = np.exp(rng.uniform(math.log(lo), math.log(hi), n))
    zp = z + r[:, None] * u
    dz = z - zp
    db = model.b(z[:, :d], z[:, d:]) - model.b(zp[:, :d], zp[:, d:])
    lhs = np.concatenate([dz[:, d:], db], axis=1)
    sq = np.sum(dz * dz, axis=1)
    value = np.einsum("ni,ij,nj->n", lhs, cert.A, dz) + cert.eps_contract * sq
    normalized = value / sq
    bad = np.nonzero(value > FALSIFY_RTOL * cert.A_opnorm * sq)[0]
    i = int(np.argmax(normalized)) if n else -1
    worst = (float(normalized[i]), (z[i].copy(), zp[i].copy())) if n else (-math.inf, None)
    return len(bad), worst, [(z[j].copy(), zp[j].copy(), float(normalized[j])) for j in bad[:10]]


def falsify_condition(cert: ContractionCertificate, model: ModelSpec, n_pairs: int,
                      seed: int = 0, workers: int = 1, scale: float | None = None) -> ViolationReport:
    """Search for pairs with ``|z - z'| >= R`` that break the certificate.

    Base points are ``N(0, scale^2)`` (default ``max(3, R)``), directions
    uniform, separations log-uniform on ``[R, 100 R + 10]``.  A pair
    violates when the inequality fails by more than ``1e-10 |A| |z-z'|^2``.
    ``worst_margin`` is the largest ``value / |z-z'|^2`` seen.  Chunks of
    ``FALSIFY_CHUNK`` pairs carry their own seeds, so the report does not
    depend on ``workers``.
    """
    if cert.d != model.d:
        raise ContractViolation("certificate and model dimensions differ")
    if scale is None:
        scale = max(3.0, cert.R)
    sizes = [min(FALSIFY_CHUNK, n_pairs - s) for s in range(0, n_pairs, FALSIFY_CHUNK)]
    jobs = [(cert, model, n, seed, c, scale) for c, n in enumerate(sizes)]
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _falsify_chunk(*a), jobs))
    else:
        parts = [_falsify_chunk(*a) for a in jobs]
    count = sum(p[0] for p in parts)
    worst_margin, worst_pair = -math.inf, None
    violations = []
    for n_bad, (m, pair), bad in parts:
        if m > worst_margin:
            worst_margin, worst_pair = m, pair
        violations.extend(bad[: max(0, 10 - len(violations))])
    return ViolationReport(n_pairs, count, worst_margin, worst_pair, violations, seed)


def write_certificate(cert: ContractionCertificate, path) -> None:
    def fmt(x):
        return format(float(x), ".17g")

    lines = [
        "# contraction certificate",
        "A = " + " ".join(fmt(a) for a in cert.A.ravel()),
        f"kappa = {fmt(cert.kappa)}",
        f"R = {fmt(cert.R)}",
        f"eps_contract = {fmt(cert.eps_contract)}",
        f"A_opnorm = {fmt(cert.A_opnorm)}",
    ]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_certificate(path) -> ContractionCertificate:
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    missing = {"A", "kappa", "R", "eps_contract", "A_opnorm"} - values.keys()
    if missing:
        raise ContractViolation(f"certificate file lacks keys {sorted(missing)}")
    flat = np.array([float(s) for s in values["A"].split()])
    n = math.isqrt(flat.size)
    if n * n != flat.size:
        raise ContractViolation("A entry count is not a perfect square")
    return ContractionCertificate(flat.reshape(n, n), float(values["kappa"]), float(values["R"]),
                                  float(values["eps_contract"]), float(values["A_opnorm"]))
