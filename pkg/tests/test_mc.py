import math

import numpy as np
import pytest
from scipy.linalg import expm

from hypocert import mc
from hypocert.certify import certify_linear, certify_model, kinetic_drift_matrix
from hypocert.errors import ContractViolation, DivergenceError, UnsupportedOperation
from hypocert.model import Custom, ModelSpec, PhasePoint, drift_bounds

from conftest import harmonic


def test_config_validation():
    with pytest.raises(ContractViolation):
        mc.SdeRunConfig(dt=0.0, T=1.0, n_traj=1)
    with pytest.raises(ContractViolation):
        mc.SdeRunConfig(dt=0.1, T=-1.0, n_traj=1)
    with pytest.raises(ContractViolation):
        mc.SdeRunConfig(dt=0.1, T=1.0, n_traj=0)
    with pytest.raises(ContractViolation):
        mc.SdeRunConfig(dt=0.1, T=1.0, n_traj=1, integrator="rk4")
    cfg = mc.SdeRunConfig(dt=0.1, T=1.0, n_traj=1, n_snapshots=3)
    assert cfg.n_steps == 10 and cfg.snapshot_steps().tolist() == [0, 5, 10]


def ode_error(dt, integrator):
    model = harmonic(sigma=1e-300)
    cfg = mc.SdeRunConfig(dt=dt, T=5.0, n_traj=1, integrator=integrator, n_snapshots=6)
    tr = mc.integrate(model, PhasePoint([1.0], [0.0]), cfg)
    M = kinetic_drift_matrix(1.0, 1)
    exact = np.array([expm(M * t) @ [1.0, 0.0] for t in tr.times])
    return np.max(np.abs(tr.states[:, 0, :] - exact))


def test_deterministic_limit_euler():
    e1, e2 = ode_error(0.01, "euler_maruyama"), ode_error(0.005, "euler_maruyama")
    assert e1 < 0.05 and 1.7 < e1 / e2 < 2.3


def test_deterministic_limit_splitting_exact_for_linear():
    assert ode_error(0.1, "splitting_oab") < 1e-12


def test_zero_horizon_and_determinism():
    model = harmonic(delta=0.3)
    cfg0 = mc.SdeRunConfig(dt=0.01, T=0.0, n_traj=3)
    tr = mc.integrate(model, [0.5, -1.0], cfg0)
    assert tr.states.shape == (1, 3, 2) and np.all(tr.final() == [0.5, -1.0])
    for integ in mc.INTEGRATORS:
        cfg = mc.SdeRunConfig(dt=0.01, T=3.0, n_traj=50, seed=42, integrator=integ)
        a, b = mc.integrate(model, [0.5, -1.0], cfg), mc.integrate(model, [0.5, -1.0], cfg)
        assert np.array_equal(a.states, b.states)
        c = mc.integrate(model, [0.5, -1.0], mc.SdeRunConfig(dt=0.01, T=3.0, n_traj=50, seed=43, integrator=integ))
        assert not np.array_equal(a.states, c.states)


def test_streams_are_per_trajectory():
    model = harmonic()
    big = mc.integrate(model, [0.0, 0.0], mc.SdeRunConfig(dt=0.01, T=3.0, n_traj=20, seed=7))
    small = mc.integrate(model, [0.0, 0.0], mc.SdeRunConfig(dt=0.01, T=3.0, n_traj=5, seed=7))
    assert np.array_equal(big.states[:, :5], small.states)


def test_blowup_is_reported():
    model = ModelSpec(1, 1.0, Custom(lambda x, v: 50.0 * v))
    with pytest.raises(DivergenceError, match="dt"):
        mc.integrate(model, [1.0, 1.0], mc.SdeRunConfig(dt=0.5, T=100.0, n_traj=2))
    with pytest.raises(UnsupportedOperation):
        mc.integrate(model, [1.0, 1.0], mc.SdeRunConfig(dt=0.5, T=1.0, n_traj=2, integrator="splitting_oab"))


def test_equal_starts_stay_equal():
    model = harmonic(delta=0.3)
    cfg = mc.SdeRunConfig(dt=0.01, T=5.0, n_traj=200)
    A, _ = certify_linear(1.0, 1)
    res = mc.couple_synchronous(model, [1.0, 0.5], [1.0, 0.5], cfg, A, drift_bounds(model).one_sided_K)
    assert np.all(res.stats.mean_sq_dist == 0) and np.all(res.stats.mean_A_dist == 0)
    assert res.verdict_growth


def test_linear_A_form_decay():
    model = harmonic()
    A, _ = certify_linear(1.0, 1)
    M = kinetic_drift_matrix(1.0, 1)
    d0 = np.array([1.5, -0.5])
    cfg = mc.SdeRunConfig(dt=0.01, T=4.0, n_traj=10, integrator="splitting_oab", n_snapshots=9)
    res = mc.couple_synchronous(model, d0, [0.0, 0.0], cfg, A, 0.0)
    for t, q in zip(res.stats.times, res.stats.mean_A_dist):
        D = expm(M * t) @ d0
        assert q == pytest.approx(D @ A @ D, rel=1e-10)
    # d/dt q = -|D|^2 along the flow
    D = expm(M * 1.0) @ d0
    h = 1e-5
    dq = ((expm(M * (1 + h)) @ d0) @ A @ (expm(M * (1 + h)) @ d0) - (expm(M * (1 - h)) @ d0) @ A @ (expm(M * (1 - h)) @ d0)) / (2 * h)
    assert dq == pytest.approx(-D @ D, rel=1e-6)
    em = mc.couple_synchronous(model, d0, [0.0, 0.0], mc.SdeRunConfig(dt=0.01, T=4.0, n_traj=10, n_snapshots=9), A, 0.0)
    assert np.max(np.abs(em.stats.mean_A_dist - res.stats.mean_A_dist)) < 0.02


@pytest.mark.parametrize("delta", [0.0, 0.3])
def test_coupling_verdicts(delta):
    model = harmonic(delta=delta)
    cert = certify_model(model)
    K = drift_bounds(model).one_sided_K
    z0 = np.array([1.0, 0.0])
    z0p = z0 + np.array([max(3.0, 2 * cert.R), 0.0])
    cfg = mc.SdeRunConfig(dt=0.01, T=5.0, n_traj=2000, seed=3)
    res = mc.couple_synchronous(model, z0, z0p, cfg, cert.A, K, cert.eps_contract, cert.R)
    assert res.verdict_growth
    assert res.verdict_decay and res.decay_checks > 0
    assert np.all(res.stats.ci_sq >= 0) and np.all(res.stats.mean_sq_dist >= 0)


def test_ci_shrinks_with_sample_size():
    model = harmonic(delta=0.3)
    A, _ = certify_linear(1.0, 1)
    K = drift_bounds(model).one_sided_K
    half = []
    for n in (400, 1600):
        cfg = mc.SdeRunConfig(dt=0.02, T=3.0, n_traj=n, seed=1)
        half.append(mc.couple_synchronous(model, [2.0, 0.0], [-2.0, 0.0], cfg, A, K).stats.ci_sq[-1])
    assert 1.6 < half[0] / half[1] < 2.5


@pytest.fixture(scope="module")
def eq_moments():
    cfg = mc.SdeRunConfig(dt=0.02, T=60.0, n_traj=400, seed=5, integrator="splitting_oab")
    return mc.ergodic_moments(harmonic(), cfg, burn_in=10.0, n_batches=1)


def test_gibbs_moments(eq_moments):
    cov = eq_moments["cov"]
    assert cov[0, 0] == pytest.approx(1.0, abs=0.05)
    assert cov[1, 1] == pytest.approx(1.0, abs=0.05)
    assert abs(cov[0, 1]) <= 0.05
    assert np.all(np.abs(eq_moments["mean"]) <= 0.05)
    assert eq_moments["cov_xv_ci"] < 0.05


def test_gibbs_moments_other_temperature():
    cfg = mc.SdeRunConfig(dt=0.02, T=40.0, n_traj=400, seed=6, integrator="splitting_oab")
    m = mc.ergodic_moments(harmonic(gamma=2.0, sigma=0.5), cfg, burn_in=10.0)
    assert m["cov"][0, 0] == pytest.approx(0.125, rel=0.1)
    assert m["cov"][1, 1] == pytest.approx(0.125, rel=0.1)


def test_euler_covariance_bias():
    # Euler-Maruyama's stationary law for the harmonic chain has Cov(x, v) = -dt/2
    dt = 0.05
    cfg = mc.SdeRunConfig(dt=dt, T=60.0, n_traj=400, seed=8)
    m = mc.ergodic_moments(harmonic(), cfg, burn_in=10.0)
    assert m["cov_xv"] == pytest.approx(-dt / 2, abs=0.01)


def test_halving_dt_within_ci():
    model = harmonic(delta=0.3)
    res = []
    for dt in (0.02, 0.01):
        cfg = mc.SdeRunConfig(dt=dt, T=40.0, n_traj=400, seed=9, integrator="splitting_oab")
        res.append(mc.ergodic_moments(model, cfg, burn_in=10.0))
    a, b = res
    assert np.all(np.abs(a["cov"] - b["cov"]) <= a["cov_ci"] + b["cov_ci"])


def test_moments_input_checks():
    cfg = mc.SdeRunConfig(dt=0.1, T=1.0, n_traj=2)
    with pytest.raises(ContractViolation):
        mc.ergodic_moments(harmonic(), cfg, burn_in=1.0)
