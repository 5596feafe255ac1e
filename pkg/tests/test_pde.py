import math

import numpy as np
import pytest
from scipy import integrate

from hypocert import pde
from hypocert.errors import CFLViolationError, ContractViolation, GridTooSmallError

from conftest import harmonic


@pytest.fixture(scope="module")
def eq128():
    model = harmonic()
    grid = pde.PhaseGrid.centered(6.0, 6.0, 128, 128)
    gen = pde.assemble_generator(model, grid)
    return model, grid, gen, pde.steady_state(gen)


def test_grid_geometry():
    g = pde.PhaseGrid(-1.0, 3.0, -2.0, 2.0, 8, 4)
    assert g.hx == 0.5 and g.hv == 1.0 and g.shape == (8, 4)
    assert g.xc[0] == -0.75 and g.vc[-1] == 1.5
    with pytest.raises(ContractViolation):
        pde.PhaseGrid(1.0, 0.0, -1.0, 1.0, 4, 4)
    with pytest.raises(ContractViolation):
        pde.PhaseGrid.centered(1.0, 1.0, 1024, 1024)


def test_gridfield_checks():
    with pytest.raises(ContractViolation):
        pde.GridField(np.array([[np.inf]]), "observable")
    with pytest.raises(ContractViolation):
        pde.GridField(np.zeros((2, 2)), "velocity")


def test_requires_dimension_one():
    grid = pde.PhaseGrid.centered(6, 6, 16, 16)
    with pytest.raises(ContractViolation):
        pde.assemble_generator(harmonic(d=2), grid)


def test_generator_kills_constants(small_eq, small_neq):
    for _, grid, gen, _ in (small_eq, small_neq):
        assert np.max(np.abs(gen.L @ np.ones(gen.n))) <= 1e-12


def test_density_operator_is_transpose(small_neq):
    gen = small_neq[2]
    assert abs(gen.Q - gen.L.T).max() == 0
    rng = np.random.default_rng(0)
    f, g = rng.random(gen.n), rng.random(gen.n)
    assert f @ (gen.L @ g) == pytest.approx(g @ (gen.Q @ f), rel=1e-12)


def test_velocity_field_image(eq128):
    _, grid, gen, _ = eq128
    X, V = grid.mesh()
    Lv = (gen.L @ V.ravel()).reshape(grid.shape)
    inner = (np.abs(X) < 4) & (np.abs(V) < 4)
    assert np.max(np.abs(Lv - (-X - V))[inner]) <= 5 * max(grid.hx, grid.hv)


def test_weighted_dissipativity(small_eq, small_neq):
    for _, _, gen, mu in (small_eq, small_neq):
        assert pde.weighted_dissipativity(gen, mu) <= 1e-10 * max(1.0, abs(gen.L).sum(axis=1).max())


def test_steady_state_gibbs(eq128):
    _, grid, gen, mu = eq128
    assert mu.residual <= 1e-10 and mu.values.min() > 0
    gibbs = pde.gibbs_cell_average(grid, 1.0, 1.0)
    assert np.sum(np.abs(mu.values - gibbs)) * grid.cell_area <= 1e-3
    m = pde.moments(mu, grid)
    assert abs(m["cov_xv"]) <= 1e-4
    assert m["var_x"] == pytest.approx(1.0, abs=5e-3) and m["var_v"] == pytest.approx(1.0, abs=5e-3)


def test_gibbs_cell_average_oracle():
    grid = pde.PhaseGrid.centered(3.0, 3.0, 6, 6)
    cells = pde.gibbs_cell_average(grid, 1.0, 2.0)
    i, j = 2, 4
    x0, v0 = grid.x_min + i * grid.hx, grid.v_min + j * grid.hv
    val, _ = integrate.dblquad(
        lambda v, x: math.exp(-x * x / 2 - v * v / 4) / (2 * math.pi * math.sqrt(2)),
        x0, x0 + grid.hx, v0, v0 + grid.hv)
    assert cells[i, j] * grid.cell_area == pytest.approx(val, rel=1e-9)


def test_nonequilibrium_steady_state(small_neq):
    _, grid, gen, mu = small_neq
    assert mu.residual <= 1e-10
    m = pde.moments(mu, grid)
    # the non-gradient force makes the position and velocity marginals differ
    assert abs(m["var_x"] - m["var_v"]) > 0.05


@pytest.mark.xfail(strict=True, reason="stationary Cov(x, v) vanishes for every kinetic process")
def test_perturbed_covariance_exceeds_equilibrium_residual(eq128):
    model = harmonic(delta=0.3)
    grid = pde.PhaseGrid.default_for(model, 128, 128)
    mu = pde.steady_state(pde.assemble_generator(model, grid))
    eq_res = abs(pde.moments(eq128[3], eq128[1])["cov_xv"])
    assert abs(pde.moments(mu, grid)["cov_xv"]) > 10 * eq_res


def test_tiny_grid_rejected():
    grid = pde.PhaseGrid.centered(1.0, 1.0, 3, 3)
    with pytest.raises(GridTooSmallError):
        pde.steady_state(pde.assemble_generator(harmonic(), grid))


def test_stationary_start(small_eq):
    _, grid, gen, mu = small_eq
    ev = pde.evolve_density(gen, mu, 2.0, snapshots=5)
    for f in ev.fields:
        assert np.max(np.abs(f.values - mu.values)) <= 1e-9 * mu.values.max()


def test_zero_horizon(small_eq):
    _, grid, gen, mu = small_eq
    X, V = grid.mesh()
    f0 = np.exp(-((X - 1) ** 2 + V ** 2))
    f0 /= f0.sum() * grid.cell_area
    ev = pde.evolve_density(gen, f0, 0.0)
    assert len(ev) == 1 and np.array_equal(ev.fields[0].values, f0)


def bump(grid, shift=1.0):
    X, V = grid.mesh()
    f0 = np.exp(-((X - shift) ** 2 + V ** 2) / (2 * 0.7 ** 2))
    return f0 / (f0.sum() * grid.cell_area)


@pytest.mark.parametrize("which", ["small_eq", "small_neq"])
def test_mass_and_monotone_relative_density(which, request):
    _, grid, gen, mu = request.getfixturevalue(which)
    ev = pde.evolve_density(gen, bump(grid), 3.0, snapshots=13)
    assert np.max(np.abs(np.diff(ev.mass))) <= 1e-12
    dist = [pde.mu_norm(pde.relative_density(f, mu).values - 1.0, mu, grid) for f in ev.fields]
    assert all(b <= a + 1e-10 for a, b in zip(dist, dist[1:]))
    assert dist[-1] < 0.5 * dist[0]


def test_density_input_checks(small_eq):
    _, grid, gen, mu = small_eq
    with pytest.raises(ContractViolation):
        pde.evolve_density(gen, -mu.values, 1.0)
    with pytest.raises(ContractViolation):
        pde.evolve_density(gen, 2 * mu.values, 1.0)


def test_cfl_refusal(small_eq):
    _, grid, gen, mu = small_eq
    limit = pde.cfl_dt(gen)
    with pytest.raises(CFLViolationError) as info:
        pde.evolve_density(gen, mu, 1.0, dt=2 * limit)
    assert info.value.suggested_dt == pytest.approx(limit)
    ev = pde.evolve_density(gen, mu, 1.0)
    assert ev.dt <= limit


def test_observable_constant_and_mean(small_neq):
    _, grid, gen, mu = small_neq
    ev = pde.evolve_observable(gen, np.full(grid.shape, 3.0), 1.0, snapshots=3)
    for g in ev.fields:
        assert np.max(np.abs(g.values - 3.0)) <= 1e-12
    X, V = grid.mesh()
    g0 = np.sin(X) + V * np.exp(-X * X / 4)
    ev = pde.evolve_observable(gen, g0, 5.0, snapshots=6)
    means = [pde.mu_mean(g, mu, grid) for g in ev.fields]
    assert max(abs(m - means[0]) for m in means) <= 1e-10 * 5
    spread = [pde.mu_norm(g.values - means[0], mu, grid) for g in ev.fields]
    assert spread[-1] <= spread[0]


def test_dissipation_identity(eq128):
    _, grid, gen, mu = eq128
    X, V = grid.mesh()
    g0 = np.exp(-((X - 1) ** 2 + V ** 2) / 2)
    rows = []

    def obs(k, t, x):
        c = x - pde.mu_mean(x, mu, grid)
        rows.append((t, pde.mu_norm(c, mu, grid) ** 2, pde.mu_norm(pde.gradient(x, grid)[1], mu, grid) ** 2))

    pde.evolve_observable(gen, g0, 1.0, observer=obs)
    a = np.array(rows)
    dN = np.diff(a[:, 1]) / np.diff(a[:, 0])
    D = 0.5 * (a[1:, 2] + a[:-1, 2])
    scale = grid.hx + grid.hv + (a[1, 0] - a[0, 0])
    assert np.max(np.abs(dN + 2 * D)) <= 0.05 * scale


def test_helpers(small_eq):
    _, grid, gen, mu = small_eq
    assert np.allclose(pde.relative_density(mu, mu).values, 1.0)
    assert pde.mu_norm(np.ones(grid.shape), mu, grid) == pytest.approx(1.0, abs=1e-12)
    X, V = grid.mesh()
    gx, gv = pde.gradient(X + 2 * V, grid)
    assert np.allclose(gx.values, 1.0) and np.allclose(gv.values, 2.0)
    bad = mu.values.copy()
    bad[0, 0] = 0.0
    with pytest.raises(ContractViolation):
        pde.mu_norm(np.ones(grid.shape), bad, grid)


def commutator_defect(n):
    model = harmonic()
    grid = pde.PhaseGrid.centered(6.0, 6.0, n, n)
    gen = pde.assemble_generator(model, grid)
    X, V = grid.mesh()
    g = np.sin(X) * np.cos(0.7 * V) + 0.3 * X * V

    def L(a):
        return (gen.L @ a.ravel()).reshape(grid.shape)

    gx, gv = (q.values for q in pde.gradient(g, grid))
    lx, lv = (q.values for q in pde.gradient(L(g), grid))
    # [grad, L] g = J grad g with J = [[0, dxb], [1, dvb]] and dxb = dvb = -1
    cx = lx - L(gx) + gv
    cv = lv - L(gv) - gx + gv
    inner = (np.abs(X) < 2) & (np.abs(V) < 2)
    return max(np.abs(cx[inner]).max(), np.abs(cv[inner]).max())


def test_commutation_defect_shrinks():
    coarse, fine = commutator_defect(64), commutator_defect(128)
    assert fine < 0.6 * coarse and fine < 0.01


@pytest.mark.xfail(strict=True, reason="continuum outflow at 6 std already exceeds 1e-8 over T = 10")
def test_leak_default_box():
    model = harmonic()
    grid = pde.PhaseGrid.default_for(model)
    gen = pde.assemble_generator(model, grid)
    ev = pde.evolve_density(gen, bump(grid), 10.0)
    assert ev.leak <= 1e-8


def test_leak_wide_box():
    model = harmonic()
    grid = pde.PhaseGrid.default_for(model, 96, 96, n_std=7.5)
    gen = pde.assemble_generator(model, grid)
    ev = pde.evolve_density(gen, bump(grid), 10.0)
    assert 0 <= ev.leak <= 1e-8
