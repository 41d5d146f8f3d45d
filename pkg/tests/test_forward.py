import numpy as np
import pytest

from ergosmp import (
    ControlLaw,
    ModelSpec,
    SimulationError,
    TimeGrid,
    direction_from_laws,
    ensemble_from_binary,
    ensemble_to_binary,
    ensemble_to_csv,
    estimate_moment,
    simulate_affine_dual,
    simulate_first_variation,
    simulate_perturbed,
    simulate_state,
    verify_expansion_residual,
)
from ergosmp.forward import _affine_forward, brownian_increments


def test_grid_validation():
    grid = TimeGrid(dt=0.01, steps=100)
    assert grid.horizon == pytest.approx(1.0)
    assert grid.index_of(0.5) == 50
    with pytest.raises(SimulationError):
        grid.index_of(0.505)
    with pytest.raises(SimulationError):
        TimeGrid(dt=-0.1, steps=10)
    with pytest.raises(SimulationError):
        TimeGrid.from_horizon(1.0, 0.3)


def test_deterministic_linear_decay(lq1, lq1_zero):
    noiseless = lq1.with_diffusion([[0.0]])
    grid = TimeGrid(dt=1e-3, steps=1000)
    ens = simulate_state(noiseless, lq1_zero, [1.0], grid, 4, seed=0)
    x1 = ens.states[0, -1, 0]
    assert abs(x1 - np.exp(-1.0)) < 2e-3
    assert np.all(ens.states[:, -1, 0] == x1)


def test_ou_stationary_moments(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=1000)
    ens = simulate_state(lq1, lq1_zero, [1.0], grid, 10_000, seed=3)
    mean_t = ens.states[:, -1, 0].mean()
    assert abs(mean_t) < 4.0 / np.sqrt(10_000)
    m2, ci2 = estimate_moment(ens, 2, 10.0)
    assert abs(m2 - 0.5) < 0.03
    m4, ci4 = estimate_moment(ens, 4, 10.0)
    assert abs(m4 - 3 * 0.5**2) < max(0.08, 2 * ci4)


def test_moment_deterministic_ensemble(lq1, lq1_zero):
    noiseless = lq1.with_diffusion([[0.0]])
    ens = simulate_state(noiseless, lq1_zero, [1.0], TimeGrid(dt=1e-3, steps=1000), 8, seed=0)
    est, half = estimate_moment(ens, 2, 1.0)
    assert half == 0.0
    assert abs(est - np.exp(-2.0)) < 5e-3
    with pytest.raises(SimulationError):
        estimate_moment(ens, 3, 1.0)
    with pytest.raises(SimulationError):
        estimate_moment(ens, 2, 0.5001)


def test_cubic_enters_attractor_fast(cubic1):
    zero = cubic1.zero_control()
    # fine-grid reference as the oracle
    fine = simulate_state(cubic1, zero, [10.0], TimeGrid(dt=1e-4, steps=10_000), 256, seed=11)
    ref, _ = estimate_moment(fine, 2, 1.0)
    assert ref < 2.0
    coarse = simulate_state(cubic1, zero, [10.0], TimeGrid(dt=0.01, steps=100), 4096, seed=11)
    est, _ = estimate_moment(coarse, 2, 1.0)
    assert est < 2.0


def test_state_stays_finite_and_immutable(lq1, lq1_zero):
    ens = simulate_state(lq1, lq1_zero, [0.0], TimeGrid(dt=0.01, steps=50), 32, seed=1)
    assert np.isfinite(ens.states).all()
    with pytest.raises(ValueError):
        ens.states[0, 0, 0] = 1.0
    with pytest.raises(ValueError):
        ens.increments[0, 0, 0] = 1.0


def test_simulation_rejects_bad_x0(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=10)
    with pytest.raises(SimulationError):
        simulate_state(lq1, lq1_zero, [np.nan], grid, 8, seed=0)
    with pytest.raises(SimulationError):
        simulate_state(lq1, lq1_zero, [0.0, 0.0], grid, 8, seed=0)


# ---------------------------------------------------------------------------
# Determinism


def test_bitwise_determinism_across_runs_and_workers(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=120)
    a = simulate_state(lq1, lq1_zero, [0.5], grid, 96, seed=42, workers=1)
    b = simulate_state(lq1, lq1_zero, [0.5], grid, 96, seed=42, workers=4)
    c = simulate_state(lq1, lq1_zero, [0.5], grid, 96, seed=42, workers=1)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.increments, b.increments)
    assert np.array_equal(a.states, c.states)


def test_increment_statistics(lq1):
    grid = TimeGrid(dt=0.04, steps=50)
    dw = brownian_increments(7, 2000, grid, 1)
    assert abs(dw.mean()) < 4 * np.sqrt(grid.dt / (2000 * 50))
    assert abs(dw.var() - grid.dt) < 0.002


def test_seed_changes_noise(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=20)
    a = simulate_state(lq1, lq1_zero, [0.0], grid, 16, seed=1)
    b = simulate_state(lq1, lq1_zero, [0.0], grid, 16, seed=2)
    assert not np.array_equal(a.increments, b.increments)


# ---------------------------------------------------------------------------
# Coupled simulations


def test_perturbed_theta_zero_is_bitwise(lq1, lq1_zero, lq1_one, lq1_base8):
    pert = simulate_perturbed(lq1, lq1_zero, lq1_one, 0.0, lq1_base8)
    assert np.array_equal(pert.states, lq1_base8.states)
    assert pert.seed == lq1_base8.seed


def test_perturbed_step_response(lq1, lq1_zero, lq1_one):
    noiseless = lq1.with_diffusion([[0.0]])
    grid = TimeGrid(dt=1e-3, steps=1000)
    base = simulate_state(noiseless, lq1_zero, [0.0], grid, 4, seed=0)
    pert = simulate_perturbed(noiseless, lq1_zero, lq1_one, 1.0, base)
    assert abs(pert.states[0, -1, 0] - (1 - np.exp(-1.0))) < 5e-3


def test_perturbed_validates_base(lq1, lq1_zero, lq1_one, lq1_base8):
    with pytest.raises(SimulationError):
        simulate_perturbed(lq1, lq1_one, lq1_zero, 0.5, lq1_base8)  # base was under zero
    with pytest.raises(SimulationError):
        simulate_perturbed(lq1, lq1_zero, lq1_one, 1.5, lq1_base8)


def test_first_variation_zero_direction(lq1, lq1_zero, lq1_base8):
    v = np.zeros((lq1_base8.n_paths, lq1_base8.grid.steps, 1))
    fv = simulate_first_variation(lq1, lq1_base8, lq1_zero, v)
    assert np.all(fv.states == 0.0)
    assert np.all(fv.states[:, 0] == 0.0)


def test_first_variation_deterministic_limit(lq1, lq1_zero, lq1_one):
    grid = TimeGrid(dt=1e-3, steps=1000)
    base = simulate_state(lq1, lq1_zero, [0.0], grid, 8, seed=2)
    v = direction_from_laws(lq1_zero, lq1_one, base)
    fv = simulate_first_variation(lq1, base, lq1_zero, v)
    # D_x sigma = D_u sigma = 0, so Y is the deterministic response 1 - e^-t
    assert np.allclose(fv.states[:, -1, 0], 1 - np.exp(-1.0), atol=2e-3)
    sup_sq = (fv.states**2).sum(-1).mean(0).max()
    assert sup_sq <= 2.0 * np.max(np.abs(v)) ** 2  # bounded by K sup |v|^2 with small K


def test_affine_dual_zero_and_decay(lq1, lq1_zero, lq1_base8):
    m = lq1_base8.n_paths
    dual0 = simulate_affine_dual(lq1, lq1_base8, lq1_zero, 0.0, np.zeros((m, 1)))
    assert np.all(dual0.values == 0.0)
    dual = simulate_affine_dual(lq1, lq1_base8, lq1_zero, 0.0, np.ones((m, 1)))
    ts = lq1_base8.grid.times()
    vals = dual.values[0, :, 0]
    assert np.allclose(vals, np.exp(-ts), atol=6e-3)
    assert np.allclose(dual.values[:, 300, 0], vals[300])  # deterministic across paths


def test_affine_dual_forced_second_moment(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=200)
    base = simulate_state(lq1, lq1_zero, [0.0], grid, 4096, seed=13)
    m = base.n_paths
    rho = np.zeros((m, grid.steps, 1, 1))
    rho[:, :100, 0, 0] = 1.0  # noise forcing on [0, 1)
    dual = simulate_affine_dual(lq1, base, lq1_zero, 0.0, np.ones((m, 1)), rho=rho)
    # E|Y_2|^2 = e^-4 + (e^-2 - e^-4)/2 for the forced scalar equation
    oracle = np.exp(-4.0) + (np.exp(-2.0) - np.exp(-4.0)) / 2.0
    est = (dual.values[:, -1, 0] ** 2).mean()
    assert abs(est - oracle) < 0.01


def test_affine_dual_validates_shapes(lq1, lq1_zero, lq1_base8):
    m = lq1_base8.n_paths
    with pytest.raises(SimulationError):
        simulate_affine_dual(lq1, lq1_base8, lq1_zero, 0.0, np.ones((m, 2)))
    with pytest.raises(SimulationError):
        simulate_affine_dual(lq1, lq1_base8, lq1_zero, 0.0, np.ones((m, 1)),
                             gamma=np.zeros((m, 3, 1)))


def test_affine_system_multiplicative_noise():
    # synthetic Gamma != 0: dZ = g0 Z dW, exact per-path product and moment growth
    grid = TimeGrid(dt=0.01, steps=50)
    m, g0 = 4096, 0.5
    rng = np.random.default_rng(4)
    dw_buf = rng.standard_normal((grid.steps, m, 1)) * np.sqrt(grid.dt)
    dw = dw_buf.transpose(1, 0, 2)
    lam = lambda j: np.zeros((m, 1, 1))
    gam = lambda j: np.full((m, 1, 1, 1), g0)
    z = _affine_forward(grid, dw, np.ones((m, 1)), 0, lam, None, gam, None)
    expected = np.prod(1.0 + g0 * dw[0, :, 0])
    assert np.isclose(z[0, -1, 0], expected, rtol=1e-10)
    growth = (z[:, -1, 0] ** 2).mean()
    oracle = (1.0 + g0**2 * grid.dt) ** grid.steps
    assert abs(growth - oracle) < 0.05


# ---------------------------------------------------------------------------
# Expansion residual


def test_expansion_residual_lq_near_zero(lq1, lq1_zero, lq1_one):
    grid = TimeGrid(dt=0.01, steps=600)
    base = simulate_state(lq1, lq1_zero, [0.0], grid, 2048, seed=4)
    rep = verify_expansion_residual(lq1, lq1_zero, lq1_one, [0.2, 0.1], base)
    assert max(rep.sup_residual_sq) < 1e-3
    assert 1.9 <= rep.scaling_slope <= 2.1


def test_expansion_residual_cubic_monotone(cubic1):
    zero = cubic1.zero_control()
    one = ControlLaw.constant([1.0], cubic1.control_set)
    grid = TimeGrid(dt=0.005, steps=600)
    base = simulate_state(cubic1, zero, [0.0], grid, 1024, seed=21)
    rep = verify_expansion_residual(cubic1, zero, one, [0.2, 0.1, 0.05], base)
    assert rep.residual_decreasing
    assert rep.residual_halved
    assert 1.9 <= rep.scaling_slope <= 2.1
    with pytest.raises(SimulationError):
        verify_expansion_residual(cubic1, zero, one, [0.1, 0.2], base)


def test_exponential_forgetting(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=300)
    a = simulate_state(lq1, lq1_zero, [0.0], grid, 512, seed=5)
    b = simulate_state(lq1, lq1_zero, [5.0], grid, 512, seed=5)
    diff = ((a.states - b.states) ** 2).sum(-1).mean(0)
    ts = grid.times()
    assert np.all(diff <= 25.0 * np.exp(-2.0 * ts) * 1.25 + 1e-12)
    mask = (ts > 0) & (ts <= 2.0)
    rate = -np.polyfit(ts[mask], np.log(diff[mask]), 1)[0]
    assert abs(rate - 2.0) <= 0.2


# ---------------------------------------------------------------------------
# Export


def test_binary_round_trip(tmp_path, lq1, lq1_zero):
    ens = simulate_state(lq1, lq1_zero, [0.3], TimeGrid(dt=0.02, steps=25), 16, seed=9)
    path = tmp_path / "dump.bin"
    ensemble_to_binary(ens, str(path))
    back = ensemble_from_binary(str(path))
    assert np.array_equal(back.states, ens.states)
    assert np.array_equal(back.increments, ens.increments)
    assert back.seed == ens.seed
    assert back.grid == ens.grid
    assert np.array_equal(back.x0, ens.x0)


def test_csv_export(tmp_path, lq1, lq1_zero):
    ens = simulate_state(lq1, lq1_zero, [0.3], TimeGrid(dt=0.02, steps=5), 3, seed=9)
    path = tmp_path / "dump.csv"
    ensemble_to_csv(ens, str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "path,step,t,x_1"
    assert len(lines) == 1 + 3 * 6
    row = lines[1].split(",")
    assert row[0] == "0" and row[1] == "0"
    assert float(row[3]) == 0.3


def test_restricted_view(lq1, lq1_zero, lq1_base8):
    sub = lq1_base8.restricted(4.0)
    assert sub.grid.steps == 400
    assert np.array_equal(sub.states, lq1_base8.states[:, :401])
    assert sub.seed == lq1_base8.seed
