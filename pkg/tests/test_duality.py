import numpy as np
import pytest

from ergosmp import (
    AdjointError,
    ControlLaw,
    SimulationError,
    TimeGrid,
    build_eta,
    build_gamma,
    build_rho,
    simulate_state,
    verify_duality_finite,
    verify_duality_infinite,
)


def test_all_zero_data(lq1, lq1_zero, lq1_base8):
    rep = verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="zero",
                                M=4096, seed=5, dt=0.01, base=lq1_base8)
    assert rep.lhs == 0.0
    assert rep.rhs == 0.0
    assert rep.abs_residual == 0.0


def test_eta_one_identity(lq1, lq1_zero, lq1_base8):
    rep = verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="one",
                                M=4096, seed=5, dt=0.01, base=lq1_base8)
    # oracle: lhs = E<p_0, 1> with p_0 = X_0 = 1; rhs = int 2 e^{-2s} ds -> 1
    assert abs(rep.lhs - 1.0) < 0.05
    assert abs(rep.rhs - 1.0) < 0.05
    assert rep.rel_residual < 0.05
    # the discrete scheme is exactly mean-consistent for deterministic duals
    assert rep.rel_residual < 1e-10


def test_gamma_forcing_identity(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=800)
    base = simulate_state(lq1, lq1_zero, [1.0], grid, 4096, seed=7)
    gamma = build_gamma(base, 1, value=[1.0], t_start=0.0, t_end=2.0)
    rep = verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="zero", gamma=gamma,
                                M=4096, seed=7, dt=0.01, base=base)
    oracle = 1.0 - np.exp(-2.0)  # both sides, from the OU mean path
    assert abs(rep.lhs - oracle) < 0.06
    assert abs(rep.rhs - oracle) < 0.06
    assert rep.rel_residual < 0.05


def test_rho_forcing_identity(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=800)
    base = simulate_state(lq1, lq1_zero, [1.0], grid, 4096, seed=1)
    rho = build_rho(base, 1, 1, {0: [1.0]}, t_start=0.0, t_end=1.0)
    rep = verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="zero", rho=rho,
                                M=4096, seed=1, dt=0.01, base=base)
    # oracle: lhs = E int <q, rho> = 1 (q = 1 on [0,1]); both sides near 1
    assert abs(rep.lhs - 1.0) < 0.08
    assert rep.rel_residual < 0.05


def test_terminal_data_enters_rhs(lq1, lq1_zero, lq1_base8):
    nu = lq1_base8.states[:, -1].copy()
    rep = verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="one", nu=nu,
                                M=4096, seed=5, dt=0.01, base=lq1_base8)
    assert rep.rel_residual < 0.05
    assert rep.config["nu"] == "array"


def test_eta_families(lq1, lq1_zero, lq1_base8):
    m = lq1_base8.n_paths
    assert np.all(build_eta("zero", lq1_base8, 0.0, 1) == 0.0)
    assert np.all(build_eta("one", lq1_base8, 0.0, 1) == 1.0)
    state = build_eta("state", lq1_base8, 2.0, 1)
    assert np.array_equal(state, lq1_base8.states[:, 200])
    custom = build_eta(np.array([0.5]), lq1_base8, 0.0, 1)
    assert custom.shape == (m, 1)
    with pytest.raises(SimulationError):
        build_eta("typo", lq1_base8, 0.0, 1)


def test_bilinearity_in_eta(cubic1):
    # nonlinear state: the residual is nondegenerate, and both sides (hence
    # the residual) are exactly linear in eta on shared noise
    zero = cubic1.zero_control()
    grid = TimeGrid(dt=0.01, steps=600)
    base = simulate_state(cubic1, zero, [1.0], grid, 2048, seed=9)
    reps = {}
    for lam in (1.0, 2.0, 10.0):
        reps[lam] = verify_duality_finite(cubic1, zero, 0.0, 6.0, eta=lam * np.ones(1),
                                          M=2048, seed=9, dt=0.01, base=base)
    assert reps[1.0].abs_residual > 1e-6
    for lam in (2.0, 10.0):
        ratio = reps[lam].abs_residual / reps[1.0].abs_residual
        assert abs(ratio - lam) <= 0.1 * lam
        assert np.isclose(reps[lam].lhs, lam * reps[1.0].lhs, rtol=1e-10)
        assert np.isclose(reps[lam].rhs, lam * reps[1.0].rhs, rtol=1e-10)


def test_base_grid_mismatch_rejected(lq1, lq1_zero, lq1_base8):
    with pytest.raises(SimulationError):
        verify_duality_finite(lq1, lq1_zero, 0.0, 4.0, eta="one",
                              M=4096, seed=5, dt=0.01, base=lq1_base8)
    with pytest.raises(SimulationError):
        verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="one",
                              M=4096, seed=5, dt=0.02, base=lq1_base8)


# ---------------------------------------------------------------------------
# Infinite-horizon form


def test_infinite_zero_case(lq1, lq1_zero):
    rep = verify_duality_infinite(lq1, lq1_zero, 0.0, 1.0, eta="zero", rho=None,
                                  T_report=4.0, T_buffer=2.0, M=512, seed=3, dt=0.01)
    assert rep.lhs == 0.0
    assert rep.rhs == 0.0


def test_infinite_eta_one(lq1, lq1_zero):
    rep = verify_duality_infinite(lq1, lq1_zero, 0.0, 1.0, eta="one", rho=None,
                                  T_report=8.0, T_buffer=4.0, M=4096, seed=2, dt=0.01)
    assert abs(rep.lhs - 1.0) < 0.06
    assert rep.rel_residual < 0.05
    assert 0.0 <= rep.tail_bound < 0.01


def test_infinite_rho_indicator(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=1200)
    probe = simulate_state(lq1, lq1_zero, [1.0], grid, 4096, seed=2)
    rho = build_rho(probe, 1, 1, {0: [1.0]}, t_start=0.0, t_end=1.0)
    rep = verify_duality_infinite(lq1, lq1_zero, 0.0, 1.0, eta="zero", rho=rho,
                                  T_report=8.0, T_buffer=4.0, M=4096, seed=2, dt=0.01)
    assert abs(rep.rhs - 1.0) < 0.08  # E int <q, rho> with q = 1
    assert rep.rel_residual < 0.05


def test_infinite_rejects_late_support(lq1, lq1_zero):
    grid = TimeGrid(dt=0.01, steps=1200)
    probe = simulate_state(lq1, lq1_zero, [1.0], grid, 64, seed=2)
    rho = build_rho(probe, 1, 1, {0: [1.0]}, t_start=0.0, t_end=3.0)
    with pytest.raises(AdjointError):
        verify_duality_infinite(lq1, lq1_zero, 0.0, 1.0, eta="zero", rho=rho,
                                T_report=8.0, T_buffer=4.0, M=64, seed=2, dt=0.01)
    with pytest.raises(SimulationError):
        verify_duality_infinite(lq1, lq1_zero, 0.0, 9.0, eta="zero", rho=None,
                                T_report=8.0, T_buffer=4.0, M=64, seed=2, dt=0.01)


def test_report_serialization(lq1, lq1_zero, lq1_base8):
    rep = verify_duality_finite(lq1, lq1_zero, 0.0, 8.0, eta="one",
                                M=4096, seed=5, dt=0.01, base=lq1_base8)
    obj = rep.to_dict()
    assert obj["schema_version"] == 1
    assert obj["rel_residual"] == rep.rel_residual
    assert obj["config"]["eta"] == "one"
