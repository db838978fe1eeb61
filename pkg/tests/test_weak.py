import numpy as np
import pytest
from hypothesis import given, strategies as st

from weakflow import _bank, oracles
from weakflow.dynamics import Potential, VelocityLaw, velocity_field
from weakflow.grid import GridError, gaussian_packet, make_grid, spreading_gaussian, superposition
from weakflow.stats import conditional_mean_by_bin, estimate_from_records
from weakflow.weak import (
    CensoringError,
    PointerModel,
    ProtocolConfig,
    RunRecords,
    analytic_weak_value_velocity,
    conditional_wavefunction,
    initial_draws,
    pointer_marginal,
    richardson_weak_velocity,
    run_protocol,
    sample_pointer,
)


def test_pointer_normalized_and_centred():
    p = PointerModel(3.0)
    y = np.linspace(-60, 60, 20001)
    dy = y[1] - y[0]
    assert abs(np.sum(p.density(y)) * dy - 1) < 1e-12
    assert abs(np.sum(y * p.density(y)) * dy) < 1e-12
    with pytest.raises(ValueError):
        PointerModel(0.0)


def test_sample_pointer_mean():
    y = sample_pointer(PointerModel(10.0), np.full(10 ** 6, 1.5), 11)
    assert abs(y.mean() - 1.5) < 4 * 10 / 1e3


def test_sample_pointer_narrow_and_deterministic():
    p = PointerModel(1e-6)
    assert abs(sample_pointer(p, 0.7, 5) - 0.7) < 1e-5
    assert sample_pointer(PointerModel(2.0), 0.7, 5) == sample_pointer(PointerModel(2.0), 0.7, 5)


def test_conditional_state_wide_pointer(grid):
    psi = gaussian_packet(grid, 0, 1, 0.5)
    cond = conditional_wavefunction(psi, 3.0, PointerModel(1e3))
    assert np.sqrt(np.sum(np.abs(cond.amp - psi.amp) ** 2) * grid.dx) < 1e-2


@given(y=st.floats(-8, 8))
def test_conditional_state_keeps_phase(y):
    g = make_grid(-20, 20, 256)
    psi = superposition(g, [(1, -2, 1, 1), (0.7, 2, 0.8, -1)])
    cond = conditional_wavefunction(psi, y, PointerModel(2.0))
    ok = (np.abs(cond.amp) > 1e-150) & (np.abs(psi.amp) > 1e-150)
    d = np.angle(cond.amp[ok] * np.conj(psi.amp[ok]))
    assert np.max(np.abs(d)) < 1e-12


def test_conditional_state_gaussian_product(grid):
    cond = conditional_wavefunction(gaussian_packet(grid, 0, 1, 0), 0.0, PointerModel(1.0))
    s = oracles.gaussian_product_width(1.0, 1.0)
    assert abs(s - 1 / np.sqrt(2)) < 1e-15
    expected = gaussian_packet(grid, 0, s, 0)
    assert np.max(np.abs(cond.amp - expected.amp)) < 1e-12


def test_conditional_state_no_overlap(grid):
    psi = gaussian_packet(grid, -15, 0.3, 0)
    with pytest.raises(GridError):
        conditional_wavefunction(psi, 1e6, PointerModel(1e-3))


def test_pointer_marginal(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    pm = pointer_marginal(psi, PointerModel(2.0))
    assert pm.y[0] <= grid.x_min - 6 * 2.0 and pm.y[-1] >= grid.x_max + 6 * 2.0 - grid.dx
    assert abs(pm.total() - 1) < 1e-10
    assert abs(pm.mean() - psi.mean_position()) < 1e-10
    exact = oracles.pointer_marginal_gaussian(pm.y, 0, 1, 2.0)
    assert np.max(np.abs(pm.density - exact)) < 1e-10


def test_pointer_marginal_mean_general(grid):
    psi = superposition(grid, [(1, -2, 1, 1), (0.6, 3, 0.7, 0)])
    pm = pointer_marginal(psi, PointerModel(4.0))
    assert abs(pm.mean() - psi.mean_position()) < 1e-10


def test_pointer_marginal_narrow(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    pm = pointer_marginal(psi, PointerModel(1e-4))
    inside = (pm.y >= grid.x_min - 1e-12) & (pm.y < grid.x_max - 1e-12)
    assert np.max(np.abs(pm.density[inside] - psi.rho)) < 1e-6


def _config(grid, psi, law=VelocityLaw.bohmian(), sigma=10.0, tau=0.05, n=2000, seed=3, **kw):
    return ProtocolConfig(psi, Potential.free(grid), law, PointerModel(sigma), tau, n, seed, **kw)


@pytest.mark.parametrize("law", [VelocityLaw.bohmian(), VelocityLaw.variant(0.2)])
@pytest.mark.parametrize("sigma,tau", [(10.0, 0.05), (1.0, 0.02)])
def test_bank_matches_direct(grid, law, sigma, tau):
    psi = spreading_gaussian(grid, 0, 1, 0, 0.5)
    cfg = _config(grid, psi, law, sigma, tau, n=150)
    _, x0, y = initial_draws(cfg, 0, 150)
    bank = _bank.ConditionalBank(psi, cfg.pot, sigma, tau, 50)
    xb, cb = bank.integrate(x0, y, law, 1e-8)
    xd, cd = _bank.integrate_direct(psi, cfg.pot, sigma, tau, 50, x0, y, law, 1e-8,
                                    lambda yi: conditional_wavefunction(psi, yi, cfg.pointer))
    np.testing.assert_array_equal(cb, cd)
    np.testing.assert_allclose(xb[~cb], xd[~cd], atol=1e-9)


def test_direct_engine_equals_bank_records(grid):
    psi = spreading_gaussian(grid, 0, 1, 0, 0.5)
    a = run_protocol(_config(grid, psi, n=300, engine="bank"))
    b = run_protocol(_config(grid, psi, n=300, engine="direct"))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_allclose(a.x_tau, b.x_tau, atol=1e-9)


def test_protocol_deterministic_and_worker_independent(grid):
    psi = spreading_gaussian(grid, 0, 1, 0, 0.5)
    cfg = _config(grid, psi, n=5000)
    a, b = run_protocol(cfg, workers=1), run_protocol(cfg, workers=2)
    for f in ("y", "x_tau", "censored", "trajectory_seed"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_protocol_prefix_stable(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    a = run_protocol(_config(grid, psi, n=100))
    b = run_protocol(_config(grid, psi, n=5000))
    np.testing.assert_array_equal(a.y, b.y[:100])
    np.testing.assert_array_equal(a.x_tau, b.x_tau[:100])


def test_variant_epsilon_zero_identical(grid):
    psi = spreading_gaussian(grid, 0, 1, 0, 0.5)
    a = run_protocol(_config(grid, psi, VelocityLaw.bohmian(), n=1000))
    b = run_protocol(_config(grid, psi, VelocityLaw.variant(0.0), n=1000))
    np.testing.assert_array_equal(a.x_tau, b.x_tau)
    np.testing.assert_array_equal(a.y, b.y)


def test_plane_phase_unconditional_mean(grid):
    psi = gaussian_packet(grid, 0, 1, 1)
    r = run_protocol(_config(grid, psi, n=20_000))
    d = (r.x_tau - r.y) / 0.05
    assert abs(d.mean() - 1.0) < 4 * d.std(ddof=1) / np.sqrt(len(d))


def test_plane_phase_bins(grid):
    psi = gaussian_packet(grid, 0, 1, 1)
    cfg = _config(grid, psi, n=20_000)
    r = run_protocol(cfg)
    _, est = estimate_from_records(cfg, r)
    ok = est.reliable
    assert ok.sum() >= 5
    assert np.all(np.abs(est.v_hat[ok] - 1.0) < 4 * est.stderr_v[ok])


def test_stationary_gaussian_bins(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    cfg = _config(grid, psi, n=20_000)
    _, est = estimate_from_records(cfg, run_protocol(cfg))
    ok = est.reliable
    assert np.all(np.abs(est.v_hat[ok]) < 4 * est.stderr_v[ok])


def test_stationary_drift_vanishes(grid):
    # the mean displacement over tau, which is what the estimator averages, is O(tau)
    psi = gaussian_packet(grid, 0, 1, 0)
    r = run_protocol(_config(grid, psi, tau=0.01, n=20_000))
    drift = (r.x_tau - r.x0) / 0.01
    assert abs(drift.mean()) < 0.05


def test_censoring_error_carries_records(grid):
    psi = spreading_gaussian(grid, 0, 1, 0, 0.5)
    cfg = _config(grid, psi, VelocityLaw.variant(0.2), n=4000, censor_bound=0.0)
    with pytest.raises(CensoringError) as info:
        run_protocol(cfg)
    recs = info.value.records
    assert len(recs) == 4000 and recs.censored.any()
    assert all(r.x_tau is None for r in recs if r.censored)


def test_records_roundtrip(grid):
    r = run_protocol(_config(grid, gaussian_packet(grid, 0, 1, 0), n=50))
    back = RunRecords.from_records(list(r))
    np.testing.assert_array_equal(back.y, r.y)
    np.testing.assert_array_equal(back.trajectory_seed, r.trajectory_seed)


def test_config_validation(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    with pytest.raises(ValueError):
        _config(grid, psi, tau=-0.1)
    with pytest.raises(ValueError):
        _config(grid, psi, n=0)


def test_weak_value_plane_phase(grid, bulk):
    psi = gaussian_packet(grid, 0, 1, 1)
    v = analytic_weak_value_velocity(psi, Potential.free(grid), 1e-4, grid.x[bulk][::8])
    assert np.max(np.abs(v - 1)) < 1e-2


def test_weak_value_real_gaussian(grid, bulk):
    psi = gaussian_packet(grid, 0, 1, 0)
    v = analytic_weak_value_velocity(psi, Potential.free(grid), 1e-4, grid.x[bulk][::8])
    assert np.max(np.abs(v)) < 1e-2


def test_weak_value_masked_far_out(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    assert np.isnan(analytic_weak_value_velocity(psi, Potential.free(grid), 1e-4, 15.0))
    with pytest.raises(ValueError):
        analytic_weak_value_velocity(psi, Potential.free(grid), 0.0, 0.0)


def test_richardson_on_superposition(grid):
    psi = superposition(grid, [(1, -3, 1, 1), (1, 3, 1, -1)])
    v0 = richardson_weak_velocity(psi, Potential.free(grid))
    vb = velocity_field(VelocityLaw.bohmian(), psi)
    m = v0.valid_mask & vb.valid_mask
    assert np.max(np.abs(v0.v[m] - vb.v[m])) < 1e-4
