import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from weakflow import oracles
from weakflow.grid import (
    GridError,
    WaveFunction,
    cell_cdf,
    density_cdf,
    gaussian_packet,
    inverse_cdf,
    make_grid,
    normalize,
    quantum_flux,
    sample_positions,
    spectral_derivative,
    spreading_gaussian,
    superposition,
)


def test_make_grid_spacing():
    g = make_grid(-20, 20, 1024)
    assert g.dx == 0.0390625
    assert g.x[0] == -20.0 and g.x[-1] == 20.0 - g.dx


@pytest.mark.parametrize("args", [(-20, 20, 1000), (0, 0, 64), (1, -1, 64), (-1, 1, 8)])
def test_make_grid_rejects(args):
    with pytest.raises(GridError):
        make_grid(*args)


def test_real_gaussian_symmetric(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    assert np.max(np.abs(psi.amp.imag)) == 0.0
    assert np.argmax(psi.rho) == 512 and grid.x[512] == 0.0
    # even about x = 0 (index 512 mirrors 512 - j <-> 512 + j)
    j = np.arange(1, 500)
    np.testing.assert_allclose(psi.amp[512 - j], psi.amp[512 + j], rtol=0, atol=1e-15)


def test_packet_phase_gradient(grid, bulk):
    psi = gaussian_packet(grid, 0, 1, 2)
    dS = np.diff(np.unwrap(psi.phase())) / grid.dx
    np.testing.assert_allclose(dS[bulk[:-1]], 2.0, atol=1e-12)


def test_packet_edge_rejected(grid):
    with pytest.raises(GridError):
        gaussian_packet(grid, 15, 3, 0)
    with pytest.raises(GridError):
        gaussian_packet(grid, 0, -1, 0)


def test_normalize(grid):
    psi = gaussian_packet(grid, 0.5, 1.2, 0.3)
    np.testing.assert_allclose(normalize(psi * 2.0).amp, psi.amp, atol=1e-15)
    np.testing.assert_allclose(normalize(psi).amp, psi.amp, atol=1e-15)
    assert abs(normalize(psi * 7.0).norm() - 1.0) < 1e-12
    with pytest.raises(GridError):
        normalize(WaveFunction(grid, np.zeros(grid.n)))


def test_flux_real_state_zero(grid):
    assert np.max(np.abs(quantum_flux(gaussian_packet(grid, 0, 1, 0)).j)) < 1e-12


def test_flux_plane_phase(grid, bulk):
    psi = gaussian_packet(grid, 0, 1, 2)
    f = quantum_flux(psi)
    np.testing.assert_allclose(f.j[bulk], 2.0 * f.rho[bulk], atol=1e-10)


def test_flux_against_finite_difference(grid):
    psi = superposition(grid, [(0.6, -2, 1, 1), (0.8, 2, 1, -1)])
    a = psi.amp
    d = (-np.roll(a, -2) + 8 * np.roll(a, -1) - 8 * np.roll(a, 1) + np.roll(a, 2)) / (12 * grid.dx)
    j_fd = np.imag(np.conj(a) * d)
    assert np.max(np.abs(quantum_flux(psi).j - j_fd)) < 1e-6


def test_flux_uses_conjugate(grid):
    # Im(conj(psi) psi') is the only form that is real-phase invariant
    psi = gaussian_packet(grid, 0, 1, 1.5)
    rotated = psi * np.exp(0.9j)
    np.testing.assert_allclose(quantum_flux(rotated).j, quantum_flux(psi).j, atol=1e-14)


@given(theta=st.floats(-np.pi, np.pi), k0=st.floats(-2, 2), x0=st.floats(-3, 3))
def test_flux_global_phase_invariant(theta, k0, x0):
    g = make_grid(-20, 20, 256)
    psi = gaussian_packet(g, x0, 1.0, k0)
    j1 = quantum_flux(psi * np.exp(1j * theta)).j
    np.testing.assert_allclose(j1, quantum_flux(psi).j, atol=1e-12)


@given(c=st.floats(-0.5, 0.5), w=st.floats(1.0, 6.0), k0=st.floats(-2, 2))
def test_velocity_depends_only_on_phase(c, w, k0):
    g = make_grid(-20, 20, 256)
    psi = gaussian_packet(g, 0.3, 1.0, k0)
    phi = np.exp(-((g.x - c) ** 2) / (4 * w ** 2))
    prod = normalize(psi * phi)
    m = prod.rho >= 1e-8
    v1 = quantum_flux(prod).j[m] / prod.rho[m]
    v0 = quantum_flux(psi).j[m] / psi.rho[m]
    np.testing.assert_allclose(v1, v0, atol=1e-8)


def test_spectral_derivative_of_gaussian(grid):
    f = np.exp(-grid.x ** 2)
    np.testing.assert_allclose(spectral_derivative(f, grid), -2 * grid.x * f, atol=1e-12)


def test_spreading_matches_oracle(grid):
    psi = spreading_gaussian(grid, 0.5, 1.0, 0.7, 1.3)
    rho = oracles.free_gaussian_density(grid.x, 0.5, 1.0, 0.7, 1.3)
    assert np.max(np.abs(psi.rho - rho)) < 1e-12


def test_sampling_mean_and_determinism(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    x = sample_positions(psi, 100_000, 42)
    assert abs(x.mean()) < 4 / np.sqrt(1e5)
    np.testing.assert_array_equal(x, sample_positions(psi, 100_000, 42))


def test_sampling_ks_against_exact_cdf(grid):
    n = 100_000
    x = sample_positions(gaussian_packet(grid, 0, 1, 0), n, 7)
    d = stats.kstest(x, stats.norm.cdf).statistic
    assert d < 1.63 / np.sqrt(n)


def test_sampling_rejects_empty(grid):
    with pytest.raises(ValueError):
        sample_positions(gaussian_packet(grid, 0, 1, 0), 0, 1)


@given(st.lists(st.floats(0, 1, exclude_max=True), min_size=1, max_size=50))
def test_inverse_cdf_monotone_and_consistent(us):
    g = make_grid(-20, 20, 256)
    psi = superposition(g, [(1.0, -3, 1, 0), (0.5, 4, 1.5, 1)])
    u = np.sort(np.array(us))
    x = inverse_cdf(psi, u)
    assert np.all(np.diff(x) >= 0)
    assert np.all((x >= g.x_min) & (x <= g.x_max))
    np.testing.assert_allclose(density_cdf(psi)(x), u, atol=1e-9)


def test_cell_cdf_bounds(grid):
    c = cell_cdf(gaussian_packet(grid, 0, 1, 0).rho, grid.dx)
    assert c[0] == 0 and c[-1] == 1 and np.all(np.diff(c) >= 0)
