import numpy as np
import pytest
from hypothesis import given, strategies as st

from weakflow import oracles
from weakflow.characterization import (
    CurrentPair,
    MultiplierFamily,
    consistency_triangle,
    deviation_fields,
    gradient_total_check,
    multiplication_deviation,
    uniqueness_witness,
)
from weakflow.dynamics import VelocityLaw
from weakflow.grid import gaussian_packet, make_grid, spreading_gaussian, superposition


@pytest.fixture
def family():
    return MultiplierFamily.gaussian(5.0, np.linspace(-5, 5, 9))


@pytest.mark.parametrize("make", [
    lambda g: gaussian_packet(g, 0, 1, 0),
    lambda g: spreading_gaussian(g, 0, 1, 0.3, 0.5),
    lambda g: superposition(g, [(1, -3, 1, 1), (1, 3, 1, -1)]),
])
def test_bohmian_satisfies_condition(grid, family, make):
    assert multiplication_deviation(VelocityLaw.bohmian(), make(grid), family) < 1e-10


def test_variant_matches_closed_form(grid, family):
    psi = gaussian_packet(grid, 0, 1, 0)
    d = deviation_fields(VelocityLaw.variant(0.2), psi, family)
    rho = oracles.free_gaussian_density(grid.x, 0, 1, 0, 0)
    closed = np.array([0.2 * (1 / oracles.multiplied_density(grid.x, 1, 0, y, 5.0) - 1 / rho)
                       for y in family.offsets])
    ok = np.isfinite(d)
    assert np.max(np.abs(d[ok] - closed[ok]) / np.abs(closed[ok]).clip(1e-300)) < 1e-8
    assert multiplication_deviation(VelocityLaw.variant(0.2), psi, family) > 0


def test_phase_multiplier_shifts_velocity(grid):
    psi = gaussian_packet(grid, 0, 1, 0.4)
    dev = multiplication_deviation(VelocityLaw.bohmian(), psi, MultiplierFamily.phase(-0.7))
    assert abs(dev - 0.7) < 1e-9


def test_empty_family_rejected(grid):
    with pytest.raises(ValueError):
        multiplication_deviation(VelocityLaw.bohmian(), gaussian_packet(grid, 0, 1),
                                 MultiplierFamily.gaussian(1.0, []))


def test_gradient_total_cases(grid):
    assert gradient_total_check(MultiplierFamily.covering(grid, 2.0), grid).all()
    assert not gradient_total_check(MultiplierFamily.constant(), grid).any()
    single = gradient_total_check(MultiplierFamily.gaussian(10.0, [0.0]), grid)
    assert np.flatnonzero(~single).tolist() == [512] and grid.x[512] == 0.0


def test_witness_cases(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    fam = MultiplierFamily.covering(grid, 2.0)
    same = CurrentPair.build(psi, VelocityLaw.bohmian(), VelocityLaw.bohmian())
    assert np.all(uniqueness_witness(same, fam) == 0)
    pair = CurrentPair.build(psi, VelocityLaw.bohmian(), VelocityLaw.variant(0.2))
    w = uniqueness_witness(pair, fam)
    closed = 0.2 * np.max(np.abs(oracles.multiplier_density_gradient(
        grid.x[None, :], fam.offsets[:, None], 2.0)), axis=0)
    assert np.max(np.abs(w - closed)) < 1e-8
    assert np.all(w[psi.rho >= 1e-8] > 0)
    assert np.max(uniqueness_witness(pair, MultiplierFamily.constant())) == 0.0


def test_pair_requires_continuity(grid):
    with pytest.raises(ValueError):
        CurrentPair.build(gaussian_packet(grid, 0, 1, 0.5), VelocityLaw.bohmian(),
                          VelocityLaw("linear", 0.2))


def test_variant_deviation_scales_inverse_sigma(grid):
    psi = gaussian_packet(grid, 0, 1, 0)
    bulk = np.abs(grid.x) <= 2
    sig = np.array([5.0, 10.0, 20.0])
    dev = [multiplication_deviation(VelocityLaw.variant(0.2), psi,
                                    MultiplierFamily.gaussian(s, s * np.linspace(-1, 1, 9)),
                                    region=bulk) for s in sig]
    p = -np.polyfit(np.log(sig), np.log(dev), 1)[0]
    assert abs(p - 1) <= 0.3


@given(eps=st.floats(-0.5, 0.5).filter(lambda e: abs(e) > 1e-3))
def test_variant_lower_bound(eps):
    g = make_grid(-20, 20, 256)
    psi = gaussian_packet(g, 0, 1, 0)
    fam = MultiplierFamily.gaussian(3.0, [2.0])
    assert multiplication_deviation(VelocityLaw.variant(eps), psi, fam) > abs(eps) * 1e-3


def test_triangle(grid):
    psi = spreading_gaussian(grid, 0, 1, 0, 0.5)
    rows, ok = consistency_triangle(psi, [MultiplierFamily.covering(grid, 2.0)])
    assert ok
    verdicts = {(r.law, r.epsilon): r.satisfies_condition for r in rows}
    assert verdicts[("bohmian", 0.0)] and not verdicts[("variant", 0.2)]
    with pytest.raises(ValueError):
        consistency_triangle(psi, [MultiplierFamily.constant()])
