"""Finite-grid checks of the multiplication condition and of the uniqueness argument.

A velocity law satisfies the multiplication condition when v^{psi phi} = v^psi for
every real multiplier phi.  The Bohmian law does (a real factor leaves the phase
alone); adding a constant current does not.  When both laws are continuity
compatible and both satisfy the condition, grad|phi|^2 . (j1 - j2) must vanish for
every member of the family, which forces j1 = j2 wherever the family's gradients
span.  The witness field below makes that step measurable.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import Potential, VelocityLaw, continuity_residual, velocity_field
from .grid import RHO_MIN, GridSpec, WaveFunction, normalize

GRADIENT_TOL = 1e-8
CONTINUITY_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class MultiplierFamily:
    """phi_y(x) = Phi(y - x) for y in offsets.

    kind ``gaussian``: the pointer packet of spread sigma.  ``constant``: phi = 1.
    ``phase``: exp(i*wavenumber*x), a complex diagnostic outside the real class.
    """

    kind: str
    offsets: np.ndarray
    sigma: float = 1.0
    wavenumber: float = 0.0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        if self.kind not in ("gaussian", "constant", "phase"):
            raise ValueError(f"unknown multiplier family {self.kind!r}")
        offsets = np.atleast_1d(np.asarray(self.offsets, dtype=float))
        object.__setattr__(self, "offsets", offsets)
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("gaussian family needs sigma > 0")

    @classmethod
    def gaussian(cls, sigma: float, offsets) -> "MultiplierFamily":
        return cls("gaussian", offsets, float(sigma), label=f"gaussian(sigma={sigma:g})")

    @classmethod
    def covering(cls, grid: GridSpec, sigma: float, spacing: float | None = None
                 ) -> "MultiplierFamily":
        """Gaussian family with offsets spread over the whole domain."""
        spacing = sigma if spacing is None else spacing
        return cls.gaussian(sigma, np.arange(grid.x_min, grid.x_max + spacing / 2, spacing))

    @classmethod
    def constant(cls, n_members: int = 1) -> "MultiplierFamily":
        return cls("constant", np.zeros(n_members), label="constant")

    @classmethod
    def phase(cls, wavenumber: float) -> "MultiplierFamily":
        return cls("phase", np.zeros(1), wavenumber=float(wavenumber),
                   label=f"phase(a={wavenumber:g})")

    @property
    def is_real(self) -> bool:
        return self.kind != "phase" or self.wavenumber == 0.0

    def __len__(self) -> int:
        return len(self.offsets)

    def _u(self, x):
        return self.offsets[:, None] - np.asarray(x, dtype=float)[None, :]

    def values(self, x) -> np.ndarray:
        """(members, points) array of phi_y(x)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            s = self.sigma
            return (2.0 * np.pi * s ** 2) ** -0.25 * np.exp(-self._u(x) ** 2 / (4.0 * s ** 2))
        if self.kind == "constant":
            return np.ones((len(self), len(x)))
        return np.tile(np.exp(1j * self.wavenumber * x), (len(self), 1))

    def gradient(self, x) -> np.ndarray:
        """d phi_y / dx in closed form."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            return self.values(x) * self._u(x) / (2.0 * self.sigma ** 2)
        if self.kind == "constant":
            return np.zeros((len(self), len(x)))
        return 1j * self.wavenumber * self.values(x)

    def density_gradient(self, x) -> np.ndarray:
        """d |phi_y|^2 / dx in closed form."""
        x = np.asarray(x, dtype=float)
        if self.kind == "gaussian":
            return np.abs(self.values(x)) ** 2 * self._u(x) / self.sigma ** 2
        return np.zeros((len(self), len(x)))

    def gradient_total(self, grid: GridSpec, mask=None) -> bool:
        verdict = gradient_total_check(self, grid)
        return bool(np.all(verdict if mask is None else verdict[mask]))


def gradient_total_check(family: MultiplierFamily, grid: GridSpec,
                         tol: float = GRADIENT_TOL) -> np.ndarray:
    """Per grid point: does some member have |phi_y'(x)| > tol?  (In 1D that spans.)"""
    return np.any(np.abs(family.gradient(grid.x)) > tol, axis=0)


def multiplied_states(psi: WaveFunction, family: MultiplierFamily):
    """The renormalized products psi*phi_y, one per family member."""
    return [normalize(WaveFunction(psi.grid, psi.amp * phi)) for phi in family.values(psi.grid.x)]


def deviation_fields(law: VelocityLaw, psi: WaveFunction, family: MultiplierFamily,
                     rho_min: float = RHO_MIN):
    """(members, points) array of v^{psi phi_y} - v^psi, NaN off the joint valid mask."""
    base = velocity_field(law, psi, rho_min)
    out = np.full((len(family), psi.grid.n), np.nan)
    for i, prod in enumerate(multiplied_states(psi, family)):
        f = velocity_field(law, prod, rho_min)
        m = base.valid_mask & f.valid_mask
        out[i, m] = f.v[m] - base.v[m]
    return out


def multiplication_deviation(law: VelocityLaw, psi: WaveFunction, family: MultiplierFamily,
                             rho_min: float = RHO_MIN, region=None) -> float:
    """max over members and the joint valid mask of |v^{psi phi_y} - v^psi|.

    region optionally restricts the points (a boolean mask over the grid).
    """
    if len(family) == 0:
        raise ValueError("empty multiplier family")
    dev = np.abs(deviation_fields(law, psi, family, rho_min))
    if region is not None:
        dev = np.where(np.asarray(region, dtype=bool)[None, :], dev, np.nan)
    if not np.any(np.isfinite(dev)):
        raise ValueError("no point is valid for every comparison")
    return float(np.nanmax(dev))


@dataclass(frozen=True, eq=False)
class CurrentPair:
    """Currents of two laws on the same state, each checked against continuity first."""

    psi: WaveFunction
    law1: VelocityLaw
    law2: VelocityLaw
    j1: np.ndarray
    j2: np.ndarray
    residuals: tuple

    @classmethod
    def build(cls, psi: WaveFunction, law1: VelocityLaw, law2: VelocityLaw,
              pot: Potential | None = None, dt: float = 1e-3, tol: float = CONTINUITY_TOL,
              rho_min: float = RHO_MIN) -> "CurrentPair":
        pot = Potential.free(psi.grid) if pot is None else pot
        res = tuple(continuity_residual(psi, pot, law, dt, rho_min) for law in (law1, law2))
        for law, r in zip((law1, law2), res):
            if not r <= tol:
                raise ValueError(f"{law.kind} current violates continuity (residual {r:.3g})")
        return cls(psi, law1, law2, law1.current(psi), law2.current(psi), res)


def uniqueness_witness(pair: CurrentPair, family: MultiplierFamily) -> np.ndarray:
    """W(x) = max_y |d|phi_y|^2/dx * (j1 - j2)(x)|."""
    grad = family.density_gradient(pair.psi.grid.x)
    return np.max(np.abs(grad * (pair.j1 - pair.j2)[None, :]), axis=0)


@dataclass(frozen=True)
class TriangleRow:
    law: str
    epsilon: float
    max_deviation: float
    satisfies_condition: bool
    max_velocity_gap: float
    equals_bohmian: bool

    @property
    def consistent(self) -> bool:
        # condition on every gradient-total family  <=>  same velocity as Bohmian
        return self.satisfies_condition == self.equals_bohmian


def default_catalog():
    return [VelocityLaw.bohmian(), VelocityLaw.variant(0.0), VelocityLaw.variant(0.2),
            VelocityLaw.variant(-0.05)]


def consistency_triangle(psi: WaveFunction, families, catalog=None, tol: float = 1e-10,
                         rho_min: float = RHO_MIN):
    """Rows (one per law) relating the multiplication condition to v = v_Bohm.

    Only gradient-total families on the valid mask are used.  Returns (rows, passed).
    """
    catalog = default_catalog() if catalog is None else list(catalog)
    mask = psi.rho >= rho_min
    families = [f for f in families if f.is_real and f.gradient_total(psi.grid, mask)]
    if not families:
        raise ValueError("no gradient-total family supplied")
    v_b = velocity_field(VelocityLaw.bohmian(), psi, rho_min)
    rows = []
    for law in catalog:
        dev = max(multiplication_deviation(law, psi, f, rho_min) for f in families)
        v = velocity_field(law, psi, rho_min)
        m = v.valid_mask & v_b.valid_mask
        gap = float(np.max(np.abs(v.v[m] - v_b.v[m])))
        rows.append(TriangleRow(law.kind, law.epsilon, dev, dev <= tol, gap, gap <= tol))
    return rows, all(r.consistent for r in rows)
