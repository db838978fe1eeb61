"""Schroedinger evolution, velocity laws, trajectories and the continuity residual."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    HBAR,
    MASS,
    RHO_MIN,
    GridSpec,
    WaveFunction,
    cell_cdf,
    quantum_flux,
    spectral_derivative,
)


class TrajectoryCensored(RuntimeError):
    """A trajectory entered the region where |psi|^2 < rho_min."""


# --------------------------------------------------------------------------- potentials


@dataclass(frozen=True, eq=False)
class Potential:
    grid: GridSpec
    v: np.ndarray
    tag: str = "custom"
    params: tuple = ()
    hbar: float = HBAR
    mass: float = MASS

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        if v.shape != (self.grid.n,):
            raise ValueError("potential does not match the grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("potential must be finite everywhere")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    @classmethod
    def free(cls, grid, **units) -> "Potential":
        return cls(grid, np.zeros(grid.n), "free", (), **units)

    @classmethod
    def harmonic(cls, grid, omega: float = 1.0, center: float = 0.0, **units) -> "Potential":
        mass = units.get("mass", MASS)
        v = 0.5 * mass * omega ** 2 * (grid.x - center) ** 2
        return cls(grid, v, "harmonic", (omega, center), **units)

    @classmethod
    def gaussian_barrier(cls, grid, height: float, width: float, center: float = 0.0,
                         **units) -> "Potential":
        v = height * np.exp(-((grid.x - center) ** 2) / (2.0 * width ** 2))
        return cls(grid, v, "gaussian_barrier", (height, width, center), **units)


# --------------------------------------------------------------------------- evolution


def _kinetic_phase(grid: GridSpec, dt: float, hbar: float, mass: float) -> np.ndarray:
    return np.exp(-1j * hbar * grid.k ** 2 * dt / (2.0 * mass))


def split_step(amp: np.ndarray, pot: Potential, dt: float, n_steps: int = 1) -> np.ndarray:
    """Strang steps (half kick, drift, half kick) on one state or a stack of states."""
    half_kick = np.exp(-0.5j * pot.v * dt / pot.hbar)
    drift = _kinetic_phase(pot.grid, dt, pot.hbar, pot.mass)
    out = np.asarray(amp, dtype=complex)
    for _ in range(n_steps):
        out = half_kick * np.fft.ifft(drift * np.fft.fft(half_kick * out, axis=-1), axis=-1)
    return out


def evolve(psi: WaveFunction, pot: Potential, dt: float) -> WaveFunction:
    """One second-order split-operator step of length dt."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return WaveFunction(psi.grid, split_step(psi.amp, pot, dt))


def propagate(psi: WaveFunction, pot: Potential, t: float, dt: float = 1e-3) -> WaveFunction:
    """Evolve over a total time t using equal steps no longer than dt."""
    if t == 0:
        return psi
    n_steps = max(1, int(np.ceil(abs(t) / dt - 1e-9)))
    return WaveFunction(psi.grid, split_step(psi.amp, pot, t / n_steps, n_steps))


class StateHistory:
    """psi(t) on the uniform time lattice t0 + m*h, built lazily by split-operator steps.

    Acts as the time-indexed wave-function source for trajectory integration.
    """

    def __init__(self, psi0: WaveFunction, pot: Potential, h: float, t0: float = 0.0,
                 substeps: int = 1):
        self.pot = pot
        self.h = float(h)
        self.t0 = float(t0)
        self.substeps = int(substeps)
        self._states = [psi0.amp]

    def index(self, t: float) -> int:
        m = (t - self.t0) / self.h
        mi = int(round(m))
        if mi < 0 or abs(m - mi) > 1e-6:
            raise ValueError(f"time {t} is not on the history lattice")
        return mi

    def amp(self, m: int) -> np.ndarray:
        while len(self._states) <= m:
            self._states.append(split_step(self._states[-1], self.pot, self.h / self.substeps,
                                           self.substeps))
        return self._states[m]

    def __call__(self, t: float) -> WaveFunction:
        return WaveFunction(self.pot.grid, self.amp(self.index(t)))


# --------------------------------------------------------------------------- velocity laws


@dataclass(frozen=True)
class VelocityLaw:
    """Velocity functional psi -> v^psi built from the quantum flux plus an added current.

    kind ``bohmian``: v = j/rho.  kind ``variant``: v = (j + epsilon)/rho, a constant
    (hence divergence-free) addition.  kind ``linear`` adds epsilon*x, which is NOT
    divergence-free; it exists only to show the continuity check failing.
    """

    kind: str = "bohmian"
    epsilon: float = 0.0
    hbar: float = HBAR
    mass: float = MASS

    def __post_init__(self):
        if self.kind not in ("bohmian", "variant", "linear"):
            raise ValueError(f"unknown velocity law {self.kind!r}")
        if not np.isfinite(self.epsilon):
            raise ValueError("epsilon must be finite")

    @classmethod
    def bohmian(cls, **units) -> "VelocityLaw":
        return cls("bohmian", 0.0, **units)

    @classmethod
    def variant(cls, epsilon: float, **units) -> "VelocityLaw":
        return cls("variant", float(epsilon), **units)

    @property
    def divergence_free(self) -> bool:
        return self.kind != "linear" or self.epsilon == 0.0

    @property
    def offset(self) -> float:
        """Constant current that flows around the periodic domain."""
        return self.epsilon if self.kind == "variant" else 0.0

    def added_current(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "variant":
            return np.full_like(x, self.epsilon, dtype=float)
        if self.kind == "linear":
            return self.epsilon * x
        return np.zeros_like(x, dtype=float)

    def added_divergence(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "linear":
            return np.full_like(x, self.epsilon, dtype=float)
        return np.zeros_like(x, dtype=float)

    def current(self, psi: WaveFunction) -> np.ndarray:
        return quantum_flux(psi, self.hbar, self.mass).j + self.added_current(psi.grid.x)


@dataclass(frozen=True, eq=False)
class VelocityField:
    grid: GridSpec
    v: np.ndarray
    valid_mask: np.ndarray


def velocity_field(law: VelocityLaw, psi: WaveFunction, rho_min: float = RHO_MIN) -> VelocityField:
    """v = current/rho on the points where rho >= rho_min; NaN elsewhere."""
    rho = psi.rho
    mask = rho >= rho_min
    v = np.full(psi.grid.n, np.nan)
    v[mask] = law.current(psi)[mask] / rho[mask]
    return VelocityField(psi.grid, v, mask)


def _stack_velocity(law: VelocityLaw, amps: np.ndarray, grid: GridSpec, rho_min: float):
    """Velocity fields for a stack of (normalized) states; returns (v, mask)."""
    dpsi = spectral_derivative(amps, grid)
    rho = np.abs(amps) ** 2
    j = (law.hbar / law.mass) * np.imag(np.conj(amps) * dpsi) + law.added_current(grid.x)
    mask = rho >= rho_min
    v = np.where(mask, j / np.where(mask, rho, 1.0), np.nan)
    return v, mask


# --------------------------------------------------------------------------- interpolation


def cubic_weights(s: np.ndarray) -> np.ndarray:
    """Lagrange weights for nodes at -1, 0, 1, 2 evaluated at fractional offset s."""
    s = np.asarray(s, dtype=float)
    return np.stack([
        -s * (s - 1.0) * (s - 2.0) / 6.0,
        (s + 1.0) * (s - 1.0) * (s - 2.0) / 2.0,
        -(s + 1.0) * s * (s - 2.0) / 2.0,
        (s + 1.0) * s * (s - 1.0) / 6.0,
    ], axis=-1)


def stencil(grid: GridSpec, x: np.ndarray):
    """Periodic 4-point stencil indices (..., 4) and fractional offsets."""
    pos = (np.asarray(x, dtype=float) - grid.x_min) / grid.dx
    i = np.floor(pos)
    s = pos - i
    idx = (i.astype(np.int64)[..., None] + np.arange(-1, 3)) % grid.n
    return idx, s


def interpolate_velocity(field: VelocityField, x):
    """Cubic interpolation of v at x; ok is False where the stencil touches a masked point."""
    idx, s = stencil(field.grid, x)
    vals = field.v[idx]
    ok = np.all(field.valid_mask[idx], axis=-1)
    v = np.sum(np.where(ok[..., None], vals, 0.0) * cubic_weights(s), axis=-1)
    return v, ok


# --------------------------------------------------------------------------- trajectories


class _FieldCache:
    """Velocity fields (and CDFs) of a history, memoized by lattice index."""

    def __init__(self, law, provider, rho_min):
        self.law, self.provider, self.rho_min = law, provider, rho_min
        self._fields, self._cdfs = {}, {}

    def field(self, t: float) -> VelocityField:
        key = round(t, 12)
        if key not in self._fields:
            self._fields[key] = velocity_field(self.law, self.provider(t), self.rho_min)
        return self._fields[key]

    def cdf(self, t: float) -> np.ndarray:
        key = round(t, 12)
        if key not in self._cdfs:
            psi = self.provider(t)
            self._cdfs[key] = cell_cdf(psi.rho, psi.grid.dx)
        return self._cdfs[key]


def _positions_to_quantiles(grid, cdf, x):
    pos = (np.asarray(x) - grid.x_min) / grid.dx
    pos = np.mod(pos, grid.n)
    edges = np.arange(grid.n + 1, dtype=float)
    return np.interp(pos, edges, cdf)


def _quantiles_to_positions(grid, cdf, q):
    j = np.clip(np.searchsorted(cdf, q, side="right") - 1, 0, grid.n - 1)
    width = cdf[j + 1] - cdf[j]
    frac = np.where(width > 0, (q - cdf[j]) / np.where(width > 0, width, 1.0), 0.5)
    return grid.x_min + grid.dx * (j + frac)


def quantile_step(x, law: VelocityLaw, cache: _FieldCache, t0: float, dt: float):
    """Exact 1D transport step in quantile coordinates.

    For any continuity-compatible law on the periodic domain, the mass to the left
    of a trajectory changes only by the total current entering at x_min, which is
    the constant offset of the law (the flux itself vanishes at the edges).
    """
    grid = cache.provider(t0).grid
    q = _positions_to_quantiles(grid, cache.cdf(t0), x)
    q = np.mod(q + law.offset * dt, 1.0)
    return _quantiles_to_positions(grid, cache.cdf(t0 + dt), q)


def rk4_positions(x, velocity, t0: float, dt: float):
    """One classical RK4 step for dx/dt = velocity(x, t); returns (x_new, ok, max_stage_shift)."""
    k1, ok1 = velocity(x, t0)
    k2, ok2 = velocity(x + 0.5 * dt * k1, t0 + 0.5 * dt)
    k3, ok3 = velocity(x + 0.5 * dt * k2, t0 + 0.5 * dt)
    k4, ok4 = velocity(x + dt * k3, t0 + dt)
    ok = ok1 & ok2 & ok3 & ok4
    x_new = x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0
    shift = dt * np.max(np.abs(np.stack([k1, k2, k3, k4])), axis=0)
    return x_new, ok, shift


def advance_ensemble(x, law: VelocityLaw, psi_provider, t0: float, dt: float,
                     rho_min: float = RHO_MIN, tail_transit: bool = False,
                     max_shift: float | None = None, _cache: _FieldCache | None = None):
    """Advance many positions by one RK4 step; returns (x_new, censored).

    Stage velocities come from psi_provider at t0, t0+dt/2 and t0+dt with cubic
    interpolation between grid points.  A position whose stencil touches a point
    with rho < rho_min is censored, unless tail_transit is set, in which case the
    step is taken exactly in quantile coordinates instead (also used when a stage
    moves further than max_shift).  tail_transit requires a divergence-free law.
    """
    cache = _cache or _FieldCache(law, psi_provider, rho_min)
    x = np.atleast_1d(np.asarray(x, dtype=float))

    def velocity(pos, t):
        return interpolate_velocity(cache.field(t), pos)

    x_new, ok, shift = rk4_positions(x, velocity, t0, dt)
    if tail_transit:
        if not law.divergence_free:
            raise ValueError("tail transit needs a continuity-compatible law")
        redo = ~ok
        if max_shift is not None:
            redo |= shift > max_shift
        if np.any(redo):
            x_new = x_new.copy()
            x_new[redo] = quantile_step(x[redo], law, cache, t0, dt)
        return x_new, np.zeros(x.shape, dtype=bool)
    x_new = np.where(ok, x_new, np.nan)
    return x_new, ~ok


def advance_trajectory(x: float, law: VelocityLaw, psi_provider, t0: float, dt: float,
                       rho_min: float = RHO_MIN) -> float:
    """One RK4 step of dX/dt = v^psi(X, t) for a single trajectory."""
    x_new, censored = advance_ensemble(np.array([x]), law, psi_provider, t0, dt, rho_min)
    if censored[0]:
        raise TrajectoryCensored(f"trajectory from x={x} entered the rho < {rho_min:g} region")
    return float(x_new[0])


def transport(x, law: VelocityLaw, history: StateHistory, t_end: float, n_steps: int,
              rho_min: float = RHO_MIN, tail_transit: bool = False,
              max_shift: float | None = None):
    """Carry positions from history.t0 to t_end; history.h must equal half the step."""
    dt = (t_end - history.t0) / n_steps
    if abs(history.h - dt / 2) > 1e-12 * max(1.0, dt):
        raise ValueError("history lattice must have spacing dt/2")
    cache = _FieldCache(law, history, rho_min)
    x = np.asarray(x, dtype=float).copy()
    censored = np.zeros(x.shape, dtype=bool)
    for step in range(n_steps):
        t0 = history.t0 + step * dt
        live = ~censored
        x_live, cens = advance_ensemble(x[live], law, history, t0, dt, rho_min,
                                        tail_transit, max_shift, cache)
        x[live] = x_live
        censored[np.flatnonzero(live)[cens]] = True
    x[censored] = np.nan
    return x, censored


# --------------------------------------------------------------------------- continuity


def continuity_terms(psi: WaveFunction, pot: Potential, law: VelocityLaw, dt: float,
                     rho_min: float = RHO_MIN):
    """(d rho/dt, div(v rho), mask) at psi evolved by dt, via a centered time difference."""
    psi1 = evolve(psi, pot, dt)
    psi2 = evolve(psi1, pot, dt)
    drho_dt = (psi2.rho - psi.rho) / (2.0 * dt)
    j = quantum_flux(psi1, law.hbar, law.mass).j
    div = spectral_derivative(j, psi.grid) + law.added_divergence(psi.grid.x)
    return drho_dt, div, psi1.rho >= rho_min


def continuity_residual(psi: WaveFunction, pot: Potential, law: VelocityLaw, dt: float,
                        rho_min: float = RHO_MIN) -> float:
    """L-infinity residual of d rho/dt + div(v rho) over the valid mask."""
    drho_dt, div, mask = continuity_terms(psi, pot, law, dt, rho_min)
    return float(np.max(np.abs(drho_dt + div)[mask]))
