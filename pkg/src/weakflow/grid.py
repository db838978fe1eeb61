"""Uniform periodic grids, wave functions on them, and the quantum flux.

Natural units are used throughout (hbar = m = 1 by default); both constants
stay explicit arguments wherever they enter a formula.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

HBAR = 1.0
MASS = 1.0

#: Velocities and conditional estimates are only reported where |psi|^2 >= RHO_MIN.
RHO_MIN = 1e-8

#: Edge amplitude allowed for packets, relative to the peak.
EDGE_DECAY = 1e-10


class GridError(ValueError):
    """Raised for invalid grids or states that violate a grid precondition."""


@dataclass(frozen=True)
class GridSpec:
    x_min: float
    x_max: float
    n: int

    def __post_init__(self):
        if not (self.x_max > self.x_min):
            raise GridError(f"empty domain: x_max={self.x_max} <= x_min={self.x_min}")
        if self.n < 16 or self.n & (self.n - 1):
            raise GridError(f"n={self.n} must be a power of two >= 16")

    @property
    def length(self) -> float:
        return self.x_max - self.x_min

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.n

    @property
    def x(self) -> np.ndarray:
        return self.x_min + self.dx * np.arange(self.n)

    @property
    def k(self) -> np.ndarray:
        """Angular wavenumbers in numpy FFT order."""
        return 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)


def make_grid(x_min: float, x_max: float, n: int) -> GridSpec:
    return GridSpec(float(x_min), float(x_max), int(n))


@dataclass(frozen=True, eq=False)
class WaveFunction:
    grid: GridSpec
    amp: np.ndarray

    def __post_init__(self):
        amp = np.array(self.amp, dtype=complex)
        if amp.shape != (self.grid.n,):
            raise GridError(f"amplitude shape {amp.shape} does not match grid size {self.grid.n}")
        amp.setflags(write=False)
        object.__setattr__(self, "amp", amp)

    @property
    def rho(self) -> np.ndarray:
        return np.abs(self.amp) ** 2

    def norm(self) -> float:
        return float(np.sum(self.rho) * self.grid.dx)

    def mean_position(self) -> float:
        rho = self.rho
        return float(np.sum(self.grid.x * rho) / np.sum(rho))

    def std_position(self) -> float:
        rho = self.rho
        m = np.sum(self.grid.x * rho) / np.sum(rho)
        return float(np.sqrt(np.sum((self.grid.x - m) ** 2 * rho) / np.sum(rho)))

    def edge_ratio(self) -> float:
        """Largest amplitude at the two domain edges relative to the peak."""
        a = np.abs(self.amp)
        return float(max(a[0], a[-1]) / a.max())

    def phase(self) -> np.ndarray:
        return np.angle(self.amp)

    def conj(self) -> "WaveFunction":
        return WaveFunction(self.grid, np.conj(self.amp))

    def __mul__(self, factor) -> "WaveFunction":
        return WaveFunction(self.grid, self.amp * factor)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class FluxField:
    grid: GridSpec
    j: np.ndarray
    rho: np.ndarray = field(repr=False)


def spectral_derivative(f: np.ndarray, grid: GridSpec, axis: int = -1) -> np.ndarray:
    """First derivative on the periodic grid; the Nyquist mode is dropped."""
    k = grid.k
    if grid.n % 2 == 0:
        k = k.copy()
        k[grid.n // 2] = 0.0
    shape = [1] * np.ndim(f)
    shape[axis] = grid.n
    out = np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(f, axis=axis), axis=axis)
    if np.isrealobj(f):
        return out.real
    return out


def normalize(psi: WaveFunction) -> WaveFunction:
    nrm = psi.norm()
    if not nrm > 0.0 or not np.isfinite(nrm):
        raise GridError("cannot normalize a zero-norm wave function")
    return WaveFunction(psi.grid, psi.amp / np.sqrt(nrm))


def gaussian_packet(grid: GridSpec, x0: float, s0: float, k0: float = 0.0) -> WaveFunction:
    """Normalized psi(x) ~ exp(-(x-x0)^2/(4 s0^2) + i k0 x); s0 is the std of |psi|^2."""
    if not s0 > 0:
        raise GridError(f"packet width must be positive, got s0={s0}")
    x = grid.x
    psi = WaveFunction(grid, np.exp(-((x - x0) ** 2) / (4.0 * s0 ** 2) + 1j * k0 * x))
    if psi.edge_ratio() > EDGE_DECAY:
        raise GridError(
            f"packet (x0={x0}, s0={s0}) does not decay at the domain edges "
            f"(edge/peak = {psi.edge_ratio():.3g} > {EDGE_DECAY:g})"
        )
    return normalize(psi)


def spreading_gaussian(grid: GridSpec, x0: float, s0: float, k0: float = 0.0, t: float = 0.0,
                       hbar: float = HBAR, mass: float = MASS) -> WaveFunction:
    """Free Gaussian packet gaussian_packet(x0, s0, k0) evolved in closed form to time t."""
    if not s0 > 0:
        raise GridError(f"packet width must be positive, got s0={s0}")
    x = grid.x
    st = s0 ** 2 * (1.0 + 1j * hbar * t / (2.0 * mass * s0 ** 2))
    vg = hbar * k0 / mass
    amp = np.exp(-((x - x0 - vg * t) ** 2) / (4.0 * st) + 1j * k0 * (x - 0.5 * vg * t))
    psi = WaveFunction(grid, amp)
    if psi.edge_ratio() > EDGE_DECAY:
        raise GridError(f"spreading packet leaves the domain by t={t}")
    return normalize(psi)


def superposition(grid: GridSpec, terms) -> WaveFunction:
    """Renormalized sum of weighted Gaussian packets; terms are (weight, x0, s0, k0)."""
    amp = np.zeros(grid.n, dtype=complex)
    for weight, x0, s0, k0 in terms:
        amp += weight * gaussian_packet(grid, x0, s0, k0).amp
    return normalize(WaveFunction(grid, amp))


def quantum_flux(psi: WaveFunction, hbar: float = HBAR, mass: float = MASS) -> FluxField:
    """j = (hbar/m) Im(conj(psi) dpsi/dx), with the derivative taken spectrally."""
    dpsi = spectral_derivative(psi.amp, psi.grid)
    j = (hbar / mass) * np.imag(np.conj(psi.amp) * dpsi)
    return FluxField(psi.grid, j, psi.rho)


def cell_cdf(rho: np.ndarray, dx: float) -> np.ndarray:
    """CDF at the n+1 cell edges x_0..x_n of the periodic grid (trapezoid cell masses)."""
    cells = 0.5 * (rho + np.roll(rho, -1)) * dx
    cdf = np.concatenate([[0.0], np.cumsum(cells)])
    return cdf / cdf[-1]


def inverse_cdf(psi: WaveFunction, u: np.ndarray) -> np.ndarray:
    """Map uniforms in [0, 1) to positions distributed as |psi|^2.

    The CDF is tabulated at the grid points and interpolated linearly inside each
    cell (including the wrap-around cell [x_{n-1}, x_max)).
    """
    grid = psi.grid
    cdf = cell_cdf(psi.rho, grid.dx)
    u = np.asarray(u, dtype=float)
    j = np.clip(np.searchsorted(cdf, u, side="right") - 1, 0, grid.n - 1)
    width = cdf[j + 1] - cdf[j]
    frac = np.where(width > 0, (u - cdf[j]) / np.where(width > 0, width, 1.0), 0.5)
    return grid.x_min + grid.dx * (j + frac)


def sample_positions(psi: WaveFunction, n_samples: int, seed) -> np.ndarray:
    """i.i.d. Born-rule draws from |psi|^2; identical output for identical seeds."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    return inverse_cdf(psi, rng.random(n_samples))


def density_cdf(psi: WaveFunction):
    """Callable CDF of |psi|^2 consistent with inverse_cdf (for KS tests)."""
    grid = psi.grid
    cdf = cell_cdf(psi.rho, grid.dx)
    edges = grid.x_min + grid.dx * np.arange(grid.n + 1)

    def F(x):
        return np.interp(x, edges, cdf, left=0.0, right=1.0)

    return F
