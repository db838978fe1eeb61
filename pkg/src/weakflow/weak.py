"""Weak position measurement with a Gaussian pointer, and the velocity protocol.

A run prepares psi0, draws the particle position X from |psi0|^2, reads the
pointer Y ~ |Phi(Y - X)|^2, replaces psi0 by the conditional state
psi0(x) Phi(Y - x), moves X along the chosen velocity law for a time tau and
records (Y, X(tau)).
"""
from __future__ import annotations

import functools
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from . import _bank
from .dynamics import Potential, VelocityField, VelocityLaw, split_step
from .grid import RHO_MIN, GridError, WaveFunction, inverse_cdf, normalize

BLOCK = 4096


class CensoringError(RuntimeError):
    """Too many protocol runs left the density-floor region."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records


@dataclass(frozen=True)
class PointerModel:
    """Real, even Gaussian pointer packet of spread sigma centred at zero."""

    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"pointer spread must be positive, got {self.sigma}")

    def amplitude(self, y):
        s = self.sigma
        return (2.0 * np.pi * s ** 2) ** -0.25 * np.exp(-np.asarray(y) ** 2 / (4.0 * s ** 2))

    def density(self, y):
        return self.amplitude(y) ** 2


def sample_pointer(pointer: PointerModel, x, seed):
    """Pointer reading(s) for particle position(s) x: Gaussian around x with std sigma."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=float)
    y = rng.normal(x, pointer.sigma, size=x.shape)
    return float(y) if y.ndim == 0 else y


def conditional_wavefunction(psi: WaveFunction, y: float, pointer: PointerModel) -> WaveFunction:
    """Normalized psi(x) Phi(y - x): the state after reading the pointer at y."""
    x = psi.grid.x
    mag = np.abs(psi.amp)
    support = mag > 0
    if not np.any(support):
        raise GridError("zero wave function")
    log_prod = np.full(psi.grid.n, -np.inf)
    log_prod[support] = np.log(mag[support]) + np.log(pointer.amplitude(0.0)) - (
        (y - x[support]) ** 2) / (4.0 * pointer.sigma ** 2)
    peak = log_prod.max()
    if 2.0 * peak < np.log(np.finfo(float).tiny):
        raise GridError(f"pointer reading y={y} has no overlap with psi")
    # work relative to the largest product value so nothing underflows spuriously
    amp = np.zeros(psi.grid.n, dtype=complex)
    amp[support] = np.exp(log_prod[support] - peak) * (psi.amp[support] / mag[support])
    return normalize(WaveFunction(psi.grid, amp))


@dataclass(frozen=True, eq=False)
class PointerMarginal:
    y: np.ndarray
    density: np.ndarray

    @property
    def dy(self) -> float:
        return float(self.y[1] - self.y[0])

    def total(self) -> float:
        return float(np.sum(self.density) * self.dy)

    def mean(self) -> float:
        return float(np.sum(self.y * self.density) / np.sum(self.density))


def pointer_marginal(psi: WaveFunction, pointer: PointerModel, reach: float = 10.0) -> PointerMarginal:
    """rho^Y = |psi|^2 convolved with |Phi|^2 on a grid extended by reach*sigma per side.

    The convolution is done spectrally on the zero-padded grid, which is exact for
    the band-limited interpolant of |psi|^2 and reduces to |psi|^2 as sigma -> 0.
    """
    grid = psi.grid
    pad = int(np.ceil(reach * pointer.sigma / grid.dx))
    n_ext = grid.n + 2 * pad
    rho = np.zeros(n_ext)
    rho[pad:pad + grid.n] = psi.rho
    k = 2.0 * np.pi * np.fft.rfftfreq(n_ext, d=grid.dx)
    out = np.fft.irfft(np.fft.rfft(rho) * np.exp(-0.5 * (pointer.sigma * k) ** 2), n=n_ext)
    y = grid.x_min + grid.dx * (np.arange(n_ext) - pad)
    return PointerMarginal(y, out)


# --------------------------------------------------------------------------- protocol


@dataclass(frozen=True)
class WeakRunRecord:
    y: float
    x_tau: float | None
    censored: bool
    trajectory_seed: int


@dataclass(frozen=True, eq=False)
class RunRecords:
    """Protocol output as parallel arrays, ordered by run index.

    x0 is the hidden initial position; it is kept for diagnostics and never used
    by the estimators.
    """

    y: np.ndarray
    x_tau: np.ndarray
    censored: np.ndarray
    trajectory_seed: np.ndarray
    x0: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.y)

    def __getitem__(self, i) -> WeakRunRecord:
        c = bool(self.censored[i])
        return WeakRunRecord(float(self.y[i]), None if c else float(self.x_tau[i]), c,
                             int(self.trajectory_seed[i]))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def censored_fraction(self) -> float:
        return float(np.mean(self.censored)) if len(self) else 0.0

    @classmethod
    def from_records(cls, records) -> "RunRecords":
        records = list(records)
        return cls(
            np.array([r.y for r in records], dtype=float),
            np.array([np.nan if r.x_tau is None else r.x_tau for r in records], dtype=float),
            np.array([r.censored for r in records], dtype=bool),
            np.array([r.trajectory_seed for r in records], dtype=np.uint64),
            np.full(len(records), np.nan),
        )

    @classmethod
    def concat(cls, parts) -> "RunRecords":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("y", "x_tau", "censored", "trajectory_seed", "x0")))


@dataclass(frozen=True, eq=False)
class ProtocolConfig:
    psi0: WaveFunction
    pot: Potential
    law: VelocityLaw
    pointer: PointerModel
    tau: float
    n_runs: int
    master_seed: int
    rk_steps: int = 50
    censor_bound: float = 0.01
    rho_min: float = RHO_MIN
    engine: str = "auto"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.rk_steps < 1:
            raise ValueError("rk_steps must be >= 1")
        if self.engine not in ("auto", "bank", "direct"):
            raise ValueError(f"unknown engine {self.engine!r}")


@functools.lru_cache(maxsize=64)
def _block_words(master_seed: int, block: int) -> np.ndarray:
    start = block * BLOCK
    return np.array([
        np.random.SeedSequence(master_seed, spawn_key=(i,)).generate_state(2, np.uint64)
        for i in range(start, start + BLOCK)
    ])


def run_words(master_seed: int, start: int, stop: int) -> np.ndarray:
    """Per-run 64-bit words (two per run) derived from (master_seed, run index)."""
    blocks = range(start // BLOCK, (stop - 1) // BLOCK + 1)
    words = np.concatenate([_block_words(int(master_seed), b) for b in blocks])
    off = blocks[0] * BLOCK
    return words[start - off:stop - off]


def _to_uniform(words: np.ndarray) -> np.ndarray:
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53


def initial_draws(config: ProtocolConfig, start: int, stop: int):
    """(trajectory_seed, X, Y) for runs start..stop-1."""
    words = run_words(config.master_seed, start, stop)
    x0 = inverse_cdf(config.psi0, _to_uniform(words[:, 0]))
    y = x0 + config.pointer.sigma * ndtri(_to_uniform(words[:, 1]))
    return words[:, 0], x0, y


@functools.lru_cache(maxsize=8)
def _bank_for(psi0, pot, sigma, tau, rk_steps):
    return _bank.ConditionalBank(psi0, pot, sigma, tau, rk_steps)


def _choose_engine(config: ProtocolConfig, bank, y) -> str:
    if config.engine != "auto":
        return config.engine
    return "bank" if bank.n_panels(y) <= _bank.MAX_PANELS else "direct"


def _run_block(config: ProtocolConfig, start: int, stop: int) -> RunRecords:
    seeds, x0, y = initial_draws(config, start, stop)
    bank = _bank_for(config.psi0, config.pot, config.pointer.sigma,
                     config.tau, config.rk_steps)
    if _choose_engine(config, bank, y) == "bank":
        x_tau, cens = bank.integrate(x0, y, config.law, config.rho_min)
    else:
        def cond(yi):
            return conditional_wavefunction(config.psi0, yi, config.pointer)

        x_tau, cens = _bank.integrate_direct(config.psi0, config.pot, config.pointer.sigma,
                                             config.tau, config.rk_steps, x0, y, config.law,
                                             config.rho_min, cond)
    return RunRecords(y, x_tau, cens, seeds, x0)


def default_workers() -> int:
    return max(1, int(os.environ.get("WEAKFLOW_WORKERS", "1")))


def run_protocol(config: ProtocolConfig, workers: int | None = None,
                 enforce_censor_bound: bool = True) -> RunRecords:
    """Run the weak-measurement-of-velocity protocol n_runs times.

    Runs are processed in fixed blocks of run indices, so the records are
    bit-identical for any number of workers.
    """
    workers = default_workers() if workers is None else max(1, int(workers))
    spans = [(s, min(s + BLOCK, config.n_runs)) for s in range(0, config.n_runs, BLOCK)]
    if workers == 1 or len(spans) == 1:
        parts = [_run_block(config, s, e) for s, e in spans]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_block, [config] * len(spans), *zip(*spans)))
    records = RunRecords.concat(parts)
    if enforce_censor_bound and records.censored_fraction > config.censor_bound:
        raise CensoringError(
            f"censored fraction {records.censored_fraction:.4f} exceeds the bound "
            f"{config.censor_bound:.4f}", records)
    return records


# --------------------------------------------------------------------------- weak values


def _weak_value_ratio(psi: WaveFunction, pot: Potential, tau: float, dt_max: float):
    n_steps = max(1, int(np.ceil(tau / dt_max - 1e-9)))
    h = tau / n_steps
    stack = np.stack([psi.amp, psi.grid.x * psi.amp])
    out = split_step(stack, pot, h, n_steps)
    return out[0], out[1]


def weak_value_velocity_field(psi: WaveFunction, pot: Potential, tau: float,
                              rho_min: float = RHO_MIN, dt_max: float = 1e-3) -> VelocityField:
    """tau^-1 [x - Re(<x|U(tau) X psi> / <x|U(tau) psi>)] on every grid point.

    Points where the post-selection amplitude |<x|U(tau)|psi>| falls below
    sqrt(rho_min) are masked.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    ev, evx = _weak_value_ratio(psi, pot, tau, dt_max)
    mask = np.abs(ev) ** 2 >= rho_min
    v = np.full(psi.grid.n, np.nan)
    v[mask] = (psi.grid.x[mask] - np.real(evx[mask] / ev[mask])) / tau
    return VelocityField(psi.grid, v, mask)


def analytic_weak_value_velocity(psi: WaveFunction, pot: Potential, tau: float, x,
                                 rho_min: float = RHO_MIN, dt_max: float = 1e-3):
    """Weak-value velocity at position(s) x (band-limited interpolation off the grid).

    Returns NaN where the post-selection amplitude is below the floor.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    grid = psi.grid
    ev, evx = _weak_value_ratio(psi, pot, tau, dt_max)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    phase = np.exp(1j * np.outer(x - grid.x_min, grid.k)) / grid.n
    a = phase @ np.fft.fft(ev)
    b = phase @ np.fft.fft(evx)
    ok = np.abs(a) ** 2 >= rho_min
    v = np.where(ok, (x - np.real(b / np.where(ok, a, 1.0))) / tau, np.nan)
    return v if v.size > 1 else float(v[0])


def richardson_weak_velocity(psi: WaveFunction, pot: Potential, taus=(4e-4, 2e-4, 1e-4),
                             rho_min: float = RHO_MIN) -> VelocityField:
    """tau -> 0 limit of the weak-value velocity from three halving values of tau."""
    t4, t2, t1 = taus
    if not (np.isclose(t4, 2 * t2) and np.isclose(t2, 2 * t1)):
        raise ValueError("taus must halve successively")
    fields = [weak_value_velocity_field(psi, pot, t, rho_min) for t in taus]
    mask = fields[0].valid_mask & fields[1].valid_mask & fields[2].valid_mask
    v = np.full(psi.grid.n, np.nan)
    v[mask] = (8.0 * fields[2].v[mask] - 6.0 * fields[1].v[mask] + fields[0].v[mask]) / 3.0
    return VelocityField(psi.grid, v, mask)
