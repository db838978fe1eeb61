"""Post-selection binning, conditional means and the velocity estimator."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import VelocityLaw, interpolate_velocity, propagate, velocity_field
from .grid import RHO_MIN, WaveFunction
from .weak import CensoringError, PointerModel, ProtocolConfig, RunRecords, run_protocol

N_MIN = 200
DELTA_CELLS = 4


@dataclass(frozen=True, eq=False)
class BinSpec:
    centers: np.ndarray
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError("bin width must be positive")
        c = np.asarray(self.centers, dtype=float)
        if c.ndim != 1 or len(c) == 0:
            raise ValueError("need at least one bin center")
        if len(c) > 1 and np.min(np.diff(np.sort(c))) < self.width * (1 - 1e-12):
            raise ValueError("bins overlap")
        object.__setattr__(self, "centers", c)

    def assign(self, x) -> np.ndarray:
        """Bin index of each position, -1 if it falls in no bin."""
        x = np.asarray(x, dtype=float)
        order = np.argsort(self.centers)
        lo = self.centers[order] - 0.5 * self.width
        j = np.searchsorted(lo, x, side="right") - 1
        jc = np.clip(j, 0, len(lo) - 1)
        inside = (j >= 0) & (x < lo[jc] + self.width) & np.isfinite(x)
        return np.where(inside, order[jc], -1)


def make_bins(psi_tau: WaveFunction, width: float | None = None,
              rho_min: float = RHO_MIN) -> BinSpec:
    """Bins of width Delta centred on the lattice k*Delta where |psi_tau|^2 >= rho_min.

    The default width is four grid cells.
    """
    grid = psi_tau.grid
    width = DELTA_CELLS * grid.dx if width is None else float(width)
    k = np.arange(math.ceil(grid.x_min / width + 0.5), math.floor(grid.x_max / width - 0.5) + 1)
    centers = k * width
    rho = np.interp(centers, grid.x, psi_tau.rho)
    centers = centers[rho >= rho_min]
    return BinSpec(centers, width)


@dataclass(frozen=True, eq=False)
class ConditionalEstimate:
    """Per-bin statistics of the pointer reading among runs whose X(tau) fell in the bin.

    mean_x is the mean strong-measurement position inside the bin; bins with fewer
    than n_min runs are flagged unreliable, and bins with fewer than two runs carry
    NaN statistics.
    """

    bins: BinSpec
    n: np.ndarray
    mean_x: np.ndarray
    mean_Y: np.ndarray
    stderr_Y: np.ndarray
    std_Y: np.ndarray
    reliable: np.ndarray
    censored_fraction: float
    n_censored: int


def conditional_mean_by_bin(records: RunRecords, bins: BinSpec, n_min: int = N_MIN
                            ) -> ConditionalEstimate:
    live = ~np.asarray(records.censored, dtype=bool)
    if not np.any(live):
        raise ValueError("no uncensored records")
    x = records.x_tau[live]
    y = records.y[live]
    idx = bins.assign(x)
    keep = idx >= 0
    idx, x, y = idx[keep], x[keep], y[keep]
    m = len(bins.centers)
    n = np.bincount(idx, minlength=m)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_x = np.bincount(idx, x, m) / n
        mean_y = np.bincount(idx, y, m) / n
        resid = y - mean_y[idx]
        var = np.bincount(idx, resid ** 2, m) / (n - 1)
    enough = n >= 2
    std = np.where(enough, np.sqrt(np.where(enough, var, 0.0)), np.nan)
    mean_x = np.where(n > 0, mean_x, np.nan)
    mean_y = np.where(n > 0, mean_y, np.nan)
    stderr = np.where(enough, std / np.sqrt(np.maximum(n, 1)), np.nan)
    n_cens = int(np.sum(~live))
    return ConditionalEstimate(bins, n, mean_x, mean_y, stderr, std, n >= n_min,
                               n_cens / len(records), n_cens)


@dataclass(frozen=True, eq=False)
class VelocityEstimate:
    centers: np.ndarray
    x_mean: np.ndarray
    n: np.ndarray
    v_hat: np.ndarray
    stderr_v: np.ndarray
    reliable: np.ndarray
    tau: float


def weak_velocity_estimate(cond: ConditionalEstimate, tau: float) -> VelocityEstimate:
    """v_hat = (mean X(tau) - mean Y)/tau per bin, with stderr_Y/tau as its error.

    Using the in-bin mean of X(tau) rather than the bin centre removes the
    O(Delta/tau) offset that a sloped density would otherwise put into v_hat.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    v = (cond.mean_x - cond.mean_Y) / tau
    return VelocityEstimate(cond.bins.centers, cond.mean_x, cond.n, v, cond.stderr_Y / tau,
                            cond.reliable.copy(), float(tau))


def reference_velocity(law: VelocityLaw, psi: WaveFunction, x, rho_min: float = RHO_MIN):
    """law's velocity of psi interpolated to x; NaN outside the valid region."""
    v, ok = interpolate_velocity(velocity_field(law, psi, rho_min), np.asarray(x, dtype=float))
    return np.where(ok, v, np.nan)


def estimate_from_records(config: ProtocolConfig, records: RunRecords, delta: float | None = None,
                          n_min: int = N_MIN, dt: float = 1e-3):
    """Bins on |psi0(tau)|^2, conditional means and velocities for one protocol run."""
    psi_tau = propagate(config.psi0, config.pot, config.tau, min(dt, config.tau))
    bins = make_bins(psi_tau, delta, config.rho_min)
    cond = conditional_mean_by_bin(records, bins, n_min)
    return cond, weak_velocity_estimate(cond, config.tau)


# --------------------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("sigma", "tau", "delta", "bin_center", "x_mean", "n", "mean_Y", "stderr_Y",
                 "v_hat", "stderr_v", "v_bohmian_ref", "v_law_ref", "reliable_flag",
                 "cell_failed")


@dataclass(frozen=True, eq=False)
class SweepCell:
    sigma: float
    tau: float
    delta: float
    estimate: VelocityEstimate | None
    v_bohmian: np.ndarray | None
    v_law: np.ndarray | None
    censored_fraction: float
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.estimate is None

    def max_bias(self, against: str = "bohmian") -> float:
        """max |v_hat - v_ref| over reliable bins (NaN for failed cells)."""
        if self.failed:
            return float("nan")
        ref = self.v_bohmian if against == "bohmian" else self.v_law
        ok = self.estimate.reliable & np.isfinite(ref)
        if not np.any(ok):
            return float("nan")
        return float(np.max(np.abs(self.estimate.v_hat - ref)[ok]))

    def max_excess(self, against: str = "bohmian") -> float:
        """max over reliable bins of |v_hat - v_ref| minus 4 stderr (noise-aware bias)."""
        if self.failed:
            return float("nan")
        ref = self.v_bohmian if against == "bohmian" else self.v_law
        ok = self.estimate.reliable & np.isfinite(ref)
        if not np.any(ok):
            return float("nan")
        e = self.estimate
        return float(np.max((np.abs(e.v_hat - ref) - 4.0 * e.stderr_v)[ok]))


@dataclass(frozen=True, eq=False)
class SweepTable:
    cells: list

    def rows(self):
        for c in self.cells:
            if c.failed:
                yield (c.sigma, c.tau, c.delta) + (math.nan,) * 10 + (True,)
                continue
            e = c.estimate
            for k in range(len(e.centers)):
                yield (c.sigma, c.tau, c.delta, float(e.centers[k]), float(e.x_mean[k]),
                       int(e.n[k]), float(e.x_mean[k] - e.v_hat[k] * e.tau),
                       float(e.stderr_v[k] * e.tau), float(e.v_hat[k]), float(e.stderr_v[k]),
                       float(c.v_bohmian[k]), float(c.v_law[k]), bool(e.reliable[k]), False)

    def cell(self, sigma=None, tau=None, delta=None) -> SweepCell:
        for c in self.cells:
            if ((sigma is None or np.isclose(c.sigma, sigma)) and
                    (tau is None or np.isclose(c.tau, tau)) and
                    (delta is None or np.isclose(c.delta, delta))):
                return c
        raise KeyError((sigma, tau, delta))


def convergence_sweep(base: ProtocolConfig, sigmas, taus, deltas, workers: int | None = None,
                      n_min: int = N_MIN, runner=run_protocol) -> SweepTable:
    """Run the protocol for every (sigma, tau) and estimate at every Delta.

    All cells share base.master_seed, so the same run indices see the same
    uniform draws (common random numbers) and differences between cells are not
    dominated by independent noise.  A cell whose protocol fails is kept with its
    failure flag and error message.
    """
    sigmas, taus, deltas = (list(np.atleast_1d(a)) for a in (sigmas, taus, deltas))
    if not (sigmas and taus and deltas):
        raise ValueError("sweep axes must be non-empty")
    bohm = VelocityLaw.bohmian(hbar=base.law.hbar, mass=base.law.mass)
    cells = []
    for sigma in sigmas:
        for tau in taus:
            cfg = replace(base, pointer=PointerModel(float(sigma)), tau=float(tau))
            try:
                records = runner(cfg, workers=workers)
            except (CensoringError, ValueError, ArithmeticError) as err:
                for delta in deltas:
                    cells.append(SweepCell(float(sigma), float(tau), float(delta), None, None,
                                           None, math.nan, f"{type(err).__name__}: {err}"))
                continue
            for delta in deltas:
                _, est = estimate_from_records(cfg, records, float(delta), n_min)
                where = np.where(np.isfinite(est.x_mean), est.x_mean, est.centers)
                cells.append(SweepCell(
                    float(sigma), float(tau), float(delta), est,
                    reference_velocity(bohm, cfg.psi0, where, cfg.rho_min),
                    reference_velocity(cfg.law, cfg.psi0, where, cfg.rho_min),
                    records.censored_fraction))
    return SweepTable(cells)


def loglog_slope(x, y) -> float:
    """Least-squares slope of log y against log x."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
