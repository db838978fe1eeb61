"""Closed-form reference values (hbar = m = 1) used to check the numerics.

Nothing here touches the split-operator propagator or the spectral flux, so the
values stay independent of the code paths they are compared against.
"""
from __future__ import annotations

import numpy as np
from scipy import stats


def free_gaussian_width(s0: float, t: float) -> float:
    """Std of |psi_t|^2 for a free packet of initial std s0."""
    return float(np.sqrt(s0 ** 2 + (t / (2.0 * s0)) ** 2))


def free_gaussian_density(x, x0: float, s0: float, k0: float, t: float):
    s = free_gaussian_width(s0, t)
    return stats.norm.pdf(x, loc=x0 + k0 * t, scale=s)


def free_gaussian_cdf(x, x0: float, s0: float, k0: float, t: float):
    return stats.norm.cdf(x, loc=x0 + k0 * t, scale=free_gaussian_width(s0, t))


def free_gaussian_velocity(x, x0: float, s0: float, k0: float, t: float):
    """Bohmian velocity of the spreading packet: k0 + (x - x0 - k0 t) t / (4 s0^4 + t^2)."""
    x = np.asarray(x, dtype=float)
    return k0 + (x - x0 - k0 * t) * t / (4.0 * s0 ** 4 + t ** 2)


def free_gaussian_trajectory(x_start, x0: float, s0: float, k0: float, t_start: float, t: float):
    """Bohmian trajectory through x_start at t_start, evaluated at t (integrated velocity)."""
    def stretch(tt):
        return np.sqrt(1.0 + (tt / (2.0 * s0 ** 2)) ** 2)

    x_start = np.asarray(x_start, dtype=float)
    offset = x_start - x0 - k0 * t_start
    return x0 + k0 * t + offset * stretch(t) / stretch(t_start)


def coherent_center(x0: float, p0: float, omega: float, t: float):
    """(position, momentum) of a harmonic coherent state started at (x0, p0)."""
    c, s = np.cos(omega * t), np.sin(omega * t)
    return x0 * c + p0 / omega * s, p0 * c - x0 * omega * s


def coherent_density(x, x0: float, p0: float, omega: float, t: float):
    xc, _ = coherent_center(x0, p0, omega, t)
    return stats.norm.pdf(x, loc=xc, scale=np.sqrt(1.0 / (2.0 * omega)))


def coherent_velocity(x, x0: float, p0: float, omega: float, t: float):
    _, pc = coherent_center(x0, p0, omega, t)
    return np.full_like(np.asarray(x, dtype=float), pc)


def gaussian_peak_density(s: float) -> float:
    return float(1.0 / np.sqrt(2.0 * np.pi * s ** 2))


def variant_velocity_at_center(epsilon: float, s0: float = 1.0) -> float:
    """(j + eps)/rho at the center of a real Gaussian: eps * sqrt(2 pi) * s0."""
    return float(epsilon / gaussian_peak_density(s0))


def gaussian_product_width(s_a: float, s_b: float) -> float:
    """Amplitude-width of exp(-x^2/4s_a^2) * exp(-x^2/4s_b^2), as a density std."""
    return float(1.0 / np.sqrt(1.0 / s_a ** 2 + 1.0 / s_b ** 2))


def pointer_marginal_gaussian(y, mean: float, s: float, sigma: float):
    """rho^Y for a Gaussian |psi|^2 of std s and pointer spread sigma."""
    return stats.norm.pdf(y, loc=mean, scale=np.sqrt(s ** 2 + sigma ** 2))


def gaussian_multiplier_density(x, y, sigma: float):
    """|Phi(y - x)|^2 for the Gaussian pointer packet."""
    return stats.norm.pdf(np.asarray(x) - y, scale=sigma)


def multiplied_density(x, s: float, mean: float, y: float, sigma: float):
    """Normalized rho(x)|Phi(y-x)|^2 for Gaussian rho: a Gaussian again."""
    var = 1.0 / (1.0 / s ** 2 + 1.0 / sigma ** 2)
    centre = var * (mean / s ** 2 + y / sigma ** 2)
    return stats.norm.pdf(x, loc=centre, scale=np.sqrt(var))


def multiplier_density_gradient(x, y, sigma: float):
    """d/dx |Phi(y - x)|^2 = |Phi(y-x)|^2 (y - x)/sigma^2."""
    x = np.asarray(x, dtype=float)
    return gaussian_multiplier_density(x, y, sigma) * (y - x) / sigma ** 2


def richardson3(v4, v2, v1):
    """Eliminate O(tau) and O(tau^2) from values at 4 tau, 2 tau and tau."""
    return (8.0 * v1 - 6.0 * v2 + v4) / 3.0


ORACLES = {
    "free-gaussian-width": lambda: {"s0": 1.0, "t": 1.0, "width": free_gaussian_width(1.0, 1.0)},
    "free-gaussian-velocity": lambda: {
        "t": 0.5, "x": [-2.0, -1.0, 0.0, 1.0, 2.0],
        "v": free_gaussian_velocity([-2.0, -1.0, 0.0, 1.0, 2.0], 0.0, 1.0, 0.0, 0.5).tolist(),
    },
    "free-gaussian-trajectory": lambda: {
        "x_start": 1.0, "t": 1.0,
        "x_end": float(free_gaussian_trajectory(1.0, 0.0, 1.0, 0.0, 0.0, 1.0)),
    },
    "variant-center-velocity": lambda: {
        "epsilon": 0.2, "s0": 1.0, "v0": variant_velocity_at_center(0.2, 1.0),
    },
    "gaussian-product-width": lambda: {"s_a": 1.0, "s_b": 1.0, "width": gaussian_product_width(1.0, 1.0)},
    "pointer-marginal-variance": lambda: {"s": 1.0, "sigma": 2.0, "variance": 1.0 + 4.0},
    "coherent-period": lambda: {"omega": 1.0, "period": 2.0 * np.pi},
    "ks-critical-1pct": lambda: {"coefficient": 1.63, "n": 100000, "critical": 1.63 / np.sqrt(1e5)},
}
