"""Batched trajectory integration for protocol runs.

Every run evolves its own conditional state psi0(x) Phi(Y - x).  For the Gaussian
pointer that state is base(x) * exp(a (x - c)) with a = (Y - c) / (2 sigma^2), so
the evolved states of all runs are an analytic family in the single scalar a.  The
bank evolves a handful of Chebyshev nodes in a once and rebuilds any run's state by
barycentric interpolation; the direct path (one split-operator history per run) is
kept for cross-checks and for pointer spreads too narrow for interpolation.
"""
from __future__ import annotations

import numpy as np

from .dynamics import Potential, VelocityLaw, cubic_weights, split_step
from .grid import GridSpec, WaveFunction, spectral_derivative

NODES = 12
#: Panels are sized so that |a - a_center| * |x - c| <= PANEL_REACH on the support.
PANEL_REACH = 1.0
SUPPORT_TOL = 1e-14
WINDOW_HALF = 3
#: Above this many panels the direct path is cheaper.
MAX_PANELS = 64


def _cheb_nodes(center: float, half: float, m: int):
    k = np.arange(m)
    nodes = center + half * np.cos(np.pi * k / (m - 1))
    w = (-1.0) ** k
    w[0] *= 0.5
    w[-1] *= 0.5
    return nodes, w


def barycentric_matrix(a: np.ndarray, nodes: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Rows of interpolation weights so that f(a) ~= W @ f(nodes)."""
    diff = a[:, None] - nodes[None, :]
    exact = diff == 0.0
    diff = np.where(exact, 1.0, diff)
    terms = w / diff
    W = terms / terms.sum(axis=1, keepdims=True)
    hit = exact.any(axis=1)
    if np.any(hit):
        W[hit] = exact[hit].astype(float)
    return W


def _stencil_velocity(law: VelocityLaw, psi4, dpsi4, x4, norm, rho_min):
    """Velocity and validity at stencil points of unnormalized states with norm `norm`."""
    rho_u = np.abs(psi4) ** 2
    valid = np.all(rho_u >= rho_min * norm[:, None], axis=1)
    safe = np.where(rho_u > 0, rho_u, 1.0)
    j_u = (law.hbar / law.mass) * np.imag(np.conj(psi4) * dpsi4)
    v4 = (j_u + law.added_current(x4) * norm[:, None]) / safe
    return np.where(valid[:, None], v4, 0.0), valid


def _rk_integrate(x0, n_steps, dt, stencil_fn, law, norm, rho_min):
    """RK4 in time-lattice units: stage m-indices 2k, 2k+1, 2k+1, 2k+2.

    Returns (x, censored, exited); exited runs left their stencil source and must
    be redone by the caller.
    """
    x = np.array(x0, dtype=float)
    censored = np.zeros(x.shape, dtype=bool)
    exited = np.zeros(x.shape, dtype=bool)

    def vel(pos, m):
        psi4, dpsi4, x4, s, inwin = stencil_fn(m, pos)
        v4, valid = _stencil_velocity(law, psi4, dpsi4, x4, norm, rho_min)
        v = np.sum(v4 * cubic_weights(s), axis=1)
        return np.where(inwin & valid, v, 0.0), valid, inwin

    for k in range(n_steps):
        k1, ok1, in1 = vel(x, 2 * k)
        k2, ok2, in2 = vel(x + 0.5 * dt * k1, 2 * k + 1)
        k3, ok3, in3 = vel(x + 0.5 * dt * k2, 2 * k + 1)
        k4, ok4, in4 = vel(x + dt * k3, 2 * k + 2)
        inwin = in1 & in2 & in3 & in4
        ok = ok1 & ok2 & ok3 & ok4
        exited |= ~inwin & ~censored
        censored |= inwin & ~ok & ~exited
        x = np.where(censored | exited, x, x + dt * (k1 + 2.0 * k2 + 2.0 * k3 + k4) / 6.0)
    return x, censored, exited


class _Panel:
    def __init__(self, bank: "ConditionalBank", center: float):
        self.nodes, self.w = _cheb_nodes(center, bank.half_width, bank.n_nodes)
        grid = bank.grid
        states = bank.base[None, :] * np.exp(self.nodes[:, None] * bank.u[None, :])
        self.log_norm = np.log(np.sum(np.abs(states) ** 2, axis=1) * grid.dx)
        T = 2 * bank.n_steps + 1
        S = np.empty((T, grid.n, bank.n_nodes), dtype=complex)
        D = np.empty_like(S)
        cur = states
        for m in range(T):
            if m:
                cur = split_step(cur, bank.pot, bank.h)
            S[m] = cur.T
            D[m] = spectral_derivative(cur, grid).T
        self.S, self.D = S, D


class ConditionalBank:
    """Evolved conditional states for all pointer readings of one protocol setting."""

    def __init__(self, psi0: WaveFunction, pot: Potential, sigma: float, tau: float,
                 n_steps: int, n_nodes: int = NODES):
        self.grid: GridSpec = psi0.grid
        self.pot = pot
        self.sigma = float(sigma)
        self.n_steps = int(n_steps)
        self.h = tau / (2 * n_steps)
        self.dt = tau / n_steps
        self.n_nodes = n_nodes
        self.center = psi0.mean_position()
        self.u = self.grid.x - self.center
        base = psi0.amp * np.exp(-(self.u ** 2) / (4.0 * self.sigma ** 2))
        scale = np.abs(base).max()
        self.base = base / scale
        support = np.abs(self.base) >= SUPPORT_TOL
        self.reach = float(np.max(np.abs(self.u[support])))
        self.half_width = PANEL_REACH / self.reach
        self._panels: dict[int, _Panel] = {}

    def a_of(self, y):
        return (np.asarray(y, dtype=float) - self.center) / (2.0 * self.sigma ** 2)

    def panel_index(self, a):
        return np.floor(np.asarray(a) / (2.0 * self.half_width)).astype(np.int64)

    def n_panels(self, y) -> int:
        return len(np.unique(self.panel_index(self.a_of(y))))

    def panel(self, p: int) -> _Panel:
        if p not in self._panels:
            self._panels[p] = _Panel(self, (p + 0.5) * 2.0 * self.half_width)
        return self._panels[p]

    def integrate(self, x0, y, law: VelocityLaw, rho_min: float):
        """x(tau) and censor flags for runs starting at x0 with pointer readings y."""
        x0 = np.asarray(x0, dtype=float)
        a = self.a_of(y)
        pidx = self.panel_index(a)
        x_out = np.full(x0.shape, np.nan)
        cens = np.zeros(x0.shape, dtype=bool)
        for p in np.unique(pidx):
            rows = np.flatnonzero(pidx == p)
            panel = self.panel(int(p))
            W = barycentric_matrix(a[rows], panel.nodes, panel.w)
            norm = np.exp(W @ panel.log_norm)
            xr, cr = self._integrate_panel(panel, W, norm, x0[rows], law, rho_min)
            x_out[rows], cens[rows] = xr, cr
        x_out[cens] = np.nan
        return x_out, cens

    def _integrate_panel(self, panel, W, norm, x0, law, rho_min):
        grid = self.grid
        n, L = grid.n, 2 * WINDOW_HALF + 2
        cell0 = np.floor((x0 - grid.x_min) / grid.dx).astype(np.int64)
        start = cell0 - WINDOW_HALF
        T = panel.S.shape[0]
        psi_w = np.empty((len(x0), T, L), dtype=complex)
        dpsi_w = np.empty_like(psi_w)
        for cell in np.unique(cell0):
            rows = np.flatnonzero(cell0 == cell)
            win = (cell - WINDOW_HALF + np.arange(L)) % n
            Sw = panel.S[:, win, :].reshape(T * L, -1)
            Dw = panel.D[:, win, :].reshape(T * L, -1)
            psi_w[rows] = (W[rows] @ Sw.T).reshape(len(rows), T, L)
            dpsi_w[rows] = (W[rows] @ Dw.T).reshape(len(rows), T, L)
        offsets = np.arange(-1, 3)

        def window_stencil(m, pos):
            p = (pos - grid.x_min) / grid.dx
            i = np.floor(p)
            s = p - i
            local = i.astype(np.int64) - start
            inwin = (local >= 1) & (local <= L - 3)
            li = np.clip(local, 1, L - 3)[:, None] + offsets
            psi4 = np.take_along_axis(psi_w[:, m, :], li, axis=1)
            dpsi4 = np.take_along_axis(dpsi_w[:, m, :], li, axis=1)
            x4 = grid.x_min + grid.dx * (i[:, None] + offsets)
            return psi4, dpsi4, x4, s, inwin

        x, cens, exited = _rk_integrate(x0, self.n_steps, self.dt, window_stencil, law, norm,
                                        rho_min)
        if np.any(exited):
            rows = np.flatnonzero(exited)
            Wr, nr = W[rows], norm[rows]

            def gather_stencil(m, pos):
                p = (pos - grid.x_min) / grid.dx
                i = np.floor(p)
                s = p - i
                idx = (i.astype(np.int64)[:, None] + offsets) % n
                psi4 = np.einsum("bsm,bm->bs", panel.S[m][idx], Wr)
                dpsi4 = np.einsum("bsm,bm->bs", panel.D[m][idx], Wr)
                x4 = grid.x_min + grid.dx * (i[:, None] + offsets)
                # positions more than half a domain away would alias around the ring
                inwin = np.abs(p - (x0[rows] - grid.x_min) / grid.dx) < n / 2 - 2
                return psi4, dpsi4, x4, s, inwin

            xr, cr, er = _rk_integrate(x0[rows], self.n_steps, self.dt, gather_stencil, law,
                                       nr, rho_min)
            x[rows] = xr
            cens[rows] = cr | er
        return x, cens


def integrate_direct(psi0: WaveFunction, pot: Potential, sigma: float, tau: float, n_steps: int,
                     x0, y, law: VelocityLaw, rho_min: float, conditional):
    """Reference path: one split-operator history of psi0*Phi(Y-x) per run."""
    grid = psi0.grid
    x0 = np.asarray(x0, dtype=float)
    y = np.asarray(y, dtype=float)
    states = np.stack([conditional(yi).amp for yi in y]) if len(y) else np.zeros((0, grid.n))
    h = tau / (2 * n_steps)
    history = [states]
    derivs = [spectral_derivative(states, grid)]
    for _ in range(2 * n_steps):
        history.append(split_step(history[-1], pot, h))
        derivs.append(spectral_derivative(history[-1], grid))
    norm = np.ones(len(x0))
    offsets = np.arange(-1, 3)
    rows_all = np.arange(len(x0))[:, None]

    def stencil_fn(m, pos):
        p = (pos - grid.x_min) / grid.dx
        i = np.floor(p)
        s = p - i
        idx = (i.astype(np.int64)[:, None] + offsets) % grid.n
        x4 = grid.x_min + grid.dx * (i[:, None] + offsets)
        inwin = np.abs(p - (x0 - grid.x_min) / grid.dx) < grid.n / 2 - 2
        return history[m][rows_all, idx], derivs[m][rows_all, idx], x4, s, inwin

    x, cens, exited = _rk_integrate(x0, n_steps, tau / n_steps, stencil_fn, law, norm, rho_min)
    cens |= exited
    x[cens] = np.nan
    return x, cens
