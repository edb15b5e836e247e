"""
Numerical ground truth for the stationary waiting-time law.

Two engines that share nothing with the transform solver:

- `grid_solve` discretizes the integral equation

      f(x) = pi0 G(1-x) + int_0^{1-x} G(1-x-z) f(z) dz,   pi0 + int f = 1

  on a uniform grid and iterates it to a fixed point;
- `simulate` runs the recursion ``W' = (R - P - W)^+`` with
  ``R ~ U[0,1)``.

`series_terms` and `series_partial_sums` expose the successive-substitution
series ``f = pi0 sum_j T_j`` where ``T_1(x) = G(1-x)`` and
``T_{j+1} = K T_j``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numba
import numpy as np
from scipy.signal import fftconvolve

from carousel.errors import ConvergenceError
from carousel.phasetype import PickTimeDistribution

log = logging.getLogger(__name__)

GRID_TOL = 1e-12
MAX_SWEEPS = 10_000
MIN_GRID = 100
MIN_STEPS = 10_000
MIN_BURN_IN = 1_000
DEFAULT_BURN_IN = 10_000
N_BATCHES = 50
N_BINS = 200
CHUNK = 1 << 20


# -- grid solver ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridSolution:
    """
    Density on ``x_j = j/M`` and the atom at zero.

    Attributes
    ----------
    M : int
    x, f : ndarray
        Abscissae and density values, length ``M + 1``.
    pi0 : float
    iterations : int
        Sweeps performed (or series terms summed).
    last_change : float
        Sup-norm change of the final sweep.
    """
    M: int
    x: np.ndarray
    f: np.ndarray
    pi0: float
    iterations: int
    last_change: float
    mean_pick: float = math.nan
    method: str = "grid"
    diagnostics: dict = field(default_factory=dict)

    @property
    def ew(self) -> float:
        return float(np.trapezoid(self.x * self.f, self.x))

    @property
    def tau(self) -> float:
        return 1.0 / (self.ew + self.mean_pick)

    @property
    def mass(self) -> float:
        return float(np.trapezoid(self.f, self.x))

    def density(self, x):
        """Piecewise-linear interpolant of the grid density."""
        return np.interp(x, self.x, self.f)

    def to_json_dict(self) -> dict:
        return {"method": self.method, "pi0": self.pi0, "ew": self.ew, "tau": self.tau,
                "grid_size": self.M, "iterations": self.iterations,
                "last_change": self.last_change, "diagnostics": dict(self.diagnostics)}


class _Kernel:
    """Trapezoid discretization of ``(K u)(x) = int_0^{1-x} G(1-x-z) u(z) dz``."""

    def __init__(self, dist: PickTimeDistribution, M: int):
        self.M = M
        self.h = 1.0 / M
        # gk[m] = G(m/M); also g_j = G(1 - x_j) = gk[M - j]
        self.gk = np.asarray(dist.cdf(np.arange(M + 1) * self.h), dtype=float)
        self.g = self.gk[::-1].copy()

    def apply(self, u: np.ndarray) -> np.ndarray:
        M = self.M
        conv = fftconvolve(self.gk, u)[:M + 1]
        L = np.arange(M + 1)
        # trapezoid end corrections at z = 0 and z = L h
        integral = self.h * (conv - 0.5 * self.gk * u[0] - 0.5 * self.gk[0] * u[L])
        return integral[::-1]  # x_j corresponds to L = M - j


def _iterate(dist: PickTimeDistribution, M: int):
    kernel = _Kernel(dist, M)
    x = np.linspace(0.0, 1.0, M + 1)
    u = kernel.g.copy()
    f_old = None
    ratio = math.nan
    change = prev = math.inf
    for sweep in range(1, MAX_SWEEPS + 1):
        u = kernel.g + kernel.apply(u)
        pi0 = 1.0 / (1.0 + np.trapezoid(u, x))
        f = pi0 * u
        if f_old is not None:
            change = float(np.max(np.abs(f - f_old)))
            if prev > 0 and math.isfinite(prev):
                ratio = change / prev
            if change < GRID_TOL:
                return x, f, float(pi0), sweep, change, ratio
            prev = change
        f_old = f
    raise ConvergenceError(
        f"grid iteration did not reach {GRID_TOL} in {MAX_SWEEPS} sweeps "
        f"(last change {change:.3g}, ratio {ratio:.3g})")


def grid_solve(dist: PickTimeDistribution, M: int = 10_000, *,
               richardson: bool = False) -> GridSolution:
    """
    Fixed-point solution of the discretized integral equation.

    Parameters
    ----------
    dist : PickTimeDistribution
        Any supported pick-time law.
    M : int
        Number of grid intervals, at least 100.
    richardson : bool
        Also solve on ``2M`` intervals and combine the two
        second-order results on the coarse grid.

    Raises
    ------
    ValueError
        If ``M < 100``.
    ConvergenceError
        If the sweeps do not settle within 10^4 iterations.
    """
    M = int(M)
    if M < MIN_GRID:
        raise ValueError(f"grid size must be >= {MIN_GRID}, got {M}")
    x, f, pi0, sweeps, change, ratio = _iterate(dist, M)
    diagnostics = {"contraction_ratio": ratio}
    if richardson:
        _, f2, pi02, _, _, _ = _iterate(dist, 2 * M)
        f = (4.0 * f2[::2] - f) / 3.0
        pi0 = (4.0 * pi02 - pi0) / 3.0
        diagnostics["richardson"] = True
    if np.min(f) < -1e-12:
        log.warning("grid density has negative values down to %.3g", np.min(f))
    f = np.maximum(f, 0.0)  # round-off only
    return GridSolution(M, x, f, pi0, sweeps, change, dist.mean, "grid", diagnostics)


def integral_residual(solution: GridSolution, dist: PickTimeDistribution) -> float:
    """Sup-norm residual of the discretized integral equation at the grid nodes."""
    kernel = _Kernel(dist, solution.M)
    r = solution.f - solution.pi0 * kernel.g - kernel.apply(solution.f)
    return float(np.max(np.abs(r)))


def series_terms(dist: PickTimeDistribution, M: int, k: int) -> np.ndarray:
    """
    Grid values of the first ``k`` series terms ``T_j(x)``, shape ``(k, M+1)``.

    ``T_1(x) = G(1-x)`` and ``T_{j+1} = K T_j``; no ``pi0`` factor.
    """
    if not 1 <= k <= 60:
        raise ValueError("number of terms must be in 1..60")
    if M < MIN_GRID:
        raise ValueError(f"grid size must be >= {MIN_GRID}, got {M}")
    kernel = _Kernel(dist, M)
    out = np.empty((k, M + 1))
    out[0] = kernel.g
    for j in range(1, k):
        out[j] = kernel.apply(out[j - 1])
    return out


def series_partial_sums(dist: PickTimeDistribution, M: int, k: int,
                        pi0: Optional[float] = None) -> list:
    """
    Partial sums ``pi0 sum_{j<=m} T_j`` for ``m = 1..k``.

    ``pi0`` defaults to the fixed-point value from `grid_solve` on the same
    grid. Each snapshot's ``last_change`` is the sup norm of the term just
    added.
    """
    terms = series_terms(dist, M, k)
    if pi0 is None:
        pi0 = grid_solve(dist, M).pi0
    x = np.linspace(0.0, 1.0, M + 1)
    sums = pi0 * np.cumsum(terms, axis=0)
    return [GridSolution(M, x, sums[m], pi0, m + 1, float(pi0 * np.max(np.abs(terms[m]))),
                         dist.mean, "series")
            for m in range(k)]


# -- simulation -------------------------------------------------------------

def next_wait(w: float, r: float, p: float) -> float:
    """One step of the recursion: ``(r - p - w)^+``."""
    v = r - p - w
    return v if v > 0.0 else 0.0


@numba.njit(cache=True)
def _advance(w, p_prev, max_w, r, p, start, steps, burn_in,
             sum_w, sum_p, zeros, counts, hist):
    """
    Run the recursion over one chunk of draws.

    Step ``n`` (1-based, global) uses ``r[i]`` and the previous pick time,
    then pairs the new wait with the pick ``p[i]``. Steps after the burn-in
    feed batch ``(n - burn_in - 1) * 50 // steps`` and the histogram.
    """
    nb = sum_w.shape[0]
    nbins = hist.shape[0]
    for i in range(r.shape[0]):
        v = r[i] - p_prev - w
        w = v if v > 0.0 else 0.0
        p_prev = p[i]
        k = start + i - burn_in
        if k >= 0:
            b = k * nb // steps
            sum_w[b] += w
            sum_p[b] += p_prev
            counts[b] += 1
            if w > max_w:
                max_w = w
            if w == 0.0:
                zeros[b] += 1
            else:
                j = int(w * nbins)
                if j >= nbins:
                    j = nbins - 1
                hist[j] += 1
    return w, p_prev, max_w


@dataclass(frozen=True, eq=False)
class SimulationEstimate:
    """
    Batch-means estimates from one run of the recursion.

    ``histogram`` holds the probability of each bin ``[j/200, (j+1)/200)``
    among positive waits, scaled by the total count, so that
    ``histogram.sum() + pi0 == 1``.
    """
    steps: int
    burn_in: int
    seed: int
    pi0: float
    pi0_se: float
    ew: float
    ew_se: float
    tau: float
    tau_se: float
    max_wait: float
    histogram: np.ndarray
    mean_pick: float
    method: str = "simulation"
    diagnostics: dict = field(default_factory=dict)

    @property
    def bin_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, len(self.histogram) + 1)

    def to_json_dict(self) -> dict:
        return {"method": self.method, "pi0": self.pi0, "pi0_se": self.pi0_se,
                "ew": self.ew, "ew_se": self.ew_se, "tau": self.tau, "tau_se": self.tau_se,
                "steps": self.steps, "burn_in": self.burn_in, "seed": self.seed,
                "max_wait": self.max_wait, "histogram": self.histogram.tolist(),
                "diagnostics": dict(self.diagnostics)}


def _batch_se(values: np.ndarray) -> float:
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


def simulate(dist: PickTimeDistribution, steps: int = 10**6, burn_in: int = DEFAULT_BURN_IN,
             seed: int = 0, *,
             sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None,
             ) -> SimulationEstimate:
    """
    Monte Carlo estimate of ``(pi0, E[W], tau)``.

    Parameters
    ----------
    dist : PickTimeDistribution
        Supplies pick times unless ``sampler`` is given; its mean is
        reported alongside.
    steps : int
        Retained steps, at least 10^4.
    burn_in : int
        Discarded steps, at least 10^3. The run starts from
        ``W_0 = P_0 = 0``.
    seed : int
        Seeds a PCG64 generator; identical seeds give identical results.
    sampler : callable, optional
        ``sampler(rng, size)`` returning pick times, for testing.

    Returns
    -------
    SimulationEstimate
        Standard errors come from 50 batch means; the throughput error
        uses the delta method on ``1 / mean(W + P)``.
    """
    steps, burn_in = int(steps), int(burn_in)
    if steps < MIN_STEPS:
        raise ValueError(f"steps must be >= {MIN_STEPS}, got {steps}")
    if burn_in < MIN_BURN_IN:
        raise ValueError(f"burn_in must be >= {MIN_BURN_IN}, got {burn_in}")
    rng = np.random.Generator(np.random.PCG64(seed))
    draw = sampler if sampler is not None else (lambda g, n: dist.sample(g, n))

    sum_w = np.zeros(N_BATCHES)
    sum_p = np.zeros(N_BATCHES)
    zeros = np.zeros(N_BATCHES, dtype=np.int64)
    counts = np.zeros(N_BATCHES, dtype=np.int64)
    hist = np.zeros(N_BINS, dtype=np.int64)
    w = p_prev = 0.0
    max_wait = 0.0
    total = steps + burn_in
    done = 0
    while done < total:
        n = min(CHUNK, total - done)
        r = rng.random(n)
        p = np.asarray(draw(rng, n), dtype=float)
        w, p_prev, max_wait = _advance(w, p_prev, max_wait, r, p, done, steps, burn_in,
                                       sum_w, sum_p, zeros, counts, hist)
        done += n

    bw = sum_w / counts
    bp = sum_p / counts
    bz = zeros / counts
    ew = float(sum_w.sum() / steps)
    cycle = float((sum_w.sum() + sum_p.sum()) / steps)
    tau = 1.0 / cycle
    tau_se = _batch_se(bw + bp) / cycle ** 2
    pi0 = float(zeros.sum() / steps)
    half = N_BATCHES // 2
    drift = abs(bw[:half].mean() - bw[half:].mean()) / (
        math.hypot(_batch_se(bw[:half]), _batch_se(bw[half:])) or 1.0)
    return SimulationEstimate(
        steps=steps, burn_in=burn_in, seed=seed,
        pi0=pi0, pi0_se=_batch_se(bz), ew=ew, ew_se=_batch_se(bw),
        tau=tau, tau_se=tau_se, max_wait=float(max_wait),
        histogram=hist / steps, mean_pick=dist.mean,
        diagnostics={"half_drift_sigmas": float(drift)})


def histogram_csv(estimate: SimulationEstimate) -> str:
    """Histogram as CSV with header ``bin_left,bin_right,mass``."""
    edges = estimate.bin_edges
    lines = ["bin_left,bin_right,mass"]
    lines += [f"{a:.6g},{b:.6g},{m:.17g}"
              for a, b, m in zip(edges[:-1], edges[1:], estimate.histogram)]
    return "\n".join(lines) + "\n"
