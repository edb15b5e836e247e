"""
Exact solution of the stationary picker waiting time for Erlang-mixture picks.

The waiting-time law has an atom ``pi0`` at zero and a density on ``[0, 1]``
that is a finite mixture of (complex) exponentials. The pipeline is

1. `build_transform_system` -- the even denominator polynomial ``R(s)`` and
   evaluators for the numerator pieces ``P(s)``, ``Q(s)`` (the transform of
   the density is ``(P(s) + exp(-s) Q(s)) / R(s)``), which are affine in the
   unknowns ``pi0`` and ``phi^(l)(-mu)``;
2. `find_roots` -- the ``2N + 2`` zeros of ``R``, found as ``N + 1`` zeros
   of a polynomial in ``s**2`` and split into ``+-`` pairs;
3. `solve_unknowns` -- one linear equation per ``+-`` pair, from analyticity
   of the transform;
4. `extract_mixture` -- residues ``c_i = P(r_i) / R'(r_i)``;
5. `finalize` -- ``pi0``, ``E[W]`` and the throughput.

Everything after the polynomial expansion runs in a private mpmath context
whose precision grows with the rate and the number of phases: the linear
system mixes factors such as ``exp(r)`` and ``(mu + r)**N`` and is hopeless
in double precision once ``N`` is moderately large. Results are handed back
as floats.
"""
from __future__ import annotations

import dataclasses
import functools
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import mpmath
import numpy as np
from scipy import integrate

from carousel.errors import (AnalyticityError, InvalidDistributionError,
                             MultipleRootError, NormalizationError,
                             PrecisionLossError, RootFindingError, SingularSystemError, SolverError,
                             UnsupportedMethodError)
from carousel.phasetype import ErlangMixture, Hyperexponential, PickTimeDistribution

log = logging.getLogger(__name__)

DOUBLE_ROOT_RTOL = 1e-7
NEAR_DOUBLE_RTOL = 1e-5
ILL_CONDITIONED = 1e12
ANALYTICITY_RTOL = 1e-8
IMAG_TOL = 1e-9
DIGIT_MARGIN = 20
TRIM_WEIGHT = 1e-16


# ----------------------------------------------------------------------------
# Exact polynomial helpers (ascending coefficient lists of Fractions)
# ----------------------------------------------------------------------------

def _padd(a, b):
    n = max(len(a), len(b))
    return [(a[k] if k < len(a) else 0) + (b[k] if k < len(b) else 0) for k in range(n)]


def _pmul(a, b):
    out = [Fraction(0)] * (len(a) + len(b) - 1)
    for i, x in enumerate(a):
        if x:
            for j, y in enumerate(b):
                out[i + j] += x * y
    return out


def _binomial_power(c0, c1, k):
    """Coefficients of ``(c0 + c1 s)**k`` by the binomial theorem."""
    return [math.comb(k, j) * c0 ** (k - j) * c1 ** j for j in range(k + 1)]


def _taylor_shift_reflect(coeffs):
    """Coefficients of ``p(1 - v)`` in ``v`` given those of ``p(t)``."""
    out = [Fraction(0)] * len(coeffs)
    for k, a in enumerate(coeffs):
        if a:
            for j, b in enumerate(_binomial_power(1, -1, k)):
                out[j] += a * b
    return out


def _trim(coeffs):
    coeffs = list(coeffs)
    while len(coeffs) > 1 and coeffs[-1] == 0:
        coeffs.pop()
    return coeffs


# ----------------------------------------------------------------------------
# Data types
# ----------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TransformSystem:
    """
    Denominator and numerator pieces of the transform for one distribution.

    Attributes
    ----------
    dist : ErlangMixture
    r_coefficients : tuple of Fraction
        Exact coefficients of ``R(s)`` in ascending powers of ``s``.
    v_coefficients : tuple of Fraction
        Exact coefficients of ``R(s) / mu**(2N)`` as a polynomial in
        ``v = 1 - s**2 / mu**2`` (degree ``N + 1``).
    dps : int
        Decimal digits of the working precision.
    """
    dist: ErlangMixture
    r_coefficients: tuple
    v_coefficients: tuple
    dps: int
    ctx: mpmath.ctx_mp.MPContext = field(repr=False)

    @property
    def order(self) -> int:
        return self.dist.order

    @property
    def degree(self) -> int:
        return len(self.r_coefficients) - 1

    @property
    def coefficients(self) -> np.ndarray:
        """Float view of ``r_coefficients`` (may overflow for large orders)."""
        with np.errstate(over='ignore'):
            return np.array([float(c) if abs(c) < 1e300 else math.copysign(math.inf, c)
                             for c in self.r_coefficients])

    # -- cached mp constants ------------------------------------------------
    @functools.cached_property
    def _mu(self):
        return self.ctx.mpf(self.dist.mu)

    def _mp(self, value):
        if isinstance(value, Fraction):
            return self.ctx.mpf(value.numerator) / value.denominator
        return self.ctx.mpf(value)

    @functools.cached_property
    def _alpha(self):
        return [self._mp(a) for a in self.dist.alpha]

    @functools.cached_property
    def _mixing_coeffs(self):
        # sum_n alpha_n mu^n w^(N-n), descending powers of w
        mu = self._mu
        return [a * mu ** (n + 1) for n, a in enumerate(self._alpha)]

    @functools.cached_property
    def _kernel_consts(self):
        ctx, mu, N = self.ctx, self._mu, self.order
        tail = [ctx.mpf(0)] * (N + 1)  # tail[j] = P[phase count > j]
        for j in range(N - 1, -1, -1):
            tail[j] = tail[j + 1] + self._alpha[j]
        weights = [tail[i] * mu ** i for i in range(N)]
        inv_fact = [1 / ctx.factorial(i) for i in range(N)]
        return weights, inv_fact

    # -- polynomials ---------------------------------------------------------
    def mixing(self, s):
        """``sum_n alpha_n mu**n (mu - s)**(N - n)``."""
        return self.ctx.polyval(self._mixing_coeffs, self._mu - s)

    def mixing_derivative(self, s):
        _, d = self.ctx.polyval(self._mixing_coeffs, self._mu - s, derivative=True)
        return -d

    def R(self, s):
        mu, N = self._mu, self.order
        return s * s * (mu * mu - s * s) ** N + self.mixing(s) * self.mixing(-s)

    def dR(self, s):
        mu, N = self._mu, self.order
        base = mu * mu - s * s
        lower = base ** (N - 1) if N > 0 else 0
        out = 2 * s * base * lower - 2 * N * s ** 3 * lower
        b, db = self.ctx.polyval(self._mixing_coeffs, mu - s, derivative=True)
        bm, dbm = self.ctx.polyval(self._mixing_coeffs, mu + s, derivative=True)
        return out - db * bm + b * dbm

    def R_derivative(self, s, k: int):
        """``k``-th derivative of ``R`` from the exact coefficients."""
        coeffs = [self._mp(c) for c in self.r_coefficients]
        for _ in range(k):
            coeffs = [j * coeffs[j] for j in range(1, len(coeffs))] or [self.ctx.mpf(0)]
        return self.ctx.polyval(coeffs[::-1], s)

    def rho(self, v):
        """Scaled denominator as a polynomial in ``v``."""
        return self.ctx.polyval([self._mp(c) for c in self.v_coefficients[::-1]], v)

    # -- numerator -----------------------------------------------------------
    def kernel_terms(self, w):
        """
        Values ``K_i(w)``, ``i = 0..N-1``, such that the polynomial multiplying
        ``exp(-(mu + s))`` in ``A(s)`` is ``s * sum_i d_i K_i(mu + s)`` with
        ``d_i = pi0 + sum_l C(i, l) phi^(l)(-mu)``.
        """
        N = self.order
        weights, inv_fact = self._kernel_consts
        powers = [self.ctx.mpf(1)]
        for _ in range(N - 1):
            powers.append(powers[-1] * w)
        out = [None] * N
        acc = 0
        for i in range(N - 1, -1, -1):
            acc += weights[i] * powers[N - 1 - i]
            out[i] = powers[i] * inv_fact[i] * acc
        return out

    def numerator_parts(self, s):
        """
        Affine pieces of ``P(s)`` and ``Q(s)``.

        Returns two lists ``p`` and ``q`` of length ``N + 2`` with
        ``P(s) = p[0] + p[1] pi0 + sum_i p[2 + i] d_i`` and likewise ``Q``.
        """
        ctx, mu, N = self.ctx, self._mu, self.order
        e_mu = ctx.exp(-mu)
        b_s, b_ms = self.mixing(s), self.mixing(-s)
        up = (mu + s) ** N
        k_minus = self.kernel_terms(mu - s)
        k_plus = self.kernel_terms(mu + s)
        p = [s * (mu * mu - s * s) ** N, -b_s * b_ms]
        q = [b_s * up, -s * b_s * up]
        p.extend(e_mu * s * s * up * k for k in k_minus)
        q.extend(-e_mu * s * b_s * k for k in k_plus)
        return p, q

    def _y(self, unknowns):
        return [self.ctx.mpf(1), unknowns.pi0, *unknowns.shifted]

    def P(self, s, unknowns):
        p, _ = self.numerator_parts(s)
        return self.ctx.fdot(p, self._y(unknowns))

    def Q(self, s, unknowns):
        _, q = self.numerator_parts(s)
        return self.ctx.fdot(q, self._y(unknowns))

    def PQ(self, s, unknowns):
        p, q = self.numerator_parts(s)
        y = self._y(unknowns)
        return self.ctx.fdot(p, y), self.ctx.fdot(q, y)

    def rhs(self, s, unknowns):
        """``P(s) + exp(-s) Q(s)``; equals ``phi(s) R(s)``."""
        p, q = self.numerator_parts(s)
        y = self._y(unknowns)
        return self.ctx.fdot(p, y) + self.ctx.exp(-s) * self.ctx.fdot(q, y)

    def A(self, s, unknowns):
        """
        ``A(s)`` term by term from its defining triple sum (reference
        implementation; quartic in ``N``).
        """
        ctx, mu, N = self.ctx, self._mu, self.order
        e = ctx.exp(-(mu + s))
        phi = unknowns.phi
        out = -ctx.exp(-s) * (mu + s) ** N
        for n in range(1, N + 1):
            a = self._mp(self.dist.alpha[n - 1])
            if not a:
                continue
            inner = mu ** n * (mu + s) ** (N - n) * unknowns.pi0
            for j in range(n):
                for i in range(j + 1):
                    term = s * mu ** j * (mu + s) ** (N - j - 1 + i) / ctx.factorial(i)
                    weight = unknowns.pi0 + ctx.fsum(math.comb(i, l) * phi[l] for l in range(i + 1))
                    inner += e * term * weight
            out += a * inner
        return out

    def lemma_equation(self, r, unknowns):
        """``exp(-r) r (mu + r)**N A(-r) + mixing(r) A(r)``."""
        mu, N = self._mu, self.order
        return (self.ctx.exp(-r) * r * (mu + r) ** N * self.A(-r, unknowns)
                + self.mixing(r) * self.A(r, unknowns))

    # -- polynomial forms (small orders; used for structural checks) -----------
    def numerator_coefficients(self, unknowns):
        """Coefficients (ascending) of ``P`` and ``Q`` for given unknowns."""
        ctx, N = self.ctx, self.order
        deg = 2 * N + 2
        nodes = [ctx.expjpi(ctx.mpf(2 * k) / (deg + 1)) for k in range(deg + 1)]
        P_vals = [self.P(z, unknowns) for z in nodes]
        Q_vals = [self.Q(z, unknowns) for z in nodes]

        def interp(vals):
            # inverse DFT on the unit circle: exact for polynomials of degree <= deg
            m = len(vals)
            return [ctx.fsum(vals[k] * ctx.expjpi(-ctx.mpf(2 * k * j) / m) for k in range(m)) / m
                    for j in range(m)]
        return interp(P_vals), interp(Q_vals)


@dataclass(frozen=True, eq=False)
class UnknownsVector:
    """
    ``pi0`` and the derivatives ``phi^(l)(-mu)``, ``l = 0..N-1``.

    ``shifted`` holds the equivalent quantities
    ``d_i = pi0 + sum_l C(i, l) phi^(l)(-mu)``
    (the expectation of ``(1 - W)**i exp(mu W)``), which is the scaling the
    linear system is actually solved in.
    """
    pi0: object
    phi: tuple
    shifted: tuple
    condition: float = math.nan

    def __len__(self):
        return 1 + len(self.phi)

    def as_floats(self) -> np.ndarray:
        return np.array([float(self.pi0), *map(float, self.phi)])


@dataclass(frozen=True, eq=False)
class RootSet:
    """
    Zeros of ``R`` ordered so that ``roots[-1 - i] == -roots[i]``.

    Entries of a double zero are repeated. ``multiplicity`` runs parallel to
    ``roots``.
    """
    roots: tuple
    multiplicity: tuple
    condition: tuple

    @property
    def representatives(self) -> tuple:
        return self.roots[:len(self.roots) // 2]

    def as_complex(self) -> np.ndarray:
        return np.array([complex(r) for r in self.roots])

    @property
    def min_separation(self) -> float:
        z = self.as_complex()
        distinct = []
        for k, r in enumerate(z):
            if not any(abs(r - d) == 0 for d in distinct):
                distinct.append(r)
        z = np.array(distinct)
        d = np.abs(z[:, None] - z[None, :])
        d[np.diag_indices_from(d)] = np.inf
        return float(d.min())


@dataclass(frozen=True, eq=False)
class ExponentialMixture:
    """
    Density ``f(x) = sum_i c_i x**d_i exp(r_i x)`` on ``[0, 1]``.

    Coefficients and exponents are kept at the precision they were computed
    in; `__call__` evaluates in complex double precision and returns the real
    part.
    """
    coefficients: tuple
    exponents: tuple
    degrees: tuple
    ctx: mpmath.ctx_mp.MPContext = field(repr=False, default=mpmath.mp)
    digits_margin: float = math.nan

    def __len__(self):
        return len(self.coefficients)

    @property
    def c(self) -> np.ndarray:
        return np.array([complex(c) for c in self.coefficients])

    @property
    def r(self) -> np.ndarray:
        return np.array([complex(r) for r in self.exponents])

    @functools.cached_property
    def term_scale(self) -> float:
        """Bound on ``sum_i |c_i x**d_i exp(r_i x)|`` over ``[0, 1]``."""
        ctx = self.ctx
        return float(ctx.fsum(abs(c) * max(1, ctx.exp(ctx.re(r)))
                              for c, r in zip(self.coefficients, self.exponents)))

    def evaluate_mp(self, x):
        """Exact-precision value at a single point (complex mpc)."""
        ctx = self.ctx
        x = ctx.mpf(x)
        return ctx.fsum(c * (x if d else 1) * ctx.exp(r * x)
                        for c, r, d in zip(self.coefficients, self.exponents, self.degrees))

    def _direct(self, x):
        xs = x[..., None]
        deg = np.asarray(self.degrees)
        terms = self.c * np.exp(self.r * xs) * np.where(deg == 1, xs, 1.0)
        return terms.sum(axis=-1)

    @functools.cached_property
    def _chebyshev(self):
        # Sampled at working precision; the interpolant itself is evaluated
        # in floats and does not suffer from the cancellation between terms.
        probe = max(abs(self.evaluate_mp(t)) for t in (0, 0.25, 0.5, 0.75, 1))
        digits = int(25 + math.log10(max(self.term_scale, 1.0)) - min(0.0, float(self.ctx.log10(probe or 1))))
        for deg in (64, 128, 256, 512, 1024, 2048):
            k = np.arange(deg + 1)
            nodes = np.cos(np.pi * (k + 0.5) / (deg + 1))
            with self.ctx.workdps(min(digits, self.ctx.dps)):
                vals = np.array([complex(self.evaluate_mp((t + 1) / 2)) for t in nodes])
            coef = np.array([2.0 / (deg + 1) * np.sum(vals * np.cos(np.pi * j * (k + 0.5) / (deg + 1)))
                             for j in range(deg + 1)])
            coef[0] /= 2
            scale = max(np.max(np.abs(vals)), 1e-300)
            if np.max(np.abs(coef[-8:])) <= max(1e-13 * scale, 1e-16):
                return coef
        log.warning("Chebyshev proxy of the density did not converge")
        return coef

    @property
    def needs_proxy(self) -> bool:
        return self.term_scale > 1e3

    def evaluate_complex(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if not self.needs_proxy:
            return self._direct(x)
        return np.polynomial.chebyshev.chebval(2 * x - 1, self._chebyshev)

    def __call__(self, x):
        out = self.evaluate_complex(x).real
        return out if np.ndim(out) else float(out)

    def _sum(self, simple: Callable, doubled: Callable):
        ctx = self.ctx
        return ctx.fsum((doubled if d else simple)(c, r)
                        for c, r, d in zip(self.coefficients, self.exponents, self.degrees))

    def mass(self):
        """``int_0^1 f`` at working precision (complex)."""
        e = self.ctx.exp
        return self._sum(lambda c, r: c * self.ctx.expm1(r) / r,
                         lambda c, r: c * (e(r) * (r - 1) + 1) / r ** 2)

    def first_moment(self):
        """``int_0^1 x f(x) dx`` at working precision (complex)."""
        e = self.ctx.exp
        return self._sum(lambda c, r: c * (1 + (r - 1) * e(r)) / r ** 2,
                         lambda c, r: c * (e(r) * (r * r - 2 * r + 2) - 2) / r ** 3)

    def to_json_terms(self) -> list:
        return [{"c_re": float(self.ctx.re(c)), "c_im": float(self.ctx.im(c)),
                 "r_re": float(self.ctx.re(r)), "r_im": float(self.ctx.im(r)),
                 "degree": int(d)}
                for c, r, d in zip(self.coefficients, self.exponents, self.degrees)]


@dataclass(frozen=True, eq=False)
class StationarySolution:
    pi0: float
    mixture: ExponentialMixture
    ew: float
    tau: float
    mean_pick: float
    diagnostics: dict = field(default_factory=dict)
    method: str = "analytic"
    system: Optional[TransformSystem] = field(default=None, repr=False)
    roots: Optional[RootSet] = field(default=None, repr=False)
    unknowns: Optional[UnknownsVector] = field(default=None, repr=False)

    def density(self, x):
        return self.mixture(x)

    def to_json_dict(self) -> dict:
        return {"method": self.method, "pi0": self.pi0, "ew": self.ew, "tau": self.tau,
                "terms": self.mixture.to_json_terms(),
                "diagnostics": _jsonable(self.diagnostics)}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


# ----------------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------------

def _exact_coefficients(dist: ErlangMixture):
    mu = Fraction(dist.mu)
    N = dist.order
    alpha = [Fraction(a) for a in dist.alpha]

    # s^2 (mu^2 - s^2)^N
    head = [Fraction(0)] * (2 * N + 3)
    for k in range(N + 1):
        head[2 * k + 2] = math.comb(N, k) * mu ** (2 * (N - k)) * (-1) ** k
    b_minus = [Fraction(0)]
    b_plus = [Fraction(0)]
    for n in range(1, N + 1):
        if alpha[n - 1]:
            b_minus = _padd(b_minus, [alpha[n - 1] * mu ** n * c
                                      for c in _binomial_power(mu, -1, N - n)])
            b_plus = _padd(b_plus, [alpha[n - 1] * mu ** n * c
                                    for c in _binomial_power(mu, 1, N - n)])
    r_coeffs = _padd(head, _pmul(b_minus, b_plus))

    # scaled form in u = s / mu, then t = u^2, then v = 1 - t
    bu_minus = [Fraction(0)]
    bu_plus = [Fraction(0)]
    for n in range(1, N + 1):
        if alpha[n - 1]:
            bu_minus = _padd(bu_minus, [alpha[n - 1] * c for c in _binomial_power(1, -1, N - n)])
            bu_plus = _padd(bu_plus, [alpha[n - 1] * c for c in _binomial_power(1, 1, N - n)])
    even = _pmul(bu_minus, bu_plus)
    if any(even[k] for k in range(1, len(even), 2)):
        raise SolverError("mixing product is not even in s")
    in_t = even[0::2]
    v_coeffs = _taylor_shift_reflect(in_t)
    tail = [Fraction(0)] * (N + 2)  # mu^2 (1 - v) v^N
    tail[N] += mu * mu
    tail[N + 1] -= mu * mu
    v_coeffs = _padd(v_coeffs, tail)
    return _trim(r_coeffs), _trim(v_coeffs)


def working_precision(dist: ErlangMixture, v_roots: Sequence[complex]) -> int:
    """Initial decimal digits for the mp context, from the root magnitudes."""
    mu, N = dist.mu, dist.order
    s = [mu * np.sqrt(complex(1 - v)) for v in v_roots] or [0]
    big = max(abs(z) for z in s)
    re = max(abs(z.real) for z in s)
    digits = (re + mu) / math.log(10) + N * math.log10(2 + mu + big)
    # a starting point only: solve() doubles it while the digit budget fails
    return int(30 + math.ceil(digits / 4))


def effective_mixture(dist: ErlangMixture) -> ErlangMixture:
    """
    Drop trailing phase counts whose weight is below ``TRIM_WEIGHT``.

    A vanishing top weight leaves a common factor ``(mu**2 - s**2)`` in
    every term of ``R`` (a spurious multiple zero at ``+-mu``); weights below
    double-precision resolution change nothing else.
    """
    alpha = list(dist.alpha)
    while len(alpha) > 1 and alpha[-1] <= TRIM_WEIGHT:
        alpha.pop()
    if len(alpha) == dist.order:
        return dist
    total = math.fsum(alpha)
    return ErlangMixture(dist.mu, tuple(a / total for a in alpha))


def build_transform_system(dist: PickTimeDistribution, dps: Optional[int] = None) -> TransformSystem:
    """
    Expand ``R`` exactly and set up the numerator evaluators.

    Only common-rate Erlang mixtures have a closed-form branch; a
    hyperexponential is rejected (use `carousel.oracles.grid_solve`).
    """
    if isinstance(dist, Hyperexponential):
        raise UnsupportedMethodError(
            "no analytic branch for hyperexponential pick times; use the grid method")
    if not isinstance(dist, ErlangMixture):
        raise InvalidDistributionError(f"unsupported distribution {type(dist).__name__}")
    dist = effective_mixture(dist)
    r_coeffs, v_coeffs = _exact_coefficients(dist)
    N = dist.order
    if len(r_coeffs) != 2 * N + 3:
        raise SolverError("unexpected degree of R")
    if any(r_coeffs[k] for k in range(1, len(r_coeffs), 2)):
        raise SolverError("R is not even in s")
    if r_coeffs[-1] != (-1) ** N:
        raise SolverError("unexpected leading coefficient of R")
    if dps is None:
        dps = working_precision(dist, _float_roots(v_coeffs))
    ctx = mpmath.MPContext()
    ctx.dps = dps
    return TransformSystem(dist, tuple(r_coeffs), tuple(v_coeffs), dps, ctx)


def _float_roots(v_coeffs) -> np.ndarray:
    c = np.array([float(a) for a in v_coeffs[::-1]])
    return np.roots(c / np.max(np.abs(c)))


def _newton(f, df, z, ctx, maxsteps=100):
    tol = ctx.mpf(10) ** (-(ctx.dps - 10))
    prev = None
    for _ in range(maxsteps):
        d = df(z)
        if d == 0:
            break
        step = f(z) / d
        size = abs(step)
        if prev is not None and size >= prev and size <= ctx.mpf(10) ** (-ctx.dps // 2) * max(1, abs(z)):
            return z, True  # stagnated at the rounding floor
        z = z - step
        if size <= tol * max(1, abs(z)):
            return z, True
        prev = size
    return z, False


def find_roots(system: TransformSystem) -> RootSet:
    """
    All ``2N + 2`` zeros of ``R``.

    Zeros of the scaled polynomial in ``v = 1 - s**2 / mu**2`` are seeded by
    companion-matrix eigenvalues, polished by Newton's method at working
    precision and mapped back through ``s = +-mu sqrt(1 - v)``, which makes
    the ``+-`` pairing exact. Zeros closer than ``1e-7`` (relative) are merged
    into a double zero located at the nearby critical point.
    """
    ctx = system.ctx
    seeds = _float_roots(system.v_coefficients)
    coeffs = [system._mp(c) for c in system.v_coefficients[::-1]]
    dcoeffs = [c * (len(coeffs) - 1 - k) for k, c in enumerate(coeffs[:-1])]
    d2coeffs = [c * (len(dcoeffs) - 1 - k) for k, c in enumerate(dcoeffs[:-1])]
    f = lambda z: ctx.polyval(coeffs, z)
    df = lambda z: ctx.polyval(dcoeffs, z)
    d2f = lambda z: ctx.polyval(d2coeffs, z)

    polished = []
    for seed in seeds:
        z, _ = _newton(f, df, ctx.mpc(seed.real, seed.imag), ctx)
        if abs(complex(z) - seed) > 1e-4 * max(1.0, abs(seed)):
            polished = None
            break
        polished.append(z)
    if polished is None:
        log.debug("Newton polishing strayed; falling back to polyroots")
        try:
            polished = list(ctx.polyroots(coeffs, maxsteps=400, extraprec=4 * ctx.prec))
        except ctx.NoConvergence as exc:
            raise RootFindingError(
                f"no convergence for polynomial {list(map(float, system.v_coefficients))}") from exc
    if len(polished) != system.order + 1:
        raise RootFindingError("lost zeros of R")

    # cluster near-coincident zeros
    clusters: list[list] = []
    for z in polished:
        for cl in clusters:
            if abs(z - cl[0]) <= DOUBLE_ROOT_RTOL * max(1, abs(cl[0])):
                cl.append(z)
                break
        else:
            clusters.append([z])
    v_roots, v_mult = [], []
    for cl in clusters:
        if len(cl) > 2:
            raise MultipleRootError(f"zero of multiplicity {len(cl)} near s^2 = "
                                    f"{complex(system._mu ** 2 * (1 - cl[0]))}")
        if len(cl) == 2:
            z, ok = _newton(df, d2f, (cl[0] + cl[1]) / 2, ctx)
            scale = ctx.fsum(abs(c) for c in coeffs)
            if abs(f(z)) > ctx.mpf(10) ** (-(ctx.dps // 2)) * scale:
                raise RootFindingError("coalesced zeros do not form a double zero")
            log.info("double zero of R at s^2 = %s", complex(system._mu ** 2 * (1 - z)))
            cl = [z, z]
        for z in cl:
            if abs(ctx.im(z)) <= ctx.mpf(10) ** (-(ctx.dps // 2)) * max(1, abs(z)):
                z = ctx.mpc(ctx.re(z), 0)
            v_roots.append(z)
            v_mult.append(len(cl))

    # enforce exact conjugate symmetry
    v_roots = _symmetrize(v_roots, ctx)
    mu = system._mu
    reps = [mu * ctx.sqrt(1 - z) for z in v_roots]
    order = sorted(range(len(reps)), key=lambda k: (float(ctx.re(reps[k])), float(ctx.im(reps[k]))))
    reps = [reps[k] for k in order]
    mult = [v_mult[k] for k in order]
    roots = tuple(reps + [-r for r in reversed(reps)])
    multiplicity = tuple(mult + mult[::-1])

    abs_coeffs = [abs(system._mp(c)) for c in system.r_coefficients]
    cond = []
    for r, m in zip(roots, multiplicity):
        scale = ctx.polyval(abs_coeffs[::-1], abs(r))
        deriv = system.dR(r) if m == 1 else system.R_derivative(r, 2)
        cond.append(float(scale / (max(abs(r), 1) * abs(deriv))) if deriv != 0 else math.inf)

    seps = [abs(a - b) for i, a in enumerate(reps) for b in reps[i + 1:] if a != b]
    if seps and float(min(seps)) < NEAR_DOUBLE_RTOL * float(max(abs(r) for r in reps)):
        log.warning("near-double zeros of R (separation %.3g); residues lose digits",
                    float(min(seps)))
    return RootSet(roots, multiplicity, tuple(cond))


def _symmetrize(v_roots, ctx):
    out = list(v_roots)
    used = [False] * len(out)
    for i, z in enumerate(out):
        if used[i]:
            continue
        used[i] = True
        if ctx.im(z) == 0:
            continue
        best, dist = None, None
        for j in range(len(out)):
            if not used[j]:
                d = abs(out[j] - ctx.conj(z))
                if dist is None or d < dist:
                    best, dist = j, d
        if best is None or dist > 1e-6 * max(1, abs(z)):
            raise RootFindingError("zeros of a real polynomial are not conjugate-paired")
        out[best] = ctx.conj(z)
        used[best] = True
    return out


def _distinct(roots: RootSet):
    """Distinct zeros with multiplicities, in order of first appearance."""
    seen = []
    for r, m in zip(roots.roots, roots.multiplicity):
        if not any(r == s for s, _ in seen):
            seen.append((r, m))
    return seen


def _row(system, s):
    p, q = system.numerator_parts(s)
    e = system.ctx.exp(-s)
    return [a + e * b for a, b in zip(p, q)]


def _row_scale(row, y, ctx):
    return ctx.fsum(abs(a * b) for a, b in zip(row, y))


def _solve_full_pivot(ctx, A, rhs_columns):
    """
    Gaussian elimination with complete pivoting on lists of mp numbers.

    ``rhs_columns`` is a list of right-hand sides; one solution list is
    returned per column.
    """
    n = len(A)
    m = len(rhs_columns)
    A = [list(row) + [col[i] for col in rhs_columns] for i, row in enumerate(A)]
    perm = list(range(n))  # column permutation
    tiny = ctx.mpf(2) ** (-ctx.prec + 8)
    for j in range(n):
        best, bi, bk = None, j, j
        for i in range(j, n):
            row = A[i]
            for k in range(j, n):
                if row[k]:
                    g = ctx.mag(row[k])
                    if best is None or g > best:
                        best, bi, bk = g, i, k
        if best is None or abs(A[bi][bk]) <= tiny:
            raise SingularSystemError("analyticity system is singular")
        A[j], A[bi] = A[bi], A[j]
        if bk != j:
            for row in A:
                row[j], row[bk] = row[bk], row[j]
            perm[j], perm[bk] = perm[bk], perm[j]
        pivot_row = A[j]
        inv = 1 / pivot_row[j]
        tail = pivot_row[j + 1:]
        for i in range(j + 1, n):
            row = A[i]
            f = row[j] * inv
            if f:
                row[j + 1:] = [a - f * t for a, t in zip(row[j + 1:], tail)]
    solutions = []
    for c in range(m):
        z = [ctx.mpf(0)] * n
        for j in range(n - 1, -1, -1):
            row = A[j]
            z[j] = (row[n + c] - ctx.fdot(row[j + 1:n], z[j + 1:])) / row[j]
        x = [None] * n
        for j, k in enumerate(perm):
            x[k] = z[j]
        solutions.append(x)
    return solutions


def solve_unknowns(system: TransformSystem, roots: RootSet) -> UnknownsVector:
    """
    Solve the ``N + 1`` analyticity equations for ``pi0`` and
    ``phi^(l)(-mu)``.

    Each ``+-`` pair of zeros contributes one equation; of the two dependent
    companion equations the one whose exponential factor ``exp(-r)`` is
    bounded (``Re r >= 0``) is kept. A double zero contributes the
    derivative equation as well.
    """
    ctx, N = system.ctx, system.order
    rows, rhs = [], []
    for r, m in _distinct(roots):
        if ctx.re(r) < 0 or (ctx.re(r) == 0 and ctx.im(r) < 0):
            continue
        derivs = [0, 1] if m == 2 else [0]
        for k in derivs:
            if k == 0:
                row = _row(system, r)
            else:
                row = [ctx.diff(lambda z, j=j: _row(system, z)[j], r) for j in range(N + 2)]
            big = max(abs(a) for a in row)
            rows.append([a / big for a in row[1:]])
            rhs.append(-row[0] / big)
    if len(rows) != N + 1:
        raise SolverError(f"expected {N + 1} equations, got {len(rows)}")

    n = N + 1
    col = [max(abs(rows[i][j]) for i in range(n)) for j in range(n)]
    if any(c == 0 for c in col):
        raise SingularSystemError("unknown absent from every equation")
    A = [[rows[i][j] / col[j] for j in range(n)] for i in range(n)]
    # probe ||A^-1|| with fixed random sign vectors through the same elimination
    probes = np.random.default_rng(0).choice([-1, 1], size=(3, n))
    x, *inv = _solve_full_pivot(ctx, A, [rhs] + [[ctx.mpf(int(v)) for v in z] for z in probes])
    norm_a = max(ctx.fsum(abs(a) for a in row) for row in A)
    norm_inv = max(max(abs(v) for v in w) for w in inv)
    cond = float(norm_a * norm_inv)
    if cond > ILL_CONDITIONED:
        log.warning("ill-conditioned unknowns system (cond ~ %.3g), working at %d digits",
                    cond, system.dps)
    y = [x[j] / col[j] for j in range(n)]

    for v in y:
        if abs(ctx.im(v)) > IMAG_TOL * max(1, abs(ctx.re(v))):
            raise AnalyticityError(f"unknown with imaginary part {complex(v)}")
    y = [ctx.re(v) for v in y]
    pi0, d = y[0], y[1:]
    if not 0 < pi0 < 1:
        raise SolverError(f"pi0 = {float(pi0)} outside (0, 1)")
    phi = tuple(ctx.fsum((-1) ** (l - i) * math.comb(l, i) * (d[i] - pi0) for i in range(l + 1))
                for l in range(N))
    unknowns = UnknownsVector(pi0, phi, tuple(d), cond)

    full = [ctx.mpf(1), *y]
    for r, m in _distinct(roots):
        row = _row(system, r)
        res = abs(ctx.fdot(row, full))
        scale = _row_scale(row, full, ctx)
        if res > ANALYTICITY_RTOL * scale:
            raise AnalyticityError(
                f"transform numerator does not vanish at zero {complex(r)} "
                f"(relative residual {float(res / scale):.3g})")
    return unknowns


def extract_mixture(system: TransformSystem, roots: RootSet,
                    unknowns: UnknownsVector) -> ExponentialMixture:
    """
    Residues of ``P / R`` at each zero; one term per zero (two at a double
    zero, the second carrying a factor ``x``).

    Raises `PrecisionLossError` when the digits cancelled in forming
    ``P(r_i)``, the condition of the unknowns system and the spread of the
    term magnitudes together exceed the working precision.
    """
    ctx = system.ctx
    y = system._y(unknowns)
    coeffs, exps, degs = [], [], []
    worst_loss = 0.0
    for r, m in _distinct(roots):
        p, q = system.numerator_parts(r)
        P, Q = ctx.fdot(p, y), ctx.fdot(q, y)
        e = ctx.exp(-r)
        spread = _row_scale(p, y, ctx)
        if P != 0 and spread != 0:
            worst_loss = max(worst_loss, float(ctx.log10(spread / abs(P))))
        if m == 1:
            dR = system.dR(r)
            c, c_hat = P / dR, Q / dR
            gap = abs(c + e * c_hat)
            scale = abs(c) + abs(e * c_hat)
            if gap > ANALYTICITY_RTOL * scale:
                raise AnalyticityError(
                    f"residue relation fails at {complex(r)} (gap {float(gap / scale):.3g})")
            coeffs.append(c)
            exps.append(r)
            degs.append(0)
        else:
            if abs(P + e * Q) > ANALYTICITY_RTOL * (abs(P) + abs(e * Q)):
                raise AnalyticityError(f"numerator does not vanish at double zero {complex(r)}")
            S = system.R_derivative(r, 2) / 2
            dS = system.R_derivative(r, 3) / 6
            dP = ctx.diff(lambda z: system.P(z, unknowns), r)
            coeffs += [P / S, (dP * S - P * dS) / S ** 2]
            exps += [r, r]
            degs += [1, 0]
    mixture = ExponentialMixture(tuple(coeffs), tuple(exps), tuple(degs), ctx)
    spent = (worst_loss + math.log10(max(unknowns.condition, 1.0))
             + math.log10(max(mixture.term_scale, 1.0)))
    margin = system.dps - spent
    object.__setattr__(mixture, 'digits_margin', margin)
    if margin < DIGIT_MARGIN:
        raise PrecisionLossError(
            f"only {margin:.1f} of {system.dps} digits left after cancellation")
    return mixture


def _quad_mass(mixture: ExponentialMixture) -> float:
    val, _ = integrate.quad(mixture, 0.0, 1.0, epsabs=1e-14, epsrel=1e-13, limit=200)
    return val


def finalize(mixture: ExponentialMixture, dist: PickTimeDistribution,
             unknowns: Optional[UnknownsVector] = None) -> StationarySolution:
    """
    Atom, mean wait and throughput from the density.

    ``pi0`` is taken from normalisation of the closed-form mixture integral;
    when ``unknowns`` is given, its ``pi0`` is cross-checked against it.
    """
    ctx = mixture.ctx
    mass = mixture.mass()
    first = mixture.first_moment()
    if abs(ctx.im(mass)) > 1e-10 or abs(ctx.im(first)) > 1e-10:
        raise SolverError("density integrals are not real")
    pi0 = 1 - ctx.re(mass)
    ew = float(ctx.re(first))
    mean_pick = dist.mean
    tau = 1.0 / (ew + mean_pick)
    diagnostics = {}
    if unknowns is not None:
        gap = float(abs(pi0 - unknowns.pi0))
        diagnostics["pi0_crosscheck"] = gap
        if gap > 1e-8:
            raise NormalizationError(f"pi0 from the density differs from the solved pi0 by {gap:.3g}")
    pi0 = float(pi0)
    norm_err = abs(pi0 + _quad_mass(mixture) - 1.0)
    diagnostics["normalization_error"] = norm_err
    if norm_err > 1e-7:
        raise NormalizationError(f"pi0 + int f differs from 1 by {norm_err:.3g}")
    return StationarySolution(pi0, mixture, ew, tau, mean_pick, diagnostics)


def integral_equation_residual(density: Callable, pi0: float, dist: PickTimeDistribution,
                               points: int = 1001) -> float:
    """
    Sup-norm over an even grid of
    ``f(x) - pi0 G(1-x) - int_0^{1-x} G(1-x-z) f(z) dz``, with the integral
    done by adaptive vector quadrature.
    """
    x = np.linspace(0.0, 1.0, points)
    y = 1.0 - x

    def integrand(w):
        z = y * w
        return y * dist.cdf(y - z) * density(z)

    conv, _ = integrate.quad_vec(integrand, 0.0, 1.0, epsabs=1e-13, epsrel=1e-12)
    res = density(x) - pi0 * dist.cdf(y) - conv
    return float(np.max(np.abs(res)))


def solve(dist: PickTimeDistribution, dps: Optional[int] = None,
          residual_points: int = 1001) -> StationarySolution:
    """
    Full pipeline for an Erlang mixture.

    The working precision is doubled (at most three times) while the
    analyticity or normalisation checks fail.
    """
    system = build_transform_system(dist, dps)
    for attempt in range(4):
        try:
            roots = find_roots(system)
            unknowns = solve_unknowns(system, roots)
            mixture = extract_mixture(system, roots, unknowns)
            sol = finalize(mixture, dist, unknowns)
            sol = dataclasses.replace(sol, system=system, roots=roots, unknowns=unknowns)
            break
        except (AnalyticityError, NormalizationError, PrecisionLossError) as exc:
            if attempt == 3:
                raise
            log.info("retrying at %d digits: %s", 2 * system.dps, exc)
            system = build_transform_system(dist, 2 * system.dps)
    sol.diagnostics.update({
        "integral_residual": integral_equation_residual(mixture, sol.pi0, dist, residual_points),
        "condition": unknowns.condition,
        "min_root_separation": roots.min_separation,
        "max_root_condition": max(roots.condition),
        "double_roots": sum(1 for m in roots.multiplicity if m == 2) // 2,
        "dps": system.dps,
        "max_imag_density": float(np.max(np.abs(
            mixture.evaluate_complex(np.linspace(0, 1, 1001)).imag))),
    })
    return sol


def density_csv(solution, points: int = 1001) -> str:
    """``x,f`` table of the density on an even grid over ``[0, 1]``."""
    x = np.linspace(0.0, 1.0, points)
    f = solution.density(x)
    lines = ["x,f"] + [f"{a:.6f},{b:.12e}" for a, b in zip(x, f)]
    return "\n".join(lines) + "\n"
