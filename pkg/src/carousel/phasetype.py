"""
Pick-time distributions.

Two phase-type families are supported:

- ``ErlangMixture``: with probability ``alpha[n-1]`` the pick time is
  Erlang with ``n`` phases of common rate ``mu``, ``n = 1..N``;
- ``Hyperexponential``: with probability ``p[k]`` the pick time is
  exponential with rate ``mu[k]``.

Both are immutable. Besides CDF, moments and sampling, the module provides
the classical two-moment fits: a mixture of two consecutive Erlangs for
``scv <= 1`` and a balanced-means two-branch hyperexponential for
``scv >= 1``.

JSON literal format::

    {"type": "erlang_mixture", "mu": 4.0, "alpha": [0.0, 1.0]}
    {"type": "hyperexponential", "p": [0.5, 0.5], "mu": [1.0, 3.0]}

In ``alpha`` the entry with index ``i`` is the probability of ``i + 1``
phases.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Any, Mapping, Sequence, Union

import numpy as np
from scipy.special import gammainc

from carousel.errors import FitError, InvalidDistributionError

PROB_TOL = 1e-12


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _check_probabilities(values: Sequence[float], name: str) -> tuple:
    probs = tuple(float(v) for v in values)
    if not probs:
        raise InvalidDistributionError(f"{name} must not be empty")
    if any(not math.isfinite(v) or v < 0 for v in probs):
        raise InvalidDistributionError(f"{name} must be finite and nonnegative")
    if abs(math.fsum(probs) - 1.0) > PROB_TOL:
        raise InvalidDistributionError(
            f"{name} must sum to 1 (got {math.fsum(probs)!r})")
    return probs


def _check_rate(value: float, name: str = "mu") -> float:
    value = float(value)
    if not math.isfinite(value) or value <= 0:
        raise InvalidDistributionError(f"{name} must be a positive finite rate")
    return value


@dataclass(frozen=True)
class MomentSummary:
    """Mean and squared coefficient of variation of a pick time."""
    mean: float
    scv: float

    def __post_init__(self):
        if not (math.isfinite(self.mean) and self.mean > 0):
            raise FitError(f"mean must be positive, got {self.mean!r}")
        if not (math.isfinite(self.scv) and self.scv > 0):
            raise FitError(f"scv must be positive, got {self.scv!r}")


@dataclass(frozen=True)
class ErlangMixture:
    """Mixture of Erlang distributions sharing the phase rate ``mu``."""
    mu: float
    alpha: tuple

    def __post_init__(self):
        object.__setattr__(self, 'mu', _check_rate(self.mu))
        object.__setattr__(self, 'alpha', _check_probabilities(self.alpha, 'alpha'))

    @classmethod
    def erlang(cls, mu: float, n: int) -> ErlangMixture:
        """Pure Erlang with ``n`` phases of rate ``mu``."""
        if n < 1:
            raise InvalidDistributionError("number of phases must be >= 1")
        alpha = [0.0] * n
        alpha[-1] = 1.0
        return cls(mu, tuple(alpha))

    @property
    def order(self) -> int:
        """Largest phase count N."""
        return len(self.alpha)

    @property
    def phases(self) -> np.ndarray:
        return np.arange(1, self.order + 1)

    @property
    def mean(self) -> float:
        return math.fsum(a * n for a, n in zip(self.alpha, range(1, self.order + 1))) / self.mu

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("cdf is defined for x >= 0 only")
        out = np.zeros_like(x)
        for n, a in zip(self.phases, self.alpha):
            if a > 0:
                out = out + a * gammainc(n, self.mu * x)
        out = np.clip(out, 0.0, 1.0)
        return out if out.ndim else float(out)

    def moments(self) -> MomentSummary:
        n = self.phases
        a = np.asarray(self.alpha)
        m1 = math.fsum(a * n) / self.mu
        m2 = math.fsum(a * n * (n + 1)) / self.mu ** 2
        return MomentSummary(m1, m2 / m1 ** 2 - 1.0)

    def sample_branches(self, rng, size=None):
        """Draw the phase count (1..N) of each pick."""
        rng = _as_rng(rng)
        return rng.choice(self.phases, size=size, p=self.alpha)

    def sample(self, rng, size=None):
        rng = _as_rng(rng)
        n = self.sample_branches(rng, size)
        # Gamma with integer shape is the Erlang law.
        return rng.gamma(n, 1.0 / self.mu) if size is not None else float(rng.gamma(n, 1.0 / self.mu))

    def to_json_dict(self) -> dict:
        return {"type": "erlang_mixture", "mu": self.mu, "alpha": list(self.alpha)}


@dataclass(frozen=True)
class Hyperexponential:
    """Probabilistic mixture of exponentials with rates ``mu[k]``."""
    p: tuple
    mu: tuple

    def __post_init__(self):
        p = _check_probabilities(self.p, 'p')
        mu = tuple(_check_rate(m, 'mu') for m in self.mu)
        if len(p) != len(mu):
            raise InvalidDistributionError("p and mu must have equal length")
        object.__setattr__(self, 'p', p)
        object.__setattr__(self, 'mu', mu)

    @property
    def mean(self) -> float:
        return math.fsum(p / m for p, m in zip(self.p, self.mu))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0):
            raise ValueError("cdf is defined for x >= 0 only")
        out = np.zeros_like(x)
        for p, m in zip(self.p, self.mu):
            out = out - p * np.expm1(-m * x)
        out = np.clip(out, 0.0, 1.0)
        return out if out.ndim else float(out)

    def moments(self) -> MomentSummary:
        p = np.asarray(self.p)
        mu = np.asarray(self.mu)
        m1 = math.fsum(p / mu)
        m2 = math.fsum(2 * p / mu ** 2)
        return MomentSummary(m1, m2 / m1 ** 2 - 1.0)

    def sample_branches(self, rng, size=None):
        rng = _as_rng(rng)
        return rng.choice(len(self.p), size=size, p=self.p)

    def sample(self, rng, size=None):
        rng = _as_rng(rng)
        k = self.sample_branches(rng, size)
        scale = 1.0 / np.asarray(self.mu)[k]
        return rng.exponential(scale) if size is not None else float(rng.exponential(scale))

    def to_json_dict(self) -> dict:
        return {"type": "hyperexponential", "p": list(self.p), "mu": list(self.mu)}


PickTimeDistribution = Union[ErlangMixture, Hyperexponential]


def cdf(dist: PickTimeDistribution, x):
    """Distribution function ``G(x)``; ``x`` must be nonnegative."""
    return dist.cdf(x)


def moments(dist: PickTimeDistribution) -> MomentSummary:
    return dist.moments()


def sample(dist: PickTimeDistribution, rng, size=None):
    """
    Draw pick times.

    Parameters
    ----------
    dist : PickTimeDistribution
    rng : numpy.random.Generator or seed
        The generator is advanced in place.
    size : int or tuple, optional
        When omitted a single float is returned.
    """
    return dist.sample(rng, size)


def _mixed_erlang_order(scv: float) -> int:
    inv = 1.0 / scv
    k = round(inv)
    # scv == 1/k sits on two ranges; the smaller order wins
    if abs(inv - k) <= 1e-12 * inv:
        return max(int(k), 2)
    return max(int(math.ceil(inv)), 2)


def fit_mixed_erlang(target: MomentSummary) -> ErlangMixture:
    """
    Match mean and scv with ``p Erl(mu, n-1) + (1-p) Erl(mu, n)``.

    The order ``n`` is chosen so that ``1/n <= scv <= 1/(n-1)``. An scv of
    exactly one gives the exponential distribution.

    Raises
    ------
    FitError
        If ``scv`` is outside ``(0, 1]`` (use `fit_hyperexponential` for
        larger values) or the weight formula leaves ``[0, 1]``.
    """
    mean, c2 = target.mean, target.scv
    if c2 > 1.0:
        raise FitError(f"scv={c2} > 1 cannot be matched by a mixed Erlang; "
                       "use the hyperexponential fit instead")
    if c2 == 1.0:
        return ErlangMixture(1.0 / mean, (1.0,))
    n = _mixed_erlang_order(c2)
    disc = n * (1 + c2) - n * n * c2
    if disc < 0:
        if disc < -1e-12 * n * n:
            raise FitError(f"negative discriminant {disc} for scv={c2}, n={n}")
        disc = 0.0
    p = (n * c2 - math.sqrt(disc)) / (1 + c2)
    if -1e-12 < p < 0:
        p = 0.0  # round-off at the scv = 1/n boundary
    if not 0.0 <= p <= 1.0:
        raise FitError(f"mixed Erlang weight p={p} outside [0, 1] for scv={c2}")
    mu = (n - p) / mean
    alpha = [0.0] * n
    alpha[n - 2] = p
    alpha[n - 1] = 1.0 - p
    return ErlangMixture(mu, tuple(alpha))


def fit_hyperexponential(target: MomentSummary) -> Hyperexponential:
    """Balanced-means two-branch hyperexponential for ``scv >= 1``."""
    mean, c2 = target.mean, target.scv
    if c2 < 1.0:
        raise FitError(f"scv={c2} < 1 cannot be matched by a hyperexponential; "
                       "use the mixed Erlang fit instead")
    p1 = 0.5 * (1.0 + math.sqrt((c2 - 1.0) / (c2 + 1.0)))
    p2 = 1.0 - p1
    return Hyperexponential((p1, p2), (2 * p1 / mean, 2 * p2 / mean))


def fit(target: MomentSummary) -> PickTimeDistribution:
    """Mixed Erlang for ``scv <= 1``, hyperexponential otherwise."""
    if target.scv <= 1.0:
        return fit_mixed_erlang(target)
    return fit_hyperexponential(target)


def from_json_dict(obj: Mapping[str, Any]) -> PickTimeDistribution:
    try:
        kind = obj["type"]
        if kind == "erlang_mixture":
            return ErlangMixture(obj["mu"], tuple(obj["alpha"]))
        if kind == "hyperexponential":
            return Hyperexponential(tuple(obj["p"]), tuple(obj["mu"]))
    except (KeyError, TypeError) as exc:
        raise InvalidDistributionError(f"malformed distribution literal: {exc}") from exc
    raise InvalidDistributionError(f"unknown distribution type {obj.get('type')!r}")


def loads(text: str) -> PickTimeDistribution:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidDistributionError(f"invalid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise InvalidDistributionError("distribution literal must be a JSON object")
    return from_json_dict(obj)


def dumps(dist: PickTimeDistribution) -> str:
    return json.dumps(dist.to_json_dict())
