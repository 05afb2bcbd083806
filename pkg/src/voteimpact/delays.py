"""Infection-to-death and generation-interval distributions.

The infection-to-death distribution is the sum of two independent gamma
distributions parameterized by (mean, coefficient of variation); the
generation interval is a single gamma.  Derived from these are the daily
discretizations used by the renewal model and the treatment lag /
post-treatment window constants used by the matching estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy import stats

from voteimpact.errors import InputError

__all__ = [
    "GammaSpec",
    "DailyPmf",
    "DelayModel",
    "sample_delay",
    "delay_quantile",
    "discretize",
    "post_treatment_window",
]


@dataclass(frozen=True)
class GammaSpec:
    """Gamma distribution given by its mean and coefficient of variation."""

    mean: float
    cv: float

    def __post_init__(self):
        if self.mean <= 0 or self.cv <= 0:
            raise InputError(f"gamma spec requires mean > 0 and cv > 0, got {self}")

    @property
    def shape(self) -> float:
        return 1.0 / self.cv**2

    @property
    def scale(self) -> float:
        return self.mean * self.cv**2

    @property
    def variance(self) -> float:
        return self.shape * self.scale**2

    def frozen(self):
        return stats.gamma(self.shape, scale=self.scale)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.gamma(self.shape, self.scale, size=n)


@dataclass(frozen=True)
class DailyPmf:
    """Probability mass on whole days 0..horizon, normalized to 1."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 1 or p.size < 1:
            raise InputError("daily pmf must be a non-empty 1-d array")
        if np.any(p < 0):
            raise InputError("daily pmf entries must be non-negative")
        if abs(p.sum() - 1.0) > 1e-9:
            raise InputError("daily pmf must sum to 1 within 1e-9")
        object.__setattr__(self, "probs", p)

    @property
    def horizon(self) -> int:
        return self.probs.size - 1

    def mean(self) -> float:
        return float(np.arange(self.probs.size) @ self.probs)


def _as_components(spec) -> tuple[GammaSpec, ...]:
    if isinstance(spec, GammaSpec):
        return (spec,)
    return tuple(spec)


def sample_delay(spec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` samples from a GammaSpec or a sum of GammaSpecs."""
    parts = _as_components(spec)
    out = np.zeros(n)
    for part in parts:
        out += part.sample(n, rng)
    return out


def _sum_cdf(parts: tuple[GammaSpec, ...], x: float) -> float:
    """CDF of a sum of independent gammas by one-dimensional quadrature."""
    if x <= 0:
        return 0.0
    if len(parts) == 1:
        return float(parts[0].frozen().cdf(x))
    if len(parts) != 2:
        raise InputError("sums of more than two gamma components are not supported")
    f1 = parts[0].frozen()
    f2 = parts[1].frozen()
    val, _ = integrate.quad(lambda u: f1.pdf(u) * f2.cdf(x - u), 0.0, x, limit=200)
    return float(min(val, 1.0))


def delay_quantile(spec, q: float, n_samples: int = 100_000, seed: int = 0) -> float:
    """Monte Carlo empirical quantile of a delay distribution.

    The sum of two gammas with different scales has no elementary CDF, so
    quantiles are taken from the empirical distribution of ``n_samples``
    draws; deterministic given ``seed``.
    """
    if not 0.0 < q < 1.0:
        raise InputError(f"quantile level must lie in (0, 1), got {q}")
    if n_samples < 100_000:
        raise InputError("delay_quantile requires n_samples >= 1e5")
    rng = np.random.default_rng(seed)
    draws = sample_delay(spec, n_samples, rng)
    return float(np.quantile(draws, q))


def discretize(spec, horizon: int) -> DailyPmf:
    """Discretize a continuous delay onto whole days 0..horizon.

    Mass for day d >= 1 is CDF(d + 0.5) - CDF(d - 0.5); day 0 gets
    CDF(0.5).  The result is renormalized over the horizon.  A horizon
    shorter than the 99th percentile triggers a warning.
    """
    if horizon < 1:
        raise InputError("discretization horizon must be >= 1 day")
    parts = _as_components(spec)
    cdf_at = np.array([_sum_cdf(parts, d + 0.5) for d in range(horizon + 1)])
    probs = np.diff(cdf_at, prepend=0.0)
    total = probs.sum()
    if total < 0.99:
        warnings.warn(
            f"horizon {horizon} captures only {total:.4f} of the delay mass "
            "(shorter than the 99th percentile)",
            stacklevel=2,
        )
    return DailyPmf(probs / total)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


_DEFAULT_PI = (GammaSpec(5.1, 0.86), GammaSpec(17.8, 0.45))
_DEFAULT_G = GammaSpec(6.5, 0.62)


@dataclass(frozen=True)
class DelayModel:
    """Delay distributions plus the derived matching-window constants.

    ``window`` holds the post-treatment window endpoints in days after
    the election, as whole days.  The default model pins the published
    (13, 32) constants; models built through :meth:`from_specs` derive
    the endpoints from Monte Carlo quantiles of the infection-to-death
    distribution.
    """

    infection_to_death: tuple[GammaSpec, ...] = _DEFAULT_PI
    generation: GammaSpec = _DEFAULT_G
    treatment_lag_days: int = 10
    window: tuple[int, int] = (13, 32)
    q_window: tuple[float, float] = (0.2, 0.8)

    @classmethod
    def default(cls) -> "DelayModel":
        return cls()

    @classmethod
    def from_specs(
        cls,
        infection_to_death,
        generation: GammaSpec = _DEFAULT_G,
        treatment_lag_days: int = 10,
        q_window: tuple[float, float] = (0.2, 0.8),
        n_samples: int = 1_000_000,
        seed: int = 0,
    ) -> "DelayModel":
        """Build a model whose window is derived from quantiles of pi."""
        pi = _as_components(infection_to_death)
        lo = _round_half_up(delay_quantile(pi, q_window[0], n_samples, seed))
        hi = _round_half_up(delay_quantile(pi, q_window[1], n_samples, seed))
        return cls(pi, generation, treatment_lag_days, (lo, hi), q_window)

    @property
    def pi_mean(self) -> float:
        return sum(p.mean for p in self.infection_to_death)

    @property
    def pi_variance(self) -> float:
        return sum(p.variance for p in self.infection_to_death)


def post_treatment_window(
    model: DelayModel, n_samples: int = 1_000_000, seed: int = 0
) -> tuple[int, int, int]:
    """Return (treatment lag, window low, window high) in whole days.

    The window endpoints are re-derived from Monte Carlo quantiles of the
    infection-to-death distribution and compared against the stored
    constants; a mismatch raises a warning rather than an error so the
    published constants stay authoritative for the estimator.
    """
    lo = _round_half_up(delay_quantile(model.infection_to_death, model.q_window[0], n_samples, seed))
    hi = _round_half_up(delay_quantile(model.infection_to_death, model.q_window[1], n_samples, seed))
    if (lo, hi) != model.window:
        warnings.warn(
            f"stored window {model.window} differs from re-derived quantile "
            f"window ({lo}, {hi}); keeping stored constants",
            stacklevel=2,
        )
    return (model.treatment_lag_days, model.window[0], model.window[1])
