"""Parametric input families: sampling, moment maps and score functions.

Every family is parametrized by its moments, so the sample average of
``moment_map`` over i.i.d. data is an unbiased estimate of ``theta``.
Parameters are always handled as 1-D float arrays of length ``param_dim``.

Batched conventions used throughout:

* ``sample(theta, rng, size)`` returns an array of shape ``size``.
* ``moment_map(x)`` maps an array of realizations of shape ``(...)`` to
  shape ``(..., param_dim)``.
* ``score(theta, draws)`` treats the *last* axis of ``draws`` as the draws
  belonging to one scenario and returns the summed per-draw score with
  shape ``draws.shape[:-1] + (param_dim,)``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln

# Distance kept from the boundary of the parameter set when projecting.
BOUNDARY_MARGIN = 1e-6


class InvalidParameter(ValueError):
    """Raised when a parameter vector lies outside the family's valid set."""


class ParametricFamily:
    kind: str = ""
    param_dim: int = 1

    def as_theta(self, theta) -> np.ndarray:
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        if theta.shape != (self.param_dim,):
            raise InvalidParameter(
                f"{self.kind}: expected parameter of length {self.param_dim}, got shape {theta.shape}"
            )
        return theta

    def is_valid(self, theta) -> bool:
        raise NotImplementedError

    def validate(self, theta) -> np.ndarray:
        theta = self.as_theta(theta)
        if not np.all(np.isfinite(theta)) or not self.is_valid(theta):
            raise InvalidParameter(f"{self.kind}: parameter {theta.tolist()} outside the valid set")
        return theta

    def project(self, theta) -> np.ndarray:
        """Nearest valid parameter, ``BOUNDARY_MARGIN`` inside the boundary."""
        raise NotImplementedError

    def sample(self, theta, rng: np.random.Generator, size=None):
        raise NotImplementedError

    def moment_map(self, x) -> np.ndarray:
        raise NotImplementedError

    def moment_cov(self, theta) -> np.ndarray:
        """Covariance matrix of ``moment_map`` under ``theta``."""
        raise NotImplementedError

    def logpdf(self, theta, x) -> np.ndarray:
        raise NotImplementedError

    def _draw_score(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score(self, theta, draws) -> np.ndarray:
        theta = self.validate(theta)
        draws = np.asarray(draws, dtype=float)
        if draws.ndim == 0:
            draws = draws[None]
        return self._draw_score(theta, draws).sum(axis=-2)

    def in_support(self, x) -> bool:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"

    def __eq__(self, other) -> bool:
        return type(self) is type(other)

    def __hash__(self) -> int:
        return hash(self.kind)


class Exponential(ParametricFamily):
    """Exponential distribution parametrized by its mean."""

    kind = "exponential"
    param_dim = 1

    def is_valid(self, theta):
        return bool(theta[0] > 0)

    def project(self, theta):
        theta = self.as_theta(theta)
        return np.maximum(theta, BOUNDARY_MARGIN)

    def sample(self, theta, rng, size=None):
        theta = self.validate(theta)
        return rng.exponential(theta[0], size=size)

    def moment_map(self, x):
        return np.asarray(x, dtype=float)[..., None]

    def moment_cov(self, theta):
        theta = self.validate(theta)
        return np.array([[theta[0] ** 2]])

    def logpdf(self, theta, x):
        theta = self.validate(theta)
        x = np.asarray(x, dtype=float)
        return -np.log(theta[0]) - x / theta[0]

    def _draw_score(self, theta, x):
        return ((x - theta[0]) / theta[0] ** 2)[..., None]

    def in_support(self, x):
        return bool(np.all(np.asarray(x) >= 0))


class Poisson(ParametricFamily):
    """Poisson distribution parametrized by its mean."""

    kind = "poisson"
    param_dim = 1

    def is_valid(self, theta):
        return bool(theta[0] > 0)

    def project(self, theta):
        theta = self.as_theta(theta)
        return np.maximum(theta, BOUNDARY_MARGIN)

    def sample(self, theta, rng, size=None):
        theta = self.validate(theta)
        return rng.poisson(theta[0], size=size).astype(float)

    def moment_map(self, x):
        return np.asarray(x, dtype=float)[..., None]

    def moment_cov(self, theta):
        theta = self.validate(theta)
        return np.array([[theta[0]]])

    def logpdf(self, theta, x):
        theta = self.validate(theta)
        x = np.asarray(x, dtype=float)
        return x * np.log(theta[0]) - theta[0] - gammaln(x + 1.0)

    def _draw_score(self, theta, x):
        return (x / theta[0] - 1.0)[..., None]

    def in_support(self, x):
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= 0) and np.all(x == np.floor(x)))


class NormalMoment(ParametricFamily):
    """Normal distribution parametrized by its first two raw moments ``(m1, m2)``."""

    kind = "normal_moment"
    param_dim = 2

    def is_valid(self, theta):
        return bool(theta[1] > theta[0] ** 2)

    def project(self, theta):
        theta = self.as_theta(theta).copy()
        floor = theta[0] ** 2 + BOUNDARY_MARGIN
        if theta[1] < floor:
            theta[1] = floor
        return theta

    @staticmethod
    def _natural(theta):
        return theta[0], theta[1] - theta[0] ** 2

    def sample(self, theta, rng, size=None):
        theta = self.validate(theta)
        mean, var = self._natural(theta)
        return rng.normal(mean, np.sqrt(var), size=size)

    def moment_map(self, x):
        x = np.asarray(x, dtype=float)
        return np.stack([x, x * x], axis=-1)

    def moment_cov(self, theta):
        theta = self.validate(theta)
        mean, var = self._natural(theta)
        return np.array(
            [
                [var, 2.0 * mean * var],
                [2.0 * mean * var, 2.0 * var**2 + 4.0 * mean**2 * var],
            ]
        )

    def logpdf(self, theta, x):
        theta = self.validate(theta)
        mean, var = self._natural(theta)
        x = np.asarray(x, dtype=float)
        return -0.5 * np.log(2.0 * np.pi * var) - (x - mean) ** 2 / (2.0 * var)

    def _draw_score(self, theta, x):
        mean, var = self._natural(theta)
        resid = x - mean
        d_mean = resid / var
        d_var = -0.5 / var + resid**2 / (2.0 * var**2)
        # chain rule: mean = m1, var = m2 - m1**2
        return np.stack([d_mean - 2.0 * mean * d_var, d_var], axis=-1)

    def in_support(self, x):
        return bool(np.all(np.isfinite(np.asarray(x, dtype=float))))


FAMILIES = {cls.kind: cls for cls in (Exponential, Poisson, NormalMoment)}


def make_family(kind: str) -> ParametricFamily:
    try:
        return FAMILIES[kind.lower()]()
    except KeyError:
        raise ValueError(f"unknown input family {kind!r}; expected one of {sorted(FAMILIES)}") from None
