"""Hansen (1994) skewed Student-t, standardized to zero mean and unit variance.

``delta`` in (-1, 1) sets skewness and ``omega`` > 2 the tail thickness.
The location/scale forms take ``mu`` and ``tau`` as the mean and the variance.
"""

import math

import numpy as np
from scipy import special, stats

from .errors import InvalidTailParameter, ValidationError


def hansen_constants(delta: float, omega: float) -> tuple[float, float, float]:
    """Return (a, b, c) so that the piecewise density has mean 0 and variance 1."""
    if not omega > 2:
        raise InvalidTailParameter(f"tail parameter must exceed 2, got {omega}")
    if not abs(delta) < 1:
        raise ValidationError(f"skewness must lie in (-1, 1), got {delta}")
    logc = (special.gammaln((omega + 1) / 2) - special.gammaln(omega / 2)
            - 0.5 * math.log(math.pi * (omega - 2)))
    c = math.exp(logc)
    a = 4 * delta * c * (omega - 2) / (omega - 1)
    b = math.sqrt(1 + 3 * delta**2 - a**2)
    return a, b, c


def std_skewt_logpdf(z, delta: float, omega: float):
    a, b, c = hansen_constants(delta, omega)
    z = np.asarray(z, dtype=float)
    side = np.where(z < -a / b, 1 - delta, 1 + delta)
    x = (b * z + a) / side
    return math.log(b) + math.log(c) - (omega + 1) / 2 * np.log1p(x * x / (omega - 2))


def skewt_logpdf(g, mu, tau: float, delta: float, omega: float):
    """Log density at ``g`` of the skewed t with mean ``mu`` and variance ``tau``."""
    if not tau > 0:
        raise ValidationError("variance must be positive")
    sd = math.sqrt(tau)
    z = (np.asarray(g, dtype=float) - mu) / sd
    return std_skewt_logpdf(z, delta, omega) - 0.5 * math.log(tau)


def std_skewt_cdf(z, delta: float, omega: float):
    a, b, _ = hansen_constants(delta, omega)
    z = np.asarray(z, dtype=float)
    k = math.sqrt(omega / (omega - 2))
    left = z < -a / b
    side = np.where(left, 1 - delta, 1 + delta)
    tc = stats.t.cdf((b * z + a) / side * k, omega)
    return np.where(left, (1 - delta) * tc, (1 - delta) / 2 + (1 + delta) * (tc - 0.5))


def std_skewt_ppf(u, delta: float, omega: float):
    a, b, _ = hansen_constants(delta, omega)
    u = np.asarray(u, dtype=float)
    k = math.sqrt(omega / (omega - 2))
    left = u < (1 - delta) / 2
    q_left = stats.t.ppf(np.clip(u / (1 - delta), 0, 1), omega)
    q_right = stats.t.ppf(np.clip(0.5 + (u - (1 - delta) / 2) / (1 + delta), 0, 1), omega)
    x = np.where(left, (1 - delta) * q_left, (1 + delta) * q_right) / k
    return (x - a) / b


def skewt_rvs(mu, tau: float, delta: float, omega: float, size, rng: np.random.Generator):
    return mu + math.sqrt(tau) * std_skewt_ppf(rng.random(size), delta, omega)
