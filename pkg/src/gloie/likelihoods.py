"""Decoder likelihoods, the Gaussian KL term and the compound-Poisson sampler.

Per-row helpers (``*_rows``) take a batch of targets ``x`` with shape (B, M)
and the decoder pre-activation ``eta`` with the same shape, and return the
per-row loss together with ``d loss / d eta``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import DTYPE, Param, sigmoid

ETA_CLAMP = 30.0
POWER_EPS = 0.05
HEADS = ("tweedie", "gaussian", "multinomial")


def _check_power(p):
    if not np.all((np.asarray(p) > 1.0) & (np.asarray(p) < 2.0)):
        raise ValueError(f"Tweedie power must lie in (1, 2), got {p}")


def tweedie_loss(z, mu, p):
    """Negative Tweedie log-likelihood up to terms free of ``mu``.

    ``-z * mu**(1-p) / (1-p) + mu**(2-p) / (2-p)``, elementwise.
    """
    z = np.asarray(z, dtype=DTYPE)
    mu = np.asarray(mu, dtype=DTYPE)
    _check_power(p)
    if np.any(z < 0):
        raise ValueError("Tweedie target must be non-negative")
    if np.any(mu <= 0):
        raise ValueError("Tweedie mean must be positive")
    return -z * mu ** (1.0 - p) / (1.0 - p) + mu ** (2.0 - p) / (2.0 - p)


def tweedie_loss_grad_mu(z, mu, p):
    z = np.asarray(z, dtype=DTYPE)
    mu = np.asarray(mu, dtype=DTYPE)
    return -z * mu ** (-p) + mu ** (1.0 - p)


def tweedie_rows(x, eta, p):
    """Tweedie NLL with a log link.

    Returns ``(loss_per_row, d/d eta, d/d p)``; ``d/d p`` is the total over the
    batch (``p`` is a single global power).
    """
    eta_c = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
    inside = (eta > -ETA_CLAMP) & (eta < ETA_CLAMP)
    a = np.exp((1.0 - p) * eta_c)  # mu^(1-p)
    b = np.exp((2.0 - p) * eta_c)  # mu^(2-p)
    elem = -x * a / (1.0 - p) + b / (2.0 - p)
    d_eta = (-x * a + b) * inside
    d_p = (-x * a * (1.0 - eta_c * (1.0 - p)) / (1.0 - p) ** 2
           + b * (1.0 - eta_c * (2.0 - p)) / (2.0 - p) ** 2)
    return elem.sum(axis=-1), d_eta, float(d_p.sum())


def gaussian_nll(x, x_hat) -> float:
    """Unit-variance Gaussian NLL without constants: ``0.5 * sum((x - x_hat)**2)``."""
    d = np.asarray(x, dtype=DTYPE) - np.asarray(x_hat, dtype=DTYPE)
    return float(0.5 * np.sum(d * d))


def gaussian_rows(x, eta):
    d = eta - x
    return 0.5 * np.sum(d * d, axis=-1), d


def log_softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def multinomial_nll(x, logits) -> float:
    x = np.asarray(x, dtype=DTYPE)
    if not x.sum() > 0:
        raise ValueError("multinomial likelihood needs a positive total weight")
    return float(-np.sum(x * log_softmax(logits)))


def multinomial_rows(x, eta):
    if np.any(x.sum(axis=-1) <= 0):
        raise ValueError("multinomial likelihood needs a positive total weight in every row")
    ls = log_softmax(eta)
    loss = -np.sum(x * ls, axis=-1)
    d_eta = np.exp(ls) * x.sum(axis=-1, keepdims=True) - x
    return loss, d_eta


def kl_std_normal(mean, logvar):
    """KL(N(mean, exp(logvar)) || N(0, I)), summed over the last axis."""
    mean = np.asarray(mean, dtype=DTYPE)
    logvar = np.asarray(logvar, dtype=DTYPE)
    # expm1(lv) - lv >= 0 exactly in floating point, so the sum never dips below zero
    return 0.5 * np.sum((np.expm1(logvar) - logvar) + mean * mean, axis=-1)


def kl_std_normal_grad(mean, logvar):
    return np.asarray(mean, dtype=DTYPE), 0.5 * (np.exp(logvar) - 1.0)


class TweedieHead:
    """Global Tweedie power, either fixed or learnable.

    A learnable power is stored as an unconstrained ``rho`` with
    ``p = 1 + eps + (1 - 2 eps) * sigmoid(rho)``, so ``p`` stays in [1.05, 1.95].
    """

    def __init__(self, p: float = 1.5, learnable: bool = True):
        lo, hi = 1.0 + POWER_EPS, 2.0 - POWER_EPS
        if not lo <= p <= hi:
            raise ValueError(f"Tweedie power must lie in [{lo}, {hi}], got {p}")
        self.learnable = learnable
        self.fixed_p = float(p)
        s = (p - lo) / (1.0 - 2.0 * POWER_EPS)
        s = min(max(s, 1e-12), 1.0 - 1e-12)
        self.rho = Param("tweedie_rho", np.array([np.log(s / (1.0 - s))]))

    @property
    def params(self) -> list[Param]:
        return [self.rho] if self.learnable else []

    @property
    def power(self) -> float:
        if not self.learnable:
            return self.fixed_p
        p = 1.0 + POWER_EPS + (1.0 - 2.0 * POWER_EPS) * float(sigmoid(self.rho.value[0]))
        return min(max(p, 1.0 + POWER_EPS), 2.0 - POWER_EPS)

    def rows(self, x, eta):
        loss, d_eta, d_p = tweedie_rows(x, eta, self.power)
        return loss, d_eta, d_p

    def backward_power(self, d_p: float) -> None:
        if self.learnable:
            s = float(sigmoid(self.rho.value[0]))
            self.rho.accumulate(np.array([d_p * (1.0 - 2.0 * POWER_EPS) * s * (1.0 - s)]))


@dataclass(frozen=True)
class CompoundPoissonParams:
    rate: float
    shape: float
    rate_g: float

    def __post_init__(self):
        if not (self.rate > 0 and self.shape > 0 and self.rate_g > 0):
            raise ValueError(f"compound Poisson parameters must be positive: {self}")

    @property
    def mean(self) -> float:
        return self.rate * self.shape / self.rate_g


def sample_compound_poisson(params: CompoundPoissonParams, rng, size: int | None = None):
    """Draw ``N ~ Poisson(rate)`` then sum ``N`` Gamma(shape, rate_g) draws (0 when N = 0)."""
    n = np.atleast_1d(rng.poisson(params.rate, size=size if size is not None else 1))
    out = np.zeros(n.shape, dtype=DTYPE)
    total = int(n.sum())
    if total > 0:
        draws = rng.gamma(params.shape, 1.0 / params.rate_g, size=total)
        owner = np.repeat(np.arange(n.size), n)
        np.add.at(out, owner, draws)
    return out if size is not None else float(out[0])
