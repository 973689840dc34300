"""Seeded synthetic temporal-set data and a Tweedie mean-fitting harness.

The generator mixes two signals: every user belongs to a preference cluster
(a Zipf-weighted slice of the catalogue, shared across users) and, with
probability ``repeat_prob``, re-buys one of their own past items. The first
is what a global model can pick up, the second is local.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConvergenceError
from .likelihoods import _check_power

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 200
    n_clusters: int = 5
    t_min: int = 2
    t_max: int = 8
    mean_set_size: float = 1.5
    repeat_prob: float = 0.4
    zipf_s: float = 1.0
    cluster_size: int | None = None  # items per cluster; default n_items // n_clusters
    seed: int = 0

    def __post_init__(self):
        if min(self.n_users, self.n_items, self.n_clusters) < 1:
            raise ValueError("n_users, n_items and n_clusters must be >= 1")
        if self.t_min < 2 or self.t_max < self.t_min:
            raise ValueError(f"need 2 <= t_min <= t_max, got {self.t_min}, {self.t_max}")
        if not 0.0 <= self.repeat_prob < 1.0:
            raise ValueError(f"repeat_prob must lie in [0, 1), got {self.repeat_prob}")
        if self.zipf_s <= 0 or self.mean_set_size < 1:
            raise ValueError("zipf_s must be > 0 and mean_set_size >= 1")


def generate_sequences(cfg: SynthConfig) -> list[tuple[str, list[list[str]]]]:
    rng = np.random.default_rng(cfg.seed)
    M = cfg.n_items
    size = min(M, cfg.cluster_size or max(1, M // cfg.n_clusters))
    clusters = []
    for _ in range(cfg.n_clusters):
        members = rng.choice(M, size=size, replace=False)
        w = 1.0 / np.arange(1, size + 1) ** cfg.zipf_s
        clusters.append((members, w / w.sum()))

    width = len(str(M - 1))
    names = [f"i{j:0{width}d}" for j in range(M)]
    uwidth = len(str(cfg.n_users - 1))
    out = []
    for u in range(cfg.n_users):
        members, probs = clusters[rng.integers(cfg.n_clusters)]
        T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
        past: dict[int, int] = {}
        sets = []
        for _ in range(T):
            want = min(1 + int(rng.poisson(cfg.mean_set_size - 1.0)), size)
            basket: list[int] = []
            for _ in range(20 * want):
                if len(basket) >= want:
                    break
                if past and rng.random() < cfg.repeat_prob:
                    keys = np.fromiter(past, dtype=np.int64)
                    cnt = np.array([past[k] for k in keys], dtype=float)
                    j = int(keys[rng.choice(len(keys), p=cnt / cnt.sum())])
                else:
                    j = int(members[rng.choice(size, p=probs)])
                if j not in basket:
                    basket.append(j)
            for j in basket:
                past[j] = past.get(j, 0) + 1
            sets.append(sorted(names[j] for j in basket))
        out.append((f"u{u:0{uwidth}d}", sets))
    return out


def generate_synthetic(cfg: SynthConfig, path) -> int:
    """Write the dataset as canonical JSONL; returns the number of users."""
    seqs = generate_sequences(cfg)
    with open(path, "w", encoding="utf-8") as fh:
        for user, sets in seqs:
            fh.write(json.dumps({"user": user, "sets": sets}) + "\n")
    return len(seqs)


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)


@dataclass
class TweedieFit:
    mu_hat: float
    steps: int
    grad_norm: float


MU_FLOOR = 1e-6


def fit_tweedie_mu(samples, p: float, steps: int = 10_000, lr: float = 0.5, tol: float = 1e-6) -> TweedieFit:
    """Fit a single Tweedie mean by gradient descent on ``log mu``.

    The step size adapts (grow on an Armijo-accepted step, halve otherwise).
    Stops once ``|grad| <= tol * mu**(2-p)``, i.e. the relative gap between
    ``mu`` and the stationary point is below ``tol``.
    """
    z = np.asarray(samples, dtype=float)
    if z.size == 0:
        raise ValueError("need at least one sample")
    if np.any(z < 0):
        raise ValueError("Tweedie samples must be non-negative")
    _check_power(p)
    zbar = float(z.mean())  # the mean loss depends on the samples only through their mean

    def loss(theta):
        return -zbar * math.exp((1 - p) * theta) / (1 - p) + math.exp((2 - p) * theta) / (2 - p)

    def grad(theta):
        return -zbar * math.exp((1 - p) * theta) + math.exp((2 - p) * theta)

    theta, t = 0.0, lr
    g = grad(theta)
    for step in range(1, steps + 1):
        if abs(g) <= tol * math.exp((2 - p) * theta):
            return TweedieFit(math.exp(theta), step - 1, abs(g))
        if math.exp(theta) < MU_FLOOR:
            log.warning("Tweedie mean fit hit the floor %g (all-zero samples?)", MU_FLOOR)
            return TweedieFit(MU_FLOOR, step - 1, abs(g))
        f0 = loss(theta)
        cand = theta - t * g
        try:
            f1 = loss(cand)
        except OverflowError:
            f1 = math.inf
        if f1 <= f0 - 1e-4 * t * g * g:
            theta, g = cand, grad(cand)
            t *= 2.0
        else:
            t *= 0.5
    raise ConvergenceError(f"Tweedie mean fit did not converge in {steps} steps (|grad| = {abs(g):.3e})")
