"""Time-decayed history vectors and reconstruction normalization."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .diffcore import DTYPE


def _check_tau(tau: float) -> None:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"decay factor tau must lie in (0, 1), got {tau}")


def decayed_sum(history: Sequence[Sequence[int]], tau: float, n_items: int) -> np.ndarray:
    """Sum of set indicators, the most recent set weighted 1 and each older one by another ``tau``."""
    _check_tau(tau)
    if len(history) == 0:
        raise ValueError("history must contain at least one set")
    x = np.zeros(n_items, dtype=DTYPE)
    T = len(history)
    for k, items in enumerate(history, start=1):
        x[list(items)] += tau ** (T - k)
    return x


def decayed_matrix(histories: Sequence[Sequence[Sequence[int]]], tau: float, n_items: int) -> np.ndarray:
    return np.stack([decayed_sum(h, tau, n_items) for h in histories]) if histories else np.zeros((0, n_items))


def normalize_recon(x_hat) -> np.ndarray:
    """Scale so the largest entry is 0.5 (``x_hat / max - 0.5``).

    Rows whose maximum is not positive map to a constant -0.5. Accepts a single
    vector or a batch of rows.
    """
    x_hat = np.asarray(x_hat, dtype=DTYPE)
    mx = x_hat.max(axis=-1, keepdims=True)
    ok = mx > 0
    safe = np.where(ok, mx, 1.0)
    return np.where(ok, x_hat / safe - 0.5, -0.5)
