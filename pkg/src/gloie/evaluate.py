"""Top-K ranking metrics and popularity baselines."""
from __future__ import annotations

import math
from collections import Counter
from typing import Iterable, Sequence

import numpy as np

DEFAULT_KS = (10, 20, 40)
METRICS = ("recall", "ndcg", "phr")


def _check(topk, truth, k):
    if not truth:
        raise ValueError("ground-truth set is empty")
    if len(topk) < k:
        raise ValueError(f"ranking has {len(topk)} items, need at least K={k}")


def recall_at_k(topk: Sequence[int], truth: Iterable[int], k: int) -> float:
    truth = set(truth)
    _check(topk, truth, k)
    return len(set(topk[:k]) & truth) / len(truth)


def ndcg_at_k(topk: Sequence[int], truth: Iterable[int], k: int) -> float:
    """Binary-gain NDCG with a ``log2(rank + 1)`` discount."""
    truth = set(truth)
    _check(topk, truth, k)
    dcg = sum(1.0 / math.log2(r + 2) for r, item in enumerate(topk[:k]) if item in truth)
    idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(truth))))
    return dcg / idcg


def hit_at_k(topk: Sequence[int], truth: Iterable[int], k: int) -> bool:
    return bool(set(topk[:k]) & set(truth))


def phr_at_k(topks: Sequence[Sequence[int]], truths: Sequence[Iterable[int]], k: int) -> float:
    """Share of users whose top-K intersects their true next set."""
    if len(topks) == 0 or len(topks) != len(truths):
        raise ValueError("need one ranking per user and at least one user")
    return sum(hit_at_k(t, s, k) for t, s in zip(topks, truths)) / len(topks)


def evaluate_rankings(topks, truths, ks: Sequence[int] = DEFAULT_KS) -> dict:
    """``{"K": {"recall": .., "ndcg": .., "phr": ..}}`` averaged over users."""
    n = len(topks)
    if n == 0:
        raise ValueError("no users to evaluate")
    report = {}
    for k in ks:
        rec = math.fsum(recall_at_k(t, s, k) for t, s in zip(topks, truths)) / n
        nd = math.fsum(ndcg_at_k(t, s, k) for t, s in zip(topks, truths)) / n
        report[str(k)] = {"recall": rec, "ndcg": nd, "phr": phr_at_k(topks, truths, k)}
    return report


def item_counts(sequences, n_items: int) -> np.ndarray:
    """Number of sets each item appears in, over all given sequences."""
    counts = np.zeros(n_items, dtype=np.int64)
    for seq in sequences:
        for s in seq.sets:
            counts[list(s)] += 1
    return counts


def toppop_rank(counts, k: int | None = None) -> list[int]:
    """Items by descending count, ties by ascending index."""
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    return [int(j) for j in (order if k is None else order[:k])]


def personal_toppop_rank(history: Sequence[Sequence[int]], global_rank: Sequence[int], k: int) -> list[int]:
    """The user's own items by count (ties by index), then global order as backfill."""
    c = Counter(j for s in history for j in s)
    own = sorted(c, key=lambda j: (-c[j], j))
    seen = set(own)
    ranked = own + [j for j in global_rank if j not in seen]
    return ranked[:k]


def format_table(rows: dict[str, dict], ks: Sequence[int]) -> str:
    """Plain-text table: one row per model, columns K x (Recall, NDCG, PHR)."""
    name_w = max([len("Model")] + [len(n) for n in rows])
    cell = lambda vals: " " + " ".join(f"{v:>7}" for v in vals) + " "
    width = len(cell(METRICS))
    head1 = " " * name_w + " |" + "|".join(f"{'k = ' + str(k):^{width}}" for k in ks)
    head2 = f"{'Model':<{name_w}} |" + "|".join(cell(("Recall", "NDCG", "PHR")) for _ in ks)
    lines = [head1, head2, "-" * len(head2)]
    for name, rep in rows.items():
        cells = [cell([f"{rep[str(k)][m]:.4f}" for m in METRICS]) for k in ks]
        lines.append(f"{name:<{name_w}} |" + "|".join(cells))
    return "\n".join(lines) + "\n"
