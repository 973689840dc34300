"""Loading, converting, splitting and instancing temporal set sequences.

Canonical on-disk format is JSON Lines, one user per line::

    {"user": "u1", "sets": [["a", "b"], ["b"]]}

with sets in chronological order.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)


class Vocab:
    """Bijection between external item ids and dense indices ``0..M-1``."""

    def __init__(self, items: Iterable[str] = ()):
        self.items: list[str] = []
        self.index: dict[str, int] = {}
        for it in items:
            self.add(it)

    def add(self, item: str) -> int:
        idx = self.index.get(item)
        if idx is None:
            idx = len(self.items)
            self.items.append(item)
            self.index[item] = idx
        return idx

    def __len__(self):
        return len(self.items)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.items == other.items

    def __contains__(self, item):
        return item in self.index

    def save(self, path):
        Path(path).write_text(json.dumps({"items": self.items}) + "\n")

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text())["items"])


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    sets: tuple[tuple[int, ...], ...]

    @property
    def length(self) -> int:
        return len(self.sets)


@dataclass(frozen=True)
class Instance:
    user_id: str
    history: tuple[tuple[int, ...], ...]
    target_items: tuple[int, ...]
    n_items: int

    @property
    def target(self) -> np.ndarray:
        y = np.zeros(self.n_items)
        y[list(self.target_items)] = 1.0
        return y

    @property
    def interacted(self) -> frozenset:
        return frozenset(j for s in self.history for j in s)


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.7
    val: float = 0.1
    test: float = 0.2
    seed: int = 0

    def __post_init__(self):
        fr = (self.train, self.val, self.test)
        if any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")


def _parse_record(line: str, lineno: int) -> tuple[str, list[list[str]]]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"line {lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(rec, dict) or "user" not in rec or "sets" not in rec:
        raise DataError(f"line {lineno}: expected an object with 'user' and 'sets'")
    sets = rec["sets"]
    if not isinstance(sets, list) or not all(isinstance(s, list) for s in sets):
        raise DataError(f"line {lineno}: 'sets' must be a list of lists")
    for k, s in enumerate(sets):
        if not s:
            raise DataError(f"line {lineno}: set {k} is empty")
        if not all(isinstance(it, (str, int)) and not isinstance(it, bool) for it in s):
            raise DataError(f"line {lineno}: set {k} has a non-string item id")
    return str(rec["user"]), [[str(it) for it in s] for s in sets]


def load_dataset(path, vocab: Vocab | None = None) -> tuple[Vocab, list[UserSequence]]:
    """Read a canonical JSONL file.

    With ``vocab`` given, items are mapped into it and unknown ids are an
    error; otherwise a vocabulary is built in order of first appearance.
    Users with fewer than two sets are skipped with a warning.
    """
    fixed = vocab is not None
    vocab = vocab if fixed else Vocab()
    sequences: list[UserSequence] = []
    seen_users: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            user, raw_sets = _parse_record(line, lineno)
            if user in seen_users:
                raise DataError(f"line {lineno}: duplicate user {user!r}")
            seen_users.add(user)
            if len(raw_sets) < 2:
                log.warning("line %d: user %r has %d set(s), need at least 2; skipped", lineno, user, len(raw_sets))
                continue
            sets = []
            for s in raw_sets:
                idx = []
                for it in dict.fromkeys(s):
                    if fixed:
                        if it not in vocab:
                            raise DataError(f"line {lineno}: item {it!r} not in vocabulary")
                        idx.append(vocab.index[it])
                    else:
                        idx.append(vocab.add(it))
                sets.append(tuple(sorted(idx)))
            sequences.append(UserSequence(user, tuple(sets)))
    if len(vocab) == 0:
        raise DataError(f"{path}: no items found")
    return vocab, sequences


def save_dataset(path, vocab: Vocab, sequences: Sequence[UserSequence]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            sets = [[vocab.items[j] for j in s] for s in seq.sets]
            fh.write(json.dumps({"user": seq.user_id, "sets": sets}) + "\n")


def _order_key(values: list[str]):
    try:
        return {v: (float(v), v) for v in values}
    except ValueError:
        return {v: (0.0, v) for v in values}


def convert_csv(path, out_path, user_col: str, order_col: str, item_col: str) -> int:
    """Group ``(user, order, item)`` rows into canonical JSONL.

    Rows sharing ``(user, order)`` form one set. Output is sorted by user id,
    then by order (numerically when every order value parses as a number).
    Returns the number of users written.
    """
    groups: dict[str, dict[str, set[str]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in (user_col, order_col, item_col) if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        for row in reader:
            lineno = reader.line_num
            if None in row or any(row.get(c) is None for c in header):
                raise DataError(f"{path}: line {lineno}: wrong number of fields")
            u, o, it = (row[c].strip() for c in (user_col, order_col, item_col))
            if not u or not o or not it:
                raise DataError(f"{path}: line {lineno}: empty user, order or item")
            groups.setdefault(u, {}).setdefault(o, set()).add(it)
    if not groups:
        log.warning("%s: no data rows; writing an empty dataset", path)
    with open(out_path, "w", encoding="utf-8") as out:
        for u in sorted(groups):
            by_order = groups[u]
            key = _order_key(list(by_order))
            sets = [sorted(by_order[o]) for o in sorted(by_order, key=key.__getitem__)]
            out.write(json.dumps({"user": u, "sets": sets}) + "\n")
    return len(groups)


def split_sizes(n: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_train = int(round(spec.train * n))
    n_val = int(round(spec.val * n))
    return n_train, n_val, n - n_train - n_val


def split_users(sequences: Sequence[UserSequence], spec: SplitSpec):
    """Seeded partition of users into (train, val, test) lists."""
    n = len(sequences)
    if n < 10:
        raise DataError(f"need at least 10 users to split, got {n}")
    n_train, n_val, _ = split_sizes(n, spec)
    perm = np.random.default_rng(spec.seed).permutation(n)
    pick = lambda idx: [sequences[i] for i in sorted(idx)]
    return pick(perm[:n_train]), pick(perm[n_train:n_train + n_val]), pick(perm[n_train + n_val:])


def make_instance(seq: UserSequence, n_items: int) -> Instance:
    """All sets but the last become the history; the last set is the target."""
    if seq.length < 2:
        raise DataError(f"user {seq.user_id!r} has {seq.length} set(s); need at least 2")
    return Instance(seq.user_id, seq.sets[:-1], seq.sets[-1], n_items)
