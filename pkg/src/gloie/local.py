"""Per-user embeddings for interacted items.

Two providers fill the local slot of the fusion model:

* :class:`LocalEncoder`, a light built-in encoder that gates a learned item
  embedding with three history features (decayed count, frequency, recency);
* :class:`LocalEmbeddingTable`, fixed vectors imported from a JSONL file, for
  plugging in embeddings produced by an external sequence model.

Both expose ``pairs_forward(users, items, feats)`` returning one d-vector per
(user, interacted item) pair, so fusion code does not care which is in use.
"""
from __future__ import annotations

import json
from typing import Sequence

import numpy as np

from .dataset import Instance, Vocab
from .diffcore import DTYPE, Param, affine_backward, affine_forward, glorot_uniform
from .errors import DataError

N_FEATURES = 3


def local_features(history: Sequence[Sequence[int]], tau: float):
    """Interacted items (ascending) and their ``[decayed count, n/T, tau**gap]`` rows.

    ``gap`` counts sets since the item's last occurrence (0 for the most recent set).
    """
    T = len(history)
    if T == 0:
        raise ValueError("history must contain at least one set")
    decayed: dict[int, float] = {}
    count: dict[int, int] = {}
    last: dict[int, int] = {}
    for k, s in enumerate(history):
        w = tau ** (T - 1 - k)
        for j in s:
            decayed[j] = decayed.get(j, 0.0) + w
            count[j] = count.get(j, 0) + 1
            last[j] = k
    items = np.array(sorted(decayed), dtype=np.int64)
    feats = np.array(
        [[decayed[j], count[j] / T, tau ** (T - 1 - last[j])] for j in items], dtype=DTYPE
    ).reshape(len(items), N_FEATURES)
    return items, feats


class LocalEncoder:
    """``z_ij = E[j] * (W_h @ f_ij + b_h)``."""

    learnable = True

    def __init__(self, n_items: int, dim: int = 32, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_items, self.dim = n_items, dim
        self.E = Param("local_E", glorot_uniform((n_items, dim), rng))
        self.W_h = Param("local_W_h", glorot_uniform((dim, N_FEATURES), rng))
        self.b_h = Param("local_b_h", np.zeros(dim))

    @property
    def params(self) -> list[Param]:
        return [self.E, self.W_h, self.b_h]

    def pairs_forward(self, users, items, feats):
        H = affine_forward(feats, self.W_h, self.b_h)
        return self.E.value[items] * H, (items, feats, H)

    def pairs_backward(self, dZ, cache) -> None:
        items, feats, H = cache
        gE = np.zeros_like(self.E.value)
        np.add.at(gE, items, dZ * H)
        self.E.accumulate(gE)
        affine_backward(dZ * self.E.value[items], feats, self.W_h, self.b_h)


def local_embed(instance: Instance, encoder: LocalEncoder, tau: float) -> dict[int, np.ndarray]:
    """Embeddings for every item the user interacted with, keyed by item index."""
    items, feats = local_features(instance.history, tau)
    Z, _ = encoder.pairs_forward(None, items, feats)
    return {int(j): Z[r] for r, j in enumerate(items)}


class LocalEmbeddingTable:
    """Fixed (user, item) -> vector map, defined only on interacted pairs."""

    learnable = False

    def __init__(self, dim: int, entries: dict[tuple[str, int], np.ndarray] | None = None):
        self.dim = dim
        self.entries: dict[tuple[str, int], np.ndarray] = {}
        for key, vec in (entries or {}).items():
            self.add(key[0], key[1], vec)

    @property
    def params(self) -> list[Param]:
        return []

    def add(self, user: str, item: int, vec) -> None:
        vec = np.asarray(vec, dtype=DTYPE)
        if vec.shape != (self.dim,):
            raise DataError(f"embedding for ({user!r}, {item}) has shape {vec.shape}, expected ({self.dim},)")
        if (user, item) in self.entries:
            raise DataError(f"duplicate embedding for ({user!r}, {item})")
        self.entries[(user, item)] = vec

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        return (
            isinstance(other, LocalEmbeddingTable)
            and self.dim == other.dim
            and self.entries.keys() == other.entries.keys()
            and all(np.array_equal(v, other.entries[k]) for k, v in self.entries.items())
        )

    def pairs_forward(self, users, items, feats):
        Z = np.empty((len(items), self.dim), dtype=DTYPE)
        for r, (u, j) in enumerate(zip(users, items)):
            try:
                Z[r] = self.entries[(u, int(j))]
            except KeyError:
                raise DataError(f"no local embedding for interacted pair ({u!r}, {int(j)})") from None
        return Z, None

    def pairs_backward(self, dZ, cache) -> None:
        pass

    def save(self, path, vocab: Vocab) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"dim": self.dim}) + "\n")
            for (u, j), vec in self.entries.items():
                fh.write(json.dumps({"user": u, "item": vocab.items[j], "vec": vec.tolist()}) + "\n")


def load_external_embeddings(path, vocab: Vocab) -> LocalEmbeddingTable:
    """Read ``{"dim": d}`` then ``{"user", "item", "vec"}`` lines."""
    with open(path, encoding="utf-8") as fh:
        lines = [(n, ln) for n, ln in enumerate(fh, start=1) if ln.strip()]
    if not lines:
        raise DataError(f"{path}: empty embedding file")
    try:
        head = json.loads(lines[0][1])
        dim = int(head["dim"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError):
        raise DataError(f"{path}: first line must be {{\"dim\": <int>}}") from None
    table = LocalEmbeddingTable(dim)
    for lineno, line in lines[1:]:
        try:
            rec = json.loads(line)
            user, item, vec = str(rec["user"]), str(rec["item"]), rec["vec"]
        except (json.JSONDecodeError, KeyError, TypeError):
            raise DataError(f"{path}: line {lineno}: malformed embedding record") from None
        if item not in vocab:
            raise DataError(f"{path}: line {lineno}: unknown item id {item!r}")
        try:
            table.add(user, vocab.index[item], vec)
        except DataError as e:
            raise DataError(f"{path}: line {lineno}: {e}") from None
    return table


def check_coverage(table: LocalEmbeddingTable, instances: Sequence[Instance]) -> None:
    for inst in instances:
        for j in sorted(inst.interacted):
            if (inst.user_id, j) not in table.entries:
                raise DataError(f"no local embedding for interacted pair ({inst.user_id!r}, {j})")
