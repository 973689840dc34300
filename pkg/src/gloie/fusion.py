"""Attention fusion of VAE reconstructions with local item embeddings.

For a user with reconstruction ``x_hat`` (and its normalized form ``x_til``):

* interacted item j:  ``q = x_til[j] * w_star``,
  ``alpha = sigmoid((Wq q) . (Wk z_j))``, ``z_fused = alpha q + (1 - alpha) z_j``
* other items:        ``z_fused = x_hat[j] * w_star``

and the affinity is ``sigmoid(z_fused . w0 + b0)``. With ``w_star`` tied to
``w0`` the second branch scores ``sigmoid(x_hat[j] |w0|^2 + b0)``, which keeps
the VAE's ordering among never-interacted items.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import likelihoods as lk
from .dataset import Instance
from .diffcore import (
    DTYPE,
    OptimizerConfig,
    Param,
    adam_step,
    affine_backward,
    glorot_uniform,
    load_checkpoint,
    save_checkpoint,
    sigmoid,
    unique_params,
)
from .errors import DivergenceError
from .featurize import decayed_matrix, normalize_recon
from .local import LocalEmbeddingTable, LocalEncoder, local_features
from .vae import VaeModel, encode, head_mean, decode_eta

PROB_CLAMP = 1e-7


class FusionParams:
    def __init__(self, dim: int, tied: bool = True, rng: np.random.Generator | None = None, init: str = "glorot"):
        rng = rng if rng is not None else np.random.default_rng(0)
        if init == "zeros":
            w = lambda shape: np.zeros(shape)
        else:
            w = lambda shape: glorot_uniform(shape, rng)
        self.dim, self.tied = dim, tied
        self.Wq = Param("fusion_Wq", w((dim, dim)))
        self.Wk = Param("fusion_Wk", w((dim, dim)))
        self.w0 = Param("fusion_w0", w((1, dim))[0])
        self.b0 = Param("fusion_b0", np.zeros(1))
        self.w_star = self.w0 if tied else Param("fusion_w_star", w((1, dim))[0])

    @property
    def params(self) -> list[Param]:
        return unique_params([self.Wq, self.Wk, self.w0, self.b0, self.w_star])


def init_bias_from_targets(params: FusionParams, Y) -> None:
    """Set ``b0`` to the log-odds of the positive rate in ``Y``."""
    rate = float(np.clip(np.mean(Y), PROB_CLAMP, 1.0 - PROB_CLAMP))
    params.b0.value[:] = np.log(rate / (1.0 - rate))


def attention_fuse(x_til: float, z, params: FusionParams) -> np.ndarray:
    q = x_til * params.w_star.value
    a = float((params.Wq.value @ q) @ (params.Wk.value @ np.asarray(z, dtype=DTYPE)))
    alpha = float(sigmoid(a))
    return alpha * q + (1.0 - alpha) * np.asarray(z, dtype=DTYPE)


def fused_embedding(j: int, x_hat, x_til, local: dict[int, np.ndarray], interacted, params: FusionParams):
    """Fused embedding of item ``j`` for one user; ``local`` maps interacted items to vectors."""
    if j in interacted:
        if j not in local:
            raise KeyError(f"missing local embedding for interacted item {j}")
        return attention_fuse(float(x_til[j]), local[j], params)
    return float(x_hat[j]) * params.w_star.value


def affinity(z_fused, params: FusionParams) -> float:
    return float(sigmoid(np.asarray(z_fused, dtype=DTYPE) @ params.w0.value + params.b0.value[0]))


def tsp_loss(y, y_hat) -> float:
    """Multi-label binary cross-entropy, summed over items and averaged over rows."""
    y = np.atleast_2d(np.asarray(y, dtype=DTYPE))
    p = np.clip(np.atleast_2d(np.asarray(y_hat, dtype=DTYPE)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    per_row = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p), axis=-1)
    return float(per_row.mean())


@dataclass
class FusionBatch:
    """Everything stage 2 needs for a block of users, in dense/pair form."""

    users: list[str]
    X: np.ndarray          # (B, M) decayed history sums
    Y: np.ndarray          # (B, M) binary next-set targets
    mask: np.ndarray       # (B, M) interacted
    pair_rows: np.ndarray  # (P,)
    pair_items: np.ndarray  # (P,)
    feats: np.ndarray      # (P, 3)
    offsets: np.ndarray    # (B + 1,) pair ranges per row

    def __len__(self):
        return len(self.users)

    def subset(self, idx) -> "FusionBatch":
        idx = np.asarray(idx, dtype=np.int64)
        spans = [np.arange(self.offsets[r], self.offsets[r + 1]) for r in idx]
        sel = np.concatenate(spans) if spans else np.zeros(0, dtype=np.int64)
        counts = np.diff(self.offsets)[idx]
        return FusionBatch(
            users=[self.users[r] for r in idx],
            X=self.X[idx],
            Y=self.Y[idx],
            mask=self.mask[idx],
            pair_rows=np.repeat(np.arange(len(idx)), counts),
            pair_items=self.pair_items[sel],
            feats=self.feats[sel],
            offsets=np.concatenate([[0], np.cumsum(counts)]).astype(np.int64),
        )


def build_batch(instances: Sequence[Instance], n_items: int, tau: float) -> FusionBatch:
    B = len(instances)
    X = decayed_matrix([inst.history for inst in instances], tau, n_items)
    Y = np.zeros((B, n_items), dtype=DTYPE)
    mask = np.zeros((B, n_items), dtype=bool)
    rows, items, feats, offsets = [], [], [], [0]
    for r, inst in enumerate(instances):
        Y[r, list(inst.target_items)] = 1.0
        it, f = local_features(inst.history, tau)
        mask[r, it] = True
        rows.append(np.full(len(it), r, dtype=np.int64))
        items.append(it)
        feats.append(f)
        offsets.append(offsets[-1] + len(it))
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return FusionBatch(
        users=[inst.user_id for inst in instances],
        X=X,
        Y=Y,
        mask=mask,
        pair_rows=cat(rows, (0,)).astype(np.int64),
        pair_items=cat(items, (0,)).astype(np.int64),
        feats=cat(feats, (0, 3)),
        offsets=np.array(offsets, dtype=np.int64),
    )


class GloieModel:
    """A trained (or training) VAE, a local provider and fusion parameters."""

    def __init__(self, vae: VaeModel, local: LocalEncoder | LocalEmbeddingTable, fusion: FusionParams, tau: float):
        if local.dim != fusion.dim:
            raise ValueError(f"local dim {local.dim} != fusion dim {fusion.dim}")
        self.vae, self.local, self.fusion, self.tau = vae, local, fusion, tau

    def trainable(self, joint: bool = False) -> list[Param]:
        ps = list(self.fusion.params) + list(self.local.params)
        if joint:
            ps += self.vae.params
        return unique_params(ps)

    def save(self, stem) -> None:
        named = {p.name: p for p in self.fusion.params}
        named.update({p.name: p for p in self.local.params})
        meta = {
            "kind": "fusion",
            "dim": self.fusion.dim,
            "tied": self.fusion.tied,
            "local": "builtin" if isinstance(self.local, LocalEncoder) else "external",
            "tau": self.tau,
        }
        save_checkpoint(stem, named, meta)

    @classmethod
    def load(cls, stem, vae: VaeModel, local_table: LocalEmbeddingTable | None = None) -> "GloieModel":
        tensors, meta = load_checkpoint(stem)
        fusion = FusionParams(meta["dim"], tied=meta["tied"], init="zeros")
        if meta["local"] == "builtin":
            local = LocalEncoder(vae.n_items, meta["dim"])
        else:
            if local_table is None:
                raise ValueError("checkpoint uses external local embeddings; pass the table")
            local = local_table
        for p in list(fusion.params) + list(local.params):
            p.value = tensors[p.name].copy()
        return cls(vae, local, fusion, meta["tau"])


def _vae_recon(X, vae: VaeModel):
    post_mean = encode(X, vae).mean
    eta = decode_eta(post_mean, vae)
    return post_mean, eta, head_mean(eta, vae.head)


def fusion_forward(model: GloieModel, batch: FusionBatch, backward: bool = False, joint: bool = False,
                   recon=None) -> dict:
    """Scores and mean loss for a batch; optionally accumulates gradients.

    ``recon`` may carry a precomputed ``x_hat`` (frozen VAE); it is ignored
    when ``joint`` is set since the VAE must then be differentiated.
    """
    fp = model.fusion
    B = len(batch)
    if recon is None or joint:
        post_mean, eta, x_hat = _vae_recon(batch.X, model.vae)
    else:
        x_hat = recon
    x_til = normalize_recon(x_hat)
    w_star, w0, b0 = fp.w_star.value, fp.w0.value, fp.b0.value[0]
    gain = float(w_star @ w0)
    S = x_hat * gain + b0

    rows, items = batch.pair_rows, batch.pair_items
    Z, cache = model.local.pairs_forward([batch.users[r] for r in rows], items, batch.feats)
    xt = x_til[rows, items]
    q = xt[:, None] * w_star
    u = q @ fp.Wq.value.T
    v = Z @ fp.Wk.value.T
    alpha = sigmoid(np.sum(u * v, axis=1))
    zf = alpha[:, None] * q + (1.0 - alpha[:, None]) * Z
    S[rows, items] = zf @ w0 + b0

    y_hat = sigmoid(S)
    loss = tsp_loss(batch.Y, y_hat)
    if not math.isfinite(loss):
        raise DivergenceError("fusion loss is not finite")
    out = {"loss": loss, "logits": S, "scores": y_hat}
    if not backward:
        return out

    inside = (y_hat > PROB_CLAMP) & (y_hat < 1.0 - PROB_CLAMP)
    dS = (y_hat - batch.Y) * inside / B
    fp.b0.accumulate(np.array([dS.sum()]))

    other = ~batch.mask
    g_gain = float(np.sum(dS * x_hat * other))
    fp.w_star.accumulate(g_gain * w0)
    fp.w0.accumulate(g_gain * w_star)

    ds_p = dS[rows, items]
    fp.w0.accumulate(ds_p @ zf)
    dzf = ds_p[:, None] * w0
    d_alpha = np.sum(dzf * (q - Z), axis=1)
    dq = alpha[:, None] * dzf
    dZ = (1.0 - alpha[:, None]) * dzf
    da = d_alpha * alpha * (1.0 - alpha)
    du = da[:, None] * v
    dv = da[:, None] * u
    dq += affine_backward(du, q, fp.Wq)[0]
    dZ += affine_backward(dv, Z, fp.Wk)[0]
    fp.w_star.accumulate(dq.T @ xt)
    model.local.pairs_backward(dZ, cache)

    if joint:
        d_xhat = dS * gain * other
        d_xtil = np.zeros_like(x_hat)
        np.add.at(d_xtil, (rows, items), dq @ w_star)
        _normalize_backward(x_hat, d_xtil, d_xhat)
        vae = model.vae
        if vae.head == "tweedie":
            d_eta = d_xhat * x_hat * ((eta > -lk.ETA_CLAMP) & (eta < lk.ETA_CLAMP))
        elif vae.head == "gaussian":
            d_eta = d_xhat
        else:
            d_eta = x_hat * (d_xhat - np.sum(d_xhat * x_hat, axis=1, keepdims=True))
        d_mean, _, _ = affine_backward(d_eta, post_mean, vae.W_dec, vae.b_dec)
        affine_backward(d_mean, batch.X, vae.W_mu, vae.b_mu)
    return out


def _normalize_backward(x_hat, d_xtil, d_xhat) -> None:
    """Add d(loss)/d(x_hat) through ``x_hat / max - 0.5`` into ``d_xhat`` in place."""
    mx = x_hat.max(axis=1)
    arg = x_hat.argmax(axis=1)
    ok = mx > 0
    r = np.nonzero(ok)[0]
    d_xhat[r] += d_xtil[r] / mx[r, None]
    d_mx = -np.sum(d_xtil[r] * x_hat[r], axis=1) / mx[r] ** 2
    d_xhat[r, arg[r]] += d_mx


def train_fusion(
    model: GloieModel,
    batch: FusionBatch,
    epochs: int = 30,
    batch_size: int = 256,
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
    joint: bool = False,
    val: FusionBatch | None = None,
) -> dict:
    """Adam on the multi-label loss. The VAE stays frozen unless ``joint``."""
    optimizer = optimizer or OptimizerConfig()
    rng = np.random.default_rng(seed)
    params = model.trainable(joint)
    recon = None if joint else _vae_recon(batch.X, model.vae)[2]
    val_recon = None if (joint or val is None) else _vae_recon(val.X, model.vae)[2]
    n = len(batch)
    epoch_loss, val_loss = [], []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            sub = batch.subset(idx)
            try:
                out = fusion_forward(model, sub, backward=True, joint=joint,
                                     recon=None if recon is None else recon[idx])
                adam_step(params, optimizer)
            except DivergenceError as e:
                raise DivergenceError(f"epoch {epoch} batch {bi}: {e}") from None
            total += out["loss"] * len(idx)
        epoch_loss.append(total / n)
        if val is not None and len(val):
            val_loss.append(fusion_forward(model, val, recon=val_recon)["loss"])
    return {
        "stage": "fusion",
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": optimizer.lr,
        "seed": seed,
        "joint": joint,
        "tied": model.fusion.tied,
        "epoch_loss": epoch_loss,
        "val_loss": val_loss,
    }


def top_k(scores, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row; ties go to the smaller index."""
    scores = np.asarray(scores, dtype=DTYPE)
    if k > scores.shape[-1]:
        raise ValueError(f"K={k} exceeds the number of items {scores.shape[-1]}")
    return np.argsort(-scores, axis=-1, kind="stable")[..., :k]


def score_instances(model: GloieModel, instances: Sequence[Instance]) -> tuple[np.ndarray, np.ndarray]:
    """(logits, affinities) for every item, shape (B, M)."""
    batch = build_batch(instances, model.vae.n_items, model.tau)
    out = fusion_forward(model, batch)
    return out["logits"], out["scores"]


def rank_items(instances: Sequence[Instance], model: GloieModel, k: int) -> np.ndarray:
    logits, _ = score_instances(model, instances)
    return top_k(logits, k)
