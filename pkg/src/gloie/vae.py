"""One-layer VAE over decayed history vectors with a pluggable decoder head.

Encoder: two affine maps from the M-dim input to the posterior mean and
log-variance. Decoder: one affine map from the latent to per-item
pre-activations ``eta``, read through the head (``exp`` for Tweedie, identity
for Gaussian, softmax for multinomial).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import likelihoods as lk
from .diffcore import (
    DTYPE,
    OptimizerConfig,
    Param,
    adam_step,
    affine_backward,
    affine_forward,
    glorot_uniform,
    load_checkpoint,
    save_checkpoint,
)
from .errors import DivergenceError

LOGVAR_CLAMP = 10.0


@dataclass
class Posterior:
    mean: np.ndarray
    logvar: np.ndarray


class VaeModel:
    def __init__(
        self,
        n_items: int,
        latent_dim: int,
        head: str = "tweedie",
        *,
        rng: np.random.Generator | None = None,
        init: str = "glorot",
        tweedie_p: float = 1.5,
        learn_power: bool = False,
        tau: float | None = None,
    ):
        if head not in lk.HEADS:
            raise ValueError(f"unknown decoder head {head!r}; choose from {lk.HEADS}")
        if init not in ("glorot", "zeros"):
            raise ValueError(f"unknown init {init!r}")
        self.n_items, self.latent_dim, self.head = n_items, latent_dim, head
        self.tau = tau
        M, d = n_items, latent_dim
        if init == "zeros":
            w = lambda shape: np.zeros(shape)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            w = lambda shape: glorot_uniform(shape, rng)
        self.W_mu = Param("enc_mu_W", w((d, M)))
        self.b_mu = Param("enc_mu_b", np.zeros(d))
        self.W_lv = Param("enc_logvar_W", w((d, M)))
        self.b_lv = Param("enc_logvar_b", np.zeros(d))
        self.W_dec = Param("dec_W", w((M, d)))
        self.b_dec = Param("dec_b", np.zeros(M))
        self.tweedie = lk.TweedieHead(tweedie_p, learnable=learn_power) if head == "tweedie" else None

    @property
    def params(self) -> list[Param]:
        ps = [self.W_mu, self.b_mu, self.W_lv, self.b_lv, self.W_dec, self.b_dec]
        if self.tweedie is not None:
            ps += self.tweedie.params
        return ps

    @property
    def power(self) -> float | None:
        return self.tweedie.power if self.tweedie is not None else None

    def named_params(self) -> dict[str, Param]:
        named = {p.name: p for p in self.params}
        if self.tweedie is not None and not self.tweedie.learnable:
            named[self.tweedie.rho.name] = self.tweedie.rho
        return named

    def meta(self) -> dict:
        return {
            "kind": "vae",
            "n_items": self.n_items,
            "latent_dim": self.latent_dim,
            "head": self.head,
            "tau": self.tau,
            "learn_power": None if self.tweedie is None else self.tweedie.learnable,
            "fixed_power": None if self.tweedie is None else self.tweedie.fixed_p,
        }

    def save(self, stem) -> None:
        save_checkpoint(stem, self.named_params(), self.meta())

    @classmethod
    def load(cls, stem) -> "VaeModel":
        tensors, meta = load_checkpoint(stem)
        model = cls(
            meta["n_items"], meta["latent_dim"], meta["head"], init="zeros", tau=meta.get("tau"),
            tweedie_p=meta.get("fixed_power") or 1.5,
            learn_power=bool(meta.get("learn_power")),
        )
        for name, p in model.named_params().items():
            p.value = tensors[name].copy()
        return model


def encode(x, model: VaeModel) -> Posterior:
    x = np.asarray(x, dtype=DTYPE)
    if x.shape[-1] != model.n_items:
        raise ValueError(f"input has {x.shape[-1]} items, model expects {model.n_items}")
    mean = affine_forward(x, model.W_mu, model.b_mu)
    logvar = np.clip(affine_forward(x, model.W_lv, model.b_lv), -LOGVAR_CLAMP, LOGVAR_CLAMP)
    return Posterior(mean, logvar)


def reparameterize(post: Posterior, noise) -> np.ndarray:
    return post.mean + np.exp(0.5 * post.logvar) * np.asarray(noise, dtype=DTYPE)


def decode_eta(z, model: VaeModel) -> np.ndarray:
    return affine_forward(z, model.W_dec, model.b_dec)


def head_mean(eta, head: str) -> np.ndarray:
    if head == "tweedie":
        return np.exp(np.clip(eta, -lk.ETA_CLAMP, lk.ETA_CLAMP))
    if head == "gaussian":
        return eta
    return lk.softmax(eta)


def decode_mean(z, model: VaeModel) -> np.ndarray:
    return head_mean(decode_eta(z, model), model.head)


def reconstruct(x, model: VaeModel) -> np.ndarray:
    """Deterministic reconstruction: decoder mean at the posterior mean."""
    return decode_mean(encode(x, model).mean, model)


def vae_forward(X, model: VaeModel, noise, backward: bool = False) -> dict:
    """Negative ELBO averaged over rows, optionally accumulating gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    noise = np.atleast_2d(np.asarray(noise, dtype=DTYPE))
    B = X.shape[0]
    post = encode(X, model)
    lv_raw = affine_forward(X, model.W_lv, model.b_lv)
    std = np.exp(0.5 * post.logvar)
    z = post.mean + std * noise
    eta = decode_eta(z, model)
    d_p = 0.0
    if model.head == "tweedie":
        nll, d_eta, d_p = model.tweedie.rows(X, eta)
    elif model.head == "gaussian":
        nll, d_eta = lk.gaussian_rows(X, eta)
    else:
        nll, d_eta = lk.multinomial_rows(X, eta)
    kl = lk.kl_std_normal(post.mean, post.logvar)
    loss = float(np.mean(nll + kl))
    if not math.isfinite(loss):
        raise DivergenceError("VAE loss is not finite")
    if backward:
        scale = 1.0 / B
        d_eta = d_eta * scale
        d_z, _, _ = affine_backward(d_eta, z, model.W_dec, model.b_dec)
        kl_m, kl_lv = lk.kl_std_normal_grad(post.mean, post.logvar)
        d_mean = d_z + kl_m * scale
        d_lv = d_z * noise * 0.5 * std + kl_lv * scale
        d_lv = d_lv * ((lv_raw > -LOGVAR_CLAMP) & (lv_raw < LOGVAR_CLAMP))
        affine_backward(d_mean, X, model.W_mu, model.b_mu)
        affine_backward(d_lv, X, model.W_lv, model.b_lv)
        if model.tweedie is not None:
            model.tweedie.backward_power(d_p * scale)
    return {"loss": loss, "nll": float(np.mean(nll)), "kl": float(np.mean(kl))}


def vae_loss(x, model: VaeModel, noise, backward: bool = False) -> float:
    return vae_forward(x, model, noise, backward)["loss"]


def train_vae(
    X,
    model: VaeModel,
    epochs: int = 30,
    batch_size: int = 256,
    optimizer: OptimizerConfig | None = None,
    seed: int = 0,
) -> dict:
    """Minibatch Adam on the mean negative ELBO. Returns a JSON-able report."""
    X = np.asarray(X, dtype=DTYPE)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training data must be a non-empty (N, M) matrix")
    optimizer = optimizer or OptimizerConfig()
    rng = np.random.default_rng(seed)
    params = model.params
    n = X.shape[0]
    epoch_loss, epoch_kl, powers = [], [], []
    for epoch in range(epochs):
        order = rng.permutation(n)
        total, total_kl = 0.0, 0.0
        for bi, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            noise = rng.standard_normal((len(idx), model.latent_dim))
            try:
                out = vae_forward(X[idx], model, noise, backward=True)
                adam_step(params, optimizer)
            except DivergenceError as e:
                raise DivergenceError(f"epoch {epoch} batch {bi}: {e}") from None
            total += out["loss"] * len(idx)
            total_kl += out["kl"] * len(idx)
        epoch_loss.append(total / n)
        epoch_kl.append(total_kl / n)
        powers.append(model.power)
    return {
        "stage": "vae",
        "head": model.head,
        "epochs": epochs,
        "batch_size": batch_size,
        "lr": optimizer.lr,
        "seed": seed,
        "epoch_loss": epoch_loss,
        "epoch_kl": epoch_kl,
        "tweedie_power": powers if model.head == "tweedie" else None,
    }
