"""Randomized finite-difference checks for every hand-written backward pass."""
from __future__ import annotations

import numpy as np

from . import likelihoods as lk
from .dataset import Instance
from .diffcore import Param, gradient_check
from .fusion import FusionParams, GloieModel, build_batch, fusion_forward
from .local import LocalEncoder
from .vae import VaeModel, vae_forward

CHECKS = ("tweedie", "gaussian", "multinomial", "kl", "vae", "fusion")


def _sparse_counts(rng, shape, density=0.3):
    return rng.uniform(0.1, 2.0, size=shape) * (rng.random(shape) < density)


def check_tweedie(rng) -> float:
    M = int(rng.integers(1, 13))
    z = _sparse_counts(rng, (3, M), 0.5)
    head = lk.TweedieHead(float(rng.uniform(1.1, 1.9)), learnable=True)
    eta = Param("eta", rng.normal(0.0, 1.0, size=(3, M)))
    mu = Param("mu", np.exp(rng.normal(0.0, 1.0, size=(3, M))))
    p = head.power

    def fn():
        loss, d_eta, d_p = head.rows(z, eta.value)
        eta.accumulate(d_eta)
        head.backward_power(d_p)
        mu.accumulate(lk.tweedie_loss_grad_mu(z, mu.value, p))
        return float(loss.sum() + lk.tweedie_loss(z, mu.value, p).sum())

    return gradient_check(fn, [eta, mu, head.rho], rng=rng)


def check_gaussian(rng) -> float:
    M = int(rng.integers(1, 13))
    x = rng.normal(size=(2, M))
    eta = Param("eta", rng.normal(size=(2, M)))

    def fn():
        loss, d = lk.gaussian_rows(x, eta.value)
        eta.accumulate(d)
        return float(loss.sum())

    return gradient_check(fn, [eta], rng=rng)


def check_multinomial(rng) -> float:
    M = int(rng.integers(2, 13))
    x = _sparse_counts(rng, (2, M), 0.5)
    x[:, 0] += 0.5
    eta = Param("eta", rng.normal(0.0, 2.0, size=(2, M)))

    def fn():
        loss, d = lk.multinomial_rows(x, eta.value)
        eta.accumulate(d)
        return float(loss.sum())

    return gradient_check(fn, [eta], rng=rng)


def check_kl(rng) -> float:
    d = int(rng.integers(1, 9))
    mean = Param("mean", rng.normal(size=d))
    logvar = Param("logvar", rng.normal(size=d))

    def fn():
        gm, glv = lk.kl_std_normal_grad(mean.value, logvar.value)
        mean.accumulate(gm)
        logvar.accumulate(glv)
        return float(lk.kl_std_normal(mean.value, logvar.value))

    return gradient_check(fn, [mean, logvar], rng=rng)


def check_vae(rng, head: str | None = None) -> float:
    M, d = int(rng.integers(2, 13)), int(rng.integers(1, 9))
    head = head or lk.HEADS[int(rng.integers(len(lk.HEADS)))]
    model = VaeModel(M, d, head, rng=rng, tweedie_p=float(rng.uniform(1.2, 1.8)), learn_power=True)
    for p in model.params:
        p.value += rng.normal(0.0, 0.1, size=p.shape)
    X = _sparse_counts(rng, (4, M), 0.4)
    X[:, 0] += 0.3
    noise = rng.standard_normal((4, d))
    return gradient_check(lambda: vae_forward(X, model, noise, backward=True)["loss"], model.params, rng=rng)


def random_instances(rng, n_users: int, n_items: int) -> list[Instance]:
    out = []
    for u in range(n_users):
        T = int(rng.integers(1, 5))
        hist = tuple(
            tuple(sorted(rng.choice(n_items, size=int(rng.integers(1, min(4, n_items) + 1)), replace=False).tolist()))
            for _ in range(T)
        )
        target = tuple(sorted(rng.choice(n_items, size=int(rng.integers(1, 3)), replace=False).tolist()))
        out.append(Instance(f"u{u}", hist, target, n_items))
    return out


def random_gloie(rng, M: int, d_z: int, d: int, head: str, tied: bool, tau: float = 0.6) -> GloieModel:
    vae = VaeModel(M, d_z, head, rng=rng, tweedie_p=1.5, learn_power=False)
    for p in vae.params:
        p.value += rng.normal(0.0, 0.2, size=p.shape)
    local = LocalEncoder(M, d, rng=rng)
    local.b_h.value += rng.normal(0.0, 0.5, size=d)
    fusion = FusionParams(d, tied=tied, rng=rng)
    fusion.b0.value[:] = rng.normal()
    return GloieModel(vae, local, fusion, tau)


def check_fusion(rng, tied: bool | None = None, joint: bool | None = None, head: str | None = None,
                 floor: float = 1e-8) -> float:
    M, d = int(rng.integers(3, 13)), int(rng.integers(1, 9))
    tied = bool(rng.integers(2)) if tied is None else tied
    joint = bool(rng.integers(2)) if joint is None else joint
    head = head or lk.HEADS[int(rng.integers(len(lk.HEADS)))]
    model = random_gloie(rng, M, int(rng.integers(1, 9)), d, head, tied)
    batch = build_batch(random_instances(rng, 3, M), M, model.tau)
    params = model.trainable(joint)
    fn = lambda: fusion_forward(model, batch, backward=True, joint=joint)["loss"]
    return gradient_check(fn, params, rng=rng, floor=floor)


def run_suite(n_instances: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per check over ``n_instances`` random instances each."""
    rng = np.random.default_rng(seed)
    fns = {
        "tweedie": check_tweedie,
        "gaussian": check_gaussian,
        "multinomial": check_multinomial,
        "kl": check_kl,
        "vae": check_vae,
        "fusion": check_fusion,
    }
    return {name: max(fn(rng) for _ in range(n_instances)) for name, fn in fns.items()}
