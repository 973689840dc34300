import math

import numpy as np
import pytest

from gloie.dataset import Instance, make_instance
from gloie.diffcore import OptimizerConfig, gradient_check, sigmoid
from gloie.featurize import decayed_matrix, normalize_recon
from gloie.fusion import (
    FusionParams,
    GloieModel,
    affinity,
    attention_fuse,
    build_batch,
    fused_embedding,
    fusion_forward,
    init_bias_from_targets,
    rank_items,
    top_k,
    train_fusion,
    tsp_loss,
)
from gloie.gradcheck import check_fusion, random_gloie, random_instances
from gloie.local import LocalEmbeddingTable, LocalEncoder, local_embed
from gloie.synth import SynthConfig, generate_sequences
from gloie.vae import VaeModel, reconstruct, train_vae


def params_with(d, rng, **over):
    fp = FusionParams(d, rng=rng)
    for name, val in over.items():
        getattr(fp, name).value = np.asarray(val, dtype=float)
    return fp


def test_attention_zero_mats_is_midpoint(rng):
    fp = params_with(3, rng, Wq=np.zeros((3, 3)), Wk=np.zeros((3, 3)))
    z = rng.normal(size=3)
    q = 0.3 * fp.w_star.value
    np.testing.assert_allclose(attention_fuse(0.3, z, fp), 0.5 * q + 0.5 * z, atol=1e-15)


def test_attention_equal_points(rng):
    fp = FusionParams(4, rng=rng)
    q = -0.2 * fp.w_star.value
    np.testing.assert_allclose(attention_fuse(-0.2, q, fp), q, atol=1e-15)


def test_attention_hand_oracle(rng):
    fp = FusionParams(4, rng=rng)
    z, xt = rng.normal(size=4), 0.37
    q = [xt * w for w in fp.w_star.value]
    qq = [sum(fp.Wq.value[i, k] * q[k] for k in range(4)) for i in range(4)]
    kk = [sum(fp.Wk.value[i, k] * z[k] for k in range(4)) for i in range(4)]
    a = 1 / (1 + math.exp(-sum(x * y for x, y in zip(qq, kk))))
    expect = [a * qi + (1 - a) * zi for qi, zi in zip(q, z)]
    np.testing.assert_allclose(attention_fuse(xt, z, fp), expect, atol=1e-14)


def test_fused_branches(rng):
    fp = params_with(3, rng, w0=[1.0, 0.0, 0.0], Wq=np.zeros((3, 3)), Wk=np.zeros((3, 3)))
    x_hat = np.array([2.0, 4.0])
    x_til = normalize_recon(x_hat)
    assert fused_embedding(0, x_hat, x_til, {}, set(), fp).tolist() == [2.0, 0.0, 0.0]
    z = np.array([0.0, 2.0, 0.0])
    out = fused_embedding(1, x_hat, x_til, {1: z}, {1}, fp)
    np.testing.assert_allclose(out, 0.5 * 0.5 * fp.w0.value + 0.5 * z)
    with pytest.raises(KeyError):
        fused_embedding(1, x_hat, x_til, {}, {1}, fp)


def test_affinity_values(rng):
    fp = params_with(3, rng, w0=[1.0, 0.0, 0.0], b0=[0.0])
    assert affinity(np.zeros(3), fp) == 0.5
    assert affinity(np.array([1.0, 0.0, 0.0]), fp) == pytest.approx(0.73106, abs=1e-5)
    for _ in range(50):
        a, b = rng.normal(size=3), rng.normal(size=3)
        if a @ fp.w0.value > b @ fp.w0.value:
            assert affinity(a, fp) >= affinity(b, fp)


def test_tsp_loss_values(rng):
    M = 9
    y = (rng.random((2, M)) < 0.3).astype(float)
    assert tsp_loss(y, np.full((2, M), 0.5)) == pytest.approx(M * math.log(2))
    assert tsp_loss(y, y) == pytest.approx(-M * math.log(1 - 1e-7), rel=1e-9)
    p = rng.uniform(0.01, 0.99, size=(2, M))
    rows = [-sum(y[r, j] * math.log(p[r, j]) + (1 - y[r, j]) * math.log(1 - p[r, j]) for j in range(M))
            for r in range(2)]
    assert tsp_loss(y, p) == pytest.approx(sum(rows) / 2, abs=1e-10)


def test_forward_matches_per_item_oracle(rng):
    M, d = 10, 4
    model = random_gloie(rng, M, 5, d, "tweedie", tied=False)
    insts = random_instances(rng, 6, M)
    out = fusion_forward(model, build_batch(insts, M, model.tau))
    for r, inst in enumerate(insts):
        x = decayed_matrix([inst.history], model.tau, M)[0]
        x_hat = reconstruct(x, model.vae)
        x_til = normalize_recon(x_hat)
        local = local_embed(inst, model.local, model.tau)
        for j in range(M):
            zf = fused_embedding(j, x_hat, x_til, local, inst.interacted, model.fusion)
            assert out["scores"][r, j] == pytest.approx(affinity(zf, model.fusion), abs=1e-12)


@pytest.mark.parametrize("tied", [True, False])
@pytest.mark.parametrize("joint", [False, True])
def test_gradients(rng, tied, joint):
    # the loss is O(10), so at h=1e-5 central differences resolve about 1e-10 absolute;
    # a 1e-6 floor keeps near-zero gradients from turning roundoff into relative error
    errs = [check_fusion(rng, tied=tied, joint=joint, floor=1e-6) for _ in range(10)]
    assert max(errs) < 1e-4


def test_gradients_external_table(rng):
    M, d = 6, 3
    model = random_gloie(rng, M, 4, d, "gaussian", tied=True)
    insts = random_instances(rng, 3, M)
    model.local = LocalEmbeddingTable(d, {(i.user_id, j): rng.normal(size=d) for i in insts for j in i.interacted})
    batch = build_batch(insts, M, model.tau)
    fn = lambda: fusion_forward(model, batch, backward=True)["loss"]
    assert gradient_check(fn, model.trainable()) < 1e-4


def test_tied_shares_storage(rng):
    fp = FusionParams(3, tied=True, rng=rng)
    assert fp.w_star is fp.w0 and len(fp.params) == 4
    fp = FusionParams(3, tied=False, rng=rng)
    assert fp.w_star is not fp.w0 and len(fp.params) == 5


def test_order_preserved_for_non_interacted(rng):
    for _ in range(200):
        M = int(rng.integers(3, 13))
        model = random_gloie(rng, M, int(rng.integers(1, 9)), int(rng.integers(1, 9)), "tweedie", tied=True)
        insts = random_instances(rng, 3, M)
        batch = build_batch(insts, M, model.tau)
        out = fusion_forward(model, batch)
        x_hat = reconstruct(batch.X, model.vae)
        for r in range(len(insts)):
            free = np.nonzero(~batch.mask[r])[0]
            for a in free:
                for b in free:
                    if x_hat[r, a] > x_hat[r, b]:
                        assert out["scores"][r, a] >= out["scores"][r, b]
                        assert out["logits"][r, a] > out["logits"][r, b]


def test_bias_init_matches_base_rate(rng):
    fp = FusionParams(2, rng=rng)
    Y = np.zeros((4, 10))
    Y[:, :2] = 1
    init_bias_from_targets(fp, Y)
    assert float(sigmoid(fp.b0.value[0])) == pytest.approx(0.2)


# -- training on the synthetic fixture

@pytest.fixture(scope="module")
def fixture_model():
    seqs = generate_sequences(SynthConfig(n_users=600, n_items=80, seed=2))
    index = {f"i{j:02d}": j for j in range(80)}
    from gloie.dataset import UserSequence
    insts = [make_instance(UserSequence(u, tuple(tuple(sorted(index[i] for i in s)) for s in sets)), 80)
             for u, sets in seqs]
    vae = VaeModel(80, 16, rng=np.random.default_rng(0), tau=0.6)
    train_vae(decayed_matrix([i.history for i in insts], 0.6, 80), vae, epochs=10, batch_size=32)
    return vae, insts


def fresh(vae, seed=0):
    rng = np.random.default_rng(seed)
    fp = FusionParams(8, rng=rng)
    return GloieModel(vae, LocalEncoder(vae.n_items, 8, rng=rng), fp, 0.6)


def test_zero_epochs_changes_nothing(fixture_model):
    vae, insts = fixture_model
    model = fresh(vae)
    before = [p.value.copy() for p in model.trainable(joint=True)]
    rep = train_fusion(model, build_batch(insts, 80, 0.6), epochs=0)
    assert rep["epoch_loss"] == []
    assert all(np.array_equal(a, p.value) for a, p in zip(before, model.trainable(joint=True)))


def test_loss_decreases_first_five_epochs(fixture_model):
    vae, insts = fixture_model
    model = fresh(vae)
    batch = build_batch(insts, 80, 0.6)
    init_bias_from_targets(model.fusion, batch.Y)
    loss = train_fusion(model, batch, epochs=5, batch_size=32)["epoch_loss"]
    assert all(b <= a for a, b in zip(loss, loss[1:]))


def test_frozen_vae_untouched(fixture_model):
    vae, insts = fixture_model
    before = [p.value.copy() for p in vae.params]
    train_fusion(fresh(vae), build_batch(insts[:100], 80, 0.6), epochs=2, batch_size=32)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, vae.params))


def test_joint_mode_moves_vae(fixture_model):
    vae, insts = fixture_model
    vae_copy = VaeModel(80, 16, init="zeros")
    for p, q in zip(vae_copy.params, vae.params):
        p.value = q.value.copy()
    train_fusion(fresh(vae_copy), build_batch(insts[:100], 80, 0.6), epochs=1, batch_size=32, joint=True)
    assert not np.array_equal(vae_copy.W_dec.value, vae.W_dec.value)


def test_training_deterministic(tmp_path, fixture_model):
    vae, insts = fixture_model
    batch = build_batch(insts[:200], 80, 0.6)
    for run in range(2):
        m = fresh(vae, seed=4)
        train_fusion(m, batch, epochs=2, batch_size=32, seed=9, optimizer=OptimizerConfig(lr=0.01))
        m.save(tmp_path / f"f{run}")
    assert (tmp_path / "f0.bin").read_bytes() == (tmp_path / "f1.bin").read_bytes()
    loaded = GloieModel.load(tmp_path / "f0", vae)
    out_a = fusion_forward(loaded, batch)["logits"]
    out_b = fusion_forward(m, batch)["logits"]
    assert np.array_equal(out_a, out_b)


# -- ranking

def test_top_k_rules(rng):
    assert top_k(np.zeros(6), 3).tolist() == [0, 1, 2]
    assert top_k(np.arange(6.0), 3).tolist() == [5, 4, 3]
    with pytest.raises(ValueError):
        top_k(np.zeros(3), 4)
    s = rng.integers(0, 4, size=30).astype(float)
    expect = sorted(range(30), key=lambda j: (-s[j], j))[:10]
    assert top_k(s, 10).tolist() == expect


def test_zero_init_ranks_by_index():
    vae = VaeModel(8, 2, init="zeros")
    fp = FusionParams(3, init="zeros")
    model = GloieModel(vae, LocalEncoder(8, 3), fp, 0.6)
    insts = [Instance("u", ({5, 6},), (1,), 8)]
    assert rank_items(insts, model, 4).tolist() == [[0, 1, 2, 3]]
