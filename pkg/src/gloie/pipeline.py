"""Two-stage training, evaluation and tau sweeps over a model directory.

A model directory holds::

    config.json       run configuration (echoed into every report)
    vocab.json        item vocabulary
    split.json        user ids per split
    item_counts.json  training-set item popularity (for Toppop)
    vae.json/.bin     stage-1 checkpoint
    fusion.json/.bin  stage-2 checkpoint (absent for --stage vae-only)
    report.json       training curves
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import Instance, SplitSpec, Vocab, load_dataset, make_instance, split_users
from .diffcore import OptimizerConfig
from .errors import ConfigError, DataError
from .evaluate import DEFAULT_KS, evaluate_rankings, format_table, item_counts, personal_toppop_rank, toppop_rank
from .featurize import decayed_matrix
from .fusion import FusionParams, GloieModel, build_batch, init_bias_from_targets, score_instances, top_k, train_fusion
from .likelihoods import HEADS
from .local import LocalEncoder, check_coverage, load_external_embeddings
from .vae import VaeModel, reconstruct, train_vae

log = logging.getLogger(__name__)

STAGES = ("full", "vae-only")


@dataclass
class RunConfig:
    tau: float = 0.6
    latent_dim: int = 128
    local_dim: int = 32
    head: str = "tweedie"
    vae_epochs: int = 30
    fusion_epochs: int = 30
    lr: float = 0.001
    batch_size: int = 256
    seed: int = 0
    ks: tuple[int, ...] = DEFAULT_KS
    tied: bool = True
    joint: bool = False
    tweedie_p: float = 1.5
    learn_power: bool = False
    stage: str = "full"
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)
    local_embeddings: str | None = None

    def __post_init__(self):
        self.ks = tuple(int(k) for k in self.ks)
        self.split = tuple(float(f) for f in self.split)
        self.validate()

    def validate(self) -> None:
        checks = [
            (0.0 < self.tau < 1.0, f"tau must lie in (0, 1), got {self.tau}"),
            (self.latent_dim >= 1 and self.local_dim >= 1, "latent_dim and local_dim must be >= 1"),
            (self.head in HEADS, f"head must be one of {HEADS}, got {self.head!r}"),
            (self.vae_epochs >= 0 and self.fusion_epochs >= 0, "epochs must be >= 0"),
            (self.lr > 0, f"lr must be positive, got {self.lr}"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (len(self.ks) > 0 and all(k >= 1 for k in self.ks), "ks must be a non-empty list of positive ints"),
            (1.05 <= self.tweedie_p <= 1.95, f"tweedie_p must lie in [1.05, 1.95], got {self.tweedie_p}"),
            (self.stage in STAGES, f"stage must be one of {STAGES}"),
            (len(self.split) == 3 and abs(sum(self.split) - 1.0) < 1e-9, "split fractions must sum to 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ks"], d["split"] = list(self.ks), list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def head_label(head: str) -> str:
    return head.capitalize()


@dataclass
class PreparedData:
    vocab: Vocab
    train: list
    val: list
    test: list

    def instances(self, part: str) -> list[Instance]:
        return [make_instance(s, len(self.vocab)) for s in getattr(self, part)]


def prepare(data_path, config: RunConfig) -> PreparedData:
    vocab, seqs = load_dataset(data_path)
    tr, va, te = config.split
    train, val, test = split_users(seqs, SplitSpec(tr, va, te, seed=config.seed))
    return PreparedData(vocab, train, val, test)


def fit_vae(X_train, n_items: int, config: RunConfig, tau: float | None = None) -> tuple[VaeModel, dict]:
    rng = np.random.default_rng([config.seed, 1])
    vae = VaeModel(n_items, config.latent_dim, config.head, rng=rng, tweedie_p=config.tweedie_p,
                   learn_power=config.learn_power, tau=tau if tau is not None else config.tau)
    report = train_vae(X_train, vae, epochs=config.vae_epochs, batch_size=config.batch_size,
                       optimizer=OptimizerConfig(lr=config.lr), seed=config.seed)
    return vae, report


def fit_fusion(vae: VaeModel, data: PreparedData, config: RunConfig) -> tuple[GloieModel, dict]:
    M = len(data.vocab)
    train_inst, val_inst = data.instances("train"), data.instances("val")
    if config.local_embeddings:
        local = load_external_embeddings(config.local_embeddings, data.vocab)
        if local.dim != config.local_dim:
            raise ConfigError(f"external embeddings have dim {local.dim}, config says {config.local_dim}")
        check_coverage(local, train_inst + val_inst)
    else:
        local = LocalEncoder(M, config.local_dim, rng=np.random.default_rng([config.seed, 2]))
    fusion = FusionParams(config.local_dim, tied=config.tied, rng=np.random.default_rng([config.seed, 3]))
    model = GloieModel(vae, local, fusion, config.tau)
    train_batch = build_batch(train_inst, M, config.tau)
    init_bias_from_targets(fusion, train_batch.Y)
    report = train_fusion(model, train_batch, epochs=config.fusion_epochs,
                          batch_size=config.batch_size, optimizer=OptimizerConfig(lr=config.lr),
                          seed=config.seed + 1, joint=config.joint,
                          val=build_batch(val_inst, M, config.tau) if val_inst else None)
    return model, report


def train_run(config: RunConfig, data_path, out_dir) -> Path:
    """Stage 1 (VAE) then, unless ``stage == "vae-only"``, stage 2 (local + fusion)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = prepare(data_path, config)
    M = len(data.vocab)
    X_train = decayed_matrix([i.history for i in data.instances("train")], config.tau, M)
    vae, vae_report = fit_vae(X_train, M, config)
    reports = {"config": config.to_dict(), "data": str(data_path), "vae": vae_report}
    _dump(out / "config.json", config.to_dict())
    data.vocab.save(out / "vocab.json")
    _dump(out / "split.json", {p: [s.user_id for s in getattr(data, p)] for p in ("train", "val", "test")})
    _dump(out / "item_counts.json", {"counts": item_counts(data.train, M).tolist()})
    vae.save(out / "vae")
    if config.stage == "full":
        model, fusion_report = fit_fusion(vae, data, config)
        model.save(out / "fusion")
        reports["fusion"] = fusion_report
    _dump(out / "report.json", reports)
    return out


@dataclass
class LoadedModel:
    config: RunConfig
    vocab: Vocab
    split: dict
    counts: np.ndarray
    vae: VaeModel
    gloie: GloieModel | None

    @property
    def name(self) -> str:
        return f"{'GLOIE' if self.gloie else 'VAE'}-{head_label(self.vae.head)}"


def load_model(model_dir) -> LoadedModel:
    d = Path(model_dir)
    if not (d / "config.json").exists():
        raise ConfigError(f"{d} is not a model directory (no config.json)")
    config = RunConfig.from_dict(json.loads((d / "config.json").read_text()))
    vocab = Vocab.load(d / "vocab.json")
    vae = VaeModel.load(d / "vae")
    gloie = None
    if (d / "fusion.json").exists():
        table = load_external_embeddings(config.local_embeddings, vocab) if config.local_embeddings else None
        gloie = GloieModel.load(d / "fusion", vae, table)
    return LoadedModel(config, vocab, json.loads((d / "split.json").read_text()),
                       np.array(json.loads((d / "item_counts.json").read_text())["counts"]), vae, gloie)


def load_eval_instances(lm: LoadedModel, data_path, split: str = "test") -> list[Instance]:
    try:
        _, seqs = load_dataset(data_path, vocab=lm.vocab)
    except DataError as e:
        raise DataError(f"vocab mismatch between model and data: {e}") from None
    if split != "all":
        keep = set(lm.split[split])
        seqs = [s for s in seqs if s.user_id in keep]
    if not seqs:
        raise DataError(f"no users from split {split!r} found in {data_path}")
    return [make_instance(s, len(lm.vocab)) for s in seqs]


def vae_scores(vae: VaeModel, instances: Sequence[Instance], tau: float) -> np.ndarray:
    X = decayed_matrix([i.history for i in instances], tau, vae.n_items)
    return reconstruct(X, vae)


def model_topk(lm: LoadedModel, instances, k: int, use_vae: bool = False) -> np.ndarray:
    if lm.gloie is not None and not use_vae:
        logits, _ = score_instances(lm.gloie, instances)
        return top_k(logits, k)
    return top_k(vae_scores(lm.vae, instances, lm.config.tau), k)


def baseline_rankings(counts, instances, k: int):
    glob = toppop_rank(counts)
    top = [glob[:k]] * len(instances)
    personal = [personal_toppop_rank(i.history, glob, k) for i in instances]
    return top, personal


def eval_run(model_dir, data_path, ks: Sequence[int] | None = None, split: str = "test",
             with_vae: bool = False) -> tuple[dict, str]:
    lm = load_model(model_dir)
    ks = tuple(ks or lm.config.ks)
    instances = load_eval_instances(lm, data_path, split)
    if max(ks) > len(lm.vocab):
        raise ConfigError(f"K={max(ks)} exceeds the number of items {len(lm.vocab)}")
    truths = [set(i.target_items) for i in instances]
    kmax = max(ks)
    models = {lm.name: evaluate_rankings(model_topk(lm, instances, kmax).tolist(), truths, ks)}
    if with_vae and lm.gloie is not None:
        models[f"VAE-{head_label(lm.vae.head)}"] = evaluate_rankings(
            model_topk(lm, instances, kmax, use_vae=True).tolist(), truths, ks)
    top, personal = baseline_rankings(lm.counts, instances, kmax)
    baselines = {
        "Toppop": evaluate_rankings(top, truths, ks),
        "PersonalToppop": evaluate_rankings(personal, truths, ks),
    }
    report = {
        "config": lm.config.to_dict(),
        "data": str(data_path),
        "split": split,
        "n_users": len(instances),
        "ks": list(ks),
        "models": models,
        "baselines": baselines,
    }
    table = format_table({**baselines, **models}, ks)
    return report, table


def predict_run(model_dir, data_path, k: int, out_path, split: str = "all") -> int:
    lm = load_model(model_dir)
    instances = load_eval_instances(lm, data_path, split)
    if lm.gloie is not None:
        logits, probs = score_instances(lm.gloie, instances)
    else:
        probs = vae_scores(lm.vae, instances, lm.config.tau)
        logits = probs
    idx = top_k(logits, k)
    with open(out_path, "w", encoding="utf-8") as fh:
        for inst, row, p in zip(instances, idx, probs):
            rec = {"user": inst.user_id, "topk": [lm.vocab.items[j] for j in row],
                   "scores": [float(p[j]) for j in row]}
            fh.write(json.dumps(rec) + "\n")
    return len(instances)


def sweep_tau(config: RunConfig, data_path, grid: Sequence[float], k: int = 10) -> list[dict]:
    """Train stage 1 once per tau and score the VAE ranking on the test split."""
    for t in grid:
        if not 0.0 < t < 1.0:
            raise ConfigError(f"tau grid values must lie in (0, 1), got {t}")
    data = prepare(data_path, config)
    M = len(data.vocab)
    train_inst, test_inst = data.instances("train"), data.instances("test")
    truths = [set(i.target_items) for i in test_inst]
    rows = []
    for t in grid:
        X = decayed_matrix([i.history for i in train_inst], t, M)
        vae, _ = fit_vae(X, M, config, tau=t)
        topk = top_k(vae_scores(vae, test_inst, t), k).tolist()
        m = evaluate_rankings(topk, truths, (k,))[str(k)]
        rows.append({"tau": t, f"recall@{k}": m["recall"], f"ndcg@{k}": m["ndcg"], f"phr@{k}": m["phr"]})
    return rows


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
