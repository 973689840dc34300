"""Command-line entry point.

Exit codes: 0 ok, 1 configuration error, 2 data error, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .dataset import convert_csv
from .errors import ConfigError, ConvergenceError, DataError, DivergenceError
from .gradcheck import run_suite
from .likelihoods import CompoundPoissonParams, HEADS, sample_compound_poisson
from .synth import SynthConfig, config_dict, fit_tweedie_mu, generate_synthetic

log = logging.getLogger("gloie")

EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 1, 2, 3

# flag dest -> RunConfig field
RUN_FLAGS = {
    "tau": "tau",
    "latent_dim": "latent_dim",
    "local_dim": "local_dim",
    "head": "head",
    "vae_epochs": "vae_epochs",
    "fusion_epochs": "fusion_epochs",
    "lr": "lr",
    "batch_size": "batch_size",
    "seed": "seed",
    "ks": "ks",
    "tied": "tied",
    "joint": "joint",
    "tweedie_p": "tweedie_p",
    "learn_power": "learn_power",
    "stage": "stage",
    "local_embeddings": "local_embeddings",
}


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _float_list(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--tau", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--local-dim", type=int)
    p.add_argument("--head", choices=HEADS)
    p.add_argument("--vae-epochs", type=int)
    p.add_argument("--fusion-epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--ks", type=_int_list, help="comma-separated cutoffs, e.g. 10,20,40")
    p.add_argument("--untied", dest="tied", action="store_const", const=False,
                   help="learn a separate w* instead of tying it to w0")
    p.add_argument("--joint", action="store_const", const=True,
                   help="keep training the VAE during stage 2")
    p.add_argument("--tweedie-p", type=float, help="Tweedie power (fixed unless --learn-power)")
    p.add_argument("--learn-power", action="store_const", const=True)
    p.add_argument("--stage", choices=pipeline.STAGES)
    p.add_argument("--local-embeddings", help="JSONL file of external local embeddings")


def build_config(args) -> pipeline.RunConfig:
    base = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
    for dest, fld in RUN_FLAGS.items():
        val = getattr(args, dest, None)
        if val is not None:
            base[fld] = val
    return pipeline.RunConfig.from_dict(base)


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_convert(args) -> int:
    n = convert_csv(args.input, args.output, args.user_col, args.order_col, args.item_col)
    log.info("wrote %d users to %s", n, args.output)
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    out = pipeline.train_run(config, args.data, args.out)
    print(json.dumps({"model_dir": str(out), "config": config.to_dict()}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    report, table = pipeline.eval_run(args.model, args.data, ks=args.ks, split=args.split, with_vae=args.with_vae)
    if args.out:
        _emit(report, args.out)
        Path(args.out).with_suffix(".txt").write_text(table)
    else:
        _emit(report, None)
    sys.stderr.write(table)
    return 0


def cmd_predict(args) -> int:
    n = pipeline.predict_run(args.model, args.data, args.k, args.out, split=args.split)
    log.info("wrote predictions for %d users to %s", n, args.out)
    return 0


def cmd_synth(args) -> int:
    fields = {k: getattr(args, k) for k in ("n_users", "n_items", "n_clusters", "t_min", "t_max", "mean_set_size",
                                           "repeat_prob", "zipf_s", "cluster_size", "seed")}
    try:
        cfg = SynthConfig(**{k: v for k, v in fields.items() if v is not None})
    except ValueError as e:
        raise ConfigError(str(e)) from None
    n = generate_synthetic(cfg, args.out)
    print(json.dumps({"output": args.out, "users": n, "config": config_dict(cfg)}, sort_keys=True))
    return 0


def cmd_sweep_tau(args) -> int:
    config = build_config(args)
    rows = pipeline.sweep_tau(config, args.data, args.grid, k=args.k)
    text = pipeline.rows_to_csv(rows)
    meta = {"config": config.to_dict(), "data": args.data, "grid": args.grid, "k": args.k, "rows": rows}
    if args.out:
        Path(args.out).write_text(text)
        Path(args.out).with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(text)
    return 0


def cmd_fit_tweedie(args) -> int:
    if args.samples:
        samples = np.loadtxt(args.samples, ndmin=1)
        source = {"samples_file": args.samples}
    else:
        try:
            params = CompoundPoissonParams(args.rate, args.shape, args.rate_g)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        samples = sample_compound_poisson(params, np.random.default_rng(args.seed), size=args.n)
        source = {"rate": args.rate, "shape": args.shape, "rate_g": args.rate_g, "n": args.n, "seed": args.seed}
    try:
        fit = fit_tweedie_mu(samples, args.p, steps=args.steps, lr=args.fit_lr)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    except ConvergenceError as e:
        raise DivergenceError(str(e)) from None
    print(json.dumps({"mu_hat": fit.mu_hat, "steps": fit.steps, "grad_norm": fit.grad_norm,
                      "sample_mean": float(np.mean(samples)), "p": args.p, "source": source}, sort_keys=True))
    return 0


def cmd_grad_check(args) -> int:
    errs = run_suite(args.instances, args.seed)
    ok = all(e < args.tol for e in errs.values())
    print(json.dumps({"max_rel_error": errs, "tol": args.tol, "ok": ok,
                      "instances": args.instances, "seed": args.seed}, indent=2, sort_keys=True))
    return 0 if ok else EXIT_DIVERGENCE


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gloie", description="Global-local item embedding for temporal set prediction")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="CSV event log -> canonical JSONL")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--user-col", required=True)
    p.add_argument("--order-col", required=True)
    p.add_argument("--item-col", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train the VAE and the fusion stage")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="model directory")
    add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ranking metrics for a model and the popularity baselines")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ks", type=_int_list)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--with-vae", action="store_true", help="also report the VAE-only ranking")
    p.add_argument("--out", help="write JSON here (and the table next to it as .txt)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="dump top-K predictions as JSONL")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--split", default="all", choices=("train", "val", "test", "all"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("synth", help="generate a seeded synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-users", type=int)
    p.add_argument("--n-items", type=int)
    p.add_argument("--n-clusters", type=int)
    p.add_argument("--t-min", type=int)
    p.add_argument("--t-max", type=int)
    p.add_argument("--mean-set-size", type=float)
    p.add_argument("--repeat-prob", type=float)
    p.add_argument("--zipf-s", type=float)
    p.add_argument("--cluster-size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("sweep-tau", help="VAE metric@K across decay factors, as CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", type=_float_list, default=[0.2, 0.4, 0.6, 0.8])
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", help="CSV path (config and raw rows go to a .json sidecar)")
    add_run_flags(p)
    p.set_defaults(func=cmd_sweep_tau)

    p = sub.add_parser("fit-tweedie", help="fit a Tweedie mean to samples")
    p.add_argument("--samples", help="text file of non-negative values; default draws compound-Poisson samples")
    p.add_argument("--rate", type=float, default=1.0)
    p.add_argument("--shape", type=float, default=2.0)
    p.add_argument("--rate-g", type=float, default=1.0)
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--p", type=float, default=1.5)
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--fit-lr", type=float, default=0.5)
    p.set_defaults(func=cmd_fit_tweedie)

    p = sub.add_parser("grad-check", help="finite-difference check of every backward pass")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        log.error("config error: %s", e)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as e:
        log.error("data error: %s", e)
        return EXIT_DATA
    except DivergenceError as e:
        log.error("divergence: %s", e)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
