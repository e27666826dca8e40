"""Command-line front-end.

Subcommands: gen-data, train, eval, export-embeddings, plot.
Exit codes: 0 success, 2 invalid config/data/shape, 3 training aborted on a
non-finite loss. The CONDREP_OUTDIR environment variable overrides the
default output directory.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


from . import evaluate, io as cio
from .autodiff import no_grad
from .backbone import pooled_feature
from .data import build_dataset, export_pools, load_pools
from .exceptions import (ConfigError, ContractError, DataError, DimensionError,
                         NonFiniteLossError, StateError)
from .model import Model
from .plots import accuracy_bars_svg, loss_curve_svg
from .rerepresent import re_represent_pair
from .training import train


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("CONDREP_OUTDIR") or "runs"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _common_config(args) -> dict[str, str]:
    overrides = {k: getattr(args, k.replace("-", "_"), None) for k in cio.DEFAULT_CONFIG}
    return cio.resolve_config(args.config, overrides)


def _load_dataset(args, cfg):
    if getattr(args, "data", None):
        return load_pools(args.data, cio.dataset_config_from(cfg))
    return build_dataset(cio.dataset_config_from(cfg))


def cmd_gen_data(args) -> int:
    cfg = _common_config(args)
    out = _out_dir(args)
    dataset = build_dataset(cio.dataset_config_from(cfg))
    n = export_pools(dataset, out)
    print(f"wrote {n} samples under {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _common_config(args)
    out = _out_dir(args)
    dataset = _load_dataset(args, cfg)
    model = Model.init(cio.model_config_from(cfg), seed=int(cfg["seed"]))
    train_cfg = cio.train_config_from(cfg)
    ckpt_path = out / "checkpoint.txt"
    every = int(cfg["checkpoint_every"])
    meta = {"seed": int(cfg["seed"]), "config_hash": cio.config_hash(cfg)}

    def checkpoint_cb(epoch, loss, m):
        if every > 0 and (epoch + 1) % every == 0:
            cio.save_checkpoint(ckpt_path, m, {**meta, "epoch": epoch + 1})

    losses = train(dataset, model, train_cfg, seed=int(cfg["seed"]),
                   epoch_callback=checkpoint_cb)
    cio.save_checkpoint(ckpt_path, model, {**meta, "epoch": train_cfg.epochs})
    cio.write_loss_csv(out / "loss.csv", losses)
    print(f"trained {train_cfg.epochs} epochs; first loss {losses[0]:.6f}, "
          f"last {losses[-1]:.6f}")
    print(f"checkpoint: {ckpt_path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _common_config(args)
    out = _out_dir(args)
    dataset = _load_dataset(args, cfg)
    model, _meta = cio.model_from_checkpoint(args.checkpoint)
    expected = cio.model_config_from(cfg)
    if model.config.backbone.input_size != expected.backbone.input_size:
        raise DimensionError(f"eval: checkpoint expects {model.config.backbone.input_size}"
                             f"-pixel images, config says {expected.backbone.input_size}")
    strategies = [s.strip() for s in cfg["strategies"].split(",") if s.strip()]
    baseline_model = None
    if args.with_baseline:
        # same init seed as training started from: the no-training counterfactual
        baseline_model = Model.init(model.config, seed=int(cfg["seed"]))
    reports = evaluate.run_evaluation_suite(
        dataset, model, n_way=int(cfg["n_way"]), k_shot=int(cfg["k_shot"]),
        q_per_class=int(cfg["q_per_class"]), n_episodes=int(cfg["episodes"]),
        strategies=strategies, seed=int(cfg["seed"]), baseline_model=baseline_model)
    cio.write_accuracy_csv(out / "accuracy.csv", reports)
    cio.write_report_json(out / "report.json", reports, run_config=cfg)
    for name in sorted(reports):
        r = reports[name]
        print(f"{name}: {r.mean:.4f} +- {r.ci95:.4f} over {r.n_episodes} episodes")
    return 0


def cmd_export_embeddings(args) -> int:
    cfg = _common_config(args)
    out = _out_dir(args)
    dataset = _load_dataset(args, cfg)
    model, _meta = cio.model_from_checkpoint(args.checkpoint)
    pool = dataset.support if args.pool == "support" else dataset.query
    if not pool:
        raise DataError(f"export-embeddings: pool '{args.pool}' is empty")
    refs = {c: samples[0] for c, samples in dataset.by_class("support").items()}
    rows = []
    with no_grad():
        for s in pool:
            ref = refs[s.class_id]
            ref_map = model.features(ref.image[None])
            smp_map = model.features(s.image[None])
            _fs, fq = re_represent_pair(ref_map, smp_map, model)
            base = pooled_feature(smp_map)
            rows.append((s.sample_id, s.class_id, s.pool, fq.data[0], base.data[0]))
    path = out / f"embeddings_{args.pool}.csv"
    cio.write_embeddings_csv(path, rows, channels=model.config.channels)
    print(f"wrote {len(rows)} rows to {path}")
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    wrote = []
    if args.loss_csv:
        path = out / "loss.svg"
        loss_curve_svg(args.loss_csv, path)
        wrote.append(path)
    if args.accuracy_csv:
        path = out / "accuracy.svg"
        accuracy_bars_svg(args.accuracy_csv, path)
        wrote.append(path)
    if not wrote:
        raise ConfigError("plot: pass --loss-csv and/or --accuracy-csv")
    for p in wrote:
        print(f"wrote {p}")
    return 0


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--out", help="output directory (or CONDREP_OUTDIR)")
    for key in cio.DEFAULT_CONFIG:
        p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                       help=f"override (default {cio.DEFAULT_CONFIG[key]})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condrep",
                                     description="conditional pair re-representation "
                                                 "for few-shot classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and export the synthetic pools")
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes checkpoint and loss CSV")
    _add_config_flags(p)
    p.add_argument("--data", help="directory of exported pools (default: generate)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="episodic evaluation of a checkpoint")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory of exported pools (default: generate)")
    p.add_argument("--with-baseline", action="store_true",
                   help="also report the raw backbone-prototype baseline of an "
                        "untrained model on the same episodes")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="dump representation vectors to CSV")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="directory of exported pools (default: generate)")
    p.add_argument("--pool", choices=("support", "query"), default="query")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("plot", help="render SVG plots from CSV outputs")
    p.add_argument("--loss-csv")
    p.add_argument("--accuracy-csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ContractError, DataError, DimensionError, StateError,
            FileNotFoundError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
