"""Command-line entry point: ``himnet {train,evaluate,export-meta,generate-synthetic,grad-check}``.

Exit codes: 0 success, 1 user error (bad config, data, or checkpoint), 2 runtime failure.
Environment: ``HIMNET_OUTPUT_DIR`` sets the default output directory,
``HIMNET_THREADS`` the torch thread count.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import torch

from .checkpoint import Checkpoint
from .config import RunConfig, load_run_config
from .data import load_dataset, prepare, save_dataset, synthetic_generate
from .errors import CheckpointError, ConfigError, DataError, HimNetError, ShapeError, TrainingError
from .export import export_meta
from .model import ABLATIONS, HimNetConfig, count_parameters
from .training import evaluate, grad_check, train

log = logging.getLogger("himnet")

USER_ERRORS = (ConfigError, DataError, CheckpointError, ShapeError, FileNotFoundError)


def _parse_horizons(text: str | None):
    if not text:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--horizons expects comma-separated integers, got {text!r}") from None


def _resolve(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "data", None):
        overrides.append(f"data.path={args.data}")
    if getattr(args, "out", None):
        overrides.append(f"run.output_dir={args.out}")
    elif "HIMNET_OUTPUT_DIR" in os.environ:
        overrides.append(f"run.output_dir={os.environ['HIMNET_OUTPUT_DIR']}")
    if getattr(args, "ablate", None):
        overrides.append("model.ablation=" + ",".join(args.ablate))
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.max_epochs={args.epochs}")
    if getattr(args, "preset", None):
        overrides.append(f"train.preset={args.preset}")
    cfg = load_run_config(args.config, overrides)
    threads = cfg["run"]["threads"] or int(os.environ.get("HIMNET_THREADS", "0") or 0)
    if threads:
        torch.set_num_threads(threads)
    return cfg


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["run"]["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    return out


def _dataset(path: str, fmt: str):
    if not path:
        raise ConfigError("no dataset given (use --data or [data] path)")
    return load_dataset(path, fmt or None)


def cmd_train(args) -> int:
    cfg = _resolve(args)
    ds = _dataset(cfg["data"]["path"], cfg["data"]["format"])
    synthetic = ds.synthetic is not None
    split = prepare(ds, cfg["data"]["in_steps"], cfg["data"]["out_steps"], cfg["data"]["ratios"])
    model_cfg = cfg.model_config(ds.num_nodes, ds.steps_per_day)
    train_cfg = cfg.train_config(synthetic)
    out = _out_dir(cfg)
    eval_bs = cfg["train"]["eval_batch_size"]
    print(f"{ds.name}: {ds.num_steps} steps x {ds.num_nodes} nodes; "
          f"samples {len(split.train)}/{len(split.val)}/{len(split.test)}")

    def progress(rec):
        print(f"epoch {rec['epoch']:3d}  train {rec['train_loss']:.4f}  val MAE {rec['val_mae']:.4f}  "
              f"lr {rec['lr']:.1e}", flush=True)

    result = train(split, train_cfg, model_cfg, eval_batch_size=eval_bs, callback=progress)
    print(f"parameters: {count_parameters(result.model)}")
    report = evaluate(result.model, split.test, train_cfg.mask_zeros, eval_bs)
    meta = {
        "data": {"path": str(Path(cfg["data"]["path"]).resolve()), "format": cfg["data"]["format"],
                 "ratios": list(cfg["data"]["ratios"]), "name": ds.name, "step_minutes": ds.step_minutes},
        "train": train_cfg.to_dict(),
        "eval_batch_size": eval_bs,
        "ablation": sorted(model_cfg.ablation),
        "best_val_mae": result.best_val,
        "best_epoch": result.best_epoch,
        "epochs_run": result.epochs_run,
        "test_avg_mae": report.avg_mae,
    }
    Checkpoint.from_model(result.model, result.optimizer, meta).save(out / "best.ckpt")
    (out / "history.csv").write_text(result.history_csv())
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.txt").write_text(report.table() + "\n")
    print(report.table())
    print(f"artifacts written to {out}")
    return 0


def _checkpoint_split(ckpt: Checkpoint, model, data_path: str | None, fmt: str | None):
    meta = ckpt.meta
    path = data_path or meta["data"]["path"]
    ds = load_dataset(path, fmt or meta["data"].get("format") or None)
    cfg = model.config
    if ds.num_nodes != cfg.num_nodes:
        raise ShapeError(f"dataset has N={ds.num_nodes} nodes but the checkpoint was trained with N={cfg.num_nodes}")
    if ds.steps_per_day != cfg.steps_per_day:
        raise ShapeError(f"dataset has {ds.steps_per_day} steps per day; checkpoint expects {cfg.steps_per_day}")
    return prepare(ds, cfg.in_steps, cfg.out_steps, meta["data"]["ratios"], stats=model.stats)


def cmd_evaluate(args) -> int:
    if args.threads:
        torch.set_num_threads(args.threads)
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    split = _checkpoint_split(ckpt, model, args.data, args.format)
    part = getattr(split, args.partition)
    report = evaluate(model, part, ckpt.meta["train"]["mask_zeros"], ckpt.meta.get("eval_batch_size", 64))
    horizons = _parse_horizons(args.horizons)
    if horizons and any(not 1 <= h <= model.config.out_steps for h in horizons):
        raise ConfigError(f"horizons must be within 1..{model.config.out_steps}")
    average = horizons is None or args.average
    print(report.table(horizons, average))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv(horizons, average))
    return 0


def cmd_export_meta(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    model = ckpt.build_model()
    part = None
    if args.what == "st_mixed":
        part = getattr(_checkpoint_split(ckpt, model, args.data, args.format), args.partition)
    samples = [int(s) for s in args.samples.split(",")] if args.samples else [0]
    nodes = [int(n) for n in args.nodes.split(",")] if args.nodes else None
    out = Path(args.out or os.environ.get("HIMNET_OUTPUT_DIR", "export"))
    written = export_meta(model, args.what, out, dow=args.dow, part=part, samples=samples, nodes=nodes)
    for path in written:
        print(path)
    return 0


def cmd_generate_synthetic(args) -> int:
    cfg = _resolve(args)
    s = cfg["synthetic"]
    ds = synthetic_generate(s["n_nodes"], s["n_days"], s["n_spatial_clusters"], s["n_regimes"], s["noise_std"],
                            s["seed"], step_minutes=s["step_minutes"], cycles_per_day=s["cycles_per_day"])
    out = _out_dir(cfg)
    target = Path(args.output) if args.output else out / "synthetic.stds"
    target.parent.mkdir(parents=True, exist_ok=True)
    for path in save_dataset(ds, target):
        print(path)
    return 0


def cmd_grad_check(args) -> int:
    cfg = HimNetConfig(num_nodes=args.nodes, in_steps=args.steps, out_steps=args.steps, hidden_dim=args.hidden,
                       order=args.order, d_tod=2, d_dow=2, d_s=2, d_st=2, steps_per_day=4,
                       ablation=frozenset(args.ablate or ()))
    report = grad_check(cfg, args.tolerance, batch_size=args.batch, seed=args.seed)
    print(report.table())
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failures)}")
    return 0 if report.passed else 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="himnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("--config", help="INI config file")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train a model and write checkpoint, history and report")
    run_opts(t)
    t.add_argument("--data", help="dataset file (.stds or .csv)")
    t.add_argument("--ablate", action="append", choices=ABLATIONS)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--preset", help="dataset optimizer preset, e.g. METRLA")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset (defaults to the one recorded in the checkpoint)")
    e.add_argument("--format")
    e.add_argument("--partition", choices=("train", "val", "test"), default="test")
    e.add_argument("--horizons", help="comma-separated 1-based horizons, e.g. 3,6,12")
    e.add_argument("--average", action="store_true", help="add the average row when --horizons is given")
    e.add_argument("--out", help="directory for report.csv")
    e.add_argument("--threads", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    x = sub.add_parser("export-meta", help="export generated meta-parameters and cosine matrices")
    x.add_argument("checkpoint")
    x.add_argument("--what", choices=("temporal", "spatial", "st_mixed"), required=True)
    x.add_argument("--dow", type=int, default=0, help="day of week (Monday=0) for the hourly matrix")
    x.add_argument("--samples", help="comma-separated sample indices (st_mixed)")
    x.add_argument("--nodes", help="comma-separated node subset for st_mixed cosine matrices")
    x.add_argument("--partition", choices=("train", "val", "test"), default="test")
    x.add_argument("--data")
    x.add_argument("--format")
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_meta)

    g = sub.add_parser("generate-synthetic", help="write a planted-heterogeneity dataset")
    run_opts(g)
    g.add_argument("--output", help="path of the .stds file (default OUT/synthetic.stds)")
    g.set_defaults(func=cmd_generate_synthetic)

    c = sub.add_parser("grad-check", help="finite-difference check of all gradients on a tiny model")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--nodes", type=int, default=3)
    c.add_argument("--steps", type=int, default=2)
    c.add_argument("--hidden", type=int, default=3)
    c.add_argument("--order", type=int, default=1)
    c.add_argument("--batch", type=int, default=2)
    c.add_argument("--ablate", action="append", choices=ABLATIONS)
    c.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, HimNetError, RuntimeError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
