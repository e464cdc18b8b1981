"""Command line entry point.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from distl import experiment as ex
from distl import report
from distl.checkpoint import load_checkpoint
from distl.distill import train_cnn_adapter
from distl.errors import InvalidConfigError, InvalidInputError, InvalidSpecError
from distl.model import build_cnn
from distl.synth import write_corpus

log = logging.getLogger("distl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    pass


def _config(args) -> ex.ExperimentConfig:
    if not args.config:
        raise UsageError(f"{args.command} needs --config")
    cfg = ex.load_config(args.config)
    changes = {"out_dir": str(ex.output_root(cfg, args.out))}
    if args.seed is not None:
        changes["seeds"] = [args.seed]
    if getattr(args, "variant", None):
        changes["variant"] = args.variant
    return cfg.replace(**changes)


def cmd_synth(args) -> int:
    root = Path(args.data)
    seed = 0 if args.seed is None else args.seed
    paths = write_corpus(root, seed=seed, per_class=args.per_class, difficulty=args.difficulty,
                         unseen_per_class=args.unseen_per_class, pretrain_n=args.pretrain_n)
    out = args.out or os.environ.get(ex.OUT_ENV) or str(root / "runs")
    cfg = ex.toy_config(paths["manifest"], out_dir=out,
                        pretrain_manifest=paths.get("pretrain_manifest"),
                        unseen_manifest=paths.get("unseen_manifest"))
    cfg_path = Path(args.config) if args.config else root / "config.yaml"
    cfg_path.parent.mkdir(parents=True, exist_ok=True)
    ex.dump_config(cfg, cfg_path)
    print(json.dumps({k: str(v) for k, v in {**paths, "config": cfg_path}.items()}, indent=1))
    return EXIT_OK


def cmd_partition(args) -> int:
    cfg = _config(args)
    records = ex.load_records(cfg)
    for seed in cfg.seeds:
        part = ex.build_partition(cfg, seed, records)
        print(f"seed {seed}: {len(part.labeled)} labeled, folds {[len(f) for f in part.folds]} "
              f"-> {ex.partition_dir(cfg, seed)}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    if not cfg.pretrain_manifest:
        raise UsageError("config has no pretrain_manifest")
    cfg.check_paths()
    for seed in cfg.seeds:
        ex.ensure_pretrain(cfg, seed)
        print(f"seed {seed}: {ex.pretrain_path(cfg, seed)}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        ledger = ex.run_experiment(cfg, seed)
        done = sorted(ledger.completed())
        print(f"{cfg.variant} seed {seed}: generations {done} in {ex.run_dir(cfg, seed)}")
    return EXIT_OK


def evaluate(cfg: ex.ExperimentConfig, seed: int, panel_images: int = 4) -> tuple[list[dict], list[int]]:
    """Score every completed generation on both evaluation splits and draw plots.

    Returns (metrics documents, generations whose checkpoint is missing).
    """
    rdir = ex.run_dir(cfg, seed)
    ledger = ex.RunLedger(rdir / "ledger.jsonl")
    if not ledger.completed():
        raise InvalidInputError(f"no completed generations in {rdir}")
    records = ex.load_records(cfg)
    split_records = {s: ex.require_records(records, s) for s in report.EVAL_SPLITS}
    split_images = {s: ex.load_images([r.image_path for r in rs], cfg.model.input_side)
                    for s, rs in split_records.items()}
    docs, missing, last = [], [], None
    for T, entry in sorted(ledger.completed().items()):
        path = rdir / entry["checkpoint"]
        if not path.exists():
            warnings.warn(f"checkpoint for generation {T} is missing: {path}", stacklevel=2)
            missing.append(T)
            continue
        model = load_checkpoint(path).published
        for split in report.EVAL_SPLITS:
            rep = report.evaluate_model(model, split_images[split], split_records[split], cfg.task, T,
                                        split, cfg.positive_class, cfg.min_sensitivity)
            docs.append(report.write_report(rep, rdir / "metrics" / f"gen_{T}_{split}.json"))
        last = model
    report.write_schemas(rdir / "metrics")
    report.plots_from_metrics(rdir / "metrics", rdir / "plots")
    if last is not None and panel_images > 0:
        ext = split_records["external_test"]
        pick = [i for i, r in enumerate(ext) if r.label == cfg.positive_class][:panel_images]
        masks = [_mask_for(cfg, ext[i]) for i in pick]
        report.attention_panel(last, split_images["external_test"][pick], [ext[i].id for i in pick],
                               cfg.attention_threshold, rdir / "plots" / "attention_panel", masks)
    return docs, missing


def _mask_dir(cfg: ex.ExperimentConfig) -> Path:
    return Path(cfg.manifest).parent / "masks"


def _mask_for(cfg, record, mask_dir=None):
    p = Path(mask_dir or _mask_dir(cfg)) / f"{record.id}.png"
    return report.load_mask(p, cfg.model.input_side) if p.exists() else None


def cmd_eval(args) -> int:
    cfg = _config(args)
    status = EXIT_OK
    for seed in cfg.seeds:
        docs, missing = evaluate(cfg, seed)
        ext = {d["generation"]: d["pooled"]["auc"] for d in docs if d["split"] == "external_test"}
        print(f"{cfg.variant} seed {seed}: external AUC by T {ext}")
        if missing:
            status = EXIT_RUNTIME
    return status


def localize_run(cfg, seed: int, generation: int | None = None, checkpoint=None, mask_dir=None,
                 n: int = 20, gradcam: bool = False, baseline_seed: int | None = None) -> dict:
    """Best-head attention dice on positive external images that have masks."""
    if checkpoint is None:
        paths = ex.checkpoint_paths(cfg, seed)
        if not paths:
            raise InvalidInputError(f"no checkpoints for {cfg.variant} seed {seed}")
        generation = max(paths) if generation is None else generation
        if generation not in paths:
            raise InvalidInputError(f"generation {generation} not in the ledger")
        checkpoint = paths[generation]
    model = load_checkpoint(checkpoint).published
    records = ex.load_records(cfg)
    mask_dir = Path(mask_dir) if mask_dir else _mask_dir(cfg)
    if not mask_dir.is_dir():
        raise UsageError(f"mask directory not found: {mask_dir}")
    candidates = []
    for r in records:
        if r.split == "external_test" and r.label == cfg.positive_class:
            m = _mask_for(cfg, r, mask_dir)
            if m is not None and m.any():
                candidates.append((r, m))
    # spread the picks evenly over the candidates so every site is represented
    picks = np.unique(np.linspace(0, len(candidates) - 1, min(n, len(candidates))).round().astype(int))
    chosen = [candidates[i][0] for i in picks] if candidates else []
    masks = [candidates[i][1] for i in picks] if candidates else []
    if not chosen:
        raise UsageError(f"no usable masks in {mask_dir}")
    images = ex.load_images([r.image_path for r in chosen], cfg.model.input_side)
    cnn = None
    if gradcam:
        labeled = ex.prepare_pools(cfg, seed, records).labeled
        x = ex.load_images([r.image_path for r in labeled], cfg.model.input_side)
        y = np.array([r.label for r in labeled])
        cnn = build_cnn(cfg.model.num_classes, seed=seed)
        train_cnn_adapter(cnn, x, y, np.random.default_rng([seed, 0xCA3]))
    out = report.localization_report(model, images, masks, [r.id for r in chosen],
                                     cfg.attention_threshold, cnn, cfg.gradcam_threshold,
                                     cfg.positive_class, baseline_seed)
    out["checkpoint"] = str(checkpoint)
    return out


def cmd_localize(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        rep = localize_run(cfg, seed, args.generation, args.checkpoint, args.masks, args.n,
                           args.gradcam, baseline_seed=seed)
        path = ex.run_dir(cfg, seed) / f"localize_gen_{args.generation if args.generation is not None else 'last'}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(rep, indent=1) + "\n", encoding="utf-8")
        extra = f", gradcam {rep['gradcam']['mean_dice']:.3f}" if rep["gradcam"] else ""
        print(f"seed {seed}: mean dice {rep['mean_dice']:.3f} +- {rep['std_dice']:.3f} "
              f"over {rep['n']} images{extra} -> {path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    cfg = _config(args)
    for seed in cfg.seeds:
        rdir = ex.run_dir(cfg, seed)
        if not list((rdir / "metrics").glob("gen_*_*.json")):
            raise InvalidInputError(f"no metrics files under {rdir / 'metrics'}; run eval first")
        for p in report.plots_from_metrics(rdir / "metrics", rdir / "plots"):
            print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="distl", description="Teacher-student distillation experiments.")
    p.add_argument("--config", help="experiment config (YAML)")
    p.add_argument("--seed", type=int, help="run only this seed")
    p.add_argument("--out", help=f"output root (overrides ${ex.OUT_ENV} and the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic corpus and a matching config")
    s.add_argument("--data", default="data", help="directory for images and manifests")
    s.add_argument("--per-class", type=int, default=1000)
    s.add_argument("--difficulty", type=float, default=0.3)
    s.add_argument("--unseen-per-class", type=int, default=300)
    s.add_argument("--pretrain-n", type=int, default=4000)
    s.set_defaults(func=cmd_synth)

    sub.add_parser("partition", help="split the train manifest into labeled set and folds").set_defaults(
        func=cmd_partition)
    sub.add_parser("pretrain", help="multi-label pretraining").set_defaults(func=cmd_pretrain)
    for name, func, help_ in (("run", cmd_run, "train generations 0..T_max (resumes)"),
                              ("eval", cmd_eval, "metrics and plots for every generation"),
                              ("plot", cmd_plot, "redraw plots from metrics files")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--variant", choices=ex.VARIANTS)
        s.set_defaults(func=func)

    s = sub.add_parser("localize", help="attention dice against reference masks")
    s.add_argument("--variant", choices=ex.VARIANTS)
    s.add_argument("--generation", type=int)
    s.add_argument("--checkpoint")
    s.add_argument("--masks", help="directory of <id>.png masks (default: next to the manifest)")
    s.add_argument("--n", type=int, default=20)
    s.add_argument("--gradcam", action="store_true", help="also train the CNN adapter and score GradCAM")
    s.set_defaults(func=cmd_localize)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidConfigError, InvalidSpecError, InvalidInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
