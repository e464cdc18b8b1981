"""Experiment lifecycle: config, partition, pretraining, generation runs, resume.

Output layout under ``out_dir``::

    partition/seed_<s>/            labeled.txt, fold_<i>.txt, partition.json
    pretrain/seed_<s>/<hash>.ckpt  shared by every variant at that seed
    <variant>/seed_<s>/
        .lock                      held while a process owns the run
        ledger.jsonl               one line per finished (or failed) generation
        losses.jsonl               per-step training records
        checkpoints/gen_<T>.ckpt
        metrics/gen_<T>_<split>.json

Each generation ``T`` draws from ``np.random.default_rng([seed, T])`` so a
resumed run replays exactly what an uninterrupted run would have done.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import yaml

from distl.checkpoint import load_checkpoint, save_checkpoint
from distl.distill import (
    Checkpoint,
    DistillConfig,
    PretrainConfig,
    evolve_generation,
    pretrain_multilabel,
    supervised_epochs,
    train_initial,
)
from distl.errors import InvalidConfigError, InvalidInputError, InvalidSpecError, NonFiniteLossError
from distl.model import ModelSpec
from distl.pipeline import AugmentPolicy, PreprocessConfig, load_image, preprocess_image
from distl.protocol import (
    DataPartition,
    GenerationSchedule,
    SampleRecord,
    corrupt_labels,
    inject_unseen,
    make_partition,
    pool_at,
    read_manifest,
    read_pretrain_manifest,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
VARIANTS = ("baseline_supervised", "distl", "distl_unseen_injection", "supervised_label_corruption")
OUT_ENV = "DISTL_OUT"


class RunLockedError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    manifest: str
    task: str = "synthetic"
    variant: str = "distl"
    seeds: list[int] = field(default_factory=lambda: [0])
    out_dir: str = "runs"
    labeled_frac: float = 0.1
    folds: int = 3
    t_max: int | None = None  # defaults to the fold count
    pretrain_manifest: str | None = None
    unseen_manifest: str | None = None
    corruption_p: float = 0.05
    positive_class: int = 1
    min_sensitivity: float = 0.8
    attention_threshold: float = 0.1
    gradcam_threshold: float = 0.6
    model: ModelSpec = field(default_factory=ModelSpec)
    distill: DistillConfig = field(default_factory=DistillConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not self.seeds:
            raise InvalidConfigError("seeds must be nonempty")
        if not 0.0 < self.labeled_frac < 1.0:
            raise InvalidConfigError("labeled_frac must lie in (0, 1)")
        if self.folds < 1:
            raise InvalidConfigError("folds must be >= 1")
        if self.t_max is not None and self.t_max < 0:
            raise InvalidConfigError("t_max must be >= 0")
        if not 0.0 <= self.corruption_p <= 1.0:
            raise InvalidConfigError("corruption_p must lie in [0, 1]")
        for name in ("attention_threshold", "gradcam_threshold", "min_sensitivity"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfigError(f"{name} must lie in [0, 1]")
        if self.variant == "distl_unseen_injection" and not self.unseen_manifest:
            raise InvalidConfigError("distl_unseen_injection needs unseen_manifest")

    @property
    def generations(self) -> int:
        return self.folds if self.t_max is None else self.t_max

    def schedule(self) -> GenerationSchedule:
        return GenerationSchedule.default(self.folds, self.generations)

    def check_paths(self) -> None:
        for name in ("manifest", "pretrain_manifest", "unseen_manifest"):
            p = getattr(self, name)
            if p is not None and not Path(p).exists():
                raise InvalidConfigError(f"{name} does not exist: {p}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["schema_version"] = CONFIG_VERSION
        return d

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _strict(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise InvalidConfigError(f"{where} must be a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise InvalidConfigError(f"unknown keys in {where}: {', '.join(unknown)}")
    raw = dict(raw)
    if "augment" in raw:
        raw["augment"] = _strict(AugmentPolicy, raw["augment"], f"{where}.augment")
    try:
        return cls(**raw)
    except InvalidSpecError as exc:
        raise InvalidConfigError(f"{where}: {exc}") from exc
    except TypeError as exc:
        raise InvalidConfigError(f"{where}: {exc}") from exc


def config_from_dict(raw: dict, base_dir=None) -> ExperimentConfig:
    """Build a config from a parsed mapping. Unknown keys anywhere are errors.

    Relative manifest paths resolve against ``base_dir``.
    """
    if not isinstance(raw, dict):
        raise InvalidConfigError("config must be a mapping")
    raw = dict(raw)
    version = raw.pop("schema_version", None)
    if version != CONFIG_VERSION:
        raise InvalidConfigError(f"schema_version must be {CONFIG_VERSION}, got {version!r}")
    nested = {
        "model": _strict(ModelSpec, raw.pop("model", None), "model"),
        "distill": _strict(DistillConfig, raw.pop("distill", None), "distill"),
        "pretrain": _strict(PretrainConfig, raw.pop("pretrain", None), "pretrain"),
    }
    if "manifest" not in raw:
        raise InvalidConfigError("config needs a manifest path")
    if base_dir is not None:
        for key in ("manifest", "pretrain_manifest", "unseen_manifest", "out_dir"):
            if raw.get(key) is not None and not Path(raw[key]).is_absolute():
                raw[key] = os.path.normpath(Path(base_dir) / raw[key])
    if "seeds" in raw:
        seeds = raw["seeds"]
        if isinstance(seeds, int) or not all(isinstance(s, int) for s in seeds or []):
            raise InvalidConfigError("seeds must be a list of integers")
        raw["seeds"] = list(seeds)
    return _strict(ExperimentConfig, {**raw, **nested}, "config")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise InvalidConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(raw, base_dir=path.parent)


def dump_config(cfg: ExperimentConfig, path) -> None:
    """Write ``cfg`` as YAML with paths relative to the file, so ``load_config`` round-trips."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    d = cfg.to_dict()
    for key in ("manifest", "pretrain_manifest", "unseen_manifest", "out_dir"):
        if d[key] is not None:
            d[key] = os.path.relpath(Path(d[key]).resolve(), path.parent.resolve())
    path.write_text(yaml.safe_dump(d, sort_keys=False), encoding="utf-8")


def config_hash(cfg: ExperimentConfig, seed: int) -> str:
    """Hash of everything that determines a run's checkpoints (not where they go)."""
    d = cfg.to_dict()
    d.pop("out_dir")
    d["seeds"] = [seed]
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()


def output_root(cfg: ExperimentConfig, override=None) -> Path:
    """``override`` (the --out flag) beats the environment variable, which beats the config."""
    if override is not None:
        return Path(override)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return Path(cfg.out_dir)


def run_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / cfg.variant / f"seed_{seed}"


def partition_dir(cfg: ExperimentConfig, seed: int) -> Path:
    return Path(cfg.out_dir) / "partition" / f"seed_{seed}"


# ---------------------------------------------------------------- ledger and lock

class RunLedger:
    """Append-only JSON-lines record of finished generations."""

    def __init__(self, path):
        self.path = Path(path)
        self.entries: list[dict] = []
        if self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self.entries.append(json.loads(line))

    def append(self, entry: dict) -> None:
        if self.entries and entry.get("config_hash") != self.entries[0].get("config_hash"):
            raise InvalidConfigError("config hash changed within a run")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.entries.append(entry)

    @property
    def config_hash(self) -> str | None:
        return self.entries[0]["config_hash"] if self.entries else None

    def completed(self) -> dict[int, dict]:
        return {e["T"]: e for e in self.entries if e.get("status") == "ok"}

    def last_completed(self) -> int | None:
        done = self.completed()
        t = -1
        while t + 1 in done:
            t += 1
        return t if t >= 0 else None


class RunLock:
    def __init__(self, directory):
        self.path = Path(directory) / ".lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise RunLockedError(
                f"{self.path.parent} is locked by another process (remove {self.path} if stale)"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(str(os.getpid()))
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


# ---------------------------------------------------------------- data

_IMAGE_CACHE: dict[tuple[str, int], np.ndarray] = {}


def load_images(paths, side: int) -> np.ndarray:
    """Load and preprocess images, memoized per (path, side) within the process."""
    out = []
    for p in paths:
        key = (str(p), side)
        if key not in _IMAGE_CACHE:
            _IMAGE_CACHE[key] = preprocess_image(load_image(p), config=PreprocessConfig(side=side))
        out.append(_IMAGE_CACHE[key])
    if not out:
        return np.zeros((0, side, side), np.float32)
    return np.stack(out)


def load_records(cfg: ExperimentConfig) -> list[SampleRecord]:
    cfg.check_paths()
    return read_manifest(cfg.manifest)


def build_partition(cfg: ExperimentConfig, seed: int, records=None) -> DataPartition:
    records = load_records(cfg) if records is None else records
    part = make_partition(records, cfg.labeled_frac, cfg.folds, seed)
    part.save(partition_dir(cfg, seed))
    return part


def ensure_partition(cfg: ExperimentConfig, seed: int, records) -> DataPartition:
    d = partition_dir(cfg, seed)
    if (d / "partition.json").exists():
        part = DataPartition.load(d, records)
        if part.n_folds != cfg.folds:
            raise InvalidConfigError(f"partition at {d} has {part.n_folds} folds, config says {cfg.folds}")
        return part
    return build_partition(cfg, seed, records)


def pretrain_path(cfg: ExperimentConfig, seed: int) -> Path:
    key = {"manifest": cfg.pretrain_manifest, "model": dataclasses.asdict(cfg.model),
           "pretrain": dataclasses.asdict(cfg.pretrain), "seed": seed}
    h = hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]
    return Path(cfg.out_dir) / "pretrain" / f"seed_{seed}" / f"{h}.ckpt"


def ensure_pretrain(cfg: ExperimentConfig, seed: int) -> Checkpoint | None:
    """Multi-label pretraining, cached per (manifest, model, pretrain config, seed)."""
    if not cfg.pretrain_manifest:
        return None
    path = pretrain_path(cfg, seed)
    if path.exists():
        return load_checkpoint(path)
    paths, targets = read_pretrain_manifest(cfg.pretrain_manifest)
    images = load_images(paths, cfg.model.input_side)
    log.info("pretraining on %d images, %d labels", len(images), targets.shape[1])
    ckpt = pretrain_multilabel(cfg.model, images, targets, cfg.pretrain,
                               rng=np.random.default_rng([seed, 0x5EED]), seed=seed,
                               downstream_classes=cfg.model.num_classes)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, path)
    return ckpt


@dataclass
class RunData:
    labeled: list[SampleRecord]
    pools: dict[int, list[SampleRecord]]
    schedule: GenerationSchedule


def prepare_pools(cfg: ExperimentConfig, seed: int, records) -> RunData:
    """Labeled set plus per-generation pools with the variant's manipulation applied."""
    part = ensure_partition(cfg, seed, records)
    sched = cfg.schedule()
    pools = {t: pool_at(part, sched, t) for t in range(1, sched.t_max + 1)}
    if cfg.variant == "supervised_label_corruption":
        fold_records = [r for f in part.folds for r in f]
        noisy = {r.id: r for r in corrupt_labels(fold_records, cfg.corruption_p, seed=seed)}
        pools = {t: [noisy[r.id] for r in pool] for t, pool in pools.items()}
    elif cfg.variant == "distl_unseen_injection" and pools:
        extra = read_manifest(cfg.unseen_manifest)
        extra = [r for r in extra if r.split == "train"]
        pools = inject_unseen(pools, extra, sched, part.n_folds, seed=seed)
    return RunData(labeled=list(part.labeled), pools=pools, schedule=sched)


# ---------------------------------------------------------------- running

def _supervised_generation(prev: Checkpoint, images, labels, cfg: DistillConfig, rng, T: int) -> Checkpoint:
    """Comparator: continue from the previous model with every pool label revealed."""
    model = copy.deepcopy(prev.published)
    opt, history = supervised_epochs(model, images, labels, cfg, rng)
    steps = cfg.epochs * math.ceil(len(images) / cfg.batch_size)
    ckpt = Checkpoint(spec=prev.spec, student=model, teacher=copy.deepcopy(model),
                      center=prev.center.clone(), optimizer=opt, generation=T,
                      global_step=prev.global_step + steps)
    ckpt.meta["train_loss"] = history
    return ckpt


class _LossLog:
    def __init__(self, path):
        self.path = Path(path)

    def write(self, records) -> None:
        with self.path.open("a", encoding="utf-8") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


def run_experiment(
    cfg: ExperimentConfig,
    seed: int,
    on_generation: Callable[[int, Checkpoint], None] | None = None,
) -> RunLedger:
    """Run (or resume) one variant at one seed through generations 0..t_max."""
    records = load_records(cfg)
    rdir = run_dir(cfg, seed)
    chash = config_hash(cfg, seed)
    with RunLock(rdir):
        ledger = RunLedger(rdir / "ledger.jsonl")
        if ledger.config_hash not in (None, chash):
            raise InvalidConfigError(f"{rdir} was started with a different config; use a new out_dir")
        data = prepare_pools(cfg, seed, records)
        labeled_x = load_images([r.image_path for r in data.labeled], cfg.model.input_side)
        labeled_y = np.array([r.label for r in data.labeled], dtype=np.int64)
        (rdir / "checkpoints").mkdir(parents=True, exist_ok=True)
        losses = _LossLog(rdir / "losses.jsonl")
        last = ledger.last_completed()
        prev = None
        if last is not None:
            prev = load_checkpoint(rdir / ledger.completed()[last]["checkpoint"])
            log.info("resuming %s after generation %d", rdir, last)

        for T in range((last + 1) if last is not None else 0, data.schedule.t_max + 1):
            rng = np.random.default_rng([seed, T])
            t0 = time.perf_counter()
            buffered: list[dict] = []
            try:
                if T == 0:
                    start = ensure_pretrain(cfg, seed) or cfg.model
                    torch.manual_seed(seed)
                    ckpt = train_initial(start, labeled_x, labeled_y, cfg.distill, rng, seed=seed)
                    buffered = [{"generation": 0, "epoch": i, "train_loss": v}
                                for i, v in enumerate(ckpt.meta["train_loss"])]
                elif cfg.variant in ("baseline_supervised", "supervised_label_corruption"):
                    pool = data.pools[T]
                    x = np.concatenate([labeled_x, load_images([r.image_path for r in pool], cfg.model.input_side)])
                    y = np.concatenate([labeled_y, np.array([r.label for r in pool], dtype=np.int64)])
                    ckpt = _supervised_generation(prev, x, y, cfg.distill, rng, T)
                    buffered = [{"generation": T, "epoch": i, "train_loss": v}
                                for i, v in enumerate(ckpt.meta["train_loss"])]
                else:
                    pool_x = load_images([r.image_path for r in data.pools[T]], cfg.model.input_side)
                    ckpt = evolve_generation(prev, pool_x, labeled_x, labeled_y, cfg.distill, rng,
                                             on_record=buffered.append)
            except NonFiniteLossError as exc:
                ledger.append({"T": T, "status": "failed", "error": str(exc),
                               "diagnostics": exc.diagnostics, "config_hash": chash})
                raise
            ckpt.rng_state = {}  # generations reseed from (seed, T); nothing to carry
            rel = Path("checkpoints") / f"gen_{T}.ckpt"
            digest = save_checkpoint(ckpt, rdir / rel)
            losses.write(buffered)
            ledger.append({
                "T": T, "status": "ok", "checkpoint": str(rel), "sha256": digest,
                "metrics": [f"metrics/gen_{T}_{s}.json" for s in ("internal_val", "external_test")],
                "wall_time": round(time.perf_counter() - t0, 3), "config_hash": chash,
                "variant": cfg.variant, "seed": seed,
            })
            log.info("%s seed %d: generation %d done in %.1fs", cfg.variant, seed, T,
                     time.perf_counter() - t0)
            if on_generation:
                on_generation(T, ckpt)
            prev = ckpt
    return ledger


def checkpoint_paths(cfg: ExperimentConfig, seed: int) -> dict[int, Path]:
    ledger = RunLedger(run_dir(cfg, seed) / "ledger.jsonl")
    return {t: run_dir(cfg, seed) / e["checkpoint"] for t, e in sorted(ledger.completed().items())}


def require_records(records, split: str) -> list[SampleRecord]:
    out = [r for r in records if r.split == split]
    if not out:
        raise InvalidInputError(f"manifest has no {split} records")
    return out


def toy_config(manifest, out_dir="runs", pretrain_manifest=None, unseen_manifest=None, **changes) -> ExperimentConfig:
    """Desk-scale settings for the synthetic corpus (toy ViT, 32 px inputs).

    The learning rates are higher and the correction cadence shorter than the
    full-scale defaults because a toy run only has a few hundred updates. The
    encoder is a single block: on 32 px inputs a deeper toy model mixes patch
    tokens before the last layer and its class-token attention stops pointing
    at the lesion, while a single block keeps it there and classifies as well.
    """
    cfg = ExperimentConfig(
        manifest=str(manifest),
        task="synthetic_blob",
        seeds=[0, 1, 2],
        out_dir=str(out_dir),
        pretrain_manifest=str(pretrain_manifest) if pretrain_manifest else None,
        unseen_manifest=str(unseen_manifest) if unseen_manifest else None,
        model=ModelSpec(depth=1),
        distill=DistillConfig(max_lr=5e-4, correction_interval=100, correction_steps=10),
        pretrain=PretrainConfig(epochs=3, lr=1e-3),
    )
    return cfg.replace(**changes) if changes else cfg
