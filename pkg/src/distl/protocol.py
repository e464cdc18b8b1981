"""Manifests, labeled/unlabeled partitioning and the growing-pool schedule.

Manifest format: UTF-8 CSV with header ``id,image_path,label,class_name,site,split``.
An empty ``label`` field means the record is unlabeled.

Pretraining manifests use ``id,image_path,targets`` where ``targets`` is a
``;``-separated 0/1 vector over the pretraining classes.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from distl.errors import InvalidConfigError, InvalidInputError

MANIFEST_FIELDS = ("id", "image_path", "label", "class_name", "site", "split")
SPLITS = ("train", "internal_val", "external_test")
PRETRAIN_FIELDS = ("id", "image_path", "targets")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    image_path: str
    label: int | None = None
    class_name: str | None = None
    site: str | None = None
    split: str = "train"
    injected: bool = False  # unseen-class record added to an unlabeled pool; never scored

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"unknown split {self.split!r} for record {self.id}")

    def without_label(self) -> "SampleRecord":
        return replace(self, label=None)


def read_manifest(path) -> list[SampleRecord]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    base = path.parent
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise InvalidInputError(f"manifest header must be {','.join(MANIFEST_FIELDS)}")
        for row in reader:
            image_path = row["image_path"]
            if not Path(image_path).is_absolute():
                image_path = str(base / image_path)
            records.append(SampleRecord(
                id=row["id"],
                image_path=image_path,
                label=int(row["label"]) if row["label"] != "" else None,
                class_name=row["class_name"] or None,
                site=row["site"] or None,
                split=row["split"] or "train",
            ))
    check_manifest(records)
    return records


def write_manifest(records: Iterable[SampleRecord], path, relative_to=None) -> None:
    path = Path(path)
    rel = Path(relative_to) if relative_to is not None else path.parent
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in records:
            image_path = r.image_path
            try:
                image_path = str(Path(image_path).relative_to(rel))
            except ValueError:
                pass
            writer.writerow([
                r.id, image_path, "" if r.label is None else r.label,
                r.class_name or "", r.site or "", r.split,
            ])


def check_manifest(records: Sequence[SampleRecord]) -> None:
    seen = set()
    names: dict[int, str] = {}
    for r in records:
        if r.id in seen:
            raise InvalidInputError(f"duplicate record id {r.id}")
        seen.add(r.id)
        if r.label is not None and r.class_name is not None:
            if names.setdefault(r.label, r.class_name) != r.class_name:
                raise InvalidInputError(f"label {r.label} maps to several class names")


def read_pretrain_manifest(path) -> tuple[list[str], np.ndarray]:
    """Return (absolute image paths, (N, K) float32 targets)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"pretraining manifest not found: {path}")
    paths, rows = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != PRETRAIN_FIELDS:
            raise InvalidInputError(f"pretraining manifest header must be {','.join(PRETRAIN_FIELDS)}")
        for row in reader:
            p = Path(row["image_path"])
            paths.append(str(p if p.is_absolute() else path.parent / p))
            try:
                rows.append([int(v) for v in row["targets"].split(";")])
            except ValueError as exc:
                raise InvalidInputError(f"bad targets for {row['id']}: {row['targets']!r}") from exc
    if not rows:
        raise InvalidInputError("pretraining manifest is empty")
    if len({len(r) for r in rows}) != 1:
        raise InvalidInputError("pretraining targets have inconsistent lengths")
    targets = np.asarray(rows, dtype=np.float32)
    if not np.isin(targets, (0.0, 1.0)).all():
        raise InvalidInputError("pretraining targets must be 0/1")
    return paths, targets


def write_pretrain_manifest(ids: Sequence[str], paths: Sequence[str], targets: np.ndarray, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PRETRAIN_FIELDS)
        for rid, p, t in zip(ids, paths, np.asarray(targets)):
            try:
                p = str(Path(p).relative_to(path.parent))
            except ValueError:
                pass
            writer.writerow([rid, p, ";".join(str(int(v)) for v in t)])


def class_names(records: Iterable[SampleRecord]) -> dict[int, str]:
    return {r.label: r.class_name for r in records if r.label is not None and r.class_name}


@dataclass
class DataPartition:
    labeled: list[SampleRecord]
    folds: list[list[SampleRecord]]
    labeled_frac: float
    seed: int

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def membership(self) -> dict:
        return {
            "labeled_frac": self.labeled_frac,
            "seed": self.seed,
            "labeled": [r.id for r in self.labeled],
            "folds": [[r.id for r in f] for f in self.folds],
        }

    def save(self, directory) -> list[Path]:
        """One id-per-line file for the labeled set and each fold, plus a JSON index."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        written = [directory / "labeled.txt"]
        written[0].write_text("".join(r.id + "\n" for r in self.labeled), encoding="utf-8")
        for i, fold in enumerate(self.folds, start=1):
            p = directory / f"fold_{i}.txt"
            p.write_text("".join(r.id + "\n" for r in fold), encoding="utf-8")
            written.append(p)
        idx = directory / "partition.json"
        idx.write_text(json.dumps(self.membership(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
        written.append(idx)
        return written

    @classmethod
    def load(cls, directory, records: Sequence[SampleRecord]) -> "DataPartition":
        meta = json.loads((Path(directory) / "partition.json").read_text(encoding="utf-8"))
        by_id = {r.id: r for r in records}
        try:
            labeled = [by_id[i] for i in meta["labeled"]]
            folds = [[by_id[i] for i in f] for f in meta["folds"]]
        except KeyError as exc:
            raise InvalidInputError(f"partition refers to unknown record {exc}") from None
        return cls(labeled=labeled, folds=folds, labeled_frac=meta["labeled_frac"], seed=meta["seed"])


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(quotas).astype(int)
    short = total - int(base.sum())
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:short]] += 1
    return base


def make_partition(
    manifest: Sequence[SampleRecord],
    labeled_frac: float = 0.1,
    folds: int = 3,
    seed: int = 0,
) -> DataPartition:
    """Stratified labeled subset of size floor(frac * N) plus ``folds`` near-equal unlabeled folds.

    Unlabeled folds are also stratified: records are shuffled within each class and
    dealt round-robin, so fold sizes differ by at most one (extras go to the first folds).
    """
    if not 0.0 < labeled_frac < 1.0:
        raise InvalidConfigError(f"labeled_frac must be in (0, 1), got {labeled_frac}")
    if folds < 1:
        raise InvalidConfigError("folds must be >= 1")
    train = [r for r in manifest if r.split == "train" and not r.injected]
    if not train:
        raise InvalidInputError("manifest has no train records")
    rng = np.random.default_rng(seed)

    keys = sorted({-1 if r.label is None else r.label for r in train})
    groups = {k: [r for r in train if (-1 if r.label is None else r.label) == k] for k in keys}
    n_total = len(train)
    n_lab = math.floor(labeled_frac * n_total)
    sizes = np.array([len(groups[k]) for k in keys], dtype=float)
    per_class = _largest_remainder(sizes * labeled_frac, n_lab)

    labeled, rest = [], []
    for k, n_k in zip(keys, per_class):
        members = groups[k]
        perm = rng.permutation(len(members))
        labeled.extend(members[i] for i in perm[:n_k])
        rest.extend(members[i] for i in perm[n_k:])
    # rest is class-sorted and shuffled within class; deal it round-robin
    fold_lists: list[list[SampleRecord]] = [[] for _ in range(folds)]
    for i, r in enumerate(rest):
        fold_lists[i % folds].append(r)
    return DataPartition(labeled=labeled, folds=fold_lists, labeled_frac=labeled_frac, seed=seed)


@dataclass(frozen=True)
class GenerationSchedule:
    t_max: int = 3
    cumulative: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.t_max < 0:
            raise InvalidConfigError("t_max must be >= 0")

    @classmethod
    def default(cls, n_folds: int = 3, t_max: int | None = None) -> "GenerationSchedule":
        t_max = n_folds if t_max is None else t_max
        if t_max < 0:
            raise InvalidConfigError("t_max must be >= 0")
        cum = {t: tuple(range(math.ceil(t * n_folds / t_max))) for t in range(1, t_max + 1)}
        return cls(t_max=t_max, cumulative=cum)

    def folds_at(self, t: int) -> tuple[int, ...]:
        if not 1 <= t <= self.t_max:
            raise InvalidInputError(f"generation {t} outside 1..{self.t_max}")
        if self.cumulative:
            return tuple(self.cumulative[t])
        raise InvalidConfigError("schedule has no fold mapping")


def pool_at(partition: DataPartition, schedule: GenerationSchedule, t: int) -> list[SampleRecord]:
    """Union of the unlabeled folds available at generation ``t``."""
    out = []
    for i in schedule.folds_at(t):
        out.extend(partition.folds[i])
    return out


def inject_unseen(
    pools: dict[int, list[SampleRecord]],
    extra_manifest: Sequence[SampleRecord],
    schedule: GenerationSchedule,
    n_folds: int,
    seed: int = 0,
) -> dict[int, list[SampleRecord]]:
    """Append unseen-class records to each pool, split into folds and added cumulatively.

    Injected records lose their labels, are forced into the train split and are
    flagged so they can never be scored.
    """
    if not extra_manifest:
        return {t: list(p) for t, p in pools.items()}
    rng = np.random.default_rng(seed)
    extras = [
        replace(r, label=None, split="train", injected=True)
        for r in (extra_manifest[i] for i in rng.permutation(len(extra_manifest)))
    ]
    extra_folds = [extras[i::n_folds] for i in range(n_folds)]
    out = {}
    for t, pool in pools.items():
        added = [r for i in schedule.folds_at(t) for r in extra_folds[i]]
        out[t] = list(pool) + added
    return out


def corrupt_labels(
    records: Sequence[SampleRecord],
    p: float = 0.05,
    seed: int = 0,
    n_classes: int | None = None,
) -> list[SampleRecord]:
    """Copy of ``records`` where each label is swapped, with probability ``p``,
    for a uniformly drawn different label. Unlabeled records pass through."""
    if not 0.0 <= p <= 1.0:
        raise InvalidConfigError(f"corruption probability must be in [0, 1], got {p}")
    names = class_names(records)
    if n_classes is None:
        labels = [r.label for r in records if r.label is not None]
        n_classes = max(labels) + 1 if labels else 0
    rng = np.random.default_rng(seed)
    out = []
    for r in records:
        flip, pick = rng.random(), rng.integers(0, max(n_classes - 1, 1))
        if r.label is None or n_classes < 2 or flip >= p:
            out.append(r)
            continue
        new = int(pick) + (1 if pick >= r.label else 0)
        out.append(replace(r, label=new, class_name=names.get(new)))
    return out
