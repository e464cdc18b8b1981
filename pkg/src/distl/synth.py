"""Desk-scale synthetic stand-in for a chest X-ray corpus.

Class 0 is "normal" (background only). Every other class stamps one localized
pattern (textured blob, ring, bar, cross, ...) at a random position over a
smooth structured background. The pattern footprint is the ground-truth mask.
The external test split is rendered with per-site acquisition shifts.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import cv2
import numpy as np

from distl.errors import InvalidInputError
from distl.protocol import SampleRecord, write_manifest, write_pretrain_manifest

PATTERNS = ("normal", "blob", "ring", "bar", "cross", "checker")

# (noise std multiplier, gamma, extra blur sigma) per external site
SITE_SHIFTS = {
    "site_a": (1.4, 1.0, 0.0),
    "site_b": (1.0, 1.6, 0.0),
    "site_c": (1.2, 0.7, 0.8),
}


@dataclass
class SynthDataset:
    records: list[SampleRecord]
    images: dict[str, np.ndarray]  # id -> uint8 (side, side)
    masks: dict[str, np.ndarray] = field(default_factory=dict)  # id -> bool (side, side)
    class_names: dict[int, str] = field(default_factory=dict)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    def write(self, root) -> Path:
        """Write PNG images, PNG masks and ``manifest.csv`` under ``root``."""
        root = Path(root)
        (root / "images").mkdir(parents=True, exist_ok=True)
        (root / "masks").mkdir(parents=True, exist_ok=True)
        for r in self.records:
            cv2.imwrite(str(root / "images" / f"{r.id}.png"), self.images[r.id])
            cv2.imwrite(str(root / "masks" / f"{r.id}.png"), self.masks[r.id].astype(np.uint8) * 255)
        records = [_with_path(r, str(root / "images" / f"{r.id}.png")) for r in self.records]
        manifest = root / "manifest.csv"
        write_manifest(records, manifest)
        return manifest


def _with_path(r: SampleRecord, path: str) -> SampleRecord:
    return replace(r, image_path=path)


def class_name(k: int) -> str:
    if k < len(PATTERNS):
        return PATTERNS[k]
    return f"pattern{k}"


def _background(side: int, rng: np.random.Generator) -> np.ndarray:
    coarse = rng.normal(0.0, 1.0, size=(4, 4)).astype(np.float32)
    smooth = cv2.resize(coarse, (side, side), interpolation=cv2.INTER_CUBIC)
    yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
    # two darker "lung fields" on a brighter mediastinum
    lungs = 0.35 * (np.exp(-((xx - 0.3) ** 2 + (yy - 0.5) ** 2) / 0.05)
                    + np.exp(-((xx - 0.7) ** 2 + (yy - 0.5) ** 2) / 0.05))
    return 0.5 - lungs + 0.08 * smooth


def _pattern_mask(kind: int, side: int, rng: np.random.Generator):
    """Return (mask, intensity profile) for pattern ``kind`` at a random spot."""
    radius = rng.uniform(0.12, 0.2) * side
    margin = radius + 1
    cy, cx = rng.uniform(margin, side - margin, size=2)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    dist = np.hypot(yy - cy, xx - cx)
    name = PATTERNS[(kind - 1) % (len(PATTERNS) - 1) + 1]
    if name == "blob":
        mask = dist <= radius
        profile = np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0) * 0.6 + 0.4
    elif name == "ring":
        mask = (dist <= radius) & (dist >= 0.55 * radius)
        profile = np.ones_like(dist)
    elif name == "bar":
        mask = (np.abs(yy - cy) <= 0.3 * radius) & (np.abs(xx - cx) <= radius)
        profile = np.ones_like(dist)
    elif name == "cross":
        mask = ((np.abs(yy - cy) <= 0.25 * radius) & (np.abs(xx - cx) <= radius)) | (
            (np.abs(xx - cx) <= 0.25 * radius) & (np.abs(yy - cy) <= radius))
        profile = np.ones_like(dist)
    else:
        mask = (np.abs(yy - cy) <= radius) & (np.abs(xx - cx) <= radius)
        profile = 0.5 + 0.5 * (((yy // 2 + xx // 2) % 2) == 0)
    return mask, profile * mask


def render(
    kind: int | tuple[int, ...],
    side: int,
    difficulty: float,
    rng: np.random.Generator,
    shift: tuple[float, float, float] = (1.0, 1.0, 0.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Render one image; returns (uint8 image, bool mask).

    ``kind`` 0 draws background only; a tuple of pattern indices stamps each of them.
    """
    noise_mult, gamma, blur = shift
    img = _background(side, rng)
    amplitude = 0.9 - 0.75 * difficulty
    noise_std = (0.02 + 0.12 * difficulty) * noise_mult
    kinds = (kind,) if isinstance(kind, (int, np.integer)) else tuple(kind)
    mask = np.zeros((side, side), dtype=bool)
    for k in kinds:
        if k == 0:
            continue
        m, profile = _pattern_mask(k, side, rng)
        texture = 1.0 + 0.15 * rng.normal(size=(side, side))
        img = img + amplitude * profile * texture
        mask |= m
    img = img + rng.normal(0.0, noise_std, size=(side, side))
    if blur > 0:
        img = cv2.GaussianBlur(img.astype(np.float32), (0, 0), blur).astype(np.float64)
    img = np.clip(img, 0.0, 1.2) / 1.2
    img = img ** gamma
    return np.rint(img * 255).astype(np.uint8), mask


def synth_dataset(
    n_classes: int = 2,
    per_class: int = 1000,
    side: int = 32,
    difficulty: float = 0.5,
    seed: int = 0,
    val_per_class: int = 100,
    test_per_class_per_site: int = 100,
    sites: tuple[str, ...] = tuple(SITE_SHIFTS),
    classes: tuple[int, ...] | None = None,
    id_prefix: str = "",
) -> SynthDataset:
    """Generate train / internal_val / external_test images, masks and records.

    ``per_class`` counts train images only. ``classes`` picks which pattern
    indices to render (default ``range(n_classes)``); use it to draw records of
    classes the task never sees.
    """
    if classes is None:
        if n_classes < 2:
            raise InvalidInputError("need at least two classes")
        classes = tuple(range(n_classes))
    if not 0.0 <= difficulty <= 1.0:
        raise InvalidInputError("difficulty must be in [0, 1]")
    root = np.random.SeedSequence(seed)
    plan = [("train", "internal", per_class, (1.0, 1.0, 0.0)),
            ("internal_val", "internal", val_per_class, (1.0, 1.0, 0.0))]
    plan += [("external_test", s, test_per_class_per_site, SITE_SHIFTS[s]) for s in sites]

    data = SynthDataset(records=[], images={}, class_names={k: class_name(k) for k in classes})
    for (split, site, count, shift), child in zip(plan, root.spawn(len(plan))):
        rng = np.random.default_rng(child)
        for k in classes:
            for i in range(count):
                rid = f"{id_prefix}{split}-{site}-c{k}-{i:05d}"
                img, mask = render(k, side, difficulty, rng, shift)
                data.images[rid] = img
                data.masks[rid] = mask
                data.records.append(SampleRecord(
                    id=rid, image_path=f"images/{rid}.png", label=k,
                    class_name=class_name(k), site=site, split=split,
                ))
    return data


def synth_multilabel(
    n: int = 4000,
    n_labels: int = 5,
    side: int = 32,
    difficulty: float = 0.5,
    seed: int = 0,
    prevalence: float = 0.3,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-label pretraining corpus: each of patterns ``1..n_labels`` is present
    independently with probability ``prevalence``. Returns (uint8 images, (n, K) targets)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E7]))
    images = np.empty((n, side, side), dtype=np.uint8)
    targets = (rng.random((n, n_labels)) < prevalence).astype(np.float32)
    for i in range(n):
        kinds = tuple(int(k) + 1 for k in np.flatnonzero(targets[i]))
        images[i], _ = render(kinds or 0, side, difficulty, rng)
    return images, targets


def write_multilabel(images: np.ndarray, targets: np.ndarray, root) -> Path:
    """Write a multi-label corpus as PNGs plus ``pretrain_manifest.csv`` under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    ids = [f"pre-{i:05d}" for i in range(len(images))]
    paths = []
    for rid, img in zip(ids, images):
        p = root / "images" / f"{rid}.png"
        cv2.imwrite(str(p), img)
        paths.append(str(p))
    manifest = root / "pretrain_manifest.csv"
    write_pretrain_manifest(ids, paths, targets, manifest)
    return manifest


def write_corpus(
    root,
    seed: int = 0,
    per_class: int = 1000,
    difficulty: float = 0.3,
    side: int = 32,
    val_per_class: int = 100,
    test_per_class_per_site: int = 100,
    unseen_classes: tuple[int, ...] = (2, 3),
    unseen_per_class: int = 300,
    pretrain_n: int = 4000,
    pretrain_labels: int = 5,
) -> dict[str, Path]:
    """Write the full synthetic corpus: task data, unseen-class extras and the
    multi-label pretraining set. Returns the three manifest paths."""
    root = Path(root)
    task = synth_dataset(per_class=per_class, side=side, difficulty=difficulty, seed=seed,
                         val_per_class=val_per_class, test_per_class_per_site=test_per_class_per_site)
    out = {"manifest": task.write(root / "task")}
    if unseen_per_class > 0 and unseen_classes:
        extra = synth_dataset(classes=tuple(unseen_classes), per_class=unseen_per_class, side=side,
                              difficulty=difficulty, seed=seed + 7919, val_per_class=0,
                              test_per_class_per_site=0, id_prefix="unseen-")
        out["unseen_manifest"] = extra.write(root / "unseen")
    if pretrain_n > 0:
        images, targets = synth_multilabel(pretrain_n, pretrain_labels, side, difficulty, seed)
        out["pretrain_manifest"] = write_multilabel(images, targets, root / "pretrain")
    return out
