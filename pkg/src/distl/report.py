"""Evaluation of finished runs: metrics files, schemas, plots and localization.

Every plot is rebuilt from the metrics JSON files alone, and the numbers behind
each figure are written next to it as CSV.
"""
from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path

import cv2
import jsonschema
import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from distl.errors import InvalidInputError  # noqa: E402
from distl.metrics import dice, localize, pooled_and_per_site  # noqa: E402
from distl.model import SmallCNN, extract_attention, gradcam, predict_proba  # noqa: E402

log = logging.getLogger(__name__)

EVAL_SPLITS = ("internal_val", "external_test")

_OPERATING = {
    "type": ["object", "null"],
    "required": ["threshold", "sensitivity", "specificity", "accuracy", "ppv", "npv", "constraint_met"],
    "properties": {
        "threshold": {"type": ["number", "string"]},
        "sensitivity": {"type": "number", "minimum": 0, "maximum": 1},
        "specificity": {"type": "number", "minimum": 0, "maximum": 1},
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "ppv": {"type": ["number", "null"]},
        "npv": {"type": ["number", "null"]},
        "constraint_met": {"type": "boolean"},
    },
}
_BLOCK = {
    "type": "object",
    "required": ["n", "n_positive", "auc", "ci95", "operating_point", "flags"],
    "properties": {
        "n": {"type": "integer", "minimum": 0},
        "n_positive": {"type": "integer", "minimum": 0},
        "auc": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "ci95": {"oneOf": [{"type": "null"}, {"type": "array", "items": {"type": "number"},
                                                "minItems": 2, "maxItems": 2}]},
        "operating_point": _OPERATING,
        "flags": {"type": "array", "items": {"type": "string"}},
    },
}
METRICS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "distl metrics report",
    "type": "object",
    "required": ["schema_version", "task", "generation", "split", "pooled", "per_site", "flags"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": 1},
        "task": {"type": "string"},
        "generation": {"type": "integer", "minimum": 0},
        "split": {"enum": list(EVAL_SPLITS)},
        "pooled": _BLOCK,
        "per_site": {"type": "object", "additionalProperties": _BLOCK},
        "flags": {"type": "array", "items": {"type": "string"}},
    },
}
LOCALIZE_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "distl localization report",
    "type": "object",
    "required": ["n", "mean_dice", "std_dice", "per_image"],
    "properties": {
        "n": {"type": "integer", "minimum": 1},
        "mean_dice": {"type": "number", "minimum": 0, "maximum": 1},
        "std_dice": {"type": "number", "minimum": 0},
        "threshold": {"type": "number"},
        "per_image": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "dice", "best_head"],
                "properties": {
                    "id": {"type": "string"},
                    "dice": {"type": "number", "minimum": 0, "maximum": 1},
                    "best_head": {"type": "integer", "minimum": 0},
                    "gradcam_dice": {"type": ["number", "null"]},
                },
            },
        },
        "gradcam": {"type": ["object", "null"]},
    },
}


def validate_metrics(doc: dict) -> None:
    jsonschema.validate(doc, METRICS_SCHEMA)


def write_schemas(directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "metrics.schema.json").write_text(json.dumps(METRICS_SCHEMA, indent=1), encoding="utf-8")
    (d / "localize.schema.json").write_text(json.dumps(LOCALIZE_SCHEMA, indent=1), encoding="utf-8")


# ---------------------------------------------------------------- metrics

def evaluate_model(model, images, records, task: str, generation: int, split: str,
                   positive_class: int = 1, min_sensitivity: float = 0.8):
    probs = predict_proba(model, images)
    scores = probs[:, positive_class]
    labels = np.array([int(r.label == positive_class) for r in records])
    sites = [r.site or "unknown" for r in records]
    return pooled_and_per_site(scores, labels, sites, task=task, generation=generation,
                               split=split, min_sensitivity=min_sensitivity)


def write_report(report, path) -> dict:
    doc = report.to_dict()
    validate_metrics(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return doc


def read_metrics(metrics_dir) -> list[dict]:
    docs = []
    for p in sorted(Path(metrics_dir).glob("gen_*_*.json")):
        doc = json.loads(p.read_text(encoding="utf-8"))
        validate_metrics(doc)
        docs.append(doc)
    return sorted(docs, key=lambda d: (d["split"], d["generation"]))


def curve_rows(docs) -> list[dict]:
    """One row per (split, scope, generation): pooled and per-site AUC with CI."""
    rows = []
    for d in docs:
        blocks = [("pooled", d["pooled"])] + sorted(d["per_site"].items())
        if len(d["per_site"]) == 1:
            blocks = blocks[:1]
        for scope, b in blocks:
            ci = b["ci95"] or [None, None]
            rows.append({"split": d["split"], "scope": scope, "T": d["generation"],
                         "auc": b["auc"], "ci_lo": ci[0], "ci_hi": ci[1], "n": b["n"]})
    return rows


def _write_csv(rows, path) -> None:
    fields = list(rows[0]) if rows else ["split", "scope", "T", "auc", "ci_lo", "ci_hi", "n"]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def read_curve_csv(path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["T"] = int(r["T"])
        r["auc"] = float(r["auc"]) if r["auc"] else None
    return rows


def _save(fig, stem: Path) -> list[Path]:
    out = [stem.with_suffix(".png"), stem.with_suffix(".svg")]
    for p in out:
        fig.savefig(p, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return out


def plot_auc_curve(rows, stem) -> list[Path]:
    """AUC against generation, one panel per split, pooled line plus per-site lines."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(rows, stem.with_suffix(".csv"))
    splits = sorted({r["split"] for r in rows}) or ["external_test"]
    fig, axes = plt.subplots(1, len(splits), figsize=(4.5 * len(splits), 3.5), squeeze=False)
    for ax, split in zip(axes[0], splits):
        scopes = sorted({r["scope"] for r in rows if r["split"] == split}, key=lambda s: (s != "pooled", s))
        for scope in scopes:
            pts = sorted((r["T"], r["auc"]) for r in rows
                         if r["split"] == split and r["scope"] == scope and r["auc"] is not None)
            if not pts:
                continue
            t, a = zip(*pts)
            style = dict(lw=2.2, marker="o") if scope == "pooled" else dict(lw=1, marker=".", alpha=0.7)
            ax.plot(t, a, label=scope, **style)
        ax.set_title(split)
        ax.set_xlabel("generation T")
        ax.set_ylabel("AUC")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    return _save(fig, stem)


def plot_site_bars(rows, stem) -> list[Path]:
    """Grouped bars of external AUC per site, one bar per generation."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    ext = [r for r in rows if r["split"] == "external_test" and r["auc"] is not None]
    _write_csv(ext, stem.with_suffix(".csv"))
    scopes = sorted({r["scope"] for r in ext}, key=lambda s: (s != "pooled", s))
    gens = sorted({r["T"] for r in ext})
    fig, ax = plt.subplots(figsize=(1.2 + 1.3 * max(len(scopes), 1), 3.5))
    width = 0.8 / max(len(gens), 1)
    for k, t in enumerate(gens):
        vals = [next((r["auc"] for r in ext if r["scope"] == s and r["T"] == t), np.nan) for s in scopes]
        ax.bar(np.arange(len(scopes)) + k * width, vals, width, label=f"T={t}")
    ax.set_xticks(np.arange(len(scopes)) + 0.4 - width / 2, scopes)
    lo = min([r["auc"] for r in ext], default=0.5)
    ax.set_ylim(max(0.0, lo - 0.05), 1.0)
    ax.set_ylabel("AUC")
    ax.legend(fontsize=7)
    return _save(fig, stem)


def plot_variant_bars(values: dict[str, float], stem, ylabel: str = "AUC") -> list[Path]:
    """Bar comparison of a single number across variants (e.g. final external AUC)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    rows = [{"variant": k, "value": v} for k, v in values.items()]
    _write_csv(rows, stem.with_suffix(".csv"))
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(values), 3.5))
    ax.bar(list(values), list(values.values()), color="tab:blue")
    ax.set_ylabel(ylabel)
    ax.tick_params(axis="x", rotation=20)
    return _save(fig, stem)


def plots_from_metrics(metrics_dir, plot_dir) -> list[Path]:
    rows = curve_rows(read_metrics(metrics_dir))
    return plot_auc_curve(rows, Path(plot_dir) / "auc_vs_T") + plot_site_bars(rows, Path(plot_dir) / "site_bars")


# ---------------------------------------------------------------- attention

def attention_panel(model, images, ids, threshold: float, stem, masks=None) -> list[Path]:
    """Per-head attention maps with the thresholded region outlined.

    Rows are images; the first column is the input (with the reference outline
    when ``masks`` is given), then one column per head.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    heads = model.spec.heads
    n = len(images)
    fig, axes = plt.subplots(n, heads + 1, figsize=(1.6 * (heads + 1), 1.6 * n), squeeze=False)
    rows = []
    for i, (img, rid) in enumerate(zip(images, ids)):
        amap = extract_attention(model, img)
        side = img.shape[-1]
        up = amap.upsample(side)
        ax = axes[i][0]
        ax.imshow(img, cmap="gray", vmin=0, vmax=1)
        if masks is not None and masks[i] is not None and masks[i].any():
            ax.contour(masks[i].astype(float), levels=[0.5], colors="lime", linewidths=0.8)
        ax.set_ylabel(rid[-12:], fontsize=6)
        for h in range(heads):
            ax = axes[i][h + 1]
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.imshow(up[h], cmap="jet", alpha=0.45, vmin=0, vmax=1)
            region = up[h] >= threshold
            if region.any() and not region.all():
                ax.contour(region.astype(float), levels=[0.5], colors="white", linewidths=0.8)
            if i == 0:
                ax.set_title(f"head {h}", fontsize=7)
            rows.append({"id": rid, "head": h, "area_above_threshold": float(region.mean())})
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.suptitle(f"class-token attention, threshold {threshold}", fontsize=8)
    _write_csv(rows, stem.with_suffix(".csv"))
    return _save(fig, stem)


# ---------------------------------------------------------------- localization

def load_mask(path, side: int) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise InvalidInputError(f"cannot read mask {path}")
    if m.shape[0] != side:
        m = cv2.resize(m, (side, side), interpolation=cv2.INTER_NEAREST)
    return m > 127


def random_mask_dice(loc, reference: np.ndarray, rng: np.random.Generator) -> float:
    """Best dice over heads of random masks matched in area to each head's mask."""
    best = 0.0
    for m in loc.masks:
        k = int(m.sum())
        flat = np.zeros(m.size, bool)
        flat[rng.choice(m.size, size=k, replace=False)] = True
        best = max(best, dice(flat.reshape(m.shape), reference))
    return best


def localization_report(model, images, masks, ids, threshold: float = 0.1,
                        cnn: SmallCNN | None = None, gradcam_threshold: float = 0.6,
                        target_class: int = 1, baseline_seed: int | None = None) -> dict:
    """Best-head attention dice per image, with optional GradCAM and random-mask columns."""
    if len(images) == 0:
        raise InvalidInputError("no masks to localize against")
    rng = np.random.default_rng(baseline_seed) if baseline_seed is not None else None
    per_image, cam_dices, rand_dices = [], [], []
    use_cam = cnn is not None and cnn.trained
    if cnn is not None and not cnn.trained:
        warnings.warn("GradCAM adapter is untrained; skipping the GradCAM column", stacklevel=2)
    for img, ref, rid in zip(images, masks, ids):
        loc = localize(extract_attention(model, img), threshold, reference=ref)
        row = {"id": rid, "dice": loc.best_dice, "best_head": loc.best_head}
        if use_cam:
            heat, _ = gradcam(cnn, img, target_class)
            row["gradcam_dice"] = dice(heat >= gradcam_threshold, ref)
            cam_dices.append(row["gradcam_dice"])
        if rng is not None:
            row["random_dice"] = random_mask_dice(loc, ref, rng)
            rand_dices.append(row["random_dice"])
        per_image.append(row)
    d = np.array([r["dice"] for r in per_image])
    out = {"n": len(per_image), "mean_dice": float(d.mean()), "std_dice": float(d.std()),
           "median_dice": float(np.median(d)), "threshold": threshold, "per_image": per_image,
           "gradcam": None}
    if use_cam:
        c = np.array(cam_dices)
        out["gradcam"] = {"threshold": gradcam_threshold, "mean_dice": float(c.mean()),
                          "std_dice": float(c.std())}
    if rand_dices:
        out["random_baseline"] = {"mean_dice": float(np.mean(rand_dices)),
                                  "median_dice": float(np.median(rand_dices))}
    jsonschema.validate(out, LOCALIZE_SCHEMA)
    return out
