"""Diagnostic statistics: ROC/AUC with DeLong intervals, paired DeLong test,
sensitivity-constrained operating points, dice localization and screening simulation."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import cv2
import numpy as np
from scipy import stats

from distl.errors import (
    DegenerateComparisonWarning,
    InvalidConfigError,
    InvalidInputError,
    UndefinedMetricError,
)

SIGNIFICANCE = 0.05
Z95 = float(stats.norm.ppf(0.975))


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvalidInputError("scores and labels differ in length")
    if not np.all(np.isin(labels, (0, 1))):
        raise InvalidInputError("labels must be binary 0/1")
    labels = labels.astype(bool)
    if labels.all() or not labels.any():
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    return scores, labels


def midrank(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    return stats.rankdata(x, method="average")


def _delong_components(scores: np.ndarray, labels: np.ndarray):
    """AUC and the DeLong structural components for one scorer."""
    pos, neg = scores[labels], scores[~labels]
    m, n = len(pos), len(neg)
    tz = midrank(np.concatenate([pos, neg]))
    tx, ty = midrank(pos), midrank(neg)
    # U is a half-integer held exactly, so one division gives the correctly rounded AUC
    auc = (tz[:m].sum() - m * (m + 1) / 2.0) / (m * n)
    v10 = (tz[:m] - tx) / n  # per-positive placement values
    v01 = 1.0 - (tz[m:] - ty) / m  # per-negative placement values
    return auc, v10, v01


def _delong_cov(v10s: np.ndarray, v01s: np.ndarray) -> np.ndarray:
    m, n = v10s.shape[1], v01s.shape[1]
    s10 = np.atleast_2d(np.cov(v10s)) if m > 1 else np.zeros((len(v10s), len(v10s)))
    s01 = np.atleast_2d(np.cov(v01s)) if n > 1 else np.zeros((len(v01s), len(v01s)))
    return s10 / m + s01 / n


def _ci(auc: float, var: float) -> tuple[float, float]:
    half = Z95 * np.sqrt(max(var, 0.0))
    return float(max(0.0, auc - half)), float(min(1.0, auc + half))


@dataclass
class RocAnalysis:
    thresholds: np.ndarray  # descending; predict positive when score >= threshold
    tpr: np.ndarray
    fpr: np.ndarray
    auc: float
    ci95: tuple[float, float]
    variance: float = 0.0

    def to_dict(self) -> dict:
        return {"auc": self.auc, "ci95": list(self.ci95)}


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    scores, labels = _check_binary(scores, labels)
    thr = np.concatenate([[np.inf], np.unique(scores)[::-1]])
    pos, neg = labels.sum(), (~labels).sum()
    tpr = np.array([(scores[labels] >= t).sum() / pos for t in thr])
    fpr = np.array([(scores[~labels] >= t).sum() / neg for t in thr])
    return thr, tpr, fpr


def roc_auc(scores, labels) -> RocAnalysis:
    """Tie-corrected Mann-Whitney AUC with a DeLong 95% interval."""
    scores, labels = _check_binary(scores, labels)
    auc, v10, v01 = _delong_components(scores, labels)
    var = float(_delong_cov(v10[None], v01[None])[0, 0])
    thr, tpr, fpr = roc_curve(scores, labels)
    return RocAnalysis(thresholds=thr, tpr=tpr, fpr=fpr, auc=float(auc), ci95=_ci(auc, var), variance=var)


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    ci95_a: tuple[float, float]
    ci95_b: tuple[float, float]
    p_value: float
    z: float
    significant: bool
    degenerate: bool = False

    @property
    def difference(self) -> float:
        return self.auc_a - self.auc_b


def delong_compare(scores_a, scores_b, labels) -> DelongResult:
    """Two-sided paired DeLong test for AUC(a) - AUC(b)."""
    sa, lab = _check_binary(scores_a, labels)
    sb, _ = _check_binary(scores_b, labels)
    auc_a, v10a, v01a = _delong_components(sa, lab)
    auc_b, v10b, v01b = _delong_components(sb, lab)
    cov = _delong_cov(np.vstack([v10a, v10b]), np.vstack([v01a, v01b]))
    var_diff = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    ci_a, ci_b = _ci(auc_a, cov[0, 0]), _ci(auc_b, cov[1, 1])
    diff = auc_a - auc_b
    if var_diff <= 1e-15 * max(cov[0, 0] + cov[1, 1], 1e-300):
        warnings.warn("AUC difference has zero variance; reporting p=1", DegenerateComparisonWarning)
        return DelongResult(float(auc_a), float(auc_b), ci_a, ci_b, 1.0, 0.0, False, True)
    z = diff / np.sqrt(var_diff)
    p = float(2.0 * stats.norm.sf(abs(z)))
    return DelongResult(float(auc_a), float(auc_b), ci_a, ci_b, p, float(z), p < SIGNIFICANCE)


@dataclass
class OperatingMetrics:
    threshold: float
    sensitivity: float
    specificity: float
    accuracy: float
    ppv: float | None
    npv: float | None
    constraint_met: bool = True

    def to_dict(self) -> dict:
        d = asdict(self)
        d["threshold"] = _json_float(self.threshold)
        return d


def confusion_at(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pred = scores >= threshold
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    tn = int((~pred & ~labels).sum())
    return tp, fp, fn, tn


def metrics_at(scores, labels, threshold: float, constraint_met: bool = True) -> OperatingMetrics:
    tp, fp, fn, tn = confusion_at(scores, labels, threshold)
    n = tp + fp + fn + tn
    return OperatingMetrics(
        threshold=float(threshold),
        sensitivity=tp / (tp + fn) if tp + fn else 0.0,
        specificity=tn / (tn + fp) if tn + fp else 0.0,
        accuracy=(tp + tn) / n if n else 0.0,
        ppv=tp / (tp + fp) if tp + fp else None,
        npv=tn / (tn + fn) if tn + fn else None,
        constraint_met=constraint_met,
    )


def operating_point(roc: RocAnalysis, scores, labels, min_sensitivity: float = 0.80) -> OperatingMetrics:
    """Threshold with the best specificity among those with sensitivity >= target.

    Ties prefer higher sensitivity, then the higher threshold. When no threshold
    meets the target, the most sensitive one is returned with ``constraint_met=False``.
    """
    scores, labels = _check_binary(scores, labels)
    thr, tpr, fpr = roc.thresholds, roc.tpr, roc.fpr
    spec = 1.0 - fpr
    ok = tpr >= min_sensitivity - 1e-12
    if ok.any():
        idx = np.flatnonzero(ok)
        # lexicographic: max spec, then max sens, then max threshold (earliest index)
        best = min(idx, key=lambda i: (-spec[i], -tpr[i], i))
        return metrics_at(scores, labels, thr[best], True)
    best = min(range(len(thr)), key=lambda i: (-tpr[i], -spec[i], i))
    return metrics_at(scores, labels, thr[best], False)


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / total


@dataclass
class Localization:
    masks: np.ndarray  # (heads, side, side) bool
    best_head: int | None = None
    dices: list[float] = field(default_factory=list)

    @property
    def best_dice(self) -> float | None:
        return self.dices[self.best_head] if self.best_head is not None else None


def upsample_nearest(maps: np.ndarray, side: int) -> np.ndarray:
    maps = np.asarray(maps, dtype=np.float64)
    if maps.shape[-1] == side:
        return maps
    return np.stack([
        cv2.resize(m, (side, side), interpolation=cv2.INTER_NEAREST) for m in maps
    ])


def localize(attn_map, threshold: float, side: int | None = None, reference=None) -> Localization:
    """Threshold normalized maps (one per head) into masks at image resolution.

    With a reference mask the best head is the one with the highest dice.
    """
    if not 0.0 <= threshold <= 1.0:
        raise InvalidConfigError(f"threshold must be in [0, 1], got {threshold}")
    maps = getattr(attn_map, "per_head", attn_map)
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim == 2:
        maps = maps[None]
    if side is None:
        side = np.asarray(reference).shape[0] if reference is not None else maps.shape[-1]
    masks = upsample_nearest(maps, side) >= threshold
    loc = Localization(masks=masks)
    if reference is not None:
        loc.dices = [dice(m, reference) for m in masks]
        loc.best_head = int(np.argmax(loc.dices))
    return loc


@dataclass
class ScreeningResult:
    ruled_out_fraction: float
    npv: float | None
    prevalence: float
    n: int
    indices: np.ndarray = field(repr=False, default=None)


def screening_sim(
    scores, labels, target_prevalence: float, threshold: float, n: int | None = None, seed: int = 0,
) -> ScreeningResult:
    """Resample (with replacement) to ``target_prevalence`` and report the share
    predicted negative together with the NPV at ``threshold``."""
    if not 0.0 < target_prevalence < 1.0:
        raise InvalidConfigError("target prevalence must be in (0, 1)")
    scores, labels = _check_binary(scores, labels)
    n = len(scores) if n is None else int(n)
    n_pos = int(round(target_prevalence * n))
    rng = np.random.default_rng(seed)
    pos_idx, neg_idx = np.flatnonzero(labels), np.flatnonzero(~labels)
    idx = np.concatenate([rng.choice(pos_idx, n_pos, replace=True),
                          rng.choice(neg_idx, n - n_pos, replace=True)])
    tp, fp, fn, tn = confusion_at(scores[idx], labels[idx], threshold)
    return ScreeningResult(
        ruled_out_fraction=(tn + fn) / n,
        npv=tn / (tn + fn) if tn + fn else None,
        prevalence=n_pos / n,
        n=n,
        indices=idx,
    )


def _json_float(x):
    if x is None:
        return None
    x = float(x)
    if np.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


def metric_block(scores, labels, min_sensitivity: float = 0.80) -> dict:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    block = {"n": int(len(labels)), "n_positive": int(labels.sum())}
    try:
        roc = roc_auc(scores, labels)
    except UndefinedMetricError:
        block.update(auc=None, ci95=None, operating_point=None, flags=["auc_undefined"])
        return block
    op = operating_point(roc, scores, labels, min_sensitivity)
    flags = [] if op.constraint_met else ["sensitivity_target_unmet"]
    block.update(auc=roc.auc, ci95=list(roc.ci95), operating_point=op.to_dict(), flags=flags)
    return block


@dataclass
class MetricsReport:
    task: str
    generation: int
    split: str
    pooled: dict
    per_site: dict
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "task": self.task,
            "generation": self.generation,
            "split": self.split,
            "pooled": self.pooled,
            "per_site": self.per_site,
            "flags": list(self.flags),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def pooled_and_per_site(
    scores, labels, sites, task: str = "task", generation: int = 0, split: str = "external_test",
    min_sensitivity: float = 0.80,
) -> MetricsReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    sites = np.asarray(sites, dtype=object)
    if any(s is None for s in sites):
        raise InvalidInputError("every sample needs a site tag")
    per_site = {}
    flags = []
    for s in sorted(set(sites.tolist())):
        sel = sites == s
        per_site[s] = metric_block(scores[sel], labels[sel], min_sensitivity)
        if per_site[s]["auc"] is None:
            flags.append(f"auc_undefined:{s}")
    pooled = metric_block(scores, labels, min_sensitivity)
    return MetricsReport(task, generation, split, pooled, per_site, flags)
