"""Independent reference computations used by the tests.

These deliberately avoid the code paths they check: plain loops, enumeration
and resampling.
"""
import math

import numpy as np
from scipy import stats


def auc_pairs(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def operating_point_enum(scores, labels, min_sens=0.8):
    """Enumerate all n+1 thresholds (every distinct score plus +inf).

    Best = max specificity among thresholds meeting the sensitivity target,
    ties -> max sensitivity -> highest threshold. Returns (threshold, sens, spec, met).
    """
    cands = sorted(set(float(s) for s in scores)) + [math.inf]
    rows = []
    for t in cands:
        tp = sum(1 for s, y in zip(scores, labels) if y == 1 and s >= t)
        fn = sum(1 for s, y in zip(scores, labels) if y == 1 and s < t)
        tn = sum(1 for s, y in zip(scores, labels) if y == 0 and s < t)
        fp = sum(1 for s, y in zip(scores, labels) if y == 0 and s >= t)
        rows.append((t, tp / (tp + fn), tn / (tn + fp)))
    ok = [r for r in rows if r[1] >= min_sens - 1e-12]
    if ok:
        best = max(ok, key=lambda r: (r[2], r[1], r[0]))
        return best + (True,)
    best = max(rows, key=lambda r: (r[1], r[2], r[0]))
    return best + (False,)


def dice_pixels(a, b):
    a = np.asarray(a).ravel().tolist()
    b = np.asarray(b).ravel().tolist()
    inter = sum(1 for x, y in zip(a, b) if x and y)
    size = sum(1 for x in a if x) + sum(1 for y in b if y)
    return 1.0 if size == 0 else 2.0 * inter / size


def bootstrap_delong_p(a, b, labels, n_boot=100_000, seed=0):
    """Paired, class-stratified bootstrap test of AUC(a) - AUC(b).

    The resampled AUC difference is a weighted pair sum, so every replicate is
    evaluated from multinomial counts without re-sorting.
    """
    a, b, labels = map(np.asarray, (a, b, labels))
    rng = np.random.default_rng(seed)
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)

    def kernel(s):
        d = s[pos][:, None] - s[neg][None, :]
        return (d > 0) + 0.5 * (d == 0)

    k = kernel(a) - kernel(b)
    observed = k.mean()
    wp = rng.multinomial(len(pos), np.full(len(pos), 1 / len(pos)), size=n_boot).astype(float)
    wn = rng.multinomial(len(neg), np.full(len(neg), 1 / len(neg)), size=n_boot).astype(float)
    diffs = np.einsum("bi,ij,bj->b", wp, k, wn) / (len(pos) * len(neg))
    sd = diffs.std(ddof=1)
    if sd == 0:
        return 1.0
    return float(2 * stats.norm.sf(abs(observed) / sd))


def ce_direct(p, q):
    """Cross-entropy -sum p log q for plain python sequences."""
    return -sum(pi * math.log(qi) for pi, qi in zip(p, q))


def softmax_list(x, temp=1.0):
    m = max(x)
    e = [math.exp((v - m) / temp) for v in x]
    s = sum(e)
    return [v / s for v in e]
