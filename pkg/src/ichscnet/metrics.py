"""Hard evaluation metrics for segmentation (DSC, Jaccard, 95HD, PRO) and prognosis (Acc, Rec, Pre, AUC).

Percent-valued metrics are returned in [0, 100]; AUC is reported x100 as well.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

EIGHT = np.ones((3, 3), dtype=bool)

METRIC_DEFINITIONS = {
    "dsc": "100 * 2|A&B| / (|A| + |B|); both empty -> 100",
    "jaccard": "100 * |A&B| / |A or B|; both empty -> 100",
    "hd95": "95th percentile (linear interpolation) of directed boundary-to-nearest-boundary Euclidean "
    "distances pooled over both directions; boundary = foreground pixels with a background 8-neighbour "
    "(image border counts as background); empty mask -> image diagonal, flagged",
    "pro": "100 * mean over 8-connected GT components c of |pred & c| / |c|; empty GT -> undefined, flagged",
    "acc/rec/pre": "threshold p_poor >= 0.5; positive class = poor prognosis (label 1); 0 when undefined, flagged",
    "auc": "Mann-Whitney statistic with midranks for ties, x100",
    "aggregation": "macro mean over cases, flagged cases excluded per metric; pooled-pixel variants alongside",
}


def _pair(pred, gt):
    a = np.asarray(pred, dtype=bool)
    b = np.asarray(gt, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def dsc(pred, gt) -> float:
    a, b = _pair(pred, gt)
    denom = a.sum() + b.sum()
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * np.logical_and(a, b).sum() / denom


def jaccard(pred, gt) -> float:
    a, b = _pair(pred, gt)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 100.0
    return 100.0 * np.logical_and(a, b).sum() / union


def boundary(mask) -> np.ndarray:
    m = np.asarray(mask, dtype=bool)
    return m & ~ndimage.binary_erosion(m, structure=EIGHT, border_value=0)


def _directed(src, dst_boundary):
    # exact Euclidean distance from every pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst_boundary)
    return dist[src]


def hd95(pred, gt) -> tuple[float, bool]:
    """Returns (distance in pixels, flagged); flagged means a mask was empty and the diagonal was used."""
    a, b = _pair(pred, gt)
    if not a.any() or not b.any():
        return math.hypot(*a.shape), True
    ba, bb = boundary(a), boundary(b)
    d = np.concatenate([_directed(ba, bb), _directed(bb, ba)])
    return float(np.percentile(d, 95, method="linear")), False


def pro(pred, gt) -> tuple[float, bool]:
    """Returns (per-region overlap percent, flagged); flagged (value nan) when gt is empty."""
    a, b = _pair(pred, gt)
    labels, n = ndimage.label(b, structure=EIGHT)
    if n == 0:
        return float("nan"), True
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    hits = np.bincount(labels[a].ravel(), minlength=n + 1)[1:]
    return 100.0 * float(np.mean(hits / sizes)), False


@dataclass
class SegScores:
    dsc: float
    jaccard: float
    hd95: float
    pro: float
    flags: dict = field(default_factory=dict)
    # pixel counts for pooled aggregation
    counts: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("dsc", "jaccard"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if not self.flags.get("pro") and not 0.0 <= self.pro <= 100.0 + 1e-9:
            raise ValueError(f"pro={self.pro} outside [0, 100]")
        if self.hd95 < 0:
            raise ValueError("hd95 must be non-negative")


def seg_scores(pred, gt) -> SegScores:
    a, b = _pair(pred, gt)
    h, hflag = hd95(a, b)
    p, pflag = pro(a, b)
    flags = {}
    if hflag:
        flags["hd95"] = "empty mask; diagonal sentinel"
    if pflag:
        flags["pro"] = "empty ground truth"
    counts = {"inter": int((a & b).sum()), "pred": int(a.sum()), "gt": int(b.sum()), "union": int((a | b).sum())}
    return SegScores(dsc=dsc(a, b), jaccard=jaccard(a, b), hd95=h, pro=p, flags=flags, counts=counts)


@dataclass
class ClaScores:
    acc: float
    rec: float
    pre: float
    auc: float
    flags: dict = field(default_factory=dict)


def auc_score(probs, labels) -> float:
    """Mann-Whitney AUC in [0, 1] with midranks; raises if only one class is present."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n1 = int(y.sum())
    n0 = len(y) - n1
    if n1 == 0 or n0 == 0:
        raise ValueError("AUC is undefined with a single class")
    ranks = rankdata(p, method="average")
    return float((ranks[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def classification_scores(probs, labels) -> ClaScores:
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if p.size == 0 or p.shape != y.shape:
        raise ValueError("need matching, non-empty probability and label lists")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pred = (p >= 0.5).astype(np.int64)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    flags = {}
    rec = 100.0 * tp / (tp + fn) if tp + fn else 0.0
    pre = 100.0 * tp / (tp + fp) if tp + fp else 0.0
    if tp + fn == 0:
        flags["rec"] = "no positive labels"
    if tp + fp == 0:
        flags["pre"] = "no positive predictions"
    try:
        auc = 100.0 * auc_score(p, y)
    except ValueError:
        auc = float("nan")
        flags["auc"] = "single-class labels"
    return ClaScores(acc=100.0 * float((pred == y).mean()), rec=rec, pre=pre, auc=auc, flags=flags)


SEG_KEYS = ("dsc", "jaccard", "hd95", "pro")
CLA_KEYS = ("acc", "rec", "pre", "auc")


def aggregate(per_case: list) -> dict:
    """Macro mean over entries (flagged entries excluded per metric).

    For SegScores the pooled-pixel DSC/Jaccard are emitted alongside; ClaScores entries
    (e.g. one per fold) are averaged the same way.
    """
    if not per_case:
        raise ValueError("nothing to aggregate")
    keys = CLA_KEYS if isinstance(per_case[0], ClaScores) else SEG_KEYS
    out = {}
    for key in keys:
        vals = [getattr(s, key) for s in per_case if key not in s.flags]
        out[key] = float(np.mean(vals)) if vals else float("nan")
        out[f"n_{key}"] = len(vals)
    if keys is SEG_KEYS and all(s.counts for s in per_case):
        inter = sum(s.counts["inter"] for s in per_case)
        size = sum(s.counts["pred"] + s.counts["gt"] for s in per_case)
        union = sum(s.counts["union"] for s in per_case)
        out["pooled_dsc"] = 100.0 * 2 * inter / size if size else 100.0
        out["pooled_jaccard"] = 100.0 * inter / union if union else 100.0
    return out


# ---------------------------------------------------------------------------
# report emitter


def write_case_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("", encoding="utf-8")
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_aggregate_json(path, scores: dict, metadata: dict | None = None) -> None:
    payload = {"scores": scores, "metadata": {"definitions": METRIC_DEFINITIONS, **(metadata or {})}}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default), encoding="utf-8")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, (SegScores, ClaScores)):
        return asdict(o)
    raise TypeError(type(o))
