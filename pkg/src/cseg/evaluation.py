"""Confusion counting, change-detection metrics and CDnet-style aggregation."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .dataset import load_cdnet  # noqa: F401  (re-exported: dataset layout reader)
from .errors import InputError
from .imagecore import FG, IGNORE

log = logging.getLogger(__name__)

# Column order of the tabular report.
REPORT_COLUMNS = ("Re", "Sp", "FPR", "FNR", "PWC", "FM", "Pr")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn)

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


def accumulate(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Count TP/FP/TN/FN, skipping pixels whose ground truth is IGNORE."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != IGNORE
    p = (pred == FG) & valid
    g = (gt == FG) & valid
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g & valid))
    tn = int(np.count_nonzero(valid)) - tp - fp - fn
    return ConfusionCounts(tp, fp, tn, fn)


@dataclass(frozen=True)
class MetricSet:
    """Metrics in report order; ``None`` marks a zero denominator."""

    Re: float | None
    Sp: float | None
    FPR: float | None
    FNR: float | None
    PWC: float | None
    FM: float | None
    Pr: float | None

    def as_dict(self):
        return asdict(self)


def _ratio(num, den):
    return num / den if den else None


def metrics(c: ConfusionCounts) -> MetricSet:
    re = _ratio(c.tp, c.tp + c.fn)
    sp = _ratio(c.tn, c.tn + c.fp)
    pr = _ratio(c.tp, c.tp + c.fp)
    fpr = _ratio(c.fp, c.fp + c.tn)
    fnr = _ratio(c.fn, c.tp + c.fn)
    pwc = _ratio(100.0 * (c.fn + c.fp), c.total)
    fm = None
    if pr is not None and re is not None:
        fm = _ratio(2.0 * pr * re, pr + re)
    return MetricSet(Re=re, Sp=sp, FPR=fpr, FNR=fnr, PWC=pwc, FM=fm, Pr=pr)


def mean_metrics(sets) -> MetricSet:
    """Unweighted mean of each metric over the sets where it is defined."""
    out = {}
    for f in fields(MetricSet):
        vals = [getattr(s, f.name) for s in sets if getattr(s, f.name) is not None]
        out[f.name] = float(np.mean(vals)) if vals else None
    return MetricSet(**out)


def aggregate(per_video):
    """Per-category and overall metrics.

    ``per_video`` is an iterable of ``(category, MetricSet)``. A category is
    the mean of its videos; overall is the mean of the categories.
    Returns ``(dict category -> MetricSet, overall MetricSet)``.
    """
    grouped = defaultdict(list)
    for category, ms in per_video:
        if category is None:
            raise InputError("every video needs a category")
        grouped[category].append(ms)
    categories = {}
    for cat in sorted(grouped):
        if not grouped[cat]:
            log.warning("category %s has no videos; omitted", cat)
            continue
        categories[cat] = mean_metrics(grouped[cat])
    if not categories:
        raise InputError("nothing to aggregate")
    return categories, mean_metrics(categories.values())


def _fmt(v):
    return "n/a" if v is None else f"{v:.4f}"


def format_table(categories: dict, overall: MetricSet) -> str:
    width = max([len("Category"), len("Overall")] + [len(c) for c in categories])
    lines = ["  ".join([f"{'Category':<{width}}"] + [f"{c:>8}" for c in REPORT_COLUMNS])]
    for name, ms in list(categories.items()) + [("Overall", overall)]:
        row = [f"{name:<{width}}"] + [f"{_fmt(getattr(ms, c)):>8}" for c in REPORT_COLUMNS]
        lines.append("  ".join(row))
    return "\n".join(lines) + "\n"


def report_dict(categories: dict, overall: MetricSet, videos: dict | None = None) -> dict:
    doc = {
        "columns": list(REPORT_COLUMNS),
        "categories": {k: v.as_dict() for k, v in categories.items()},
        "overall": overall.as_dict(),
    }
    if videos is not None:
        doc["videos"] = {
            vid: {"category": cat, "counts": asdict(counts), "metrics": metrics(counts).as_dict()}
            for vid, (cat, counts) in videos.items()
        }
    return doc


def write_report(prefix, categories, overall, videos=None):
    """Write ``<prefix>.txt`` (table) and ``<prefix>.json`` (structured)."""
    prefix = Path(prefix)
    prefix.with_suffix(".txt").write_text(format_table(categories, overall))
    prefix.with_suffix(".json").write_text(json.dumps(report_dict(categories, overall, videos), indent=2))
