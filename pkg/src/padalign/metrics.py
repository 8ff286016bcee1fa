"""Evaluation metrics and deterministic report rendering.

Detection quality is summarized as single-class average precision at a fixed
IoU threshold (precision-recall over a confidence sweep). Study tables carry
a seed count and a t-based confidence interval on every row; rendered output
contains only deterministic content so a rerun of the same configuration is
byte-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .perception import iou


class MetricsError(ValueError):
    pass


# ---------------------------------------------------------------------------
# interval statistics


def mean_ci(values, confidence: float = 0.95) -> tuple[float, float, float]:
    """Sample mean with a two-sided Student-t confidence interval.

    Returns (mean, lo, hi). A single value gets a degenerate interval.
    """
    x = np.asarray(list(values), dtype=float)
    if x.size == 0:
        raise MetricsError("mean_ci needs at least one value")
    m = float(np.mean(x))
    if x.size == 1:
        return m, m, m
    half = float(stats.t.ppf(0.5 + confidence / 2.0, x.size - 1) * np.std(x, ddof=1) / math.sqrt(x.size))
    return m, m - half, m + half


def paired_increase(before, after, confidence: float = 0.95) -> bool:
    """True when the paired mean difference (after - before) is positive at
    the given confidence: the lower bound of the one-sided t interval on the
    per-seed differences clears zero.
    """
    a = np.asarray(list(before), dtype=float)
    b = np.asarray(list(after), dtype=float)
    if a.shape != b.shape or a.size < 2:
        raise MetricsError("paired_increase needs two equal-length series of >= 2 values")
    d = b - a
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        return bool(np.mean(d) > 0.0)
    tcrit = float(stats.t.ppf(confidence, d.size - 1))
    lo = float(np.mean(d)) - tcrit * sd / math.sqrt(d.size)
    return lo > 0.0


def quantile(values, q: float) -> float:
    x = np.asarray(list(values), dtype=float)
    if x.size == 0:
        raise MetricsError("quantile needs at least one value")
    return float(np.quantile(x, q))


# ---------------------------------------------------------------------------
# detection average precision


@dataclass(frozen=True)
class DetectionRecord:
    """One detection event attributed to a frame, for AP accounting."""

    frame: tuple
    confidence: float
    box: tuple[float, float, float, float]


def average_precision(
    detections: list[DetectionRecord],
    gt_boxes: dict[tuple, list[tuple[float, float, float, float]]],
    iou_thresh: float = 0.8,
) -> float:
    """Single-class AP: greedy confidence-ranked matching, all-points interpolation.

    Each ground-truth box can absorb one detection; a detection matches the
    best still-unmatched box of its frame when IoU >= iou_thresh, otherwise it
    counts as a false positive. AP is the area under the monotone envelope of
    the precision-recall curve.
    """
    n_gt = sum(len(v) for v in gt_boxes.values())
    if n_gt == 0:
        raise MetricsError("average_precision needs at least one ground-truth box")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    matched: dict[tuple, set] = {k: set() for k in gt_boxes}
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        det = detections[i]
        best, best_j = 0.0, -1
        for j, g in enumerate(gt_boxes.get(det.frame, [])):
            if j in matched.get(det.frame, set()):
                continue
            v = iou(det.box, g)
            if v > best:
                best, best_j = v, j
        if best >= iou_thresh and best_j >= 0:
            matched.setdefault(det.frame, set()).add(best_j)
            tp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.arange(1, len(order) + 1)
    # monotone non-increasing precision envelope, then integrate over recall
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r_prev, ap = 0.0, 0.0
    for r, p in zip(recall, env):
        ap += (r - r_prev) * p
        r_prev = r
    return float(ap)


# ---------------------------------------------------------------------------
# report structure and rendering


@dataclass(frozen=True)
class ReportTable:
    """One result table; cells are numbers or strings, rows already ordered."""

    title: str
    columns: tuple[str, ...]
    rows: tuple[tuple, ...]

    def __post_init__(self):
        for r in self.rows:
            if len(r) != len(self.columns):
                raise MetricsError(f"row width {len(r)} != {len(self.columns)} columns in {self.title!r}")


@dataclass
class MetricsReport:
    """Deterministic study output: tables plus scalar facts (no wall clocks)."""

    tables: list[ReportTable] = field(default_factory=list)
    facts: dict = field(default_factory=dict)

    def add(self, table: ReportTable) -> None:
        self.tables.append(table)


def fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def ci_cell(mean: float, lo: float, hi: float) -> str:
    return f"{mean:.3f} [{lo:.3f}, {hi:.3f}]"


def to_json(report: MetricsReport) -> str:
    payload = {
        "facts": report.facts,
        "tables": [
            {"title": t.title, "columns": list(t.columns), "rows": [list(r) for r in t.rows]}
            for t in report.tables
        ],
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def to_markdown(report: MetricsReport) -> str:
    out: list[str] = []
    for t in report.tables:
        out.append(f"## {t.title}")
        out.append("")
        out.append("| " + " | ".join(t.columns) + " |")
        out.append("|" + "|".join(" --- " for _ in t.columns) + "|")
        for r in t.rows:
            out.append("| " + " | ".join(fmt(c) for c in r) + " |")
        out.append("")
    if report.facts:
        out.append("## Facts")
        out.append("")
        for k in sorted(report.facts):
            out.append(f"- {k}: {fmt(report.facts[k])}")
        out.append("")
    return "\n".join(out)
