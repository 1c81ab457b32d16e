"""Ranking metrics, per-slot reports and Pareto analysis."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .calibration import ece as expected_calibration_error
from .datagen import SLOTS, AdSlot, Dataset


# Beyond this many distinct precision denominators the rational sum gets slow
# and a compensated float sum (a few ulp from exact) is used instead.
EXACT_SUM_LIMIT = 20_000


class MetricError(ValueError):
    pass


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall curve by step integration over recall.

    Thresholds sit at the distinct score values only; all examples sharing a
    score enter the positive set together, so ties are never split
    optimistically. The sum is accumulated in rationals, so the result is the
    exact area rounded once.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1).astype(np.int64)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise MetricError("AUC-PR is undefined without positive labels")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    dtp = np.diff(np.r_[0, tp])
    keep = dtp > 0
    # area = sum over thresholds of (recall step) * precision
    #      = (1 / n_pos) * sum dtp * tp / (tp + fp)
    by_denominator: dict[int, int] = {}
    for step, hits, size in zip(dtp[keep].tolist(), tp[keep].tolist(),
                                (tp[keep] + fp[keep]).tolist()):
        by_denominator[size] = by_denominator.get(size, 0) + step * hits
    if len(by_denominator) > EXACT_SUM_LIMIT:
        return math.fsum(v / (c * n_pos) for c, v in by_denominator.items())
    total = sum((Fraction(v, c) for c, v in by_denominator.items()), Fraction(0))
    return float(total / n_pos)


# --------------------------------------------------------------------------
# per-slot reports


@dataclass
class SlotStats:
    count: int
    positives: int
    auc_pr: float | None
    ece: float | None
    auc_pr_change: float | None = None
    ece_change: float | None = None


@dataclass
class SlotReport:
    slots: dict[str, SlotStats]
    baseline: str | None = None
    ece_scheme: str = "equal-mass"
    ece_bins: int = 15

    def to_dict(self) -> dict:
        return {
            "baseline": self.baseline,
            "ece_scheme": self.ece_scheme,
            "ece_bins": self.ece_bins,
            "slots": {name: {
                "count": st.count,
                "positives": st.positives,
                "auc_pr": st.auc_pr,
                "ece": st.ece,
                "auc_pr_change": st.auc_pr_change,
                "ece_change": st.ece_change,
            } for name, st in self.slots.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, payload: Mapping) -> "SlotReport":
        slots = {name: SlotStats(**vals) for name, vals in payload["slots"].items()}
        return cls(slots, payload.get("baseline"), payload.get("ece_scheme", "equal-mass"),
                   payload.get("ece_bins", 15))

    def metric(self, slot: str, name: str) -> float | None:
        return getattr(self.slots[slot], name)


def pct_change(value: float | None, base: float | None) -> float | None:
    if value is None or base is None or base == 0:
        return None
    return 100.0 * (value - base) / base


def evaluate(scores, dataset: Dataset, baseline: SlotReport | None = None,
             baseline_name: str | None = None, ece_scheme: str = "equal-mass",
             ece_bins: int = 15) -> SlotReport:
    """Per-slot AUC-PR and ECE of ``scores`` (one probability per impression)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.shape != (len(dataset),):
        raise MetricError(f"expected {len(dataset)} scores, got {scores.shape[0]}")
    slots: dict[str, SlotStats] = {}
    for slot in SLOTS:
        rows = dataset.slot_mask(slot)
        n = int(rows.sum())
        if n == 0:
            continue
        y = dataset.labels[rows]
        pos = int(y.sum())
        ap = auc_pr(scores[rows], y) if pos > 0 else None
        err, _ = expected_calibration_error(scores[rows], y, scheme=ece_scheme, n_bins=ece_bins)
        slots[slot.name] = SlotStats(n, pos, ap, err)
    report = SlotReport(slots, ece_scheme=ece_scheme, ece_bins=ece_bins)
    if baseline is not None:
        attach_baseline(report, baseline, baseline_name or "baseline")
    return report


def attach_baseline(report: SlotReport, baseline: SlotReport, name: str) -> None:
    if set(report.slots) != set(baseline.slots):
        raise MetricError(f"slot mismatch between report {sorted(report.slots)} "
                          f"and baseline {sorted(baseline.slots)}")
    report.baseline = name
    for slot, st in report.slots.items():
        b = baseline.slots[slot]
        st.auc_pr_change = pct_change(st.auc_pr, b.auc_pr)
        st.ece_change = pct_change(st.ece, b.ece)


def sign_test(deltas: Sequence[float]) -> float:
    """Two-sided sign-test p-value for per-seed metric differences (zeros dropped)."""
    nonzero = [d for d in deltas if d != 0]
    n = len(nonzero)
    if n == 0:
        return 1.0
    k = min(sum(d > 0 for d in nonzero), sum(d < 0 for d in nonzero))
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2 ** n
    return min(1.0, 2.0 * tail)


# --------------------------------------------------------------------------
# Pareto analysis


@dataclass
class ObjectivePoint:
    label: str
    coordinates: dict[str, float]


@dataclass
class ParetoResult:
    front: list[str]
    dominated_by: dict[str, list[str]] = field(default_factory=dict)


def dominates(a: Mapping[str, float], b: Mapping[str, float]) -> bool:
    """``a`` is at least as good everywhere and strictly better somewhere (higher is better)."""
    return all(a[k] >= b[k] for k in a) and any(a[k] > b[k] for k in a)


def pareto_front(points: Sequence[ObjectivePoint]) -> ParetoResult:
    if not points:
        return ParetoResult([], {})
    axes = set(points[0].coordinates)
    for p in points:
        if set(p.coordinates) != axes:
            raise MetricError(f"point {p.label!r} has axes {sorted(p.coordinates)}, "
                              f"expected {sorted(axes)}")
        if not all(math.isfinite(v) for v in p.coordinates.values()):
            raise MetricError(f"point {p.label!r} has non-finite coordinates")
    labels = [p.label for p in points]
    if len(set(labels)) != len(labels):
        raise MetricError("point labels must be unique")
    names = sorted(axes)
    coords = np.array([[p.coordinates[k] for k in names] for p in points]).reshape(len(points), len(names))
    # ge[i, j]: i >= j on every axis; gt[i, j]: i > j on some axis
    ge = (coords[:, None, :] >= coords[None, :, :]).all(axis=2)
    gt = (coords[:, None, :] > coords[None, :, :]).any(axis=2)
    dom = ge & gt
    front = [labels[j] for j in range(len(points)) if not dom[:, j].any()]
    dominated_by = {labels[j]: [labels[i] for i in np.flatnonzero(dom[:, j])]
                    for j in range(len(points)) if dom[:, j].any()}
    return ParetoResult(front, dominated_by)
