"""Per-task temperature scaling and expected calibration error."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .tensorcore import logistic

T_MIN, T_MAX = 1e-2, 1e2
GRID_POINTS = 241
GOLDEN_TOL = 1e-9
_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


class CalibrationError(ValueError):
    pass


def apply_temperature(z, T: float):
    if not T > 0:
        raise CalibrationError(f"temperature must be positive, got {T!r}")
    out = logistic(np.asarray(z, dtype=np.float64) / T)
    return float(out) if np.ndim(out) == 0 else out


def temperature_nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    z = logits / T
    return float(np.mean(np.maximum(z, 0.0) - z * labels + np.log1p(np.exp(-np.abs(z)))))


@dataclass
class CalibrationHead:
    task: str
    T: float
    iterations: int = 0
    objective: float = math.nan
    bracket: tuple[float, float] = field(default=(T_MIN, T_MAX))
    fitted: bool = True

    def __call__(self, logits):
        return apply_temperature(logits, self.T)


def fit_temperature(logits, labels, task: str = "") -> CalibrationHead:
    """Temperature minimising NLL: log-spaced grid, then golden-section in log T."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if z.shape != y.shape or z.size == 0:
        raise CalibrationError("need equally many logits and labels")
    if not np.isfinite(z).all():
        raise CalibrationError("logits must be finite")
    if y.min() == y.max():
        raise CalibrationError(f"task {task!r}: labels contain a single class; "
                               "temperature is not identifiable")
    grid = np.linspace(math.log(T_MIN), math.log(T_MAX), GRID_POINTS)
    values = [temperature_nll(z, y, math.exp(u)) for u in grid]
    i = int(np.argmin(values))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    f = lambda u: temperature_nll(z, y, math.exp(u))  # noqa: E731
    a, b = lo, hi
    c = b - _INV_PHI * (b - a)
    d = a + _INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    iters = 0
    while b - a > GOLDEN_TOL and iters < 200:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - _INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _INV_PHI * (b - a)
            fd = f(d)
        iters += 1
    u = (a + b) / 2.0
    best = f(u)
    # a boundary grid minimum stays at the grid point if refinement cannot beat it
    if values[i] < best:
        u, best = grid[i], values[i]
    return CalibrationHead(task, math.exp(u), iters, best, (math.exp(lo), math.exp(hi)))


# --------------------------------------------------------------------------
# expected calibration error


@dataclass
class ReliabilityBins:
    scheme: str
    M: int
    lo: list[float]
    hi: list[float]
    count: list[int]
    confidence: list[float]
    accuracy: list[float]

    def rows(self):
        for m in range(self.M):
            yield m, self.lo[m], self.hi[m], self.count[m], self.confidence[m], self.accuracy[m]


def _bin_index(p: np.ndarray, scheme: str, n_bins: int):
    if scheme == "equal-width":
        edges = np.linspace(0.0, 1.0, n_bins + 1)
        idx = np.clip(np.searchsorted(edges, p, side="right") - 1, 0, n_bins - 1)
        return idx, edges[:-1].tolist(), edges[1:].tolist()
    if scheme == "equal-mass":
        # quantile chunks by rank; a run of tied values goes wholly to the
        # chunk holding its first member, so bins depend on values alone
        ranked = np.sort(p)
        first = np.searchsorted(ranked, p, side="left")
        sizes = [len(c) for c in np.array_split(np.arange(len(p)), n_bins)]
        idx = np.searchsorted(np.cumsum(sizes), first, side="right")
        lo, hi = [], []
        for m in range(n_bins):
            members = p[idx == m]
            lo.append(float(members.min()) if members.size else math.nan)
            hi.append(float(members.max()) if members.size else math.nan)
        return idx, lo, hi
    raise CalibrationError(f"unknown binning scheme {scheme!r}")


def ece(probabilities, labels, scheme: str = "equal-mass", n_bins: int = 15):
    """Return (ECE, ReliabilityBins). Empty bins contribute nothing."""
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if p.shape != y.shape:
        raise CalibrationError("probabilities and labels differ in length")
    n = p.size
    if n == 0:
        raise CalibrationError("ECE needs at least one prediction")
    if n_bins < 1:
        raise CalibrationError("need at least one bin")
    idx, lo, hi = _bin_index(p, scheme, n_bins)
    count = np.bincount(idx, minlength=n_bins)
    conf_sum = np.bincount(idx, weights=p, minlength=n_bins)
    acc_sum = np.bincount(idx, weights=y, minlength=n_bins)
    safe = np.maximum(count, 1)
    conf = np.where(count > 0, conf_sum / safe, 0.0)
    acc = np.where(count > 0, acc_sum / safe, 0.0)
    value = math.fsum((count / n * np.abs(acc - conf)).tolist())
    bins = ReliabilityBins(scheme, n_bins, lo, hi, count.tolist(), conf.tolist(), acc.tolist())
    return value, bins


def write_reliability_csv(bins: ReliabilityBins, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "lo", "hi", "count", "mean_confidence", "empirical_ctr"])
        for m, lo, hi, cnt, conf, acc in bins.rows():
            w.writerow([m, repr(lo), repr(hi), cnt, repr(conf), repr(acc)])


# --------------------------------------------------------------------------
# whole-model calibration


def calibrate_model(model, validation, single_class: str = "raise") -> list[CalibrationHead]:
    """Fit one temperature per task on that task's own validation examples.

    The fitted temperatures are written onto ``model.temperatures``. A task
    whose validation labels are all one class raises, or with
    ``single_class="skip"`` keeps T = 1 and comes back with ``fitted=False``.
    """
    if single_class not in ("raise", "skip"):
        raise ValueError(f"single_class must be 'raise' or 'skip', got {single_class!r}")
    z = model.predict_logits(validation.features)
    tasks = model.grouping.example_tasks(validation)
    heads = []
    for m, name in enumerate(model.grouping.names):
        rows = tasks == m
        y = validation.labels[rows]
        if y.size == 0 or y.min() == y.max():
            if single_class == "skip":
                heads.append(CalibrationHead(name, 1.0, fitted=False))
                continue
            raise CalibrationError(f"task {name!r}: validation labels contain a single class")
        heads.append(fit_temperature(z[rows, m], y, task=name))
    model.temperatures = [h.T for h in heads]
    return heads
