"""Multi-task click objectives and the training loop.

The masked objective for per-task logits ``z[m]``, labels ``y`` and task
assignment ``t(i)`` is

    L = -(1/N) sum_i sum_m lambda_m * [t(i) == m] * (y_i log p_im + (1 - y_i) log(1 - p_im))

so an example only ever reaches the head of its own task. The unmasked
variant drops the indicator and lets every label train every head.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .datagen import Dataset, split
from .model import CamoeModel
from .tensorcore import Tensor

LOSS_KINDS = ("alm", "bce", "focal", "weighted-bce")
PROB_CLAMP = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "alm"
    masking: bool = True
    lambdas: tuple[float, ...] | None = None
    gamma: float = 2.0
    alpha: float = 1.0
    pos_weight: float = 1.0
    neg_weight: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 256
    patience: int = 5
    # False trains every epoch and keeps the final parameters
    early_stopping: bool = True
    validation_fraction: float = 0.1
    seed: int = 0

    @property
    def masked(self) -> bool:
        if self.kind == "alm":
            return True
        if self.kind == "bce":
            return False
        return self.masking

    def resolved_lambdas(self, n_tasks: int) -> np.ndarray:
        lam = np.full(n_tasks, 1.0 / n_tasks) if self.lambdas is None \
            else np.asarray(self.lambdas, dtype=np.float64)
        check_lambdas(lam, n_tasks)
        return lam

    def validate(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if self.lr <= 0 or self.batch_size < 2 or self.epochs < 0 or self.patience < 1:
            raise ValueError("invalid optimizer settings")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in (0, 1)")


def check_lambdas(lam: np.ndarray, n_tasks: int) -> None:
    if lam.shape != (n_tasks,):
        raise ValueError(f"expected {n_tasks} task weights, got {lam.shape[0]}")
    if (lam < 0).any() or abs(math.fsum(lam) - 1.0) > 1e-9:
        raise ValueError(f"task weights must be non-negative and sum to 1, got {list(lam)}")


# --------------------------------------------------------------------------
# elementwise losses


def _as_column(z) -> Tensor:
    z = tc.as_tensor(z)
    return z if z.data.ndim == 2 else tc.reshape(z, (-1, 1))


def _elementwise(z: Tensor, y: np.ndarray, cfg: LossConfig | None) -> Tensor:
    """Per-example loss for one head, shape (N, 1)."""
    if cfg is None or cfg.kind in ("alm", "bce"):
        return tc.bce_with_logits(z, y)
    if cfg.kind == "weighted-bce":
        w = np.where(y.reshape(-1, 1) > 0, cfg.pos_weight, cfg.neg_weight)
        return tc.mul(tc.bce_with_logits(z, y), Tensor(w))
    # focal: with s = 2y - 1, log p_t = -softplus(-s z) and 1 - p_t = sigmoid(-s z)
    s = Tensor(-(2.0 * y.reshape(-1, 1) - 1.0))
    sz = tc.mul(z, s)
    nll = tc.softplus(sz)
    if cfg.gamma == 0:
        return tc.scale(nll, cfg.alpha)
    return tc.scale(tc.mul(tc.power(tc.sigmoid(sz), cfg.gamma), nll), cfg.alpha)


def _task_ids(tasks, n: int, n_tasks: int) -> np.ndarray:
    tasks = np.asarray(tasks, dtype=np.int64).reshape(-1)
    if tasks.shape != (n,):
        raise ValueError("need one task id per example")
    if n and (tasks.min() < 0 or tasks.max() >= n_tasks):
        raise ValueError("example assigned to a task that is not in the grouping")
    return tasks


def multitask_loss(logits: Sequence, labels, tasks, lambdas, masked: bool = True,
                   cfg: LossConfig | None = None) -> Tensor:
    logits = [_as_column(z) for z in logits]
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    n = y.shape[0]
    lam = np.asarray(lambdas, dtype=np.float64)
    if lam.shape != (len(logits),):
        raise ValueError(f"expected {len(logits)} task weights, got {lam.shape}")
    tasks = _task_ids(tasks, n, len(logits)) if masked else None
    total = None
    for m, z in enumerate(logits):
        if z.shape != (n, 1):
            raise tc.ShapeError(f"task {m} logits have shape {z.shape}, expected ({n}, 1)")
        if masked:
            w = (tasks == m).astype(np.float64).reshape(-1, 1) * (lam[m] / n)
            if not w.any():
                continue
        else:
            w = np.full((n, 1), lam[m] / n)
        term = tc.sum(tc.mul(_elementwise(z, y, cfg), Tensor(w)))
        total = term if total is None else tc.add(total, term)
    return total if total is not None else Tensor(0.0)


def alm_loss(logits: Sequence, labels, tasks, lambdas) -> Tensor:
    """Adaptive loss-masked binary cross-entropy."""
    return multitask_loss(logits, labels, tasks, lambdas, masked=True)


def unmasked_mtl_loss(logits: Sequence, labels, lambdas) -> Tensor:
    return multitask_loss(logits, labels, None, lambdas, masked=False)


def bce(probs, labels) -> float:
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def focal_loss(probs, labels, gamma: float, alpha: float = 1.0) -> float:
    """mean(-alpha * (1 - p_t)^gamma * log p_t), p_t the probability of the true class."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    p = np.clip(np.asarray(probs, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError("probs and labels differ in shape")
    pt = np.where(y > 0, p, 1.0 - p)
    return float(np.mean(-alpha * (1.0 - pt) ** gamma * np.log(pt)))


def bce_from_logits(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


# --------------------------------------------------------------------------
# training


class Adam:
    """Adam over a set of parameters re-homed into one contiguous buffer.

    After construction each parameter's ``data`` and ``grad`` are views into
    shared flat arrays, so one update touches every parameter at once.
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        sizes = [p.size for p in self.params]
        total = int(sum(sizes))
        self.flat = np.empty(total)
        self.flat_grad = np.zeros(total)
        offset = 0
        for p, size in zip(self.params, sizes):
            shape = p.shape
            self.flat[offset:offset + size] = p.data.reshape(-1)
            p.data = self.flat[offset:offset + size].reshape(shape)
            p.grad = self.flat_grad[offset:offset + size].reshape(shape)
            offset += size
        self.m = np.zeros(total)
        self.v = np.zeros(total)
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        g = self.flat_grad
        self.m *= b1
        self.m += (1.0 - b1) * g
        self.v *= b2
        self.v += (1.0 - b2) * (g * g)
        step = self.lr / (1.0 - b1 ** self.t)
        denom = np.sqrt(self.v / (1.0 - b2 ** self.t))
        denom += self.eps
        self.flat -= step * self.m / denom

    def zero_grad(self) -> None:
        self.flat_grad[...] = 0.0


@dataclass
class EpochRecord:
    epoch: int
    train_loss: dict[str, float]
    val_loss: dict[str, float]
    train_objective: float
    val_objective: float


@dataclass
class TrainReport:
    tasks: list[str]
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    stopped_early: bool = False
    wall_time: float = 0.0

    def to_jsonl(self) -> str:
        """One JSON object per epoch; a task with no examples has a null loss."""
        def clean(losses):
            return {k: v if math.isfinite(v) else None for k, v in losses.items()}

        lines = []
        for rec in self.epochs:
            lines.append(json.dumps({
                "epoch": rec.epoch,
                "train_loss": clean(rec.train_loss),
                "val_loss": clean(rec.val_loss),
                "train_objective": rec.train_objective,
                "val_objective": rec.val_objective,
            }))
        return "".join(line + "\n" for line in lines)

    def curves(self) -> list[tuple]:
        return [(r.epoch, r.train_objective, r.val_objective) for r in self.epochs]


def _per_task_losses(z: np.ndarray, y: np.ndarray, tasks: np.ndarray,
                     names: list[str]) -> dict[str, float]:
    out = {}
    for m, name in enumerate(names):
        rows = tasks == m
        out[name] = float(bce_from_logits(z[rows, m], y[rows]).mean()) if rows.any() else float("nan")
    return out


def objective_value(z: np.ndarray, y: np.ndarray, tasks: np.ndarray, cfg: LossConfig,
                    lam: np.ndarray) -> float:
    logits = [Tensor(z[:, m:m + 1]) for m in range(z.shape[1])]
    return multitask_loss(logits, y, tasks, lam, masked=cfg.masked, cfg=cfg).item()


def train(model: CamoeModel, dataset: Dataset, config: LossConfig,
          validation: Dataset | None = None) -> TrainReport:
    """Mini-batch Adam with validation-loss early stopping.

    When ``validation`` is omitted a slot-stratified fraction of ``dataset``
    is held back. With early stopping on, training halts after ``patience``
    epochs without improvement and the best validation epoch is restored.
    """
    config.validate()
    started = time.perf_counter()
    names = model.grouping.names
    lam = config.resolved_lambdas(len(names))
    if validation is None:
        dataset, validation = split(dataset, 1.0 - config.validation_fraction, config.seed)
    if len(dataset) < 2:
        raise TrainingError("need at least two training examples")

    X, y = dataset.features, dataset.labels.astype(np.float64)
    tasks = model.grouping.example_tasks(dataset)
    Xv, yv = validation.features, validation.labels.astype(np.float64)
    tasks_v = model.grouping.example_tasks(validation)

    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    report = TrainReport(tasks=list(names))
    best_val, best_state, stale = math.inf, None, 0
    n = len(dataset)
    bs = config.batch_size
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = np.zeros(len(names))
        counts = np.zeros(len(names))
        obj_sum = 0.0
        for b, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            try:
                with tc.Tape() as tape:
                    logits = model.logits(X[idx], train=True)
                    loss = multitask_loss(logits, y[idx], tasks[idx], lam,
                                          masked=config.masked, cfg=config)
                value = loss.item()
                if not math.isfinite(value):
                    raise tc.NonFiniteError("loss is not finite")
                opt.zero_grad()
                tc.backward(tape, loss)
            except tc.NonFiniteError as exc:
                raise TrainingError(f"non-finite value at epoch {epoch} batch {b}: {exc}") from None
            opt.step()
            obj_sum += value * len(idx)
            zb = np.concatenate([l.data for l in logits], axis=1)
            tb = tasks[idx]
            for m in range(len(names)):
                rows = tb == m
                sums[m] += bce_from_logits(zb[rows, m], y[idx][rows]).sum()
                counts[m] += rows.sum()
        zv = model.predict_logits(Xv)
        val_obj = objective_value(zv, yv, tasks_v, config, lam)
        if not math.isfinite(val_obj):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        report.epochs.append(EpochRecord(
            epoch=epoch,
            train_loss={nm: float(sums[m] / counts[m]) if counts[m] else float("nan")
                        for m, nm in enumerate(names)},
            val_loss=_per_task_losses(zv, yv, tasks_v, names),
            train_objective=obj_sum / n,
            val_objective=val_obj,
        ))
        if val_obj < best_val:
            best_val, best_state, stale = val_obj, model.state(), 0
            report.best_epoch = epoch
        else:
            stale += 1
            if config.early_stopping and stale >= config.patience:
                report.stopped_early = True
                break
    if config.early_stopping and best_state is not None:
        model.load_state(best_state)
    report.wall_time = time.perf_counter() - started
    return report
