"""Modality-grouped multi-gate mixture of experts with low-rank cross-network experts.

Data flow for a batch ``X`` (rows are impressions)::

    emb      = batchnorm(X W_e^T + b_e)                  shared bottom
    E_k      = expert_k(emb)                              k = 1..K
    g_m      = softmax(emb W_gm^T + b_gm)                 one gate per task
    logit_m  = tower_m(sum_k g_m[:, k] * M_k * E_k)       one tower per task

``M`` is the inference-time expert mask (all ones by default). Masked
experts are not evaluated at all, so their parameters cannot leak into the
output.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .datagen import SLOTS, AdSlot, Dataset, MUSIC_SLOTS, VIDEO_SLOTS
from .tensorcore import Parameter, Tensor

GROUPING_KINDS = ("single", "modality", "content", "per-slot")
EXPERT_KINDS = ("dcn", "mlp")
CHECKPOINT_FORMAT = "camoe-checkpoint/1"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TaskGrouping:
    kind: str
    tasks: tuple[tuple[str, tuple[AdSlot, ...]], ...]

    def __post_init__(self):
        members = [s for _, slots in self.tasks for s in slots]
        if sorted(s.value for s in members) != list(range(len(SLOTS))):
            raise ModelError("task grouping must partition the seven slots exactly")
        if len({name for name, _ in self.tasks}) != len(self.tasks):
            raise ModelError("task names must be unique")

    @classmethod
    def of_kind(cls, kind: str) -> "TaskGrouping":
        if kind == "single":
            tasks = (("click", SLOTS),)
        elif kind == "modality":
            tasks = (("audio", tuple(s for s in SLOTS if s not in VIDEO_SLOTS)),
                     ("video", tuple(s for s in SLOTS if s in VIDEO_SLOTS)))
        elif kind == "content":
            tasks = (("music", tuple(s for s in SLOTS if s in MUSIC_SLOTS)),
                     ("podcast", tuple(s for s in SLOTS if s not in MUSIC_SLOTS)))
        elif kind == "per-slot":
            tasks = tuple((s.name, (s,)) for s in SLOTS)
        else:
            raise ModelError(f"unknown grouping kind {kind!r}; expected one of {GROUPING_KINDS}")
        return cls(kind, tasks)

    @property
    def names(self) -> list[str]:
        return [name for name, _ in self.tasks]

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def slot_to_task(self) -> np.ndarray:
        lookup = np.empty(len(SLOTS), dtype=np.int64)
        for t, (_, slots) in enumerate(self.tasks):
            for s in slots:
                lookup[s.value] = t
        return lookup

    def task_of(self, slot: AdSlot) -> int:
        return int(self.slot_to_task[slot.value])

    def example_tasks(self, d: Dataset) -> np.ndarray:
        return self.slot_to_task[d.slots]


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    n_experts: int = 2
    expert_kind: str = "dcn"
    expert_dim: int = 32
    cross_layers: int = 2
    rank: int = 8
    deep_layers: tuple[int, ...] = (32, 32)
    branches: int = 3
    tower_layers: tuple[int, ...] = (16,)

    def validate(self) -> None:
        if self.n_experts < 1:
            raise ModelError("at least one expert is required")
        if self.expert_kind not in EXPERT_KINDS:
            raise ModelError(f"expert_kind must be 'dcn' or 'mlp', got {self.expert_kind!r}")
        if self.expert_kind == "dcn" and self.cross_layers < 1:
            raise ModelError("a cross-network expert needs at least one cross layer")
        if min(self.embed_dim, self.expert_dim, self.rank, self.branches) < 1:
            raise ModelError("layer sizes must be positive")
        if not self.deep_layers or min(self.deep_layers) < 1:
            raise ModelError("experts need at least one positive-width deep layer")


# --------------------------------------------------------------------------
# building blocks


class Linear:
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, name: str,
                 bias: bool = True):
        self.W = Parameter(rng.standard_normal((n_out, n_in)) / math.sqrt(n_in), f"{name}.W")
        self.b = Parameter(np.zeros(n_out), f"{name}.b") if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return tc.affine(x, self.W, self.b)

    def parameters(self) -> list[Parameter]:
        return [self.W] if self.b is None else [self.W, self.b]


class Mlp:
    """ReLU after every layer."""

    def __init__(self, rng, n_in: int, sizes: Sequence[int], name: str):
        self.layers = []
        for i, n_out in enumerate(sizes):
            self.layers.append(Linear(rng, n_in, n_out, f"{name}.{i}"))
            n_in = n_out
        self.out_dim = n_in

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = tc.relu(layer(x))
        return x

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]


def cross_layer(x0: Tensor, xl: Tensor, W1: Tensor, W2: Tensor, b: Tensor) -> Tensor:
    """``xl + x0 * (W2 relu(W1 xl + b))`` applied to every row.

    ``W1`` is (r, d), ``W2`` is (d, r), ``b`` is (r,). Vectors may be passed
    as 1-d tensors; rows of a 2-d batch are processed independently.
    """
    x0, xl = tc.as_tensor(x0), tc.as_tensor(xl)
    vector = x0.data.ndim == 1
    if vector:
        x0, xl = tc.reshape(x0, (1, -1)), tc.reshape(xl, (1, -1))
    d = x0.shape[-1]
    if xl.shape != x0.shape or W1.shape[1:] != (d,) or W2.shape != (d, W1.shape[0]) \
            or b.shape != (W1.shape[0],):
        raise tc.ShapeError(
            f"cross_layer: x0 {x0.shape}, xl {xl.shape}, W1 {W1.shape}, W2 {W2.shape}, b {b.shape}")
    u = tc.affine(tc.relu(tc.affine(xl, W1, b)), W2)
    out = tc.add(xl, tc.mul(x0, u))
    return tc.reshape(out, (d,)) if vector else out


class Expert:
    """Parallel (cross stack, deep MLP) branches, concatenated and projected.

    The branches are held as stacked parameters with a leading branch axis so
    that all of them run in one pass; slice ``[j]`` of any stacked parameter
    belongs to branch ``j``. The projection input is laid out as
    ``[cross_0 .. cross_{B-1}, deep_0 .. deep_{B-1}]``. With
    ``kind == "mlp"`` the cross stacks are dropped.
    """

    def __init__(self, rng, d: int, cfg: ModelConfig, name: str):
        self.kind = cfg.expert_kind
        nb, r = cfg.branches, cfg.rank
        self.branches = nb
        self.cross: list[tuple[Parameter, Parameter, Parameter]] = []
        if self.kind == "dcn":
            for l in range(cfg.cross_layers):
                self.cross.append((
                    Parameter(rng.standard_normal((nb, r, d)) / math.sqrt(d), f"{name}.cross{l}.W1"),
                    Parameter(np.zeros((nb, d, r)), f"{name}.cross{l}.W2"),
                    Parameter(np.zeros((nb, r)), f"{name}.cross{l}.b"),
                ))
        self.deep: list[tuple[Parameter, Parameter]] = []
        n_in = d
        for i, n_out in enumerate(cfg.deep_layers):
            self.deep.append((
                Parameter(rng.standard_normal((nb, n_out, n_in)) / math.sqrt(n_in), f"{name}.deep{i}.W"),
                Parameter(np.zeros((nb, n_out)), f"{name}.deep{i}.b"),
            ))
            n_in = n_out
        width = nb * n_in + (nb * d if self.cross else 0)
        self.proj = Linear(rng, width, cfg.expert_dim, f"{name}.proj")

    @property
    def L(self) -> int:
        return len(self.cross)

    def __call__(self, x0: Tensor) -> Tensor:
        parts = []
        if self.cross:
            xl = tc.tile_branches(x0, self.branches)
            for W1, W2, b in self.cross:
                u = tc.stacked_affine(tc.relu(tc.stacked_affine(xl, W1, b)), W2)
                xl = tc.add(xl, tc.broadcast_mul(x0, u))
            parts.append(tc.merge_branches(xl))
        h = x0
        for W, b in self.deep:
            h = tc.relu(tc.stacked_affine(h, W, b))
        parts.append(tc.merge_branches(h))
        return tc.relu(self.proj(tc.concat(parts) if len(parts) > 1 else parts[0]))

    def parameters(self) -> list[Parameter]:
        out = [p for layer in self.cross for p in layer]
        out += [p for layer in self.deep for p in layer]
        return out + self.proj.parameters()


def expert_forward(expert: Expert, x0: Tensor) -> Tensor:
    return expert(x0)


class CamoeModel:
    def __init__(self, grouping: TaskGrouping, feature_dim: int, config: ModelConfig,
                 seed: int):
        config.validate()
        if feature_dim <= 0:
            raise ModelError("feature_dim must be positive")
        self.grouping = grouping
        self.feature_dim = feature_dim
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        e = config.embed_dim
        self.embed = Linear(rng, feature_dim, e, "embed")
        self.bn_gamma = Parameter(np.ones(e), "embed.bn.gamma")
        self.bn_beta = Parameter(np.zeros(e), "embed.bn.beta")
        self.bn_stats = tc.RunningStats(e)
        self.experts = [Expert(rng, e, config, f"expert{k}") for k in range(config.n_experts)]
        self.gates = [Linear(rng, e, config.n_experts, f"gate.{name}") for name in grouping.names]
        self.towers = []
        for name in grouping.names:
            body = Mlp(rng, config.expert_dim, config.tower_layers, f"tower.{name}")
            head = Linear(rng, body.out_dim, 1, f"tower.{name}.out")
            self.towers.append((body, head))
        self.temperatures = [1.0] * len(grouping)

    # -- parameters -------------------------------------------------------

    def parameters(self) -> list[Parameter]:
        out = self.embed.parameters() + [self.bn_gamma, self.bn_beta]
        for ex in self.experts:
            out += ex.parameters()
        for g in self.gates:
            out += g.parameters()
        for body, head in self.towers:
            out += body.parameters() + head.parameters()
        return out

    def tower_parameters(self, task: int) -> list[Parameter]:
        body, head = self.towers[task]
        return body.parameters() + head.parameters()

    @property
    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data.copy() for p in self.parameters()}
        out["embed.bn.running_mean"] = self.bn_stats.mean.copy()
        out["embed.bn.running_var"] = self.bn_stats.var.copy()
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state or state[p.name].shape != p.shape:
                raise ModelError(f"state is missing or misshapes parameter {p.name}")
            p.data[...] = state[p.name]
        self.bn_stats.mean = np.array(state["embed.bn.running_mean"], dtype=np.float64)
        self.bn_stats.var = np.array(state["embed.bn.running_var"], dtype=np.float64)

    # -- forward ----------------------------------------------------------

    def _mask(self, mask) -> np.ndarray:
        k = len(self.experts)
        if mask is None:
            return np.ones(k, dtype=np.int64)
        m = np.asarray(mask, dtype=np.int64).reshape(-1)
        if m.shape != (k,) or not np.isin(m, (0, 1)).all():
            raise ModelError(f"expert mask must be {k} entries of 0/1, got {list(m)}")
        if not m.any():
            raise ModelError("expert mask zeroes every expert")
        return m

    def logits(self, X, mask=None, train: bool = False) -> list[Tensor]:
        """One (N, 1) logit tensor per task."""
        X = tc.as_tensor(X)
        if X.data.ndim != 2 or X.shape[1] != self.feature_dim:
            raise ModelError(f"expected features of width {self.feature_dim}, got {X.shape}")
        if X.shape[0] == 0:
            raise ModelError("empty batch")
        m = self._mask(mask)
        emb = tc.batchnorm(self.embed(X), self.bn_gamma, self.bn_beta, self.bn_stats, train)
        outs = [ex(emb) if m[k] else Tensor(np.zeros((X.shape[0], self.config.expert_dim)))
                for k, ex in enumerate(self.experts)]
        logits = []
        for gate, (body, head) in zip(self.gates, self.towers):
            mixed = tc.gated_sum(tc.softmax(gate(emb)), outs)
            logits.append(head(body(mixed)))
        return logits

    def gate_weights(self, X) -> list[np.ndarray]:
        emb = tc.batchnorm(self.embed(tc.as_tensor(X)), self.bn_gamma, self.bn_beta,
                           self.bn_stats, False)
        return [tc.softmax(g(emb)).data for g in self.gates]

    def predict_logits(self, X, mask=None, batch_size: int = 8192) -> np.ndarray:
        """(N, tasks) array of inference-mode logits."""
        X = np.asarray(X, dtype=np.float64)
        chunks = []
        for start in range(0, X.shape[0], batch_size):
            ls = self.logits(X[start:start + batch_size], mask=mask, train=False)
            chunks.append(np.concatenate([l.data for l in ls], axis=1))
        return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, len(self.grouping)))


def build(grouping: TaskGrouping, config: ModelConfig, feature_dim: int, seed: int) -> CamoeModel:
    return CamoeModel(grouping, feature_dim, config, seed)


def forward(model: CamoeModel, X, mask=None, calibrated: bool = False) -> list[np.ndarray]:
    """Per-task click probabilities for every row of ``X`` (inference mode)."""
    z = model.predict_logits(X, mask=mask)
    out = []
    for t in range(z.shape[1]):
        zt = z[:, t] / model.temperatures[t] if calibrated else z[:, t]
        out.append(tc.logistic(zt))
    return out


def example_scores(model: CamoeModel, d: Dataset, mask=None, calibrated: bool = True) -> np.ndarray:
    """Probability from each example's own task head."""
    probs = forward(model, d.features, mask=mask, calibrated=calibrated)
    tasks = model.grouping.example_tasks(d)
    stacked = np.stack(probs, axis=1)
    return stacked[np.arange(len(d)), tasks]


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CamoeModel, path) -> None:
    cfg = asdict(model.config)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "grouping": model.grouping.kind,
        "tasks": model.grouping.names,
        "feature_dim": model.feature_dim,
        "seed": model.seed,
        "hyper": cfg,
        "temperatures": list(model.temperatures),
        "tensors": {name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
                    for name, arr in model.state().items()},
    }
    Path(path).write_text(json.dumps(payload, indent=1) + "\n")


def load_checkpoint(path) -> CamoeModel:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path}: not a checkpoint (format {payload.get('format')!r})")
    hyper = dict(payload["hyper"])
    hyper["deep_layers"] = tuple(hyper["deep_layers"])
    hyper["tower_layers"] = tuple(hyper["tower_layers"])
    model = CamoeModel(TaskGrouping.of_kind(payload["grouping"]), payload["feature_dim"],
                       ModelConfig(**hyper), payload["seed"])
    state = {name: np.array(t["data"], dtype=np.float64).reshape(t["shape"])
             for name, t in payload["tensors"].items()}
    model.load_state(state)
    model.temperatures = [float(t) for t in payload["temperatures"]]
    return model
