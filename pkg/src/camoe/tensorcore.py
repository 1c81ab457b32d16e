"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and touching at least one
tensor that requires gradients, are appended to that tape together with a
vector-Jacobian rule. :func:`backward` replays the tape in reverse.

    with Tape() as tape:
        loss = mean(relu(matmul(x, w)))
    backward(tape, loss)
    w.grad
"""
from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99

_local = threading.local()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "is_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.is_leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        t.is_leaf = False
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


class Parameter(Tensor):
    """Trainable leaf tensor; ``grad`` always has the value's shape."""

    __slots__ = ()

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    kind: str


class Tape:
    """Ordered record of primitive applications (a value graph).

    Nodes are appended in execution order, so the list is topologically
    sorted by construction. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev: Tape | None = None

    def __enter__(self) -> "Tape":
        self._prev = getattr(_local, "tape", None)
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def parameters(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for node in self.nodes:
            for t in node.inputs:
                if isinstance(t, Parameter):
                    seen.setdefault(id(t), t)
        return list(seen.values())


def current_tape() -> Tape | None:
    return getattr(_local, "tape", None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(kind: str, arr: np.ndarray) -> None:
    # a finite sum of finite entries is the common case; fall back to the full scan
    if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind}: non-finite values in output")


def _record(kind: str, out: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    _check_finite(kind, out)
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        tape.nodes.append(Node(result, inputs, vjp, kind))
    return result


def backward(tape: Tape, root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad.

    Parameters accumulate (call ``zero_grad`` between steps); other leaves
    are overwritten with their gradient.
    """
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: dict[int, tuple[Tensor, np.ndarray]] = {}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            elif key in leaf_grads:
                leaf_grads[key] = (inp, leaf_grads[key][1] + gi)
            elif inp.is_leaf:
                leaf_grads[key] = (inp, gi)
            else:
                grads[key] = gi
    if root.is_leaf and root.requires_grad:
        leaf_grads[id(root)] = (root, grads[id(root)])  # root used directly
    for inp, g in leaf_grads.values():
        if isinstance(inp, Parameter):
            inp.grad += g
        else:
            inp.grad = g


# --------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return _record("matmul", ad @ bd, (a, b), vjp)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w.T + b`` with ``w`` stored (out, in); the bias is optional."""
    if (x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[1]
            or (b is not None and b.shape != (w.shape[0],))):
        raise ShapeError(f"affine: x {x.shape}, W {w.shape}, b {None if b is None else b.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd.T
    if b is not None:
        out += b.data

    def vjp(g):
        return (g @ wd if x.requires_grad else None,
                g.T @ xd if w.requires_grad else None,
                g.sum(axis=0) if b is not None and b.requires_grad else None)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("affine", out, inputs, vjp)


def stacked_affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Independent affine maps for B parallel branches.

    ``w`` is (B, out, in) and ``b`` (B, out). ``x`` is either (N, in), shared
    by every branch, or (B, N, in). The result is (B, N, out).
    """
    xd, wd = x.data, w.data
    if (wd.ndim != 3 or xd.ndim not in (2, 3) or xd.shape[-1] != wd.shape[2]
            or (xd.ndim == 3 and xd.shape[0] != wd.shape[0])
            or (b is not None and b.shape != wd.shape[:2])):
        raise ShapeError(f"stacked_affine: x {x.shape}, W {w.shape}, "
                         f"b {None if b is None else b.shape}")
    out = np.matmul(xd, wd.transpose(0, 2, 1))
    if b is not None:
        out += b.data[:, None, :]
    shared = xd.ndim == 2

    def vjp(g):
        dx = None
        if x.requires_grad:
            dx = np.matmul(g, wd)
            if shared:
                dx = dx.sum(axis=0)
        dw = None
        if w.requires_grad:
            dw = np.matmul(g.transpose(0, 2, 1), xd)
        db = g.sum(axis=1) if b is not None and b.requires_grad else None
        return dx, dw, db

    inputs = (x, w) if b is None else (x, w, b)
    return _record("stacked_affine", out, inputs, vjp)


def broadcast_mul(x: Tensor, u: Tensor) -> Tensor:
    """Hadamard product of one (N, d) tensor with each slice of a (B, N, d) stack."""
    xd, ud = x.data, u.data
    if xd.ndim != 2 or ud.ndim != 3 or ud.shape[1:] != xd.shape:
        raise ShapeError(f"broadcast_mul: cannot combine {x.shape} with {u.shape}")

    def vjp(g):
        return ((g * ud).sum(axis=0) if x.requires_grad else None,
                g * xd if u.requires_grad else None)

    return _record("broadcast_mul", xd * ud, (x, u), vjp)


def tile_branches(x: Tensor, branches: int) -> Tensor:
    """(N, d) -> (B, N, d) with the same rows in every branch."""
    if x.data.ndim != 2 or branches < 1:
        raise ShapeError(f"tile_branches: cannot tile {x.shape} into {branches} branches")
    out = np.broadcast_to(x.data, (branches, *x.shape)).copy()
    return _record("tile_branches", out, (x,), lambda g: (g.sum(axis=0),))


def merge_branches(a: Tensor) -> Tensor:
    """(B, N, w) -> (N, B*w), branch blocks laid side by side."""
    if a.data.ndim != 3:
        raise ShapeError(f"merge_branches: expected a 3-d stack, got {a.shape}")
    nb, n, w = a.shape
    out = a.data.transpose(1, 0, 2).reshape(n, nb * w)
    return _record("merge_branches", out, (a,),
                   lambda g: (g.reshape(n, nb, w).transpose(1, 0, 2),))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a bias row added to every row of ``a``."""
    if a.shape == b.shape:
        return _record("add", a.data + b.data, (a, b), lambda g: (g, g))
    if a.data.ndim == 2 and b.data.ndim == 1 and b.shape[0] == a.shape[1]:
        return _record("add", a.data + b.data, (a, b),
                       lambda g: (g, g.sum(axis=0) if b.requires_grad else None))
    raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: incompatible shapes {a.shape} and {b.shape}")
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _record("hadamard", ad * bd, (a, b),
                   lambda g: (g * bd if a.requires_grad else None,
                              g * ad if b.requires_grad else None))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    pos = a.data > 0
    return _record("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * pos,))


def logistic(x) -> np.ndarray:
    """Plain-array sigmoid, split by sign so neither tail rounds to 0 early."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = logistic(a.data)
    return _record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _record("softplus", out, (a,), lambda g: (g * logistic(x),))


def log(a: Tensor) -> Tensor:
    x = a.data
    if (x <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent; ``a`` must be >= 0."""
    x = a.data
    p = float(p)
    if p == 0.0:
        return _record("power", np.ones_like(x), (a,), lambda g: (np.zeros_like(g),))

    def vjp(g):
        return (g * p * x ** (p - 1.0),)

    return _record("power", x ** p, (a,), vjp)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _record("softmax", s, (a,), vjp)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _record("sum", np.array([a.data.sum()]), (a,),
                   lambda g: (np.full(shape, g[0]),))


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _record("mean", np.array([a.data.mean()]), (a,),
                   lambda g: (np.full(shape, g[0] / n),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(src),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ShapeError("concat: no inputs")
    rows = {p.shape[0] for p in parts}
    if any(p.data.ndim != 2 for p in parts) or len(rows) != 1:
        raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    if axis != 1:
        raise ShapeError("concat: only axis=1 is supported")
    widths = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def vjp(g):
        return [g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _record("concat", np.concatenate([p.data for p in parts], axis=1),
                   tuple(parts), vjp)


def gated_sum(gates: Tensor, experts: Sequence[Tensor]) -> Tensor:
    """Row-wise mixture ``sum_k gates[:, k] * experts[k]``.

    ``gates`` is (N, K); each expert is (N, D).
    """
    n, k = gates.shape if gates.data.ndim == 2 else (None, None)
    if k != len(experts) or any(e.shape[0] != n or e.data.ndim != 2 for e in experts):
        raise ShapeError(
            f"gated_sum: gates {gates.shape} vs experts {[e.shape for e in experts]}")
    if len({e.shape for e in experts}) != 1:
        raise ShapeError(f"gated_sum: expert shapes differ {[e.shape for e in experts]}")
    gd = gates.data
    ed = [e.data for e in experts]
    out = gd[:, 0:1] * ed[0]
    for j in range(1, k):
        out = out + gd[:, j:j + 1] * ed[j]

    def vjp(g):
        dg = np.stack([(g * e).sum(axis=1) for e in ed], axis=1) if gates.requires_grad else None
        return [dg] + [g * gd[:, j:j + 1] if experts[j].requires_grad else None
                       for j in range(k)]

    return _record("gated_sum", out, (gates, *experts), vjp)


def bce_with_logits(z: Tensor, y: np.ndarray) -> Tensor:
    """Per-element binary cross-entropy from logits (log-sum-exp stable)."""
    x = z.data
    y = np.asarray(y, dtype=np.float64).reshape(x.shape)
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return _record("bce_logits", out, (z,), lambda g: (g * (logistic(x) - y),))


class RunningStats:
    """Batch-norm running mean/variance (mutable, not differentiated)."""

    def __init__(self, dim: int, momentum: float = BN_MOMENTUM):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.momentum = momentum

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * mean
        self.var = m * self.var + (1.0 - m) * var


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats,
              train: bool, eps: float = BN_EPSILON) -> Tensor:
    if x.data.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError(f"batchnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xd, gd = x.data, gamma.data
    if train:
        n = xd.shape[0]
        if n < 2:
            raise ShapeError("batchnorm: batch size must be >= 2 in train mode")
        mu = xd.mean(axis=0)
        var = xd.var(axis=0)
        stats.update(mu, var)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xd - mu) * inv
        out = xhat * gd + beta.data

        def vjp(g):
            dxhat = g * gd
            dx = None
            if x.requires_grad:
                dx = (inv / n) * (n * dxhat - dxhat.sum(axis=0)
                                  - xhat * (dxhat * xhat).sum(axis=0))
            return (dx,
                    (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                    g.sum(axis=0) if beta.requires_grad else None)
    else:
        inv = 1.0 / np.sqrt(stats.var + eps)
        xhat = (xd - stats.mean) * inv
        out = xhat * gd + beta.data

        def vjp(g):
            return (g * gd * inv if x.requires_grad else None,
                    (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                    g.sum(axis=0) if beta.requires_grad else None)

    return _record("batchnorm", out, (x, gamma, beta), vjp)


# --------------------------------------------------------------------------
# gradient checking


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def finite_diff_check(fn: Callable[[Tensor], Tensor], point, epsilon: float = 1e-5) -> float:
    """Max relative error between the tape gradient of ``fn`` and central differences."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        out = fn(x)
    backward(tape, out)
    analytic = x.grad if x.grad is not None else np.zeros_like(base)

    numeric = np.zeros_like(base)
    flat = numeric.reshape(-1)
    for i in range(base.size):
        plus, minus = base.copy(), base.copy()
        plus.reshape(-1)[i] += epsilon
        minus.reshape(-1)[i] -= epsilon
        flat[i] = (fn(Tensor(plus)).item() - fn(Tensor(minus)).item()) / (2 * epsilon)
    return _rel_err(analytic, numeric)


def finite_diff_check_params(loss_fn: Callable[[], Tensor], params: Iterable[Parameter],
                             epsilon: float = 1e-5) -> float:
    """Same check over the coordinates of existing parameters (perturbed in place)."""
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = loss_fn()
    backward(tape, out)
    worst = 0.0
    for p in params:
        analytic = p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat_data = p.data.reshape(-1)
        flat_num = numeric.reshape(-1)
        for i in range(flat_data.size):
            orig = flat_data[i]
            flat_data[i] = orig + epsilon
            up = loss_fn().item()
            flat_data[i] = orig - epsilon
            down = loss_fn().item()
            flat_data[i] = orig
            flat_num[i] = (up - down) / (2 * epsilon)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst
