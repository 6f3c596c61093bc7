"""Small reverse-mode autodiff core on float64 numpy arrays.

Values are wrapped in :class:`Tensor`. Operations executed while a
:class:`Tape` is active are recorded so that :func:`grad_of` can replay them
backwards. Outside a tape the same functions just compute values, which keeps
inference cheap.

Shapes are explicit: vectors and row-batched matrices. There is no implicit
broadcasting beyond adding a bias row to a matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operands have incompatible dimensions."""


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class Tape:
    """Ordered record of the primitives applied to watched parameters.

    Use as a context manager; nesting is allowed and the innermost tape
    records.
    """

    _stack: list["Tape"] = []

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.diagnostics: list[str] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def watch(self, value, name: str | None = None) -> Tensor:
        return Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)


def _active() -> Tape | None:
    return Tape._stack[-1] if Tape._stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(as_tensor(x).value.copy())


def _node(value, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(value)
    tape = _active()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward = backward
        tape.nodes.append(out)
    return out


# ---------------------------------------------------------------------------
# primitives


def affine(x, W, b) -> Tensor:
    """``W @ x + b`` for a vector ``x``; row-wise ``x @ W.T + b`` for a matrix."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.value.ndim != 2 or b.value.ndim != 1:
        raise ShapeError("affine expects a 2-D weight and a 1-D bias")
    out_dim, in_dim = W.shape
    if x.shape[-1] != in_dim or b.shape[0] != out_dim or x.value.ndim not in (1, 2):
        raise ShapeError(f"affine: x{x.shape} W{W.shape} b{b.shape} incompatible")
    xv, Wv = x.value, W.value
    value = xv @ Wv.T + b.value

    def backward(g):
        if xv.ndim == 1:
            gW = np.outer(g, xv)
            gb = g
        else:
            gW = g.T @ xv
            gb = g.sum(axis=0)
        return g @ Wv, gW, gb

    return _node(value, (x, W, b), backward)


def tanh_act(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.value)
    return _node(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    v = x.value
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _node(y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(z) -> Tensor:
    """Softmax over the last axis, computed with max subtraction."""
    z = as_tensor(z)
    shifted = z.value - z.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (z,), backward)


def log(x, floor: float = PROB_FLOOR) -> Tensor:
    x = as_tensor(x)
    clamped = np.maximum(x.value, floor)
    mask = x.value >= floor
    return _node(np.log(clamped), (x,), lambda g: (np.where(mask, g / clamped, 0.0),))


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return _node(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    return _node(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def sum_all(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return _node(a.value.sum(), (a,), lambda g: (np.full(shape, g),))


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.value.size
    return _node(a.value.mean(), (a,), lambda g: (np.full(shape, g / n),))


def sum_rows(a) -> Tensor:
    """Sum over the last axis of a matrix: (n, k) -> (n,)."""
    a = as_tensor(a)
    shape = a.shape
    return _node(a.value.sum(axis=-1), (a,), lambda g: (np.broadcast_to(g[..., None], shape).copy(),))


def dot(a, b) -> Tensor:
    """Inner product of two equal-length vectors."""
    return sum_all(mul(a, b))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    value = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts)))

    return _node(value, parts, backward)


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def repeat_rows(a, reps: int) -> Tensor:
    """Repeat each row ``reps`` times consecutively: (n, d) -> (n*reps, d)."""
    a = as_tensor(a)
    n, d = a.shape

    def backward(g):
        return (g.reshape(n, reps, d).sum(axis=1),)

    return _node(np.repeat(a.value, reps, axis=0), (a,), backward)


def pick(a, index) -> Tensor:
    """Select ``a[i, index[i]]`` for every row, or ``a[index]`` for a vector."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    if a.value.ndim == 1:
        def backward(g):
            out = np.zeros(a.shape)
            out[idx] = g
            return (out,)

        return _node(a.value[idx], (a,), backward)
    rows = np.arange(a.shape[0])

    def backward(g):
        out = np.zeros(a.shape)
        out[rows, idx] = g
        return (out,)

    return _node(a.value[rows, idx], (a,), backward)


def embed_mean(table, ids: np.ndarray, lengths: np.ndarray, frozen_row: int | None = 0) -> Tensor:
    """Mean of embedding rows per sequence.

    ``ids`` is an (n, max_len) matrix padded with ``frozen_row``; ``lengths``
    holds the true per-row lengths used as the divisor. The frozen row
    receives no gradient.
    """
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=DTYPE)
    if ids.ndim != 2 or lengths.shape != (ids.shape[0],):
        raise ShapeError("embed_mean expects (n, L) ids and (n,) lengths")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embed_mean: token id out of vocabulary range")
    if np.any(lengths <= 0):
        raise ShapeError("embed_mean: lengths must be positive")
    inv = 1.0 / lengths
    value = table.value[ids].sum(axis=1) * inv[:, None]

    def backward(g):
        out = np.zeros(table.shape)
        contrib = np.repeat((g * inv[:, None])[:, None, :], ids.shape[1], axis=1)
        np.add.at(out, ids.reshape(-1), contrib.reshape(-1, table.shape[1]))
        if frozen_row is not None:
            out[frozen_row] = 0.0
        return (out,)

    return _node(value, (table,), backward)


def cross_entropy(p_hat, gold) -> Tensor:
    """``-log p_hat[gold]`` (floored); one value per row for a matrix."""
    p_hat = as_tensor(p_hat)
    gold_arr = np.asarray(gold, dtype=np.int64)
    K = p_hat.shape[-1]
    if np.any(gold_arr < 0) or np.any(gold_arr >= K):
        raise ShapeError("gold index out of range")
    return scale(log(pick(p_hat, gold_arr)), -1.0)


def js_divergence(p, q) -> Tensor:
    """Jensen-Shannon divergence (natural log) over the last axis."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError(f"js_divergence: {p.shape} vs {q.shape}")
    m = scale(add(p, q), 0.5)
    kl_pm = _kl_terms(p, m)
    kl_qm = _kl_terms(q, m)
    return scale(add(kl_pm, kl_qm), 0.5)


def _kl_terms(p: Tensor, m: Tensor) -> Tensor:
    # zero-mass entries contribute nothing; floor keeps the log finite
    pv, mv = p.value, m.value
    safe_p = np.maximum(pv, PROB_FLOOR)
    safe_m = np.maximum(mv, PROB_FLOOR)
    active = pv > 0
    terms = np.where(active, pv * (np.log(safe_p) - np.log(safe_m)), 0.0)
    value = terms.sum(axis=-1)

    def backward(g):
        g = np.asarray(g)[..., None] if np.ndim(g) else g
        gp = np.where(active, np.log(safe_p) - np.log(safe_m) + 1.0, 0.0) * g
        gm = np.where(active, -pv / safe_m, 0.0) * g
        return gp, gm

    return _node(value, (p, m), backward)


# ---------------------------------------------------------------------------
# gradients and updates


def grad_of(loss: Tensor, params: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Reverse pass from a scalar ``loss`` to each watched parameter.

    Parameters the loss does not depend on get a zero gradient and their
    names are appended to ``tape.diagnostics``.
    """
    if loss.value.size != 1:
        raise ShapeError("grad_of expects a scalar loss")
    tape = tape or _active()
    if tape is None:
        raise RuntimeError("grad_of needs the tape the loss was recorded on")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    if loss.requires_grad:
        for node in reversed(tape.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=DTYPE)
    out = []
    for i, p in enumerate(params):
        g = grads.get(id(p))
        if p is loss:
            g = np.ones_like(p.value)
        if g is None:
            tape.diagnostics.append(p.name or f"param[{i}]")
            g = np.zeros_like(p.value)
        out.append(g.reshape(p.shape))
    return out


def param_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], learning_rate: float,
               incidents: list[str] | None = None) -> dict[str, np.ndarray]:
    """Plain gradient descent. Non-finite gradients skip the whole step."""
    for name, g in grads.items():
        if params[name].shape != g.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {params[name].shape}")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        msg = "non-finite gradient; step skipped"
        logger.warning(msg)
        if incidents is not None:
            incidents.append(msg)
        return dict(params)
    out = dict(params)
    for name, g in grads.items():
        out[name] = params[name] - learning_rate * g
    return out


@dataclass
class Adam:
    """Adam update rule, optional alternative to :func:`param_step`."""

    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
             incidents: list[str] | None = None) -> dict[str, np.ndarray]:
        if not all(np.all(np.isfinite(g)) for g in grads.values()):
            msg = "non-finite gradient; step skipped"
            logger.warning(msg)
            if incidents is not None:
                incidents.append(msg)
            return dict(params)
        self.t += 1
        out = dict(params)
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = params[name] - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def value_and_grads(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
                    names: Iterable[str] | None = None) -> tuple[float, dict[str, np.ndarray], list[str]]:
    """Evaluate ``fn`` on watched copies of ``params`` and differentiate it.

    Only ``names`` (default: all) are watched; the rest enter as constants.
    Returns the loss value, a gradient per watched name and the diagnostics.
    """
    names = list(params) if names is None else list(names)
    with Tape() as tape:
        watched = {k: (tape.watch(v, k) if k in names else Tensor(v)) for k, v in params.items()}
        loss = fn(watched)
        gs = grad_of(loss, [watched[k] for k in names], tape)
    return loss.item(), dict(zip(names, gs)), list(tape.diagnostics)


def finite_difference_grads(fn: Callable[[dict[str, np.ndarray]], float], params: Mapping[str, np.ndarray],
                            eps: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of a scalar function of named arrays."""
    base = {k: np.array(v, dtype=DTYPE) for k, v in params.items()}
    out = {}
    for name, arr in base.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = fn(base)
            flat[i] = orig - eps
            fm = fn(base)
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * eps)
        out[name] = g
    return out


def max_relative_error(analytic: Mapping[str, np.ndarray], numeric: Mapping[str, np.ndarray],
                       floor: float = 1e-6) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)`` over all arrays."""
    worst = 0.0
    for name, a in analytic.items():
        n = numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


def gradient_check(fn: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, np.ndarray],
                   eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences."""
    _, analytic, _ = value_and_grads(fn, params)

    def scalar(arrs):
        return fn({k: Tensor(v) for k, v in arrs.items()}).item()

    numeric = finite_difference_grads(scalar, params, eps)
    return max_relative_error(analytic, numeric)


def log_sum_exp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def is_finite(x) -> bool:
    return bool(np.all(np.isfinite(np.asarray(x))))


__all__ = [
    "Adam", "PROB_FLOOR", "ShapeError", "Tape", "Tensor", "add", "affine", "as_tensor", "concat",
    "cross_entropy", "detach", "dot", "embed_mean", "finite_difference_grads", "grad_of", "gradient_check",
    "is_finite", "js_divergence", "log", "log_sum_exp", "max_relative_error", "mean_all", "mul",
    "param_step", "pick", "repeat_rows", "reshape", "scale", "sigmoid", "softmax", "sub", "sum_all",
    "sum_rows", "tanh_act", "value_and_grads",
]
