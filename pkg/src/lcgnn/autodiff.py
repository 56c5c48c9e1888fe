"""Dense float64 tensors with a recording tape and reverse-mode gradients.

Only the handful of primitives the graph encoder, classifier and losses need
are provided.  Every primitive is a pair of numpy functions registered in
``PRIMITIVES``; ``forward_primitive`` runs the forward half and, when a
:class:`Tape` is active, appends a record that :func:`backward` later replays
in reverse.

With ``exact=True`` (the default) forward matrix products go through
``einsum`` rather than BLAS, so each output row depends only on its own input
row, and segment sums add sorted summands.  Together these keep single-graph
encodings bit-identical under node relabeling.  Minibatch training passes
``exact=False`` and uses BLAS and sparse products instead.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "PRIMITIVES",
    "forward_primitive",
    "backward",
    "finite_difference_gradient",
    "Adam",
    "adam_step",
    "constant",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """A float64 array, optionally carrying gradient bookkeeping."""

    __array_priority__ = 1000  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}(shape={self.shape})"

    def __add__(self, other):
        return forward_primitive("add", [self, _as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * _as_tensor(other)

    def __rsub__(self, other):
        return _as_tensor(other) + (-1.0) * self

    def __neg__(self):
        return forward_primitive("scale", [self], factor=-1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return forward_primitive("scale", [self], factor=float(other))
        return forward_primitive("mul", [self, _as_tensor(other)])

    __rmul__ = __mul__

    def __matmul__(self, other):
        return forward_primitive("matmul", [self, _as_tensor(other)])

    def __rmatmul__(self, other):
        return forward_primitive("matmul", [_as_tensor(other), self])

    @property
    def T(self):
        return forward_primitive("transpose", [self])


class Parameter(Tensor):
    """Trainable tensor with a gradient accumulator and Adam moment slots."""

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.exp_avg = np.zeros_like(self.data)
        self.exp_avg_sq = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad.fill(0.0)

    def copy(self, name: str | None = None) -> "Parameter":
        """Deep copy of the value; optimizer state starts fresh."""
        return Parameter(self.data.copy(), name=name or self.name)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x)


# --------------------------------------------------------------------------
# tape

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "lcgnn_active_tape", default=None
)


@dataclass
class Record:
    tag: str
    operands: tuple[Tensor, ...]
    output: Tensor
    ctx: dict[str, Any]


@dataclass
class Tape:
    """Ordered log of primitive applications made while the tape is active.

    Use as a context manager::

        with Tape() as tape:
            loss = model_loss(...)
        backward(tape, loss)
    """

    records: list[Record] = field(default_factory=list)
    consumed: bool = False
    _token: Any = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape already consumed by backward(); start a new one")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def parameters(self) -> list[Parameter]:
        seen: dict[int, Parameter] = {}
        for rec in self.records:
            for op in rec.operands:
                if isinstance(op, Parameter):
                    seen.setdefault(id(op), op)
        return list(seen.values())


# --------------------------------------------------------------------------
# primitives
#
# forward(ctx, *arrays, **attrs) -> array
# backward(ctx, grad_out, *arrays) -> tuple of grads, one per operand
#     (``None`` where the operand needs no gradient)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(tag, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{tag}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def _matmul_fwd(ctx, a, b, *, exact: bool = True):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if exact:
        return np.einsum("ij,jk->ik", a, b, optimize=False)
    return a @ b


def _matmul_bwd(ctx, g, a, b):
    return g @ b.T, a.T @ g


def _transpose_fwd(ctx, a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return np.ascontiguousarray(a.T)


def _transpose_bwd(ctx, g, a):
    return (g.T,)


def _add_fwd(ctx, a, b):
    _check_broadcast("add", a, b)
    return a + b


def _add_bwd(ctx, g, a, b):
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def _mul_fwd(ctx, a, b):
    _check_broadcast("mul", a, b)
    return a * b


def _mul_bwd(ctx, g, a, b):
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _relu_fwd(ctx, a):
    return np.maximum(a, 0.0)


def _relu_bwd(ctx, g, a):
    # subgradient at exactly zero is zero
    return (g * (a > 0.0),)


def _concat_fwd(ctx, *arrays):
    lead = arrays[0].shape[:-1]
    for arr in arrays:
        if arr.shape[:-1] != lead:
            raise ShapeError(
                f"concat: leading shapes differ: {[a.shape for a in arrays]}"
            )
    ctx["splits"] = np.cumsum([a.shape[-1] for a in arrays])[:-1]
    return np.concatenate(arrays, axis=-1)


def _concat_bwd(ctx, g, *arrays):
    return tuple(np.split(g, ctx["splits"], axis=-1))


def _sum_rows_fwd(ctx, a):
    if a.ndim != 2:
        raise ShapeError(f"sum-rows: expected a matrix, got shape {a.shape}")
    # sorting fixes the summation order independently of row order
    return np.sort(a, axis=0).sum(axis=0, keepdims=True)


def _sum_rows_bwd(ctx, g, a):
    return (np.broadcast_to(g, a.shape).copy(),)


_GATHER_CACHE: dict[int, tuple[np.ndarray, int, sp.csr_matrix]] = {}


def _gather_matrix(index: np.ndarray, n_rows: int) -> sp.csr_matrix:
    """Sparse (segments, n_rows) 0/1 matrix selecting each segment's rows.

    Memoized on the identity of ``index``: a batch reuses its index arrays
    across layers and encoders.
    """
    hit = _GATHER_CACHE.get(id(index))
    if hit is not None and hit[0] is index and hit[1] == n_rows:
        return hit[2]
    seg, pos = np.nonzero(index >= 0)
    matrix = sp.csr_matrix(
        (np.ones(seg.size), (seg, index[seg, pos])), shape=(index.shape[0], n_rows)
    )
    if len(_GATHER_CACHE) >= 32:
        _GATHER_CACHE.pop(next(iter(_GATHER_CACHE)))
    _GATHER_CACHE[id(index)] = (index, n_rows, matrix)
    return matrix


def _segment_sum_fwd(ctx, a, *, index: np.ndarray, exact: bool = True):
    if a.ndim != 2:
        raise ShapeError(f"segment-sum: expected a matrix, got shape {a.shape}")
    index = np.asarray(index)
    if index.ndim != 2:
        raise ShapeError(f"segment-sum: index must be 2-D, got shape {index.shape}")
    if index.size and index.max() >= a.shape[0]:
        raise ShapeError(
            f"segment-sum: index {int(index.max())} out of range for {a.shape[0]} rows"
        )
    ctx["gather"] = gather = _gather_matrix(index, a.shape[0])
    if not exact:
        return np.asarray(gather @ a)
    padded = np.vstack([a, np.zeros((1, a.shape[1]))])
    gathered = padded[index]  # -1 picks the zero pad row
    gathered.sort(axis=1)
    return gathered.sum(axis=1)


def _segment_sum_bwd(ctx, g, a):
    return (np.asarray(ctx["gather"].T @ g),)


def _sum_fwd(ctx, a):
    return np.asarray(a.sum())


def _sum_bwd(ctx, g, a):
    return (np.full(a.shape, float(np.asarray(g).reshape(-1)[0])),)


def _scale_fwd(ctx, a, *, factor: float):
    ctx["factor"] = float(factor)
    return a * ctx["factor"]


def _scale_bwd(ctx, g, a):
    return (g * ctx["factor"],)


def _log_softmax_fwd(ctx, a):
    shifted = a - a.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    ctx["out"] = out
    return out


def _log_softmax_bwd(ctx, g, a):
    probs = np.exp(ctx["out"])
    return (g - probs * g.sum(axis=-1, keepdims=True),)


def _logsumexp_fwd(ctx, a, *, mask: np.ndarray | None = None):
    if mask is None:
        mask = np.ones(a.shape, dtype=bool)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("logsumexp-rows: a row has no selected entries")
    masked = np.where(mask, a, -np.inf)
    top = masked.max(axis=-1, keepdims=True)
    weights = np.exp(masked - top)
    total = weights.sum(axis=-1, keepdims=True)
    ctx["softmax"] = weights / total
    return (top + np.log(total))[..., 0]


def _logsumexp_bwd(ctx, g, a):
    return (ctx["softmax"] * g[..., None],)


def _l2_normalize_fwd(ctx, a, *, floor: float = 1e-12):
    norms = np.maximum(np.sqrt((a * a).sum(axis=-1, keepdims=True)), floor)
    out = a / norms
    ctx["norms"], ctx["out"] = norms, out
    return out


def _l2_normalize_bwd(ctx, g, a):
    out, norms = ctx["out"], ctx["norms"]
    return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)


def _dropout_fwd(ctx, a, *, rate: float, training: bool, rng=None):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        ctx["mask"] = None
        return a.copy()
    if rng is None:
        raise ValueError("dropout: a random generator is required in training mode")
    keep = 1.0 - rate
    mask = (rng.random(a.shape) < keep) / keep
    ctx["mask"] = mask
    return a * mask


def _dropout_bwd(ctx, g, a):
    mask = ctx["mask"]
    return (g if mask is None else g * mask,)


@dataclass(frozen=True)
class Primitive:
    forward: Callable[..., np.ndarray]
    backward: Callable[..., tuple]
    arity: int | None  # None: variadic


PRIMITIVES: dict[str, Primitive] = {
    "matmul": Primitive(_matmul_fwd, _matmul_bwd, 2),
    "transpose": Primitive(_transpose_fwd, _transpose_bwd, 1),
    "add": Primitive(_add_fwd, _add_bwd, 2),
    "mul": Primitive(_mul_fwd, _mul_bwd, 2),
    "relu": Primitive(_relu_fwd, _relu_bwd, 1),
    "concat": Primitive(_concat_fwd, _concat_bwd, None),
    "sum-rows": Primitive(_sum_rows_fwd, _sum_rows_bwd, 1),
    "segment-sum": Primitive(_segment_sum_fwd, _segment_sum_bwd, 1),
    "sum": Primitive(_sum_fwd, _sum_bwd, 1),
    "scale": Primitive(_scale_fwd, _scale_bwd, 1),
    "log-softmax-rows": Primitive(_log_softmax_fwd, _log_softmax_bwd, 1),
    "logsumexp-rows": Primitive(_logsumexp_fwd, _logsumexp_bwd, 1),
    "l2-normalize-rows": Primitive(_l2_normalize_fwd, _l2_normalize_bwd, 1),
    "dropout": Primitive(_dropout_fwd, _dropout_bwd, 1),
}


def forward_primitive(tag: str, operands: Sequence[Tensor], **attrs) -> Tensor:
    """Apply primitive ``tag`` to ``operands``; record it if a tape is active."""
    try:
        prim = PRIMITIVES[tag]
    except KeyError:
        raise ValueError(f"unknown primitive {tag!r}") from None
    operands = tuple(_as_tensor(op) for op in operands)
    if prim.arity is not None and len(operands) != prim.arity:
        raise ShapeError(f"{tag}: expected {prim.arity} operands, got {len(operands)}")
    if not operands:
        raise ShapeError(f"{tag}: no operands")
    for op in operands:
        if not np.isfinite(op.data).all():
            raise NonFiniteError(f"{tag}: non-finite values in operand of shape {op.shape}")

    ctx: dict[str, Any] = {}
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite output is rejected below
        out_data = prim.forward(ctx, *(op.data for op in operands), **attrs)
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{tag}: produced non-finite output")
    out = Tensor(out_data, requires_grad=any(op.requires_grad for op in operands))

    tape = _ACTIVE_TAPE.get()
    if tape is not None and out.requires_grad:
        tape.records.append(Record(tag, operands, out, ctx))
    return out


def backward(tape: Tape, loss: Tensor) -> dict[Parameter, np.ndarray]:
    """Accumulate d(loss)/d(parameter) into ``.grad`` of every reached Parameter.

    Returns the gradients computed in this call, keyed by parameter.
    """
    if tape.consumed:
        raise TapeError("tape already consumed; re-run the forward pass to re-trace")
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not tape.records or not any(rec.output is loss for rec in tape.records):
        raise TapeError("backward: loss was not produced on this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    params: dict[int, Parameter] = {}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.output), None)
        if g_out is None:
            continue
        op_grads = PRIMITIVES[rec.tag].backward(rec.ctx, g_out, *(op.data for op in rec.operands))
        for op, g in zip(rec.operands, op_grads):
            if g is None or not op.requires_grad:
                continue
            key = id(op)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64).reshape(op.shape)
            if isinstance(op, Parameter):
                params[key] = op

    result = {}
    for key, param in params.items():
        g = grads.get(key, np.zeros_like(param.data))
        param.grad += g
        result[param] = g
    return result


def finite_difference_gradient(
    f: Callable[[Parameter], Any], p: Parameter, h: float = 1e-5
) -> np.ndarray:
    """Central-difference estimate of df/dp, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")

    def evaluate() -> float:
        value = f(p)
        value = value.item() if isinstance(value, Tensor) else float(value)
        if not np.isfinite(value):
            raise NonFiniteError("finite_difference_gradient: f returned a non-finite value")
        return value

    grad = np.zeros_like(p.data)
    flat = p.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        upper = evaluate()
        flat[i] = orig - h
        lower = evaluate()
        flat[i] = orig
        grad.reshape(-1)[i] = (upper - lower) / (2.0 * h)
    return grad


# --------------------------------------------------------------------------
# optimizer


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update. Gradients are left for the caller to zero."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    beta1, beta2 = betas
    for p in params:
        p.step += 1
        p.exp_avg *= beta1
        p.exp_avg += (1.0 - beta1) * p.grad
        p.exp_avg_sq *= beta2
        p.exp_avg_sq += (1.0 - beta2) * (p.grad * p.grad)
        m_hat = p.exp_avg / (1.0 - beta1**p.step)
        v_hat = p.exp_avg_sq / (1.0 - beta2**p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a fixed parameter registry."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params: list[Parameter] = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.lr, self.betas, self.eps)

    def owns(self, param: Parameter) -> bool:
        return any(p is param for p in self.params)
