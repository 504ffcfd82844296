"""Dense float64 tensors with taped reverse-mode differentiation.

Forward operations run on numpy arrays. While a :class:`Tape` is active,
any operation touching a tensor that requires gradients is recorded, and
:func:`backward` replays the recorded primitives in reverse to accumulate
vector-Jacobian products into ``.grad``. Gradients accumulate across
backward calls until explicitly cleared.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote rank-0 arrays to rank 1
        self.data = np.ascontiguousarray(arr) if arr.ndim else arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on non-scalar tensor of shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; constants are wrapped on the fly
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeNode:
    """One recorded primitive: inputs, output, and its backward rule.

    ``backward`` maps the output gradient to per-input gradients
    (``None`` for inputs that take no gradient).
    """

    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]
    tape: "Tape"
    index: int


class Tape:
    """Ordered record of primitive applications; inputs always precede use."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)


_tape_stack: list[Tape] = []


def _record(inputs: tuple[Tensor, ...], out: Tensor, backward) -> Tensor:
    if _tape_stack and any(t.requires_grad for t in inputs):
        tape = _tape_stack[-1]
        out.requires_grad = True
        node = TapeNode(inputs, out, backward, tape, len(tape.nodes))
        tape.nodes.append(node)
        out.node = node
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record((a, b), out, bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record((a, b), out, bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record((a, b), out, bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)

    def bwd(g):
        return (g * c,)

    return _record((a,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, bwd)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected rank 2, got shape {a.shape}")
    out = Tensor(a.data.T)

    def bwd(g):
        return (np.ascontiguousarray(g.T),)

    return _record((a,), out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record((a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: empty input list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=axis))

    return _record(tensors, out, bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(a.data[idx])

    def bwd(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        return (ga,)

    return _record((a,), out, bwd)


def scatter_add_rows(a: Tensor, indices, rows: Tensor) -> Tensor:
    """Return a copy of ``a`` with ``rows`` accumulated at ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if rows.shape[1:] != a.shape[1:] or len(idx) != rows.shape[0]:
        raise ShapeError(
            f"scatter_add_rows: base {a.shape}, rows {rows.shape}, {len(idx)} indices"
        )
    data = a.data.copy()
    np.add.at(data, idx, rows.data)
    out = Tensor(data)

    def bwd(g):
        return g, g[idx]

    return _record((a, rows), out, bwd)


def sum_rows(a: Tensor) -> Tensor:
    """Collapse axis 0: (n, d) -> (d,)."""
    out = Tensor(a.data.sum(axis=0))

    def bwd(g):
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record((a,), out, bwd)


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def bwd(g):
        return (np.full(a.shape, float(g)),)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# nonlinearities


def leaky_relu(a: Tensor, slope: float) -> Tensor:
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    pos = a.data > 0
    out = Tensor(np.where(pos, a.data, slope * a.data))

    def bwd(g):
        return (g * np.where(pos, 1.0, slope),)

    return _record((a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    s = np.empty_like(x)
    p = x >= 0
    s[p] = 1.0 / (1.0 + np.exp(-x[p]))
    ex = np.exp(x[~p])
    s[~p] = ex / (1.0 + ex)
    out = Tensor(s)

    def bwd(g):
        return (g * s * (1.0 - s),)

    return _record((a,), out, bwd)


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) computed as -softplus(-x); never overflows."""
    x = a.data
    out = Tensor(-_softplus(-x))
    sneg = np.empty_like(x)
    p = x >= 0
    sneg[p] = np.exp(-x[p]) / (1.0 + np.exp(-x[p]))
    sneg[~p] = 1.0 / (1.0 + np.exp(x[~p]))

    def bwd(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        return (g * sneg,)

    return _record((a,), out, bwd)


def batch_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-column standardization over the batch axis, then affine.

    Uses biased batch variance; gradients flow through the mean and
    variance. Zero-variance columns are kept finite by ``eps``.
    """
    if a.ndim != 2 or a.shape[0] < 1:
        raise ShapeError(f"batch_norm: expected (n, d) with n >= 1, got {a.shape}")
    x = a.data
    n = x.shape[0]
    mu = x.mean(axis=0)
    var = ((x - mu) ** 2).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = Tensor(gamma.data * xhat + beta.data)

    def bwd(g):
        dgamma = (g * xhat).sum(axis=0)
        dbeta = g.sum(axis=0)
        gx = g * gamma.data
        dx = inv / n * (n * gx - gx.sum(axis=0) - xhat * (gx * xhat).sum(axis=0))
        return dx, dgamma, dbeta

    return _record((a, gamma, beta), out, bwd)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax at the label index, via shifted log-sum-exp."""
    y = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or y.ndim != 1 or y.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"softmax_cross_entropy: logits {logits.shape}, labels {y.shape}"
        )
    n, k = logits.shape
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(n), y].mean())

    def bwd(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (float(g) / n * p,)

    return _record((logits,), out, bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; the mask is drawn from ``rng`` and held constant."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return a
    mask = (rng.random(a.shape) >= p) / (1.0 - p)
    out = Tensor(a.data * mask)

    def bwd(g):
        return (g * mask,)

    return _record((a,), out, bwd)


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor reachable
    from ``loss`` that requires gradients."""
    if loss.size != 1:
        raise ShapeError(f"backward expects a scalar loss, got shape {loss.shape}")
    node = loss.node
    if node is None:
        raise RuntimeError("loss was not recorded on an active tape")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for nd in reversed(node.tape.nodes[: node.index + 1]):
        g = grads.get(id(nd.output))
        if g is None:
            continue
        for inp, gi in zip(nd.inputs, nd.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = inp
    for key, t in holders.items():
        t.grad = grads[key] if t.grad is None else t.grad + grads[key]


# ---------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckEntry:
    name: str
    max_rel_err: float
    worst_coord: tuple[int, ...]
    analytic: float
    numeric: float


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)
    tolerance: float = 1e-5

    @property
    def passed(self) -> bool:
        return all(e.max_rel_err <= self.tolerance for e in self.entries)

    @property
    def worst(self) -> GradCheckEntry:
        return max(self.entries, key=lambda e: e.max_rel_err)

    def __str__(self) -> str:
        lines = []
        for e in self.entries:
            status = "ok" if e.max_rel_err <= self.tolerance else "FAIL"
            lines.append(
                f"{status:4s} {e.name:40s} rel_err={e.max_rel_err:.3e} "
                f"at {e.worst_coord} (analytic={e.analytic:.6e}, numeric={e.numeric:.6e})"
            )
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central
    differences, coordinate by coordinate.

    ``f`` must be deterministic and read the parameter tensors in place.
    Relative error is |a - n| / max(1, |a|, |n|).
    """
    saved = [(t, t.grad) for _, t in params]
    for _, t in params:
        t.grad = None
    with Tape():
        loss = f()
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params
    }
    for (t, g) in saved:
        t.grad = g

    report = GradCheckReport(tolerance=tolerance)
    for name, t in params:
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = GradCheckEntry(name, -1.0, (), 0.0, 0.0)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            err = _rel_err(aflat[i], num)
            if err > worst.max_rel_err:
                coord = np.unravel_index(i, t.shape) if t.ndim else ()
                worst = GradCheckEntry(name, err, tuple(int(c) for c in coord),
                                       float(aflat[i]), num)
        report.entries.append(worst)
    return report
