"""Dense float64 tensors with reverse-mode automatic differentiation.

Values live in numpy arrays; every differentiable operation appends a record
to the Graph shared by the tensors it touches. Graph records are kept in
creation order, which is a valid topological order, so one reversed sweep
propagates gradients. A graph is consumed by a single backward() call and
must be rebuilt (by re-running the forward computation) before
differentiating again.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "make_op",
    "backward",
    "gradcheck",
    "affine",
    "concat_cols",
    "stack_scalars",
    "layer_norm",
    "logsumexp",
    "zero_grads",
]

LOG_EPS = 1e-12
LN_EPS = 1e-5

_local = threading.local()


def _grad_enabled() -> bool:
    return not getattr(_local, "no_grad", False)


class no_grad:
    """Context manager that disables graph recording (evaluation mode)."""

    def __enter__(self) -> None:
        self._prev = getattr(_local, "no_grad", False)
        _local.no_grad = True

    def __exit__(self, *exc) -> None:
        _local.no_grad = self._prev


class _Record:
    __slots__ = ("out", "fn", "visits")

    def __init__(self, out: "Tensor", fn: Callable[[np.ndarray], None]):
        self.out = out
        self.fn = fn
        self.visits = 0


class Graph:
    """Operation tape for one forward computation, single-use on backward."""

    __slots__ = ("records", "members", "consumed")

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self.members: list[Tensor] = []
        self.consumed = False

    @property
    def live(self) -> bool:
        return not self.consumed


class Tensor:
    """N-dimensional float64 value with an optional gradient companion."""

    __slots__ = ("data", "grad", "requires_grad", "graph")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.graph: Graph | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Value-only copy with no graph attachment and no gradient."""
        return Tensor(self.data.copy())

    def zero_grad_(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return _add(self, other)
        return _add_scalar(self, float(other))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return _scale(self, -1.0)

    def __sub__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return _add(self, _scale(other, -1.0))
        return _add_scalar(self, -float(other))

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return _mul(self, other)
        return _scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return _matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return _transpose(self)

    # -- reductions and elementwise maps -------------------------------------

    def sum(self) -> "Tensor":
        t = self
        return make_op(np.sum(t.data), (t,), lambda g: _accum(t, np.broadcast_to(g, t.data.shape)))

    def mean(self) -> "Tensor":
        t = self
        n = t.data.size
        return make_op(np.mean(t.data), (t,), lambda g: _accum(t, np.broadcast_to(g / n, t.data.shape)))

    def exp(self) -> "Tensor":
        t = self
        out_data = np.exp(t.data)
        return make_op(out_data, (t,), lambda g: _accum(t, g * out_data))

    def log_clamped(self, eps: float = LOG_EPS) -> "Tensor":
        """Natural log of max(value, eps); gradient is zero where clamped."""
        t = self
        mask = t.data > eps
        out_data = np.log(np.maximum(t.data, eps))
        inv = np.where(mask, 1.0 / np.where(mask, t.data, 1.0), 0.0)
        return make_op(out_data, (t,), lambda g: _accum(t, g * inv))

    def softmax(self) -> "Tensor":
        """Max-subtracted softmax over the last axis."""
        t = self
        if not np.all(np.isfinite(t.data)):
            raise ValueError("softmax requires finite logits")
        shifted = t.data - np.max(t.data, axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / np.sum(e, axis=-1, keepdims=True)

        def back(g: np.ndarray) -> None:
            dot = np.sum(g * p, axis=-1, keepdims=True)
            _accum(t, p * (g - dot))

        return make_op(p, (t,), back)

    def gelu(self) -> "Tensor":
        """Exact erf-form GELU."""
        t = self
        x = t.data
        phi = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        out_data = x * phi
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return make_op(out_data, (t,), lambda g: _accum(t, g * (phi + x * pdf)))

    # -- indexing -------------------------------------------------------------

    def row(self, i: int) -> "Tensor":
        t = self
        if not 0 <= i < t.data.shape[0]:
            raise ValueError(f"row index {i} out of range for shape {t.shape}")
        out_data = t.data[i].copy()

        def back(g: np.ndarray) -> None:
            full = np.zeros_like(t.data)
            full[i] = g
            _accum(t, full)

        return make_op(out_data, (t,), back)

    def pick(self, i: int) -> "Tensor":
        """Scalar element of a 1-D tensor."""
        t = self
        if t.ndim != 1:
            raise ValueError(f"pick expects a vector, got shape {t.shape}")
        if not 0 <= i < t.data.shape[0]:
            raise ValueError(f"index {i} out of range for shape {t.shape}")
        out_data = np.asarray(t.data[i])

        def back(g: np.ndarray) -> None:
            full = np.zeros_like(t.data)
            full[i] = g
            _accum(t, full)

        return make_op(out_data, (t,), back)

    def gather_rows(self, indices: Sequence[int]) -> "Tensor":
        """Row lookup with scatter-add gradient (embedding-style gather)."""
        t = self
        idx = np.asarray(indices, dtype=np.intp)
        if idx.size and (idx.min() < 0 or idx.max() >= t.data.shape[0]):
            raise ValueError(f"row indices out of range for shape {t.shape}")
        out_data = t.data[idx]

        def back(g: np.ndarray) -> None:
            full = np.zeros_like(t.data)
            np.add.at(full, idx, g)
            _accum(t, full)

        return make_op(out_data, (t,), back)

    def slice_cols(self, lo: int, hi: int) -> "Tensor":
        t = self
        out_data = t.data[:, lo:hi].copy()

        def back(g: np.ndarray) -> None:
            full = np.zeros_like(t.data)
            full[:, lo:hi] = g
            _accum(t, full)

        return make_op(out_data, (t,), back)


# -- graph plumbing -----------------------------------------------------------


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        if t.grad is None:
            t.grad = np.array(g)  # copy: g may alias another tensor's grad
        else:
            t.grad += g


def _attach(g: Graph, t: Tensor) -> None:
    if t.graph is not g:
        t.graph = g
        g.members.append(t)


def _join(inputs: Iterable[Tensor]) -> Graph:
    graph: Graph | None = None
    for t in inputs:
        tg = t.graph
        if tg is None or tg.consumed:
            continue
        if graph is None or graph is tg:
            graph = tg
        else:
            # Two live graphs meet: absorb the smaller tape into the larger.
            # The tapes were independent until now, so appending preserves
            # topological order.
            if len(tg.records) > len(graph.records):
                graph, tg = tg, graph
            graph.records.extend(tg.records)
            for m in tg.members:
                m.graph = graph
            graph.members.extend(tg.members)
    return graph if graph is not None else Graph()


def make_op(out_data, inputs: Sequence[Tensor], backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create the output tensor of an operation and record its backward rule.

    When recording is disabled, or no input requires a gradient, the output
    is a plain constant tensor.
    """
    if not (_grad_enabled() and any(t.requires_grad for t in inputs)):
        return Tensor(np.asarray(out_data, dtype=np.float64))
    out = Tensor(out_data, requires_grad=True)
    graph = _join(inputs)
    for t in inputs:
        if t.requires_grad:
            _attach(graph, t)
    _attach(graph, out)
    graph.records.append(_Record(out, backward_fn))
    return out


def backward(loss: Tensor, counter=None) -> None:
    """Propagate d(loss)/d(x) into .grad of every reachable parameter.

    The loss must be a scalar on a live graph; the sweep visits each recorded
    operation exactly once (reverse creation order) and then consumes the
    graph. Passing a counter tallies this as one backward pass.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    graph = loss.graph
    if graph is None:
        raise ValueError("loss is not attached to a computation graph")
    if graph.consumed:
        raise ValueError("graph already consumed by a previous backward")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(graph.records):
        rec.visits += 1
        if rec.out.grad is not None:
            rec.fn(rec.out.grad)
    graph.consumed = True
    if counter is not None:
        counter.backwards += 1


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# -- primitive ops ------------------------------------------------------------


def _add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape == b.shape:
        return make_op(a.data + b.data, (a, b), lambda g: (_accum(a, g), _accum(b, g)))
    if a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        # Row-broadcast bias addition.
        return make_op(
            a.data + b.data[None, :],
            (a, b),
            lambda g: (_accum(a, g), _accum(b, g.sum(axis=0))),
        )
    if b.ndim == 2 and a.ndim == 1:
        return _add(b, a)
    raise ValueError(f"add shape mismatch: {a.shape} vs {b.shape}")


def _add_scalar(a: Tensor, c: float) -> Tensor:
    return make_op(a.data + c, (a,), lambda g: _accum(a, g))


def _scale(a: Tensor, c: float) -> Tensor:
    return make_op(a.data * c, (a,), lambda g: _accum(a, g * c))


def _mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_accum(a, g * b.data), _accum(b, g * a.data)),
    )


def _matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return make_op(
            a.data @ b.data,
            (a, b),
            lambda g: (_accum(a, g @ b.data.T), _accum(b, a.data.T @ g)),
        )
    if a.ndim == 1 and b.ndim == 2:
        if a.shape[0] != b.shape[0]:
            raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return make_op(
            a.data @ b.data,
            (a, b),
            lambda g: (_accum(a, g @ b.data.T), _accum(b, np.outer(a.data, g))),
        )
    raise ValueError(f"matmul unsupported ranks: {a.shape} x {b.shape}")


def _transpose(a: Tensor) -> Tensor:
    return make_op(a.data.T.copy(), (a,), lambda g: _accum(a, g.T))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with the row-broadcast bias fused into one operation."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"affine shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")

    def back(g: np.ndarray) -> None:
        _accum(x, g @ w.data.T)
        _accum(w, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return make_op(x.data @ w.data + b.data[None, :], (x, w, b), back)


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    widths = [t.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def back(g: np.ndarray) -> None:
        lo = 0
        for t, w in zip(tensors, widths):
            _accum(t, g[:, lo : lo + w])
            lo += w

    return make_op(out_data, tuple(tensors), back)


def stack_scalars(tensors: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into one vector."""
    out_data = np.array([float(t.data) for t in tensors])

    def back(g: np.ndarray) -> None:
        for i, t in enumerate(tensors):
            _accum(t, np.asarray(g[i]))

    return make_op(out_data, tuple(tensors), back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    """Per-row zero-mean unit-variance normalization followed by an affine map."""
    if x.ndim != 2 or gain.ndim != 1 or bias.ndim != 1:
        raise ValueError(f"layer_norm shapes: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    if x.shape[1] != gain.shape[0] or gain.shape != bias.shape:
        raise ValueError(f"layer_norm width mismatch: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out_data = xhat * gain.data[None, :] + bias.data[None, :]

    def back(g: np.ndarray) -> None:
        dxhat = g * gain.data[None, :]
        m1 = dxhat.mean(axis=1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
        _accum(x, (dxhat - m1 - xhat * m2) * inv)
        _accum(gain, (g * xhat).sum(axis=0))
        _accum(bias, g.sum(axis=0))

    return make_op(out_data, (x, gain, bias), back)


def logsumexp(v: Tensor) -> Tensor:
    """log(sum(exp(v))) for a vector, computed with max subtraction."""
    m = float(np.max(v.data))
    return (v + (-m)).exp().sum().log_clamped() + m


# -- gradient verification ------------------------------------------------------


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6) -> float:
    """Compare analytic gradients of f() against central finite differences.

    f must rebuild its graph on every call and be deterministic. Returns the
    max over parameter coordinates of |analytic - numeric| scaled by
    max(1e-8, |analytic| + |numeric|).
    """
    params = list(params)
    zero_grads(params)
    out = f()
    if out.data.size != 1 or not np.isfinite(out.data):
        raise ValueError("gradcheck requires a finite scalar objective")
    backward(out)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            aflat = a.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                f_plus = float(f().data)
                flat[k] = orig - h
                f_minus = float(f().data)
                flat[k] = orig
                if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                    raise ValueError("gradcheck objective became non-finite during probing")
                numeric = (f_plus - f_minus) / (2.0 * h)
                err = abs(aflat[k] - numeric) / max(1e-8, abs(aflat[k]) + abs(numeric))
                if err > worst:
                    worst = err
    return worst
