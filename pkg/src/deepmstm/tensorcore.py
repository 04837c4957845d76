"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable op is a plain function that computes its forward value
with numpy and, when any input requires a gradient, appends a node to the
active :class:`Tape`. :func:`backward` replays the tape in reverse append
order and accumulates gradients additively.

Ops accept arbitrary leading batch axes wherever that is natural, so a whole
training set can flow through one tape.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Tape",
    "as_tensor",
    "no_grad",
    "using_tape",
    "current_tape",
    "backward",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "transpose",
    "tanh",
    "sigmoid",
    "mean_abs",
    "sum",
    "getitem",
    "concat",
    "stack",
    "conv_feature_1d",
    "conv_temporal_2d",
    "concat_time_pad",
    "lstm_recurrence",
    "GradCheck",
    "gradient_check",
    "finite_diff_check",
]


class Tensor:
    """A float64 array that may take part in differentiation.

    ``grad`` stays ``None`` until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_on_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._on_tape = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable ops; append order is topological."""

    nodes: list[Node] = field(default_factory=list)
    enabled: bool = True

    def __len__(self) -> int:
        return len(self.nodes)

    def reset(self) -> None:
        for node in self.nodes:
            node.output._on_tape = False
        self.nodes.clear()


_ACTIVE_TAPE: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("deepmstm_tape", default=None)


def current_tape() -> Tape:
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        tape = Tape()
        _ACTIVE_TAPE.set(tape)
    return tape


@contextlib.contextmanager
def using_tape(tape: Tape | None = None) -> Iterator[Tape]:
    tape = Tape() if tape is None else tape
    token = _ACTIVE_TAPE.set(tape)
    try:
        yield tape
    finally:
        _ACTIVE_TAPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording anything."""
    tape = current_tape()
    prev, tape.enabled = tape.enabled, False
    try:
        yield
    finally:
        tape.enabled = prev


def _emit(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, backward_fn) -> Tensor:
    tape = current_tape()
    needs = tape.enabled and any(t.requires_grad for t in inputs)
    result = Tensor(out, requires_grad=needs)
    if needs:
        result._on_tape = True
        tape.nodes.append(Node(op, inputs, result, backward_fn))
    return result


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient, then reset the tape."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = current_tape()
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    if not loss._on_tape and loss.requires_grad:
        leaves[id(loss)] = loss
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        contribs = node.backward(g)
        for inp, c in zip(node.inputs, contribs):
            if c is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + c
            else:
                grads[key] = c
            if not inp._on_tape:
                leaves[key] = inp
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    tape.reset()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"shapes {a.shape} and {b.shape} do not broadcast") from exc


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    ad, bd = a.data, b.data
    return _emit(
        "mul",
        (a, b),
        ad * bd,
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _emit("neg", (a,), -a.data, lambda g: (-g,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _emit("tanh", (a,), y, lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # tanh form is overflow-free and gives exactly 0.5 at 0
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", (a,), y, lambda g: (g * y * (1.0 - y),))


# -- reductions ---------------------------------------------------------------


def mean_abs(a) -> Tensor:
    """Mean of absolute values; the subgradient at 0 is 0."""
    a = as_tensor(a)
    if a.data.size == 0:
        raise ContractError("mean_abs of an empty tensor")
    n = a.data.size
    sign = np.sign(a.data)
    return _emit("mean_abs", (a,), np.asarray(np.abs(a.data).mean()), lambda g: (g * sign / n,))


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", (a,), np.asarray(a.data.sum(axis=axis)), bw)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError("matmul needs at least 1-d operands")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bw(g):
        a2 = ad[None, :] if ad.ndim == 1 else ad
        b2 = bd[:, None] if bd.ndim == 1 else bd
        g2 = g
        if bd.ndim == 1:
            g2 = g2[..., None]
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        if ad.ndim == 1:
            ga = ga[..., 0, :]
        if bd.ndim == 1:
            gb = gb[..., 0]
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", (a, b), out, bw)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise DimensionError("transpose needs at least 2 axes")
    return _emit("transpose", (a,), np.swapaxes(a.data, -1, -2), lambda g: (np.swapaxes(g, -1, -2),))


# -- indexing / assembly ------------------------------------------------------


def getitem(a, idx) -> Tensor:
    """Basic (slice/int) indexing; advanced indexing is not supported."""
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] += g
        return (full,)

    return _emit("getitem", (a,), a.data[idx], bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _emit("concat", ts, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _emit("stack", ts, out, lambda g: tuple(np.moveaxis(g, axis, 0)))


# -- the two convolutions and their assembly ----------------------------------


def conv_feature_1d(x, kernels, bias) -> Tensor:
    """Per-column weighted sum over the series axis.

    ``x`` is ``(..., M, N)``, ``kernels`` ``(K1, M)``, ``bias`` ``(K1,)``; the
    result is ``(..., K1, N)`` with ``out[k, j] = bias[k] + sum_m kernels[k, m] * x[m, j]``.
    """
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim < 2 or w.ndim != 2 or b.shape != (w.shape[0],):
        raise DimensionError(f"conv_feature_1d: bad shapes x={x.shape} kernels={w.shape} bias={b.shape}")
    if w.shape[1] != x.shape[-2]:
        raise DimensionError(f"kernel length {w.shape[1]} != number of series {x.shape[-2]}")
    xd, wd = x.data, w.data
    out = np.matmul(wd, xd) + b.data[:, None]

    def bw(g):
        gx = np.matmul(wd.T, g)
        gw = np.matmul(g, np.swapaxes(xd, -1, -2))
        gw = gw.reshape(-1, *wd.shape).sum(axis=0)
        gb = g.reshape(-1, *g.shape[-2:]).sum(axis=(0, 2))
        return gx, gw, gb

    return _emit("conv_feature_1d", (x, w, b), out, bw)


def conv_temporal_2d(x, kernels, bias) -> Tensor:
    """Valid convolution with ``(M, 2)`` kernels spanning every series.

    ``x`` is ``(..., M, N)`` with ``N >= 2``, ``kernels`` ``(K2, M, 2)``; the
    result is ``(..., K2, N - 1)``. A single kernel ``[[-1, 1]]`` on one series
    is first-order differencing.
    """
    x, w, b = as_tensor(x), as_tensor(kernels), as_tensor(bias)
    if x.ndim < 2 or w.ndim != 3 or w.shape[2] != 2 or b.shape != (w.shape[0],):
        raise DimensionError(f"conv_temporal_2d: bad shapes x={x.shape} kernels={w.shape} bias={b.shape}")
    if w.shape[1] != x.shape[-2]:
        raise DimensionError(f"kernel height {w.shape[1]} != number of series {x.shape[-2]}")
    if x.shape[-1] < 2:
        raise DimensionError(f"conv_temporal_2d needs at least 2 time steps, got {x.shape[-1]}")
    xd, wd = x.data, w.data
    w0, w1 = wd[:, :, 0], wd[:, :, 1]
    left, right = xd[..., :, :-1], xd[..., :, 1:]
    out = np.matmul(w0, left) + np.matmul(w1, right) + b.data[:, None]

    def bw(g):
        gx = np.zeros_like(xd)
        gx[..., :, :-1] += np.matmul(w0.T, g)
        gx[..., :, 1:] += np.matmul(w1.T, g)
        gw = np.empty((int(np.prod(g.shape[:-2], dtype=int)),) + wd.shape)
        gw[..., 0] = np.matmul(g, np.swapaxes(left, -1, -2)).reshape(-1, *w0.shape)
        gw[..., 1] = np.matmul(g, np.swapaxes(right, -1, -2)).reshape(-1, *w1.shape)
        gb = g.reshape(-1, *g.shape[-2:]).sum(axis=(0, 2))
        return gx, gw.sum(axis=0), gb

    return _emit("conv_temporal_2d", (x, w, b), out, bw)


def concat_time_pad(c1, c2) -> Tensor:
    """Stack ``c1 (..., K1, N)`` over ``c2 (..., K2, N-1)`` padded with a zero last column."""
    c1, c2 = as_tensor(c1), as_tensor(c2)
    if c1.ndim < 2 or c2.ndim < 2 or c1.shape[:-2] != c2.shape[:-2]:
        raise DimensionError(f"concat_time_pad: bad shapes {c1.shape}, {c2.shape}")
    if c1.shape[-1] != c2.shape[-1] + 1:
        raise DimensionError(
            f"c1 must have exactly one more column than c2, got {c1.shape[-1]} and {c2.shape[-1]}"
        )
    k1 = c1.shape[-2]
    padded = np.concatenate([c2.data, np.zeros(c2.shape[:-1] + (1,))], axis=-1)
    out = np.concatenate([c1.data, padded], axis=-2)
    return _emit("concat_time_pad", (c1, c2), out, lambda g: (g[..., :k1, :], g[..., k1:, :-1]))


# -- recurrence -------------------------------------------------------------------


def _sigm(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_recurrence(projected, recurrent_weights, h0, c0) -> Tensor:
    """Standard LSTM recurrence as one tape node.

    ``projected`` is ``(..., N, 4H)`` holding ``W_x x_j + b`` for every step,
    gate blocks ordered input, forget, cell, output. ``recurrent_weights`` is
    ``(4H, H)``. Returns the hidden states ``(..., N, H)``; the backward pass is
    full backpropagation through time.
    """
    p, wh, h0, c0 = as_tensor(projected), as_tensor(recurrent_weights), as_tensor(h0), as_tensor(c0)
    four_h, H = wh.shape
    if p.ndim < 2 or p.shape[-1] != four_h or four_h != 4 * H:
        raise DimensionError(f"lstm_recurrence: projected {p.shape} vs recurrent weights {wh.shape}")
    batch, n_steps = p.shape[:-2], p.shape[-2]
    if h0.shape != batch + (H,) or c0.shape != batch + (H,):
        raise DimensionError(f"initial states must have shape {batch + (H,)}")
    whd = wh.data
    hs = np.empty(batch + (n_steps, H))
    cs = np.empty(batch + (n_steps, H))
    gates = np.empty(batch + (n_steps, 4 * H))
    h, c = h0.data, c0.data
    for j in range(n_steps):
        z = p.data[..., j, :] + h @ whd.T
        act = np.concatenate([_sigm(z[..., : 2 * H]), np.tanh(z[..., 2 * H : 3 * H]), _sigm(z[..., 3 * H :])], axis=-1)
        i, f, g, o = act[..., :H], act[..., H : 2 * H], act[..., 2 * H : 3 * H], act[..., 3 * H :]
        c = f * c + i * g
        h = o * np.tanh(c)
        gates[..., j, :], cs[..., j, :], hs[..., j, :] = act, c, h
    h_init, c_init = h0.data, c0.data

    def bw(g_hs):
        dp = np.empty_like(gates)
        dwh = np.zeros_like(whd)
        dh_next = np.zeros(batch + (H,))
        dc_next = np.zeros(batch + (H,))
        for j in range(n_steps - 1, -1, -1):
            act = gates[..., j, :]
            i, f, g, o = act[..., :H], act[..., H : 2 * H], act[..., 2 * H : 3 * H], act[..., 3 * H :]
            c_prev = cs[..., j - 1, :] if j > 0 else c_init
            h_prev = hs[..., j - 1, :] if j > 0 else h_init
            tc_ = np.tanh(cs[..., j, :])
            dh = g_hs[..., j, :] + dh_next
            dc = dc_next + dh * o * (1.0 - tc_ * tc_)
            dz = np.concatenate(
                [
                    dc * g * i * (1.0 - i),
                    dc * c_prev * f * (1.0 - f),
                    dc * i * (1.0 - g * g),
                    dh * tc_ * o * (1.0 - o),
                ],
                axis=-1,
            )
            dp[..., j, :] = dz
            dwh += (dz.reshape(-1, 4 * H).T @ h_prev.reshape(-1, H))
            dh_next = dz @ whd
            dc_next = dc * f
        return dp, dwh, dh_next, dc_next

    return _emit("lstm_recurrence", (p, wh, h0, c0), hs, bw)


# -- numerical verification ---------------------------------------------------


@dataclass(frozen=True)
class GradCheck:
    max_error: float
    worst_param: str | None
    worst_index: tuple[int, ...] | None

    def passed(self, tol: float) -> bool:
        return bool(self.max_error < tol)


def gradient_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> GradCheck:
    """Compare tape gradients of ``f`` with central differences, coordinate by coordinate.

    The error per coordinate is ``|analytic - central| / (1 + |central|)``.
    Non-finite values count as an infinite error.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    with using_tape():
        leaves = {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in base.items()}
        backward(f(leaves))
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def value(arrays) -> float:
        with using_tape(), no_grad():
            return float(f({k: Tensor(v) for k, v in arrays.items()}).data)

    worst = GradCheck(0.0, None, None)
    for name, arr in base.items():
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            arr[idx] = orig + h
            up = value(base)
            arr[idx] = orig - h
            down = value(base)
            arr[idx] = orig
            central = (up - down) / (2.0 * h)
            err = abs(analytic[name][idx] - central) / (1.0 + abs(central))
            if not np.isfinite(err):
                err = np.inf
            if err > worst.max_error or worst.worst_param is None:
                worst = GradCheck(float(err), name, tuple(int(i) for i in idx))
    return worst


def finite_diff_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    h: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return gradient_check(f, params, h).max_error
