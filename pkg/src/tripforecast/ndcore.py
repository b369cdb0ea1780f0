"""Small dense-tensor engine with tape-based reverse-mode differentiation.

Tensors wrap float64 numpy arrays. Any operation with at least one operand
that requires a gradient is recorded on the active :class:`Tape`; calling
:func:`backward` walks the tape in reverse and accumulates gradients into
the leaves.

Broadcasting is deliberately limited to tensor-vs-scalar. Shape changes
that other libraries do implicitly (bias addition, tiling an embedding over
time steps) go through explicit ops such as :func:`repeat`.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "ContractError",
    "NumericError",
    "Tensor",
    "Tape",
    "tensor",
    "constant",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "activation",
    "sigmoid",
    "tanh",
    "relu",
    "unary",
    "concat",
    "stack",
    "slice_axis",
    "reshape",
    "transpose",
    "repeat",
    "sum_axis",
    "total",
    "mean",
    "where",
    "lstm_recurrence",
    "backward",
    "grad_check",
    "no_grad",
]


class ShapeError(ValueError):
    pass


class ContractError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class Tensor:
    """A float64 array that may participate in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "__weakref__")

    def __init__(self, values, requires_grad: bool = False):
        self.data = np.array(values, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    # Operator sugar, all routed through the recorded ops below.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


class _SliceGrad:
    """Gradient that is nonzero only on one slice of a larger array.

    Lets per-step slices of a long sequence accumulate in place instead of
    materialising a full-size zero array per step.
    """

    __slots__ = ("idx", "g", "shape")

    def __init__(self, idx, g, shape):
        self.idx = idx
        self.g = g
        self.shape = shape

    def dense(self) -> np.ndarray:
        full = np.zeros(self.shape)
        full[self.idx] = self.g
        return full


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations, appended in execution order.

    Node ``k`` only ever reads tensors produced by nodes ``< k`` or leaves,
    so reverse iteration is a valid topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _state.stack.pop()
        assert popped is self

    def reset(self) -> None:
        for node in self.nodes:
            node.output._node = None
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.stack: list[Tape | None] = []


_state = _State()


def _active_tape() -> Tape | None:
    return _state.stack[-1] if _state.stack else None


class no_grad:
    """Context manager that disables recording, e.g. for batch scoring."""

    def __enter__(self):
        _state.stack.append(None)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(values, requires_grad=requires_grad)


def constant(values) -> Tensor:
    if isinstance(values, Tensor):
        return values
    return Tensor(values)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = False
    if needs:
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            node = _Node(tuple(inputs), out, backward_fn)
            out._node = node
            tape.nodes.append(node)
    return out


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _record((a, b), out, bw)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Elementwise ``add``, ``sub`` or ``mul`` of equal shapes or tensor-vs-scalar."""
    if kind not in _BINARY:
        raise ContractError(f"unknown elementwise op {kind!r}")
    a = _as_tensor(a)
    if isinstance(b, (int, float, np.floating, np.integer)):
        s = float(b)
        if kind == "add":
            return _record((a,), a.data + s, lambda g: (g,))
        if kind == "sub":
            return _record((a,), a.data - s, lambda g: (g,))
        return _record((a,), a.data * s, lambda g: (g * s,))
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")
    out = _BINARY[kind](a.data, b.data)
    if kind == "add":
        bw = lambda g: (g, g)
    elif kind == "sub":
        bw = lambda g: (g, -g)
    else:
        bw = lambda g: (g * b.data, g * a.data)
    return _record((a, b), out, bw)


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a, b = b, a
    return elementwise("mul", a, b)


def activation(kind: str, a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if kind == "sigmoid":
        y = expit(a.data)
        return _record((a,), y, lambda g: (g * y * (1.0 - y),))
    if kind == "tanh":
        y = np.tanh(a.data)
        return _record((a,), y, lambda g: (g * (1.0 - y * y),))
    if kind == "relu":
        # derivative at exactly 0 is taken as 0
        on = a.data > 0
        y = np.where(on, a.data, 0.0)
        return _record((a,), y, lambda g: (g * on,))
    raise ContractError(f"unknown activation {kind!r}")


def sigmoid(a: Tensor) -> Tensor:
    return activation("sigmoid", a)


def tanh(a: Tensor) -> Tensor:
    return activation("tanh", a)


def relu(a: Tensor) -> Tensor:
    return activation("relu", a)


def unary(kind: str, a: Tensor) -> Tensor:
    """Elementwise helpers used by the loss functions.

    ``abs`` uses sign(0) = 0 as its derivative at the kink; ``huber`` is the
    Huber function with threshold 1.
    """
    a = _as_tensor(a)
    x = a.data
    if kind == "abs":
        return _record((a,), np.abs(x), lambda g: (g * np.sign(x),))
    if kind == "square":
        return _record((a,), x * x, lambda g: (g * 2.0 * x,))
    if kind == "log":
        if np.any(x <= 0):
            raise NumericError("log of a non-positive value")
        return _record((a,), np.log(x), lambda g: (g / x,))
    if kind == "exp":
        y = np.exp(x)
        return _record((a,), y, lambda g: (g * y,))
    if kind == "log1p":
        if np.any(x <= -1):
            raise NumericError("log1p of a value <= -1")
        return _record((a,), np.log1p(x), lambda g: (g / (1.0 + x),))
    if kind == "logcosh":
        ax = np.abs(x)
        y = ax + np.log1p(np.exp(-2.0 * ax)) - np.log(2.0)
        return _record((a,), y, lambda g: (g * np.tanh(x),))
    if kind == "huber":
        small = np.abs(x) <= 1.0
        y = np.where(small, 0.5 * x * x, np.abs(x) - 0.5)
        return _record((a,), y, lambda g: (g * np.where(small, x, np.sign(x)),))
    raise ContractError(f"unknown unary op {kind!r}")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty list")
    if len(tensors) == 1:
        return tensors[0]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(
                f"concat: incompatible shapes {[x.shape for x in tensors]} along axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _record(tensors, out, bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(tensors, out, bw)


def slice_axis(a: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    a = _as_tensor(a)
    ax = axis % a.ndim
    if not 0 <= start <= stop <= a.shape[ax]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {axis} of {a.shape}")
    idx = [slice(None)] * a.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = a.shape
    return _record((a,), a.data[idx], lambda g: (_SliceGrad(idx, g, shape),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    old = a.shape
    return _record((a,), a.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(a.data, axes))
    return _record((a,), out, lambda g: (np.transpose(g, inv),))


def repeat(a: Tensor, n: int, axis: int = 1) -> Tensor:
    """Tile a tensor of extent 1 along ``axis`` to extent ``n``.

    This is the only way to spread a vector over several columns (or rows);
    the backward pass sums the copies.
    """
    a = _as_tensor(a)
    if a.shape[axis] != 1:
        raise ShapeError(f"repeat needs extent 1 on axis {axis}, got {a.shape}")
    out = np.repeat(a.data, n, axis=axis)
    return _record((a,), out, lambda g: (g.sum(axis=axis, keepdims=True),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record((a,), out, bw)


def total(a: Tensor) -> Tensor:
    """Sum of all entries as a 0-d tensor."""
    a = _as_tensor(a)
    shape = a.shape
    return _record((a,), np.array(a.data.sum()), lambda g: (np.full(shape, float(g)),))


def mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return mul(total(a), 1.0 / n)


def where(mask, a: Tensor, b) -> Tensor:
    """Select ``a`` where ``mask`` is true and ``b`` elsewhere.

    ``mask`` is a constant boolean array of the same shape; ``b`` may be a
    tensor or a scalar. Unselected entries receive exactly zero gradient.
    """
    a = _as_tensor(a)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != a.shape:
        raise ShapeError(f"where: mask shape {mask.shape} vs {a.shape}")
    if isinstance(b, Tensor):
        if b.shape != a.shape:
            raise ShapeError(f"where: shape mismatch {a.shape} vs {b.shape}")
        out = np.where(mask, a.data, b.data)
        return _record((a, b), out, lambda g: (np.where(mask, g, 0.0), np.where(mask, 0.0, g)))
    out = np.where(mask, a.data, float(b))
    return _record((a,), out, lambda g: (np.where(mask, g, 0.0),))


def lstm_recurrence(projected: Tensor, U: Tensor, valid) -> Tensor:
    """Recurrent part of an LSTM layer as one recorded op.

    ``projected`` holds ``W x_t + b`` for every step, shape ``(4h, T*B)``
    with step-major columns and gate rows ordered (input, forget, output,
    candidate). ``U`` is the stacked recurrent matrix ``(4h, h)`` and
    ``valid`` a ``(T, B)`` boolean array. Invalid steps hold the previous
    state. Returns every step's hidden state, ``(h, T*B)``; the state after
    each sequence's last valid step is the final ``B`` columns.

    Numerically this is the same sequence of float operations as composing
    matmul, sigmoid, tanh, mul, add and where step by step, just without a
    tape node per step.
    """
    projected, U = _as_tensor(projected), _as_tensor(U)
    valid = np.asarray(valid, dtype=bool)
    T, B = valid.shape
    four_h, h = U.shape
    if four_h != 4 * h or projected.shape != (4 * h, T * B):
        raise ShapeError(f"lstm_recurrence: projected {projected.shape}, U {U.shape}, valid {valid.shape}")
    Z, Ud = projected.data, U.data
    out = np.empty((h, T * B))
    h_t = np.zeros((h, B))
    c_t = np.zeros((h, B))
    cache = []
    for t in range(T):
        z = Z[:, t * B : (t + 1) * B]
        if t > 0:
            z = z + Ud @ h_t
        sig = expit(z[: 3 * h])
        i, f, o = sig[:h], sig[h : 2 * h], sig[2 * h :]
        g = np.tanh(z[3 * h :])
        c_new = i * g if t == 0 else f * c_t + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        v = valid[t]
        cache.append((i, f, o, g, tc, h_t, c_t, v))
        if v.all():
            h_t, c_t = h_new, c_new
        else:
            h_t = np.where(v, h_new, h_t)
            c_t = np.where(v, c_new, c_t)
        out[:, t * B : (t + 1) * B] = h_t

    def bw(dH):
        dZ = np.empty((4 * h, T * B))
        dU = np.zeros_like(Ud)
        dh_next = np.zeros((h, B))
        dc_next = np.zeros((h, B))
        for t in range(T - 1, -1, -1):
            i, f, o, g, tc, h_prev, c_prev, v = cache[t]
            dh = dH[:, t * B : (t + 1) * B] + dh_next
            dc = dc_next
            if v.all():
                dh_new, dc_in, dh_keep, dc_keep = dh, dc, 0.0, 0.0
            else:
                dh_new = np.where(v, dh, 0.0)
                dc_in = np.where(v, dc, 0.0)
                dh_keep = np.where(v, 0.0, dh)
                dc_keep = np.where(v, 0.0, dc)
            dc_new = dc_in + dh_new * o * (1.0 - tc * tc)
            dz = dZ[:, t * B : (t + 1) * B]
            dz[:h] = dc_new * g * i * (1.0 - i)
            dz[h : 2 * h] = dc_new * c_prev * f * (1.0 - f)
            dz[2 * h : 3 * h] = dh_new * tc * o * (1.0 - o)
            dz[3 * h :] = dc_new * i * (1.0 - g * g)
            dc_next = dc_new * f + dc_keep
            if t > 0:
                dU += dz @ h_prev.T
                dh_next = Ud.T @ dz + dh_keep
        return dZ, dU

    return _record((projected, U), out, bw)


# ---------------------------------------------------------------------------
# Differentiation
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Reverse pass from a scalar ``loss``.

    Gradients of every requires-grad leaf are written to ``leaf.grad``
    (previous values are discarded) and also returned keyed by ``id(leaf)``.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None or loss._node not in tape.nodes:
        raise ContractError("loss was not produced on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t._node is None:
                leaves[id(t)] = t
                t.grad = None

    owned: set[int] = set()  # gradient buffers that may be updated in place
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        owned.discard(id(node.output))
        in_grads = node.backward_fn(g)
        for t, tg in zip(node.inputs, in_grads):
            if not t.requires_grad or tg is None:
                continue
            key = id(t)
            prev = grads.get(key)
            # fan-out: contributions add up
            if isinstance(tg, _SliceGrad):
                if prev is None:
                    grads[key] = tg.dense()
                    owned.add(key)
                else:
                    if key not in owned:
                        prev = prev.copy()
                        grads[key] = prev
                        owned.add(key)
                    prev[tg.idx] += tg.g
            elif prev is None:
                grads[key] = tg
            elif key in owned:
                prev += tg
                grads[key] = prev
            else:
                grads[key] = prev + tg
                owned.add(key)

    out = {}
    for key, leaf in leaves.items():
        g = grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g
        out[key] = g
    if wrt is not None:
        for t in wrt:
            if id(t) not in leaves:
                t.grad = np.zeros_like(t.data)
                out[id(t)] = t.grad
    return out


def grad_check(
    function: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-5,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``function`` takes no arguments and rebuilds the scalar output from the
    current values of ``params`` each call. The relative error per coordinate
    is ``|a - n| / max(1e-8, |a| + |n|)``.

    Coordinates where the central-difference stencil straddles a relu kink
    (the function is not differentiable within ``step``) are skipped: the
    numeric value there is meaningless. They are detected by an O(1) jump
    between the two one-sided differences.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    for p in params:
        p.requires_grad = True
    tape = Tape()
    with tape:
        out = function()
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    backward(tape, out, wrt=params)
    analytic = [p.grad.copy() for p in params]
    tape.reset()

    f0 = float(out.data)

    def value() -> float:
        with no_grad():
            v = float(function().data)
        if not np.isfinite(v):
            raise NumericError("function value is not finite")
        return v

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = value()
            flat[i] = orig - step
            fm = value()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            fwd = (fp - f0) / step
            bwd = (f0 - fm) / step
            if _is_kink(fwd, bwd, numeric, step):
                continue
            a = gflat[i]
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def _is_kink(fwd: float, bwd: float, numeric: float, step: float) -> bool:
    # A smooth function has one-sided slopes differing by O(step * f'');
    # a relu kink gives an O(1) jump.
    return abs(fwd - bwd) > 1e3 * step * max(1.0, abs(numeric))
