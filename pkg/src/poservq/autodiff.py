"""Define-by-run reverse-mode autodiff over float64 numpy arrays.

A :class:`Tape` records every operation applied to its :class:`Tensor`
handles. ``tape.backward(loss)`` walks the record in reverse and returns a
:class:`Gradients` mapping. Nothing is reused between steps; build a fresh
tape for every forward pass.

Example:
    >>> tape = Tape()
    >>> x = tape.leaf([1.0, 2.0, 3.0])
    >>> grads = tape.backward(sum_(mul(x, x)))
    >>> grads[x]
    array([2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

VJP = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class AutodiffError(ValueError):
    """Raised for invalid graph usage (non-scalar loss, foreign tensors, ...)."""


class ShapeError(AutodiffError):
    """An operation received inputs whose shapes do not conform."""

    def __init__(self, op: str, message: str, shapes: Sequence[tuple[int, ...]] = ()):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = f" (shapes: {', '.join(str(s) for s in self.shapes)})" if shapes else ""
        super().__init__(f"{op}: {message}{detail}")


@dataclass
class _Node:
    kind: str
    inputs: tuple[int, ...]
    value: np.ndarray
    vjp: VJP | None
    requires_grad: bool
    stop: bool = False
    name: str | None = None


class Tensor:
    """Handle to one recorded node. Values are read-only numpy arrays."""

    __slots__ = ("tape", "index")

    def __init__(self, tape: "Tape", index: int):
        self.tape = tape
        self.index = index

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.tape.nodes[self.index].requires_grad

    @property
    def kind(self) -> str:
        return self.tape.nodes[self.index].kind

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(kind={self.kind!r}, shape={self.shape})"


class Gradients:
    """Gradient lookup produced by :meth:`Tape.backward`.

    Nodes that the loss does not reach report an all-zero gradient.
    """

    def __init__(self, tape: "Tape", slots: list[np.ndarray | None]):
        self._tape = tape
        self._slots = slots

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise AutodiffError("tensor belongs to a different tape")
        g = self._slots[t.index]
        if g is None:
            return np.zeros_like(t.value)
        return g

    def reached(self, t: Tensor) -> bool:
        return self._slots[t.index] is not None


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise AutodiffError("tensor values must be finite (found NaN or Inf)")
    arr.setflags(write=False)
    return arr


@dataclass
class Tape:
    """Ordered record of operations; inputs always precede their outputs."""

    nodes: list[_Node] = field(default_factory=list)

    def leaf(self, value, name: str | None = None) -> Tensor:
        """Trainable input. Values are copied and checked for finiteness."""
        return self._push(_Node("leaf", (), _as_array(value), None, True, name=name))

    def constant(self, value, name: str | None = None) -> Tensor:
        """Input that never receives a gradient."""
        return self._push(_Node("constant", (), _as_array(value), None, False, name=name))

    def _push(self, node: _Node) -> Tensor:
        self.nodes.append(node)
        return Tensor(self, len(self.nodes) - 1)

    def record(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray, vjp: VJP) -> Tensor:
        for t in inputs:
            if t.tape is not self:
                raise AutodiffError(f"{kind}: input tensor belongs to a different tape")
        value = np.asarray(value, dtype=np.float64)
        value.setflags(write=False)
        needs = any(t.requires_grad for t in inputs)
        return self._push(_Node(kind, tuple(t.index for t in inputs), value, vjp, needs))

    def backward(self, loss: Tensor) -> Gradients:
        if loss.tape is not self:
            raise AutodiffError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        slots: list[np.ndarray | None] = [None] * len(self.nodes)
        slots[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = slots[i]
            node = self.nodes[i]
            if g is None or node.vjp is None or node.stop or not node.requires_grad:
                continue
            needs = [self.nodes[j].requires_grad for j in node.inputs]
            for j, gj in zip(node.inputs, node.vjp(g, needs)):
                if gj is None or not self.nodes[j].requires_grad:
                    continue
                slots[j] = gj if slots[j] is None else slots[j] + gj
        return Gradients(self, slots)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, "operands must have identical shapes", [a.shape, b.shape])


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)
    return a.tape.record("add", [a, b], a.value + b.value, lambda g, n: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)
    return a.tape.record("sub", [a, b], a.value - b.value, lambda g, n: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record("mul", [a, b], av * bv, lambda g, n: (g * bv, g * av))


def scale(a: Tensor, factor: float) -> Tensor:
    return a.tape.record("scale", [a], a.value * factor, lambda g, n: (g * factor,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(m, k) @ (k, n)`` or batched ``(B, m, k) @ (k, n)``."""
    av, bv = a.value, b.value
    if bv.ndim != 2 or av.ndim not in (2, 3) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", "expected (m,k)@(k,n) or (B,m,k)@(k,n)", [av.shape, bv.shape])

    def vjp(g, needs):
        ga = g @ bv.T if needs[0] else None
        gb = None
        if needs[1]:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return a.tape.record("matmul", [a, b], av @ bv, vjp)


def conv1d_output_length(length: int, width: int, stride: int = 1, pad: int = 0) -> int:
    return (length + 2 * pad - width) // stride + 1


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, *, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding.

    Args:
        x: input, ``(C_in, T)`` or ``(B, C_in, T)``.
        w: kernel, ``(C_out, C_in, W)``.
        b: optional bias, ``(C_out,)``.
        stride: step between windows, >= 1.
        pad: zeros added at both ends of the time axis.
    """
    xv, wv = x.value, w.value
    if stride < 1 or pad < 0:
        raise ShapeError("conv1d", f"stride must be >= 1 and pad >= 0 (got {stride}, {pad})")
    if wv.ndim != 3 or xv.ndim not in (2, 3):
        raise ShapeError("conv1d", "expected input (C_in,T)/(B,C_in,T) and kernel (C_out,C_in,W)",
                         [xv.shape, wv.shape])
    unbatched = xv.ndim == 2
    xb = xv[None] if unbatched else xv
    bsz, c_in, t_in = xb.shape
    c_out, k_in, width = wv.shape
    if k_in != c_in:
        raise ShapeError("conv1d", f"input channels {c_in} != kernel input channels {k_in}",
                         [xv.shape, wv.shape])
    if b is not None and b.shape != (c_out,):
        raise ShapeError("conv1d", f"bias must have shape ({c_out},)", [b.shape])
    t_out = conv1d_output_length(t_in, width, stride, pad)
    if t_out < 1:
        raise ShapeError("conv1d", f"time length {t_in} too short for width {width}, pad {pad}",
                         [xv.shape, wv.shape])

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad))) if pad else xb
    # cols[b, t, c, k] = xp[b, c, t*stride + k]
    windows = np.lib.stride_tricks.sliding_window_view(xp, width, axis=2)[:, :, ::stride][:, :, :t_out]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 1, 3)).reshape(bsz * t_out, c_in * width)
    wmat = wv.reshape(c_out, c_in * width)
    out = (cols @ wmat.T).reshape(bsz, t_out, c_out)
    if b is not None:
        out = out + b.value
    out = out.transpose(0, 2, 1)
    if unbatched:
        out = out[0]

    def vjp(g, needs):
        gb3 = (g[None] if unbatched else g).transpose(0, 2, 1).reshape(bsz * t_out, c_out)
        gx = gw = gbias = None
        if needs[0]:
            dcols = (gb3 @ wmat).reshape(bsz, t_out, c_in, width)
            dxp = np.zeros_like(xp)
            span = stride * (t_out - 1) + 1
            for k in range(width):
                dxp[:, :, k : k + span : stride] += dcols[:, :, :, k].transpose(0, 2, 1)
            gx = dxp[:, :, pad : pad + t_in] if pad else dxp
            if unbatched:
                gx = gx[0]
        if needs[1]:
            gw = (gb3.T @ cols).reshape(c_out, c_in, width)
        if b is not None and needs[2]:
            gbias = gb3.sum(axis=0)
        return (gx, gw, gbias) if b is not None else (gx, gw)

    inputs = [x, w] if b is None else [x, w, b]
    return x.tape.record("conv1d", inputs, out, vjp)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return x.tape.record("relu", [x], x.value * mask, lambda g, n: (g * mask,))


def upsample1d(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour repeat along the last (time) axis."""
    if factor < 1:
        raise ShapeError("upsample1d", f"factor must be >= 1, got {factor}")
    shape = x.shape

    def vjp(g, n):
        return (g.reshape(*shape, factor).sum(axis=-1),)

    return x.tape.record("upsample1d", [x], np.repeat(x.value, factor, axis=-1), vjp)


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    return x.tape.record("sum", [x], np.sum(x.value), lambda g, n: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, size = x.shape, x.value.size
    return x.tape.record("mean", [x], np.mean(x.value), lambda g, n: (np.full(shape, float(g) / size),))


def sqnorm(x: Tensor) -> Tensor:
    """Squared L2 norm of all elements, a scalar."""
    xv = x.value
    return x.tape.record("l2norm-squared", [x], np.sum(xv * xv), lambda g, n: (2.0 * float(g) * xv,))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber: ``0.5 x^2`` inside ``|x| <= delta``, linear outside."""
    xv = x.value
    ax = np.abs(xv)
    val = np.where(ax <= delta, 0.5 * xv * xv, delta * (ax - 0.5 * delta))
    return x.tape.record("huber", [x], val, lambda g, n: (g * np.clip(xv, -delta, delta),))


def abs_(x: Tensor) -> Tensor:
    xv = x.value
    return x.tape.record("abs", [x], np.abs(xv), lambda g, n: (g * np.sign(xv),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.value.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation", [x.shape])
    inverse = tuple(np.argsort(axes))
    return x.tape.record("transpose", [x], x.value.transpose(axes), lambda g, n: (g.transpose(inverse),))


def narrow(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Slice ``[start, stop)`` along ``axis``."""
    shape = x.shape
    axis = axis % len(shape)
    if not 0 <= start < stop <= shape[axis]:
        raise ShapeError("narrow", f"range [{start},{stop}) outside axis {axis}", [shape])
    index = [slice(None)] * len(shape)
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g, n):
        out = np.zeros(shape)
        out[index] = g
        return (out,)

    return x.tape.record("narrow", [x], x.value[index], vjp)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; blocks every gradient to ``x`` on the way back."""
    out = x.tape.record("stop_gradient", [x], x.value, lambda g, n: (None,))
    node = x.tape.nodes[out.index]
    node.stop = True
    node.requires_grad = False
    return out


_OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "mul-elementwise": mul,
    "scale": scale,
    "matmul": matmul,
    "conv1d": conv1d,
    "relu": relu,
    "nearest-upsample-1d": upsample1d,
    "sum": sum_,
    "mean": mean,
    "l2norm-squared": sqnorm,
    "huber": huber,
    "abs": abs_,
    "transpose": transpose,
    "narrow": narrow,
    "stop-gradient": stop_gradient,
}


def tensor_op(kind: str, *inputs: Tensor, **params) -> Tensor:
    """Dispatch an operation by name, e.g. ``tensor_op("conv1d", x, w, stride=2)``."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise AutodiffError(f"unknown operation {kind!r}") from None
    return fn(*inputs, **params)
