"""Dense tensors with a reverse-mode gradient tape.

Every differentiable op records a :class:`Node` carrying a monotonically
increasing sequence number. :class:`GradTape` gathers the nodes reachable from
a scalar output and replays their backward rules in reverse recording order,
so gradient accumulation happens in a fixed order and is reproducible.
"""

from __future__ import annotations

import itertools
import threading
import weakref
from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int, Sequence]

_DEFAULT_DTYPE = np.float32
_seq = itertools.count()
_grad_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for a primitive."""

    def __init__(self, primitive: str, *shapes: Tuple[int, ...], detail: str = ""):
        shape_txt = " and ".join(str(tuple(s)) for s in shapes)
        msg = f"{primitive}: incompatible shapes {shape_txt}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.primitive = primitive
        self.shapes = shapes


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class DetachedError(RuntimeError):
    """Raised when backward is called on a tensor that is not on any tape."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


class no_grad:
    """Context manager that disables tape recording on this thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _grad_state.enabled = False
        return self

    def __exit__(self, *exc):
        _grad_state.enabled = self._prev
        return False


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: produced non-finite values")
    return arr


class Node:
    """One recorded operation: inputs, output and the rule mapping output grad to input grads."""

    __slots__ = ("seq", "name", "inputs", "_output", "backward_fn")

    def __init__(self, name: str, inputs: Tuple["Tensor", ...], backward_fn: Callable):
        self.seq = next(_seq)
        self.name = name
        self.inputs = inputs
        self._output = None
        self.backward_fn = backward_fn

    # weak, so tensor -> node -> tensor is not a cycle and graphs free as soon as the loss goes
    @property
    def output(self) -> Optional["Tensor"]:
        return None if self._output is None else self._output()

    @output.setter
    def output(self, t: "Tensor") -> None:
        self._output = weakref.ref(t)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node", "name", "__weakref__")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None, name: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autodiff entry ---------------------------------------------------
    def backward(self) -> None:
        backward(self)

    # -- operator sugar (implemented in ops) ------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            return ops.div(self, other)
        return ops.mul(self, 1.0 / other)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)

    def relu(self):
        from . import ops
        return ops.relu(self)

    def exp(self):
        from . import ops
        return ops.exp(self)

    def log(self):
        from . import ops
        return ops.log(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]) -> Tensor:
    """Wrap a forward result, registering it on the tape when any input needs grad.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input, in input order.
    """
    check_finite(out_data, name)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        node = Node(name, tuple(inputs), backward_fn)
        node.output = out
        out._node = node
    return out


class GradTape:
    """Ordered record of the operations leading to an output tensor."""

    def __init__(self, entries: Sequence[Node]):
        self.entries = list(entries)

    @classmethod
    def from_output(cls, out: Tensor) -> "GradTape":
        seen = set()
        stack = [out._node] if out._node is not None else []
        nodes = []
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for t in node.inputs:
                if t._node is not None and id(t._node) not in seen:
                    stack.append(t._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.entries)

    def op_names(self):
        return [n.name for n in self.entries]

    def replay(self, out: Tensor, seed_grad: np.ndarray) -> None:
        grads = {id(out): seed_grad}
        for node in reversed(self.entries):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            node.output.grad = g_out
            in_grads = node.backward_fn(g_out)
            for t, g in zip(node.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if g.shape != t.shape:
                    raise ShapeError(f"{node.name}.backward", g.shape, t.shape)
                check_finite(g, f"{node.name}.backward")
                if t._node is None:
                    # leaf: accumulate across backward calls
                    if t.grad is None:
                        t.grad = g.astype(t.dtype, copy=True)
                    else:
                        t.grad = t.grad + g
                else:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = g if prev is None else prev + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every tensor feeding ``loss``; d(loss)/d(loss) = 1."""
    if loss.size != 1:
        raise ShapeError("backward", loss.shape, (), detail="loss must be a scalar")
    if not loss.requires_grad or loss._node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return
        raise DetachedError("backward: loss is detached (no recorded operations require grad)")
    tape = GradTape.from_output(loss)
    tape.replay(loss, np.ones_like(loss.data))
