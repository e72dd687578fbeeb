"""Dense float64 tensor with reverse-mode gradient propagation.

Every differentiable operation builds an output ``Tensor`` that remembers its
parents and a closure pushing the output gradient back into them. Calling
``backward()`` on a scalar walks the graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import contextvars
import struct
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"MTN1"

_grad_enabled = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- construction -----------------------------------------------------
    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap an op result; attach graph edges only if some parent needs grad."""
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape), requires_grad=requires_grad)

    # -- properties -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- autograd ---------------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar tensor")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        # Interior gradients live in a side table so leaves alone keep .grad.
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node._backward(g, grads)  # type: ignore[misc]

    # -- operator sugar (implemented in ops) ---------------------------------
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

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.index(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def send(grads: dict[int, np.ndarray], parent: Tensor, g: np.ndarray) -> None:
    """Accumulate ``g`` as an upstream gradient for ``parent`` during backward."""
    if not parent.requires_grad:
        return
    key = id(parent)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class ParamStore:
    """Ordered mapping from dot-separated parameter path to trainable Tensor."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: dict[str, Tensor] = {}
        for path, t in items:
            self.add(path, t)

    def add(self, path: str, value) -> Tensor:
        if path in self._params:
            raise ValueError(f"duplicate parameter path {path!r}")
        t = value if isinstance(value, Tensor) else Tensor(value)
        t.requires_grad = True
        t.name = path
        self._params[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._params[path]

    def __contains__(self, path: str) -> bool:
        return path in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self) -> list[str]:
        return list(self._params)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self, prefix)

    def num_elements(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}


class ParamScope:
    """Prefix view onto a ParamStore: ``scope["weight"]`` reads ``prefix.weight``."""

    def __init__(self, store: ParamStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def _full(self, key: str) -> str:
        return f"{self.prefix}.{key}" if self.prefix else key

    def __getitem__(self, key: str) -> Tensor:
        return self.store[self._full(key)]

    def __contains__(self, key: str) -> bool:
        return self._full(key) in self.store

    def add(self, key: str, value) -> Tensor:
        return self.store.add(self._full(key), value)

    def scope(self, prefix: str) -> "ParamScope":
        return ParamScope(self.store, self._full(prefix))


# -- MTN1 single-tensor wire format -----------------------------------------

def encode_tensor(values: np.ndarray) -> bytes:
    """``MTN1`` | rank u32 | dims u32... | float64 values, all little-endian."""
    arr = np.asarray(values, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


class TensorFormatError(ValueError):
    """Malformed or truncated MTN1 data; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte offset {offset}")
        self.offset = offset


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns (array, next offset)."""
    if len(buf) < offset + 8:
        raise TensorFormatError("truncated header", offset)
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic", offset)
    (rank,) = struct.unpack_from("<I", buf, offset + 4)
    pos = offset + 8
    if len(buf) < pos + 4 * rank:
        raise TensorFormatError("truncated dims", pos)
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    end = pos + 8 * count
    if len(buf) < end:
        raise TensorFormatError(f"truncated values (need {end - pos} bytes)", len(buf))
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return arr.reshape(dims), end


def save_tensor(path, values) -> None:
    data = values.data if isinstance(values, Tensor) else values
    with open(path, "wb") as fh:
        fh.write(encode_tensor(np.asarray(data)))


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        arr, _ = decode_tensor(fh.read())
    return Tensor(arr)
