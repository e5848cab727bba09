"""Dense 4-D tensor and the reverse-mode tape.

Every value in the package is a ``Tensor``: a (N, C, H, W) row-major
array of 32-bit reals (64-bit in verification mode), an optional gradient
buffer of the same shape, and a flag marking optimizer-owned leaves.
Scalars are (1, 1, 1, 1) tensors; per-channel vectors such as biases and
norm affine parameters are (1, C, 1, 1).

Forward primitives optionally record onto a ``Tape``. ``backward`` walks
the tape once in reverse, accumulating adjoints into ``.grad``. Calling
``backward`` twice without zeroing gradients accumulates; that is the
documented behavior (gradient accumulation uses it), not an error.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, TapeError

FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """4-D (N, C, H, W) value with optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.ndim != 4:
            raise ShapeError(
                f"tensor must be 4-D (N, C, H, W), got {arr.ndim}-D with shape {arr.shape}"
            )
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # fast path for op outputs: arr is a fresh 4-D float array we built
        t = object.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def scalar(value: float, dtype=np.float32) -> Tensor:
    """Scalar as a (1, 1, 1, 1) tensor."""
    return Tensor(np.full((1, 1, 1, 1), value, dtype=dtype))


class TapeNode:
    __slots__ = ("op", "inputs", "output", "bwd")

    def __init__(self, op, inputs, output, bwd):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.bwd = bwd


class Tape:
    """Ordered record of forward primitives for one reverse pass.

    Nodes are appended in execution order, so every node's inputs were
    produced by earlier nodes or are leaves; the reverse walk therefore
    visits each node exactly once. ``backward`` freezes the tape.
    """

    __slots__ = ("nodes", "frozen")

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.frozen = False

    def record(self, op: str, inputs: tuple, output: Tensor, bwd) -> None:
        if self.frozen:
            raise TapeError(f"cannot record {op!r}: tape is frozen after backward")
        self.nodes.append(TapeNode(op, inputs, output, bwd))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(tape: Tape, loss: Tensor) -> None:
    """Reverse pass: fill ``.grad`` of every tensor reachable from ``loss``.

    ``loss`` must be a scalar produced on this tape. Adjoint rules are
    supplied by each node's recorded closure. Existing gradients are
    accumulated into, not overwritten.
    """
    if loss.data.shape != (1, 1, 1, 1):
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not any(node.output is loss for node in tape.nodes):
        raise TapeError("loss tensor was not produced on this tape")
    tape.frozen = True
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad = loss.grad + np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        grads = node.bwd(g)
        for tensor, gi in zip(node.inputs, grads):
            if gi is None:
                continue
            if tensor.grad is None:
                tensor.grad = gi.copy()
            else:
                tensor.grad = tensor.grad + gi
