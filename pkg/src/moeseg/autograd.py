"""Dense float64 tensors with reverse-mode automatic differentiation.

Every model component in this package is built from the operations defined
here. A :class:`Tensor` wraps a row-major float64 numpy array; operations on
tensors that require gradients record a computation graph (parent links plus
a backward closure per node), and :meth:`Tensor.backward` walks that graph
once in reverse topological order, accumulating gradients into the leaf
tensors that asked for them.

Design constraints honoured throughout:

- float64 only, so finite-difference checks are meaningful,
- broadcasting limited to what the models use (matrix plus row vector),
- deterministic kernels: identical inputs give bit-identical outputs,
- after any completed operation all stored values are finite (checked while
  ``FINITE_CHECKS`` is on, which is the default).
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

FINITE_CHECKS = True

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# A backward closure maps the output gradient to (parent, parent_grad) pairs.
BackwardFn = Callable[[np.ndarray], list[tuple["Tensor", np.ndarray]]]


def set_finite_checks(enabled: bool) -> None:
    global FINITE_CHECKS
    FINITE_CHECKS = bool(enabled)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if FINITE_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A dense float64 value, optionally tracked for gradients.

    ``grad`` is populated (as a numpy array of the same shape) by
    :meth:`backward` on leaf tensors with ``requires_grad=True``. Gradients
    accumulate across repeated backward calls until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _check_finite(arr, "tensor construction")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Optional[BackwardFn] = None

    # -- construction helpers ------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.ones(shape, dtype=np.float64), requires_grad=requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _make(self, data: np.ndarray, parents: Sequence["Tensor"], backward_fn: BackwardFn, op: str) -> "Tensor":
        _check_finite(data, op)
        out = Tensor.__new__(Tensor)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            out = []
            if self.requires_grad:
                out.append((self, _unbroadcast(g, self.shape)))
            if other.requires_grad:
                out.append((other, _unbroadcast(g, other.shape)))
            return out

        return self._make(self.data + other.data, (self, other), bwd, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bwd(g):
            return [(self, -g)]

        return self._make(-self.data, (self,), bwd, "neg")

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            out = []
            if self.requires_grad:
                out.append((self, _unbroadcast(g, self.shape)))
            if other.requires_grad:
                out.append((other, _unbroadcast(-g, other.shape)))
            return out

        return self._make(self.data - other.data, (self, other), bwd, "sub")

    def __rsub__(self, other) -> "Tensor":
        return Tensor(other).__sub__(self)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            out = []
            if self.requires_grad:
                out.append((self, _unbroadcast(g * other.data, self.shape)))
            if other.requires_grad:
                out.append((other, _unbroadcast(g * self.data, other.shape)))
            return out

        return self._make(self.data * other.data, (self, other), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)

        def bwd(g):
            return [
                (self, _unbroadcast(g / other.data, self.shape)),
                (other, _unbroadcast(-g * self.data / (other.data * other.data), other.shape)),
            ]

        return self._make(self.data / other.data, (self, other), bwd, "div")

    def __pow__(self, exponent) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise ContractError("only constant exponents are supported")
        n = float(exponent)

        def bwd(g):
            return [(self, g * n * np.power(self.data, n - 1.0))]

        return self._make(np.power(self.data, n), (self,), bwd, "pow")

    # -- linear algebra --------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError(
                f"matmul needs rank-2 operands, got shapes {self.shape} and {other.shape}"
            )
        if self.shape[1] != other.shape[0]:
            raise DimensionError(
                f"matmul inner dimensions disagree: {self.shape} x {other.shape}"
            )

        def bwd(g):
            out = []
            if self.requires_grad:
                out.append((self, g @ other.data.T))
            if other.requires_grad:
                out.append((other, self.data.T @ g))
            return out

        return self._make(self.data @ other.data, (self, other), bwd, "matmul")

    __matmul__ = matmul

    def transpose(self) -> "Tensor":
        if self.data.ndim != 2:
            raise DimensionError(f"transpose needs a rank-2 tensor, got shape {self.shape}")

        def bwd(g):
            return [(self, np.ascontiguousarray(g.T))]

        return self._make(self.data.T, (self,), bwd, "transpose")

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])

        def bwd(g):
            return [(self, g.reshape(self.shape))]

        return self._make(self.data.reshape(shape), (self,), bwd, "reshape")

    # -- reductions ------------------------------------------------------------

    def sum(self) -> "Tensor":
        def bwd(g):
            return [(self, np.full_like(self.data, float(g)))]

        return self._make(np.asarray(self.data.sum()), (self,), bwd, "sum")

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        if axis is None:
            count = self.data.size

            def bwd(g):
                return [(self, np.full_like(self.data, float(g) / count))]

            return self._make(np.asarray(self.data.mean()), (self,), bwd, "mean")
        if axis != 0 or self.data.ndim != 2:
            raise DimensionError("axis-wise mean is only supported over rows of a matrix")
        rows = self.shape[0]

        def bwd(g):
            return [(self, np.broadcast_to(g / rows, self.shape).copy())]

        return self._make(self.data.mean(axis=0), (self,), bwd, "mean")

    def logsumexp(self) -> "Tensor":
        """log(sum(exp(x))) over a vector, stabilised by max subtraction."""
        if self.data.ndim != 1 or self.data.size < 1:
            raise DimensionError(f"logsumexp needs a non-empty vector, got shape {self.shape}")
        peak = self.data.max()
        shifted = np.exp(self.data - peak)
        total = shifted.sum()

        def bwd(g):
            return [(self, float(g) * shifted / total)]

        return self._make(np.asarray(peak + np.log(total)), (self,), bwd, "logsumexp")

    # -- nonlinearities ---------------------------------------------------------

    def sigmoid(self) -> "Tensor":
        x = self.data
        out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

        def bwd(g):
            return [(self, g * out * (1.0 - out))]

        return self._make(out, (self,), bwd, "sigmoid")

    def gelu(self) -> "Tensor":
        x = self.data
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = x * cdf

        def bwd(g):
            pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
            return [(self, g * (cdf + x * pdf))]

        return self._make(out, (self,), bwd, "gelu")

    def softmax(self, axis: int = -1) -> "Tensor":
        """Softmax along `axis`, stabilised by subtracting the running max."""
        if self.data.ndim == 0 or self.data.shape[axis] < 1:
            raise DimensionError(f"softmax needs a non-empty axis, got shape {self.shape}")
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        expd = np.exp(shifted)
        out = expd / expd.sum(axis=axis, keepdims=True)

        def bwd(g):
            inner = (g * out).sum(axis=axis, keepdims=True)
            return [(self, out * (g - inner))]

        return self._make(out, (self,), bwd, "softmax")

    def layernorm(self, gain: "Tensor", bias: "Tensor", eps: float = 1e-5) -> "Tensor":
        """Row-wise normalisation of a matrix to mean 0 / variance 1, then affine.

        Variance is the biased estimator over the row; `eps` sits inside the
        square root so constant rows normalise to exact zeros.
        """
        if self.data.ndim != 2:
            raise DimensionError(f"layernorm needs a matrix, got shape {self.shape}")
        width = self.shape[1]
        if width < 2:
            raise DimensionError(f"layernorm needs at least 2 columns, got {width}")
        if gain.shape != (width,) or bias.shape != (width,):
            raise DimensionError(
                f"layernorm gain/bias must have shape ({width},), got {gain.shape} and {bias.shape}"
            )
        mu = self.data.mean(axis=1, keepdims=True)
        centred = self.data - mu
        var = (centred * centred).mean(axis=1, keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        normed = centred * inv_std
        out = normed * gain.data + bias.data

        def bwd(g):
            grads = []
            if self.requires_grad:
                g_norm = g * gain.data
                g_mu = g_norm.mean(axis=1, keepdims=True)
                g_proj = (g_norm * normed).mean(axis=1, keepdims=True)
                grads.append((self, (g_norm - g_mu - normed * g_proj) * inv_std))
            if gain.requires_grad:
                grads.append((gain, (g * normed).sum(axis=0)))
            if bias.requires_grad:
                grads.append((bias, g.sum(axis=0)))
            return grads

        return self._make(out, (self, gain, bias), bwd, "layernorm")

    # -- shape-changing model ops -------------------------------------------------

    def upsample_nearest3(self, factor: int) -> "Tensor":
        """Nearest-neighbour upsampling of a cubic grid by an integer factor."""
        if self.data.ndim != 3:
            raise DimensionError(f"upsample_nearest3 needs a rank-3 tensor, got {self.shape}")
        if factor < 1:
            raise DimensionError(f"upsample factor must be positive, got {factor}")
        out = self.data.repeat(factor, axis=0).repeat(factor, axis=1).repeat(factor, axis=2)
        g0, g1, g2 = self.shape

        def bwd(g):
            blocks = g.reshape(g0, factor, g1, factor, g2, factor)
            return [(self, blocks.sum(axis=(1, 3, 5)))]

        return self._make(out, (self,), bwd, "upsample_nearest3")

    # -- backward sweep -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar loss.

        Builds the reverse topological order of recorded nodes (every node's
        inputs precede it; each node is visited exactly once) and pushes
        gradients back to every reachable leaf with ``requires_grad=True``.
        Leaves keep their accumulated ``grad``; intermediate gradients live
        only for the duration of the sweep, so repeated calls accumulate
        cleanly into the leaves.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")

        order = _topological_order(self)
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            grad = flowing.pop(id(node), None)
            if grad is None:
                continue
            if node._backward_fn is None:
                node._accumulate(grad)
                continue
            for parent, parent_grad in node._backward_fn(grad):
                if not parent.requires_grad:
                    continue
                key = id(parent)
                if key in flowing:
                    flowing[key] = flowing[key] + parent_grad
                else:
                    flowing[key] = parent_grad

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += grad


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the recorded graph reachable from `root`."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy computed stably from logits.

    Uses the max(z, 0) - z*t + log1p(exp(-|z|)) identity, so large positive
    or negative logits never overflow.
    """
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(f"bce shapes disagree: logits {logits.shape} vs targets {t.shape}")
    z = logits.data
    per_voxel = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    count = z.size

    def bwd(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return [(logits, float(g) * (sig - t) / count)]

    return logits._make(np.asarray(per_voxel.mean()), (logits,), bwd, "bce_with_logits")


def stable_softmax(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Plain-numpy softmax used on detached score vectors."""
    shifted = values - values.max(axis=axis, keepdims=True)
    expd = np.exp(shifted)
    return expd / expd.sum(axis=axis, keepdims=True)
