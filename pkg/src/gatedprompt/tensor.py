"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation that participates in a gradient records its parents and a
backward closure on the output tensor; ``backward`` replays the recorded
graph once, in reverse topological order. Outputs whose inputs are all
detached stay detached, so frozen subgraphs cost no tape memory.

All buffers are 64-bit floats and every tensor is checked for finiteness at
creation: a NaN or Inf anywhere raises :class:`NumericError` instead of
propagating silently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BoundsError,
    DeterminismError,
    DimensionError,
    DomainError,
    NumericError,
    StateError,
)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A row-major float64 buffer with optional gradient tracking.

    Tensors are immutable after creation except for gradient accumulation;
    optimizers produce fresh tensors rather than updating in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _check=True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains non-finite values (NaN or Inf)")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the module-level functions do the real work.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _make(data, parents, backward_fn, check=True) -> Tensor:
    """Wrap an op result, keeping the graph only if a parent needs gradients.

    Layout-only ops pass ``check=False``: they cannot create non-finite
    values, so re-scanning their outputs would be wasted work.
    """
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents),
                      _backward=backward_fn, _check=check)
    return Tensor(data, _check=check)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _reduce_to_shape(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Undo suffix broadcasting by summing the extra leading axes."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    return grad


def _check_suffix(a_shape, b_shape, op):
    if b_shape != a_shape[len(a_shape) - len(b_shape):]:
        raise DimensionError(f"{op}: shape {b_shape} does not align with trailing axes of {a_shape}")


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum. Supports equal shapes, a trailing-axes operand
    (bias or positional-embedding style), a scalar tensor, or a constant."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a, b = b, a
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data + c, (a,), lambda g: (g,))
    if a.data.shape == b.data.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.size == 1:
        return _make(a.data + b.data.reshape(()), (a, b),
                     lambda g: (g, g.sum().reshape(b.data.shape) if b.requires_grad else None))
    if a.data.size == 1:
        return _make(a.data.reshape(()) + b.data, (a, b),
                     lambda g: (g.sum().reshape(a.data.shape) if a.requires_grad else None, g))
    if len(b.data.shape) < len(a.data.shape):
        _check_suffix(a.data.shape, b.data.shape, "add")
        return _make(a.data + b.data, (a, b),
                     lambda g: (g, _reduce_to_shape(g, b.data.shape) if b.requires_grad else None))
    if len(a.data.shape) < len(b.data.shape):
        _check_suffix(b.data.shape, a.data.shape, "add")
        return _make(a.data + b.data, (a, b),
                     lambda g: (_reduce_to_shape(g, a.data.shape) if a.requires_grad else None, g))
    raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor):
        return add(a, mul(b, -1.0))
    return add(a, -float(b))


def mul(a, b) -> Tensor:
    """Elementwise product. Supports equal shapes, a scalar tensor on either
    side, or a plain Python constant."""
    if not isinstance(a, Tensor) and isinstance(b, Tensor):
        a, b = b, a
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = float(b)
        return _make(a.data * c, (a,), lambda g: (g * c,))
    if a.data.shape == b.data.shape:
        return _make(a.data * b.data, (a, b),
                     lambda g: (g * b.data if a.requires_grad else None,
                                g * a.data if b.requires_grad else None))
    if b.data.size == 1:
        bv = b.data.reshape(())
        return _make(a.data * bv, (a, b),
                     lambda g: (g * bv if a.requires_grad else None,
                                (g * a.data).sum().reshape(b.data.shape)
                                if b.requires_grad else None))
    if a.data.size == 1:
        av = a.data.reshape(())
        return _make(av * b.data, (a, b),
                     lambda g: ((g * b.data).sum().reshape(a.data.shape)
                                if a.requires_grad else None,
                                g * av if b.requires_grad else None))
    raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")


def div(a: Tensor, b) -> Tensor:
    """Divide by a positive scalar (tensor or constant). Only the scalar
    divisor form exists because that is all the model needs."""
    a = _as_tensor(a)
    if isinstance(b, Tensor):
        if b.data.size != 1:
            raise DimensionError(f"div: divisor must be scalar, got shape {b.shape}")
        bv = b.data.reshape(())
        if bv == 0.0:
            raise DomainError("div: divisor is zero")

        def bw(g):
            da = g / bv if a.requires_grad else None
            db = ((-(g * a.data).sum() / (bv * bv)).reshape(b.data.shape)
                  if b.requires_grad else None)
            return (da, db)

        return _make(a.data / bv, (a, b), bw)
    c = float(b)
    if c == 0.0:
        raise DomainError("div: divisor is zero")
    return _make(a.data / c, (a,), lambda g: (g / c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two tensors of equal rank >= 2 with identical
    leading (batch) axes; gradients are dA = dC Bᵀ and dB = Aᵀ dC."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        raise DimensionError(f"matmul: leading axes differ between {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions disagree between {a.shape} and {b.shape}")

    def bw(g):
        # Skip the half of the product rule that feeds a frozen operand.
        da = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        db = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return (da, db)

    return _make(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# Nonlinearities and normalization
# ---------------------------------------------------------------------------

def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.where(x.data >= 0,
                   1.0 / (1.0 + np.exp(-np.abs(x.data))),
                   np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))))

    def bw(g):
        return (g * out * (1.0 - out),)

    return _make(out, (x,), bw)


def exp(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log: input must be strictly positive")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def gelu(x: Tensor) -> Tensor:
    """Gaussian-error-linear unit in the standard tanh form,
    0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).

    Written with in-place updates on owned buffers; the elementwise chain is
    memory-bound at training sizes.
    """
    x = _as_tensor(x)
    xd = x.data
    inner = np.empty_like(xd)
    np.multiply(xd, xd, out=inner)
    inner *= _GELU_A
    inner += 1.0
    inner *= xd
    inner *= _GELU_C
    np.tanh(inner, out=inner)
    out = inner + 1.0
    out = np.asarray(out)
    out *= xd
    out *= 0.5

    def bw(g):
        du = np.empty_like(xd)
        np.multiply(xd, xd, out=du)
        du *= 3.0 * _GELU_A
        du += 1.0
        du *= _GELU_C
        du *= xd
        sech2 = np.empty_like(xd)
        np.multiply(inner, inner, out=sech2)
        np.subtract(1.0, sech2, out=sech2)
        du *= sech2
        du += inner
        du += 1.0
        du *= 0.5
        du *= g
        return (du,)

    return _make(out, (x,), bw)


def _softmax_last_axis(x: Tensor) -> Tensor:
    """Row-wise softmax over the last axis with max-subtraction stabilization."""
    out = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=-1, keepdims=True)

    def bw(g):
        dx = g - (g * out).sum(axis=-1, keepdims=True)
        dx *= out
        return (dx,)

    return _make(out, (x,), bw)


def softmax_temp(logits: Tensor, tau) -> Tensor:
    """Row-wise softmax of ``logits / tau`` over the last axis.

    ``tau`` may be a positive constant or a positive scalar tensor (the
    learnable-temperature path); gradients flow through both arguments.
    """
    logits = _as_tensor(logits)
    if isinstance(tau, Tensor):
        if tau.data.size != 1:
            raise DimensionError(f"softmax_temp: tau must be scalar, got shape {tau.shape}")
        if float(tau.data.reshape(())) <= 0.0:
            raise DomainError(f"softmax_temp: tau must be positive, got {float(tau.data.reshape(()))}")
    else:
        if float(tau) <= 0.0:
            raise DomainError(f"softmax_temp: tau must be positive, got {float(tau)}")
    return _softmax_last_axis(div(logits, tau))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-token normalization over the last axis followed by an affine map,
    with the full gradient through mean and variance."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match feature dim {d}")
    xhat = x.data - x.data.mean(axis=-1, keepdims=True)
    var = np.einsum("...d,...d->...", xhat, xhat)[..., None] / d
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std
    out = xhat * gamma.data
    out += beta.data

    def bw(g):
        dx = dgamma = dbeta = None
        if x.requires_grad:
            dy = g * gamma.data
            dx = dy - dy.mean(axis=-1, keepdims=True)
            dx -= xhat * (dy * xhat).mean(axis=-1, keepdims=True)
            dx *= inv_std
        axes = tuple(range(x.data.ndim - 1))
        if gamma.requires_grad:
            dgamma = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            dbeta = g.sum(axis=axes)
        return (dx, dgamma, dbeta)

    return _make(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise
    softmax of ``logits`` [B x C]."""
    logits = _as_tensor(logits)
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy: logits must be 2-D, got {logits.shape}")
    y = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if y.shape != (n,):
        raise DimensionError(f"cross_entropy: labels shape {y.shape} does not match batch {n}")
    if np.any(y < 0) or np.any(y >= c):
        raise DomainError(f"cross_entropy: labels must lie in [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    loss = -logp[np.arange(n), y].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), y] -= 1.0
        return (g.reshape(()) * p / n,)

    return _make(loss, (logits,), bw)


def tensor_sum(x: Tensor) -> Tensor:
    """Full reduction to a scalar."""
    x = _as_tensor(x)
    return _make(x.data.sum(), (x,), lambda g: (np.broadcast_to(g.reshape(()), x.data.shape).copy(),))


def binary_threshold_ste(x: Tensor, threshold: float = 0.5) -> Tensor:
    """Hard 0/1 threshold with a straight-through gradient of 1."""
    x = _as_tensor(x)
    out = (x.data > threshold).astype(np.float64)
    return _make(out, (x,), lambda g: (g,))


# ---------------------------------------------------------------------------
# Shape and layout primitives
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), check=False)


def swapaxes(x: Tensor, ax1: int, ax2: int) -> Tensor:
    x = _as_tensor(x)
    return _make(np.swapaxes(x.data, ax1, ax2), (x,),
                 lambda g: (np.swapaxes(g, ax1, ax2),), check=False)


def broadcast_batch(x: Tensor, batch: int) -> Tensor:
    """Repeat a tensor along a new leading batch axis; gradient sums it back."""
    x = _as_tensor(x)
    out = np.broadcast_to(x.data, (int(batch),) + x.data.shape)
    return _make(out, (x,), lambda g: (g.sum(axis=0),), check=False)


def concat_tokens(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate [B x T_i x D] tensors along the token axis, preserving order."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat_tokens: needs at least one part")
    first = parts[0].data
    for p in parts:
        if p.data.ndim != first.ndim or p.data.shape[:1] + p.data.shape[2:] != first.shape[:1] + first.shape[2:]:
            raise DimensionError(
                f"concat_tokens: part shape {p.shape} incompatible with {parts[0].shape}")
    widths = [p.data.shape[1] for p in parts]
    out = np.concatenate([p.data for p in parts], axis=1)

    def bw(g):
        grads, start = [], 0
        for w in widths:
            grads.append(g[:, start:start + w])
            start += w
        return tuple(grads)

    return _make(out, tuple(parts), bw, check=False)


def slice_tokens(x: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice along the token axis; exact inverse of concat on
    complementary ranges."""
    x = _as_tensor(x)
    t = x.data.shape[1]
    if not (0 <= start < stop <= t):
        raise BoundsError(f"slice_tokens: range [{start}, {stop}) outside token axis of length {t}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _make(x.data[:, start:stop], (x,), bw, check=False)


def extract_patches(images: Tensor, patch_size: int) -> Tensor:
    """Rearrange [B x H x W x C] images into [B x N x P*P*C] flattened
    non-overlapping patches, row-major over the patch grid."""
    images = _as_tensor(images)
    if images.data.ndim != 4:
        raise DimensionError(f"extract_patches: expected 4-D images, got {images.shape}")
    b, h, w, c = images.data.shape
    p = int(patch_size)
    if h % p != 0 or w % p != 0:
        raise DimensionError(f"extract_patches: image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p

    def fwd(arr):
        return (arr.reshape(b, gh, p, gw, p, c)
                   .transpose(0, 1, 3, 2, 4, 5)
                   .reshape(b, gh * gw, p * p * c))

    def bw(g):
        return (g.reshape(b, gh, gw, p, p, c)
                 .transpose(0, 1, 3, 2, 4, 5)
                 .reshape(b, h, w, c),)

    return _make(fwd(images.data), (images,), bw, check=False)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable tensor that requires gradients.

    Visits each recorded node exactly once in reverse topological order.
    Gradients accumulate, so callers reusing leaves across passes should
    reset ``grad`` first (see :func:`zero_grads`).
    """
    if loss.data.size != 1:
        raise StateError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise StateError("backward: tensor is detached from any computation graph")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        parent_grads = node._backward(node.grad)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.data.shape:
                raise DimensionError(
                    f"backward: gradient shape {pg.shape} does not match parent {parent.data.shape}")
            # Accumulation allocates a fresh array, so sharing pg is safe.
            parent.grad = pg if parent.grad is None else parent.grad + pg


def zero_grads(params) -> None:
    """Reset stored gradients on an iterable or mapping of tensors."""
    values = params.values() if hasattr(params, "values") else params
    for t in values:
        t.grad = None


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: tuple[int, ...]
    analytic: float
    numeric: float
    rel_err: float


@dataclass
class GradCheckReport:
    """Per-element comparison of analytic gradients against central
    finite differences, with the max(1, |a|, |n|) relative-error metric."""

    tol: float
    h: float
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return all(e.rel_err <= self.tol for e in self.entries)

    @property
    def num_checked(self) -> int:
        return len(self.entries)

    def failures(self) -> list[GradCheckEntry]:
        return [e for e in self.entries if e.rel_err > self.tol]

    def worst(self, n: int = 10) -> list[GradCheckEntry]:
        return sorted(self.entries, key=lambda e: e.rel_err, reverse=True)[:n]

    def format_report(self) -> str:
        lines = [
            f"gradient check: {self.num_checked} parameters, h={self.h:g}, tol={self.tol:g}",
            f"max relative error: {self.max_rel_err:.3e}",
            f"result: {'PASS' if self.passed else 'FAIL'} ({len(self.failures())} failures)",
            "worst 10 parameters by relative error:",
        ]
        for e in self.worst(10):
            lines.append(
                f"  {e.name}{list(e.index)}: analytic={e.analytic:.9e} "
                f"numeric={e.numeric:.9e} rel_err={e.rel_err:.3e}")
        return "\n".join(lines) + "\n"


def finite_diff_check(f, params: dict[str, Tensor], h: float = 1e-5,
                      tol: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients of ``f(params)`` against central finite
    differences, element by element.

    ``f`` must build a fresh scalar loss from the given leaf tensors and be
    deterministic; re-evaluation under unchanged parameters must reproduce
    the value bit-for-bit or a :class:`DeterminismError` is raised.
    """
    base = f(params)
    if base.data.size != 1:
        raise DimensionError(f"finite_diff_check: f must return a scalar, got {base.shape}")
    recheck = f(params)
    if base.data.tobytes() != recheck.data.tobytes():
        raise DeterminismError(
            f"finite_diff_check: f is not deterministic "
            f"({base.item()!r} vs {recheck.item()!r} on re-evaluation)")

    zero_grads(params)
    loss = f(params)
    backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in params.items() if t.requires_grad
    }

    report = GradCheckReport(tol=tol, h=h)
    for name in sorted(analytic):
        t = params[name]
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f(params).item()
            flat[i] = orig - h
            fm = f(params).item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            rel = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            idx = np.unravel_index(i, t.data.shape) if t.data.ndim else ()
            report.entries.append(GradCheckEntry(name, tuple(int(k) for k in idx), a, numeric, rel))
    return report
