"""Dense float64 tensors with reverse-mode automatic differentiation.

The engine is deliberately small: it provides exactly the primitives the
segmentation network and its losses need, everything runs in 64-bit floats
on row-major (C-contiguous) numpy buffers, and there is no broadcasting
beyond the bias-add folded into ``conv2d``/``linear``. Scalars (Python
numbers) are allowed in elementwise arithmetic; arrays must match shapes
exactly.

Each ``Tensor`` produced by a primitive remembers its parents, the name of
the primitive that made it, and a closure that propagates gradients. That
triple is the differentiation graph: ``backward`` walks it once in reverse
topological order and accumulates gradients additively into ``.grad``
(calling ``backward`` twice without resetting doubles them).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ContractError, DimensionError

Scalar = Union[int, float]

_grad_enabled = True


class no_grad:
    """Context manager that suspends graph construction.

    Inside the context every primitive returns a plain leaf tensor, which
    keeps inference cheap. Nesting is safe; the previous state is restored
    on exit.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_array(values) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(values, dtype=np.float64))


class Tensor:
    """N-dimensional float64 array participating in the autodiff graph.

    ``data`` is always C-contiguous float64; ``grad`` is either ``None`` or
    an array of the same shape. Leaves created with ``requires_grad=True``
    receive gradients when some downstream scalar calls ``backward``.
    Tensors with no pending graph are immutable by convention and safe to
    share across threads for read-only inference.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_op", "_backward_fn",
                 "_pass_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._op = "leaf"
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None
        self._pass_grad: Optional[np.ndarray] = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Copy of the values with no graph attached."""
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op!r}{flag})"

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward_fn: Callable[[np.ndarray], None]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._op = op
            out._backward_fn = backward_fn
        return out

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.requires_grad:
            if self._pass_grad is None:
                # private copy: upstream may hand us a view into shared storage
                self._pass_grad = np.array(grad, dtype=np.float64)
            else:
                self._pass_grad += grad

    def backward(self) -> None:
        """Reverse-mode sweep seeding d(self)/d(self) = 1.

        Requires a single-element tensor. Visits each graph node exactly
        once in reverse topological order, computing this pass's gradients
        in scratch buffers, then adds them into the ``grad`` slots: every
        ``requires_grad`` tensor reachable from the loss ends up with a
        gradient array (exactly zero if it does not influence the value),
        and a second backward without a reset doubles the accumulated
        values.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

        self._pass_grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward_fn is not None and node._pass_grad is not None:
                node._backward_fn(node._pass_grad)

        for node in topo:
            if node.requires_grad:
                if node._pass_grad is not None:
                    if node.grad is None:
                        node.grad = node._pass_grad  # buffer is ours, hand it over
                    else:
                        node.grad += node._pass_grad
                elif node.grad is None:
                    node.grad = np.zeros_like(node.data)
            node._pass_grad = None

    # -- elementwise arithmetic (same shape, or Python scalar) ---------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return add(-self, float(other))

    def __truediv__(self, other):
        return div(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return mul(tensor_sum(self), 1.0 / self.size)


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} must match exactly")


def add(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        shift = float(b)

        def backward_shift(g):
            a._accumulate(g)

        return Tensor._result(a.data + shift, (a,), "add_scalar", backward_shift)

    _check_same_shape(a, b, "add")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return Tensor._result(a.data + b.data, (a, b), "add", backward)


def mul(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        factor = float(b)

        def backward_scale(g):
            a._accumulate(g * factor)

        return Tensor._result(a.data * factor, (a,), "mul_scalar", backward_scale)

    _check_same_shape(a, b, "mul")
    a_data, b_data = a.data, b.data

    def backward(g):
        a._accumulate(g * b_data)
        b._accumulate(g * a_data)

    return Tensor._result(a_data * b_data, (a, b), "mul", backward)


def div(a: Tensor, b: Union[Tensor, Scalar]) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))

    _check_same_shape(a, b, "div")
    a_data, b_data = a.data, b.data
    out_data = a_data / b_data

    def backward(g):
        a._accumulate(g / b_data)
        b._accumulate(-g * out_data / b_data)

    return Tensor._result(out_data, (a, b), "div", backward)


def tensor_sum(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(np.full_like(a.data, np.asarray(g).reshape(-1)[0]))

    return Tensor._result(np.asarray(a.data.sum()), (a,), "sum", backward)


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * out_data)

    return Tensor._result(out_data, (a,), "exp", backward)


def log(a: Tensor) -> Tensor:
    """Natural log; caller is responsible for keeping inputs positive."""
    a_data = a.data

    def backward(g):
        a._accumulate(g / a_data)

    return Tensor._result(np.log(a_data), (a,), "log", backward)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, v). Subgradient at 0 is 0."""
    mask = a.data > 0

    def backward(g):
        a._accumulate(g * mask)

    return Tensor._result(np.where(mask, a.data, 0.0), (a,), "relu", backward)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """Elementwise max(v, floor); gradient passes only where v > floor."""
    mask = a.data > floor

    def backward(g):
        a._accumulate(g * mask)

    return Tensor._result(np.maximum(a.data, floor), (a,), "clamp_min", backward)


def grad_reverse(a: Tensor) -> Tensor:
    """Identity forward, negated gradient backward.

    Used to train a classifier head normally while pushing the opposite
    signal into the features that feed it.
    """

    def backward(g):
        a._accumulate(-g)

    return Tensor._result(a.data.copy(), (a,), "grad_reverse", backward)


# -- network primitives -------------------------------------------------------


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over NCHW input with an FCkk kernel and F bias.

    Output height is (H + 2*padding - kh)/stride + 1 and must be integral;
    kernels must have odd spatial size. Implemented as im2col plus one
    matmul so the backward pass is a pair of matmuls and a scatter-add.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise DimensionError(f"conv2d: need 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    f, ck, kh, kw = kernel.shape
    if bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    if ck != c:
        raise DimensionError(f"conv2d: input has {c} channels but kernel expects {ck}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size {kh}x{kw} must be odd")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: stride {stride} / padding {padding} out of range")
    if (h + 2 * padding - kh) % stride != 0 or (w + 2 * padding - kw) % stride != 0:
        raise ConfigurationError(
            f"conv2d: output size not integral for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}")
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1

    padded = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    sn, sc, sh, sw = padded.strides
    windows = np.lib.stride_tricks.as_strided(
        padded,
        shape=(n, c, kh, kw, h_out, w_out),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
    )
    cols = windows.reshape(n, c * kh * kw, h_out * w_out)
    k2 = kernel.data.reshape(f, c * kh * kw)
    out_data = (np.matmul(k2, cols) + bias.data[None, :, None]).reshape(n, f, h_out, w_out)

    def backward(g):
        g2 = g.reshape(n, f, h_out * w_out)
        bias._accumulate(g.sum(axis=(0, 2, 3)))
        kernel._accumulate(np.tensordot(g2, cols, axes=([0, 2], [0, 2])).reshape(kernel.shape))
        if x.requires_grad:
            g_cols = np.matmul(k2.T, g2).reshape(n, c, kh, kw, h_out, w_out)
            g_padded = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    g_padded[:, :, i:i + h_out * stride:stride,
                             j:j + w_out * stride:stride] += g_cols[:, :, i, j]
            x._accumulate(g_padded[:, :, padding:padding + h, padding:padding + w])

    return Tensor._result(out_data, (x, kernel, bias), "conv2d", backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map over feature vectors: [N,C] x [M,C]^T + [M] -> [N,M]."""
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"linear: need 2-d input and weight, got {x.shape} and {weight.shape}")
    n, c = x.shape
    m, cw = weight.shape
    if cw != c or bias.shape != (m,):
        raise DimensionError(
            f"linear: input {x.shape}, weight {weight.shape}, bias {bias.shape} are inconsistent")
    x_data, w_data = x.data, weight.data

    def backward(g):
        x._accumulate(g @ w_data)
        weight._accumulate(g.T @ x_data)
        bias._accumulate(g.sum(axis=0))

    return Tensor._result(x_data @ w_data.T + bias.data[None, :], (x, weight, bias), "linear", backward)


def log_softmax(x: Tensor) -> Tensor:
    """Log of the softmax over axis 1 (channels), max-shifted for stability.

    Accepts [N,K] score matrices and [N,K,H,W] score maps; K must be >= 2.
    Exponentiating the result gives probabilities that sum to 1 along the
    channel axis to within 1e-12.
    """
    if x.ndim not in (2, 4):
        raise DimensionError(f"log_softmax: expected 2-d or 4-d input, got shape {x.shape}")
    if x.shape[1] < 2:
        raise ConfigurationError(f"log_softmax: needs at least 2 channels, got {x.shape[1]}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out_data = shifted - log_norm
    softmax = np.exp(out_data)

    def backward(g):
        x._accumulate(g - softmax * g.sum(axis=1, keepdims=True))

    return Tensor._result(out_data, (x,), "log_softmax", backward)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate each pixel into a factor x factor block."""
    if x.ndim != 4:
        raise DimensionError(f"upsample_nearest: expected 4-d input, got shape {x.shape}")
    if factor < 1:
        raise ConfigurationError(f"upsample_nearest: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    out_data = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        x._accumulate(g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)))

    return Tensor._result(out_data, (x,), "upsample_nearest", backward)


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Average each factor x factor block into one pixel (inverse-flavored
    counterpart of upsample_nearest; spatial dims must divide by factor)."""
    if x.ndim != 4:
        raise DimensionError(f"downsample_avg: expected 4-d input, got shape {x.shape}")
    if factor < 1:
        raise ConfigurationError(f"downsample_avg: factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise DimensionError(f"downsample_avg: size {h}x{w} not divisible by factor {factor}")
    out_data = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))

    def backward(g):
        spread = np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)
        x._accumulate(spread / (factor * factor))

    return Tensor._result(out_data, (x,), "downsample_avg", backward)


def global_average_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: [N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise DimensionError(f"global_average_pool: expected 4-d input, got shape {x.shape}")
    n, c, h, w = x.shape

    def backward(g):
        x._accumulate(np.broadcast_to(g[:, :, None, None], (n, c, h, w)) / (h * w))

    return Tensor._result(x.data.mean(axis=(2, 3)), (x,), "global_average_pool", backward)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis."""
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat_channels: need at least one tensor")
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4 or t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise DimensionError(
                f"concat_channels: shape {t.shape} incompatible with {base}")
    widths = [t.shape[1] for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=1)

    def backward(g):
        start = 0
        for t, width in zip(tensors, widths):
            t._accumulate(g[:, start:start + width])
            start += width

    return Tensor._result(out_data, tuple(tensors), "concat_channels", backward)


# -- gradient verification ----------------------------------------------------


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    checked_coords: int


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare the analytic gradient of scalar-valued ``f`` at ``point``
    against central differences (f(x+h*e_i) - f(x-h*e_i)) / 2h.

    Relative error uses a max(1, |analytic|) denominator per coordinate.
    ``max_coords`` caps how many coordinates are probed (a seeded choice);
    by default every coordinate is checked. ``f`` must rebuild its graph on
    every call.
    """
    if not 1e-7 <= h <= 1e-3:
        raise ConfigurationError(f"finite_difference_check: step {h} outside [1e-7, 1e-3]")
    point.requires_grad = True
    point.grad = None
    value = f(point)
    if value.size != 1:
        raise ContractError("finite_difference_check: f must return a scalar tensor")
    value.backward()
    if point.grad is None:  # f ignored the point entirely (constant function)
        analytic = np.zeros(point.size)
    else:
        analytic = point.grad.reshape(-1).copy()

    flat = point.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        coords = np.random.default_rng(seed).choice(flat.size, size=max_coords, replace=False)

    max_rel = 0.0
    with no_grad():
        for idx in coords:
            original = flat[idx]
            flat[idx] = original + h
            upper = f(point).item()
            flat[idx] = original - h
            lower = f(point).item()
            flat[idx] = original
            numeric = (upper - lower) / (2.0 * h)
            rel = abs(numeric - analytic[idx]) / max(1.0, abs(analytic[idx]))
            max_rel = max(max_rel, rel)
    return GradCheckResult(passed=max_rel < tol, max_rel_error=max_rel, checked_coords=len(coords))
