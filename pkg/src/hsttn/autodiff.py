"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the operations the forecasting model needs are implemented: batched
matrix products, row softmax, ReLU, channel-wise 1x1 convolution, temporal
max-pooling, stride-expanding transposed convolution, concatenation,
dropout, and a few elementwise helpers. Forward values live in numpy
arrays; gradients are accumulated on `Tensor.grad` by replaying a
`GradTape` in reverse.

Reductions that sum over an axis whose ordering is arbitrary (softmax
denominators, attention mixing over sequence positions) accumulate in
sorted order, so outputs are bitwise invariant to permutations of that
axis. This is what makes turbine-permutation equivariance hold exactly
instead of merely within float tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ContractError, OracleError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "RngStream",
    "add",
    "mul",
    "scale",
    "matmul",
    "mix",
    "permute",
    "reshape",
    "relu",
    "softmax_rows",
    "concat",
    "maxpool1d",
    "upconv1d",
    "dropout",
    "sum_all",
    "pointwise_conv",
    "backward",
    "grad_check",
    "GradCheckReport",
]


class RngStream:
    """Counter-based random stream: one seed, one reproducible sequence.

    Backed by Philox, so the draw sequence is identical across runs and
    platforms for a fixed seed. `child(salt)` derives an independent
    stream deterministically, which is how per-epoch shuffles and the
    dropout stream stay decoupled from parameter initialization.
    """

    def __init__(self, seed: int, _entropy: tuple[int, ...] | None = None):
        self.seed = int(seed)
        self._entropy = _entropy if _entropy is not None else (self.seed,)
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self._entropy)))

    def child(self, salt: int) -> "RngStream":
        return RngStream(self.seed, self._entropy + (int(salt),))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def keep_mask(self, shape, keep_prob: float) -> np.ndarray:
        return self._gen.random(size=shape) < keep_prob

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)


class Tensor:
    """Dense float64 array with optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeError(f"tensors must have positive dimensions, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
        else:
            self.grad = self.grad + g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # light operator sugar; everything routes through the module-level ops
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


@dataclass
class TapeNode:
    output: Tensor
    inputs: tuple[Tensor, ...]
    rule: Callable[[np.ndarray], tuple[Optional[np.ndarray], ...]]


_TAPE_STACK: list["GradTape"] = []


class GradTape:
    """Execution-ordered op record; reverse replay populates gradients."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "GradTape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        _TAPE_STACK.pop()
        return False

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def _record(out: Tensor, inputs: Sequence[Tensor], rule) -> Tensor:
    if _TAPE_STACK and out.requires_grad:
        _TAPE_STACK[-1].nodes.append(TapeNode(out, tuple(inputs), rule))
    return out


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate `grad` on every requires_grad tensor reachable from `loss`."""
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    loss.accumulate_grad(np.ones((), dtype=np.float64))
    for node in reversed(tape.nodes):
        g = node.output.grad
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.rule(g)):
            if gi is None or not t.requires_grad:
                continue
            t.accumulate_grad(gi)


def _requires(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None
    out = Tensor(data, _requires(a, b))

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None
    out = Tensor(data, _requires(a, b))

    def rule(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), rule)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c, a.requires_grad)
    return _record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. 2-D operands multiply normally; an n-D left operand
    against a 2-D right one contracts the last axis at every leading index;
    equal-rank stacked operands multiply slice by slice."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if b.ndim == 2:
        data = np.matmul(a.data, b.data)
        out = Tensor(data, _requires(a, b))

        def rule(g):
            ga = np.matmul(g, b.data.T)
            axes = list(range(a.ndim - 1))
            gb = np.tensordot(a.data, g, axes=(axes, axes))
            return ga, gb

        return _record(out, (a, b), rule)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} x {b.shape}")
    data = np.matmul(a.data, b.data)
    out = Tensor(data, _requires(a, b))

    def rule(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _record(out, (a, b), rule)


def mix(weights: Tensor, values: Tensor) -> Tensor:
    """`weights @ values` with order-independent accumulation.

    The contraction axis (last of `weights`, second-last of `values`) is
    summed in sorted order, so the result is bitwise invariant to
    permutations of that axis. Used to apply attention weights to value
    vectors, where the contracted axis enumerates sequence positions.
    """
    if weights.ndim < 2 or values.ndim < 2:
        raise ShapeError(f"mix needs matrices, got shapes {weights.shape} and {values.shape}")
    if weights.ndim != values.ndim or weights.shape[:-2] != values.shape[:-2]:
        raise ShapeError(f"mix batch dimensions disagree: {weights.shape} x {values.shape}")
    if weights.shape[-1] != values.shape[-2]:
        raise ShapeError(f"mix inner dimensions disagree: {weights.shape} x {values.shape}")
    products = weights.data[..., :, :, None] * values.data[..., None, :, :]
    products.sort(axis=-2)
    data = products.sum(axis=-2)
    out = Tensor(data, _requires(weights, values))

    def rule(g):
        gw = np.matmul(g, np.swapaxes(values.data, -1, -2))
        gv = np.matmul(np.swapaxes(weights.data, -1, -2), g)
        return gw, gv

    return _record(out, (weights, values), rule)


def permute(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"permutation {axes} is invalid for shape {a.shape}")
    inv = np.argsort(axes)
    out = Tensor(np.transpose(a.data, axes), a.requires_grad)
    return _record(out, (a,), lambda g: (np.transpose(g, inv),))


def transpose_last2(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(a, axes)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape), a.requires_grad)
    return _record(out, (a,), lambda g: (g.reshape(a.shape),))


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad)
    # gradient at exactly zero is defined as zero
    mask = a.data > 0.0
    return _record(out, (a,), lambda g: (g * mask,))


def softmax_rows(a: Tensor) -> Tensor:
    """Stable softmax over the last axis; rows sum to one.

    The normalizer sums exponentials in sorted order, making each row's
    output bitwise invariant to reordering of the row's entries.
    """
    if a.ndim < 1 or a.shape[-1] < 1:
        raise ShapeError(f"softmax_rows needs a non-empty last axis, got shape {a.shape}")
    m = a.data.max(axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    denom = np.sort(e, axis=-1).sum(axis=-1, keepdims=True)
    y = e / denom
    out = Tensor(y, a.requires_grad)

    def rule(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return ((g - dot) * y,)

    return _record(out, (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    if len(tensors) == 1:
        return tensors[0]
    first = tensors[0]
    axis = axis % first.ndim
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            i != axis and t.shape[i] != first.shape[i] for i in range(first.ndim)
        ):
            raise ShapeError(
                f"concat along axis {axis} needs matching off-axis shapes, "
                f"got {[t.shape for t in tensors]}"
            )
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = Tensor(data, _requires(*tensors))
    offsets = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(tensors), rule)


def maxpool1d(x: Tensor, p: int) -> Tensor:
    """Max over non-overlapping windows of `p` steps along the second-last
    axis; gradient routes to the first occurrence of each window maximum."""
    if p < 1:
        raise ConfigError(f"pooling factor must be positive, got {p}")
    if x.ndim < 2:
        raise ShapeError(f"maxpool1d needs at least 2 dims, got shape {x.shape}")
    length = x.shape[-2]
    if length % p != 0:
        raise ConfigError(f"sequence length {length} is not divisible by pooling factor {p}")
    if p == 1:
        return x
    windows = x.data.reshape(x.shape[:-2] + (length // p, p, x.shape[-1]))
    idx = windows.argmax(axis=-2)
    out = Tensor(windows.max(axis=-2), x.requires_grad)

    def rule(g):
        gw = np.zeros_like(windows)
        np.put_along_axis(gw, idx[..., None, :], g[..., None, :], axis=-2)
        return (gw.reshape(x.shape),)

    return _record(out, (x,), rule)


def upconv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Transposed convolution along the second-last axis with kernel width
    equal to stride: every input step emits `factor` consecutive output
    steps, so length L maps to L*factor with no overlap."""
    if w.ndim != 3:
        raise ShapeError(f"upconv1d kernel must be (factor, d_in, d_out), got {w.shape}")
    factor, d_in, d_out = w.shape
    if x.ndim < 2 or x.shape[-1] != d_in:
        raise ShapeError(f"upconv1d input {x.shape} does not match kernel {w.shape}")
    if b.shape != (d_out,):
        raise ShapeError(f"upconv1d bias must be ({d_out},), got {b.shape}")
    length = x.shape[-2]
    steps = np.einsum("...ld,fdo->...lfo", x.data, w.data)
    data = steps.reshape(x.shape[:-2] + (length * factor, d_out)) + b.data
    out = Tensor(data, _requires(x, w, b))

    def rule(g):
        gv = g.reshape(x.shape[:-2] + (length, factor, d_out))
        gx = np.einsum("...lfo,fdo->...ld", gv, w.data)
        gw = np.einsum("bld,blfo->fdo", x.data.reshape(-1, length, d_in),
                       gv.reshape(-1, length, factor, d_out))
        gb = g.reshape(-1, d_out).sum(axis=0)
        return gx, gw, gb

    return _record(out, (x, w, b), rule)


def dropout(x: Tensor, rate: float, training: bool, rng: RngStream | None) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale survivors by
    1/(1-rate). Identity when not training or rate is zero."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an RngStream")
    keep = rng.keep_mask(x.shape, 1.0 - rate)
    factor = keep.astype(np.float64) / (1.0 - rate)
    out = Tensor(x.data * factor, x.requires_grad)
    return _record(out, (x,), lambda g: (g * factor,))


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(np.sum(a.data), a.requires_grad)
    return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def pointwise_conv(x: Tensor, w: Tensor, b: Tensor, activation: bool = True) -> Tensor:
    """1x1 convolution over channels: the same affine map applied at every
    position of the leading axes, optionally followed by ReLU."""
    if w.ndim != 2:
        raise ShapeError(f"pointwise_conv weight must be 2-D, got {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"pointwise_conv channel mismatch: input {x.shape} vs weight {w.shape}"
        )
    if b.shape != (w.shape[1],):
        raise ShapeError(f"pointwise_conv bias must be ({w.shape[1]},), got {b.shape}")
    y = add(matmul(x, w), b)
    return relu(y) if activation else y


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    n_elements: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of scalar-valued `f` at `x` against
    central finite differences. Relative error uses max(|analytic|,
    |numeric|, 1) as denominator so near-zero gradients are judged on
    absolute error."""
    probe = Tensor(x.data.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(probe)
    if y.data.shape != ():
        raise ContractError(f"grad_check needs a scalar-valued function, got shape {y.data.shape}")
    if not np.isfinite(y.data):
        raise OracleError("grad_check: function value is not finite at x")
    backward(y, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros(x.shape)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_num = numeric.reshape(-1)
    for i in range(flat_base.size):
        saved = flat_base[i]
        flat_base[i] = saved + eps
        fp = f(Tensor(base)).data
        flat_base[i] = saved - eps
        fm = f(Tensor(base)).data
        flat_base[i] = saved
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"grad_check: non-finite value at perturbed element {i}")
        flat_num[i] = (fp - fm) / (2.0 * eps)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / denom
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel_error=max_rel, tol=tol, n_elements=base.size)
