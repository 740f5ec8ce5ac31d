"""Dense-tensor kernels with reverse-mode differentiation.

Every differentiable operation used in training lives here. Tensors wrap a
numpy array (float32 by default, float64 in wide-precision gradient checks);
operations executed inside an active ``Tape`` append an adjoint record, and
``backward`` replays the records in reverse to populate leaf gradients.

Conventions: feature maps are (C, H, W) row-major; sampling grids are
(H, W, 2) arrays of normalized coordinates with the last axis ordered
(x, y), x mapping to columns and y to rows.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, EmptyCollaboratorError, EvaluationError, ParameterError

DEFAULT_DTYPE = np.float32

# Sub-cell deviations below this snap onto the lattice so that identity and
# whole-cell-shift grids sample exactly (bitwise) instead of leaking ~1e-13
# interpolation residue from the normalize/denormalize round trip.
_GRID_SNAP_TOL = 1e-6


class Tensor:
    """A dense n-d array tracked for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _Record:
    """One executed op: output, inputs, and the adjoint callback."""

    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.out = out
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


_tape_stack = threading.local()


def _stack() -> list:
    if not hasattr(_tape_stack, "stack"):
        _tape_stack.stack = []
    return _tape_stack.stack


class Tape:
    """Ordered record of executed ops; use as a context manager around the forward pass."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _stack().pop()
        assert popped is self, "tape stack corrupted"
        return False

    def __len__(self) -> int:
        return len(self.records)


def _active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _apply(inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn: Callable) -> Tensor:
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    tape = _active_tape()
    if tape is not None and requires:
        tape.records.append(_Record(out, inputs, backward_fn))
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ParameterError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum grad over the axes that numpy broadcasting expanded to reach grad.shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply((a, b), out, backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply((a, b), out, backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def backward(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _apply((a, b), out, backward)


def neg(a: Tensor) -> Tensor:
    return _apply((a,), -a.data, lambda g: (-g,))


def add_const(a: Tensor, c: float) -> Tensor:
    out = a.data + a.dtype.type(c)
    return _apply((a,), out, lambda g: (g,))


def mul_const(a: Tensor, c: float) -> Tensor:
    cc = a.dtype.type(c)
    out = a.data * cc
    return _apply((a,), out, lambda g: (g * cc,))


def const_minus(c: float, a: Tensor) -> Tensor:
    out = a.dtype.type(c) - a.data
    return _apply((a,), out, lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    a_data = a.data
    out = np.log(a_data)

    def backward(g):
        return (g / a_data,)

    return _apply((a,), out, backward)


def sigmoid(a: Tensor) -> Tensor:
    # exp on the negative branch only, for overflow safety in float32
    x = a.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _apply((a,), out, backward)


def leaky_relu(a: Tensor, slope: float = 0.1) -> Tensor:
    x = a.data
    out = np.where(x > 0, x, x * a.dtype.type(slope))

    def backward(g):
        return (np.where(x > 0, g, g * a.dtype.type(slope)),)

    return _apply((a,), out, backward)


def pow_const(a: Tensor, exponent: float) -> Tensor:
    x = a.data
    out = np.power(x, exponent)

    def backward(g):
        return (g * exponent * np.power(x, exponent - 1.0),)

    return _apply((a,), out, backward)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    out = np.clip(x, lo, hi)
    mask = (x >= lo) & (x <= hi)

    def backward(g):
        return (g * mask,)

    return _apply((a,), out, backward)


def huber(e: Tensor) -> Tensor:
    """Unit-threshold huber penalty: 0.5 e^2 for |e| < 1, |e| - 0.5 otherwise."""
    x = e.data
    absx = np.abs(x)
    out = np.where(absx < 1.0, 0.5 * x * x, absx - 0.5)

    def backward(g):
        return (g * np.clip(x, -1.0, 1.0),)

    return _apply((e,), out, backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tensor_sum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _apply((a,), out, backward)


def tensor_mean(a: Tensor) -> Tensor:
    n = a.size
    out = np.asarray(a.data.mean(), dtype=a.dtype)

    def backward(g):
        return (np.broadcast_to(g / n, a.shape).astype(a.dtype, copy=True),)

    return _apply((a,), out, backward)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate (C_i, H, W) maps along the channel axis."""
    if not parts:
        raise ParameterError("concat_channels of empty sequence")
    _check_same_dtype(*parts)
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _apply(tuple(parts), out, backward)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not (0 <= start < stop <= a.shape[0]):
        raise ParameterError(f"channel slice [{start}:{stop}] out of range for {a.shape[0]} channels")
    out = a.data[start:stop].copy()

    def backward(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _apply((a,), out, backward)


def upsample_nearest(a: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbor upsampling of a (C, H, W) map by an integer factor."""
    if factor < 1:
        raise ParameterError(f"upsample factor must be >= 1, got {factor}")
    if a.data.ndim != 3:
        raise ParameterError(f"upsample_nearest expects (C, H, W), got shape {a.shape}")
    if factor == 1:
        return _apply((a,), a.data.copy(), lambda g: (g,))
    c, h, w = a.shape
    out = np.repeat(np.repeat(a.data, factor, axis=1), factor, axis=2)

    def backward(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _apply((a,), out, backward)


# ---------------------------------------------------------------------------
# structured ops
# ---------------------------------------------------------------------------

def softmax_over_agents(scores: Tensor) -> Tensor:
    """Per-cell softmax across the leading (agent) axis of an (N, H, W) map."""
    if scores.data.ndim != 3:
        raise ParameterError(f"softmax_over_agents expects (N, H, W), got shape {scores.shape}")
    if scores.shape[0] == 0:
        raise EmptyCollaboratorError("softmax over zero agents")
    shifted = scores.data - scores.data.max(axis=0, keepdims=True)
    ex = np.exp(shifted)
    out = ex / ex.sum(axis=0, keepdims=True)

    def backward(g):
        dot = (g * out).sum(axis=0, keepdims=True)
        return (out * (g - dot),)

    return _apply((scores,), out, backward)


def conv2d(input: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a (C_in, H, W) map with a (C_out, C_in, k, k) kernel."""
    _check_same_dtype(input, kernel)
    if input.data.ndim != 3:
        raise ParameterError(f"conv2d input must be (C, H, W), got shape {input.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ParameterError(f"conv2d kernel must be (C_out, C_in, k, k), got shape {kernel.shape}")
    c_in, h, w = input.shape
    c_out, kc_in, k, _ = kernel.shape
    if kc_in != c_in:
        raise ParameterError(f"kernel input channels {kc_in} != input channels {c_in}")
    if k % 2 != 1:
        raise ParameterError(f"kernel size must be odd, got {k}")
    if stride not in (1, 2):
        raise ParameterError(f"stride must be 1 or 2, got {stride}")
    # floor semantics for stride 2 (a trailing partial window is dropped); exact
    # halving of even inputs with odd kernels is impossible otherwise
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    if h_out <= 0 or w_out <= 0:
        raise ParameterError(
            f"empty conv output {h_out}x{w_out} for input {h}x{w}, kernel {k}, "
            f"stride {stride}, padding {padding}"
        )

    xp = np.pad(input.data, ((0, 0), (padding, padding), (padding, padding))) if padding else input.data
    sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c_in, k, k, h_out, w_out),
        strides=(sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    cols = np.ascontiguousarray(windows).reshape(c_in * k * k, h_out * w_out)
    k2d = kernel.data.reshape(c_out, c_in * k * k)
    out = (k2d @ cols).reshape(c_out, h_out, w_out)

    hp, wp = xp.shape[1], xp.shape[2]
    need_input_grad = input.requires_grad
    need_kernel_grad = kernel.requires_grad

    def backward(g):
        g2d = g.reshape(c_out, h_out * w_out)
        grad_kernel = (g2d @ cols.T).reshape(kernel.shape) if need_kernel_grad else None
        if not need_input_grad:
            return None, grad_kernel
        dcols = (k2d.T @ g2d).reshape(c_in, k, k, h_out, w_out)
        dxp = np.zeros((c_in, hp, wp), dtype=g.dtype)
        for ki in range(k):
            for kj in range(k):
                dxp[:, ki:ki + h_out * stride:stride, kj:kj + w_out * stride:stride] += dcols[:, ki, kj]
        grad_input = dxp[:, padding:padding + h, padding:padding + w] if padding else dxp
        return grad_input, grad_kernel

    return _apply((input, kernel), out, backward)


def identity_grid(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Normalized cell-center sampling grid mapping every cell to itself."""
    u = (2.0 * np.arange(w, dtype=dtype) + 1.0) / w - 1.0
    v = (2.0 * np.arange(h, dtype=dtype) + 1.0) / h - 1.0
    grid = np.empty((h, w, 2), dtype=dtype)
    grid[..., 0] = u[None, :]
    grid[..., 1] = v[:, None]
    return grid


def bilinear_sample(input: Tensor, grid: np.ndarray) -> Tensor:
    """Sample a (C, H, W) map at normalized grid coordinates with zero border.

    ``grid`` is an (H_out, W_out, 2) array of (x, y) positions in [-1, 1];
    coordinates outside the valid range contribute zeros. Differentiable with
    respect to the input map only; the grid is treated as a constant.
    """
    if input.data.ndim != 3:
        raise ParameterError(f"bilinear_sample input must be (C, H, W), got shape {input.shape}")
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or grid.shape[2] != 2:
        raise ParameterError(f"sampling grid must be (H, W, 2), got shape {grid.shape}")
    c, h, w = input.shape
    h_out, w_out = grid.shape[0], grid.shape[1]

    cf = ((grid[..., 0] + 1.0) * w - 1.0) * 0.5
    rf = ((grid[..., 1] + 1.0) * h - 1.0) * 0.5
    cr = np.round(cf)
    rr = np.round(rf)
    cf = np.where(np.abs(cf - cr) < _GRID_SNAP_TOL, cr, cf)
    rf = np.where(np.abs(rf - rr) < _GRID_SNAP_TOL, rr, rf)

    x0 = np.floor(cf).astype(np.int64)
    y0 = np.floor(rf).astype(np.int64)
    tx = (cf - x0).astype(input.dtype)
    ty = (rf - y0).astype(input.dtype)

    flat_in = input.data.reshape(c, h * w)
    out = np.zeros((c, h_out, w_out), dtype=input.dtype)
    neighbors = []  # (flat_idx, weight, valid) per corner, reused by the adjoint
    for dy in (0, 1):
        for dx in (0, 1):
            xs = x0 + dx
            ys = y0 + dy
            valid = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
            wx = tx if dx == 1 else (1.0 - tx)
            wy = ty if dy == 1 else (1.0 - ty)
            weight = (wx * wy * valid).astype(input.dtype)
            idx = np.where(valid, ys * w + xs, 0).reshape(-1)
            out += (flat_in[:, idx] * weight.reshape(-1)).reshape(c, h_out, w_out)
            neighbors.append((idx, weight.reshape(-1)))

    def backward(g):
        g2d = g.reshape(c, h_out * w_out)
        acc = np.zeros((c, h * w), dtype=np.float64)
        for idx, weight in neighbors:
            contrib = g2d * weight
            for ch in range(c):
                acc[ch] += np.bincount(idx, weights=contrib[ch], minlength=h * w)
        return (acc.reshape(c, h, w).astype(input.dtype),)

    return _apply((input,), out, backward)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict[Tensor, np.ndarray]:
    """Populate and return gradients for every requires_grad leaf on the tape.

    The returned mapping is keyed by the leaf Tensor objects; each leaf's
    ``.grad`` attribute is set to the same array.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape, dtype=loss.dtype)}
    produced = {id(rec.out) for rec in tape.records}

    leaf_refs: dict[int, Tensor] = {}
    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.out), None)
        if g_out is None:
            continue
        input_grads = rec.backward_fn(g_out)
        if len(input_grads) != len(rec.inputs):
            raise ContractError("adjoint arity mismatch")
        for tensor, g in zip(rec.inputs, input_grads):
            if g is None:
                continue
            if g.shape != tensor.data.shape:
                raise ContractError(f"gradient shape {g.shape} != tensor shape {tensor.data.shape}")
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if tensor.requires_grad and key not in produced:
                leaf_refs[key] = tensor

    leaves: dict[Tensor, np.ndarray] = {}
    for key, tensor in leaf_refs.items():
        tensor.grad = np.asarray(grads[key], dtype=tensor.dtype)
        leaves[tensor] = tensor.grad
    return leaves


def grad_check(f: Callable[..., Tensor], inputs: Iterable[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Inputs are promoted to float64 before checking; ``f`` must return a
    scalar Tensor and be re-runnable on perturbed copies of its inputs.
    """
    if eps <= 0:
        raise ParameterError(f"eps must be positive, got {eps}")
    wide = [Tensor(t.data.astype(np.float64), requires_grad=t.requires_grad) for t in inputs]

    with Tape() as tape:
        out = f(*wide)
    if out.data.size != 1:
        raise ContractError(f"grad_check target must be scalar, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError("non-finite forward value in grad_check")
    backward(out, tape)

    worst = 0.0
    for t in wide:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros(t.shape, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f(*wide).item()
            flat[i] = orig - eps
            lo = f(*wide).item()
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise EvaluationError("non-finite forward value during finite differencing")
            fd = (hi - lo) / (2.0 * eps)
            err = abs(float(analytic.reshape(-1)[i]) - fd) / max(1.0, abs(fd))
            worst = max(worst, err)
    return worst
