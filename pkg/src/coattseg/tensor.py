"""Dense float64 tensors with a dynamically recorded reverse-mode tape.

The op set is fixed and small: exactly what the co-attention model needs.
Every op validates shapes up front, checks its output for NaN/Inf, and
records a backward closure on the output tensor. ``Tensor.backward`` walks
the recorded graph once and then frees it, so a graph cannot be
back-propagated twice.

Broadcasting in ``add``/``mul`` is intentionally narrow: same shape, a
scalar, a trailing per-channel vector (bias over a spatial map), or a
per-position row vector / per-channel column against a matrix (gating and
channel scaling). Gradients for broadcast operands are reduced by summing
over the broadcast axes.
"""

from dataclasses import dataclass
import json
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError, DimensionError, NumericError, UsageError

_GRAD_ENABLED = True


class no_grad:
    """Context manager that suspends tape recording (forward-only passes)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A dense float64 array plus optional gradient bookkeeping.

    ``data`` is row-major and treated as immutable once the tensor exists;
    training code replaces whole arrays rather than mutating in place.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim and not (arr.flags.c_contiguous and arr.flags.owndata and arr.flags.writeable):
            arr = arr.copy(order="C")
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NumericError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        """Reverse-mode pass from a scalar; frees the graph afterwards."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                if not np.all(np.isfinite(node.grad)):
                    raise NumericError("gradient contains NaN or Inf")
                node._backward(node.grad)
            node._parents = ()
            node._backward = None

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Tensor) -> list:
    order = []
    visited = {id(root)}
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        for p in parents:
            if id(p) not in visited:
                visited.add(id(p))
                stack.append((p, iter(p._parents)))
                break
        else:
            order.append(node)
            stack.pop()
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    requires = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    t.grad = g.copy() if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g over the axes that were broadcast to reach its shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _check_broadcastable(a_shape: tuple, b_shape: tuple, op: str) -> None:
    try:
        np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a_shape} and {b_shape} do not align") from None


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} vs {b.shape}")
    out_data = a.data @ b.data

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _from_op(out_data, (a, b), backward)


def transpose(m) -> Tensor:
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 tensor, got {m.shape}")

    def backward(g):
        _accumulate(m, g.T)

    return _from_op(m.data.T, (m,), backward)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise DimensionError(f"cannot reshape {x.shape} to {shape}")

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _from_op(x.data.reshape(shape), (x,), backward)


# ---------------------------------------------------------------------------
# pointwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape, "add")
    out_data = a.data + b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _from_op(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape, "sub")
    out_data = a.data - b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _from_op(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcastable(a.shape, b.shape, "mul")
    out_data = a.data * b.data

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _from_op(out_data, (a, b), backward)


def neg(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, -g)

    return _from_op(-x.data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    out_data = np.empty_like(x.data)
    pos = x.data >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def backward(g):
        _accumulate(x, g * out_data * (1.0 - out_data))

    return _from_op(out_data, (x,), backward)


def relu(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, g * (x.data > 0))

    return _from_op(np.maximum(x.data, 0.0), (x,), backward)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log of a non-positive value")

    def backward(g):
        _accumulate(x, g / x.data)

    return _from_op(np.log(x.data), (x,), backward)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes through wherever x is in range."""
    x = _as_tensor(x)
    if not lo < hi:
        raise UsageError(f"clip needs lo < hi, got {lo} and {hi}")
    mask = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accumulate(x, g * mask)

    return _from_op(np.clip(x.data, lo, hi), (x,), backward)


def absolute(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, g * np.sign(x.data))

    return _from_op(np.abs(x.data), (x,), backward)


def mean(x, axis: int | None = None) -> Tensor:
    """Mean over all elements (axis=None, scalar output) or one kept axis."""
    x = _as_tensor(x)
    if axis is None:
        out_data = np.asarray(x.data.mean())
        count = x.size

        def backward(g):
            _accumulate(x, np.full(x.shape, g / count))

    else:
        out_data = x.data.mean(axis=axis, keepdims=True)
        count = x.shape[axis]

        def backward(g):
            _accumulate(x, np.broadcast_to(g / count, x.shape).copy())

    return _from_op(out_data, (x,), backward)


def tensor_sum(x) -> Tensor:
    x = _as_tensor(x)

    def backward(g):
        _accumulate(x, np.full(x.shape, float(g)))

    return _from_op(np.asarray(x.data.sum()), (x,), backward)


def concat_channels(a, b) -> Tensor:
    """Concatenate two H x W x C maps along the channel axis."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 3 or b.data.ndim != 3:
        raise DimensionError(f"concat_channels needs rank-3 maps, got {a.shape} and {b.shape}")
    if a.shape[:2] != b.shape[:2]:
        raise DimensionError(f"concat_channels spatial shapes differ: {a.shape} vs {b.shape}")
    ca = a.shape[2]

    def backward(g):
        _accumulate(a, g[:, :, :ca])
        _accumulate(b, g[:, :, ca:])

    return _from_op(np.concatenate([a.data, b.data], axis=2), (a, b), backward)


def softmax_columns(m) -> Tensor:
    """Column-wise softmax of a matrix, stabilised by per-column max."""
    m = _as_tensor(m)
    if m.data.ndim != 2:
        raise DimensionError(f"softmax_columns needs a rank-2 tensor, got {m.shape}")
    shifted = m.data - m.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)

    def backward(g):
        _accumulate(m, s * (g - (g * s).sum(axis=0, keepdims=True)))

    return _from_op(s, (m,), backward)


# ---------------------------------------------------------------------------
# convolution and resampling
# ---------------------------------------------------------------------------

def conv2d(x, k, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of an H x W x Cin map with a kh x kw x Cin x Cout kernel."""
    x, k = _as_tensor(x), _as_tensor(k)
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise DimensionError(f"conv2d needs rank-3 input and rank-4 kernel, got {x.shape} and {k.shape}")
    kh, kw, cin, cout = k.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel sides must be odd, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1 or pad < 0:
        raise UsageError(f"conv2d needs stride >= 1 and pad >= 0, got {stride}, {pad}")
    h, w, _ = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d output would be {ho}x{wo} for input {x.shape}, kernel {k.shape}")

    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    out_data = kernels.conv2d_forward(xp, k.data, stride)

    def backward(g):
        g = np.ascontiguousarray(g)
        if k.requires_grad:
            _accumulate(k, kernels.conv2d_grad_kernel(g, xp, k.shape, stride))
        if x.requires_grad:
            dxp = kernels.conv2d_grad_input(g, k.data, xp.shape, stride)
            if pad:
                dxp = dxp[pad:-pad, pad:-pad, :]
            _accumulate(x, dxp)

    return _from_op(out_data, (x, k), backward)


def _upsample_indices(n: int, scale: int):
    dst = np.arange(n * scale, dtype=np.float64)
    src = np.clip((dst + 0.5) / scale - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    return i0, i1, frac


def bilinear_upsample(x, scale: int) -> Tensor:
    """Upsample an H x W x C map by an integer factor (align_corners=False)."""
    x = _as_tensor(x)
    if x.data.ndim != 3:
        raise DimensionError(f"bilinear_upsample needs a rank-3 map, got {x.shape}")
    if scale < 1:
        raise UsageError(f"bilinear_upsample needs scale >= 1, got {scale}")
    h, w, _ = x.shape
    i0, i1, fr = _upsample_indices(h, scale)
    j0, j1, fc = _upsample_indices(w, scale)
    wr = fr[:, None, None]
    wc = fc[None, :, None]
    d = x.data
    out_data = (
        (1 - wr) * ((1 - wc) * d[i0[:, None], j0[None, :]] + wc * d[i0[:, None], j1[None, :]])
        + wr * ((1 - wc) * d[i1[:, None], j0[None, :]] + wc * d[i1[:, None], j1[None, :]])
    )

    def backward(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (i0[:, None], j0[None, :]), (1 - wr) * (1 - wc) * g)
        np.add.at(dx, (i0[:, None], j1[None, :]), (1 - wr) * wc * g)
        np.add.at(dx, (i1[:, None], j0[None, :]), wr * (1 - wc) * g)
        np.add.at(dx, (i1[:, None], j1[None, :]), wr * wc * g)
        _accumulate(x, dx)

    return _from_op(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    op_name: str
    max_rel_error: float
    tolerance: float
    passed: bool


def grad_check(f, inputs, eps: float = 1e-5, tol: float = 1e-6, name: str = "f") -> GradCheckReport:
    """Compare the tape gradient of a scalar function against central differences.

    ``f`` maps a list of tensors to a scalar tensor and must be
    deterministic. Every coordinate of every input is perturbed by
    +/- eps; the relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if eps <= 0:
        raise UsageError(f"grad_check needs eps > 0, got {eps}")
    inputs = [t if t.requires_grad else Tensor(t.data, requires_grad=True) for t in inputs]
    out = f(inputs)
    if out.data.size != 1:
        raise UsageError(f"grad_check target must be scalar, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def eval_at(idx, coord, delta):
        probe = [Tensor(t.data) for t in inputs]
        d = probe[idx].data.copy()
        d.flat[coord] += delta
        probe[idx] = Tensor(d)
        with no_grad():
            try:
                val = f(probe).item()
            except NumericError as exc:
                raise NumericError(f"grad_check({name}): non-finite value at perturbed point") from exc
        return val

    max_rel = 0.0
    for idx, t in enumerate(inputs):
        for coord in range(t.size):
            hi = eval_at(idx, coord, eps)
            lo = eval_at(idx, coord, -eps)
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic[idx].flat[coord])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return GradCheckReport(op_name=name, max_rel_error=float(max_rel), tolerance=tol, passed=bool(max_rel <= tol))


# ---------------------------------------------------------------------------
# serialization: JSON manifest + flat little-endian f64 payload
# ---------------------------------------------------------------------------

def save_tensor(t: Tensor, prefix) -> None:
    """Write ``<prefix>.json`` (shape/dtype/byte-order manifest) and ``<prefix>.bin``."""
    prefix = Path(prefix)
    manifest = {"shape": list(t.shape), "dtype": "f64", "byte_order": "little"}
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.json").write_text(json.dumps(manifest, sort_keys=True))
    Path(f"{prefix}.bin").write_bytes(t.data.astype("<f8").tobytes())


def load_tensor(prefix) -> Tensor:
    prefix = Path(prefix)
    json_path = Path(f"{prefix}.json")
    bin_path = Path(f"{prefix}.bin")
    if not json_path.exists() or not bin_path.exists():
        raise DataError(f"tensor files missing at {prefix}")
    manifest = json.loads(json_path.read_text())
    if manifest.get("dtype") != "f64":
        raise DataError(f"unsupported dtype tag {manifest.get('dtype')!r} in {json_path}")
    if manifest.get("byte_order") != "little":
        raise DataError(f"unsupported byte order {manifest.get('byte_order')!r} in {json_path}")
    shape = tuple(int(s) for s in manifest["shape"])
    raw = bin_path.read_bytes()
    expected = int(np.prod(shape, dtype=np.int64)) * 8 if shape else 8
    if len(raw) != expected:
        raise DataError(f"payload of {bin_path} is {len(raw)} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor(data)
