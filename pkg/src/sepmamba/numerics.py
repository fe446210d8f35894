"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the separator needs are provided.  Every operation that
touches a tensor with ``requires_grad`` appends the result to a thread-local
tape; :func:`backward` replays that tape in reverse and then clears it.
"""

from __future__ import annotations

import contextlib
import enum
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ShapeError


class Precision(enum.Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.F32 else np.float64)

    @classmethod
    def parse(cls, value: "Precision | str | np.dtype | type") -> "Precision":
        if isinstance(value, Precision):
            return value
        if isinstance(value, str) and value.lower() in ("f32", "f64", "float32", "float64"):
            return cls.F64 if "64" in value else cls.F32
        dt = np.dtype(value)
        if dt == np.float64:
            return cls.F64
        if dt == np.float32:
            return cls.F32
        raise ConfigError(f"unsupported precision {value!r}")


_DEFAULT = Precision.F32


def set_default_precision(p: Precision | str) -> None:
    global _DEFAULT
    _DEFAULT = Precision.parse(p)


def default_dtype() -> np.dtype:
    return _DEFAULT.dtype


@contextlib.contextmanager
def precision(p: Precision | str):
    global _DEFAULT
    old = _DEFAULT
    _DEFAULT = Precision.parse(p)
    try:
        yield
    finally:
        _DEFAULT = old


class _TapeState(threading.local):
    def __init__(self):
        self.nodes: list[Tensor] = []
        self.enabled = True


_state = _TapeState()


def tape_nodes() -> list["Tensor"]:
    return list(_state.nodes)


def reset_tape() -> None:
    """Drop every recorded node (call between optimisation steps)."""
    for node in _state.nodes:
        node._backward = None
        node._parents = ()
    _state.nodes.clear()


@contextlib.contextmanager
def no_grad():
    prev = _state.enabled
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def grad_enabled() -> bool:
    return _state.enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents", "_saved", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
        self.data = np.array(data, dtype=dtype, copy=True) if not isinstance(data, np.ndarray) else data.astype(dtype, copy=False)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[np.ndarray], None] | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._saved: tuple[np.ndarray, ...] = ()
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

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

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operator sugar ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self):
        return tsum(self)

    def mean(self):
        return mean(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        arr = np.asarray(x)
        dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents: Sequence[Tensor], backward_fn, saved: Iterable[np.ndarray] = ()) -> Tensor:
    out = Tensor(data)
    if _state.enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._saved = tuple(saved)
        _state.nodes.append(out)
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {t.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every ``requires_grad`` ancestor of a scalar loss.

    The tape is cleared afterwards.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor with requires_grad")
    nodes = _state.nodes
    loss.grad = np.ones_like(loss.data)
    for node in reversed(nodes):
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)
    reset_tape()


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b, a.dtype)
    _broadcast_shape(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _record(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _record(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _record(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, a.dtype)
    _broadcast_shape(a, b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _unbroadcast(g / b.data, a.shape))
        _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: _accumulate(a, -g))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0).astype(a.dtype), (a,), lambda g: _accumulate(a, g * mask))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data).astype(a.dtype)
    return _record(s, (a,), lambda g: _accumulate(a, g * s * (1 - s)))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data).astype(a.dtype)
    return _record(a.data * s, (a,), lambda g: _accumulate(a, g * (s * (1 + a.data * (1 - s)))))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0, a.data).astype(a.dtype)
    return _record(out, (a,), lambda g: _accumulate(a, g * _sigmoid(a.data)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: _accumulate(a, g * out))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def log10(a) -> Tensor:
    a = as_tensor(a)
    inv_ln10 = 1.0 / np.log(10.0)
    return _record(np.log10(a.data), (a,), lambda g: _accumulate(a, g * inv_ln10 / a.data))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: _accumulate(a, g * 0.5 / out))


def maximum(a, floor: float) -> Tensor:
    """``max(a, floor)`` with a constant floor; gradient is zero where clamped.

    NaN passes through so a diverged loss is not hidden by the floor.
    """
    a = as_tensor(a)
    keep = ~(a.data < floor)
    out = np.where(keep, a.data, floor).astype(a.dtype)
    return _record(out, (a,), lambda g: _accumulate(a, g * keep))


def flip_time(a) -> Tensor:
    """Reverse the last (temporal) axis."""
    a = as_tensor(a)
    return _record(a.data[..., ::-1].copy(), (a,), lambda g: _accumulate(a, g[..., ::-1]))


# ---------------------------------------------------------------------------
# reductions and indexing


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.asarray(a.data.sum(), dtype=a.dtype), (a,), lambda g: _accumulate(a, np.broadcast_to(g, a.shape)))


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size

    def bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _record(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bw)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        _accumulate(a, full)

    return _record(np.array(out, copy=True), (a,), bw)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack needs equal shapes, got {sorted(shapes)}")

    def bw(g):
        for i, t in enumerate(ts):
            _accumulate(t, g[i])

    return _record(np.stack([t.data for t in ts]), ts, bw)


def pad_time(a, left: int, right: int) -> Tensor:
    """Zero-pad (positive) or crop (negative) the last axis on each side."""
    a = as_tensor(a)
    L = a.shape[-1]
    src_lo, src_hi = max(0, -left), L - max(0, -right)
    if src_hi <= src_lo:
        raise ShapeError(f"cropping {-left},{-right} leaves nothing of length {L}")
    core = a.data[..., src_lo:src_hi]
    out = np.pad(core, [(0, 0)] * (a.ndim - 1) + [(max(0, left), max(0, right))])
    dst_lo = max(0, left)

    def bw(g):
        full = np.zeros_like(a.data)
        full[..., src_lo:src_hi] = g[..., dst_lo : dst_lo + (src_hi - src_lo)]
        _accumulate(a, full)

    return _record(out, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra and convolutions


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _record(a.data @ b.data, (a, b), bw)


PADDING_MODES = ("valid", "same-left", "same-centered", "same-right")


def conv_padding(kernel_size: int, stride: int, mode: str) -> tuple[int, int]:
    """Left/right zero padding used by :func:`conv1d` for a padding mode.

    The ``same-*`` modes pad ``K - stride`` samples in total so that an input
    length divisible by ``stride`` maps to exactly ``L / stride`` outputs.
    """
    if mode not in PADDING_MODES:
        raise ConfigError(f"unknown padding mode {mode!r}; expected one of {PADDING_MODES}")
    if kernel_size < 1 or stride < 1:
        raise ConfigError(f"kernel_size and stride must be >= 1, got K={kernel_size}, stride={stride}")
    if mode == "valid":
        return 0, 0
    total = kernel_size - stride
    if total < 0:
        raise ConfigError(f"kernel_size {kernel_size} < stride {stride} is incompatible with {mode} padding")
    if mode == "same-left":
        return total, 0
    if mode == "same-right":
        return 0, total
    return total // 2, total - total // 2


def conv_output_length(length: int, kernel_size: int, stride: int, mode: str) -> int:
    left, right = conv_padding(kernel_size, stride, mode)
    return (length + left + right - kernel_size) // stride + 1


def conv1d(x, w, bias=None, stride: int = 1, padding: str = "valid") -> Tensor:
    """Cross-correlation of ``x[C_in, L]`` with ``w[C_out, C_in, K]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv1d expects x[C_in, L] and w[C_out, C_in, K]; got {x.shape} and {w.shape}")
    C_out, C_in, K = w.shape
    left, right = conv_padding(K, stride, padding)
    L = x.shape[1]
    Lp = L + left + right
    if Lp < K:
        raise ShapeError(f"conv1d input of length {L} (padded {Lp}) is shorter than kernel {K}; output would be empty")
    L_out = (Lp - K) // stride + 1
    xp = np.pad(x.data, ((0, 0), (left, right))) if (left or right) else x.data
    # cols[c, j, k] = xp[c, j*stride + k]
    cols = np.lib.stride_tricks.sliding_window_view(xp, K, axis=1)[:, : (L_out - 1) * stride + 1 : stride, :]
    cols2 = np.ascontiguousarray(cols.transpose(1, 0, 2)).reshape(L_out, C_in * K)
    w2 = w.data.reshape(C_out, C_in * K)
    out = w2 @ cols2.T
    parents: list[Tensor] = [x, w]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        out = out + b.data[:, None]
        parents.append(b)

    def bw(g):
        if w.requires_grad:
            _accumulate(w, (g @ cols2).reshape(w.shape))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=1))
        if x.requires_grad:
            dcols = (g.T @ w2).reshape(L_out, C_in, K)
            dxp = np.zeros_like(xp)
            span = (L_out - 1) * stride + 1
            for k in range(K):
                dxp[:, k : k + span : stride] += dcols[:, :, k].T
            _accumulate(x, dxp[:, left : left + L])

    return _record(out, parents, bw, saved=(cols2,))


def conv_transpose1d(x, w, bias=None, stride: int = 1, padding: str = "valid", output_length: int | None = None) -> Tensor:
    """Adjoint of :func:`conv1d` with the same ``stride`` and ``padding``.

    ``w`` has shape ``[C_in, C_out, K]`` where ``C_in`` is the channel count
    of ``x``; a conv1d weight ``[C_out', C_in', K]`` used here maps back from
    ``C_out'`` to ``C_in'`` channels.  ``output_length`` appends zero columns
    for inputs whose conv1d length was not divisible by the stride.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"conv_transpose1d expects x[C_in, L] and w[C_in, C_out, K]; got {x.shape} and {w.shape}")
    C_in, C_out, K = w.shape
    if K < stride:
        raise ConfigError(f"kernel_size {K} < stride {stride} leaves gaps in the transposed convolution")
    left, right = conv_padding(K, stride, padding)
    L = x.shape[1]
    full_len = (L - 1) * stride + K
    natural = full_len - left - right
    if natural < 1:
        raise ShapeError(f"conv_transpose1d output would be empty for input length {L}")
    out_len = natural if output_length is None else int(output_length)
    if not natural <= out_len < natural + stride:
        raise ShapeError(f"output_length {out_len} incompatible with natural length {natural} at stride {stride}")
    # taps[k] = w[:, :, k].T @ x  -> (K, C_out, L)
    w2 = w.data.transpose(2, 1, 0).reshape(K * C_out, C_in)
    taps = (w2 @ x.data).reshape(K, C_out, L)
    full = np.zeros((C_out, full_len), dtype=x.dtype)
    span = (L - 1) * stride + 1
    for k in range(K):
        full[:, k : k + span : stride] += taps[k]
    out = full[:, left : left + natural]
    if out_len > natural:
        out = np.pad(out, ((0, 0), (0, out_len - natural)))
    out = np.ascontiguousarray(out)
    parents: list[Tensor] = [x, w]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        out = out + b.data[:, None]
        parents.append(b)

    def bw(g):
        gfull = np.zeros((C_out, full_len), dtype=g.dtype)
        gfull[:, left : left + natural] = g[:, :natural]
        # gcols[k] = gfull[:, k::stride][:, :L]
        gcols = np.stack([gfull[:, k : k + span : stride] for k in range(K)])  # (K, C_out, L)
        if x.requires_grad:
            _accumulate(x, w2.T @ gcols.reshape(K * C_out, L))
        if w.requires_grad:
            dw2 = gcols.reshape(K * C_out, L) @ x.data.T  # (K*C_out, C_in)
            _accumulate(w, dw2.reshape(K, C_out, C_in).transpose(2, 1, 0))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=1))

    return _record(out, parents, bw)


def depthwise_conv1d(x, w, bias=None, padding: str = "same-left") -> Tensor:
    """Per-channel convolution, stride 1: ``x[C, L]`` with ``w[C, K]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"depthwise_conv1d expects x[C, L] and w[C, K]; got {x.shape} and {w.shape}")
    C, K = w.shape
    left, right = conv_padding(K, 1, padding)
    L = x.shape[1]
    if L + left + right < K:
        raise ShapeError(f"depthwise_conv1d input of length {L} shorter than kernel {K}")
    L_out = L + left + right - K + 1
    xp = np.pad(x.data, ((0, 0), (left, right)))
    out = np.zeros((C, L_out), dtype=x.dtype)
    for k in range(K):
        out += w.data[:, k : k + 1] * xp[:, k : k + L_out]
    parents: list[Tensor] = [x, w]
    b = None
    if bias is not None:
        b = as_tensor(bias)
        out += b.data[:, None]
        parents.append(b)

    def bw(g):
        if w.requires_grad:
            _accumulate(w, np.stack([(g * xp[:, k : k + L_out]).sum(axis=1) for k in range(K)], axis=1))
        if x.requires_grad:
            dxp = np.zeros_like(xp)
            for k in range(K):
                dxp[:, k : k + L_out] += w.data[:, k : k + 1] * g
            _accumulate(x, dxp[:, left : left + L])
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=1))

    return _record(out, parents, bw, saved=(xp,))


def rms_norm(x, weight, eps: float = 1e-5) -> Tensor:
    """Normalise each time step of ``x[C, L]`` by its RMS over channels."""
    x, weight = as_tensor(x), as_tensor(weight)
    C = x.shape[0]
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=0, keepdims=True) + eps)
    xhat = x.data * inv
    out = xhat * weight.data[:, None]

    def bw(g):
        if weight.requires_grad:
            _accumulate(weight, (g * xhat).sum(axis=1))
        if x.requires_grad:
            gx = g * weight.data[:, None]
            _accumulate(x, inv * (gx - xhat * (gx * xhat).sum(axis=0, keepdims=True) / C))

    return _record(out.astype(x.dtype), (x, weight), bw, saved=(xhat,))


def add_channel_bias(x, b) -> Tensor:
    """``x[C, L] + b[C]`` broadcast over time."""
    x, b = as_tensor(x), as_tensor(b)
    if x.ndim != 2 or b.shape != (x.shape[0],):
        raise ShapeError(f"channel bias of shape {b.shape} does not fit {x.shape}")

    def bw(g):
        _accumulate(x, g)
        _accumulate(b, g.sum(axis=1))

    return _record(x.data + b.data[:, None], (x, b), bw)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, saved: Iterable[np.ndarray] = ()) -> Tensor:
    """Record an operation whose backward rule is supplied by another module.

    ``backward_fn(g)`` must return one gradient (or ``None``) per parent.
    """

    def bw(g):
        grads = backward_fn(g)
        for p, gp in zip(parents, grads):
            if gp is not None:
                _accumulate(p, gp)

    return _record(data, parents, bw, saved=saved)


def tape_bytes() -> int:
    """Bytes held by the current tape: node outputs plus saved buffers."""
    seen: set[int] = set()
    total = 0
    for node in _state.nodes:
        for arr in (node.data, *node._saved):
            base = arr
            while isinstance(base.base, np.ndarray):
                base = base.base
            if id(base) not in seen:
                seen.add(id(base))
                total += base.nbytes
    return total
