"""Dense float32 tensor math for the toy diffusion stack.

Kernels run on the CPU through numpy behind a thin wrapper that keeps two
promises the rest of the engine relies on: shapes are immutable after
construction, and every owned buffer allocation/release is reported to the
active :class:`AllocationTracker`, which is how peak-memory accounting
stays honest without a GPU.

All ops are deterministic; randomness enters only through :class:`Rng`,
a counter-based (Philox) generator so parallel workers can draw
independent, reproducible streams.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
import weakref

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class AccountingError(RuntimeError):
    """Raised when the allocation tracker's books stop balancing."""


class AllocationTracker:
    """Running (allocated - freed) byte counter with a high-water mark.

    Installed per generation via :func:`track_allocations`; concurrent
    generations each scope their own tracker through a context variable.
    """

    def __init__(self):
        self._current = 0
        self._peak = 0

    def track_alloc(self, nbytes: int) -> None:
        self._current += nbytes
        if self._current > self._peak:
            self._peak = self._current

    def track_free(self, nbytes: int) -> None:
        self._current -= nbytes
        if self._current < 0:
            raise AccountingError(
                f"freed {nbytes} bytes more than were allocated (balance {self._current})"
            )

    def peak(self) -> int:
        return self._peak

    def current(self) -> int:
        return self._current

    def reset(self) -> None:
        self._current = 0
        self._peak = 0


_active_tracker: contextvars.ContextVar[AllocationTracker | None] = contextvars.ContextVar(
    "diffserve_alloc_tracker", default=None
)


@contextlib.contextmanager
def track_allocations(tracker: AllocationTracker):
    """Install ``tracker`` as the accounting sink for Tensor buffers."""
    token = _active_tracker.set(tracker)
    try:
        yield tracker
    finally:
        _active_tracker.reset(token)


def active_tracker() -> AllocationTracker | None:
    return _active_tracker.get()


class Tensor:
    """Dense n-dimensional float32 array, row-major.

    The wrapped buffer is owned by this object; views created through
    :meth:`reshape` share their parent's storage and are not re-counted
    by the tracker. Data is mutable only through the explicitly in-place
    ops (the ``out=`` variants and :meth:`copy_from`).
    """

    __slots__ = ("_a", "__weakref__")

    def __init__(self, data, *, _wrap: np.ndarray | None = None):
        if _wrap is not None:
            a = _wrap
        else:
            a = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
        self._a = a
        if a.base is None:
            tracker = _active_tracker.get()
            if tracker is not None:
                tracker.track_alloc(a.nbytes)
                weakref.finalize(self, tracker.track_free, a.nbytes)

    # -- constructors -------------------------------------------------

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls(None, _wrap=np.zeros(shape, dtype=np.float32))

    @classmethod
    def empty(cls, shape) -> "Tensor":
        return cls(None, _wrap=np.empty(shape, dtype=np.float32))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls(None, _wrap=np.full(shape, value, dtype=np.float32))

    @classmethod
    def from_numpy(cls, a: np.ndarray, copy: bool = True) -> "Tensor":
        a = np.asarray(a, dtype=np.float32)
        if copy:
            a = a.copy()
        else:
            a = np.ascontiguousarray(a)
        return cls(None, _wrap=a)

    # -- views and access ---------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self._a.shape

    @property
    def ndim(self) -> int:
        return self._a.ndim

    @property
    def size(self) -> int:
        return self._a.size

    @property
    def nbytes(self) -> int:
        return self._a.nbytes

    @property
    def data(self) -> np.ndarray:
        """Flat row-major float32 view of the buffer."""
        return self._a.reshape(-1)

    def np(self) -> np.ndarray:
        """The shaped backing array. Views must not outlive this Tensor."""
        return self._a

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Tensor(None, _wrap=self._a.reshape(shape))

    def copy(self) -> "Tensor":
        return Tensor(None, _wrap=self._a.copy())

    def copy_from(self, other: "Tensor") -> "Tensor":
        """In-place overwrite of this buffer with ``other``'s values."""
        if self._a.shape != other._a.shape:
            raise ShapeError(f"copy_from: shape {other.shape} into {self.shape}")
        np.copyto(self._a, other._a)
        return self

    def item(self) -> float:
        return float(self._a.reshape(-1)[0]) if self._a.size == 1 else float(self._a.item())

    def tolist(self):
        return self._a.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def _out_array(out: Tensor | None, shape) -> tuple[np.ndarray, Tensor]:
    if out is None:
        t = Tensor.empty(shape)
        return t._a, t
    if out._a.shape != tuple(shape):
        raise ShapeError(f"out has shape {out.shape}, expected {tuple(shape)}")
    return out._a, out


# -- element-wise -----------------------------------------------------


def add(a: Tensor, b: Tensor, out: Tensor | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    dst, t = _out_array(out, a.shape)
    np.add(a._a, b._a, out=dst)
    return t


def sub(a: Tensor, b: Tensor, out: Tensor | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}")
    dst, t = _out_array(out, a.shape)
    np.subtract(a._a, b._a, out=dst)
    return t


def mul(a: Tensor, b: Tensor, out: Tensor | None = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}")
    dst, t = _out_array(out, a.shape)
    np.multiply(a._a, b._a, out=dst)
    return t


def scale(a: Tensor, s: float, out: Tensor | None = None) -> Tensor:
    dst, t = _out_array(out, a.shape)
    np.multiply(a._a, np.float32(s), out=dst)
    return t


def divide_scalar(a: Tensor, s: float, out: Tensor | None = None) -> Tensor:
    dst, t = _out_array(out, a.shape)
    np.divide(a._a, np.float32(s), out=dst)
    return t


def clamp(a: Tensor, lo: float, hi: float, out: Tensor | None = None) -> Tensor:
    dst, t = _out_array(out, a.shape)
    np.clip(a._a, lo, hi, out=dst)
    return t


def silu(a: Tensor, out: Tensor | None = None) -> Tensor:
    """x * sigmoid(x)."""
    dst, t = _out_array(out, a.shape)
    # exp may overflow to inf for very negative x; the product still
    # converges to the correct limit (0), so the warning is suppressed
    with np.errstate(over="ignore"):
        np.multiply(a._a, 1.0 / (1.0 + np.exp(-a._a)), out=dst)
    return t


def gelu(a: Tensor, out: Tensor | None = None) -> Tensor:
    """Tanh-approximation GELU (the convention transformer stacks use)."""
    dst, t = _out_array(out, a.shape)
    x = a._a
    inner = np.float32(math.sqrt(2.0 / math.pi)) * (x + np.float32(0.044715) * x * x * x)
    np.multiply(np.float32(0.5) * x, 1.0 + np.tanh(inner), out=dst)
    return t


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    return Tensor(None, _wrap=np.concatenate([t._a for t in tensors], axis=axis))


def take_rows(table: Tensor, ids) -> Tensor:
    """Gather rows of a 2-D table by integer index (embedding lookup)."""
    return Tensor(None, _wrap=np.ascontiguousarray(table._a[np.asarray(ids, dtype=np.int64)]))


# -- linear algebra ---------------------------------------------------


def matmul(a: Tensor, b: Tensor, out: Tensor | None = None) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree: {a.shape} x {b.shape}")
    dst, t = _out_array(out, (a.shape[0], b.shape[1]))
    np.matmul(a._a, b._a, out=dst)
    return t


def linear(x: Tensor, w: Tensor, b: Tensor | None = None, out: Tensor | None = None) -> Tensor:
    """y = x @ w.T (+ b) with w stored (out_features, in_features)."""
    if x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape} vs weight {w.shape}")
    dst, t = _out_array(out, x.shape[:-1] + (w.shape[0],))
    np.matmul(x._a, w._a.T, out=dst)
    if b is not None:
        np.add(dst, b._a, out=dst)
    return t


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a 2-D tensor, max-shifted for stability."""
    a = x._a
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    e /= e.sum(axis=1, keepdims=True)
    return Tensor(None, _wrap=e.astype(np.float32, copy=False))


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention: softmax(q k^T / sqrt(d)) v.

    q is (n, d); k and v are (m, d). Each output row is a convex
    combination of rows of v.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects 2-D q/k/v, got {q.shape}/{k.shape}/{v.shape}")
    if q.shape[1] != k.shape[1]:
        raise ShapeError(f"attention: q dim {q.shape} vs k dim {k.shape}")
    if k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention: k rows {k.shape} vs v rows {v.shape}")
    d = q.shape[1]
    scores = q._a @ k._a.T
    scores /= np.float32(math.sqrt(d))
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return Tensor(None, _wrap=scores @ v._a)


# -- convolution and resampling ---------------------------------------


class ConvWorkspace:
    """Reusable scratch buffers for conv2d, shared across calls.

    Holds one arena per role (padded input, im2col patches, matmul
    output), each grown to the largest size any call has needed, plus
    the sliding-window views on the pad arena cached per conv geometry.

    The arenas are plain numpy buffers, like the temporaries the
    workspace-free path churns through np.pad and reshape copies; conv
    scratch sits outside Tensor accounting in either regime, so peak
    comparisons across the two stay like-for-like.

    Every value written through the workspace is identical to what the
    workspace-free path computes; only the storage is reused. Not
    thread-safe: one workspace per generation.
    """

    def __init__(self):
        self._arenas: dict[str, np.ndarray] = {}
        self._views: dict[tuple, tuple] = {}

    def _arena(self, role: str, n: int) -> np.ndarray:
        held = self._arenas.get(role)
        if held is None or held.size < n:
            # drop before reallocating so old and new never coexist
            self._arenas.pop(role, None)
            self._views.clear()
            self._arenas[role] = held = np.empty(n, dtype=np.float32)
        return held

    def conv_views(self, c_in, h, w, kh, kw, stride, padding, c_out):
        key = (c_in, h, w, kh, kw, stride, padding, c_out)
        views = self._views.get(key)
        if views is None:
            hp, wp = h + 2 * padding, w + 2 * padding
            ho = (hp - kh) // stride + 1
            wo = (wp - kw) // stride + 1
            n, k = ho * wo, c_in * kh * kw
            # sizing requests may invalidate earlier views, so finish
            # all three before slicing any heads
            self._arena("pad", c_in * hp * wp)
            self._arena("patches", n * k)
            self._arena("y", n * c_out)
            pad3 = self._arena("pad", c_in * hp * wp)[: c_in * hp * wp].reshape(c_in, hp, wp)
            win5 = np.lib.stride_tricks.sliding_window_view(pad3, (kh, kw), axis=(1, 2))
            win5 = win5[:, ::stride, ::stride].transpose(1, 2, 0, 3, 4)
            # When the workspace-free path's reshape degenerates to a view
            # (1x1 kernels), hand the matmul the same strided layout; the
            # BLAS summation order depends on it, and matching it keeps the
            # two paths bit-identical.
            flat = win5.reshape(n, k)
            if np.shares_memory(flat, pad3):
                p5 = None
                p2 = flat
            else:
                head = self._arena("patches", n * k)[: n * k]
                p5 = head.reshape(ho, wo, c_in, kh, kw)
                p2 = head.reshape(n, k)
            y2 = self._arena("y", n * c_out)[: n * c_out].reshape(n, c_out)
            views = (pad3, win5, p5, p2, y2)
            self._views[key] = views
        return views


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    out: Tensor | None = None,
    ws: ConvWorkspace | None = None,
) -> Tensor:
    """2-D cross-correlation over x (C, H, W) with weight (O, C, kh, kw).

    Zero padding; output height = floor((H + 2p - kh) / stride) + 1.
    Passing a :class:`ConvWorkspace` reuses scratch buffers across calls;
    results are bit-identical either way.
    """
    if x.ndim != 3 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) and (O,C,kh,kw), got {x.shape} / {weight.shape}")
    c_in, h, w = x.shape
    c_out, c_w, kh, kw = weight.shape
    if c_w != c_in:
        raise ShapeError(f"conv2d: input channels {c_in} vs weight channels {c_w}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} (padding {padding})")
    if out is not None and out.shape != (c_out, ho, wo):
        raise ShapeError(f"conv2d: out has shape {out.shape}, expected {(c_out, ho, wo)}")

    if ws is not None:
        pad3, win5, p5, p2, y2 = ws.conv_views(c_in, h, w, kh, kw, stride, padding, c_out)
        if padding:
            pad3.fill(0.0)
        np.copyto(pad3[:, padding : padding + h, padding : padding + w], x._a)
        if p5 is not None:
            np.copyto(p5, win5)
        np.matmul(p2, weight._a.reshape(c_out, -1).T, out=y2)
        if bias is not None:
            y2 += bias._a
        if out is None:
            out = Tensor.empty((c_out, ho, wo))
        np.copyto(out._a.reshape(c_out, ho * wo), y2.T)
        return out

    xa = x._a
    if padding:
        xa = np.pad(xa, ((0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xa, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (C, ho, wo, kh, kw)
    patches = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    y = patches @ weight._a.reshape(c_out, -1).T  # (ho*wo, c_out)
    if bias is not None:
        y += bias._a
    y = y.T.reshape(c_out, ho, wo)

    if out is None:
        return Tensor(None, _wrap=np.ascontiguousarray(y))
    np.copyto(out._a, y)
    return out


def resize_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of the last two axes by an integer factor."""
    if factor < 1:
        raise ShapeError(f"resize_nearest: factor must be >= 1, got {factor}")
    a = np.repeat(np.repeat(x._a, factor, axis=-2), factor, axis=-1)
    return Tensor(None, _wrap=np.ascontiguousarray(a))


# -- normalization ----------------------------------------------------


def group_norm(
    x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    """Group normalization over a (C, H, W) tensor with per-channel affine."""
    c = x.shape[0]
    if c % groups != 0:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    a = x._a.reshape(groups, -1)
    mean = a.mean(axis=1, keepdims=True)
    var = a.var(axis=1, keepdims=True)
    normed = (a - mean) / np.sqrt(var + np.float32(eps))
    normed = normed.reshape(x.shape)
    y = normed * gamma._a.reshape(c, 1, 1) + beta._a.reshape(c, 1, 1)
    return Tensor(None, _wrap=y.astype(np.float32, copy=False))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis."""
    a = x._a
    mean = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    y = (a - mean) / np.sqrt(var + np.float32(eps)) * gamma._a + beta._a
    return Tensor(None, _wrap=y.astype(np.float32, copy=False))


# -- random streams ---------------------------------------------------


class Rng:
    """Counter-based random stream (Philox) keyed by (seed, stream).

    The same (seed, stream) pair replays the same draw sequence on the
    same build. `split` derives an independent stream for another owner;
    instances themselves are single-owner and must not be shared.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        key = np.array([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream & 0xFFFFFFFFFFFFFFFF],
                       dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, index: int) -> "Rng":
        return Rng(self.seed, self.stream + 1 + int(index))

    def normal(self, shape) -> Tensor:
        return Tensor(None, _wrap=self._gen.standard_normal(size=shape, dtype=np.float32))

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        a = self._gen.random(size=shape, dtype=np.float32) * np.float32(high - low) + np.float32(low)
        return Tensor(None, _wrap=a)

    def truncated_normal(self, shape, std: float = 0.02, bound: float = 2.0) -> Tensor:
        """Normal(0, std) with |x| > bound*std resampled (weight init)."""
        a = self._gen.standard_normal(size=shape, dtype=np.float32)
        for _ in range(64):
            mask = np.abs(a) > bound
            n = int(mask.sum())
            if n == 0:
                break
            a[mask] = self._gen.standard_normal(size=n, dtype=np.float32)
        np.clip(a, -bound, bound, out=a)
        return Tensor(None, _wrap=(a * np.float32(std)).astype(np.float32, copy=False))

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))
