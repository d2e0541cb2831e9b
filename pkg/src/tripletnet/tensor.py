"""Dense tensors with tape-based reverse-mode differentiation.

Every operation is a pure function of its inputs.  When a :class:`Tape` is
active (``with Tape() as tape:``) and at least one operand is tracked, the
operation appends an entry holding its operands and a closure mapping the
output gradient to operand gradients.  :meth:`Tape.backward` replays the
entries in reverse and accumulates into :class:`Parameter.grad`.

Plain :class:`Tensor` inputs are constants; only parameters (and values
derived from them on the active tape) receive gradients.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

# Squared-norm floor inside cosine_distance.  Chosen as (1e-15)**2 so that
# cos(u, u) stays within 1e-12 of zero for ||u|| >= 1e-6 while a collapsed
# embedding still yields a finite distance of exactly 1.
NORM_FLOOR_SQ = 1e-30


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


class Parameter(Tensor):
    """A learnable leaf tensor with an accumulated gradient of equal shape."""

    __slots__ = ("grad", "name")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, dtype=dtype)
        self.data = np.array(self.data)  # own the buffer
        self.grad = np.zeros_like(self.data)
        self.name = name

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of one forward evaluation.

    A tape may be replayed exactly once; build a new tape per forward pass.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple, Callable]] = []
        self._produced: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed or self.entries:
            raise TapeError("a tape is bound to a single forward evaluation")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def tracks(self, t) -> bool:
        return isinstance(t, Parameter) or id(t) in self._produced

    def record(self, out: Tensor, inputs: tuple, backward_fn: Callable) -> None:
        self.entries.append((out, inputs, backward_fn))
        self._produced.add(id(out))

    def backward(self, output: Tensor) -> None:
        backward(self, output)


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(param) into every parameter reached by ``tape``."""
    if tape._consumed:
        raise TapeError("tape already replayed; run a fresh forward pass")
    if output.data.size != 1:
        raise TapeError(f"backward needs a scalar output, got shape {output.shape}")
    if isinstance(output, Parameter):
        output.grad += 1.0
        tape._consumed = True
        return
    if id(output) not in tape._produced:
        raise TapeError("output was not produced under this tape")
    tape._consumed = True
    grads: dict[int, np.ndarray] = {id(output): np.ones_like(output.data)}
    for out, inputs, fn in reversed(tape.entries):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for x, gx in zip(inputs, fn(g)):
            if gx is None or not tape.tracks(x):
                continue
            if isinstance(x, Parameter):
                x.grad += gx
            elif id(x) in grads:
                grads[id(x)] = grads[id(x)] + gx
            else:
                grads[id(x)] = gx


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, inputs: tuple, backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tape.tracks(x) for x in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def relu(x) -> Tensor:
    """Elementwise max(0, x); the subgradient at exactly 0 is 0."""
    x = _as_tensor(x)
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,),
                   lambda g: (g * mask,))


# ------------------------------------------------------------------ reductions


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    shape = x.shape

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis), 1.0 / n)


# -------------------------------------------------------------------- shaping


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def take(x, index) -> Tensor:
    """Basic or integer-array indexing along leading axes."""
    x = _as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), bw)


def concat(tensors: Sequence, axis: int = 1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in ts]}") from exc
    return _result(data, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


# ------------------------------------------------------------------ linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def conv2d(x, kernels, stride: int = 1) -> Tensor:
    """Valid cross-correlation of ``B×C×H×W`` input with ``F×C×kh×kw`` kernels."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    if x.data.ndim != 4 or kernels.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d operands, got {x.shape} and {kernels.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    B, C, H, W = x.shape
    F, Ck, kh, kw = kernels.shape
    if Ck != C:
        raise ShapeError(f"conv2d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if kh > H or kw > W:
        raise ShapeError(f"kernel {kernels.shape} larger than input {x.shape}")
    Ho = (H - kh) // stride + 1
    Wo = (W - kw) // stride + 1
    xd, kd = x.data, kernels.data
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # cols: (B, Ho, Wo, C*kh*kw)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B, Ho, Wo, C * kh * kw)
    kmat = kd.reshape(F, C * kh * kw)
    out = (cols @ kmat.T).transpose(0, 3, 1, 2)
    tape = active_tape()
    need_x = tape is not None and tape.tracks(x)

    def bw(g):
        gt = g.transpose(0, 2, 3, 1)  # B, Ho, Wo, F
        gk = (gt.reshape(-1, F).T @ cols.reshape(-1, C * kh * kw)).reshape(kd.shape)
        if not need_x:
            return None, gk
        gcols = np.ascontiguousarray((gt @ kmat).reshape(B, Ho, Wo, C, kh, kw).transpose(4, 5, 0, 3, 1, 2))
        gx = np.zeros_like(xd)
        hi, wi = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + hi:stride, j:j + wi:stride] += gcols[i, j]
        return gx, gk

    return _result(np.ascontiguousarray(out), (x, kernels), bw)


# --------------------------------------------------------------------- losses


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label], max-shifted for stability."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be B×C, got {logits.shape}")
    B, C = logits.shape
    if labels.shape != (B,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {B}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range [0, {C})")
    logp = log_softmax(logits.data)
    rows = np.arange(B)
    loss = -logp[rows, labels].mean()

    def bw(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g / B),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


def cosine_distance(u, v) -> Tensor:
    """1 - cos(u, v) along the last axis; vectors give a scalar, B×n rows give B."""
    u, v = _as_tensor(u), _as_tensor(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine_distance shape mismatch: {u.shape} vs {v.shape}")
    ud, vd = u.data, v.data
    nu = np.sqrt(np.sum(ud * ud, axis=-1) + NORM_FLOOR_SQ)
    nv = np.sqrt(np.sum(vd * vd, axis=-1) + NORM_FLOOR_SQ)
    dot = np.sum(ud * vd, axis=-1)
    cos = dot / (nu * nv)
    out = np.clip(1.0 - cos, 0.0, 2.0)

    def bw(g):
        g = -np.asarray(g)[..., None]
        nu_, nv_, cos_ = nu[..., None], nv[..., None], cos[..., None]
        gu = g * (vd / (nu_ * nv_) - cos_ * ud / (nu_ * nu_))
        gv = g * (ud / (nu_ * nv_) - cos_ * vd / (nv_ * nv_))
        return gu, gv

    return _result(np.asarray(out, dtype=ud.dtype), (u, v), bw)


def pairwise_cosine_distance(x: np.ndarray) -> np.ndarray:
    """All-pairs cosine distance of the rows of ``x`` (no tape)."""
    x = np.asarray(x, dtype=np.float64)
    n = np.sqrt(np.sum(x * x, axis=1) + NORM_FLOOR_SQ)
    unit = x / n[:, None]
    return np.clip(1.0 - unit @ unit.T, 0.0, 2.0)


# --------------------------------------------------------------- gradient check


def grad_check(f: Callable[[Sequence[Parameter]], Tensor], params: Iterable[Parameter],
               eps: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps the parameter list to a scalar tensor.  The error for each
    coordinate is ``|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f(params)
    backward(tape, out)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        g_ad = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(params).data)
            flat[i] = orig - eps
            lo = float(f(params).data)
            flat[i] = orig
            g_fd = (hi - lo) / (2 * eps)
            err = abs(g_ad[i] - g_fd) / max(1e-8, abs(g_ad[i]) + abs(g_fd))
            worst = max(worst, err)
    return worst
