"""Dense tensor ops and a reverse-mode differentiation tape.

Activations live in time-major arrays [T, N, C, H, W]; every op applies the
same parameters at each timestep. Ops record themselves onto the active
:class:`Tape` (entered as a context manager) whenever an input requires a
gradient; :func:`backward` then replays the tape in reverse execution order,
which fixes the gradient accumulation order and makes backward deterministic.

The spike nonlinearity is the one non-standard node: its forward is a hard
threshold and its recorded backward rule is a rectangular window around the
threshold instead of the (zero almost everywhere) true derivative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K

DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    """Immutable-by-convention ndarray wrapper tracked by the tape."""

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


@dataclass
class SurrogateConfig:
    """Rectangular surrogate: width `a` around firing threshold `theta`."""

    a: float = 1.0
    theta: float = 1.0

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError(f"surrogate width a must be > 0, got {self.a}")
        if not np.isfinite(self.theta):
            raise ValueError(f"threshold must be finite, got {self.theta}")


class Tape:
    """Ordered record of executed ops; reverse replay yields gradients."""

    def __init__(self):
        self._nodes = []      # (out, inputs, backward_fn) in execution order
        self._produced = set()

    def __enter__(self):
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self):
        return len(self._nodes)


_TAPE_STACK: list[Tape] = []


def _active_tape():
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out, inputs, backward_fn):
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, inputs, backward_fn))
        tape._produced.add(id(out))
    return out


class GradStore:
    """value-id -> gradient array, produced by one backward sweep."""

    def __init__(self):
        self._grads = {}  # id(tensor) -> (tensor, ndarray); tensor kept alive

    def _accumulate(self, tensor, grad):
        key = id(tensor)
        held = self._grads.get(key)
        if held is None:
            self._grads[key] = (tensor, grad)
        else:
            self._grads[key] = (tensor, held[1] + grad)

    def get(self, tensor):
        held = self._grads.get(id(tensor))
        return None if held is None else held[1]

    def grad_or_zero(self, tensor):
        g = self.get(tensor)
        return np.zeros_like(tensor.data) if g is None else g

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __getitem__(self, tensor):
        g = self.get(tensor)
        if g is None:
            raise KeyError(f"no gradient recorded for {tensor!r}")
        return g


def backward(tape: Tape, loss: Tensor) -> GradStore:
    """Reverse sweep from a scalar loss produced on `tape`.

    Node order is fixed by forward execution, so repeated sweeps of the
    same tape give bitwise-identical gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.data.shape}")
    if id(loss) not in tape._produced:
        raise ValueError("loss value was not produced on this tape")
    store = GradStore()
    store._accumulate(loss, np.ones_like(loss.data))
    for out, inputs, backward_fn in reversed(tape._nodes):
        g_out = store.get(out)
        if g_out is None:
            continue
        grads = backward_fn(g_out)
        for inp, g in zip(inputs, grads):
            if g is not None and inp.requires_grad:
                store._accumulate(inp, g)
    return store


def assert_finite(t, what="tensor"):
    data = t.data if isinstance(t, Tensor) else t
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{what} contains non-finite elements")


# ---------------------------------------------------------------------------
# elementwise / shape ops

def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def _unbroadcast(grad, shape):
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data - b.data)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(out, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    out = Tensor(a.data * s)

    def bwd(g):
        return (g * s,)

    return _record(out, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bwd(g):
        return (g.reshape(a.shape),)

    return _record(out, (a,), bwd)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def timestep(a: Tensor, t: int) -> Tensor:
    """Slice timestep t from a time-major tensor."""
    out = Tensor(a.data[t])

    def bwd(g):
        gx = np.zeros_like(a.data)
        gx[t] = g
        return (gx,)

    return _record(out, (a,), bwd)


def stack_timesteps(slices) -> Tensor:
    slices = list(slices)
    if not slices:
        raise ValueError("cannot stack an empty timestep list")
    out = Tensor(np.stack([s.data for s in slices]))

    def bwd(g):
        return tuple(g[t] for t in range(len(slices)))

    return _record(out, tuple(slices), bwd)


# ---------------------------------------------------------------------------
# reductions

def sum_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if not np.isscalar(axes) else (axes,)
    out = Tensor(a.data.sum(axis=axes))

    def bwd(g):
        gk = np.expand_dims(g, axes)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _record(out, (a,), bwd)


def mean_axes(a: Tensor, axes) -> Tensor:
    axes = tuple(axes) if not np.isscalar(axes) else (axes,)
    n = int(np.prod([a.shape[ax] for ax in axes]))
    out = Tensor(a.data.mean(axis=axes))

    def bwd(g):
        gk = np.expand_dims(g / n, axes)
        return (np.broadcast_to(gk, a.shape).copy(),)

    return _record(out, (a,), bwd)


def time_mean(a: Tensor) -> Tensor:
    """Mean over the leading (timestep) axis; the rate decoder."""
    if a.shape[0] == 0:
        raise ValueError("cannot rate-decode over zero timesteps")
    return mean_axes(a, (0,))


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul needs (m,k) @ (k,n), got {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g):
        return g @ b.data.T, a.data.T @ g

    return _record(out, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Affine map on the trailing feature axis; weights shared across T."""
    n_in = x.shape[-1]
    if w.data.ndim != 2 or w.shape[1] != n_in:
        raise ValueError(
            f"linear weight {w.shape} does not match input feature dim {x.shape}"
        )
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"linear bias {b.shape} does not match weight {w.shape}")
    x2 = x.data.reshape(-1, n_in)
    out2 = x2 @ w.data.T
    if b is not None:
        out2 = out2 + b.data
    out = Tensor(out2.reshape(x.shape[:-1] + (w.shape[0],)))

    def bwd(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, lambda g: bwd(g)[: len(inputs)])


# ---------------------------------------------------------------------------
# spatial ops on [T, N, C, H, W]

def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """Per-timestep 2-D convolution with shared weights (im2col + GEMM)."""
    if x.data.ndim != 5:
        raise ValueError(f"conv2d expects [T,N,C,H,W], got shape {x.shape}")
    if w.data.ndim != 4:
        raise ValueError(f"conv2d kernel must be [Cout,Cin,kh,kw], got {w.shape}")
    T, N, C, H, W = x.shape
    c_out, c_in, kh, kw = w.shape
    if c_in != C:
        raise ValueError(f"input channels {x.shape} do not match kernel {w.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError(f"stride must be >= 1, got {(sh, sw)}")
    oh = (H + 2 * ph - kh) // sh + 1
    ow = (W + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(
            f"kernel {w.shape} does not fit input {x.shape} with padding {(ph, pw)}"
        )

    x4 = x.data.reshape(T * N, C, H, W)
    xp = np.pad(x4, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x4
    cols = K.im2col(xp, kh, kw, sh, sw)             # (TN*oh*ow, C*kh*kw)
    w2 = w.data.reshape(c_out, -1)
    out2 = cols @ w2.T
    if b is not None:
        out2 = out2 + b.data
    out4 = np.ascontiguousarray(out2.reshape(T * N, oh, ow, c_out).transpose(0, 3, 1, 2))
    out = Tensor(out4.reshape(T, N, c_out, oh, ow))

    def bwd(g):
        g2 = np.ascontiguousarray(
            g.reshape(T * N, c_out, oh, ow).transpose(0, 2, 3, 1)
        ).reshape(-1, c_out)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gcols = g2 @ w2
        gxp = K.col2im(gcols, xp.shape, kh, kw, sh, sw)
        gx = gxp[:, :, ph:ph + H, pw:pw + W] if ph or pw else gxp
        return gx.reshape(x.shape), gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return _record(out, inputs, lambda g: bwd(g)[: len(inputs)])


def avgpool2d(x: Tensor, window, stride=None) -> Tensor:
    if x.data.ndim != 5:
        raise ValueError(f"avgpool2d expects [T,N,C,H,W], got shape {x.shape}")
    kh, kw = _pair(window)
    sh, sw = (kh, kw) if stride is None else _pair(stride)
    T, N, C, H, W = x.shape
    if kh > H or kw > W:
        raise ValueError(f"pool window {(kh, kw)} exceeds spatial dims {(H, W)}")
    oh = (H - kh) // sh + 1
    ow = (W - kw) // sw + 1
    x4 = x.data.reshape(T * N, C, H, W)
    if sh == kh and sw == kw and H % kh == 0 and W % kw == 0:
        out4 = x4.reshape(T * N, C, oh, kh, ow, kw).mean(axis=(3, 5))
    else:
        from numpy.lib.stride_tricks import sliding_window_view

        win = sliding_window_view(x4, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
        out4 = win.mean(axis=(4, 5))
    out = Tensor(out4.reshape(T, N, C, oh, ow))

    def bwd(g):
        g4 = g.reshape(T * N, C, oh, ow) / (kh * kw)
        gx = np.zeros_like(x4)
        for ki in range(kh):
            for kj in range(kw):
                gx[:, :, ki:ki + sh * oh:sh, kj:kj + sw * ow:sw] += g4
        return (gx.reshape(x.shape),)

    return _record(out, (x,), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[T,N,C,H,W] -> [T,N,C] spatial mean."""
    if x.data.ndim != 5:
        raise ValueError(f"global_avg_pool expects [T,N,C,H,W], got shape {x.shape}")
    return mean_axes(x, (3, 4))


# ---------------------------------------------------------------------------
# nonlinearities and losses

def softmax(x: Tensor, axis: int = 0) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (x,), bwd)


def spike(h: Tensor, cfg: SurrogateConfig) -> Tensor:
    """Hard threshold forward; rectangular surrogate on the tape.

    Fires (1) when the potential reaches theta. The recorded local gradient
    is 1/a inside the open window |h - theta| < a/2 and 0 elsewhere, so the
    window boundary itself gets zero gradient.
    """
    s = (h.data >= cfg.theta).astype(h.data.dtype)
    out = Tensor(s)

    def bwd(g):
        window = (np.abs(h.data - cfg.theta) < cfg.a / 2).astype(h.data.dtype)
        return (g * (window / cfg.a),)

    return _record(out, (h,), bwd)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [N,K] logits, got {logits.shape}")
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0,{k}), got range "
                         f"[{labels.min()},{labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    picked = z[np.arange(n), labels]
    out = Tensor(np.asarray((lse - picked).mean(), dtype=logits.dtype))

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[np.arange(n), labels] -= 1.0
        return ((g / n) * p,)

    return _record(out, (logits,), bwd)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Channel batch norm over (T, N, H, W) of a [T,N,C,H,W] tensor.

    Training mode normalizes with batch statistics and folds them into
    `state` (first batch seeds the running stats, later ones blend with
    `momentum`). Eval mode uses the running stats and refuses to run
    before any training batch initialized them.
    """
    if x.data.ndim != 5:
        raise ValueError(f"batch_norm expects [T,N,C,H,W], got shape {x.shape}")
    c = x.shape[2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    axes = (0, 1, 3, 4)
    expand = (slice(None) if i == 2 else None for i in range(5))
    cview = tuple(expand)

    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if state.initialized:
            state.mean = (1.0 - momentum) * state.mean + momentum * mean
            state.var = (1.0 - momentum) * state.var + momentum * var
        else:
            state.mean = mean.copy()
            state.var = var.copy()
            state.initialized = True
    else:
        if not state.initialized:
            raise RuntimeError(
                "batch_norm in eval mode before any training batch: running "
                "statistics are uninitialized"
            )
        mean, var = state.mean, state.var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[cview]) * inv_std[cview]
    out = Tensor(gamma.data[cview] * xhat + beta.data[cview])

    m = x.data.size // c

    def bwd(g):
        gbeta = g.sum(axis=axes)
        ggamma = (g * xhat).sum(axis=axes)
        gxhat = g * gamma.data[cview]
        if training:
            gx = (inv_std[cview] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes)[cview]
                - xhat * (gxhat * xhat).sum(axis=axes)[cview]
            )
        else:
            gx = gxhat * inv_std[cview]
        return gx, ggamma, gbeta

    return _record(out, (x, gamma, beta), bwd)


@dataclass
class BatchNormState:
    """Running statistics buffer for one batch-norm layer."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    var: np.ndarray = field(default_factory=lambda: np.zeros(0))
    initialized: bool = False
