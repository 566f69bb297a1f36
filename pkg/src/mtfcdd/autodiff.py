"""Dense tensors with reverse-mode differentiation.

All numerics in this package flow through the :class:`Tensor` type below: the
network layers, the pseudo-Huber heatmap transform and the training objective
are compositions of these primitives, so one backward pass yields gradients
for every parameter.

Conventions, fixed repo-wide:

* array layout is (batch, channel, height, width);
* training runs in float32, gradient checking in float64
  (see :func:`finite_difference_check`);
* gradients accumulate additively into ``Tensor.grad`` until cleared
  (:func:`adam_step` clears the gradients of the parameters it updates);
* non-finite values are a hard error, surfaced by :func:`assert_finite`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError

DEFAULT_DTYPE = np.float32


def assert_finite(arr, context):
    """Raise NumericError if ``arr`` contains NaN or Inf.

    Uses a float64 sum as the detector: any NaN/Inf in the input makes the
    sum non-finite, and a float64 accumulator cannot overflow on the value
    ranges this package produces.
    """
    if not np.isfinite(np.asarray(arr).sum(dtype=np.float64)):
        raise NumericError(f"non-finite values in {context}")


class Tensor:
    """A dense array plus the bookkeeping for reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor.

        ``seed`` defaults to ones and must match ``self``'s shape; calling
        without a seed requires a scalar tensor. Gradients add to whatever is
        already stored, so two identical backward calls double every grad.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=self.data.dtype)
        if seed.shape != self.data.shape:
            raise ValueError("seed gradient shape mismatch")
        if not (self.requires_grad or self._backward is not None):
            return

        topo = _toposort(self)
        flows = {id(self): seed}
        for node in topo:
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            if node._backward is not None:
                node._backward(g, flows)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul_const(self, other)

    __rmul__ = __mul__


def _toposort(root):
    """Reverse topological order (root first) over the op graph."""
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _send(flows, tensor, grad):
    """Route a gradient contribution toward ``tensor`` during backward."""
    if not (tensor.requires_grad or tensor._backward is not None):
        return
    key = id(tensor)
    if key in flows:
        flows[key] = flows[key] + grad
    else:
        flows[key] = grad


def _make(data, parents, backward):
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Parameter:
    """A named tensor with a trainable flag and Adam moment buffers.

    Frozen parameters (``trainable=False``) never receive gradients or
    updates; their values are bit-identical across any number of optimizer
    steps.
    """

    def __init__(self, name, data, trainable=True):
        self.name = name
        self.tensor = Tensor(np.array(data, copy=True), requires_grad=trainable)
        self.adam_m = None
        self.adam_v = None
        self.adam_t = 0

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = np.asarray(value, dtype=self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    @property
    def trainable(self):
        return self.tensor.requires_grad

    @trainable.setter
    def trainable(self, flag):
        self.tensor.requires_grad = bool(flag)
        if not flag:
            self.tensor.grad = None

    @property
    def shape(self):
        return self.tensor.data.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def _as_tensor(x):
    if isinstance(x, Parameter):
        return x.tensor
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


# ---------------------------------------------------------------------------
# elementwise / reduction primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"add: shape mismatch {a.shape} vs {b.shape}")

    def backward(g, flows):
        _send(flows, a, g)
        _send(flows, b, g)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ConfigError(f"sub: shape mismatch {a.shape} vs {b.shape}")

    def backward(g, flows):
        _send(flows, a, g)
        _send(flows, b, -g)

    return _make(a.data - b.data, (a, b), backward)


def mul_const(a, const):
    """Multiply by a non-differentiated constant (scalar or same-shape array)."""
    a = _as_tensor(a)
    c = np.asarray(const, dtype=a.dtype)
    if c.ndim != 0 and c.shape != a.shape:
        raise ConfigError(f"mul_const: constant shape {c.shape} does not match {a.shape}")

    def backward(g, flows):
        _send(flows, a, g * c)

    return _make(a.data * c, (a,), backward)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def backward(g, flows):
        _send(flows, a, g * mask)

    return _make(a.data * mask, (a,), backward)


def clamp_min(a, floor):
    """Elementwise max(x, floor); gradient passes only where x > floor."""
    a = _as_tensor(a)
    mask = a.data > floor

    def backward(g, flows):
        _send(flows, a, g * mask)

    return _make(np.maximum(a.data, np.asarray(floor, dtype=a.dtype)), (a,), backward)


def pseudo_huber(a):
    """Elementwise sqrt(x^2 + 1) - 1.

    Smooth, even, zero at zero, asymptotically linear; derivative is
    x / sqrt(x^2 + 1).
    """
    a = _as_tensor(a)
    root = np.sqrt(a.data * a.data + 1.0)

    def backward(g, flows):
        _send(flows, a, g * (a.data / root))

    return _make(root - 1.0, (a,), backward)


def log1mexp(a):
    """Elementwise log(1 - exp(-x)) for x > 0, computed as log(-expm1(-x)).

    The expm1 route avoids the catastrophic cancellation of the naive
    ``log(1 - exp(-x))`` for small x. The derivative is 1 / expm1(x).
    """
    a = _as_tensor(a)

    def backward(g, flows):
        _send(flows, a, g / np.expm1(a.data))

    return _make(np.log(-np.expm1(-a.data)), (a,), backward)


def mean_all(a):
    """Mean over every element; returns a scalar tensor."""
    a = _as_tensor(a)
    n = a.data.size

    def backward(g, flows):
        _send(flows, a, np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean(), dtype=a.dtype), (a,), backward)


def weighted_sum(a, weights):
    """sum(a * weights) with constant weights; returns a scalar tensor."""
    a = _as_tensor(a)
    w = np.asarray(weights, dtype=a.dtype)
    if w.shape != a.shape:
        raise ConfigError("weighted_sum: weights shape mismatch")

    def backward(g, flows):
        _send(flows, a, g * w)

    return _make(np.asarray((a.data * w).sum(), dtype=a.dtype), (a,), backward)


def spatial_mean(a):
    """Mean over the two trailing spatial axes: (N, C, H, W) -> (N, C)."""
    a = _as_tensor(a)
    if a.data.ndim != 4:
        raise ConfigError(f"spatial_mean expects a 4-d tensor, got shape {a.shape}")
    n = a.shape[2] * a.shape[3]

    def backward(g, flows):
        _send(flows, a, np.broadcast_to(g[:, :, None, None] / n, a.shape))

    return _make(a.data.mean(axis=(2, 3)), (a,), backward)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _im2col(x, kh, kw, stride, pad):
    """(N, C, H, W) -> (N, C*kh*kw, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(cols, x_shape, kh, kw, stride, pad):
    """Scatter-add transpose of :func:`_im2col`."""
    n, c, h, w = x_shape
    ho = _conv_out_size(h, kh, stride, pad)
    wo = _conv_out_size(w, kw, stride, pad)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return out


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation over (N, C, H, W) input.

    ``weight`` has shape (F, C, kh, kw); output spatial size follows
    floor((in + 2*pad - k) / stride) + 1. Implemented as im2col plus a
    BLAS matmul; backward scatter-adds through the same patch layout.
    """
    x, wt = _as_tensor(x), _as_tensor(weight)
    bt = _as_tensor(bias) if bias is not None else None
    if not (isinstance(stride, int) and stride >= 1):
        raise ConfigError(f"conv2d: stride must be a positive int, got {stride!r}")
    if not (isinstance(padding, int) and padding >= 0):
        raise ConfigError(f"conv2d: padding must be a non-negative int, got {padding!r}")
    if x.data.ndim != 4 or wt.data.ndim != 4:
        raise ConfigError("conv2d expects 4-d input and weight")
    n, c, h, w = x.shape
    f, cw, kh, kw = wt.shape
    if c != cw:
        raise ConfigError(f"conv2d: input has {c} channels but weight expects {cw}")
    if _conv_out_size(h, kh, stride, padding) < 1 or _conv_out_size(w, kw, stride, padding) < 1:
        raise ConfigError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")
    if bt is not None and bt.shape != (f,):
        raise ConfigError(f"conv2d: bias shape {bt.shape} != ({f},)")

    cols, ho, wo = _im2col(x.data, kh, kw, stride, padding)
    w2 = wt.data.reshape(f, c * kh * kw)
    out = np.matmul(w2, cols).reshape(n, f, ho, wo)
    if bt is not None:
        out = out + bt.data.reshape(1, f, 1, 1)

    def backward(g, flows):
        g2 = g.reshape(n, f, ho * wo)
        if wt.requires_grad or wt._backward is not None:
            gw = np.einsum("nfl,ncl->fc", g2, cols, optimize=True).reshape(wt.shape)
            _send(flows, wt, gw)
        if x.requires_grad or x._backward is not None:
            gcols = np.matmul(w2.T, g2)
            _send(flows, x, _col2im(gcols, x.shape, kh, kw, stride, padding))
        if bt is not None:
            _send(flows, bt, g.sum(axis=(0, 2, 3)))

    parents = (x, wt) if bt is None else (x, wt, bt)
    return _make(out, parents, backward)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Running mean/variance buffers plus the normalization constants."""

    def __init__(self, num_features, momentum=0.1, eps=1e-5, dtype=DEFAULT_DTYPE):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.num_updates = 0


def batch_norm(x, gamma, beta, state, mode="train"):
    """Channelwise batch normalization over (N, C, H, W).

    Train mode normalizes with batch statistics and folds them into the
    running buffers via an exponential moving average (unbiased variance
    for the running update, biased for the normalization itself). Eval
    mode normalizes with the running buffers, treated as constants.
    """
    x, gt, bt = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ConfigError(f"batch_norm: unknown mode {mode!r}")
    if x.data.ndim != 4:
        raise ConfigError("batch_norm expects a 4-d tensor")
    c = x.shape[1]
    if gt.shape != (c,) or bt.shape != (c,):
        raise ConfigError(f"batch_norm: gamma/beta must have shape ({c},)")
    eps = state.eps
    axes = (0, 2, 3)
    m = x.shape[0] * x.shape[2] * x.shape[3]

    if mode == "train":
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
        mom = state.momentum
        unbiased = var * (m / (m - 1)) if m > 1 else var
        state.running_mean[:] = (1 - mom) * state.running_mean + mom * mean
        state.running_var[:] = (1 - mom) * state.running_var + mom * unbiased
        state.num_updates += 1

        def backward(g, flows):
            gam = gt.data[None, :, None, None]
            if x.requires_grad or x._backward is not None:
                gxhat = g * gam
                gx = (
                    gxhat
                    - gxhat.mean(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
                ) * inv_std[None, :, None, None]
                _send(flows, x, gx)
            _send(flows, gt, (g * xhat).sum(axis=axes))
            _send(flows, bt, g.sum(axis=axes))

    else:
        inv_std = 1.0 / np.sqrt(state.running_var + eps)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv_std[None, :, None, None]

        def backward(g, flows):
            if x.requires_grad or x._backward is not None:
                _send(flows, x, g * (gt.data * inv_std)[None, :, None, None])
            _send(flows, gt, (g * xhat).sum(axes))
            _send(flows, bt, g.sum(axes))

    out = gt.data[None, :, None, None] * xhat + bt.data[None, :, None, None]
    return _make(out, (x, gt, bt), backward)


# ---------------------------------------------------------------------------
# pooling and resampling
# ---------------------------------------------------------------------------


def max_pool2(x):
    """2x2 max pooling with stride 2; gradient routes to the argmax.

    Ties break to the first maximum in row-major patch order, so the
    backward pass is deterministic.
    """
    x = _as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"max_pool2 requires even spatial dims, got {h}x{w}")
    ho, wo = h // 2, w // 2
    patches = x.data.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)
    idx = patches.argmax(axis=-1)
    out = np.take_along_axis(patches, idx[..., None], axis=-1)[..., 0]

    def backward(g, flows):
        gpatch = np.zeros((n, c, ho, wo, 4), dtype=g.dtype)
        np.put_along_axis(gpatch, idx[..., None], g[..., None], axis=-1)
        gx = gpatch.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        _send(flows, x, gx)

    return _make(out, (x,), backward)


def _resize_matrix(n_in, n_out, dtype):
    """Row-stochastic 1-d bilinear interpolation matrix (n_out, n_in).

    Half-pixel-centers convention: output index i samples source position
    (i + 0.5) * n_in / n_out - 0.5, with edge clamping.
    """
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        i0 = math.floor(src)
        t = src - i0
        mat[i, min(max(i0, 0), n_in - 1)] += 1.0 - t
        mat[i, min(max(i0 + 1, 0), n_in - 1)] += t
    return mat.astype(dtype)


def bilinear_upsample(x, out_h, out_w):
    """Bilinear resize of (N, C, H, W) to (N, C, out_h, out_w), upscale only.

    Separable: out = R @ x @ C^T with row-stochastic interpolation matrices,
    so constant maps stay constant and every output value is a convex
    combination of inputs.
    """
    x = _as_tensor(x)
    if x.data.ndim != 4:
        raise ConfigError("bilinear_upsample expects a 4-d tensor")
    n, c, h, w = x.shape
    if out_h < h or out_w < w:
        raise ConfigError(f"bilinear_upsample: target {out_h}x{out_w} smaller than source {h}x{w}")
    rows = _resize_matrix(h, out_h, x.dtype)
    cols = _resize_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g, flows):
        _send(flows, x, np.matmul(np.matmul(rows.T, g), cols))

    return _make(out, (x,), backward)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def adam_step(params, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update with bias correction over ``params``.

    Parameters that are frozen or hold no gradient are skipped; updated
    parameters have their gradients cleared afterwards.
    """
    b1, b2 = betas
    for p in params:
        if not p.trainable:
            continue
        g = p.tensor.grad
        if g is None:
            continue
        if not np.isfinite(g.sum(dtype=np.float64)):
            raise NumericError(f"non-finite gradient for parameter {p.name!r}")
        if p.adam_m is None:
            p.adam_m = np.zeros_like(p.data)
            p.adam_v = np.zeros_like(p.data)
        p.adam_t += 1
        p.adam_m += (1 - b1) * (g - p.adam_m)
        p.adam_v += (1 - b2) * (g * g - p.adam_v)
        m_hat = p.adam_m / (1 - b1 ** p.adam_t)
        v_hat = p.adam_v / (1 - b2 ** p.adam_t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.tensor.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-input max relative errors of analytic vs numeric gradients."""

    per_input: tuple
    tolerance: float
    step: float
    max_rel_error: float = field(init=False)

    def __post_init__(self):
        errs = [e for e in self.per_input if e is not None]
        self.max_rel_error = max(errs) if errs else 0.0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def finite_difference_check(op, inputs, tolerance=1e-4, step=1e-5, seed=0):
    """Compare analytic gradients of ``op`` against central differences.

    ``op`` must be a pure function of the given tensors (stateful wrappers
    such as train-mode batch norm should rebuild fresh state per call).
    All inputs must be float64. The check projects the output onto a fixed
    random direction so the full Jacobian is exercised, then perturbs every
    input element by ``+-step``. Relative error uses the denominator
    max(1, |analytic|, |numeric|), reported per input; entries for inputs
    that do not require gradients are None.
    """
    tensors = [_as_tensor(x) for x in inputs]
    for t in tensors:
        if t.dtype != np.float64:
            raise ConfigError("finite_difference_check requires float64 inputs")
        t.zero_grad()

    out = op(*inputs)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)
    weighted_sum(out, proj).backward()

    def objective():
        return float((op(*inputs).data * proj).sum())

    per_input = []
    for t in tensors:
        if not t.requires_grad:
            per_input.append(None)
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        for idx in np.ndindex(t.data.shape):
            orig = t.data[idx]
            t.data[idx] = orig + step
            f_plus = objective()
            t.data[idx] = orig - step
            f_minus = objective()
            t.data[idx] = orig
            numeric[idx] = (f_plus - f_minus) / (2.0 * step)
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        per_input.append(float((np.abs(analytic - numeric) / denom).max()))
    return GradCheckReport(per_input=tuple(per_input), tolerance=tolerance, step=step)
