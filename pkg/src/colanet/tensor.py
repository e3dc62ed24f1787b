"""Dense arrays, neural primitives and reverse-mode gradients.

Values are rank-<=4 float arrays (feature maps are N x C x H x W, row-major
with W fastest).  Every operation here is a pure function of its inputs; when
any input has ``requires_grad`` set, the result records a backward closure on
a dynamic tape.  ``backward`` walks the tape from a scalar loss, accumulates
gradients additively into every reachable tensor, and frees the graph.

Default precision is 32-bit float.  Ops preserve the dtype of their inputs,
so ``grad_check`` can run the same graph in float64 for tight finite
difference comparisons.
"""

import numpy as np

from .errors import (
    ConfigError,
    DegenerateStatisticsError,
    GraphError,
    ShapeError,
)

_grad_enabled = True


class no_grad:
    """Context manager that disables tape recording inside its block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense real array with an optional gradient buffer.

    ``data`` is a C-contiguous numpy array of float32 (or float64 when a
    caller opts into higher precision).  ``grad`` is lazily allocated by the
    backward pass and always shape-matches ``data``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} exceeds the supported rank 4")
        self.data = np.ascontiguousarray(arr)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError("item() requires a scalar tensor")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name})"


class ParamTensor:
    """A named learnable tensor plus optional optimizer moment buffers."""

    __slots__ = ("name", "value", "first_moment", "second_moment")

    def __init__(self, name, value):
        if not isinstance(value, Tensor):
            value = Tensor(value)
        value.requires_grad = True
        self.name = name
        self.value = value
        self.first_moment = None
        self.second_moment = None

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def _result(data, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accum(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or not g.flags.owndata else g
    else:
        t.grad = t.grad + g


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _im2col(xp, k, ho, wo):
    n, c = xp.shape[:2]
    col = np.empty((n, c, k, k, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            col[:, :, i, j] = xp[:, :, i:i + ho, j:j + wo]
    return col.reshape(n, c * k * k, ho * wo)


def _col2im(gcol, shape, k, ho, wo):
    n, c = shape[:2]
    g6 = gcol.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape, dtype=gcol.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + ho, j:j + wo] += g6[:, :, i, j]
    return out


def conv2d(x, weight, bias=None, pad=0):
    """Cross-correlate ``x`` (N,Cin,H,W) with ``weight`` (Cout,Cin,k,k).

    Zero padding of ``pad`` pixels on every border; output spatial dims are
    H + 2*pad - k + 1.  With pad=(k-1)//2 the spatial size is preserved.
    """
    xd, wd = x.data, weight.data
    if xd.ndim != 4 or wd.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and weight")
    n, cin, h, w = xd.shape
    cout, cin_w, kh, kw = wd.shape
    if cin_w != cin:
        raise ShapeError(f"input has {cin} channels, weight expects {cin_w}")
    if kh != kw:
        raise ConfigError("conv2d kernels must be square")
    if kh % 2 == 0:
        raise ConfigError("conv2d kernels must have odd size")
    if pad < 0:
        raise ConfigError("pad must be non-negative")
    k = kh
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    col = _im2col(xp, k, ho, wo)
    w2 = wd.reshape(cout, -1)
    out = np.matmul(w2, col)
    if bias is not None:
        bd = bias.data
        if bd.shape != (cout,):
            raise ShapeError("bias must have one entry per output channel")
        out = out + bd.reshape(1, cout, 1)
    out = out.reshape(n, cout, ho, wo)

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        if weight.requires_grad:
            gw = np.matmul(g2, col.transpose(0, 2, 1)).sum(axis=0)
            _accum(weight, gw.reshape(wd.shape))
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=(0, 2)))
        if x.requires_grad:
            gcol = np.matmul(w2.T, g2)
            gxp = _col2im(gcol, xp.shape, k, ho, wo)
            gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
            _accum(x, gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, bwd)


# ---------------------------------------------------------------------------
# normalization and activations
# ---------------------------------------------------------------------------

def batch_norm(x, gamma, beta, running_mean, running_var, mode="infer",
               eps=1e-5, momentum=0.1):
    """Per-channel normalization of an N x C x H x W map.

    In ``train`` mode statistics are the biased mean/variance over N, H, W
    for each channel, and the running buffers (plain numpy arrays, mutated
    in place) are updated as ``run = (1 - momentum) * run + momentum * batch``.
    In ``infer`` mode the running buffers are used as constants.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigError("momentum must lie in [0, 1]")
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown batch_norm mode {mode!r}")
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("batch_norm expects N x C x H x W input")
    n, c, h, w = xd.shape
    gd, bd = gamma.data, beta.data
    if gd.shape != (c,) or bd.shape != (c,):
        raise ShapeError("gamma/beta must have one entry per channel")

    if mode == "train":
        m = n * h * w
        if m == 0:
            raise DegenerateStatisticsError(
                "train-mode batch_norm over an empty extent")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xc = xd - mu[None, :, None, None]
    xhat = xc * inv[None, :, None, None]
    out = gd[None, :, None, None] * xhat + bd[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gd[None, :, None, None]
            if mode == "infer":
                _accum(x, gxhat * inv[None, :, None, None])
            else:
                m = n * h * w
                inv4 = inv[None, :, None, None]
                dvar = (gxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv ** 3
                dmu = (-(gxhat.sum(axis=(0, 2, 3))) * inv
                       + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3)))
                gx = (gxhat * inv4
                      + dvar[None, :, None, None] * 2.0 * xc / m
                      + dmu[None, :, None, None] / m)
                _accum(x, gx)

    return _result(out, (x, gamma, beta), bwd)


def activate(x, kind):
    """Elementwise relu (max(0, x)) or sigmoid (1 / (1 + exp(-x)))."""
    xd = x.data
    if kind == "relu":
        out = np.maximum(xd, 0)

        def bwd(g):
            _accum(x, g * (xd > 0))

    elif kind == "sigmoid":
        # split to avoid exp overflow on large magnitudes
        out = np.empty_like(xd)
        pos = xd >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
        ex = np.exp(xd[~pos])
        out[~pos] = ex / (1.0 + ex)

        def bwd(g):
            _accum(x, g * out * (1.0 - out))

    else:
        raise ConfigError(f"unknown activation {kind!r}")
    return _result(out, (x,), bwd)


def softmax(x, axis):
    """Stable softmax along ``axis``: each slice becomes a probability vector."""
    xd = x.data
    if not -xd.ndim <= axis < xd.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {xd.shape}")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(x, out * (g - dot))

    return _result(out, (x,), bwd)


def global_avg_pool(x):
    """Spatial mean of an N x C x H x W map, producing N x C."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("global_avg_pool expects N x C x H x W input")
    n, c, h, w = xd.shape
    out = xd.mean(axis=(2, 3))

    def bwd(g):
        _accum(x, np.broadcast_to(g[:, :, None, None] / (h * w), xd.shape))

    return _result(out, (x,), bwd)


def linear(x, weight, bias=None):
    """Affine map x @ W.T + b for x (N, Din) and W (Dout, Din)."""
    xd, wd = x.data, weight.data
    if xd.ndim != 2 or wd.ndim != 2:
        raise ShapeError("linear expects 2-D input and weight")
    if xd.shape[1] != wd.shape[1]:
        raise ShapeError(
            f"input features {xd.shape[1]} != weight features {wd.shape[1]}")
    out = xd @ wd.T
    if bias is not None:
        if bias.data.shape != (wd.shape[0],):
            raise ShapeError("bias length must equal output features")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        if x.requires_grad:
            _accum(x, g @ wd)
        if weight.requires_grad:
            _accum(weight, g.T @ xd)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _result(out, parents, bwd)


def matmul(a, b):
    """Plain 2-D matrix product."""
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if ad.shape[1] != bd.shape[0]:
        raise ShapeError(f"inner dims disagree: {ad.shape} x {bd.shape}")
    out = ad @ bd

    def bwd(g):
        if a.requires_grad:
            _accum(a, g @ bd.T)
        if b.requires_grad:
            _accum(b, ad.T @ g)

    return _result(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def _same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname} operands differ: "
                         f"{a.data.shape} vs {b.data.shape}")


def add(a, b):
    _same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _result(a.data + b.data, (a, b), bwd)


def sub(a, b):
    _same_shape(a, b, "sub")

    def bwd(g):
        _accum(a, g)
        _accum(b, -g)

    return _result(a.data - b.data, (a, b), bwd)


def mul(a, b):
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _result(ad * bd, (a, b), bwd)


def scalar_mul(x, c):
    c = float(c)

    def bwd(g):
        _accum(x, g * c)

    return _result(x.data * c, (x,), bwd)


def scale_channels(x, s):
    """Multiply an N x C x H x W map by per-channel factors s (N, C)."""
    xd, sd = x.data, s.data
    if xd.ndim != 4 or sd.ndim != 2 or xd.shape[:2] != sd.shape:
        raise ShapeError("scale_channels expects (N,C,H,W) and matching (N,C)")
    s4 = sd[:, :, None, None]
    out = xd * s4

    def bwd(g):
        if x.requires_grad:
            _accum(x, g * s4)
        if s.requires_grad:
            _accum(s, (g * xd).sum(axis=(2, 3)))

    return _result(out, (x, s), bwd)


def stack(parts):
    """Stack equal-shape tensors along a new leading axis."""
    shapes = {p.data.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError("stack operands must share a shape")
    out = np.stack([p.data for p in parts], axis=0)

    def bwd(g):
        for i, p in enumerate(parts):
            _accum(p, g[i])

    return _result(out, tuple(parts), bwd)


def take0(x, i):
    """Select slice ``i`` along axis 0 (drops the axis)."""
    xd = x.data
    if not 0 <= i < xd.shape[0]:
        raise ShapeError(f"index {i} out of range for axis of {xd.shape[0]}")

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[i] = g
        _accum(x, gx)

    return _result(xd[i], (x,), bwd)


def take_item(x, i):
    """Select batch item ``i`` of an N x C x H x W map, keeping the batch axis."""
    xd = x.data
    if xd.ndim != 4 or not 0 <= i < xd.shape[0]:
        raise ShapeError("take_item expects a 4-D tensor and a valid index")

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[i:i + 1] = g
        _accum(x, gx)

    return _result(xd[i:i + 1], (x,), bwd)


def concat0(parts):
    """Concatenate tensors along axis 0."""
    tails = {p.data.shape[1:] for p in parts}
    if len(tails) != 1:
        raise ShapeError("concat0 operands must agree beyond axis 0")
    out = np.concatenate([p.data for p in parts], axis=0)
    sizes = [p.data.shape[0] for p in parts]

    def bwd(g):
        off = 0
        for p, sz in zip(parts, sizes):
            _accum(p, g[off:off + sz])
            off += sz

    return _result(out, tuple(parts), bwd)


def transpose2d(x):
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("transpose2d expects a 2-D tensor")

    def bwd(g):
        _accum(x, g.T)

    return _result(xd.T, (x,), bwd)


def reshape(x, shape):
    xd = x.data
    out = xd.reshape(shape)

    def bwd(g):
        _accum(x, g.reshape(xd.shape))

    return _result(out, (x,), bwd)


def pad_reflect(x, pad_bottom, pad_right):
    """Reflect-pad the bottom/right borders of an N x C x H x W map."""
    xd = x.data
    if xd.ndim != 4:
        raise ShapeError("pad_reflect expects a 4-D tensor")
    n, c, h, w = xd.shape
    if pad_bottom < 0 or pad_right < 0:
        raise ConfigError("padding must be non-negative")
    if pad_bottom >= h or pad_right >= w:
        raise ShapeError("reflect padding must be smaller than the image")
    if pad_bottom == 0 and pad_right == 0:
        def bwd0(g):
            _accum(x, g)
        return _result(xd.copy(), (x,), bwd0)
    out = np.pad(xd, ((0, 0), (0, 0), (0, pad_bottom), (0, pad_right)),
                 mode="reflect")

    def bwd(g):
        gx = g[:, :, :h, :w].copy()
        for i in range(pad_bottom):
            gx[:, :, h - 2 - i, :] += g[:, :, h + i, :w]
        for j in range(pad_right):
            gx[:, :, :, w - 2 - j] += g[:, :, :h, w + j]
        for i in range(pad_bottom):
            for j in range(pad_right):
                gx[:, :, h - 2 - i, w - 2 - j] += g[:, :, h + i, w + j]
        _accum(x, gx)

    return _result(out, (x,), bwd)


def crop_br(x, height, width):
    """Crop an N x C x H x W map to its top-left height x width corner."""
    xd = x.data
    if xd.ndim != 4 or height > xd.shape[2] or width > xd.shape[3]:
        raise ShapeError("crop larger than input")

    def bwd(g):
        gx = np.zeros_like(xd)
        gx[:, :, :height, :width] = g
        _accum(x, gx)

    return _result(xd[:, :, :height, :width].copy(), (x,), bwd)


def sum_all(x):
    xd = x.data

    def bwd(g):
        _accum(x, np.broadcast_to(g, xd.shape))

    return _result(np.asarray(xd.sum(), dtype=xd.dtype), (x,), bwd)


def mean_all(x):
    xd = x.data
    n = xd.size

    def bwd(g):
        _accum(x, np.broadcast_to(g / n, xd.shape))

    return _result(np.asarray(xd.mean(), dtype=xd.dtype), (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(loss):
    """Populate gradients for every tensor reachable from a scalar loss.

    Gradients accumulate additively (a tensor used twice receives the sum of
    both contributions).  The recorded graph is freed afterwards.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor")
    if loss.data.size != 1:
        raise GraphError("backward requires a scalar loss")
    if not loss.requires_grad:
        return

    topo = []
    visited = set()
    stack_ = [(loss, False)]
    while stack_:
        node, processed = stack_.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack_.append((p, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in topo:
        node._backward = None
        node._parents = ()


def zero_grads(params):
    """Clear the gradient buffer of every parameter in the collection."""
    for p in params:
        t = p.value if isinstance(p, ParamTensor) else p
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

class GradCheckReport:
    """Outcome of a finite-difference sweep over sampled coordinates."""

    def __init__(self, max_rel_err, tol, per_param):
        self.max_rel_err = max_rel_err
        self.tol = tol
        self.per_param = per_param
        self.passed = max_rel_err <= tol

    def __repr__(self):
        state = "pass" if self.passed else "FAIL"
        return (f"GradCheckReport({state}, max_rel_err={self.max_rel_err:.3e},"
                f" tol={self.tol:.1e})")


def _coords(n, limit):
    if n <= limit:
        return list(range(n))
    return sorted(set(np.linspace(0, n - 1, limit).astype(int).tolist()))


def grad_check(f, params, eps=1e-3, tol=1e-3, max_coords=4):
    """Compare tape gradients of ``f()`` against central differences.

    ``f`` rebuilds and returns the scalar loss from the current parameter
    values; ``params`` is a sequence of Tensor or ParamTensor.  The check
    runs in float64 and reports
    ``max |analytic - numeric| / max(1e-6, |analytic| + |numeric|)``
    over deterministically sampled coordinates.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ConfigError("eps must lie in [1e-4, 1e-2]")
    tensors = [p.value if isinstance(p, ParamTensor) else p for p in params]
    names = [p.name if isinstance(p, ParamTensor) else f"param{i}"
             for i, p in enumerate(params)]
    saved = [(t.data, t.requires_grad) for t in tensors]
    for t in tensors:
        t.data = t.data.astype(np.float64)
        t.requires_grad = True
        t.grad = None
    try:
        out = f()
        if out.data.size != 1:
            raise GraphError("grad_check requires a scalar function")
        backward(out)
        analytic = [None if t.grad is None else t.grad.copy() for t in tensors]

        per_param = {}
        worst = 0.0
        for t, name, ana in zip(tensors, names, analytic):
            flat = t.data.reshape(-1)
            aflat = (np.zeros_like(flat) if ana is None else ana.reshape(-1))
            local = 0.0
            with no_grad():
                for i in _coords(flat.size, max_coords):
                    orig = flat[i]
                    flat[i] = orig + eps
                    fp = f().item()
                    flat[i] = orig - eps
                    fm = f().item()
                    flat[i] = orig
                    if not (np.isfinite(fp) and np.isfinite(fm)):
                        raise GraphError(
                            "non-finite value during finite differencing")
                    num = (fp - fm) / (2.0 * eps)
                    a = float(aflat[i])
                    err = abs(a - num) / max(1e-6, abs(a) + abs(num))
                    local = max(local, err)
            per_param[name] = local
            worst = max(worst, local)
    finally:
        for t, (data, req) in zip(tensors, saved):
            t.data = data
            t.requires_grad = req
            t.grad = None
    return GradCheckReport(worst, tol, per_param)
