"""Dense float64 tensors with reverse-mode automatic differentiation.

Every forward op appends a record to an implicit tape (a backward closure
plus its input tensors); ``Tensor.backward()`` replays the tape once in
reverse topological order and then marks it consumed. All storage is
float64, row-major. Ops validate that finite inputs produce finite outputs.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided

_grad_enabled = True
_finite_checks = True


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference paths)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


@contextmanager
def finite_checks(enabled: bool):
    global _finite_checks
    saved = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = saved


def _check_finite(arr: np.ndarray, op: str) -> None:
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"{op} produced non-finite values")


class _Record:
    """One tape entry: the inputs of an op and its backward closure."""

    __slots__ = ("inputs", "backward", "op", "consumed")

    def __init__(self, inputs, backward, op):
        self.inputs = inputs
        self.backward = backward
        self.op = op
        self.consumed = False


class Tensor:
    """N-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._record = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Reverse pass from a scalar; consumes the tape exactly once."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if self._record is None:
            raise RuntimeError("loss is not attached to a tape (no recorded ops)")

        # Iterative topological sort; recursion depth on deep unrolled graphs
        # would overflow the interpreter stack.
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node._record is not None:
                if node._record.consumed:
                    raise RuntimeError(
                        f"tape already consumed (op {node._record.op}); "
                        "build a fresh forward pass before calling backward again"
                    )
                for inp in node._record.inputs:
                    stack.append((inp, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            rec = node._record
            g = grads.pop(id(node), None)
            if rec is None:
                if g is not None and node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            rec.consumed = True
            if g is None:
                continue
            input_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = ig if prev is None else prev + ig
            rec.backward = None  # free saved activations

    # -- operator sugar --------------------------------------------------

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

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return narrow(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs, backward, op: str) -> Tensor:
    """Wrap an op result, attaching a tape record when gradients are live."""
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = _Record(tuple(inputs), backward, op)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient over the axes numpy broadcast during the forward op."""
    if grad.shape == tuple(shape):
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    data = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(data, (a,), backward, "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward, "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), backward, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    # split by sign for stability; exp never sees a large positive argument
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, 0, None))),
                    np.exp(np.clip(x, None, 0)) / (1.0 + np.exp(np.clip(x, None, 0))))

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), backward, "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    data = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - data * data),)

    return _make(data, (a,), backward, "tanh")


def absolute(a) -> Tensor:
    a = as_tensor(a)
    data = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _make(data, (a,), backward, "abs")


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through unclamped entries."""
    a = as_tensor(a)
    data = np.clip(a.data, lo, hi)

    def backward(g):
        return (g * ((a.data > lo) & (a.data < hi)),)

    return _make(data, (a,), backward, "clip")


# -- reductions, shape ops ----------------------------------------------------


def _reduce_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _reduce_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(data, (a,), backward, "sum")


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _reduce_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    data = a.data.mean(axis=axes, keepdims=keepdims) if axes else a.data.copy()

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make(data, (a,), backward, "mean")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(data, (a,), backward, "reshape")


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(data, (a,), backward, "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        return (_unbroadcast(g, a.shape),)

    return _make(data, (a,), backward, "broadcast_to")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    axis = axis % tensors[0].ndim
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tuple(tensors), backward, "concat")


def narrow(a, idx) -> Tensor:
    """Basic (slice/int/ellipsis) indexing with gradient scatter."""
    a = as_tensor(a)
    data = a.data[idx]
    if isinstance(data, np.ndarray):
        data = data.copy()

    def backward(g):
        out = np.zeros_like(a.data)
        out[idx] = g
        return (out,)

    return _make(data, (a,), backward, "slice")


def take(a, flat_indices) -> Tensor:
    """Gather from the flattened tensor; duplicates accumulate in the backward."""
    a = as_tensor(a)
    flat_indices = np.asarray(flat_indices, dtype=np.int64)
    data = a.data.reshape(-1)[flat_indices]

    def backward(g):
        out = np.zeros(a.data.size)
        np.add.at(out, flat_indices, g)
        return (out.reshape(a.shape),)

    return _make(data, (a,), backward, "take")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(data, (a, b), backward, "matmul")


# -- softmax family -----------------------------------------------------------


def softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        return (data * (g - dot),)

    return _make(data, (a,), backward, "softmax")


def log_softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse

    def backward(g):
        return (g - np.exp(data) * g.sum(axis=axis, keepdims=True),)

    return _make(data, (a,), backward, "log_softmax")


# -- convolutions -------------------------------------------------------------


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _triple(v):
    return (v, v, v) if isinstance(v, int) else tuple(v)


def _im2col2d(x: np.ndarray, kh, kw, sh, sw, ph, pw):
    n, c, h, w = x.shape
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw))
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    s0, s1, s2, s3 = xp.strides
    view = as_strided(xp, (n, ho, wo, c, kh, kw), (s0, s2 * sh, s3 * sw, s1, s2, s3))
    cols = view.reshape(n * ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), xp.shape, ho, wo


def conv2d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over [N,C,H,W] input with [Cout,Cin,kh,kw] kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input/weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input has {cin}, weight expects {cin_w}")
    if sh < 1 or sw < 1:
        raise ValueError("conv2d stride must be >= 1")
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError(
            f"conv2d kernel {kh}x{kw} does not fit padded input {h + 2 * ph}x{w + 2 * pw}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")
    _check_finite(x.data, "conv2d input")

    cols, padded_shape, ho, wo = _im2col2d(x.data, kh, kw, sh, sw, ph, pw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    data = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, cout)
        # im2col is recomputed here instead of saved: trades one copy for a
        # large cut in tape memory.
        cols2, _, _, _ = _im2col2d(x.data, kh, kw, sh, sw, ph, pw)
        gw = (gmat.T @ cols2).reshape(weight.shape)
        gcols = gmat @ wmat
        gx_p = np.zeros(padded_shape)
        gview = gcols.reshape(n, ho, wo, cin, kh, kw)
        for i in range(kh):
            for j in range(kw):
                gx_p[:, :, i:i + ho * sh:sh, j:j + wo * sw:sw] += gview[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gx_p[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else gx_p
        gb = gmat.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(data, inputs, backward, "conv2d")


def _im2col3d(x: np.ndarray, kt, kh, kw, st, sh, sw, pt, ph, pw):
    n, c, t, h, w = x.shape
    to = (t + 2 * pt - kt) // st + 1
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    if pt or ph or pw:
        xp = np.zeros((n, c, t + 2 * pt, h + 2 * ph, w + 2 * pw))
        xp[:, :, pt:pt + t, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    s0, s1, s2, s3, s4 = xp.strides
    view = as_strided(
        xp,
        (n, to, ho, wo, c, kt, kh, kw),
        (s0, s2 * st, s3 * sh, s4 * sw, s1, s2, s3, s4),
    )
    cols = view.reshape(n * to * ho * wo, c * kt * kh * kw)
    return np.ascontiguousarray(cols), xp.shape, to, ho, wo


def conv3d(x, weight, bias=None, stride=1, padding=0) -> Tensor:
    """Cross-correlation over [N,C,T,H,W] with [Cout,Cin,kt,kh,kw] kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    if x.ndim != 5 or weight.ndim != 5:
        raise ValueError(f"conv3d expects 5-D input/weight, got {x.shape} and {weight.shape}")
    n, cin, t, h, w = x.shape
    cout, cin_w, kt, kh, kw = weight.shape
    if cin != cin_w:
        raise ValueError(f"conv3d channel mismatch: input has {cin}, weight expects {cin_w}")
    if min(st, sh, sw) < 1:
        raise ValueError("conv3d stride must be >= 1")
    if t + 2 * pt < kt or h + 2 * ph < kh or w + 2 * pw < kw:
        raise ValueError("conv3d kernel does not fit padded input")
    _check_finite(x.data, "conv3d input")

    cols, padded_shape, to, ho, wo = _im2col3d(x.data, kt, kh, kw, st, sh, sw, pt, ph, pw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    data = np.ascontiguousarray(out.reshape(n, to, ho, wo, cout).transpose(0, 4, 1, 2, 3))

    def backward(g):
        gmat = np.ascontiguousarray(g.transpose(0, 2, 3, 4, 1)).reshape(-1, cout)
        cols2, _, _, _, _ = _im2col3d(x.data, kt, kh, kw, st, sh, sw, pt, ph, pw)
        gw = (gmat.T @ cols2).reshape(weight.shape)
        gcols = gmat @ wmat
        gx_p = np.zeros(padded_shape)
        gview = gcols.reshape(n, to, ho, wo, cin, kt, kh, kw)
        for a in range(kt):
            for i in range(kh):
                for j in range(kw):
                    gx_p[:, :, a:a + to * st:st, i:i + ho * sh:sh, j:j + wo * sw:sw] += \
                        gview[:, :, :, :, :, a, i, j].transpose(0, 4, 1, 2, 3)
        gx = gx_p[:, :, pt:pt + t, ph:ph + h, pw:pw + w] if (pt or ph or pw) else gx_p
        gb = gmat.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _make(data, inputs, backward, "conv3d")


# -- sampling and pooling -----------------------------------------------------


def grid_sample_bilinear(x, coords) -> Tensor:
    """Bilinear sampling of [N,C,H,W] at pixel coords [N,Ho,Wo,2] (x, y).

    Out-of-bounds reads contribute zero. Gradients flow to the input only;
    the sampling grid is treated as a constant.
    """
    x = as_tensor(x)
    coords = as_tensor(coords)
    if coords.requires_grad:
        raise ValueError("grid_sample_bilinear does not differentiate through coords")
    if x.ndim != 4 or coords.ndim != 4 or coords.shape[-1] != 2:
        raise ValueError(f"bad grid_sample shapes: input {x.shape}, coords {coords.shape}")
    if coords.shape[0] != x.shape[0]:
        raise ValueError("grid_sample batch mismatch")
    _check_finite(coords.data, "grid_sample coords")

    n, c, h, w = x.shape
    _, ho, wo, _ = coords.shape
    cx = coords.data[..., 0]
    cy = coords.data[..., 1]
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    fx = cx - x0
    fy = cy - y0

    corners = []
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        flat = np.where(valid, yi * w + xi, 0)
        corners.append((flat, wgt * valid))

    xflat = x.data.reshape(n, c, h * w)
    out = np.zeros((n, c, ho, wo))
    for flat, wgt in corners:
        gathered = np.take_along_axis(
            xflat, flat.reshape(n, 1, ho * wo), axis=2
        ).reshape(n, c, ho, wo)
        out += gathered * wgt[:, None, :, :]

    def backward(g):
        gx = np.zeros((n, c, h * w))
        for flat, wgt in corners:
            contrib = (g * wgt[:, None, :, :]).reshape(n, c, ho * wo)
            fl = flat.reshape(n, ho * wo)
            for b in range(n):
                np.add.at(gx[b], (slice(None), fl[b]), contrib[b])
        return (gx.reshape(n, c, h, w), None)

    return _make(out, (x, coords), backward, "grid_sample")


def max_pool2d(x, kernel: int, stride=None) -> Tensor:
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    cols, _, ho, wo = _im2col2d(x.data, kernel, kernel, stride, stride, 0, 0)
    # cols rows hold the window laid out channel-major: (c, kh, kw)
    win = cols.reshape(n * ho * wo, c, kernel * kernel)
    arg = win.argmax(axis=2)
    data = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]
    data = np.ascontiguousarray(data.reshape(n, ho, wo, c).transpose(0, 3, 1, 2))

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, c)
        gx = np.zeros((n, c, h, w))
        rows = np.arange(n * ho * wo)
        ki = arg // kernel
        kj = arg % kernel
        b_idx = rows // (ho * wo)
        rem = rows % (ho * wo)
        oi = rem // wo
        oj = rem % wo
        for ch in range(c):
            hi = oi * stride + ki[:, ch]
            wi = oj * stride + kj[:, ch]
            np.add.at(gx, (b_idx, ch, hi, wi), gflat[:, ch])
        return (gx,)

    return _make(data, (x,), backward, "max_pool2d")


def avg_pool2d(x, kernel: int, stride=None) -> Tensor:
    x = as_tensor(x)
    stride = kernel if stride is None else stride
    n, c, h, w = x.shape
    ho = (h - kernel) // stride + 1
    wo = (w - kernel) // stride + 1
    data = np.zeros((n, c, ho, wo))
    for i in range(kernel):
        for j in range(kernel):
            data += x.data[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride]
    data /= kernel * kernel

    def backward(g):
        gx = np.zeros((n, c, h, w))
        gs = g / (kernel * kernel)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i:i + ho * stride:stride, j:j + wo * stride:stride] += gs
        return (gx,)

    return _make(data, (x,), backward, "avg_pool2d")


def avg_pool3d(x, kernel, stride=None) -> Tensor:
    x = as_tensor(x)
    kt, kh, kw = _triple(kernel)
    st, sh, sw = _triple(kernel if stride is None else stride)
    n, c, t, h, w = x.shape
    to = (t - kt) // st + 1
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    data = np.zeros((n, c, to, ho, wo))
    for a in range(kt):
        for i in range(kh):
            for j in range(kw):
                data += x.data[:, :, a:a + to * st:st, i:i + ho * sh:sh, j:j + wo * sw:sw]
    count = kt * kh * kw
    data /= count

    def backward(g):
        gx = np.zeros((n, c, t, h, w))
        gs = g / count
        for a in range(kt):
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, a:a + to * st:st, i:i + ho * sh:sh, j:j + wo * sw:sw] += gs
        return (gx,)

    return _make(data, (x,), backward, "avg_pool3d")


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    data = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _make(data, (x,), backward, "upsample_nearest2x")


def _bilinear2x_weights(size: int):
    """Row weights for 2x upsampling with half-pixel centers, edges clamped."""
    src = (np.arange(2 * size) + 0.5) / 2.0 - 0.5
    i0 = np.floor(src).astype(np.int64)
    frac = src - i0
    i1 = np.clip(i0 + 1, 0, size - 1)
    i0 = np.clip(i0, 0, size - 1)
    return i0, i1, frac


def upsample_bilinear2x(x) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    r0, r1, rf = _bilinear2x_weights(h)
    c0, c1, cf = _bilinear2x_weights(w)
    rows = x.data[:, :, r0, :] * (1 - rf)[None, None, :, None] + x.data[:, :, r1, :] * rf[None, None, :, None]
    data = rows[:, :, :, c0] * (1 - cf)[None, None, None, :] + rows[:, :, :, c1] * cf[None, None, None, :]

    def backward(g):
        grows = np.zeros((n, c, 2 * h, w))
        for j in range(2 * w):
            grows[:, :, :, c0[j]] += g[:, :, :, j] * (1 - cf[j])
            grows[:, :, :, c1[j]] += g[:, :, :, j] * cf[j]
        gx = np.zeros((n, c, h, w))
        for i in range(2 * h):
            gx[:, :, r0[i], :] += grows[:, :, i, :] * (1 - rf[i])
            gx[:, :, r1[i], :] += grows[:, :, i, :] * rf[i]
        return (gx,)

    return _make(data, (x,), backward, "upsample_bilinear2x")


def scatter_columns(values, cell_indices, n_cells: int) -> Tensor:
    """Sum columns of [C,P] values into [C,n_cells] bins given per-point cells.

    Accumulation follows the column order of ``values``, so results are
    deterministic for a fixed point ordering.
    """
    values = as_tensor(values)
    idx = np.asarray(cell_indices, dtype=np.int64)
    if values.ndim != 2 or idx.shape != (values.shape[1],):
        raise ValueError(f"scatter_columns shapes: values {values.shape}, idx {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= n_cells):
        raise ValueError("scatter_columns cell index out of range")
    c = values.shape[0]
    data = np.zeros((c, n_cells))
    for ch in range(c):
        data[ch] = np.bincount(idx, weights=values.data[ch], minlength=n_cells)

    def backward(g):
        return (g[:, idx],)

    return _make(data, (values,), backward, "scatter_columns")


def channel_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each (sample, channel) slice over its remaining axes.

    Group normalization with one channel per group; layout is [N,C,...].
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim < 3:
        raise ValueError(f"channel_norm expects [N,C,spatial...], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError("channel_norm affine params must be per-channel vectors")
    axes = tuple(range(2, x.ndim))
    mean = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    gshape = (1, c) + (1,) * (x.ndim - 2)
    data = xhat * gamma.data.reshape(gshape) + beta.data.reshape(gshape)
    m = int(np.prod([x.shape[ax] for ax in axes]))

    def backward(g):
        sum_axes = (0,) + axes
        ggamma = (g * xhat).sum(axis=sum_axes)
        gbeta = g.sum(axis=sum_axes)
        gh = g * gamma.data.reshape(gshape)
        gx = inv / m * (m * gh - gh.sum(axis=axes, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=axes, keepdims=True))
        return gx, ggamma, gbeta

    return _make(data, (x, gamma, beta), backward, "channel_norm")


# -- serialization ------------------------------------------------------------

TENSOR_MAGIC = b"TNSR"


def write_tensor(fp, tensor) -> None:
    """Binary layout: 'TNSR', u32 rank, u64 per-dim sizes, f64 LE payload."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fp.write(TENSOR_MAGIC)
    fp.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fp.write(struct.pack("<Q", d))
    fp.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(fp) -> Tensor:
    magic = fp.read(4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r} (expected {TENSOR_MAGIC!r})")
    (rank,) = struct.unpack("<I", fp.read(4))
    shape = tuple(struct.unpack("<Q", fp.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    payload = fp.read(8 * count)
    if len(payload) != 8 * count:
        raise ValueError(f"truncated tensor payload: wanted {8 * count} bytes, got {len(payload)}")
    data = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return Tensor(data)
