"""Minimal N-D tensor engine with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 for training, float64 for
gradient checks). Each op records a backward closure; calling
``backward()`` on a scalar loss runs the tape in reverse topological
order and accumulates gradients into every reachable leaf that has
``requires_grad``. Non-leaf graph state is released afterwards, so the
same leaves can be reused for the next forward pass.

The op set is exactly what the refocusing networks need: 3x3 convolution
(replicate / zero / valid padding, stride 1 or 2), 2x2 stride-2 transpose
convolution, 2x2 max pooling, global average pooling, fully-connected
layers, ReLU / LeakyReLU / sigmoid, add / subtract / concat, channel
zero-padding, and mean-abs / mean-square reductions.
"""

import numpy as np

from .errors import DimensionError, NonFiniteError

# Finite-ness of convolution inputs is asserted on every call; disable for
# micro-benchmarks only.
CHECK_FINITE = True


class Tensor:
    """A node in the computation graph wrapping an ndarray."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    # -- graph ------------------------------------------------------------
    def backward(self):
        """Backpropagate from a scalar node through the recorded graph."""
        if self.data.size != 1:
            raise DimensionError("backward() requires a scalar loss node")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            # Release graph state; leaves keep their accumulated .grad.
            if node._parents:
                node._parents = ()
                node._backward = None
                node.grad = None

    # -- convenience arithmetic -------------------------------------------
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        return mul_scalar(self, float(other))

    __rmul__ = __mul__


def _toposort(root):
    order, seen, stack = [], set(), [(root, False)]
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
    return order


def _make(data, parents, backward):
    """Result node; records the tape only if some parent needs gradients."""
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accumulate(node, grad):
    # Stored references are never mutated in place, so aliasing is safe.
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = grad
    else:
        node.grad = node.grad + grad


def as_tensor(value, requires_grad=False) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

_PAD_MODES = ("replicate", "zero", "none")


def _pad_input(x, padding):
    if padding == "replicate":
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge"), 1
    if padding == "zero":
        return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="constant"), 1
    if padding == "none":
        return x, 0
    raise ValueError(f"unknown padding mode {padding!r}; expected one of {_PAD_MODES}")


def _unpad_grad(gp, padding):
    """Fold the gradient of a padded array back onto the unpadded one."""
    if padding == "none":
        return gp
    core = gp[:, :, 1:-1, 1:-1].copy()
    if padding == "zero":
        return core
    # replicate: border pixels also received the pad copies
    core[:, :, 0, :] += gp[:, :, 0, 1:-1]
    core[:, :, -1, :] += gp[:, :, -1, 1:-1]
    core[:, :, :, 0] += gp[:, :, 1:-1, 0]
    core[:, :, :, -1] += gp[:, :, 1:-1, -1]
    core[:, :, 0, 0] += gp[:, :, 0, 0]
    core[:, :, 0, -1] += gp[:, :, 0, -1]
    core[:, :, -1, 0] += gp[:, :, -1, 0]
    core[:, :, -1, -1] += gp[:, :, -1, -1]
    return core


def _im2col(xp, kh, kw, stride, oh, ow):
    """(B, C, Hp, Wp) -> (C*KH*KW, B*OH*OW) so the whole batch is one GEMM."""
    b_, c = xp.shape[:2]
    cols = np.empty((c, kh, kw, b_, oh, ow), dtype=xp.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride].transpose(
                1, 0, 2, 3
            )
    return cols.reshape(c * kh * kw, b_ * oh * ow)


def conv2d(x, weight, bias, stride=1, padding="replicate"):
    """2D convolution with bias.

    x: (B, C, H, W); weight: (OC, C, KH, KW); bias: (OC,).
    padding "replicate"/"zero" pad one pixel, "none" is valid.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input/kernel, got {x.shape} / {weight.shape}")
    oc, ic, kh, kw = weight.shape
    if x.shape[1] != ic:
        raise DimensionError(f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {ic}")
    if bias.shape != (oc,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({oc},)")
    if CHECK_FINITE and not np.isfinite(x.data).all():
        raise NonFiniteError("conv2d input contains NaN/Inf")

    xp, pad = _pad_input(x.data, padding)
    b_, _, hp, wp = xp.shape
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise DimensionError(f"conv2d output would be empty for input {x.shape}")

    cols = _im2col(xp, kh, kw, stride, oh, ow)  # (C*KH*KW, B*S)
    wmat = weight.data.reshape(oc, -1)
    out = np.ascontiguousarray((wmat @ cols).reshape(oc, b_, oh, ow).transpose(1, 0, 2, 3))
    out += bias.data[None, :, None, None]

    def backward(gout):
        g2 = np.ascontiguousarray(gout.transpose(1, 0, 2, 3)).reshape(oc, -1)
        if weight.requires_grad:
            _accumulate(weight, (g2 @ cols.T).reshape(weight.shape))
        if bias.requires_grad:
            _accumulate(bias, g2.sum(axis=1))
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(ic, kh, kw, b_, oh, ow)
            gp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    gp[:, :, ky : ky + stride * oh : stride, kx : kx + stride * ow : stride] += dcols[
                        :, ky, kx
                    ].transpose(1, 0, 2, 3)
            _accumulate(x, _unpad_grad(gp, padding) if pad else gp)

    return _make(out, (x, weight, bias), backward)


def conv_transpose2x2(x, weight, bias):
    """Transpose convolution, 2x2 kernel, stride 2: exact 2x upsampling.

    x: (B, C, H, W); weight: (C, OC, 2, 2); bias: (OC,).
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    ic, oc, kh, kw = weight.shape
    if (kh, kw) != (2, 2):
        raise DimensionError("conv_transpose2x2 requires a 2x2 kernel")
    if x.shape[1] != ic:
        raise DimensionError(f"conv_transpose2x2 channel mismatch: input has {x.shape[1]}, kernel expects {ic}")
    b_, _, h, w = x.shape

    # one GEMM: (OC*4, IC) @ (B, IC, H*W) -> (B, OC, 2, 2, H, W) -> interleave
    wmat = weight.data.transpose(1, 2, 3, 0).reshape(oc * 4, ic)
    xmat = x.data.reshape(b_, ic, h * w)
    t = np.matmul(wmat, xmat).reshape(b_, oc, 2, 2, h, w)
    out = np.ascontiguousarray(t.transpose(0, 1, 4, 2, 5, 3)).reshape(b_, oc, 2 * h, 2 * w)
    out += bias.data[None, :, None, None]

    def backward(gout):
        gt = np.ascontiguousarray(
            gout.reshape(b_, oc, h, 2, w, 2).transpose(0, 1, 3, 5, 2, 4)
        ).reshape(b_, oc * 4, h * w)
        if x.requires_grad:
            _accumulate(x, np.matmul(wmat.T, gt).reshape(x.shape))
        if weight.requires_grad:
            gw = np.matmul(gt, xmat.transpose(0, 2, 1)).sum(axis=0)  # (OC*4, IC)
            _accumulate(weight, gw.reshape(oc, 2, 2, ic).transpose(3, 0, 1, 2).copy())
        if bias.requires_grad:
            _accumulate(bias, gout.sum(axis=(0, 2, 3)))

    return _make(out, (x, weight, bias), backward)


def max_pool2x2(x):
    """2x2 max pooling, stride 2. Backward routes each output gradient to
    exactly one input position (first maximum in scan order on ties)."""
    x = as_tensor(x)
    b_, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2x2 needs even spatial dims, got {h}x{w}")
    oh, ow = h // 2, w // 2
    windows = x.data.reshape(b_, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b_, c, oh, ow, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(gout):
        if not x.requires_grad:
            return
        gwin = np.zeros_like(windows)
        np.put_along_axis(gwin, idx[..., None], gout[..., None], axis=-1)
        gx = gwin.reshape(b_, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b_, c, h, w)
        _accumulate(x, gx)

    return _make(out, (x,), backward)


def global_avg_pool(x):
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    x = as_tensor(x)
    b_, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(gout[:, :, None, None] / (h * w), x.shape).copy())

    return _make(out, (x,), backward)


def linear(x, weight, bias):
    """Fully-connected layer: (B, F) @ (O, F)^T + (O,)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2:
        raise DimensionError(f"linear expects (B, F) input, got {x.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear feature mismatch: {x.shape[1]} vs {weight.shape[1]}")
    out = x.data @ weight.data.T + bias.data

    def backward(gout):
        if weight.requires_grad:
            _accumulate(weight, gout.T @ x.data)
        if bias.requires_grad:
            _accumulate(bias, gout.sum(axis=0))
        if x.requires_grad:
            _accumulate(x, gout @ weight.data)

    return _make(out, (x, weight, bias), backward)


# ---------------------------------------------------------------------------
# pointwise / structural ops
# ---------------------------------------------------------------------------


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0)

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, gout * mask)

    return _make(out, (x,), backward)


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, slope * x.data)

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, gout * np.where(mask, 1.0, slope).astype(gout.dtype))

    return _make(out, (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    # tanh form is overflow-safe in float32
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, gout * out * (1.0 - out))

    return _make(out, (x,), backward)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = a.data + b.data

    def backward(gout):
        _accumulate(a, gout)
        _accumulate(b, gout)

    return _make(out, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    out = a.data - b.data

    def backward(gout):
        _accumulate(a, gout)
        _accumulate(b, -gout)

    return _make(out, (a, b), backward)


def add_scalar(x, c):
    x = as_tensor(x)
    out = x.data + c

    def backward(gout):
        _accumulate(x, gout)

    return _make(out, (x,), backward)


def mul_scalar(x, c):
    x = as_tensor(x)
    out = x.data * c

    def backward(gout):
        _accumulate(x, gout * c)

    return _make(out, (x,), backward)


def concat_channels(tensors):
    """Concatenate along the channel axis (axis 1)."""
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=1)
    splits = np.cumsum([t.shape[1] for t in tensors])[:-1]

    def backward(gout):
        for t, g in zip(tensors, np.split(gout, splits, axis=1)):
            _accumulate(t, g)

    return _make(out, tuple(tensors), backward)


def pad_channels(x, out_channels):
    """Zero-pad the channel axis up to out_channels (residual-add helper)."""
    x = as_tensor(x)
    c = x.shape[1]
    if out_channels < c:
        raise DimensionError(f"pad_channels: cannot shrink {c} -> {out_channels}")
    if out_channels == c:
        return x
    shape = list(x.shape)
    shape[1] = out_channels
    out = np.zeros(shape, dtype=x.dtype)
    out[:, :c] = x.data

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, gout[:, :c])

    return _make(out, (x,), backward)


def mean_square(x):
    """Scalar mean of squared entries."""
    x = as_tensor(x)
    out = np.asarray((x.data ** 2).mean())

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, gout * (2.0 / x.data.size) * x.data)

    return _make(out, (x,), backward)


def mean_abs(x):
    """Scalar mean of absolute entries (subgradient 0 at 0)."""
    x = as_tensor(x)
    out = np.asarray(np.abs(x.data).mean())

    def backward(gout):
        if x.requires_grad:
            _accumulate(x, gout * np.sign(x.data) / x.data.size)

    return _make(out, (x,), backward)
