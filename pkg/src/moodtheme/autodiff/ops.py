"""Forward/backward rules for every op the tagger needs, plus functional wrappers.

All rules work on plain numpy arrays; the wrappers at the bottom lift them to
``Tensor`` via :func:`apply`.
"""
from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, apply, register

OP_KINDS = (
    "conv2d", "linear", "batch_norm_2d", "relu", "relu6", "sigmoid", "softmax",
    "global_avg_pool_2d", "add", "scale", "concat", "reshape", "slice", "mean",
    "transpose", "dropout", "layer_norm", "matmul", "bce_with_logits",
)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _conv_geometry(x_shape, w_shape, stride, padding, groups):
    if len(x_shape) != 4:
        raise ShapeError(f"conv2d: input must be N×C×H×W, got {x_shape}")
    if len(w_shape) != 4:
        raise ShapeError(f"conv2d: kernel must be O×(C/groups)×kh×kw, got {w_shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeError(f"conv2d: bad attrs stride={stride} padding={padding} groups={groups}")
    n, c, h, w = x_shape
    o, cg, kh, kw = w_shape
    if c % groups or o % groups or c // groups != cg:
        raise ShapeError(f"conv2d: {c} input channels, {o} output channels and kernel depth "
                         f"{cg} are inconsistent with groups={groups}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}×{kw} larger than padded input {h}×{w}")
    return n, c, h, w, o, cg, kh, kw, ho, wo


def _window(xg, i, j, stride, ho, wo):
    return xg[..., i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


@register("conv2d")
class _Conv2d:
    # Loop over kernel offsets; each offset is one batched matmul (or an
    # elementwise product in the depthwise case).
    def forward(x, w, b=None, *, stride=1, padding=0, groups=1):
        n, c, h, wd, o, cg, kh, kw, ho, wo = _conv_geometry(x.shape, w.shape, stride, padding, groups)
        g, og = groups, o // groups
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
        wg = w.reshape(g, og, cg, kh, kw)
        out = np.zeros((n, g, og, ho * wo), dtype=np.result_type(x, w))
        depthwise = cg == 1 and og == 1
        for i in range(kh):
            for j in range(kw):
                xs = _window(xg, i, j, stride, ho, wo).reshape(n, g, cg, ho * wo)
                if depthwise:
                    out += xs * wg[:, 0, 0, i, j][None, :, None, None]
                else:
                    out += np.matmul(wg[:, :, :, i, j], xs)
        out = out.reshape(n, o, ho, wo)
        if b is not None:
            out = out + b.reshape(1, o, 1, 1)
        return out, None

    def backward(gy, saved, x, w, b=None, *, stride=1, padding=0, groups=1):
        n, c, h, wd, o, cg, kh, kw, ho, wo = _conv_geometry(x.shape, w.shape, stride, padding, groups)
        g, og = groups, o // groups
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
        xg = xp.reshape(n, g, cg, xp.shape[2], xp.shape[3])
        wg = w.reshape(g, og, cg, kh, kw)
        gyg = gy.reshape(n, g, og, ho * wo)
        gxg = np.zeros_like(xg)
        gwg = np.zeros_like(wg)
        depthwise = cg == 1 and og == 1
        for i in range(kh):
            for j in range(kw):
                xs = _window(xg, i, j, stride, ho, wo).reshape(n, g, cg, ho * wo)
                if depthwise:
                    gwg[:, 0, 0, i, j] = np.einsum("ngk,ngk->g", gyg[:, :, 0], xs[:, :, 0])
                    gxs = gyg * wg[:, 0, 0, i, j][None, :, None, None]
                else:
                    gwg[:, :, :, i, j] = np.matmul(gyg, xs.transpose(0, 1, 3, 2)).sum(axis=0)
                    gxs = np.matmul(wg[:, :, :, i, j].transpose(0, 2, 1), gyg)
                _window(gxg, i, j, stride, ho, wo)[...] += gxs.reshape(n, g, cg, ho, wo)
        gx = gxg.reshape(xp.shape)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + wd]
        grads = [gx, gwg.reshape(w.shape)]
        if b is not None:
            grads.append(gy.sum(axis=(0, 2, 3)))
        return grads


@register("linear")
class _Linear:
    def forward(x, w, b=None):
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise ShapeError(f"linear: input feature size {x.shape[-1]} does not match "
                             f"weight {w.shape} (out×in)")
        y = x @ w.T
        if b is not None:
            if b.shape != (w.shape[0],):
                raise ShapeError(f"linear: bias shape {b.shape} != ({w.shape[0]},)")
            y = y + b
        return y, None

    def backward(gy, saved, x, w, b=None):
        gx = gy @ w
        gw = gy.reshape(-1, w.shape[0]).T @ x.reshape(-1, w.shape[1])
        grads = [gx, gw]
        if b is not None:
            grads.append(gy.reshape(-1, w.shape[0]).sum(axis=0))
        return grads


@register("batch_norm_2d")
class _BatchNorm2d:
    # running_mean / running_var are updated in place in training mode.
    def forward(x, gamma, beta, *, running_mean, running_var, training, momentum=0.1, eps=1e-5):
        if x.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
            raise ShapeError(f"batch_norm_2d: input {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
        if training:
            mu = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            m = x.size // x.shape[1]
            unbiased = var * m / max(m - 1, 1)
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        else:
            mu, var = running_mean, running_var
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
        y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
        return y.astype(x.dtype, copy=False), (xhat, inv)

    def backward(gy, saved, x, gamma, beta, *, training, **_):
        xhat, inv = saved
        axes = (0, 2, 3)
        ggamma = (gy * xhat).sum(axis=axes)
        gbeta = gy.sum(axis=axes)
        gxhat = gy * gamma.reshape(1, -1, 1, 1)
        if training:
            gx = inv.reshape(1, -1, 1, 1) * (
                gxhat - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True))
        else:
            gx = gxhat * inv.reshape(1, -1, 1, 1)
        return [gx, ggamma, gbeta]


@register("layer_norm")
class _LayerNorm:
    def forward(x, gamma, beta, *, eps=1e-5):
        if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: input {x.shape} vs gamma {gamma.shape} beta {beta.shape}")
        mu = x.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
        xhat = (x - mu) * inv
        return xhat * gamma + beta, (xhat, inv)

    def backward(gy, saved, x, gamma, beta, **_):
        xhat, inv = saved
        lead = tuple(range(x.ndim - 1))
        gxhat = gy * gamma
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return [gx, (gy * xhat).sum(axis=lead), gy.sum(axis=lead)]


@register("relu")
class _Relu:
    def forward(x):
        return np.maximum(x, 0), None

    def backward(gy, saved, x):
        return [gy * (x > 0)]


@register("relu6")
class _Relu6:
    def forward(x):
        return np.clip(x, 0, 6), None

    def backward(gy, saved, x):
        return [gy * ((x > 0) & (x < 6))]


def _sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@register("sigmoid")
class _Sigmoid:
    def forward(x):
        s = _sigmoid(x)
        return s, s

    def backward(gy, s, x):
        return [gy * s * (1 - s)]


@register("softmax")
class _Softmax:
    def forward(x, *, axis=-1):
        z = x - x.max(axis=axis, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=axis, keepdims=True)
        return s, s

    def backward(gy, s, x, *, axis=-1):
        return [s * (gy - (gy * s).sum(axis=axis, keepdims=True))]


@register("global_avg_pool_2d")
class _GlobalAvgPool2d:
    def forward(x):
        if x.ndim != 4:
            raise ShapeError(f"global_avg_pool_2d: expected N×C×H×W, got {x.shape}")
        return x.mean(axis=(2, 3)), None

    def backward(gy, saved, x):
        hw = x.shape[2] * x.shape[3]
        return [np.broadcast_to((gy / hw)[:, :, None, None], x.shape).copy()]


@register("add")
class _Add:
    def forward(a, b):
        try:
            shape = np.broadcast_shapes(a.shape, b.shape)
        except ValueError:
            raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None
        del shape
        return a + b, None

    def backward(gy, saved, a, b):
        return [_unbroadcast(gy, a.shape), _unbroadcast(gy, b.shape)]


@register("scale")
class _Scale:
    def forward(x, *, factor):
        return x * factor, None

    def backward(gy, saved, x, *, factor):
        return [gy * factor]


@register("concat")
class _Concat:
    def forward(*xs, axis=0):
        try:
            return np.concatenate(xs, axis=axis), None
        except ValueError as e:
            raise ShapeError(f"concat: {e}") from None

    def backward(gy, saved, *xs, axis=0):
        cuts = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.split(gy, cuts, axis=axis)


@register("reshape")
class _Reshape:
    def forward(x, *, shape):
        try:
            return x.reshape(shape), None
        except ValueError:
            raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None

    def backward(gy, saved, x, *, shape):
        return [gy.reshape(x.shape)]


@register("slice")
class _Slice:
    def forward(x, *, index):
        return x[index].copy(), None

    def backward(gy, saved, x, *, index):
        gx = np.zeros_like(x)
        gx[index] += gy
        return [gx]


@register("mean")
class _Mean:
    def forward(x, *, axis=None, keepdims=False):
        return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None

    def backward(gy, saved, x, *, axis=None, keepdims=False):
        if axis is None:
            count = x.size
            g = np.reshape(gy, (1,) * x.ndim)
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            axes = tuple(a % x.ndim for a in axes)
            count = int(np.prod([x.shape[a] for a in axes]))
            g = gy if keepdims else np.expand_dims(gy, axes)
        return [np.broadcast_to(g / count, x.shape).copy()]


@register("transpose")
class _Transpose:
    def forward(x, *, axes):
        if sorted(axes) != list(range(x.ndim)):
            raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")
        return x.transpose(axes), None

    def backward(gy, saved, x, *, axes):
        return [gy.transpose(np.argsort(axes))]


@register("dropout")
class _Dropout:
    def forward(x, *, p=0.0, training=False, rng=None):
        if not training or p == 0.0:
            return x.copy(), None
        if not 0.0 <= p < 1.0:
            raise ShapeError(f"dropout: p={p} outside [0, 1)")
        rng = rng if rng is not None else np.random.default_rng()
        mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
        return x * mask, mask

    def backward(gy, mask, x, **_):
        return [gy if mask is None else gy * mask]


@register("matmul")
class _Matmul:
    def forward(a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        return np.matmul(a, b), None

    def backward(gy, saved, a, b):
        ga = np.matmul(gy, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), gy)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


@register("bce_with_logits")
class _BCEWithLogits:
    # elementwise: max(x,0) - x*y + log(1 + exp(-|x|)); targets are constants
    def forward(x, *, targets):
        if targets.shape != x.shape:
            raise ShapeError(f"bce_with_logits: logits {x.shape} vs targets {targets.shape}")
        return np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x))), None

    def backward(gy, saved, x, *, targets):
        return [gy * (_sigmoid(x) - targets)]


# functional wrappers ---------------------------------------------------------

def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    inputs = [x, w] if b is None else [x, w, b]
    return apply("conv2d", inputs, stride=stride, padding=padding, groups=groups)


def linear(x, w, b=None):
    return apply("linear", [x, w] if b is None else [x, w, b])


def batch_norm_2d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    return apply("batch_norm_2d", [x, gamma, beta], running_mean=running_mean,
                 running_var=running_var, training=training, momentum=momentum, eps=eps)


def layer_norm(x, gamma, beta, eps=1e-5):
    return apply("layer_norm", [x, gamma, beta], eps=eps)


def relu(x):
    return apply("relu", [x])


def relu6(x):
    return apply("relu6", [x])


def sigmoid(x):
    return apply("sigmoid", [x])


def softmax(x, axis=-1):
    return apply("softmax", [x], axis=axis)


def global_avg_pool_2d(x):
    return apply("global_avg_pool_2d", [x])


def add(a, b):
    return apply("add", [a, b])


def scale(x, factor):
    return apply("scale", [x], factor=float(factor))


def concat(xs, axis=0):
    return apply("concat", list(xs), axis=axis)


def reshape(x, shape):
    return apply("reshape", [x], shape=tuple(shape))


def slice_(x, index):
    return apply("slice", [x], index=index)


def mean(x, axis=None, keepdims=False):
    return apply("mean", [x], axis=axis, keepdims=keepdims)


def transpose(x, axes):
    return apply("transpose", [x], axes=tuple(axes))


def dropout(x, p=0.0, training=False, rng=None):
    return apply("dropout", [x], p=p, training=training, rng=rng)


def matmul(a, b):
    return apply("matmul", [a, b])


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    targets = np.asarray(targets, dtype=logits.dtype)
    return apply("bce_with_logits", [logits], targets=targets)
