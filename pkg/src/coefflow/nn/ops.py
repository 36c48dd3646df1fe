"""Differentiable primitives with hand-written gradient rules."""
from __future__ import annotations

import math

import numpy as np

from .. import _kernels
from .tensor import Tensor, as_tensor, make

LN_EPS = 1e-5


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return make(a.data + b.data, (a, b), backward, "add")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make(-a.data, (a,), lambda g: a._accum(-g), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return make(a.data * b.data, (a, b), backward, "mul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return make(x.data * mask, (x,), lambda g: x._accum(g * mask), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return make(s, (x,), lambda g: x._accum(g * s * (1.0 - s)), "sigmoid")


def silu(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    y = x.data * s
    return make(y, (x,), lambda g: x._accum(g * (s + x.data * s * (1.0 - s))), "silu")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return make(y, (x,), lambda g: x._accum(g * y), "exp")


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient flows only where the input was inside the bounds."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return make(np.clip(x.data, lo, hi), (x,), lambda g: x._accum(g * inside), "clip")


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1-p)."""
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make(x.data * keep, (x,), lambda g: x._accum(g * keep), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum(x, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x._accum(np.broadcast_to(g, x.shape))

    return make(y, (x,), backward, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make(x.data.reshape(shape), (x,), lambda g: x._accum(g.reshape(old)), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return make(np.transpose(x.data, axes), (x,), lambda g: x._accum(np.transpose(g, inv)), "transpose")


def concat(xs, axis=0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for x, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if x.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                x._accum(g[tuple(idx)])

    return make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs), backward, "concat")


def slice_axis(x, start: int, stop: int, axis: int = 0) -> Tensor:
    x = as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def backward(g):
        full = np.zeros(x.shape)
        full[idx] = g
        x._accum(full)

    return make(x.data[idx], (x,), backward, "slice")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accum(_unbroadcast(gb, b.shape))

    return make(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, W, b=None) -> Tensor:
    """y = x W^T + b over the last axis of ``x``."""
    x = as_tensor(x)
    if x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight in-dim {W.shape[1]}")
    y = x.data @ W.data.T
    if b is not None:
        y = y + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if x.requires_grad:
            x._accum(g @ W.data)
        if W.requires_grad:
            W._accum(g2.T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))

    return make(y, parents, backward, "linear")


def temporal_conv1d(x, w, bias=None, glu: bool = False) -> Tensor:
    """Valid correlation along the time axis.

    ``x`` is ``(..., time, C_in)``; ``w`` is ``(C_out, C_in, k)`` or
    ``(C_out, C_in, k, 1)``. With ``glu`` the output channels are split into
    value and gate halves and ``value * sigmoid(gate)`` is returned.
    """
    x = as_tensor(x)
    wd = w.data.reshape(w.shape[0], w.shape[1], w.shape[2])
    cout, cin, k = wd.shape
    lead, T = x.shape[:-2], x.shape[-2]
    if x.shape[-1] != cin:
        raise ValueError(f"temporal_conv1d: input has {x.shape[-1]} channels, kernel expects {cin}")
    if T < k:
        raise ValueError(f"temporal_conv1d: time length {T} < kernel width {k}")
    if glu and cout % 2:
        raise ValueError("GLU needs an even number of output channels")
    xr = x.data.reshape(-1, T, cin)
    pre = _kernels.conv1d_forward(xr, wd)
    if bias is not None:
        pre = pre + bias.data
    Tp = T - k + 1
    if glu:
        c = cout // 2
        val, gate = pre[..., :c], pre[..., c:]
        s = 0.5 * (1.0 + np.tanh(0.5 * gate))
        out = val * s
    else:
        out = pre
    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g = g.reshape(-1, Tp, g.shape[-1])
        if glu:
            gpre = np.concatenate([g * s, g * val * s * (1.0 - s)], axis=-1)
        else:
            gpre = g
        gx, gw = _kernels.conv1d_backward(xr, wd, gpre)
        if x.requires_grad:
            x._accum(gx.reshape(x.shape))
        if w.requires_grad:
            w._accum(gw.reshape(w.shape))
        if bias is not None and bias.requires_grad:
            bias._accum(gpre.reshape(-1, cout).sum(axis=0))

    return make(out.reshape(lead + (Tp, out.shape[-1])), parents, backward, "temporal_conv1d")


def graph_conv(X, W, A_hat, b=None, node_axis: int = 0) -> Tensor:
    """Y = A_hat X W^T (+ b) with the node dimension at ``node_axis``.

    ``A_hat`` is a fixed (non-trainable) n x n propagation matrix.
    """
    X = as_tensor(X)
    A_hat = np.asarray(A_hat)
    x = np.moveaxis(X.data, node_axis, 0)
    n = x.shape[0]
    if A_hat.shape != (n, n):
        raise ValueError(f"graph_conv: propagation matrix {A_hat.shape} vs {n} nodes")
    shp = x.shape
    mixed = np.moveaxis((A_hat @ x.reshape(n, -1)).reshape(shp), 0, node_axis)
    y = mixed @ W.data.T
    if b is not None:
        y = y + b.data
    parents = (X, W) if b is None else (X, W, b)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        if W.requires_grad:
            W._accum(g2.T @ mixed.reshape(-1, mixed.shape[-1]))
        if b is not None and b.requires_grad:
            b._accum(g2.sum(axis=0))
        if X.requires_grad:
            gm = np.moveaxis(g @ W.data, node_axis, 0)
            gx = (A_hat.T @ gm.reshape(n, -1)).reshape(gm.shape)
            X._accum(np.moveaxis(gx, 0, node_axis))

    return make(y, parents, backward, "graph_conv")


# ---------------------------------------------------------------------------
# normalization and attention
# ---------------------------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return make(y, (x,), backward, "softmax")


def layer_norm(x, scale=None, shift=None, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then optional affine."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat
    if scale is not None:
        y = y * scale.data
    if shift is not None:
        y = y + shift.data
    parents = tuple(p for p in (x, scale, shift) if p is not None)
    D = x.shape[-1]

    def backward(g):
        if shift is not None and shift.requires_grad:
            shift._accum(g.reshape(-1, D).sum(axis=0))
        if scale is not None and scale.requires_grad:
            scale._accum((g * xhat).reshape(-1, D).sum(axis=0))
        if x.requires_grad:
            gh = g * scale.data if scale is not None else g
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
            x._accum(gx)

    return make(y, parents, backward, "layer_norm")


def multi_head_attention(H, Wq, Wk, Wv, Wo, heads: int, bq=None, bk=None, bv=None, bo=None,
                         return_weights: bool = False):
    """Scaled dot-product self-attention over the second-to-last axis of ``H``."""
    d_model = H.shape[-1]
    if d_model % heads:
        raise ValueError(f"d_model={d_model} is not divisible by heads={heads}")
    dh = d_model // heads
    lead, M = H.shape[:-2], H.shape[-2]
    nl = len(lead)
    split = lead + (M, heads, dh)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)  # (..., heads, M, dh)

    def project(W, b):
        return transpose(reshape(linear(H, W, b), split), perm)

    q, k, v = project(Wq, bq), project(Wk, bk), project(Wv, bv)
    kt = transpose(k, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    scores = mul(matmul(q, kt), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = matmul(attn, v)
    ctx = reshape(transpose(ctx, perm), lead + (M, d_model))
    out = linear(ctx, Wo, bo)
    return (out, attn.data) if return_weights else out


def ffn(x, W1, b1, W2, b2) -> Tensor:
    return linear(relu(linear(x, W1, b1)), W2, b2)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def mse_loss(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    diff = pred.data - t
    n = diff.size

    def backward(g):
        if pred.requires_grad:
            pred._accum(g * 2.0 * diff / n)
        if isinstance(target, Tensor) and target.requires_grad:
            target._accum(-g * 2.0 * diff / n)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return make(np.array((diff * diff).sum() / n), parents, backward, "mse")


def gaussian_kl(mu, logvar) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)): summed over the last axis, averaged over the rest."""
    mu, logvar = as_tensor(mu), as_tensor(logvar)
    ev = np.exp(logvar.data)
    per = 0.5 * (mu.data ** 2 + ev - logvar.data - 1.0).sum(axis=-1)
    count = per.size

    def backward(g):
        if mu.requires_grad:
            mu._accum(g * mu.data / count)
        if logvar.requires_grad:
            logvar._accum(g * 0.5 * (ev - 1.0) / count)

    return make(np.array(per.mean()), (mu, logvar), backward, "gaussian_kl")
