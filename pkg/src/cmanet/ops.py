"""Differentiable operators on :class:`~cmanet.tensor.Tensor`.

Layout is channels-last (NHWC, or NTHWC for clips). Each function computes
its forward with numpy and registers a closure that maps the output
gradient to parent gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from cmanet.tensor import DTYPE, DimensionError, Tensor, make_node

__all__ = [
    "BatchNormState",
    "add",
    "add_bias",
    "batch_norm",
    "conv2d",
    "cross_entropy",
    "dropout",
    "global_avg_pool",
    "matmul",
    "max_pool2d",
    "mean_axis",
    "mul",
    "relu",
    "reshape",
    "scale",
    "softmax_rows",
    "sum_all",
    "swap_last",
]

# rows of the im2col buffer per chunk; keeps the buffer cache-resident
_IM2COL_ROWS = 1024


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _need(t: Tensor) -> bool:
    return t.requires_grad


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for 2-D operands, or stacks of matrices with equal leading dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g):
        ga = g @ np.swapaxes(B, -1, -2) if _need(a) else None
        gb = np.swapaxes(A, -1, -2) @ g if _need(b) else None
        return ga, gb

    return make_node(out, (a, b), backward, "matmul")


def swap_last(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    out = np.swapaxes(x.data, -1, -2)
    return make_node(out, (x,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(src),), "reshape")


# ---------------------------------------------------------------------------
# pointwise


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        bb = np.asarray(b, dtype=DTYPE)
        if bb.ndim == 0:
            return make_node(a.data + bb, (a,), lambda g: (g,), "add")
        b = Tensor(bb)
    _check_same("add", a, b)
    return make_node(a.data + b.data, (a, b), lambda g: (g, g), "add")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Broadcast-add a per-channel vector over the last axis."""
    if bias.ndim != 1 or bias.shape[0] != x.shape[-1]:
        raise DimensionError(f"add_bias: bias {bias.shape} does not match {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return make_node(
        x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=axes) if _need(bias) else None), "add_bias"
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    A, B = a.data, b.data
    return make_node(
        A * B,
        (a, b),
        lambda g: (g * B if _need(a) else None, g * A if _need(b) else None),
        "mul",
    )


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    if not np.isfinite(c):
        raise ValueError(f"scale: factor must be finite, got {c}")
    return make_node(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    # gradient at exactly 0 is 0
    out = np.maximum(x.data, 0.0)
    return make_node(out, (x,), lambda g: (g * (out > 0),), "relu")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return make_node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_axis(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    if n < 1:
        raise DimensionError("mean over an empty axis")

    def backward(g):
        return (np.repeat(np.expand_dims(g, axis), n, axis=axis) / n,)

    return make_node(x.data.mean(axis=axis), (x,), backward, "mean")


# ---------------------------------------------------------------------------
# normalisation / attention helpers


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis, shifted by the row max so it never overflows."""
    if x.shape[-1] < 1:
        raise DimensionError("softmax over zero columns")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return make_node(p, (x,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over rows of ``-(G[y] - logsumexp(G))``."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    G = logits.data
    if G.ndim != 2 or G.shape[0] != labels.shape[0]:
        raise DimensionError(f"cross_entropy: logits {G.shape} vs {labels.shape[0]} labels")
    C = G.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise IndexError(f"label out of range for {C} classes")
    m = G.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(G - m).sum(axis=1))
    rows = np.arange(G.shape[0])
    loss = np.mean(lse - G[rows, labels])

    def backward(g):
        p = np.exp(G - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / G.shape[0]),)

    return make_node(np.asarray(loss), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# convolution and pooling


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int, out: np.ndarray) -> np.ndarray:
    for i in range(kh):
        for j in range(kw):
            out[:, :, :, i, j, :] = xp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :]
    return out.reshape(out.shape[0] * Ho * Wo, -1)


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of NHWC ``x`` with an HWIO kernel ``w``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: expected NHWC input and HWIO weight, got {x.shape}, {w.shape}")
    N, H, W, C = x.shape
    kh, kw, cin, co = w.shape
    if cin != C:
        raise DimensionError(f"conv2d: input has {C} channels, weight expects {cin} ({x.shape} vs {w.shape})")
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2) or pad < 0:
        raise ValueError(f"conv2d: unsupported stride={stride} pad={pad}")
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: output extent {Ho}x{Wo} < 1 for input {x.shape} and kernel {w.shape}")
    X, Wt = x.data, w.data
    wm = Wt.reshape(kh * kw * C, co)

    if kh == 1 and kw == 1 and pad == 0:
        xs = X[:, ::stride, ::stride, :] if stride > 1 else X
        x2 = np.ascontiguousarray(xs).reshape(-1, C)
        out = (x2 @ wm).reshape(N, Ho, Wo, co)

        def backward_1x1(g):
            g2 = g.reshape(-1, co)
            gw = (x2.T @ g2).reshape(Wt.shape) if _need(w) else None
            gx = None
            if _need(x):
                gxs = (g2 @ wm.T).reshape(N, Ho, Wo, C)
                if stride > 1:
                    gx = np.zeros_like(X)
                    gx[:, ::stride, ::stride, :] = gxs
                else:
                    gx = gxs
            return gx, gw

        return make_node(out, (x, w), backward_1x1, "conv2d")

    xp = np.pad(X, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else X
    chunk = max(1, _IM2COL_ROWS // (Ho * Wo))
    buf = np.empty((min(chunk, N), Ho, Wo, kh, kw, C), dtype=DTYPE)
    out = np.empty((N, Ho, Wo, co), dtype=DTYPE)
    for n0 in range(0, N, chunk):
        n1 = min(N, n0 + chunk)
        cols = _im2col(xp[n0:n1], kh, kw, stride, Ho, Wo, buf[: n1 - n0])
        out[n0:n1] = (cols @ wm).reshape(n1 - n0, Ho, Wo, co)

    def backward(g):
        need_x, need_w = _need(x), _need(w)
        gw = np.zeros_like(wm) if need_w else None
        gx = None
        if need_w:
            for n0 in range(0, N, chunk):
                n1 = min(N, n0 + chunk)
                cols = _im2col(xp[n0:n1], kh, kw, stride, Ho, Wo, buf[: n1 - n0])
                gw += cols.T @ g[n0:n1].reshape(-1, co)
        if need_x and stride == 1 and pad <= min(kh, kw) - 1:
            # input gradient of a stride-1 correlation is a correlation of the
            # output gradient with the flipped, transposed kernel
            wflip = np.ascontiguousarray(Wt[::-1, ::-1].transpose(0, 1, 3, 2)).reshape(kh * kw * co, C)
            qh, qw = kh - 1 - pad, kw - 1 - pad
            gp = np.pad(g, ((0, 0), (qh, qh), (qw, qw), (0, 0)))
            gbuf = np.empty((min(chunk, N), H, W, kh, kw, co), dtype=DTYPE)
            gx = np.empty_like(X)
            for n0 in range(0, N, chunk):
                n1 = min(N, n0 + chunk)
                cols = _im2col(gp[n0:n1], kh, kw, 1, H, W, gbuf[: n1 - n0])
                gx[n0:n1] = (cols @ wflip).reshape(n1 - n0, H, W, C)
        elif need_x:
            gxp = np.zeros_like(xp)
            for n0 in range(0, N, chunk):
                n1 = min(N, n0 + chunk)
                dcols = (g[n0:n1].reshape(-1, co) @ wm.T).reshape(n1 - n0, Ho, Wo, kh, kw, C)
                tgt = gxp[n0:n1]
                for i in range(kh):
                    for j in range(kw):
                        tgt[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride, :] += dcols[:, :, :, i, j, :]
            gx = gxp[:, pad : pad + H, pad : pad + W, :] if pad else gxp
        return gx, (gw.reshape(Wt.shape) if need_w else None)

    return make_node(out, (x, w), backward, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pool with stride 2 over the two axes before channels.

    Accepts NHWC or NTHWC; time is never pooled. Ties route the gradient to
    the first element in row-major window order.
    """
    if x.ndim < 3:
        raise DimensionError(f"max_pool2d: need spatial axes, got {x.shape}")
    *lead, H, W, C = x.shape
    if H < 2 or W < 2:
        raise DimensionError(f"max_pool2d: spatial extent {H}x{W} < 2")
    Ho, Wo = H // 2, W // 2
    X = x.data.reshape(-1, H, W, C)[:, : 2 * Ho, : 2 * Wo, :]
    M = X.shape[0]
    win = X.reshape(M, Ho, 2, Wo, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(M, Ho, Wo, C, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        g = g.reshape(M, Ho, Wo, C)
        onehot = np.zeros((M, Ho, Wo, C, 4), dtype=DTYPE)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros((M, H, W, C), dtype=DTYPE)
        gx[:, : 2 * Ho, : 2 * Wo, :] = (
            onehot.reshape(M, Ho, Wo, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(M, 2 * Ho, 2 * Wo, C)
        )
        return (gx.reshape(x.shape),)

    return make_node(out.reshape(*lead, Ho, Wo, C), (x,), backward, "max_pool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over spatial positions: ``[N, H, W, C] -> [N, C]``."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool: expected NHWC, got {x.shape}")
    N, H, W, C = x.shape
    hw = H * W

    def backward(g):
        return (np.broadcast_to((g / hw)[:, None, None, :], x.shape).copy(),)

    return make_node(x.data.mean(axis=(1, 2)), (x,), backward, "global_avg_pool")


# ---------------------------------------------------------------------------
# batch norm / dropout


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer.

    ``momentum`` weights the old running value: ``r <- m*r + (1-m)*batch``.
    """

    num_channels: int
    momentum: float = 0.9
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("batch norm eps must be positive")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.num_channels, dtype=DTYPE)
        if self.running_var is None:
            self.running_var = np.ones(self.num_channels, dtype=DTYPE)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel normalisation over every axis except the last."""
    C = x.shape[-1]
    if gamma.shape != (C,) or beta.shape != (C,) or state.num_channels != C:
        raise DimensionError(f"batch_norm: parameters for {gamma.shape[0]} channels, input has {C}")
    X2 = x.data.reshape(-1, C)
    M = X2.shape[0]
    G, B = gamma.data, beta.data
    ones = np.ones(M)
    if training:
        if M == 0:
            raise ValueError("batch_norm: empty batch in train mode")
        mu = (ones @ X2) / M
        xc = X2 - mu
        var = (ones @ (xc * xc)) / M
        inv = 1.0 / np.sqrt(var + state.eps)
        m = state.momentum
        unbiased = var * (M / (M - 1)) if M > 1 else var
        state.running_mean = m * state.running_mean + (1 - m) * mu
        state.running_var = m * state.running_var + (1 - m) * unbiased
        out = xc * (G * inv) + B

        def backward(g):
            g2 = g.reshape(-1, C)
            xhat = xc * inv
            gsum = ones @ g2
            gxhat = ones @ (g2 * xhat)
            gx = None
            if _need(x):
                gx = ((G * inv) * (g2 - gsum / M - xhat * (gxhat / M))).reshape(x.shape)
            return gx, (gxhat if _need(gamma) else None), (gsum if _need(beta) else None)

    else:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xc = X2 - state.running_mean
        out = xc * (G * inv) + B

        def backward(g):
            g2 = g.reshape(-1, C)
            gx = (g2 * (G * inv)).reshape(x.shape) if _need(x) else None
            gg = ones @ (g2 * (xc * inv)) if _need(gamma) else None
            gb = ones @ g2 if _need(beta) else None
            return gx, gg, gb

    out = out.reshape(x.shape)
    return make_node(out, (x, gamma, beta), backward, "batch_norm")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return make_node(x.data * keep, (x,), lambda g: (g * keep,), "dropout")
