"""Cross-modality attention: operation, residual block and attention maps.

Queries come from the feature map ``x`` of one modality, keys and values
from the feature map ``y`` of the other. With ``y is x`` this is the
non-local (self-attention) block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cmanet import ops
from cmanet.nn import BatchNorm, Module, he_normal
from cmanet.tensor import DimensionError, Tensor, no_grad


class CmaBlockParams(Module):
    """Learnable pieces of one CMA block.

    ``w_q``, ``w_k``, ``w_v`` are 1x1 kernels into ``d_k`` channels,
    ``w_out`` maps back to ``Cx`` and is followed by a batch norm whose scale
    starts at zero, so a fresh block is an identity mapping.
    """

    def __init__(self, cx: int, cy: int, d_k: int | None = None, pool_kv: bool = True, rng=None):
        super().__init__()
        if d_k is None:
            d_k = cx // 2
        if d_k < 1:
            raise ValueError(f"attention dimension must be >= 1, got {d_k} for {cx} channels")
        rng = np.random.default_rng(0) if rng is None else rng
        self.cx, self.cy, self.d_k, self.pool_kv = cx, cy, d_k, pool_kv
        self.w_q = self.add_param("w_q", np.zeros((1, 1, cx, d_k)))
        self.w_k = self.add_param("w_k", np.zeros((1, 1, cy, d_k)))
        self.w_v = self.add_param("w_v", np.zeros((1, 1, cy, d_k)))
        self.w_out = self.add_param("w_out", np.zeros((1, 1, d_k, cx)))
        self.out_norm = self.add_child("out_norm", BatchNorm(cx, zero_gamma=True))
        self.reset_parameters(rng)

    def reset_parameters(self, rng: np.random.Generator) -> None:
        for w in (self.w_q, self.w_k, self.w_v, self.w_out):
            w.data = he_normal(rng, w.shape, w.shape[2])
        self.out_norm.gamma.data = np.zeros(self.cx)
        self.out_norm.beta.data = np.zeros(self.cx)


@dataclass
class AttentionWeights:
    """Normalised attention of query positions over key positions.

    ``matrix`` has one row per query. Positions are spatial (or space-time)
    coordinates; key coordinates live on the pooled grid when pooling is on.
    """

    matrix: np.ndarray
    query_positions: np.ndarray
    key_positions: np.ndarray
    key_grid_shape: tuple[int, ...]


def cma_attention(Q: Tensor, K: Tensor, V: Tensor, return_weights: bool = False):
    """``softmax(Q K^T / sqrt(d_k)) V`` over the last two axes.

    Leading axes, if any, are treated as independent batch items.
    """
    d_k = Q.shape[-1]
    if d_k < 1 or K.shape[-1] != d_k or V.shape[-1] != d_k:
        raise DimensionError(f"cma_attention: feature dims differ: Q {Q.shape}, K {K.shape}, V {V.shape}")
    if K.shape[-2] < 1 or K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"cma_attention: need matching, non-empty keys/values, got {K.shape}, {V.shape}")
    logits = ops.matmul(Q, ops.swap_last(K))
    if d_k != 1:
        logits = ops.scale(logits, 1.0 / np.sqrt(d_k))
    A = ops.softmax_rows(logits)
    z = ops.matmul(A, V)
    return (z, A) if return_weights else z


def _pointwise(x: Tensor, w: Tensor) -> Tensor:
    """1x1 (or 1x1x1) convolution on a channels-last map of any rank >= 4."""
    if x.ndim == 4:
        return ops.conv2d(x, w)
    lead = x.shape[:-3]
    flat = ops.reshape(x, (-1,) + x.shape[-3:])
    out = ops.conv2d(flat, w)
    return ops.reshape(out, lead + out.shape[1:])


def _check_maps(x: Tensor, y: Tensor, params: CmaBlockParams) -> None:
    if x.ndim not in (4, 5) or y.ndim != x.ndim:
        raise DimensionError(f"expected NHWC or NTHWC maps of equal rank, got {x.shape} and {y.shape}")
    if x.shape[0] != y.shape[0]:
        raise DimensionError(f"batch extents differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[-1] != params.cx or y.shape[-1] != params.cy:
        raise DimensionError(
            f"channel mismatch: block expects x:{params.cx}, y:{params.cy}; got {x.shape[-1]}, {y.shape[-1]}"
        )


def cma_operation(x: Tensor, y: Tensor, params: CmaBlockParams, return_weights: bool = False):
    """Attend from every position of ``x`` over all (pooled) positions of ``y``.

    Returns ``z`` laid out like ``x`` but with ``d_k`` channels. Positions are
    flattened per batch item, so queries never see another item's keys.
    """
    _check_maps(x, y, params)
    N = x.shape[0]
    q = _pointwise(x, params.w_q)
    src = ops.max_pool2d(y) if params.pool_kv else y
    k = _pointwise(src, params.w_k)
    v = _pointwise(src, params.w_v)
    d = params.d_k
    Q = ops.reshape(q, (N, -1, d))
    K = ops.reshape(k, (N, -1, d))
    V = ops.reshape(v, (N, -1, d))
    z, A = cma_attention(Q, K, V, return_weights=True)
    z = ops.reshape(z, x.shape[:-1] + (d,))
    if return_weights:
        return z, A, src.shape[1:-1]
    return z


def cma_block_forward(x: Tensor, y: Tensor, params: CmaBlockParams, training: bool) -> Tensor:
    """``BN(W_out z) + x`` with ``z = cma_operation(x, y)``."""
    z = cma_operation(x, y, params)
    out = params.out_norm(_pointwise(z, params.w_out), training)
    return ops.add(out, x)


def nonlocal_block_forward(x: Tensor, params: CmaBlockParams, training: bool) -> Tensor:
    """Self-attention block: the same-modality case of :func:`cma_block_forward`."""
    return cma_block_forward(x, x, params, training)


def upsample_nearest(grid: np.ndarray, shape) -> np.ndarray:
    out = np.asarray(grid)
    for axis, target in enumerate(shape):
        src = out.shape[axis]
        idx = np.minimum(np.arange(target) * src // target, src - 1)
        out = np.take(out, idx, axis=axis)
    return out


def _grid_coords(shape: tuple[int, ...]) -> np.ndarray:
    return np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)


def attention_weights(x: Tensor, y: Tensor, params: CmaBlockParams, item: int = 0) -> AttentionWeights:
    """Full attention matrix of one batch item, computed without recording a graph."""
    with no_grad():
        _, A, key_shape = cma_operation(x, y, params, return_weights=True)
    return AttentionWeights(
        matrix=A.data[item].copy(),
        query_positions=_grid_coords(x.shape[1:-1]),
        key_positions=_grid_coords(tuple(key_shape)),
        key_grid_shape=tuple(key_shape),
    )


def extract_attention_map(x: Tensor, y: Tensor, params: CmaBlockParams, query_position, item: int = 0):
    """Attention row of one query position and its heat grid at ``y``'s resolution.

    ``query_position`` indexes ``x``'s spatial (or space-time) grid. The grid is
    upsampled from the pooled key layout by nearest neighbour.
    """
    qpos = tuple(int(v) for v in query_position)
    qshape = x.shape[1:-1]
    if len(qpos) != len(qshape) or any(not 0 <= p < s for p, s in zip(qpos, qshape)):
        raise IndexError(f"query position {qpos} outside feature grid {qshape}")
    weights = attention_weights(x, y, params, item)
    row = weights.matrix[np.ravel_multi_index(qpos, qshape)]
    return row, upsample_nearest(row.reshape(weights.key_grid_shape), y.shape[1:-1])
