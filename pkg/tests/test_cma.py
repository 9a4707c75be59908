import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmanet import ops
from cmanet.cma import (
    CmaBlockParams,
    attention_weights,
    cma_attention,
    cma_block_forward,
    cma_operation,
    extract_attention_map,
    nonlocal_block_forward,
)
from cmanet.tensor import DimensionError, Tensor
from cmanet.verification import naive_attention_oracle


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def _block(cx, cy, seed, pool=True, gamma=None):
    p = CmaBlockParams(cx, cy, pool_kv=pool, rng=np.random.default_rng(seed))
    if gamma is not None:
        r = np.random.default_rng(seed + 1)
        p.out_norm.gamma.data = r.uniform(0.5, 1.5, cx) * gamma
        p.out_norm.beta.data = r.uniform(-0.5, 0.5, cx) * gamma
    return p


# -- attention kernel ------------------------------------------------------------


def test_single_key_returns_value_row(rng):
    V = rng.normal(size=(1, 3))
    out = cma_attention(T(rng.normal(size=(4, 3))), T(rng.normal(size=(1, 3))), T(V)).data
    np.testing.assert_array_equal(out, np.repeat(V, 4, axis=0))


def test_identical_keys_average_values(rng):
    K = np.tile(rng.normal(size=(1, 3)), (5, 1))
    V = rng.normal(size=(5, 3))
    out = cma_attention(T(rng.normal(size=(2, 3))), T(K), T(V)).data
    np.testing.assert_allclose(out, np.tile(V.mean(axis=0), (2, 1)), atol=1e-14)


def test_random_instance_matches_looped_oracle(rng):
    Q, K, V = rng.normal(size=(2, 3)), rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    got = cma_attention(T(Q), T(K), T(V)).data
    assert np.max(np.abs(got - naive_attention_oracle(Q, K, V, 3))) <= 1e-12


def test_dk_one_has_no_scaling(rng):
    Q, K, V = rng.normal(size=(3, 1)), rng.normal(size=(4, 1)), rng.normal(size=(4, 1))
    ref = ops.matmul(ops.softmax_rows(ops.matmul(T(Q), T(K.T))), T(V)).data
    assert np.array_equal(cma_attention(T(Q), T(K), T(V)).data, ref)


def test_attention_dim_mismatch():
    with pytest.raises(DimensionError):
        cma_attention(T(np.ones((2, 3))), T(np.ones((4, 2))), T(np.ones((4, 3))))


# -- operation --------------------------------------------------------------------


def test_constant_y_gives_constant_z(rng):
    p = _block(8, 6, 0)
    y = np.tile(rng.normal(size=(1, 1, 1, 6)), (1, 4, 4, 1))
    z = cma_operation(T(rng.normal(size=(1, 4, 4, 8))), T(y), p).data
    np.testing.assert_allclose(z, np.broadcast_to(z[:, :1, :1], z.shape), atol=1e-13)


def test_self_logits_symmetric_with_tied_embeddings(rng):
    p = _block(8, 8, 3, pool=False)
    p.w_k.data = p.w_q.data.copy()
    x = T(rng.normal(size=(1, 3, 3, 8)))
    q = ops.reshape(ops.conv2d(x, p.w_q), (9, 4)).data
    k = ops.reshape(ops.conv2d(x, p.w_k), (9, 4)).data
    logits = q @ k.T
    np.testing.assert_array_equal(logits, logits.T)


def test_operation_matches_composition_of_primitives(rng):
    p = _block(8, 8, 5)
    x, y = rng.normal(size=(1, 4, 4, 8)), rng.normal(size=(1, 4, 4, 8))
    d = p.d_k
    pooled = ops.max_pool2d(T(y)).data.reshape(-1, 8)
    Q = x.reshape(-1, 8) @ p.w_q.data.reshape(8, d)
    K = pooled @ p.w_k.data.reshape(8, d)
    V = pooled @ p.w_v.data.reshape(8, d)
    ref = naive_attention_oracle(Q, K, V, d).reshape(1, 4, 4, d)
    np.testing.assert_allclose(cma_operation(T(x), T(y), p).data, ref, atol=1e-12)


def test_space_time_maps_flatten_all_positions(rng):
    # time is not pooled; every query attends over T * (H/2) * (W/2) keys
    p = _block(4, 6, 2)
    x, y = rng.normal(size=(2, 3, 4, 4, 4)), rng.normal(size=(2, 3, 4, 4, 6))
    z, A, kshape = cma_operation(T(x), T(y), p, return_weights=True)
    assert z.shape == (2, 3, 4, 4, 2) and A.shape == (2, 48, 12) and tuple(kshape) == (3, 2, 2)
    pooled = ops.max_pool2d(T(y)).data
    for n in range(2):
        Q = x[n].reshape(-1, 4) @ p.w_q.data.reshape(4, 2)
        K = pooled[n].reshape(-1, 6) @ p.w_k.data.reshape(6, 2)
        V = pooled[n].reshape(-1, 6) @ p.w_v.data.reshape(6, 2)
        np.testing.assert_allclose(z.data[n].reshape(-1, 2), naive_attention_oracle(Q, K, V, 2), atol=1e-12)


def test_keys_permutation_invariant_without_pooling(rng):
    p = _block(4, 4, 7, pool=False)
    x, y = rng.normal(size=(1, 3, 3, 4)), rng.normal(size=(1, 3, 3, 4))
    perm = rng.permutation(9)
    yp = y.reshape(1, 9, 4)[:, perm].reshape(1, 3, 3, 4)
    np.testing.assert_allclose(cma_operation(T(x), T(y), p).data, cma_operation(T(x), T(yp), p).data, atol=1e-13)


def test_queries_do_not_cross_batch_items(rng):
    p = _block(4, 4, 1)
    x, y = rng.normal(size=(2, 4, 4, 4)), rng.normal(size=(2, 4, 4, 4))
    both = cma_operation(T(x), T(y), p).data
    first = cma_operation(T(x[:1]), T(y[:1]), p).data
    np.testing.assert_allclose(both[:1], first, atol=1e-14)


def test_channel_mismatch_errors(rng):
    with pytest.raises(DimensionError):
        cma_operation(T(rng.normal(size=(1, 4, 4, 5))), T(rng.normal(size=(1, 4, 4, 6))), _block(4, 6, 0))


# -- block -----------------------------------------------------------------------


def test_default_builder_halves_channels():
    p = CmaBlockParams(16, 32)
    assert p.d_k == 8 and p.w_out.shape == (1, 1, 8, 16)
    assert not p.out_norm.gamma.data.any()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_fresh_block_is_identity(seed, training):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(2, 4, 4, 6)) * 10, r.normal(size=(2, 4, 4, 4)) * 10
    out = cma_block_forward(T(x), T(y), _block(6, 4, seed), training).data
    assert np.max(np.abs(out - x)) <= 1e-12


def test_zero_w_out_is_identity(rng):
    p = _block(6, 4, 0, gamma=1.0)
    p.out_norm.beta.data[:] = 0.0
    p.w_out.data[:] = 0.0
    x = rng.normal(size=(2, 4, 4, 6))
    out = cma_block_forward(T(x), T(rng.normal(size=(2, 4, 4, 4))), p, training=False).data
    np.testing.assert_array_equal(out, x)


def test_trained_block_changes_output(rng):
    x = rng.normal(size=(2, 4, 4, 6))
    out = cma_block_forward(T(x), T(rng.normal(size=(2, 4, 4, 4))), _block(6, 4, 0, gamma=1.0), training=True)
    assert out.shape == x.shape and not np.allclose(out.data, x)


def test_nonlocal_is_cma_with_same_input_bitwise(rng):
    for i in range(5):
        p = _block(6, 6, i, gamma=1.0)
        x = T(rng.normal(size=(2, 4, 4, 6)))
        a = cma_block_forward(x, x, p, training=False).data
        b = nonlocal_block_forward(x, p, training=False).data
        assert a.tobytes() == b.tobytes()


def test_nonlocal_fresh_is_identity(rng):
    x = rng.normal(size=(1, 4, 4, 6))
    assert np.array_equal(nonlocal_block_forward(T(x), _block(6, 6, 9), training=True).data, x)


def test_nonlocal_matches_oracle_pipeline(rng):
    p = _block(4, 4, 11, pool=False, gamma=1.0)
    x = rng.normal(size=(1, 3, 3, 4))
    flat = x.reshape(-1, 4)
    z = naive_attention_oracle(flat @ p.w_q.data[0, 0], flat @ p.w_k.data[0, 0], flat @ p.w_v.data[0, 0], 2)
    pre = z @ p.w_out.data[0, 0]
    st_ = p.out_norm.state
    bn = (pre - st_.running_mean) / np.sqrt(st_.running_var + st_.eps) * p.out_norm.gamma.data + p.out_norm.beta.data
    np.testing.assert_allclose(nonlocal_block_forward(T(x), p, training=False).data, (bn + flat).reshape(x.shape), atol=1e-12)


# -- attention maps --------------------------------------------------------------


def test_single_key_position_gets_all_weight(rng):
    p = _block(4, 4, 0)
    row, grid = extract_attention_map(T(rng.normal(size=(1, 3, 3, 4))), T(rng.normal(size=(1, 2, 2, 4))), p, (1, 2))
    assert row.tolist() == [1.0] and grid.shape == (2, 2) and np.all(grid == 1.0)


def test_map_rows_match_oracle_and_sum_to_one(rng):
    p = _block(8, 6, 4)
    x, y = rng.normal(size=(2, 4, 4, 8)), rng.normal(size=(2, 8, 8, 6))
    aw = attention_weights(T(x), T(y), p, item=1)
    np.testing.assert_allclose(aw.matrix.sum(axis=1), 1.0, atol=1e-12)
    assert aw.key_grid_shape == (4, 4) and aw.key_positions.shape == (16, 2)
    row, grid = extract_attention_map(T(x), T(y), p, (2, 3), item=1)
    pooled = ops.max_pool2d(T(y)).data[1].reshape(-1, 6)
    q = x[1].reshape(-1, 8) @ p.w_q.data[0, 0]
    logits = q @ (pooled @ p.w_k.data[0, 0]).T / np.sqrt(p.d_k)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    np.testing.assert_allclose(row, (e / e.sum(axis=1, keepdims=True))[2 * 4 + 3], atol=1e-14)
    assert grid.shape == (8, 8)
    np.testing.assert_array_equal(grid[::2, ::2], row.reshape(4, 4))


def test_map_query_out_of_range(rng):
    with pytest.raises(IndexError):
        extract_attention_map(T(rng.normal(size=(1, 2, 2, 4))), T(rng.normal(size=(1, 2, 2, 4))), _block(4, 4, 0), (2, 0))
