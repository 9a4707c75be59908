import math

import numpy as np
import pytest

from cmanet import ops
from cmanet.model import video_loss
from cmanet.tensor import Tensor, backward, make_node
from cmanet.verification import (
    DEFAULT_OPS,
    GradReport,
    finite_diff_grad,
    gradcheck_suite,
    naive_attention_oracle,
    oracle_check,
    rel_error,
    reports_csv,
)


def test_fd_quadratic_and_linear():
    assert abs(finite_diff_grad(lambda x: float(np.sum(x**2)), [3.0])[0] - 6.0) <= 1e-9
    c = np.array([0.5, -2.0, 3.25])
    np.testing.assert_allclose(finite_diff_grad(lambda x: float(c @ x), np.zeros(3)), c, rtol=0, atol=1e-10)


def test_fd_rejects_non_finite():
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore", divide="ignore"):
        finite_diff_grad(lambda x: float(np.log(x[0])), [0.0])


def test_fd_matches_softmax_loss_path(rng):
    logits = rng.uniform(-1, 1, (3, 5))
    labels = [4, 0, 2]
    lt = Tensor(logits.copy(), requires_grad=True)
    backward(video_loss(ops.softmax_rows(lt), labels))
    num = finite_diff_grad(lambda x: video_loss(ops.softmax_rows(Tensor(x)), labels).item(), logits)
    assert np.max(rel_error(lt.grad, num)) <= 1e-5


def test_oracle_trivial_cases(rng):
    V = rng.normal(size=(1, 2))
    np.testing.assert_allclose(naive_attention_oracle(rng.normal(size=(3, 2)), rng.normal(size=(1, 2)), V), np.repeat(V, 3, 0))
    K = np.ones((4, 2))
    V = rng.normal(size=(4, 2))
    np.testing.assert_allclose(naive_attention_oracle(rng.normal(size=(2, 2)), K, V), np.tile(V.mean(0), (2, 1)), atol=1e-15)


def test_oracle_shares_no_code_with_kernel():
    import inspect

    import cmanet.verification as v

    src = inspect.getsource(v.naive_attention_oracle)
    assert "cma." not in src and "ops." not in src and "np.exp" not in src


def test_oracle_check_agreement():
    assert oracle_check(20, seed=3) <= 1e-12


def test_rel_error_definition():
    assert rel_error(0.5, 0.25) == 0.25
    assert rel_error(100.0, 101.0) == pytest.approx(1 / 101)


def test_suite_passes_and_covers_every_op():
    reports = gradcheck_suite(seed=0, repeats=3)
    names = {r.op for r in reports}
    for op in ("matmul", "conv2d_3x3", "max_pool2d", "batch_norm_train", "softmax_rows", "relu", "add", "mul",
               "cma_attention", "cma_block_forward", "video_loss"):
        assert op in names
    bad = [r.line() for r in reports if not r.passed]
    assert not bad, bad
    assert all(r.max_rel >= 0 and r.max_abs >= 0 for r in reports)


def test_infinite_tolerance_passes():
    assert all(r.passed for r in gradcheck_suite(seed=2, tolerance=math.inf, repeats=1))


def _broken_matmul(a, b):
    out = ops.matmul(a, b)

    def backward_fn(g):
        # transposes swapped on purpose: wrong gradient for A
        return [g @ np.swapaxes(b.data, -1, -2) * 1.01, np.swapaxes(a.data, -1, -2) @ g]

    return make_node(out.data, (a, b), backward_fn, "broken_matmul")


def test_corrupted_matmul_is_reported():
    reports = {r.op: r for r in gradcheck_suite(seed=0, repeats=1, overrides={"matmul": _broken_matmul})}
    assert not reports["matmul"].passed
    assert reports["conv2d_3x3"].passed


def test_report_line_and_csv():
    r = GradReport("relu", 1e-9, 2e-9, True, (0, (1,)))
    assert "relu" in r.line() and "PASS" in r.line()
    text = reports_csv([r, GradReport("mul", 1.0, 1.0, False)])
    assert text.splitlines()[0] == "op,max_rel,max_abs,pass"
    assert text.splitlines()[2].endswith(",0")
