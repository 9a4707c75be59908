"""Independent oracles: central differences and a double-loop attention.

Nothing here reuses the attention arithmetic in :mod:`cmanet.cma`; the
attention oracle works on plain floats one query/key pair at a time.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from cmanet import cma, ops
from cmanet.model import video_loss
from cmanet.ops import BatchNormState
from cmanet.tensor import Tensor, backward


@dataclass
class GradReport:
    op: str
    max_rel: float
    max_abs: float
    passed: bool
    worst: tuple = ()

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.op:<28} max_rel={self.max_rel:.3e} max_abs={self.max_abs:.3e} {status}"


def rel_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def naive_attention_oracle(Q, K, V, d_k: int | None = None) -> np.ndarray:
    """Per-query weighted sum with explicitly looped dot products and softmax."""
    Q, K, V = (np.asarray(a, dtype=np.float64).tolist() for a in (Q, K, V))
    d = len(Q[0]) if d_k is None else d_k
    root = math.sqrt(d)
    out = []
    for q in Q:
        logits = []
        for k in K:
            s = 0.0
            for a, b in zip(q, k):
                s += a * b
            logits.append(s / root)
        top = max(logits)
        w = [math.exp(l - top) for l in logits]
        total = sum(w)
        row = [0.0] * len(V[0])
        for wj, v in zip(w, V):
            for c, vc in enumerate(v):
                row[c] += (wj / total) * vc
        out.append(row)
    return np.array(out)


# ---------------------------------------------------------------------------
# gradcheck harness


def _distinct_uniform(rng, shape, gap=1e-3) -> np.ndarray:
    """Values in [-1, 1], pairwise at least ``gap`` apart and away from 0."""
    n = int(np.prod(shape))
    slots = rng.permutation(n)
    span = 2.0 / n
    vals = -1.0 + (slots + 0.25 + 0.5 * rng.random(n)) * span
    vals[np.abs(vals) < gap] += 2 * gap
    return vals.reshape(shape)


def check_function(name, build, inputs, tolerance, eps=1e-5) -> GradReport:
    """Compare recorded gradients of ``sum(build(*inputs) * R)`` with central differences."""
    probe = build(*[Tensor(a) for a in inputs])
    R = np.random.default_rng(len(name)).uniform(-1, 1, probe.shape)

    def scalar(*arrays) -> float:
        return float(np.sum(build(*[Tensor(a) for a in arrays]).data * R))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    out = build(*leaves)
    backward(ops.sum_all(ops.mul(out, Tensor(R))) if out.shape != () else ops.scale(out, float(R)))
    max_rel = max_abs = 0.0
    worst = ()
    for k, leaf in enumerate(leaves):
        def fk(a, k=k):
            args = list(inputs)
            args[k] = a
            return scalar(*args)

        num = finite_diff_grad(fk, inputs[k], eps)
        ana = leaf.grad if leaf.grad is not None else np.zeros_like(num)
        rel = rel_error(ana, num)
        i = int(np.argmax(rel))
        if rel.reshape(-1)[i] >= max_rel:
            max_rel = float(rel.reshape(-1)[i])
            worst = (k, np.unravel_index(i, num.shape))
        max_abs = max(max_abs, float(np.max(np.abs(ana - num))))
    return GradReport(name, max_rel, max_abs, max_rel <= tolerance, worst)


def _cma_block_case(rng, kernel=None):
    cx, cy, d = 4, 6, 2
    blk = cma.CmaBlockParams(cx, cy, d, pool_kv=True, rng=rng)
    gamma = rng.uniform(0.5, 1.5, cx)
    beta = rng.uniform(-0.5, 0.5, cx)
    x = _distinct_uniform(rng, (2, 4, 4, cx))
    y = _distinct_uniform(rng, (2, 4, 4, cy))
    ws = [blk.w_q.data, blk.w_k.data, blk.w_v.data, blk.w_out.data]

    def build(x, y, wq, wk, wv, wo, g, b):
        p = cma.CmaBlockParams(cx, cy, d, pool_kv=True)
        p.w_q, p.w_k, p.w_v, p.w_out = wq, wk, wv, wo
        p.out_norm.gamma, p.out_norm.beta = g, b
        return cma.cma_block_forward(x, y, p, training=True)

    return build, [x, y, *ws, gamma, beta]


def _cases(rng, o):
    """(name, build, inputs) triples; ``o`` maps op names to implementations."""
    bn_state = lambda c: BatchNormState(c)
    C = 3
    eval_state = BatchNormState(C, running_mean=rng.uniform(-0.5, 0.5, C), running_var=rng.uniform(0.5, 1.5, C))
    drop_seed = int(rng.integers(1 << 31))
    return [
        ("matmul", lambda a, b: o["matmul"](a, b), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 2))]),
        ("matmul_batched", lambda a, b: o["matmul"](a, b), [rng.uniform(-1, 1, (2, 3, 4)), rng.uniform(-1, 1, (2, 4, 5))]),
        ("softmax_rows", lambda x: o["softmax_rows"](x), [rng.uniform(-1, 1, (3, 5))]),
        ("conv2d_3x3", lambda x, w: o["conv2d"](x, w, 1, 1), [rng.uniform(-1, 1, (2, 5, 5, 2)), rng.uniform(-1, 1, (3, 3, 2, 3))]),
        ("conv2d_3x3_stride2", lambda x, w: o["conv2d"](x, w, 2, 1), [rng.uniform(-1, 1, (1, 5, 6, 2)), rng.uniform(-1, 1, (3, 3, 2, 2))]),
        ("conv2d_1x1", lambda x, w: o["conv2d"](x, w, 1, 0), [rng.uniform(-1, 1, (2, 3, 3, 4)), rng.uniform(-1, 1, (1, 1, 4, 2))]),
        ("max_pool2d", lambda x: o["max_pool2d"](x), [_distinct_uniform(rng, (1, 4, 4, 3))]),
        ("batch_norm_train", lambda x, g, b: o["batch_norm"](x, g, b, bn_state(C), True),
         [rng.uniform(-1, 1, (2, 3, 3, C)), rng.uniform(0.5, 1.5, C), rng.uniform(-1, 1, C)]),
        ("batch_norm_eval", lambda x, g, b: o["batch_norm"](x, g, b, eval_state, False),
         [rng.uniform(-1, 1, (2, 3, 3, C)), rng.uniform(0.5, 1.5, C), rng.uniform(-1, 1, C)]),
        ("relu", lambda x: o["relu"](x), [_distinct_uniform(rng, (4, 5))]),
        ("add", lambda a, b: o["add"](a, b), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))]),
        ("mul", lambda a, b: o["mul"](a, b), [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (3, 4))]),
        ("scale", lambda x: o["scale"](x, 0.5), [rng.uniform(-1, 1, (3, 4))]),
        ("global_avg_pool", lambda x: o["global_avg_pool"](x), [rng.uniform(-1, 1, (2, 3, 3, 4))]),
        ("dropout", lambda x: o["dropout"](x, 0.5, True, np.random.default_rng(drop_seed)), [rng.uniform(-1, 1, (4, 6))]),
        ("tsn_consensus", lambda x: o["mean_axis"](x, 1), [rng.uniform(-1, 1, (2, 3, 5))]),
        ("video_loss", lambda g: video_loss(g, [1, 3]), [rng.uniform(-1, 1, (2, 5))]),
        ("matmul_softmax_ce",
         lambda a, w: video_loss(o["softmax_rows"](o["matmul"](a, w)), [0, 2, 1]),
         [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (4, 3))]),
        ("cma_attention", lambda q, k, v: cma.cma_attention(q, k, v),
         [rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, (5, 4)), rng.uniform(-1, 1, (5, 4))]),
        ("cma_block_forward", *_cma_block_case(rng)),
    ]


DEFAULT_OPS = {
    name: getattr(ops, name)
    for name in ("matmul", "softmax_rows", "conv2d", "max_pool2d", "batch_norm", "relu", "add", "mul", "scale",
                 "global_avg_pool", "dropout", "mean_axis")
}


def gradcheck_suite(seed: int = 0, tolerance: float = 1e-5, repeats: int = 3, overrides=None) -> list[GradReport]:
    """Check every differentiable op on ``repeats`` seeded inputs; one report per op.

    ``overrides`` replaces entries of the op table, which lets a test inject a
    broken implementation and confirm the suite catches it.
    """
    table = dict(DEFAULT_OPS)
    table.update(overrides or {})
    merged: dict[str, GradReport] = {}
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        for name, build, inputs in _cases(rng, table):
            rep = check_function(name, build, inputs, tolerance)
            cur = merged.get(name)
            if cur is None or rep.max_rel > cur.max_rel:
                rep.max_abs = max(rep.max_abs, cur.max_abs if cur else 0.0)
                merged[name] = rep
            else:
                cur.max_abs = max(cur.max_abs, rep.max_abs)
    for rep in merged.values():
        rep.passed = rep.max_rel <= tolerance
    return list(merged.values())


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["op", "max_rel", "max_abs", "pass"])
    for r in reports:
        w.writerow([r.op, f"{r.max_rel:.6e}", f"{r.max_abs:.6e}", int(r.passed)])
    return buf.getvalue()


def oracle_check(instances: int = 100, seed: int = 0, max_n: int = 16, max_d: int = 8) -> float:
    """Max abs difference between the attention kernel and the looped oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        nq, nk, d = int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_n + 1)), int(rng.integers(1, max_d + 1))
        Q, K, V = rng.uniform(-1, 1, (nq, d)), rng.uniform(-1, 1, (nk, d)), rng.uniform(-1, 1, (nk, d))
        got = cma.cma_attention(Tensor(Q), Tensor(K), Tensor(V)).data
        worst = max(worst, float(np.max(np.abs(got - naive_attention_oracle(Q, K, V)))))
    return worst
