"""Initialisation, SGD, the alternating freeze-train protocol and evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from cmanet import ops
from cmanet.cma import CmaBlockParams
from cmanet.data import VideoDataset, batch_snippets, hflip
from cmanet.model import BRANCHES, TwoBranchModel, branch_forward, forward_snippet, fuse_scores, tsn_consensus, video_loss
from cmanet.tensor import Tensor, backward, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    dropout: float = 0.7
    batch_size: int = 16
    segments_train: int = 3
    segments_test: int = 3
    epochs_per_iteration: int = 10
    pretrain_epochs: int = -1  # -1: same as epochs_per_iteration
    lr_drop_factor: float = 10.0
    plateau_patience: int = 3
    iteration_count: int = 2
    weights_iter0: tuple[float, float] = (1.0, 1.0)
    weights_odd: tuple[float, float] = (5.0, 1.0)
    weights_even: tuple[float, float] = (1.0, 5.0)
    flip_prob: float = 0.5
    crop: int = 0  # 0: no crop
    flip_averaging: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.segments_train < 1 or self.segments_test < 1:
            raise ValueError("segment counts must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def fusion_weights(self, iteration: int) -> tuple[float, float]:
        if iteration == 0:
            return tuple(self.weights_iter0)
        return tuple(self.weights_odd if iteration % 2 else self.weights_even)

    @property
    def crop_size(self):
        return self.crop or None


@dataclass
class EvalResult:
    rgb_top1: float
    flow_top1: float
    fused_top1: float
    weights: tuple[float, float]
    rgb_scores: np.ndarray  # [videos, views, C] per-snippet logits
    flow_scores: np.ndarray
    labels: np.ndarray


@dataclass
class IterationReport:
    iteration: int
    trained: str
    rgb_top1: float
    flow_top1: float
    fused_top1: float
    weights: tuple[float, float]
    loss_curve: list = field(default_factory=list)
    epochs: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# initialisation


def init_flow_stem(rgb_stem: np.ndarray, flow_channels: int = 10) -> np.ndarray:
    """Replicate the mean over RGB input channels into every flow input channel."""
    rgb_stem = np.asarray(rgb_stem, dtype=np.float64)
    if rgb_stem.ndim != 4 or rgb_stem.shape[2] != 3:
        raise ValueError(f"expected an HWIO kernel with 3 input channels, got {rgb_stem.shape}")
    mean = rgb_stem.mean(axis=2, keepdims=True)
    return np.repeat(mean, flow_channels, axis=2)


def init_cma_block(params: CmaBlockParams, seed) -> None:
    """He-normal 1x1 kernels, zero output-norm scale and shift."""
    params.reset_parameters(np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# optimiser


class SGD:
    """Momentum SGD with L2 weight decay folded into the velocity."""

    def __init__(self, named_params, lr, momentum=0.9, weight_decay=5e-4, no_decay=()):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.velocity = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            wd = 0.0 if name in self.no_decay else self.weight_decay
            sgd_step(p, p.grad, self.velocity, name, self.lr, self.momentum, wd)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def sgd_step(param: Tensor, grad: np.ndarray, state: dict, key, lr: float, momentum: float, weight_decay: float) -> None:
    """``v <- m v + g + wd p``; ``p <- p - lr v``."""
    grad = np.asarray(grad)
    if grad.shape != param.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {param.shape}")
    v = state.get(key)
    if v is None:
        v = np.zeros_like(param.data)
    v = momentum * v + grad + weight_decay * param.data
    state[key] = v
    param.data = param.data - lr * v


# ---------------------------------------------------------------------------
# training


def _branch_logits(model, branch, rgb, flow, training, rng, use_cma):
    if not use_cma or not model.insertion:
        x = rgb if branch == "rgb" else flow
        return branch_forward(model.branch(branch), x, training, rng)
    return forward_snippet(model, rgb, flow, training, rng, heads=(branch,))[branch]


def train_epoch(model, branch, dataset, cfg, opt, rng, use_cma=True) -> float:
    n = len(dataset)
    order = rng.permutation(n)
    K = cfg.segments_train
    losses, weights = [], []
    for b0 in range(0, n, cfg.batch_size):
        idx = order[b0 : b0 + cfg.batch_size]
        rgb, flow = batch_snippets(dataset, idx, K, rng, train=True, flip_prob=cfg.flip_prob, crop=cfg.crop_size)
        logits = _branch_logits(model, branch, rgb, flow, True, rng, use_cma)
        G = tsn_consensus(ops.reshape(logits, (len(idx), K, -1)))
        loss = video_loss(G, dataset.labels[idx])
        backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
        weights.append(len(idx))
    return float(np.average(losses, weights=weights))


def train_branch_iteration(
    model: TwoBranchModel,
    branch: str,
    dataset: VideoDataset,
    cfg: TrainConfig,
    val: VideoDataset | None = None,
    iteration: int = 0,
    use_cma: bool = True,
    epochs: int | None = None,
    on_epoch=None,
) -> IterationReport:
    """Train one branch on its own head's loss with the sibling frozen.

    The learning rate starts at ``cfg.lr`` and drops by ``lr_drop_factor``
    after ``plateau_patience`` epochs without validation improvement (training
    loss when no validation set is given).
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    other = "flow" if branch == "rgb" else "rgb"
    epochs = cfg.epochs_per_iteration if epochs is None else epochs
    prev = (model.frozen(branch), model.frozen(other))
    model.set_frozen(other, True)
    model.set_frozen(branch, False)
    for b in BRANCHES:
        model.branch(b).cfg.dropout = cfg.dropout
    br = model.branch(branch)
    named = [(n, p) for n, p in br.named_parameters()]
    opt = SGD(named, cfg.lr, cfg.momentum, cfg.weight_decay, br.no_decay_names())
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, iteration, BRANCHES.index(branch), int(use_cma)]))
    best, stale = -np.inf, 0
    curve, rows = [], []
    try:
        for epoch in range(epochs):
            loss = train_epoch(model, branch, dataset, cfg, opt, rng, use_cma)
            curve.append(loss)
            if val is not None and len(val):
                res = evaluate(model, val, cfg.segments_test, False, cfg.fusion_weights(iteration), use_cma=use_cma)
                score = res.rgb_top1 if branch == "rgb" else res.flow_top1
            else:
                score = -loss
            row = {"iteration": iteration, "branch": branch, "epoch": epoch, "lr": opt.lr, "train_loss": loss,
                   "val_top1": score if val is not None else float("nan")}
            rows.append(row)
            logger.info("iter %d %s epoch %d lr %.4g loss %.4f val %.4f", iteration, branch, epoch, opt.lr, loss, row["val_top1"])
            if on_epoch is not None:
                on_epoch(row)
            if score > best:
                best, stale = score, 0
            else:
                stale += 1
                if stale >= cfg.plateau_patience:
                    opt.lr /= cfg.lr_drop_factor
                    stale = 0
    finally:
        model.set_frozen(branch, prev[0])
        model.set_frozen(other, prev[1])
    target = val if val is not None and len(val) else dataset
    res = evaluate(model, target, cfg.segments_test, cfg.flip_averaging, cfg.fusion_weights(iteration), use_cma=use_cma)
    return IterationReport(iteration, branch, res.rgb_top1, res.flow_top1, res.fused_top1, res.weights, curve, rows)


def _snapshot(module):
    return {k: v.copy() for k, v in module.state_dict().items()}


def iterative_train(
    model: TwoBranchModel,
    dataset: VideoDataset,
    cfg: TrainConfig,
    val: VideoDataset | None = None,
    on_iteration=None,
    on_epoch=None,
) -> list[IterationReport]:
    """Independent baseline, then alternating branch training with CMA blocks.

    Iteration 0 trains the flow branch and then the RGB branch on their own,
    without CMA blocks: a late-fusion two-stream model. The flow weights it
    produces serve as the pretrained flow branch. The RGB branch is then reset
    to its initial weights, and iteration ``i >= 1`` trains RGB (odd ``i``) or
    flow (even ``i``) with the other branch frozen.
    """
    init_rgb = _snapshot(model.rgb)
    pre = cfg.epochs_per_iteration if cfg.pretrain_epochs < 0 else cfg.pretrain_epochs
    train_branch_iteration(model, "flow", dataset, cfg, val, 0, use_cma=False, epochs=pre, on_epoch=on_epoch)
    rep0 = train_branch_iteration(model, "rgb", dataset, cfg, val, 0, use_cma=False, on_epoch=on_epoch)
    rep0.trained = "both"
    reports = [rep0]
    if on_iteration is not None:
        on_iteration(rep0, model)
    if cfg.iteration_count == 0:
        return reports
    model.rgb.load_state_dict(init_rgb)
    for it in range(1, cfg.iteration_count + 1):
        branch = "rgb" if it % 2 else "flow"
        rep = train_branch_iteration(model, branch, dataset, cfg, val, it, use_cma=True, on_epoch=on_epoch)
        reports.append(rep)
        if on_iteration is not None:
            on_iteration(rep, model)
    return reports


# ---------------------------------------------------------------------------
# evaluation


def _top1(scores: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(scores, axis=-1) == labels)) if len(labels) else float("nan")


def snippet_scores(model, dataset, segments, flip_averaging=False, use_cma=True, chunk=32):
    """Eval-mode logits per video and view: ``[videos, segments * flips, C]`` per branch."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    rgb_out, flow_out = [], []
    with no_grad():
        for v0 in range(0, len(dataset), chunk):
            idx = np.arange(v0, min(len(dataset), v0 + chunk))
            rgb, flow = batch_snippets(dataset, idx, segments, train=False)
            views = [(rgb, flow)]
            if flip_averaging:
                views.append(hflip(rgb, flow))
            r_views, f_views = [], []
            for r, f in views:
                if use_cma and model.insertion:
                    out = forward_snippet(model, r, f, training=False)
                    lr_, lf_ = out["rgb"], out["flow"]
                else:
                    lr_ = branch_forward(model.rgb, r, False)
                    lf_ = branch_forward(model.flow, f, False)
                r_views.append(lr_.data.reshape(len(idx), segments, -1))
                f_views.append(lf_.data.reshape(len(idx), segments, -1))
            rgb_out.append(np.concatenate(r_views, axis=1))
            flow_out.append(np.concatenate(f_views, axis=1))
    return np.concatenate(rgb_out), np.concatenate(flow_out)


def fused_top1(rgb_scores, flow_scores, labels, w_rgb, w_flow) -> float:
    """Weighted sum per snippet, then averaged over snippets, then argmax."""
    frame = fuse_scores(rgb_scores, flow_scores, w_rgb, w_flow)
    return _top1(tsn_consensus(frame), labels)


def evaluate(model, dataset, segments=3, flip_averaging=False, weights=(1.0, 1.0), use_cma=True) -> EvalResult:
    rs, fs = snippet_scores(model, dataset, segments, flip_averaging, use_cma)
    labels = dataset.labels
    return EvalResult(
        _top1(tsn_consensus(rs), labels),
        _top1(tsn_consensus(fs), labels),
        fused_top1(rs, fs, labels, *weights),
        tuple(weights),
        rs,
        fs,
        labels,
    )


def fusion_weight_sweep(model, dataset, weight_grid, segments=3, flip_averaging=False, use_cma=True, scores=None):
    """Fused top-1 at RGB weight fraction ``w`` (flow gets ``1 - w``).

    Returns ``(curve, best_w)`` where ``curve`` is a list of ``(w, top1)``;
    ties resolve to the first grid point.
    """
    if scores is None:
        rs, fs = snippet_scores(model, dataset, segments, flip_averaging, use_cma)
    else:
        rs, fs = scores
    curve = []
    for w in weight_grid:
        w = float(w)
        if not 0.0 <= w <= 1.0:
            raise ValueError(f"weight fraction {w} outside [0, 1]")
        curve.append((w, fused_top1(rs, fs, dataset.labels, w, 1.0 - w)))
    best = max(curve, key=lambda c: c[1])[0] if curve else None
    return curve, best
