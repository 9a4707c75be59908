"""Two-branch (RGB + flow) residual classifier with cross-modality blocks."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from cmanet import ops
from cmanet.cma import CmaBlockParams, cma_block_forward
from cmanet.nn import BatchNorm, Conv, Linear, Module, ResidualBlock
from cmanet.tensor import DimensionError, Tensor, grad_enabled

BRANCHES = ("rgb", "flow")


class ConfigError(ValueError):
    pass


@dataclass
class BranchConfig:
    input_channels: int
    stage_channels: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    cma_insertion: tuple[tuple[int, int], ...] = ((1, 0), (2, 0))
    num_classes: int = 8
    dropout: float = 0.7

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.cma_insertion = tuple((int(s), int(b)) for s, b in self.cma_insertion)
        for s, b in self.cma_insertion:
            if not (0 <= s < len(self.stage_channels) and 0 <= b < self.blocks_per_stage):
                raise ConfigError(f"CMA insertion point {(s, b)} is not a block of this backbone")


def rgb_config(**kw) -> BranchConfig:
    return BranchConfig(input_channels=3, **kw)


def flow_config(stack_length: int = 5, **kw) -> BranchConfig:
    return BranchConfig(input_channels=2 * stack_length, **kw)


def _point_name(point) -> str:
    return f"cma_s{point[0]}b{point[1]}"


class Branch(Module):
    """Stem, residual stages and classifier head of one modality.

    The CMA blocks whose queries come from this branch live here too; they
    are created by :func:`build_model` once the sibling's widths are known.
    """

    def __init__(self, cfg: BranchConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c0 = cfg.stage_channels[0]
        self.stem = self.add_child("stem", Conv(rng, cfg.input_channels, c0, 3, 1))
        self.stem_bn = self.add_child("stem_bn", BatchNorm(c0))
        self.blocks: list[list[ResidualBlock]] = []
        cin = c0
        for s, c in enumerate(cfg.stage_channels):
            stage = []
            for b in range(cfg.blocks_per_stage):
                stride = 2 if (s > 0 and b == 0) else 1
                stage.append(self.add_child(f"s{s}b{b}", ResidualBlock(rng, cin, c, stride)))
                cin = c
            self.blocks.append(stage)
        self.fc = self.add_child("fc", Linear(rng, cin, cfg.num_classes))
        self.cma: dict[tuple[int, int], CmaBlockParams] = {}

    def add_cma(self, point, block: CmaBlockParams) -> None:
        self.cma[point] = self.add_child(_point_name(point), block)

    def stem_forward(self, x: Tensor, training: bool) -> Tensor:
        return ops.relu(self.stem_bn(self.stem(x), training))

    def head(self, h: Tensor, training: bool, rng=None) -> Tensor:
        pooled = ops.global_avg_pool(h)
        pooled = ops.dropout(pooled, self.cfg.dropout, training, rng)
        return self.fc(pooled)

    def cma_parameters(self) -> list[Tensor]:
        return [p for blk in self.cma.values() for p in blk.parameters()]


@dataclass
class TwoBranchModel:
    rgb: Branch
    flow: Branch
    insertion: tuple[tuple[int, int], ...]
    freeze_rgb: bool = False
    freeze_flow: bool = False
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def branch(self, name: str) -> Branch:
        if name not in BRANCHES:
            raise ValueError(f"unknown branch {name!r}")
        return self.rgb if name == "rgb" else self.flow

    def frozen(self, name: str) -> bool:
        return self.freeze_rgb if name == "rgb" else self.freeze_flow

    def set_frozen(self, name: str, flag: bool) -> None:
        if name == "rgb":
            self.freeze_rgb = flag
        else:
            self.freeze_flow = flag
        self.branch(name).set_requires_grad(not flag)

    def named_parameters(self):
        yield from self.rgb.named_parameters("rgb.")
        yield from self.flow.named_parameters("flow.")

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"rgb.{k}": v for k, v in self.rgb.state_dict().items()}
        out.update({f"flow.{k}": v for k, v in self.flow.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.rgb.load_state_dict({k[4:]: v for k, v in state.items() if k.startswith("rgb.")})
        self.flow.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("flow.")})


def build_model(cfg_rgb: BranchConfig, cfg_flow: BranchConfig, seed: int = 0) -> TwoBranchModel:
    """Both branches plus one unshared CMA block per branch per insertion point.

    Backbone weights and CMA weights come from separate seed streams, so the
    backbone is identical with or without CMA blocks.
    """
    if cfg_rgb.num_classes != cfg_flow.num_classes:
        raise ConfigError("branches disagree on num_classes")
    if set(cfg_rgb.cma_insertion) != set(cfg_flow.cma_insertion):
        raise ConfigError("branches must share CMA insertion points")
    ss = np.random.SeedSequence(seed)
    s_rgb, s_flow, s_cma = ss.spawn(3)
    rgb = Branch(cfg_rgb, np.random.default_rng(s_rgb))
    flow = Branch(cfg_flow, np.random.default_rng(s_flow))
    cma_rng = np.random.default_rng(s_cma)
    insertion = tuple(sorted(cfg_rgb.cma_insertion))
    for point in insertion:
        s = point[0]
        if s >= len(cfg_flow.stage_channels) or point[1] >= cfg_flow.blocks_per_stage:
            raise ConfigError(f"insertion point {point} missing in flow backbone")
        cr, cf = cfg_rgb.stage_channels[s], cfg_flow.stage_channels[s]
        rgb.add_cma(point, CmaBlockParams(cr, cf, rng=cma_rng))
        flow.add_cma(point, CmaBlockParams(cf, cr, rng=cma_rng))
    return TwoBranchModel(rgb, flow, insertion, seed=seed)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def branch_forward(branch: Branch, x, training: bool, rng=None) -> Tensor:
    """Run one branch alone, skipping its CMA blocks (plain single-stream model)."""
    h = branch.stem_forward(_as_input(x), training)
    for stage in branch.blocks:
        for blk in stage:
            h = blk(h, training)
    return branch.head(h, training, rng)


def _frozen_identity(blk: CmaBlockParams) -> bool:
    """A block with zero output-norm scale and shift returns its input.

    Skipping it is exact only when nothing needs its gradient.
    """
    g, b = blk.out_norm.gamma, blk.out_norm.beta
    if grad_enabled() and (g.requires_grad or b.requires_grad):
        return False
    return not g.data.any() and not b.data.any()


def forward_snippet(
    model: TwoBranchModel,
    rgb,
    flow,
    training: bool = False,
    rng: np.random.Generator | None = None,
    heads=BRANCHES,
    use_cma: bool = True,
    taps: dict | None = None,
) -> dict[str, Tensor]:
    """Per-snippet logits of the requested heads.

    The branches advance block by block. At an insertion point both blocks see
    the sibling's pre-CMA feature of that point, which already includes the
    sibling's CMA blocks at earlier points. A frozen branch runs its BN in eval
    mode. Features a requested head never depends on are not computed.
    If ``taps`` is a dict it receives ``(branch, point) -> (x, y)``, the two
    inputs of every CMA block that was reached.
    """
    rgb, flow = _as_input(rgb), _as_input(flow)
    if rgb.shape[0] != flow.shape[0]:
        raise DimensionError(f"batch extents differ: rgb {rgb.shape} vs flow {flow.shape}")
    if rgb.shape[1:3] != flow.shape[1:3]:
        raise DimensionError(f"spatial extents differ: rgb {rgb.shape} vs flow {flow.shape}")
    heads = tuple(heads)
    points = model.insertion if use_cma else ()
    last_point = max(points) if points else None
    train = {n: training and not model.frozen(n) for n in BRANCHES}
    need_full = {n: n in heads for n in BRANCHES}
    active = {n: need_full[n] or last_point is not None for n in BRANCHES}
    h = {}
    for n, x in (("rgb", rgb), ("flow", flow)):
        if active[n]:
            h[n] = model.branch(n).stem_forward(x, train[n])
    for s in range(len(model.rgb.blocks)):
        for b in range(len(model.rgb.blocks[s])):
            point = (s, b)
            past_last = last_point is None or point > last_point
            for n in BRANCHES:
                if n in h and (need_full[n] or not past_last):
                    h[n] = model.branch(n).blocks[s][b](h[n], train[n])
            if point in points:
                pre = dict(h)
                for n, other in (("rgb", "flow"), ("flow", "rgb")):
                    blk = model.branch(n).cma[point]
                    if not (need_full[n] or point < last_point):
                        continue
                    if taps is not None:
                        taps[(n, point)] = (pre[n], pre[other])
                    if not train[n] and _frozen_identity(blk):
                        continue
                    h[n] = cma_block_forward(pre[n], pre[other], blk, train[n])
    out = {}
    for n in heads:
        out[n] = model.branch(n).head(h[n], train[n], rng)
    return out


def tsn_consensus(scores):
    """Average segment scores along the segment axis (axis -2 for stacked arrays).

    Accepts a list of per-segment score vectors, an array ``[K, C]`` or
    ``[B, K, C]``, or a :class:`Tensor` of those shapes.
    """
    if isinstance(scores, Tensor):
        if scores.ndim < 2 or scores.shape[-2] < 1:
            raise ValueError("consensus needs at least one segment")
        return ops.mean_axis(scores, scores.ndim - 2)
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim < 2 or arr.shape[-2] == 0:
        raise ValueError("consensus needs at least one segment")
    return arr.mean(axis=-2)


def video_loss(G, label) -> Tensor:
    """``-(G[label] - log sum_j exp G[j])``, averaged when ``G`` is a batch."""
    G = G if isinstance(G, Tensor) else Tensor(G)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    if G.ndim == 1:
        G = ops.reshape(G, (1, -1))
    if labels.size and (labels.min() < 0 or labels.max() >= G.shape[-1]):
        raise IndexError(f"label {label} out of range for {G.shape[-1]} classes")
    return ops.cross_entropy(G, labels)


def fuse_scores(s_rgb, s_flow, w_rgb: float, w_flow: float) -> np.ndarray:
    if w_rgb < 0 or w_flow < 0:
        raise ValueError("fusion weights must be non-negative")
    if w_rgb == 0 and w_flow == 0:
        raise ValueError("fusion weights cannot both be zero")
    return w_rgb * np.asarray(s_rgb) + w_flow * np.asarray(s_flow)


# ---------------------------------------------------------------------------
# checkpoint file: see docs/formats.md

CKPT_MAGIC = b"CMAW"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(state: dict[str, np.ndarray]) -> bytes:
    header = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(state))]
    payload = []
    offset = 0
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        header.append(struct.pack("<I", len(nb)) + nb)
        header.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<QQ", offset, arr.size))
        payload.append(arr.tobytes())
        offset += arr.size * 8
    header.append(struct.pack("<Q", offset))
    return b"".join(header + payload)


def parse_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    def need(off, n):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint at offset {off}")

    need(0, 12)
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r} at offset 0")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version} at offset 4")
    off = 12
    entries = []
    for _ in range(count):
        need(off, 4)
        (nlen,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, nlen + 4)
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        need(off, 4 * ndim + 16)
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        poff, size = struct.unpack_from("<QQ", buf, off)
        off += 16
        entries.append((name, shape, poff, size))
    need(off, 8)
    (total,) = struct.unpack_from("<Q", buf, off)
    off += 8
    if len(buf) != off + total:
        raise CheckpointError(f"payload size mismatch at offset {off}: declared {total}, found {len(buf) - off}")
    state = {}
    for name, shape, poff, size in entries:
        if poff + 8 * size > total or int(np.prod(shape, dtype=np.int64)) != size:
            raise CheckpointError(f"entry {name!r} at payload offset {poff} is inconsistent")
        state[name] = np.frombuffer(buf, "<f8", size, off + poff).reshape(shape).astype(np.float64)
    return state


def save_checkpoint(model: TwoBranchModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model.state_dict()))


def load_checkpoint(model: TwoBranchModel, path) -> TwoBranchModel:
    with open(path, "rb") as fh:
        state = parse_checkpoint(fh.read())
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    extra = sorted(set(state) - set(expected))
    if missing or extra:
        raise CheckpointError(f"checkpoint does not match the model: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in expected.items():
        if state[name].shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {state[name].shape} != model shape {arr.shape}")
    model.load_state_dict(state)
    return model
