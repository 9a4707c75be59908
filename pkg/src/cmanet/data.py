"""Motion-texture binding videos with exact optical flow.

Every video shows identical discs with distinct procedural textures on a
flat background. Exactly one disc translates at constant velocity; the label
is that disc's texture. A single frame cannot tell which disc moves and the
flow field carries no texture, so the label needs both modalities bound at
the same location.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

FLOW_CLIP = 20.0
STACK_LENGTH = 5
DATASET_MAGIC = b"CMAD"
DATASET_VERSION = 1


class GenerationError(RuntimeError):
    pass


class FormatError(ValueError):
    pass


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    frames: int = 9
    n_classes: int = 8
    n_distractors: int = 2
    radius: float = 5.0
    speed_min: float = 0.75
    speed_max: float = 1.5
    noise: float = 0.03
    background: float = 0.2
    max_tries: int = 200


@dataclass
class Scene:
    """Ground truth for one video: disc centres are ``(row, col)`` at ``t = 0``."""

    centers: np.ndarray
    textures: np.ndarray
    moving: int
    velocity: np.ndarray
    radius: float

    def center_at(self, obj: int, t: float) -> np.ndarray:
        c = self.centers[obj].astype(np.float64)
        return c + self.velocity * t if obj == self.moving else c


@dataclass
class VideoDataset:
    frames: np.ndarray
    flows: np.ndarray
    labels: np.ndarray
    n_classes: int
    scenes: list = field(default_factory=list)

    def __len__(self) -> int:
        return self.labels.shape[0]

    def __post_init__(self):
        n = self.labels.shape[0]
        if self.frames.shape[0] != n or self.flows.shape[0] != n:
            raise ValueError("frames, flows and labels disagree on video count")
        if self.flows.shape[1] != self.frames.shape[1] - 1:
            raise ValueError("need exactly T-1 flow fields for T frames")

    def subset(self, idx) -> "VideoDataset":
        idx = np.asarray(idx, dtype=np.int64)
        scenes = [self.scenes[i] for i in idx] if self.scenes else []
        return VideoDataset(self.frames[idx], self.flows[idx], self.labels[idx], self.n_classes, scenes)


# ---------------------------------------------------------------------------
# textures and rendering


def _palette(n: int) -> np.ndarray:
    hues = np.arange(n) / n
    cols = []
    for h in hues:
        r = np.clip(np.abs(h * 6 - 3) - 1, 0, 1)
        g = np.clip(2 - np.abs(h * 6 - 2), 0, 1)
        b = np.clip(2 - np.abs(h * 6 - 4), 0, 1)
        cols.append((r, g, b))
    return 0.25 + 0.7 * np.array(cols)


def texture_values(tex: int, n_textures: int, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    """RGB of texture ``tex`` at offsets ``(dy, dx)`` from the disc centre."""
    base = _palette(n_textures)[tex]
    kind = tex % 4
    if kind == 0:
        pattern = np.cos(np.pi * dy / 1.5)
    elif kind == 1:
        pattern = np.cos(np.pi * dx / 1.5)
    elif kind == 2:
        pattern = np.cos(np.pi * dy / 1.5) * np.cos(np.pi * dx / 1.5)
    else:
        pattern = np.cos(np.pi * np.hypot(dy, dx) / 1.5)
    shade = 0.85 + 0.15 * pattern
    return np.clip(base[None, :] * shade[:, None], 0.0, 1.0)


def _disc_mask(center: np.ndarray, radius: float, H: int, W: int):
    rows, cols = np.mgrid[0:H, 0:W]
    dy = rows - center[0]
    dx = cols - center[1]
    return dy * dy + dx * dx <= radius * radius, dy, dx


def render_frame(scene: Scene, t: int, H: int, W: int, n_textures: int, background: float) -> np.ndarray:
    img = np.full((H, W, 3), background)
    for obj in range(len(scene.textures)):
        mask, dy, dx = _disc_mask(scene.center_at(obj, t), scene.radius, H, W)
        img[mask] = texture_values(int(scene.textures[obj]), n_textures, dy[mask], dx[mask])
    return img


def analytic_flow(scene: Scene, t: int, H: int, W: int) -> np.ndarray:
    """Flow ``(u, v)`` in pixels/frame between frames ``t`` and ``t + 1``.

    ``u`` is horizontal (column) motion, ``v`` vertical. Non-zero exactly on
    the moving disc's support at time ``t``.
    """
    flow = np.zeros((H, W, 2))
    if scene.moving < 0 or not np.any(scene.velocity):
        return flow
    mask, _, _ = _disc_mask(scene.center_at(scene.moving, t), scene.radius, H, W)
    flow[mask, 0] = scene.velocity[1]
    flow[mask, 1] = scene.velocity[0]
    return flow


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _point_segment_distance(p, a, b) -> np.ndarray:
    d = b - a
    denom = np.einsum("...i,...i->...", d, d)
    num = np.einsum("...i,...i->...", p - a, d)
    t = np.clip(np.divide(num, denom, out=np.zeros_like(num), where=denom > 0), 0.0, 1.0)
    diff = p - (a + t[..., None] * d)
    return np.hypot(diff[..., 0], diff[..., 1])


def segment_distance(p0, p1, q0, q1):
    """Smallest distance between 2-D segments ``p0p1`` and ``q0q1`` (broadcasts)."""
    p0, p1, q0, q1 = (np.asarray(v, dtype=np.float64) for v in (p0, p1, q0, q1))

    def cross(o, a, b):
        return (a[..., 0] - o[..., 0]) * (b[..., 1] - o[..., 1]) - (a[..., 1] - o[..., 1]) * (b[..., 0] - o[..., 0])

    crossing = (cross(p0, p1, q0) * cross(p0, p1, q1) < 0) & (cross(q0, q1, p0) * cross(q0, q1, p1) < 0)
    d = np.minimum(
        np.minimum(_point_segment_distance(p0, q0, q1), _point_segment_distance(p1, q0, q1)),
        np.minimum(_point_segment_distance(q0, p0, p1), _point_segment_distance(q1, p0, p1)),
    )
    return np.where(crossing, 0.0, d)


def _draw_tracks(rng: np.random.Generator, cfg: DataConfig, m: int):
    """``m`` random constant-velocity tracks; rows whose disc would leave the frame are dropped."""
    H, W, T, r = cfg.height, cfg.width, cfg.frames, cfg.radius
    speed = rng.uniform(cfg.speed_min, cfg.speed_max, m)
    angle = rng.uniform(0.0, 2 * np.pi, m)
    vel = _f32(np.stack([speed * np.sin(angle), speed * np.cos(angle)], axis=1))
    span = vel * (T - 1)
    lo = np.stack([r - np.minimum(span[:, 0], 0), r - np.minimum(span[:, 1], 0)], axis=1)
    hi = np.stack([H - 1 - r - np.maximum(span[:, 0], 0), W - 1 - r - np.maximum(span[:, 1], 0)], axis=1)
    u = rng.random((m, 2))
    ok = np.all(lo <= hi, axis=1)
    start = _f32(lo + u * (hi - lo))
    return start[ok], vel[ok]


def _place_scene(rng: np.random.Generator, label: int, cfg: DataConfig) -> Scene:
    """Non-overlapping discs whose placement does not reveal which one moves.

    Every disc gets its own track and tracks keep ``2r + 1`` apart, so no two
    discs ever touch whichever one moves. One track is then picked at random
    to be the mover; the others freeze at a random point of their track that
    an RGB snippet frame could show. Static and moving discs therefore share
    one position distribution.
    """
    others = [c for c in range(cfg.n_classes) if c != label]
    if cfg.n_distractors > len(others):
        raise GenerationError("more distractors than spare textures")
    n = cfg.n_distractors + 1
    T = cfg.frames
    min_gap = 2 * cfg.radius + 1.0
    batch = 256
    for _ in range(cfg.max_tries):
        tracks = []
        for _k in range(n):
            start, vel = _draw_tracks(rng, cfg, batch)
            end = start + vel * (T - 1)
            free = np.ones(len(start), dtype=bool)
            for s0, e0, _v in tracks:
                free &= segment_distance(start, end, s0, e0) >= min_gap
            hit = np.flatnonzero(free)
            if hit.size == 0:
                break
            i = hit[0]
            tracks.append((start[i], end[i], vel[i]))
        if len(tracks) < n:
            continue
        moving = int(rng.integers(n))
        last_rgb = max(0, T - 1 - STACK_LENGTH)
        centers = []
        for k, (start, _end, vel) in enumerate(tracks):
            centers.append(start if k == moving else _f32(start + vel * int(rng.integers(last_rgb + 1))))
        textures = np.empty(n, dtype=np.int64)
        textures[moving] = label
        textures[np.arange(n) != moving] = rng.choice(others, size=n - 1, replace=False)
        return Scene(np.array(centers), textures, moving, tracks[moving][2], cfg.radius)
    raise GenerationError(f"could not place {n} discs without overlap")


def generate_video(rng: np.random.Generator, label: int, cfg: DataConfig):
    scene = _place_scene(rng, label, cfg)
    H, W, T = cfg.height, cfg.width, cfg.frames
    frames = np.stack([render_frame(scene, t, H, W, cfg.n_classes, cfg.background) for t in range(T)])
    if cfg.noise > 0:
        frames = np.clip(frames + rng.normal(0.0, cfg.noise, frames.shape), 0.0, 1.0)
    flows = np.stack([analytic_flow(scene, t, H, W) for t in range(T - 1)])
    return _f32(frames), _f32(flows), scene


def generate_binding_dataset(n_videos: int, cfg: DataConfig | None = None, seed: int = 0) -> VideoDataset:
    """Balanced labels; video ``i`` draws from its own child seed."""
    cfg = cfg or DataConfig()
    if cfg.n_classes < 1:
        raise GenerationError("need at least one class")
    root = np.random.SeedSequence(seed)
    labels = np.arange(n_videos) % cfg.n_classes
    labels = np.random.default_rng(root.spawn(1)[0]).permutation(labels)
    children = root.spawn(n_videos) if n_videos else []
    frames, flows, scenes = [], [], []
    for i in range(n_videos):
        f, fl, sc = generate_video(np.random.default_rng(children[i]), int(labels[i]), cfg)
        frames.append(f)
        flows.append(fl)
        scenes.append(sc)
    H, W, T = cfg.height, cfg.width, cfg.frames
    return VideoDataset(
        np.stack(frames) if frames else np.zeros((0, T, H, W, 3)),
        np.stack(flows) if flows else np.zeros((0, T - 1, H, W, 2)),
        labels.astype(np.int64),
        cfg.n_classes,
        scenes,
    )


# ---------------------------------------------------------------------------
# snippet pipeline


def preprocess_flow(raw) -> np.ndarray:
    """Clamp to [-20, 20] pixels and rescale to [-1, 1]."""
    return np.clip(np.asarray(raw, dtype=np.float64), -FLOW_CLIP, FLOW_CLIP) / FLOW_CLIP


@dataclass
class Snippet:
    rgb: np.ndarray
    flow_stack: np.ndarray
    label: int
    start: int


def snippet_starts(n_frames: int, K: int, rng: np.random.Generator | None, train: bool) -> np.ndarray:
    """One stack start per equal segment of the valid start range."""
    n_starts = n_frames - 1 - STACK_LENGTH + 1
    if n_starts < 1:
        raise ValueError(f"{n_frames} frames give fewer than {STACK_LENGTH} flow fields")
    if K < 1:
        raise ValueError("need at least one segment")
    k = np.arange(K)
    if train:
        lo = np.floor(k * n_starts / K).astype(np.int64)
        hi = np.maximum(lo + 1, np.ceil((k + 1) * n_starts / K).astype(np.int64))
        return rng.integers(lo, hi)
    return np.minimum((n_starts * (k + 0.5) / K).astype(np.int64), n_starts - 1)


def stack_flows(flows: np.ndarray, start: int) -> np.ndarray:
    """Preprocessed fields ``start .. start+4`` interleaved as ``u0, v0, u1, v1, ...``."""
    block = preprocess_flow(flows[start : start + STACK_LENGTH])
    return block.transpose(1, 2, 0, 3).reshape(block.shape[1], block.shape[2], 2 * STACK_LENGTH)


def tsn_sample_snippets(video_frames, video_flows, label: int, K: int, rng=None, train: bool = False) -> list[Snippet]:
    starts = snippet_starts(video_frames.shape[0], K, rng, train)
    return [Snippet(video_frames[s], stack_flows(video_flows, s), int(label), int(s)) for s in starts]


def hflip(rgb: np.ndarray, flow: np.ndarray):
    """Mirror columns; horizontal flow components change sign."""
    rgb = rgb[..., ::-1, :].copy()
    flow = flow[..., ::-1, :].copy()
    flow[..., 0::2] *= -1.0
    return rgb, flow


def augment(snippet: Snippet, rng: np.random.Generator, flip_prob: float = 0.5, crop: int | None = None) -> Snippet:
    """Same random crop and horizontal flip for the frame and every flow channel."""
    rgb, flow = snippet.rgb, snippet.flow_stack
    H, W = rgb.shape[:2]
    c = H if crop is None else crop
    if c > H or c > W:
        raise ValueError(f"crop {c} larger than frame {H}x{W}")
    oy = int(rng.integers(0, H - c + 1))
    ox = int(rng.integers(0, W - c + 1))
    rgb, flow = rgb[oy : oy + c, ox : ox + c], flow[oy : oy + c, ox : ox + c]
    if rng.random() < flip_prob:
        rgb, flow = hflip(rgb, flow)
    return Snippet(np.ascontiguousarray(rgb), np.ascontiguousarray(flow), snippet.label, snippet.start)


def center_crop(a: np.ndarray, crop: int | None) -> np.ndarray:
    """Centre crop over the two axes before channels."""
    if crop is None:
        return a
    H, W = a.shape[-3], a.shape[-2]
    if crop > H or crop > W:
        raise ValueError(f"crop {crop} larger than frame {H}x{W}")
    oy, ox = (H - crop) // 2, (W - crop) // 2
    return a[..., oy : oy + crop, ox : ox + crop, :]


def batch_snippets(ds: VideoDataset, idx, K: int, rng=None, train: bool = False, flip_prob: float = 0.5, crop=None):
    """Stack ``len(idx) * K`` snippets into RGB and flow arrays, video-major."""
    rgbs, flows = [], []
    for i in idx:
        for sn in tsn_sample_snippets(ds.frames[i], ds.flows[i], ds.labels[i], K, rng, train):
            if train:
                sn = augment(sn, rng, flip_prob, crop)
                rgbs.append(sn.rgb)
                flows.append(sn.flow_stack)
            else:
                rgbs.append(center_crop(sn.rgb, crop))
                flows.append(center_crop(sn.flow_stack, crop))
    return np.stack(rgbs), np.stack(flows)


# ---------------------------------------------------------------------------
# on-disk format

_HEADER = struct.Struct("<4sI5I")


def dataset_bytes(ds: VideoDataset) -> bytes:
    n, T, H, W, _ = ds.frames.shape
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, T, H, W, ds.n_classes)]
    for i in range(n):
        parts.append(ds.frames[i].astype("<f4").tobytes())
        parts.append(ds.flows[i].astype("<f4").tobytes())
    parts.append(ds.labels.astype("<u4").tobytes())
    return b"".join(parts)


def write_dataset(ds: VideoDataset, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dataset_bytes(ds))


def parse_dataset(buf: bytes) -> VideoDataset:
    if len(buf) < _HEADER.size:
        raise FormatError(f"truncated header at offset {len(buf)}: need {_HEADER.size} bytes")
    magic, version, n, T, H, W, C = _HEADER.unpack_from(buf, 0)
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version} at offset 4")
    if T < 2:
        raise FormatError(f"frame count {T} at offset 12 must be >= 2")
    fsz, flsz = T * H * W * 3, (T - 1) * H * W * 2
    expected = _HEADER.size + n * 4 * (fsz + flsz) + 4 * n
    if len(buf) != expected:
        raise FormatError(f"size mismatch at offset {min(len(buf), expected)}: file has {len(buf)} bytes, header declares {expected}")
    off = _HEADER.size
    frames = np.empty((n, T, H, W, 3))
    flows = np.empty((n, T - 1, H, W, 2))
    for i in range(n):
        frames[i] = np.frombuffer(buf, "<f4", fsz, off).reshape(T, H, W, 3)
        off += 4 * fsz
        flows[i] = np.frombuffer(buf, "<f4", flsz, off).reshape(T - 1, H, W, 2)
        off += 4 * flsz
    labels = np.frombuffer(buf, "<u4", n, off).astype(np.int64)
    if n and labels.max() >= C:
        raise FormatError(f"label {labels.max()} at offset {off} exceeds class count {C}")
    return VideoDataset(frames, flows, labels, C)


def read_dataset(path) -> VideoDataset:
    with open(path, "rb") as fh:
        return parse_dataset(fh.read())
