"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

import numbers

import numpy as np

from cmanet.data import VideoDataset

RGB_CHANNELS = 3
FLOW_CHANNELS = 2
PACKED_CHANNELS = RGB_CHANNELS + FLOW_CHANNELS


def check_random_state(seed) -> int:
    """Integer seeds only: every run must be reproducible from its arguments."""
    if seed is None:
        return 0
    if isinstance(seed, (bool, np.bool_)) or not isinstance(seed, numbers.Integral):
        raise TypeError(f"random_state must be an int, got {type(seed).__name__}")
    if seed < 0:
        raise ValueError(f"random_state must be non-negative, got {seed}")
    return int(seed)


def check_positive_int(name: str, value, minimum: int = 1) -> int:
    if isinstance(value, (bool, np.bool_)) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an int, got {value!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_fusion_weights(weights) -> tuple[float, float]:
    try:
        w_rgb, w_flow = (float(v) for v in weights)
    except (TypeError, ValueError):
        raise ValueError(f"fusion weights must be a pair of numbers, got {weights!r}") from None
    if not (np.isfinite(w_rgb) and np.isfinite(w_flow)) or w_rgb < 0 or w_flow < 0 or w_rgb + w_flow == 0:
        raise ValueError(f"fusion weights must be finite, non-negative and not both zero, got {weights!r}")
    return w_rgb, w_flow


def pack_videos(ds: VideoDataset) -> np.ndarray:
    """``[n, T, H, W, 5]``: RGB in channels 0..2, flow (u, v) in 3..4, last flow step zero."""
    n, T, H, W, _ = ds.frames.shape
    out = np.zeros((n, T, H, W, PACKED_CHANNELS))
    out[..., :RGB_CHANNELS] = ds.frames
    out[:, : T - 1, :, :, RGB_CHANNELS:] = ds.flows
    return out


def unpack_videos(X: np.ndarray):
    X = np.asarray(X, dtype=np.float64)
    return X[..., :RGB_CHANNELS], X[:, :-1, :, :, RGB_CHANNELS:]


def check_videos(X, y=None, n_classes: int | None = None, ignore_labels: bool = False) -> VideoDataset:
    """Accept a :class:`VideoDataset` or a packed ``[n, T, H, W, 5]`` array.

    ``y`` overrides the dataset's labels when given and must hold integers in
    ``[0, n_classes)``. With ``ignore_labels`` the result carries zero labels,
    which is what prediction needs.
    """
    if isinstance(X, VideoDataset):
        frames, flows = X.frames, X.flows
        labels = X.labels if y is None else y
        n_classes = n_classes or X.n_classes
    else:
        arr = np.asarray(X)
        if arr.ndim != 5 or arr.shape[-1] != PACKED_CHANNELS:
            raise ValueError(f"expected packed videos of shape [n, T, H, W, {PACKED_CHANNELS}], got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.number):
            raise TypeError(f"video array must be numeric, got {arr.dtype}")
        frames, flows = unpack_videos(arr)
        labels = np.zeros(arr.shape[0], dtype=np.int64) if y is None else y
    if ignore_labels:
        labels = np.zeros(frames.shape[0], dtype=np.int64)
    if frames.shape[0] == 0:
        raise ValueError("need at least one video")
    if frames.shape[1] < 2:
        raise ValueError(f"need at least 2 frames per video, got {frames.shape[1]}")
    if not (np.all(np.isfinite(frames)) and np.all(np.isfinite(flows))):
        raise ValueError("videos contain NaN or Inf")
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != frames.shape[0]:
        raise ValueError(f"labels must be 1-D with one entry per video, got shape {labels.shape}")
    if labels.size and not np.all(np.equal(np.mod(labels, 1), 0)):
        raise ValueError("labels must be integers")
    labels = labels.astype(np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must lie in [0, {n_classes})")
    return VideoDataset(np.asarray(frames, dtype=np.float64), np.asarray(flows, dtype=np.float64), labels, int(n_classes))
