"""Per-participant input features and output decoding.

The 7-D geometric feature of a participant at frame ``t`` (1-based) is::

    [u/w, v/h, (u - u_prev)/w, (v - v_prev)/h, (u - u_1)/w, (v - v_1)/h, t/T]

At the first frame there is no predecessor, so the displacement and
relative components are zero.
"""

from __future__ import annotations

import numpy as np

OUTPUT_MODES = ("uv", "cumdelta", "uvr")


def geometric_vector(uv, prev, first, t: int, w: float, h: float, T: int) -> np.ndarray:
    """7-vector from the current, previous and first positions of one participant."""
    if not 1 <= t <= T:
        raise ValueError(f"frame {t} outside 1..{T}")
    if w <= 0 or h <= 0:
        raise ValueError("scene width and height must be positive")
    (u, v), (pu, pv), (u1, v1) = uv, prev, first
    return np.array([u / w, v / h, (u - pu) / w, (v - pv) / h, (u - u1) / w, (v - v1) / h, t / T])


def geometric_feature(track, t: int, w: float, h: float, T: int) -> np.ndarray:
    """7-vector for frame ``t`` (1-based) of a single ``track`` of (u, v) rows."""
    track = np.asarray(track, dtype=np.float64)
    if not 1 <= t <= min(T, len(track)):
        raise ValueError(f"frame {t} outside 1..{min(T, len(track))}")
    prev = track[t - 2] if t > 1 else track[0]
    return geometric_vector(track[t - 1], prev, track[0], t, w, h, T)


def geometric_features(pos: np.ndarray, wh: np.ndarray, T: int | None = None) -> np.ndarray:
    """Vectorized :func:`geometric_feature`.

    ``pos`` is ``[..., F, 2]`` pixels, ``wh`` broadcasts against ``[..., 2]``
    (typically ``[B, 1, 2]`` for a ``[B, N, F, 2]`` batch). Returns ``[..., F, 7]``.
    """
    pos = np.asarray(pos, dtype=np.float64)
    wh = np.asarray(wh, dtype=np.float64)[..., None, :]
    F = pos.shape[-2]
    T = F if T is None else T
    uv = pos / wh
    delta = np.zeros_like(uv)
    delta[..., 1:, :] = uv[..., 1:, :] - uv[..., :-1, :]
    rel = uv - uv[..., :1, :]
    tt = np.broadcast_to((np.arange(1, F + 1) / T)[:, None], pos.shape[:-1] + (1,))
    return np.concatenate([uv, delta, rel, tt], axis=-1)


def time_column(n_frames: int, T: int, lead_shape: tuple) -> np.ndarray:
    """The ``t/T`` component for frames 1..n_frames, shaped ``lead_shape + (n_frames, 1)``."""
    return np.broadcast_to((np.arange(1, n_frames + 1) / T)[:, None], tuple(lead_shape) + (n_frames, 1))


def positional_encoding(n_frames: int, dim: int) -> np.ndarray:
    """Sinusoidal encoding indexed by frame; identical for every participant."""
    pos = np.arange(1, n_frames + 1, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * i / dim)
    pe = np.zeros((n_frames, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1 : 2 * (dim // 2) : 2] = np.cos(angle)
    return pe


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"action label outside 0..{n_classes - 1}")
    return np.eye(n_classes)[labels]


def decode_positions(geo6: np.ndarray, mode: str, first: np.ndarray, prev: np.ndarray,
                     wh: np.ndarray) -> np.ndarray:
    """Turn one frame's predicted 6-D geometry into pixel positions.

    ``geo6`` is ``[..., 6]`` = (uv, uv-delta, uv-relative); ``first`` and
    ``prev`` are the frame-1 and previous-frame positions in pixels.
    """
    geo6 = np.asarray(geo6)
    wh = np.asarray(wh)
    if mode == "uv":
        return geo6[..., 0:2] * wh
    if mode == "cumdelta":
        return prev + geo6[..., 2:4] * wh
    if mode == "uvr":
        return first + geo6[..., 4:6] * wh
    raise ValueError(f"unknown output mode {mode!r}; expected one of {OUTPUT_MODES}")


def decode_track(geo6: np.ndarray, mode: str, first: np.ndarray, wh: np.ndarray) -> np.ndarray:
    """Decode a sequence ``[..., F, 6]`` of predictions for frames 2..F+1 into pixels.

    Returns ``[..., F + 1, 2]`` including the given first position.
    """
    F = geo6.shape[-2]
    out = np.empty(geo6.shape[:-1][:-1] + (F + 1, 2))
    out[..., 0, :] = first
    for j in range(F):
        out[..., j + 1, :] = decode_positions(geo6[..., j, :], mode, first, out[..., j, :], wh)
    return out
