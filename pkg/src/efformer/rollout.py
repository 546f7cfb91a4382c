"""Frame-wise inference (K >= 1) and prediction (K = 0) of target behavior."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClipBatch
from .features import decode_positions, one_hot, time_column
from .model import EFTransformer
from .tensor import no_grad

SPIKE_VECTOR = (1.0, 1.0, -1.0, -1.0, -1.0, -1.0)


@dataclass
class Spike:
    """Replace the 6-D geometric estimate at each of ``frames`` (1-based) by ``vector``."""

    frames: tuple
    vector: tuple = SPIKE_VECTOR

    def __post_init__(self):
        self.frames = tuple(int(f) for f in self.frames)
        self.vector = tuple(float(x) for x in self.vector)
        if len(self.vector) != 6:
            raise ValueError("spike vector must have 6 components")


@dataclass
class RolloutResult:
    positions: np.ndarray            # [B, Nt, T, 2] pixels; frame 1 is the given state
    geometry: np.ndarray             # [B, Nt, T, 6]; frame 1 from ground truth
    action_logits: np.ndarray        # [B, Nt, T, C]; frame 1 is NaN
    actions: np.ndarray              # [B, Nt, T] labels fed back as history
    mode: str = "uvr"
    attention: list = field(default_factory=list)   # per step: decoder trace

    def positions_in(self, mode: str, first: np.ndarray, wh: np.ndarray) -> np.ndarray:
        """Re-decode the stored geometry under another output mode."""
        out = np.empty_like(self.positions)
        out[:, :, 0] = first
        for t in range(1, out.shape[2]):
            out[:, :, t] = decode_positions(self.geometry[:, :, t], mode, first, out[:, :, t - 1], wh)
        return out


def rollout(model: EFTransformer, batch: ClipBatch, K: int, multi_task: bool = False,
            spike: Spike | None = None, mode: str | None = None, trace: bool = False) -> RolloutResult:
    """Estimate targets for frames 2..T one frame at a time.

    History fed to the decoder is the ground-truth first frame followed by the
    model's own 6-D estimates. Action history is ground truth unless
    ``multi_task``, in which case the argmax of the predicted logits is used.
    """
    T = batch.n_frames
    if not 0 <= K <= T - 1:
        raise ValueError(f"foresight K={K} outside 0..{T - 1}")
    if spike is not None:
        bad = [f for f in spike.frames if not 2 <= f <= T - 1]
        if bad:
            raise ValueError(f"spike frames {bad} outside 2..{T - 1}")
    cfg = model.cfg
    mode = mode or cfg.output_mode
    C = cfg.n_actions
    B, Nt = batch.tgt_pos.shape[:2]
    wh = batch.wh[:, None, :]

    geo = np.zeros((B, Nt, T, 6))
    geo[:, :, 0, 0:2] = batch.tgt_pos[:, :, 0] / wh
    acts = np.zeros((B, Nt, T), dtype=np.int64)
    acts[:, :, 0] = batch.tgt_act[:, :, 0]
    pos = np.zeros((B, Nt, T, 2))
    pos[:, :, 0] = batch.tgt_pos[:, :, 0]
    logits = np.full((B, Nt, T, C), np.nan)
    first = batch.tgt_pos[:, :, 0]
    snapshots = []
    spike_frames = set(spike.frames) if spike is not None else set()

    obs_oh, _ = batch.onehots(C)
    with no_grad():
        xenc = model.st_encode(model.embed(batch.obs_geo(), obs_oh), K)
        for p in range(T - 1):
            n = p + 1
            hist7 = np.concatenate([geo[:, :, :n], time_column(n, T, (B, Nt))], axis=-1)
            hist = model.embed(hist7, one_hot(acts[:, :, :n], C))
            rec = [] if trace else None
            dec = model.decode_step(xenc, hist, rec)
            g, a = model.predict_head(dec[:, :, None])
            g6 = g.data[:, :, 0].astype(np.float64)
            frame = p + 2
            if frame in spike_frames:
                g6 = np.broadcast_to(np.asarray(spike.vector), g6.shape).copy()
            geo[:, :, p + 1] = g6
            logits[:, :, p + 1] = a.data[:, :, 0]
            acts[:, :, p + 1] = logits[:, :, p + 1].argmax(-1) if multi_task else batch.tgt_act[:, :, p + 1]
            pos[:, :, p + 1] = decode_positions(g6, mode, first, pos[:, :, p], wh)
            if trace:
                snapshots.append(rec)
    return RolloutResult(pos, geo, logits, acts, mode, snapshots)
